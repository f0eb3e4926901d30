//! Multiple imputation by chained equations with predictive mean matching,
//! and Rubin's rules.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;

use crate::glm::{fit_glm, Family};
use crate::matrix::{spd_inverse, Matrix};
use crate::rng::{SimRng, StreamKey};
use crate::table::{ColumnKind, Dataset, TableError};

#[derive(Debug, thiserror::Error)]
pub enum MiceError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("column `{0}` has no observed cells")]
    EntirelyMissing(String),
    #[error("no fully observed predictor column")]
    NoObservedColumn,
    #[error("imputation {imputation} failed: regression for `{column}` did not converge after restarts")]
    Failed { imputation: usize, column: String },
    #[error("pooling needs at least two estimates, got {0}")]
    TooFew(usize),
    #[error(transparent)]
    Table(#[from] TableError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiceConfig {
    pub m: usize,
    pub max_iter: usize,
    pub pmm_donors: usize,
    /// Incomplete columns in visiting order; `None` means declared order.
    pub visit_order: Option<Vec<String>>,
    /// Columns never used as predictors (e.g. the observation indicator).
    pub exclude: Vec<String>,
    pub seed: u64,
}

impl MiceConfig {
    pub fn new(m: usize, max_iter: usize, seed: u64) -> Self {
        MiceConfig { m, max_iter, pmm_donors: 5, visit_order: None, exclude: Vec::new(), seed }
    }

    fn validate(&self) -> Result<(), MiceError> {
        if self.m < 2 {
            return Err(MiceError::Config(format!("m = {} (need at least 2)", self.m)));
        }
        if self.max_iter == 0 || self.pmm_donors == 0 {
            return Err(MiceError::Config("max_iter and pmm_donors must be at least 1".into()));
        }
        Ok(())
    }
}

const MAX_RESTARTS: usize = 3;

/// Numeric predictor features derived from one dataset column.
struct Block {
    source: usize,
    features: Vec<Vec<f64>>,
}

fn expand(kind: &ColumnKind, values: &[f64]) -> Vec<Vec<f64>> {
    match kind {
        ColumnKind::Categorical(levels) => (1..levels.len())
            .map(|k| values.iter().map(|v| f64::from(u8::from(*v == k as f64))).collect())
            .collect(),
        _ => vec![values.to_vec()],
    }
}

struct Chain<'a> {
    d: &'a Dataset,
    values: Vec<Vec<f64>>,
    blocks: Vec<Block>,
    donors: usize,
}

/// One imputation model: the estimate and a posterior draw around it.
struct Draw {
    beta_hat: Vec<f64>,
    beta_star: Vec<f64>,
}

impl<'a> Chain<'a> {
    fn new(d: &'a Dataset, exclude: &[String]) -> Self {
        let values: Vec<Vec<f64>> = d.columns().iter().map(|c| c.values().to_vec()).collect();
        let blocks = d
            .columns()
            .iter()
            .enumerate()
            .filter(|(_, c)| !exclude.contains(&c.name))
            .map(|(i, c)| Block { source: i, features: expand(&c.kind, &values[i]) })
            .collect();
        Chain { d, values, blocks, donors: 0 }
    }

    fn refresh(&mut self, col: usize) {
        let kind = &self.d.columns()[col].kind;
        for b in &mut self.blocks {
            if b.source == col {
                b.features = expand(kind, &self.values[col]);
            }
        }
    }

    fn design(&self, target: usize, allowed: Option<&[usize]>) -> Matrix {
        let n = self.d.n_rows();
        let mut cols: Vec<&[f64]> = Vec::new();
        for b in &self.blocks {
            if b.source == target || allowed.is_some_and(|a| !a.contains(&b.source)) {
                continue;
            }
            cols.extend(b.features.iter().map(Vec::as_slice));
        }
        let p = cols.len() + 1;
        let mut data = vec![0.0; n * p];
        for i in 0..n {
            let row = &mut data[i * p..(i + 1) * p];
            row[0] = 1.0;
            for (j, c) in cols.iter().enumerate() {
                row[j + 1] = c[i];
            }
        }
        Matrix::from_row_major(n, p, data)
    }

    /// Fit the imputation model for `target` on `fit_rows` and draw
    /// parameters. `None` when the fit is degenerate.
    fn draw(&self, target: usize, x: &Matrix, fit_rows: &[usize], rng: &mut SimRng) -> Option<Draw> {
        let y_all = &self.values[target];
        let xo = x.select_rows(fit_rows);
        let yo: Vec<f64> = fit_rows.iter().map(|&i| y_all[i]).collect();
        let p = x.cols();
        let binary = self.d.columns()[target].kind == ColumnKind::Binary;
        let (beta_hat, beta_star) = if binary {
            let fit = fit_glm(&xo, &yo, &vec![1.0; yo.len()], Family::Binomial).ok()?;
            if !fit.converged {
                return None;
            }
            let chol = fit.covariance.clone().cholesky()?;
            let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let star = DVector::from_column_slice(&fit.coefficients) + chol.l() * z;
            (fit.coefficients.clone(), star.as_slice().to_vec())
        } else {
            let n_obs = yo.len();
            if n_obs <= p {
                return None;
            }
            let xtx = crate::matrix::weighted_gram(&xo, &vec![1.0; n_obs]);
            let xty = crate::matrix::weighted_xtv(&xo, &vec![1.0; n_obs], &yo);
            let inv = spd_inverse(&xtx)?;
            let beta = &inv * xty;
            let rss: f64 = (0..n_obs).map(|i| (yo[i] - crate::matrix::dot(xo.row(i), beta.as_slice())).powi(2)).sum();
            let chi: f64 = ChiSquared::new((n_obs - p) as f64).ok()?.sample(rng);
            let sigma = (rss / chi).max(0.0).sqrt();
            let chol = inv.cholesky()?;
            let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let star = &beta + chol.l() * z * sigma;
            (beta.as_slice().to_vec(), star.as_slice().to_vec())
        };
        Some(Draw { beta_hat, beta_star })
    }

    /// Predictive mean matching: for each target pick uniformly among the
    /// `donors` donor rows whose fitted value is nearest the target's drawn
    /// prediction. `fitted` is indexed like `donor_rows`, `drawn` like
    /// `targets`.
    #[allow(clippy::too_many_arguments)]
    fn pmm(
        &self,
        target: usize,
        fitted: &[f64],
        drawn: &[f64],
        donor_rows: &[usize],
        targets: &[usize],
        exclude_self: bool,
        rng: &mut SimRng,
    ) -> Vec<f64> {
        let mut sorted: Vec<(f64, usize)> = donor_rows.iter().zip(fitted).map(|(&j, f)| (*f, j)).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let obs = &self.values[target];
        let mut picks = Vec::with_capacity(self.donors);
        targets
            .iter()
            .zip(drawn)
            .map(|(&i, &t)| {
                let mut right = sorted.partition_point(|(v, _)| *v < t);
                let mut left = right;
                picks.clear();
                while picks.len() < self.donors && (left > 0 || right < sorted.len()) {
                    let take_left = match (left > 0, right < sorted.len()) {
                        (true, true) => t - sorted[left - 1].0 <= sorted[right].0 - t,
                        (l, _) => l,
                    };
                    let (_, j) = if take_left {
                        left -= 1;
                        sorted[left]
                    } else {
                        right += 1;
                        sorted[right - 1]
                    };
                    if !(exclude_self && j == i) {
                        picks.push(j);
                    }
                }
                match picks.len() {
                    // Only possible when the target is the sole donor.
                    0 => obs[i],
                    k => obs[picks[rng.random_range(0..k)]],
                }
            })
            .collect()
    }
}

fn visit_order(d: &Dataset, config: &MiceConfig) -> Result<Vec<usize>, MiceError> {
    let incomplete: Vec<usize> = d
        .columns()
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.is_fully_observed())
        .map(|(i, _)| i)
        .collect();
    for &i in &incomplete {
        let c = &d.columns()[i];
        if c.missing_count() == d.n_rows() {
            return Err(MiceError::EntirelyMissing(c.name.clone()));
        }
    }
    if !incomplete.is_empty() && !d.columns().iter().any(|c| c.is_fully_observed() && !config.exclude.contains(&c.name)) {
        return Err(MiceError::NoObservedColumn);
    }
    match &config.visit_order {
        None => Ok(incomplete),
        Some(order) => {
            let mut out = Vec::new();
            for name in order {
                let idx = d.columns().iter().position(|c| &c.name == name).ok_or_else(|| TableError::NoSuchColumn(name.clone()))?;
                if incomplete.contains(&idx) && !out.contains(&idx) {
                    out.push(idx);
                }
            }
            if out.len() != incomplete.len() {
                return Err(MiceError::Config("visit order does not cover every incomplete column".into()));
            }
            Ok(out)
        }
    }
}

fn finish(d: &Dataset, values: Vec<Vec<f64>>) -> Result<Dataset, MiceError> {
    let mut out = Dataset::new(d.n_rows());
    for (c, v) in d.columns().iter().zip(values) {
        let has_missing = v.iter().any(|x| x.is_nan());
        let mask = has_missing.then(|| v.iter().map(|x| x.is_nan()).collect());
        out.push_column(&c.name, c.kind.clone(), v, mask)?;
    }
    Ok(out)
}

fn impute_once(d: &Dataset, config: &MiceConfig, order: &[usize], imputation: usize) -> Result<Dataset, MiceError> {
    let mut rng = StreamKey::root(config.seed).label("mice").child(imputation as u64).rng();
    let mut chain = Chain::new(d, &config.exclude);
    chain.donors = config.pmm_donors;
    let missing_rows: Vec<Vec<usize>> = order.iter().map(|&c| (0..d.n_rows()).filter(|&i| d.columns()[c].missing()[i]).collect()).collect();
    let observed_rows: Vec<Vec<usize>> = order.iter().map(|&c| (0..d.n_rows()).filter(|&i| !d.columns()[c].missing()[i]).collect()).collect();

    for (k, &c) in order.iter().enumerate() {
        for &i in &missing_rows[k] {
            let j = observed_rows[k][rng.random_range(0..observed_rows[k].len())];
            chain.values[c][i] = chain.values[c][j];
        }
        chain.refresh(c);
    }

    for _sweep in 0..config.max_iter {
        let snapshot: Vec<Vec<f64>> = order.iter().map(|&c| chain.values[c].clone()).collect();
        let mut restarts = 0;
        'sweep: loop {
            for (k, &c) in order.iter().enumerate() {
                let x = chain.design(c, None);
                let Some(draw) = chain.draw(c, &x, &observed_rows[k], &mut rng) else {
                    if restarts == MAX_RESTARTS {
                        return Err(MiceError::Failed { imputation, column: d.columns()[c].name.clone() });
                    }
                    restarts += 1;
                    for (kk, &cc) in order.iter().enumerate() {
                        chain.values[cc].clone_from(&snapshot[kk]);
                        chain.refresh(cc);
                    }
                    continue 'sweep;
                };
                let fitted = x.select_rows(&observed_rows[k]).mul_vec(&draw.beta_hat);
                let drawn = x.select_rows(&missing_rows[k]).mul_vec(&draw.beta_star);
                let imputed = chain.pmm(c, &fitted, &drawn, &observed_rows[k], &missing_rows[k], false, &mut rng);
                for (&i, v) in missing_rows[k].iter().zip(imputed) {
                    chain.values[c][i] = v;
                }
                chain.refresh(c);
            }
            break;
        }
    }
    finish(d, chain.values)
}

/// `config.m` completed copies of `d`. Observed cells are never changed and
/// every imputed cell is an observed value of the same column.
pub fn mice_impute(d: &Dataset, config: &MiceConfig) -> Result<Vec<Dataset>, MiceError> {
    config.validate()?;
    let order = visit_order(d, config)?;
    if order.is_empty() {
        return Ok(vec![d.clone(); config.m]);
    }
    (0..config.m).into_par_iter().map(|m| impute_once(d, config, &order, m)).collect()
}

fn impute_all_rows_once(d: &Dataset, config: &MiceConfig, order: &[usize], imputation: usize) -> Result<Dataset, MiceError> {
    let mut rng = StreamKey::root(config.seed).label("phase-one").child(imputation as u64).rng();
    let mut chain = Chain::new(d, &config.exclude);
    chain.donors = config.pmm_donors;
    let n = d.n_rows();
    let all: Vec<usize> = (0..n).collect();
    let mut allowed: Vec<usize> = d
        .columns()
        .iter()
        .enumerate()
        .filter(|(_, c)| c.is_fully_observed() && !config.exclude.contains(&c.name))
        .map(|(i, _)| i)
        .collect();
    let truth = chain.values.clone();
    let mut imputed: Vec<Vec<f64>> = Vec::new();
    for (k, &c) in order.iter().enumerate() {
        // Fit on rows where the target and all earlier columns are observed,
        // using their true values; predict every row from imputed values.
        let fit_rows: Vec<usize> =
            (0..n).filter(|&i| !truth[c][i].is_nan() && order[..k].iter().all(|&e| !truth[e][i].is_nan())).collect();
        if fit_rows.is_empty() {
            return Err(MiceError::EntirelyMissing(d.columns()[c].name.clone()));
        }
        for &e in &order[..k] {
            chain.values[e].clone_from(&truth[e]);
            chain.refresh(e);
        }
        let x_fit = chain.design(c, Some(&allowed));
        let mut draw = None;
        for _ in 0..=MAX_RESTARTS {
            if let Some(dr) = chain.draw(c, &x_fit, &fit_rows, &mut rng) {
                draw = Some(dr);
                break;
            }
        }
        let Some(draw) = draw else {
            return Err(MiceError::Failed { imputation, column: d.columns()[c].name.clone() });
        };
        let fitted = x_fit.select_rows(&fit_rows).mul_vec(&draw.beta_hat);
        for (e, v) in order[..k].iter().zip(&imputed) {
            chain.values[*e].clone_from(v);
            chain.refresh(*e);
        }
        let drawn = chain.design(c, Some(&allowed)).mul_vec(&draw.beta_star);
        let values = chain.pmm(c, &fitted, &drawn, &fit_rows, &all, true, &mut rng);
        imputed.push(values);
        allowed.push(c);
    }
    let mut values = truth;
    for (&c, v) in order.iter().zip(imputed) {
        values[c] = v;
    }
    finish(d, values)
}

/// Imputations of every incomplete column for every row, observed rows
/// included, drawn from phase-one information only (fully observed columns
/// plus earlier imputed columns). An observed row never donates to itself.
pub fn impute_all_rows(d: &Dataset, config: &MiceConfig) -> Result<Vec<Dataset>, MiceError> {
    config.validate()?;
    let order = visit_order(d, config)?;
    if order.is_empty() {
        return Ok(vec![d.clone(); config.m]);
    }
    (0..config.m).into_par_iter().map(|m| impute_all_rows_once(d, config, &order, m)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledEstimate {
    pub point: f64,
    pub total_variance: f64,
    pub within: f64,
    pub between: f64,
    /// Degrees of freedom; infinite when the between variance is zero.
    pub df: f64,
}

pub fn rubin_pool(points: &[f64], variances: &[f64]) -> Result<PooledEstimate, MiceError> {
    let m = points.len();
    if m < 2 || variances.len() != m {
        return Err(MiceError::TooFew(m.min(variances.len())));
    }
    let mf = m as f64;
    let point = points.iter().sum::<f64>() / mf;
    let within = variances.iter().sum::<f64>() / mf;
    let between = points.iter().map(|p| (p - point).powi(2)).sum::<f64>() / (mf - 1.0);
    let total_variance = within + (1.0 + 1.0 / mf) * between;
    let df = if between > 0.0 {
        (mf - 1.0) * (1.0 + within / ((1.0 + 1.0 / mf) * between)).powi(2)
    } else {
        f64::INFINITY
    };
    Ok(PooledEstimate { point, total_variance, within, between, df })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    #[test]
    fn rubin_arithmetic() {
        let p = rubin_pool(&[1.0, 3.0], &[1.0, 1.0]).unwrap();
        assert_eq!((p.point, p.within, p.between, p.total_variance), (2.0, 1.0, 2.0, 4.0));
        let p = rubin_pool(&[5.0, 5.0, 5.0], &[0.3, 0.3, 0.3]).unwrap();
        assert_eq!(p.between, 0.0);
        assert_eq!(p.total_variance, p.within);
        assert!(p.df.is_infinite());
        let p = rubin_pool(&[0.0, 1.0, 2.0], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(p.between, 1.0);
        assert!((p.total_variance - 7.0 / 3.0).abs() < 1e-15);
        assert!(rubin_pool(&[1.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn rubin_permutation_invariant(v in proptest::collection::vec((-10.0f64..10.0, 0.0f64..5.0), 2..8), rot in 0usize..8) {
            let (p, s): (Vec<f64>, Vec<f64>) = v.iter().copied().unzip();
            let a = rubin_pool(&p, &s).unwrap();
            let r = rot % p.len();
            let (mut p2, mut s2) = (p.clone(), s.clone());
            p2.rotate_left(r);
            s2.rotate_left(r);
            p2.reverse();
            s2.reverse();
            let b = rubin_pool(&p2, &s2).unwrap();
            prop_assert!((a.point - b.point).abs() < 1e-12);
            prop_assert!((a.total_variance - b.total_variance).abs() < 1e-10);
            prop_assert!(a.df > 0.0);
        }
    }

    fn toy(n: usize, seed: u64, frac: f64) -> Dataset {
        let mut rng = StreamKey::root(seed).rng();
        let z: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let x: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect();
        let w: Vec<f64> = (0..n).map(|i| 0.5 * z[i] + 0.3 * x[i] + rng.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = (0..n).map(|i| f64::from(u8::from(rng.random_bool(crate::glm::expit(w[i]))))).collect();
        let miss: Vec<bool> = (0..n).map(|_| rng.random_bool(frac)).collect();
        let mut d = Dataset::new(n);
        d.push_column("z", ColumnKind::Continuous, z, None).unwrap();
        d.push_column("x", ColumnKind::Binary, x, None).unwrap();
        d.push_column("w", ColumnKind::Continuous, w, Some(miss.clone())).unwrap();
        d.push_column("b", ColumnKind::Binary, b, Some(miss)).unwrap();
        d
    }

    #[test]
    fn no_missing_gives_copies() {
        let mut d = toy(50, 1, 0.0);
        d = d.drop_columns(&[]);
        let out = mice_impute(&d, &MiceConfig::new(3, 5, 1)).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|o| *o == d));
    }

    #[test]
    fn donor_property_and_observed_untouched() {
        let d = toy(300, 2, 0.35);
        let out = mice_impute(&d, &MiceConfig::new(4, 5, 9)).unwrap();
        for comp in &out {
            for name in ["w", "b"] {
                let orig = d.column(name).unwrap();
                let donors: Vec<f64> = (0..300).filter(|&i| !orig.missing()[i]).map(|i| orig.values()[i]).collect();
                let filled = comp.column(name).unwrap();
                assert!(filled.is_fully_observed());
                for i in 0..300 {
                    if orig.missing()[i] {
                        assert!(donors.contains(&filled.values()[i]));
                    } else {
                        assert_eq!(filled.values()[i], orig.values()[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn deterministic() {
        let d = toy(200, 3, 0.3);
        let c = MiceConfig::new(3, 4, 77);
        assert_eq!(mice_impute(&d, &c).unwrap(), mice_impute(&d, &c).unwrap());
        let other = MiceConfig { seed: 78, ..c };
        assert_ne!(mice_impute(&d, &other).unwrap(), mice_impute(&d, &MiceConfig::new(3, 4, 77)).unwrap());
    }

    #[test]
    fn errors() {
        let mut d = Dataset::new(3);
        d.push_column("z", ColumnKind::Continuous, vec![1.0, 2.0, 3.0], None).unwrap();
        d.push_column("w", ColumnKind::Continuous, vec![0.0; 3], Some(vec![true; 3])).unwrap();
        assert!(matches!(mice_impute(&d, &MiceConfig::new(2, 1, 0)), Err(MiceError::EntirelyMissing(_))));
        assert!(matches!(mice_impute(&d, &MiceConfig::new(1, 1, 0)), Err(MiceError::Config(_))));
    }

    #[test]
    fn all_rows_variant_replaces_observed_without_self_donation() {
        let d = toy(150, 4, 0.4);
        let cfg = MiceConfig::new(2, 1, 5);
        let out = impute_all_rows(&d, &cfg).unwrap();
        let orig = d.column("w").unwrap();
        let donors: Vec<f64> = (0..150).filter(|&i| !orig.missing()[i]).map(|i| orig.values()[i]).collect();
        let mut changed = 0;
        for comp in &out {
            let w = comp.column("w").unwrap();
            assert!(w.is_fully_observed());
            for i in 0..150 {
                assert!(donors.contains(&w.values()[i]));
                if !orig.missing()[i] {
                    // Continuous draws are almost surely distinct.
                    assert_ne!(w.values()[i], orig.values()[i]);
                    changed += 1;
                }
            }
            assert_eq!(comp.values("z").unwrap(), d.values("z").unwrap());
        }
        assert!(changed > 0);
    }
}
