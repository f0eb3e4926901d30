//! Monte-Carlo truth values for oracle and census estimands.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::estimators::{Estimand, OUTCOME, TREATMENT};
use crate::formula::{design_matrix, design_matrix_with, FormulaError};
use crate::glm::{expit, fit_glm, Family, GlmError};
use crate::marginal::marginal_means;
use crate::matrix::Matrix;
use crate::rng::StreamKey;
use crate::scenario::{GenerateError, PlasmodeContext, Scenario};
use crate::table::Dataset;

/// Independent batches behind each truth value; `mc_se` is their standard
/// error.
pub const BATCHES: usize = 10;
pub const MIN_DRAWS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    /// Functional of the data-generating distribution.
    Oracle,
    /// Working model fitted to the full population.
    Census,
}

impl Flavor {
    pub const ALL: [Flavor; 2] = [Flavor::Oracle, Flavor::Census];

    pub fn id(self) -> &'static str {
        match self {
            Flavor::Oracle => "oracle",
            Flavor::Census => "census",
        }
    }
}

impl fmt::Display for Flavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Flavor {
    type Err = TruthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Flavor::ALL.into_iter().find(|f| f.id() == s).ok_or_else(|| TruthError::Usage(format!("unknown flavor `{s}`")))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TruthError {
    #[error("{0}")]
    Usage(String),
    #[error("{0} is undefined at these draws")]
    Undefined(Estimand),
    #[error("census model did not converge")]
    NotConverged,
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error(transparent)]
    Formula(#[from] FormulaError),
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error(transparent)]
    Table(#[from] crate::table::TableError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthValue {
    /// Truth id of the scenario (covariate and outcome parts only).
    pub scenario: String,
    pub estimand: Estimand,
    pub flavor: Flavor,
    pub value: f64,
    pub mc_draws: usize,
    /// Zero when the value is read off a model coefficient.
    pub mc_se: f64,
    pub seed: u64,
}

fn batch_se(values: &[f64]) -> f64 {
    let b = values.len() as f64;
    let mean = values.iter().sum::<f64>() / b;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b - 1.0) / b).sqrt()
}

fn concat_rows(parts: &[Matrix]) -> Matrix {
    let cols = parts[0].cols();
    let rows = parts.iter().map(Matrix::rows).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend_from_slice(p.as_slice());
    }
    Matrix::from_row_major(rows, cols, data)
}

struct Batch {
    x: Matrix,
    x1: Matrix,
    x0: Matrix,
    y: Vec<f64>,
    names: Vec<String>,
}

fn batch_designs(d: &Dataset, formula: &crate::formula::Formula) -> Result<Batch, TruthError> {
    let design = design_matrix(d, formula)?;
    Ok(Batch {
        x: design.x,
        x1: design_matrix_with(d, formula, &[(TREATMENT, 1.0)])?.x,
        x0: design_matrix_with(d, formula, &[(TREATMENT, 0.0)])?.x,
        y: d.observed(OUTCOME)?.to_vec(),
        names: design.names,
    })
}

fn contrast(e: Estimand, mu1: f64, mu0: f64) -> Result<f64, TruthError> {
    let m = e.measure().ok_or(TruthError::Undefined(e))?;
    m.value(mu1, mu0).ok_or(TruthError::Undefined(e))
}

/// Truth for one estimand. Draws are split into [`BATCHES`] independent
/// ideal datasets generated in parallel from `key.child(b)`.
pub fn compute_truth(
    scenario: &Scenario,
    ctx: Option<&PlasmodeContext>,
    estimand: Estimand,
    flavor: Flavor,
    draws: usize,
    seed: u64,
) -> Result<TruthValue, TruthError> {
    if draws < MIN_DRAWS {
        return Err(TruthError::Usage(format!("{draws} draws (need at least {MIN_DRAWS})")));
    }
    let truth = scenario.true_outcome(ctx)?;
    let done = |value: f64, mc_se: f64| TruthValue {
        scenario: scenario.truth_id(),
        estimand,
        flavor,
        value,
        mc_draws: draws,
        mc_se,
        seed,
    };
    if flavor == Flavor::Oracle && estimand == Estimand::ClogOr {
        // The true model is additive in the treatment on the logit scale.
        let beta = truth.coefficient(TREATMENT).ok_or_else(|| TruthError::Usage("true model lacks a treatment term".into()))?;
        return Ok(done(beta, 0.0));
    }
    let working = scenario.working_model(ctx)?.outcome;
    let formula = match flavor {
        Flavor::Oracle => &truth.formula,
        Flavor::Census => &working,
    };
    let key = StreamKey::root(seed).label("truth").label(&scenario.truth_id());
    let per = draws / BATCHES;
    let batches: Vec<Batch> = (0..BATCHES)
        .into_par_iter()
        .map(|b| {
            let n = if b + 1 == BATCHES { draws - per * (BATCHES - 1) } else { per };
            let d = scenario.generate_ideal(ctx, n, key.child(b as u64))?;
            batch_designs(&d, formula)
        })
        .collect::<Result<_, _>>()?;

    match flavor {
        Flavor::Oracle => {
            let beta = truth.beta();
            let means: Vec<(f64, f64, usize)> = batches
                .iter()
                .map(|b| {
                    let m = |x: &Matrix| x.mul_vec(&beta).into_iter().map(expit).sum::<f64>();
                    (m(&b.x1), m(&b.x0), b.x.rows())
                })
                .collect();
            let total: usize = means.iter().map(|m| m.2).sum();
            let mu1 = means.iter().map(|m| m.0).sum::<f64>() / total as f64;
            let mu0 = means.iter().map(|m| m.1).sum::<f64>() / total as f64;
            let per_batch: Vec<f64> =
                means.iter().map(|m| contrast(estimand, m.0 / m.2 as f64, m.1 / m.2 as f64)).collect::<Result<_, _>>()?;
            Ok(done(contrast(estimand, mu1, mu0)?, batch_se(&per_batch)))
        }
        Flavor::Census => {
            let j = batches[0].names.iter().position(|n| n == TREATMENT);
            let j = j.ok_or_else(|| TruthError::Usage("working model lacks a treatment term".into()))?;
            let estimate = |x: &Matrix, x1: &Matrix, x0: &Matrix, y: &[f64]| -> Result<f64, TruthError> {
                let w = vec![1.0; x.rows()];
                let fit = fit_glm(x, y, &w, Family::Binomial)?;
                if !fit.converged {
                    return Err(TruthError::NotConverged);
                }
                match estimand {
                    Estimand::ClogOr => Ok(fit.coefficients[j]),
                    _ => {
                        let (mu1, mu0) = marginal_means(Family::Binomial, &fit.coefficients, x1, x0, &w);
                        contrast(estimand, mu1, mu0)
                    }
                }
            };
            let per_batch: Vec<f64> =
                batches.par_iter().map(|b| estimate(&b.x, &b.x1, &b.x0, &b.y)).collect::<Result<_, _>>()?;
            let x = concat_rows(&batches.iter().map(|b| b.x.clone()).collect::<Vec<_>>());
            let x1 = concat_rows(&batches.iter().map(|b| b.x1.clone()).collect::<Vec<_>>());
            let x0 = concat_rows(&batches.iter().map(|b| b.x0.clone()).collect::<Vec<_>>());
            let y: Vec<f64> = batches.iter().flat_map(|b| b.y.iter().copied()).collect();
            Ok(done(estimate(&x, &x1, &x0, &y)?, batch_se(&per_batch)))
        }
    }
}

pub fn write_truths<W: Write>(values: &[TruthValue], writer: W) -> Result<(), TruthError> {
    let mut w = csv::Writer::from_writer(writer);
    if values.is_empty() {
        w.write_record(["scenario", "estimand", "flavor", "value", "mc_draws", "mc_se", "seed"])?;
    }
    for v in values {
        w.serialize(v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_truths<R: Read>(reader: R) -> Result<Vec<TruthValue>, TruthError> {
    let mut rd = csv::Reader::from_reader(reader);
    Ok(rd.deserialize().collect::<Result<_, _>>()?)
}

/// File-backed cache keyed by (scenario, estimand, flavor, draws, seed).
#[derive(Debug, Default)]
pub struct TruthCache {
    pub values: Vec<TruthValue>,
}

impl TruthCache {
    pub fn load(path: &Path) -> Result<Self, TruthError> {
        if !path.exists() {
            return Ok(TruthCache::default());
        }
        Ok(TruthCache { values: read_truths(File::open(path)?)? })
    }

    pub fn save(&self, path: &Path) -> Result<(), TruthError> {
        let mut sorted = self.values.clone();
        sorted.sort_by(|a, b| {
            (&a.scenario, a.estimand, a.flavor, a.mc_draws, a.seed).cmp(&(&b.scenario, b.estimand, b.flavor, b.mc_draws, b.seed))
        });
        write_truths(&sorted, File::create(path)?)
    }

    pub fn find(&self, scenario: &str, estimand: Estimand, flavor: Flavor, draws: usize, seed: u64) -> Option<&TruthValue> {
        self.values
            .iter()
            .find(|v| v.scenario == scenario && v.estimand == estimand && v.flavor == flavor && v.mc_draws == draws && v.seed == seed)
    }

    /// Cached value, or compute and remember it.
    pub fn get_or_compute(
        &mut self,
        scenario: &Scenario,
        ctx: Option<&PlasmodeContext>,
        estimand: Estimand,
        flavor: Flavor,
        draws: usize,
        seed: u64,
    ) -> Result<TruthValue, TruthError> {
        if let Some(v) = self.find(&scenario.truth_id(), estimand, flavor, draws, seed) {
            return Ok(v.clone());
        }
        let v = compute_truth(scenario, ctx, estimand, flavor, draws, seed)?;
        self.values.push(v.clone());
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> Scenario {
        "Y1.1/M1.1".parse().unwrap()
    }

    #[test]
    fn oracle_conditional_odds_ratio_is_the_coefficient() {
        let t = compute_truth(&base(), None, Estimand::ClogOr, Flavor::Oracle, MIN_DRAWS, 1).unwrap();
        assert!((t.value - 1.5f64.ln()).abs() < 1e-15);
        assert_eq!(t.mc_se, 0.0);
    }

    #[test]
    fn too_few_draws_is_an_error() {
        assert!(matches!(compute_truth(&base(), None, Estimand::Mrd, Flavor::Oracle, 10, 1), Err(TruthError::Usage(_))));
    }

    #[test]
    fn simple_outcome_census_matches_oracle_within_error() {
        // The working model is the true model here.
        let o = compute_truth(&base(), None, Estimand::Mrd, Flavor::Oracle, MIN_DRAWS, 2).unwrap();
        let c = compute_truth(&base(), None, Estimand::Mrd, Flavor::Census, MIN_DRAWS, 2).unwrap();
        assert!(o.mc_se > 0.0 && c.mc_se > 0.0);
        assert!((o.value - c.value).abs() < 4.0 * (o.mc_se + c.mc_se), "{o:?} {c:?}");
    }

    #[test]
    fn cache_round_trip_and_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.csv");
        let mut cache = TruthCache::load(&path).unwrap();
        let a = cache.get_or_compute(&base(), None, Estimand::ClogOr, Flavor::Oracle, MIN_DRAWS, 3).unwrap();
        cache.save(&path).unwrap();
        let again = TruthCache::load(&path).unwrap();
        assert_eq!(again.find("X1/Y1.1", Estimand::ClogOr, Flavor::Oracle, MIN_DRAWS, 3), Some(&a));
        assert!(again.find("X1/Y1.1", Estimand::ClogOr, Flavor::Oracle, MIN_DRAWS, 4).is_none());
    }

    #[test]
    fn mc_se_shrinks_with_draws() {
        let mean_se = |draws| (1..=12).map(|seed| compute_truth(&base(), None, Estimand::Mrd, Flavor::Oracle, draws, seed).unwrap().mc_se).sum::<f64>();
        let ratio = mean_se(2 * MIN_DRAWS) / mean_se(MIN_DRAWS);
        assert!((0.6..=0.85).contains(&ratio), "{ratio}");
    }

    #[test]
    fn batch_se_of_constant_is_zero() {
        assert_eq!(batch_se(&[2.0; 5]), 0.0);
        // sd 1 over 4 values → se 1/2
        let v = [1.0, -1.0, 1.0, -1.0];
        assert!((batch_se(&v) - (4.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-12);
    }
}
