//! Synthetic scenarios: correlated normal covariates, a thresholded
//! treatment, logistic outcomes and logistic missingness.
//!
//! A scenario id is `X/Y/M`, e.g. `X1/Y4.1/M2.2`; the covariate part may be
//! omitted (`Y1.1/M1.1` means `X1/Y1.1/M1.1`).

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::formula::{design_matrix, Formula, FormulaError};
use crate::glm::expit;
use crate::rng::StreamKey;
use crate::table::{ColumnKind, Dataset, TableError};

/// Generated covariates in the order of the covariance matrix.
pub const COVARIATES: [&str; 9] = ["x_latent", "z_s", "z_w", "w_s", "w_w", "u_s", "u_w", "a_s", "a_w"];

/// Columns visible to estimators.
pub const ANALYSIS_COLUMNS: [&str; 7] = ["y", "x", "z_s", "z_w", "r", "w_s", "w_w"];

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("unknown scenario id `{0}`")]
    Unknown(String),
    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,
    #[error(transparent)]
    Formula(#[from] FormulaError),
    #[error(transparent)]
    Table(#[from] TableError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CovariateSpec {
    X1,
    /// X1 with corr(U_s, W_s) = corr(U_w, W_w) = 0.8.
    X1_1,
}

impl CovariateSpec {
    pub const ALL: [CovariateSpec; 2] = [CovariateSpec::X1, CovariateSpec::X1_1];

    pub fn id(self) -> &'static str {
        match self {
            CovariateSpec::X1 => "X1",
            CovariateSpec::X1_1 => "X1.1",
        }
    }

    pub fn sigma(self) -> DMatrix<f64> {
        let (rho1, rho2, rho3) = (0.4, 0.2, 0.2);
        let mut s = DMatrix::from_element(9, 9, rho3);
        for j in 0..9 {
            s[(j, j)] = 1.0;
        }
        for j in 1..9 {
            let r = if j % 2 == 1 { rho1 } else { rho2 };
            s[(0, j)] = r;
            s[(j, 0)] = r;
        }
        if self == CovariateSpec::X1_1 {
            for (a, b) in [(3, 5), (4, 6)] {
                s[(a, b)] = 0.8;
                s[(b, a)] = 0.8;
            }
        }
        s
    }

    /// Lower-triangular factor `L` with `L Lᵀ = Σ`.
    pub fn factor(self) -> Result<DMatrix<f64>, ScenarioError> {
        self.sigma().cholesky().map(|c| c.l()).ok_or(ScenarioError::NotPositiveDefinite)
    }
}

impl FromStr for CovariateSpec {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CovariateSpec::ALL.into_iter().find(|c| c.id() == s).ok_or_else(|| ScenarioError::Unknown(s.to_string()))
    }
}

/// `intercept + Σ coefficients[k] · term_k` over the terms of `formula`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub intercept: f64,
    pub formula: Formula,
    pub coefficients: Vec<f64>,
}

impl LinearModel {
    fn new(intercept: f64, formula: &str, coefficients: &[f64]) -> Self {
        let formula: Formula = formula.parse().expect("built-in formula");
        assert_eq!(formula.terms.len(), coefficients.len());
        LinearModel { intercept, formula, coefficients: coefficients.to_vec() }
    }

    /// Coefficients aligned with `design_matrix(d, &self.formula)`.
    pub fn beta(&self) -> Vec<f64> {
        std::iter::once(self.intercept).chain(self.coefficients.iter().copied()).collect()
    }

    pub fn linear_predictor(&self, d: &Dataset) -> Result<Vec<f64>, FormulaError> {
        Ok(design_matrix(d, &self.formula)?.x.mul_vec(&self.beta()))
    }

    pub fn coefficient(&self, column: &str) -> Option<f64> {
        self.formula.terms.iter().position(|t| t.to_string() == column).map(|k| self.coefficients[k])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeSpec {
    pub id: String,
    pub model: LinearModel,
}

impl OutcomeSpec {
    pub const IDS: [&'static str; 6] = ["Y1.1", "Y1.17", "Y2.11", "Y2.17", "Y4.1", "Y4.17"];

    /// Same model with a different intercept, e.g. for a rarer outcome.
    pub fn with_intercept(mut self, intercept: f64) -> Self {
        self.model.intercept = intercept;
        self.id = format!("{}@{intercept}", self.id);
        self
    }

    /// The treatment coefficient, which is the conditional log odds ratio
    /// when the model is the working model.
    pub fn treatment_coefficient(&self) -> f64 {
        self.model.coefficient("x").unwrap_or(0.0)
    }
}

impl FromStr for OutcomeSpec {
    type Err = ScenarioError;

    fn from_str(id: &str) -> Result<Self, Self::Err> {
        let ln = f64::ln;
        let simple = "x + w_w + w_s + z_w + z_s";
        let simple_beta = [ln(1.5), ln(1.5), -ln(1.75), ln(1.5), -ln(1.3)];
        let with_u = "x + w_w + w_s + z_w + z_s + u_s";
        let with_u_beta = [ln(1.5), ln(1.5), -ln(1.75), ln(1.5), -ln(1.3), -ln(1.75)];
        let complex = "x + w_w + w_s + I(z_w < -0.5) + I(z_w > 2) + I(z_s < -1) + w_w:w_s + w_s:I(z_s < -1) + w_w:I(z_w > 2)";
        let complex_beta = [ln(1.5), -0.6, 0.5, 0.1, 0.8, -0.4, 1.0, 3.0, 1.0];
        let model = match id {
            "Y1.1" => LinearModel::new(-2.4, simple, &simple_beta),
            "Y1.17" => LinearModel::new(-3.4, simple, &simple_beta),
            "Y2.11" => LinearModel::new(-2.5, with_u, &with_u_beta),
            "Y2.17" => LinearModel::new(-3.56, with_u, &with_u_beta),
            "Y4.1" => LinearModel::new(-3.0, complex, &complex_beta),
            "Y4.17" => LinearModel::new(-4.1, complex, &complex_beta),
            _ => return Err(ScenarioError::Unknown(id.to_string())),
        };
        Ok(OutcomeSpec { id: id.to_string(), model })
    }
}

/// Missingness model; the linear predictor is the logit of the probability
/// that W is missing.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingSpec {
    pub id: String,
    pub model: LinearModel,
}

impl MissingSpec {
    pub const IDS: [&'static str; 8] = ["M1.1", "M2.2", "M2.4", "M2.5", "M2.6", "M2.7", "M2.8", "M3.1"];

    /// P(W missing) for each row.
    pub fn missing_probability(&self, d: &Dataset) -> Result<Vec<f64>, FormulaError> {
        Ok(self.model.linear_predictor(d)?.into_iter().map(expit).collect())
    }
}

impl FromStr for MissingSpec {
    type Err = ScenarioError;

    fn from_str(id: &str) -> Result<Self, Self::Err> {
        let ln = f64::ln;
        let simple = "x + z_w + z_s + y";
        let simple_alpha = [ln(2.5), ln(1.5), ln(1.5), ln(2.5)];
        let complex = "x + I(z_w < -0.5) + I(z_w > 1) + I(z_s < -1) + y + y:z_s + x:z_s";
        let complex_alpha = [1.0, -0.9, 2.0, -2.0, 0.2, -3.0, 3.0];
        let on_u = "x + z_w + z_s + y + u_s";
        let on_u_alpha = [ln(2.5), ln(1.5), ln(1.5), ln(2.5), ln(2.5)];
        let on_w = "x + z_w + z_s + y + w_w + w_s";
        let on_w_alpha = [ln(2.5), ln(1.5), ln(1.5), ln(2.5), ln(2.5), ln(2.5)];
        let model = match id {
            "M1.1" => LinearModel::new(-2.0 / 3.0, simple, &simple_alpha),
            "M3.1" => LinearModel::new(1.08, simple, &simple_alpha),
            "M2.2" => LinearModel::new(-0.9, complex, &complex_alpha),
            "M2.4" => LinearModel::new(1.3, complex, &complex_alpha),
            "M2.5" => LinearModel::new(-0.97, on_u, &on_u_alpha),
            "M2.7" => LinearModel::new(1.28, on_u, &on_u_alpha),
            "M2.6" => LinearModel::new(-2.0 / 3.0, on_w, &on_w_alpha),
            "M2.8" => LinearModel::new(1.63, on_w, &on_w_alpha),
            _ => return Err(ScenarioError::Unknown(id.to_string())),
        };
        Ok(MissingSpec { id: id.to_string(), model })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScenario {
    pub covariates: CovariateSpec,
    pub outcome: OutcomeSpec,
    pub missing: MissingSpec,
}

impl SyntheticScenario {
    pub fn id(&self) -> String {
        self.to_string()
    }

    pub fn all() -> Vec<SyntheticScenario> {
        let mut out = Vec::new();
        for c in CovariateSpec::ALL {
            for y in OutcomeSpec::IDS {
                for m in MissingSpec::IDS {
                    out.push(SyntheticScenario {
                        covariates: c,
                        outcome: y.parse().expect("registered"),
                        missing: m.parse().expect("registered"),
                    });
                }
            }
        }
        out
    }
}

impl fmt::Display for SyntheticScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.covariates.id(), self.outcome.id, self.missing.id)
    }
}

impl FromStr for SyntheticScenario {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split('/').collect();
        let unknown = || ScenarioError::Unknown(s.to_string());
        let (c, y, m) = match parts.as_slice() {
            [y, m] => (CovariateSpec::X1, *y, *m),
            [c, y, m] => (c.parse().map_err(|_| unknown())?, *y, *m),
            _ => return Err(unknown()),
        };
        Ok(SyntheticScenario {
            covariates: c,
            outcome: y.parse().map_err(|_| unknown())?,
            missing: m.parse().map_err(|_| unknown())?,
        })
    }
}

fn continuous() -> ColumnKind {
    ColumnKind::Continuous
}

/// `n` draws from N(0, Σ), one column per entry of [`COVARIATES`].
pub fn generate_covariates(n: usize, spec: CovariateSpec, rng: &mut impl Rng) -> Result<Dataset, ScenarioError> {
    let l = spec.factor()?;
    let mut cols = vec![Vec::with_capacity(n); 9];
    let mut e = [0.0; 9];
    for _ in 0..n {
        for v in &mut e {
            *v = rng.sample(StandardNormal);
        }
        for (j, col) in cols.iter_mut().enumerate() {
            col.push((0..=j).map(|k| l[(j, k)] * e[k]).sum());
        }
    }
    let mut d = Dataset::new(n);
    for (name, values) in COVARIATES.iter().zip(cols) {
        d.push_column(name, continuous(), values, None)?;
    }
    Ok(d)
}

/// Type-7 sample quantile.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Adds binary `x`: 1 when `x_latent` is strictly below its sample 40th
/// percentile.
pub fn assign_treatment(d: &Dataset) -> Result<Dataset, ScenarioError> {
    let latent = d.observed("x_latent")?;
    let mut out = d.clone();
    if d.n_rows() == 0 {
        out.push_column("x", ColumnKind::Binary, Vec::new(), None)?;
        return Ok(out);
    }
    let q = quantile(latent, 0.4);
    let x = latent.iter().map(|v| f64::from(u8::from(*v < q))).collect();
    out.push_column("x", ColumnKind::Binary, x, None)?;
    Ok(out)
}

fn bernoulli(p: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    p.iter().map(|pi| f64::from(u8::from(rng.random::<f64>() < *pi))).collect()
}

/// Adds binary `y` drawn from the outcome model.
pub fn generate_outcome(d: &Dataset, spec: &OutcomeSpec, rng: &mut impl Rng) -> Result<Dataset, ScenarioError> {
    let p: Vec<f64> = spec.model.linear_predictor(d)?.into_iter().map(expit).collect();
    let mut out = d.clone();
    out.push_column("y", ColumnKind::Binary, bernoulli(&p, rng), None)?;
    Ok(out)
}

/// Draws `r` and returns the analysis dataset: W masked where `r = 0`, and
/// the latent, unobserved and auxiliary columns removed.
pub fn generate_missingness(d: &Dataset, spec: &MissingSpec, rng: &mut impl Rng) -> Result<Dataset, ScenarioError> {
    let missing = bernoulli(&spec.missing_probability(d)?, rng);
    let r: Vec<f64> = missing.iter().map(|m| 1.0 - m).collect();
    let flags: Vec<bool> = missing.iter().map(|m| *m == 1.0).collect();
    let mut full = d.clone();
    full.push_column("r", ColumnKind::Binary, r, None)?;
    let mut out = full.select_columns(&ANALYSIS_COLUMNS)?;
    out.mask("w_s", &flags)?;
    out.mask("w_w", &flags)?;
    Ok(out)
}

/// The fully observed data (every covariate, `x`, `y`) and what the
/// analyst sees.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub ideal: Dataset,
    pub analysis: Dataset,
}

/// Covariates, outcome and missingness each come from their own child
/// stream of `key`, so scenarios sharing X and Y specs share those draws.
pub fn generate(scenario: &SyntheticScenario, n: usize, key: StreamKey) -> Result<Generated, ScenarioError> {
    let ideal = generate_ideal(scenario.covariates, &scenario.outcome, n, key)?;
    let analysis = generate_missingness(&ideal, &scenario.missing, &mut key.label("missing").rng())?;
    Ok(Generated { ideal, analysis })
}

pub fn generate_ideal(covariates: CovariateSpec, outcome: &OutcomeSpec, n: usize, key: StreamKey) -> Result<Dataset, ScenarioError> {
    let d = generate_covariates(n, covariates, &mut key.label("covariates").rng())?;
    let d = assign_treatment(&d)?;
    generate_outcome(&d, outcome, &mut key.label("outcome").rng())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;
    use proptest::prelude::{prop_assert_eq, proptest};

    fn column_mean(d: &Dataset, name: &str) -> f64 {
        let v = d.values(name).unwrap();
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn both_covariance_matrices_factor() {
        for c in CovariateSpec::ALL {
            let l = c.factor().unwrap();
            let back = &l * l.transpose();
            assert!((back - c.sigma()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn single_row() {
        let g = generate(&"Y1.1/M1.1".parse().unwrap(), 1, StreamKey::root(1)).unwrap();
        assert_eq!(g.analysis.n_rows(), 1);
        assert_eq!(g.ideal.values("x").unwrap(), &[0.0]);
    }

    #[test]
    fn ten_distinct_values_treat_four() {
        let mut d = Dataset::new(10);
        d.push_column("x_latent", continuous(), vec![5.0, 1.0, 9.0, 3.0, 7.0, 0.0, 2.0, 8.0, 4.0, 6.0], None).unwrap();
        let x = assign_treatment(&d).unwrap();
        assert_eq!(x.values("x").unwrap().iter().sum::<f64>(), 4.0);
    }

    #[test]
    fn ties_treat_nobody() {
        let mut d = Dataset::new(5);
        d.push_column("x_latent", continuous(), vec![1.5; 5], None).unwrap();
        assert_eq!(assign_treatment(&d).unwrap().values("x").unwrap().iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn quantile_type_seven() {
        assert_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 0.5), 2.5);
        assert!((quantile(&[0.0, 10.0], 0.4) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_coefficients_give_half() {
        let mut spec: OutcomeSpec = "Y1.1".parse().unwrap();
        spec.model.intercept = 0.0;
        spec.model.coefficients.iter_mut().for_each(|c| *c = 0.0);
        let d = generate_ideal(CovariateSpec::X1, &spec, 200_000, StreamKey::root(3)).unwrap();
        assert!((column_mean(&d, "y") - 0.5).abs() < 0.005);
    }

    #[test]
    fn analysis_columns_only() {
        let g = generate(&"X1.1/Y2.11/M2.5".parse().unwrap(), 500, StreamKey::root(4)).unwrap();
        assert_eq!(g.analysis.names(), ANALYSIS_COLUMNS.to_vec());
        let r = g.analysis.values("r").unwrap();
        for name in ["w_s", "w_w"] {
            let c = g.analysis.column(name).unwrap();
            for (m, ri) in c.missing().iter().zip(r) {
                assert_eq!(*m, *ri == 0.0);
            }
        }
        for name in ["y", "x", "z_s", "z_w", "r"] {
            assert!(g.analysis.column(name).unwrap().is_fully_observed());
        }
    }

    #[test]
    fn value_dependent_reduces_to_base_case() {
        let d = generate_ideal(CovariateSpec::X1, &"Y1.1".parse().unwrap(), 300, StreamKey::root(5)).unwrap();
        let base: MissingSpec = "M1.1".parse().unwrap();
        let mut mnar: MissingSpec = "M2.6".parse().unwrap();
        let k = mnar.model.coefficients.len();
        mnar.model.coefficients[k - 2] = 0.0;
        mnar.model.coefficients[k - 1] = 0.0;
        let a = base.missing_probability(&d).unwrap();
        let b = mnar.missing_probability(&d).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
    }

    #[test]
    fn registry_is_closed() {
        assert_eq!(SyntheticScenario::all().len(), 2 * 6 * 8);
        for s in SyntheticScenario::all() {
            let back: SyntheticScenario = s.id().parse().unwrap();
            assert_eq!(back, s);
        }
        for bad in ["Y1.2/M1.1", "X2/Y1.1/M1.1", "Y1.1/M2.3", "Y1.1", "", "X1/Y1.1/M1.1/extra"] {
            assert!(bad.parse::<SyntheticScenario>().is_err(), "{bad}");
        }
    }

    #[test]
    fn treatment_coefficient_is_log_one_point_five() {
        for y in OutcomeSpec::IDS {
            let o: OutcomeSpec = y.parse().unwrap();
            assert!((o.treatment_coefficient() - 1.5f64.ln()).abs() < 1e-15);
        }
    }

    proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]

        #[test]
        fn generation_is_deterministic(seed in 0u64..10_000, n in 1usize..60) {
            let s: SyntheticScenario = "X1/Y4.1/M2.2".parse().unwrap();
            let a = generate(&s, n, StreamKey::root(seed)).unwrap();
            let b = generate(&s, n, StreamKey::root(seed)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
