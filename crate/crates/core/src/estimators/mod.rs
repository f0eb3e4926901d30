//! Estimators of the treatment effect when some confounders are missing.
//!
//! Every estimator maps an analysis dataset (plus, for the benchmarks, the
//! fully observed data) to a point and standard error per estimand.

mod tmle;

pub use tmle::{estimate_tmle, fluctuate, Fluctuation, TmleConfig};

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::calibration::{rake, raking_variance, CalibrationError, CalibrationProblem};
use crate::formula::{design_matrix, Formula, FormulaError};
use crate::glm::{fit_glm, Family, GlmError, GlmFit};
use crate::learners::{LearnerError, LearnerSpec};
use crate::marginal::{counterfactual_designs, marginalize_designs, MarginalResult, Measure};
use crate::matrix::Matrix;
use crate::mice::{impute_all_rows, mice_impute, rubin_pool, MiceConfig, MiceError};
use crate::rng::StreamKey;
use crate::table::{complete_case_filter, Dataset, TableError};

pub const TREATMENT: &str = "x";
pub const OUTCOME: &str = "y";
pub const INDICATOR: &str = "r";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimand {
    #[serde(rename = "clogOR")]
    ClogOr,
    #[serde(rename = "mlogOR")]
    MlogOr,
    #[serde(rename = "mlogRR")]
    MlogRr,
    #[serde(rename = "mRD")]
    Mrd,
}

impl Estimand {
    pub const ALL: [Estimand; 4] = [Estimand::ClogOr, Estimand::MlogOr, Estimand::MlogRr, Estimand::Mrd];

    pub fn id(self) -> &'static str {
        match self {
            Estimand::ClogOr => "clogOR",
            Estimand::MlogOr => "mlogOR",
            Estimand::MlogRr => "mlogRR",
            Estimand::Mrd => "mRD",
        }
    }

    /// The marginal contrast, or `None` for the conditional odds ratio.
    pub fn measure(self) -> Option<Measure> {
        match self {
            Estimand::ClogOr => None,
            Estimand::MlogOr => Some(Measure::LogOr),
            Estimand::MlogRr => Some(Measure::LogRr),
            Estimand::Mrd => Some(Measure::Rd),
        }
    }
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Estimand {
    type Err = EstimatorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Estimand::ALL.into_iter().find(|e| e.id() == s).ok_or_else(|| EstimatorError::Usage(format!("unknown estimand `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Estimator {
    BnmkC,
    BnmkO,
    Cc,
    Cnfd,
    Ipw,
    Gr,
    Mice,
    TM,
    TMto,
    TMA,
    TMtoA,
    TMtoR,
}

impl Estimator {
    pub const ALL: [Estimator; 12] = [
        Estimator::BnmkC,
        Estimator::BnmkO,
        Estimator::Cc,
        Estimator::Cnfd,
        Estimator::Ipw,
        Estimator::Gr,
        Estimator::Mice,
        Estimator::TM,
        Estimator::TMto,
        Estimator::TMA,
        Estimator::TMtoA,
        Estimator::TMtoR,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Estimator::BnmkC => "BNMK-C",
            Estimator::BnmkO => "BNMK-O",
            Estimator::Cc => "CC",
            Estimator::Cnfd => "CNFD",
            Estimator::Ipw => "IPW",
            Estimator::Gr => "GR",
            Estimator::Mice => "MICE",
            Estimator::TM => "T-M",
            Estimator::TMto => "T-MTO",
            Estimator::TMA => "T-M-a",
            Estimator::TMtoA => "T-MTO-a",
            Estimator::TMtoR => "T-MTO-r",
        }
    }

    pub fn is_tmle(self) -> bool {
        matches!(self, Estimator::TM | Estimator::TMto | Estimator::TMA | Estimator::TMtoA | Estimator::TMtoR)
    }

    pub fn is_benchmark(self) -> bool {
        matches!(self, Estimator::BnmkC | Estimator::BnmkO)
    }

    pub fn supports(self, e: Estimand) -> bool {
        !(self.is_tmle() && e == Estimand::ClogOr)
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Estimator {
    type Err = EstimatorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Estimator::ALL.into_iter().find(|e| e.id() == s).ok_or_else(|| EstimatorError::Usage(format!("unknown estimator `{s}`")))
    }
}

impl TryFrom<String> for Estimator {
    type Error = EstimatorError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Estimator> for String {
    fn from(e: Estimator) -> String {
        e.id().to_string()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EstimatorError {
    #[error("{0}")]
    Usage(String),
    #[error("{0} did not converge")]
    NotConverged(String),
    #[error("no complete cases")]
    NoCompleteCases,
    #[error("benchmark estimators need the fully observed data")]
    NoIdealData,
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error(transparent)]
    Formula(#[from] FormulaError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Mice(#[from] MiceError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

/// Analysis models held fixed across scenarios.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingModelSpec {
    /// Outcome model terms (must include the treatment).
    pub outcome: Formula,
    /// Observation-indicator model terms.
    pub missingness: Formula,
    /// Treatment model terms.
    pub propensity: Formula,
    /// Columns subject to missingness.
    pub partial: Vec<String>,
    /// True outcome model, for the oracle benchmark.
    pub oracle: Option<Formula>,
}

impl WorkingModelSpec {
    pub fn synthetic() -> Self {
        WorkingModelSpec {
            outcome: Formula::parse("x + z_s + z_w + w_s + w_w").expect("formula"),
            missingness: Formula::parse("y + x + z_s + z_w").expect("formula"),
            propensity: Formula::parse("z_s + z_w + w_s + w_w").expect("formula"),
            partial: vec!["w_s".into(), "w_w".into()],
            oracle: None,
        }
    }

    pub fn plasmode() -> Self {
        let z = "female + age/10 + charlson + anxiety + alcohol + self_harm + mh_hosp";
        WorkingModelSpec {
            outcome: Formula::parse(&format!("x + {z} + phq8 + phq9")).expect("formula"),
            missingness: Formula::parse(&format!("y + x + {z}")).expect("formula"),
            propensity: Formula::parse(&format!("{z} + phq8 + phq9")).expect("formula"),
            partial: vec!["phq8".into(), "phq9".into()],
            oracle: None,
        }
    }

    pub fn with_oracle(mut self, oracle: Formula) -> Self {
        self.oracle = Some(oracle);
        self
    }

    /// Outcome model with the partially observed columns removed.
    pub fn confounded_outcome(&self) -> Formula {
        self.partial.iter().fold(self.outcome.clone(), |f, c| f.without_column(c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointEstimate {
    pub point: f64,
    pub ase: f64,
}

/// One entry per requested estimand; `None` where the estimand is
/// undefined for this fit (e.g. a ratio with a zero risk).
pub type EstimatorOutput = Vec<(Estimand, Option<PointEstimate>)>;

/// Tuning shared by the estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub mice_imputations: usize,
    pub mice_iterations: usize,
    pub gr_imputations: usize,
    pub pmm_donors: usize,
    pub sl_folds: usize,
    /// Clip observation and treatment probabilities to `truncation`.
    pub truncate: bool,
    pub truncation: [f64; 2],
    /// Sandwich instead of model-based covariance for the unweighted
    /// outcome fits (benchmarks, CC, CNFD).
    pub robust_se: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            mice_imputations: 20,
            mice_iterations: 25,
            gr_imputations: 10,
            pmm_donors: 5,
            sl_folds: 10,
            truncate: true,
            truncation: [0.01, 0.99],
            robust_se: false,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        let bad = |m: &str| Err(EstimatorError::Usage(m.to_string()));
        if self.mice_imputations < 2 || self.gr_imputations < 2 {
            return bad("imputation counts must be at least 2");
        }
        if self.mice_iterations == 0 || self.pmm_donors == 0 {
            return bad("mice_iterations and pmm_donors must be at least 1");
        }
        if self.sl_folds < 2 {
            return bad("sl_folds must be at least 2");
        }
        let [lo, hi] = self.truncation;
        if !(lo > 0.0 && lo < hi && hi < 1.0) {
            return bad("truncation must satisfy 0 < low < high < 1");
        }
        Ok(())
    }

    pub(crate) fn bounds(&self) -> Option<[f64; 2]> {
        self.truncate.then_some(self.truncation)
    }

    fn clip(&self, p: f64) -> f64 {
        match self.bounds() {
            Some([lo, hi]) => p.clamp(lo, hi),
            None => p,
        }
    }
}

pub struct EstimatorInput<'a> {
    pub analysis: &'a Dataset,
    /// Fully observed data; required by the benchmarks only.
    pub ideal: Option<&'a Dataset>,
    pub model: &'a WorkingModelSpec,
    /// Sub-model fits shared between estimators on the same data.
    pub shared: Option<&'a SharedFits>,
}

/// Observation-probability super learner fits reused by the TMLE variants
/// of one replicate. Seeded from the replicate, so a cached fit is the
/// same fit any variant would have made alone.
pub struct SharedFits {
    seed: u64,
    pi: std::sync::Mutex<[Option<Vec<f64>>; 2]>,
}

impl SharedFits {
    pub fn new(key: StreamKey) -> Self {
        SharedFits { seed: key.label("pi").value(), pi: std::sync::Mutex::new([None, None]) }
    }

    pub(crate) fn observation_probabilities(
        &self,
        augmented: bool,
        fit: impl FnOnce(u64) -> Result<Vec<f64>, EstimatorError>,
    ) -> Result<Vec<f64>, EstimatorError> {
        let mut slot = self.pi.lock().expect("pi cache");
        if let Some(p) = &slot[augmented as usize] {
            return Ok(p.clone());
        }
        let p = fit(self.seed)?;
        slot[augmented as usize] = Some(p.clone());
        Ok(p)
    }
}

/// Run one estimator. `key` seeds everything random inside it.
pub fn estimate(
    estimator: Estimator,
    input: &EstimatorInput,
    estimands: &[Estimand],
    config: &EstimatorConfig,
    key: StreamKey,
) -> Result<EstimatorOutput, EstimatorError> {
    if let Some(e) = estimands.iter().find(|e| !estimator.supports(**e)) {
        return Err(EstimatorError::Usage(format!("{estimator} does not target {e}")));
    }
    let d = input.analysis;
    let model = input.model;
    match estimator {
        Estimator::BnmkC | Estimator::BnmkO => {
            let ideal = input.ideal.ok_or(EstimatorError::NoIdealData)?;
            let which = if estimator == Estimator::BnmkC { Benchmark::Census } else { Benchmark::Oracle };
            estimate_benchmark(ideal, model, estimands, which, config.robust_se)
        }
        Estimator::Cc => estimate_cc(d, model, estimands, config.robust_se),
        Estimator::Cnfd => estimate_cnfd(d, model, estimands, config.robust_se),
        Estimator::Ipw => estimate_ipw(d, model, estimands, config),
        Estimator::Gr => {
            let mice = mice_config(config, config.gr_imputations, 1, key.label("GR").value());
            estimate_gr(d, model, estimands, &mice, config)
        }
        Estimator::Mice => {
            let mice = mice_config(config, config.mice_imputations, config.mice_iterations, key.label("MICE").value());
            estimate_mice(d, model, estimands, &mice)
        }
        _ => {
            let tmle = TmleConfig::for_estimator(estimator, config, key.label(estimator.id()).value());
            estimate_tmle(d, model, estimands, &tmle, input.shared)
        }
    }
}

fn mice_config(config: &EstimatorConfig, m: usize, iterations: usize, seed: u64) -> MiceConfig {
    let mut c = MiceConfig::new(m, iterations, seed);
    c.pmm_donors = config.pmm_donors;
    c.exclude = vec![INDICATOR.to_string()];
    c
}

pub(crate) fn fit_binomial(x: &Matrix, y: &[f64], w: &[f64], what: &str) -> Result<GlmFit, EstimatorError> {
    let fit = fit_glm(x, y, w, Family::Binomial)?;
    if !fit.converged {
        return Err(EstimatorError::NotConverged(what.to_string()));
    }
    Ok(fit)
}

pub(crate) fn marginal_estimate(m: &MarginalResult, e: Estimand) -> Option<PointEstimate> {
    let measure = e.measure()?;
    Some(PointEstimate { point: m.value(measure)?, ase: m.se(measure)? })
}

/// clogOR from the treatment coefficient, marginal estimands by
/// standardizing the same fit over `rows` of `d` with weights `w`.
fn outcome_estimates(
    fit: &GlmFit,
    cov: &DMatrix<f64>,
    names: &[String],
    d: &Dataset,
    formula: &Formula,
    w: &[f64],
    estimands: &[Estimand],
) -> Result<EstimatorOutput, EstimatorError> {
    let j = names.iter().position(|n| n == TREATMENT).ok_or_else(|| EstimatorError::Usage("outcome model lacks the treatment term".into()))?;
    let marginal = if estimands.iter().any(|e| e.measure().is_some()) {
        let (x1, x0) = counterfactual_designs(d, formula, TREATMENT)?;
        Some(marginalize_designs(fit, cov, &x1.x, &x0.x, w)?)
    } else {
        None
    };
    Ok(estimands
        .iter()
        .map(|&e| {
            let est = match e {
                Estimand::ClogOr => {
                    let v = cov[(j, j)];
                    (v >= 0.0).then(|| PointEstimate { point: fit.coefficients[j], ase: v.sqrt() })
                }
                _ => marginal.as_ref().and_then(|m| marginal_estimate(m, e)),
            };
            (e, est)
        })
        .collect())
}

/// Unweighted working-model fit on every row of `d`.
fn plain_fit(d: &Dataset, formula: &Formula, estimands: &[Estimand], robust: bool, what: &str) -> Result<EstimatorOutput, EstimatorError> {
    if d.n_rows() == 0 {
        return Err(EstimatorError::NoCompleteCases);
    }
    let design = design_matrix(d, formula)?;
    let y = d.observed(OUTCOME)?;
    let w = vec![1.0; d.n_rows()];
    let mut fit = fit_binomial(&design.x, y, &w, what)?;
    if robust {
        fit = fit.with_sandwich(&design.x, y, &w)?;
    }
    outcome_estimates(&fit, &fit.covariance, &design.names, d, formula, &w, estimands)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Benchmark {
    /// The working model on fully observed data.
    Census,
    /// The true outcome model on fully observed data.
    Oracle,
}

pub fn estimate_benchmark(
    ideal: &Dataset,
    model: &WorkingModelSpec,
    estimands: &[Estimand],
    which: Benchmark,
    robust: bool,
) -> Result<EstimatorOutput, EstimatorError> {
    let formula = match which {
        Benchmark::Census => &model.outcome,
        Benchmark::Oracle => model.oracle.as_ref().ok_or_else(|| EstimatorError::Usage("no oracle outcome model".into()))?,
    };
    plain_fit(ideal, formula, estimands, robust, "benchmark outcome model")
}

/// Working model on complete cases.
pub fn estimate_cc(d: &Dataset, model: &WorkingModelSpec, estimands: &[Estimand], robust: bool) -> Result<EstimatorOutput, EstimatorError> {
    let cc = complete_case_filter(d, INDICATOR)?;
    plain_fit(&cc, &model.outcome, estimands, robust, "complete-case outcome model")
}

/// Working model without the partially observed confounders, on all rows.
pub fn estimate_cnfd(d: &Dataset, model: &WorkingModelSpec, estimands: &[Estimand], robust: bool) -> Result<EstimatorOutput, EstimatorError> {
    let dropped: Vec<&str> = model.partial.iter().map(String::as_str).collect();
    plain_fit(&d.drop_columns(&dropped), &model.confounded_outcome(), estimands, robust, "confounded outcome model")
}

/// Estimated observation probabilities for every row, clipped.
pub(crate) fn observation_probabilities(d: &Dataset, model: &WorkingModelSpec, config: &EstimatorConfig) -> Result<Vec<f64>, EstimatorError> {
    let design = design_matrix(d, &model.missingness)?;
    let r = d.observed(INDICATOR)?;
    let fit = fit_binomial(&design.x, r, &vec![1.0; d.n_rows()], "missingness model")?;
    Ok(fit.predict_mean(&design.x)?.into_iter().map(|p| config.clip(p)).collect())
}

fn complete_rows(d: &Dataset) -> Result<Vec<usize>, EstimatorError> {
    let r = d.observed(INDICATOR)?;
    let rows: Vec<usize> = (0..d.n_rows()).filter(|&i| r[i] == 1.0).collect();
    if rows.is_empty() {
        return Err(EstimatorError::NoCompleteCases);
    }
    Ok(rows)
}

/// Complete cases weighted by inverse estimated observation probabilities;
/// sandwich covariance.
pub fn estimate_ipw(
    d: &Dataset,
    model: &WorkingModelSpec,
    estimands: &[Estimand],
    config: &EstimatorConfig,
) -> Result<EstimatorOutput, EstimatorError> {
    let pi = observation_probabilities(d, model, config)?;
    let rows = complete_rows(d)?;
    let cc = d.select_rows(&rows);
    let w: Vec<f64> = rows.iter().map(|&i| 1.0 / pi[i]).collect();
    let design = design_matrix(&cc, &model.outcome)?;
    let y = cc.observed(OUTCOME)?;
    let fit = fit_binomial(&design.x, y, &w, "weighted outcome model")?.with_sandwich(&design.x, y, &w)?;
    outcome_estimates(&fit, &fit.covariance, &design.names, &cc, &model.outcome, &w, estimands)
}

/// Raking auxiliaries: working-model coefficient influence values for every
/// row, averaged over imputations of the partially observed columns.
pub fn gr_auxiliaries(d: &Dataset, model: &WorkingModelSpec, mice: &MiceConfig) -> Result<Matrix, EstimatorError> {
    let n = d.n_rows();
    let mut sum: Option<Matrix> = None;
    let imputed = impute_all_rows(d, mice)?;
    for full in &imputed {
        let design = design_matrix(full, &model.outcome)?;
        let y = full.observed(OUTCOME)?;
        let ones = vec![1.0; n];
        let fit = fit_binomial(&design.x, y, &ones, "imputed-data outcome model")?;
        let eif = fit.coefficient_eif(&design.x, y, &ones)?;
        sum = Some(match sum {
            None => eif,
            Some(s) => Matrix::from_row_major(n, s.cols(), s.as_slice().iter().zip(eif.as_slice()).map(|(a, b)| a + b).collect()),
        });
    }
    let s = sum.ok_or(EstimatorError::Usage("no imputations".into()))?;
    let m = imputed.len() as f64;
    Ok(Matrix::from_row_major(n, s.cols(), s.as_slice().iter().map(|v| v / m).collect()))
}

/// Generalized raking of the IPW weights to the totals of `aux` (one row
/// per row of `d`).
pub fn estimate_gr_with_aux(
    d: &Dataset,
    model: &WorkingModelSpec,
    estimands: &[Estimand],
    aux: &Matrix,
    config: &EstimatorConfig,
) -> Result<EstimatorOutput, EstimatorError> {
    let pi = observation_probabilities(d, model, config)?;
    let rows = complete_rows(d)?;
    let base: Vec<f64> = rows.iter().map(|&i| 1.0 / pi[i]).collect();
    let selected: Vec<bool> = d.observed(INDICATOR)?.iter().map(|r| *r == 1.0).collect();
    let calibrated = rake(&CalibrationProblem::new(base.clone(), aux.clone(), selected))?;
    if !calibrated.converged {
        return Err(EstimatorError::NotConverged("raking".into()));
    }
    let g = calibrated.weights(&base);
    let cc = d.select_rows(&rows);
    let design = design_matrix(&cc, &model.outcome)?;
    let y = cc.observed(OUTCOME)?;
    let fit = fit_binomial(&design.x, y, &g, "calibrated outcome model")?;
    let var = raking_variance(&fit, &design.x, y, &base, &calibrated, &aux.select_rows(&rows))?;
    outcome_estimates(&fit, &var.covariance, &design.names, &cc, &model.outcome, &g, estimands)
}

pub fn estimate_gr(
    d: &Dataset,
    model: &WorkingModelSpec,
    estimands: &[Estimand],
    mice: &MiceConfig,
    config: &EstimatorConfig,
) -> Result<EstimatorOutput, EstimatorError> {
    let aux = gr_auxiliaries(d, model, mice)?;
    estimate_gr_with_aux(d, model, estimands, &aux, config)
}

/// Working model on each completed dataset, pooled by Rubin's rules.
/// Intervals use normal quantiles.
pub fn estimate_mice(d: &Dataset, model: &WorkingModelSpec, estimands: &[Estimand], mice: &MiceConfig) -> Result<EstimatorOutput, EstimatorError> {
    let completed = mice_impute(d, mice)?;
    let per: Vec<EstimatorOutput> = completed
        .iter()
        .map(|c| plain_fit(c, &model.outcome, estimands, false, "imputed-data outcome model"))
        .collect::<Result<_, _>>()?;
    Ok(estimands
        .iter()
        .enumerate()
        .map(|(k, &e)| {
            let parts: Option<Vec<PointEstimate>> = per.iter().map(|o| o[k].1).collect();
            let pooled = parts.and_then(|p| {
                let points: Vec<f64> = p.iter().map(|q| q.point).collect();
                let vars: Vec<f64> = p.iter().map(|q| q.ase * q.ase).collect();
                rubin_pool(&points, &vars).ok()
            });
            (e, pooled.map(|p| PointEstimate { point: p.point, ase: p.total_variance.sqrt() }))
        })
        .collect())
}

/// Learner library for a nuisance model.
pub(crate) fn library(rare: bool) -> Vec<LearnerSpec> {
    if rare {
        LearnerSpec::rare_library()
    } else {
        LearnerSpec::default_library()
    }
}
