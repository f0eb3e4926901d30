//! Probability learners for binary outcomes and a cross-validated convex
//! ensemble over them.

mod boost;
mod super_learner;

pub use boost::{fit_boosted, BoostParams, BoostedModel};
pub use super_learner::{fit_super_learner, fold_assignment, SuperLearnerFit};

use serde::{Deserialize, Serialize};

use crate::glm::{fit_glm, Family};
use crate::matrix::Matrix;

/// Predictions are kept inside `[CLIP, 1 − CLIP]`.
pub const CLIP: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum LearnerError {
    #[error("invalid learner input: {0}")]
    Input(String),
    #[error("learner failed: {0}")]
    Failed(String),
    #[error("every learner in the library failed")]
    EmptyEnsemble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LearnerSpec {
    GlmMainEffects,
    GlmPairwiseInteractions,
    Boosted { depth: usize, shrinkage: f64, rounds: usize },
    /// Ignores the features and predicts a fixed probability.
    Constant { p: f64 },
}

impl LearnerSpec {
    pub fn boosted(depth: usize) -> Self {
        LearnerSpec::Boosted { depth, shrinkage: 0.1, rounds: 200 }
    }

    /// GLM main effects, GLM pairwise interactions, boosted trees of depth 1
    /// and 3.
    pub fn default_library() -> Vec<LearnerSpec> {
        vec![LearnerSpec::GlmMainEffects, LearnerSpec::GlmPairwiseInteractions, Self::boosted(1), Self::boosted(3)]
    }

    /// Library for rare outcomes: GLM main effects and stumps.
    pub fn rare_library() -> Vec<LearnerSpec> {
        vec![LearnerSpec::GlmMainEffects, Self::boosted(1)]
    }

    pub fn validate(&self) -> Result<(), LearnerError> {
        match self {
            LearnerSpec::Boosted { depth, shrinkage, rounds } => {
                if *rounds == 0 || *depth == 0 || !(*shrinkage > 0.0 && *shrinkage <= 1.0) {
                    return Err(LearnerError::Input(format!("boosting parameters {self:?}")));
                }
            }
            LearnerSpec::Constant { p } if !(*p > 0.0 && *p < 1.0) => {
                return Err(LearnerError::Input(format!("constant probability {p}")));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self {
            LearnerSpec::GlmMainEffects => "glm".into(),
            LearnerSpec::GlmPairwiseInteractions => "glm-pairwise".into(),
            LearnerSpec::Boosted { depth, shrinkage, rounds } => format!("boost-d{depth}-s{shrinkage}-r{rounds}"),
            LearnerSpec::Constant { p } => format!("constant-{p}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FittedLearner {
    Glm { pairwise: bool, keep: Vec<usize>, coefficients: Vec<f64> },
    Boosted(BoostedModel),
    Constant(f64),
}

fn clip(p: f64) -> f64 {
    p.clamp(CLIP, 1.0 - CLIP)
}

/// Intercept, the features, and (optionally) all pairwise products.
pub fn expand_design(x: &Matrix, pairwise: bool) -> Matrix {
    let p = x.cols();
    let extra = if pairwise { p * (p.saturating_sub(1)) / 2 } else { 0 };
    let width = 1 + p + extra;
    let mut data = Vec::with_capacity(x.rows() * width);
    for i in 0..x.rows() {
        let r = x.row(i);
        data.push(1.0);
        data.extend_from_slice(r);
        if pairwise {
            for a in 0..p {
                for b in a + 1..p {
                    data.push(r[a] * r[b]);
                }
            }
        }
    }
    Matrix::from_row_major(x.rows(), width, data)
}

/// Columns that vary among the weighted rows (the intercept always kept).
fn informative_columns(x: &Matrix, w: &[f64]) -> Vec<usize> {
    let mut keep = vec![0];
    for j in 1..x.cols() {
        let mut first = None;
        let varies = (0..x.rows()).filter(|&i| w[i] > 0.0).any(|i| {
            let v = x.get(i, j);
            match first {
                None => {
                    first = Some(v);
                    false
                }
                Some(f) => v != f,
            }
        });
        if varies {
            keep.push(j);
        }
    }
    keep
}

fn check(x: &Matrix, y: &[f64], w: &[f64]) -> Result<(), LearnerError> {
    if y.len() != x.rows() || w.len() != x.rows() {
        return Err(LearnerError::Input("row counts disagree".into()));
    }
    if y.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(LearnerError::Input("response must be 0/1".into()));
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) || !w.iter().any(|v| *v > 0.0) {
        return Err(LearnerError::Input("weights must be finite, non-negative, not all zero".into()));
    }
    Ok(())
}

pub fn fit_learner(spec: &LearnerSpec, x: &Matrix, y: &[f64], w: &[f64]) -> Result<FittedLearner, LearnerError> {
    spec.validate()?;
    check(x, y, w)?;
    if let LearnerSpec::Constant { p } = spec {
        return Ok(FittedLearner::Constant(*p));
    }
    let wsum: f64 = w.iter().sum();
    let mean = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / wsum;
    if y.iter().zip(w).filter(|(_, wi)| **wi > 0.0).all(|(yi, _)| *yi == 1.0)
        || y.iter().zip(w).filter(|(_, wi)| **wi > 0.0).all(|(yi, _)| *yi == 0.0)
    {
        return Ok(FittedLearner::Constant(clip(mean)));
    }
    match spec {
        LearnerSpec::GlmMainEffects | LearnerSpec::GlmPairwiseInteractions => {
            let pairwise = matches!(spec, LearnerSpec::GlmPairwiseInteractions);
            let design = expand_design(x, pairwise);
            let keep = informative_columns(&design, w);
            let fit = fit_glm(&design.select_columns(&keep), y, w, Family::Binomial)
                .map_err(|e| LearnerError::Failed(e.to_string()))?;
            if !fit.converged {
                return Err(LearnerError::Failed(format!("{} did not converge", spec.label())));
            }
            Ok(FittedLearner::Glm { pairwise, keep, coefficients: fit.coefficients })
        }
        LearnerSpec::Boosted { depth, shrinkage, rounds } => {
            Ok(FittedLearner::Boosted(fit_boosted(x, y, w, BoostParams { depth: *depth, shrinkage: *shrinkage, rounds: *rounds })))
        }
        LearnerSpec::Constant { .. } => unreachable!(),
    }
}

impl FittedLearner {
    pub fn predict(&self, x: &Matrix) -> Vec<f64> {
        match self {
            FittedLearner::Constant(p) => vec![clip(*p); x.rows()],
            FittedLearner::Glm { pairwise, keep, coefficients } => {
                let design = expand_design(x, *pairwise).select_columns(keep);
                design.mul_vec(coefficients).into_iter().map(|e| clip(crate::glm::expit(e))).collect()
            }
            FittedLearner::Boosted(m) => m.predict(x).into_iter().map(clip).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn glm_learner_matches_engine() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..300).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let y: Vec<f64> =
            rows.iter().map(|r| f64::from(u8::from(rng.random_bool(crate::glm::expit(0.3 + r[0] - r[1]))))).collect();
        let x = Matrix::from_rows(&rows);
        let w = vec![1.0; 300];
        let FittedLearner::Glm { coefficients, .. } = fit_learner(&LearnerSpec::GlmMainEffects, &x, &y, &w).unwrap() else {
            panic!("expected a GLM");
        };
        let direct = fit_glm(&expand_design(&x, false), &y, &w, Family::Binomial).unwrap();
        for (a, b) in coefficients.iter().zip(&direct.coefficients) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_response() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]);
        for spec in LearnerSpec::default_library() {
            let f = fit_learner(&spec, &x, &[1.0; 3], &[1.0; 3]).unwrap();
            assert_eq!(f.predict(&x), vec![1.0 - CLIP; 3]);
        }
    }

    #[test]
    fn pairwise_drops_degenerate_products() {
        // Mutually exclusive indicators: their product is identically zero.
        let rows: Vec<Vec<f64>> = (0..60).map(|i| vec![f64::from(u8::from(i % 3 == 0)), f64::from(u8::from(i % 3 == 1))]).collect();
        let y: Vec<f64> = (0..60).map(|i| f64::from(u8::from(i % 4 == 0 || i % 3 == 0 && i % 2 == 0))).collect();
        let x = Matrix::from_rows(&rows);
        let f = fit_learner(&LearnerSpec::GlmPairwiseInteractions, &x, &y, &[1.0; 60]).unwrap();
        assert!(f.predict(&x).iter().all(|p| *p >= CLIP && *p <= 1.0 - CLIP));
    }

    #[test]
    fn spec_validation() {
        assert!(LearnerSpec::Boosted { depth: 1, shrinkage: 0.0, rounds: 10 }.validate().is_err());
        assert!(LearnerSpec::Boosted { depth: 1, shrinkage: 0.1, rounds: 0 }.validate().is_err());
        assert!(LearnerSpec::Constant { p: 1.0 }.validate().is_err());
    }
}
