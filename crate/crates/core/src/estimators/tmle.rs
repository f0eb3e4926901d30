//! Inverse-probability-of-coarsening weighted TMLE of the marginal risks.

use super::{
    fit_binomial, library, marginal_estimate, Estimand, Estimator, EstimatorConfig, EstimatorError, EstimatorOutput,
    SharedFits, WorkingModelSpec, INDICATOR, OUTCOME, TREATMENT,
};
use crate::formula::{design_matrix, design_matrix_with, feature_matrix, Formula};
use crate::glm::{expit, logit};
use crate::learners::{fit_super_learner, LearnerSpec, CLIP};
use crate::marginal::MarginalResult;
use crate::matrix::Matrix;
use crate::table::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlScope {
    /// Super learner for the observation model only; GLMs for Q and g.
    MissingnessOnly,
    AllThree,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TmleConfig {
    pub sl_scope: SlScope,
    /// Append the confounded-model outcome probability to the Q and π inputs.
    pub augment: bool,
    /// Use the small library for Q.
    pub rare_library: bool,
    pub sl_folds: usize,
    pub truncation: Option<[f64; 2]>,
    pub seed: u64,
}

impl TmleConfig {
    pub fn for_estimator(e: Estimator, config: &EstimatorConfig, seed: u64) -> Self {
        let sl_scope = match e {
            Estimator::TM | Estimator::TMA => SlScope::MissingnessOnly,
            _ => SlScope::AllThree,
        };
        TmleConfig {
            sl_scope,
            augment: matches!(e, Estimator::TMA | Estimator::TMtoA),
            rare_library: e == Estimator::TMtoR,
            sl_folds: config.sl_folds,
            truncation: config.bounds(),
            seed,
        }
    }

    fn clip(&self, p: f64) -> f64 {
        match self.truncation {
            Some([lo, hi]) => p.clamp(lo, hi),
            None => p,
        }
    }
}

/// Fluctuation of an initial outcome fit along `(H1, H0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fluctuation {
    pub epsilon: [f64; 2],
    /// Weighted mean over the fitted rows of each score component at
    /// `epsilon`.
    pub score: [f64; 2],
    pub converged: bool,
    pub iterations: usize,
}

/// Weighted logistic regression of `y` on `h` (two columns, no intercept)
/// with offset `logit(q)`, by Newton's method with step halving.
pub fn fluctuate(y: &[f64], q: &[f64], h: &[[f64; 2]], w: &[f64]) -> Fluctuation {
    let n = y.len();
    let offset: Vec<f64> = q.iter().map(|p| logit(p.clamp(CLIP, 1.0 - CLIP))).collect();
    let wsum: f64 = w.iter().sum();
    let loglik = |eps: &[f64; 2]| -> f64 {
        (0..n)
            .map(|i| {
                let eta = offset[i] + eps[0] * h[i][0] + eps[1] * h[i][1];
                // log(1 + e^eta) − y·eta, stable
                let sp = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
                -w[i] * (sp - y[i] * eta)
            })
            .sum()
    };
    let score_info = |eps: &[f64; 2]| -> ([f64; 2], [[f64; 2]; 2]) {
        let mut s = [0.0; 2];
        let mut info = [[0.0; 2]; 2];
        for i in 0..n {
            let m = expit(offset[i] + eps[0] * h[i][0] + eps[1] * h[i][1]);
            for a in 0..2 {
                s[a] += w[i] * h[i][a] * (y[i] - m);
                for b in 0..2 {
                    info[a][b] += w[i] * m * (1.0 - m) * h[i][a] * h[i][b];
                }
            }
        }
        (s, info)
    };
    let mut eps = [0.0; 2];
    let mut ll = loglik(&eps);
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..100 {
        let (s, info) = score_info(&eps);
        if s.iter().all(|v| (v / wsum).abs() < 1e-12) {
            converged = true;
            break;
        }
        iterations += 1;
        // Columns that are identically zero on the fitted rows leave a
        // singular information; solve on the active block only.
        let active: Vec<usize> = (0..2).filter(|&a| info[a][a] > 0.0).collect();
        let step = match active.as_slice() {
            [0, 1] => {
                let det = info[0][0] * info[1][1] - info[0][1] * info[1][0];
                if det.abs() <= 1e-300 {
                    break;
                }
                [(info[1][1] * s[0] - info[0][1] * s[1]) / det, (info[0][0] * s[1] - info[1][0] * s[0]) / det]
            }
            [a] => {
                let mut st = [0.0; 2];
                st[*a] = s[*a] / info[*a][*a];
                st
            }
            _ => break,
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..50 {
            let cand = [eps[0] + t * step[0], eps[1] + t * step[1]];
            let cl = loglik(&cand);
            if cl.is_finite() && cl >= ll - 1e-12 * ll.abs() {
                eps = cand;
                ll = cl;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let (s, _) = score_info(&eps);
    let score = [s[0] / wsum, s[1] / wsum];
    if !converged {
        converged = score.iter().all(|v| v.abs() < 1e-8);
    }
    Fluctuation { epsilon: eps, score, converged, iterations }
}

/// Probability model: a GLM on a formula design or a super learner on the
/// formula's features, optionally with an extra column.
struct Nuisance<'a> {
    formula: &'a Formula,
    learners: Option<Vec<LearnerSpec>>,
}

enum Fitted {
    Glm(crate::glm::GlmFit),
    Sl(crate::learners::SuperLearnerFit),
}

impl Nuisance<'_> {
    fn inputs(&self, d: &Dataset, overrides: &[(&str, f64)], extra: Option<&[f64]>) -> Result<Matrix, EstimatorError> {
        let m = if self.learners.is_some() {
            feature_matrix(d, self.formula, overrides)?.x
        } else {
            design_matrix_with(d, self.formula, overrides)?.x
        };
        Ok(match extra {
            Some(v) => m.hstack(&Matrix::from_columns(v.len(), &[v.to_vec()])),
            None => m,
        })
    }

    fn fit(&self, x: &Matrix, y: &[f64], w: &[f64], folds: usize, seed: u64, what: &str) -> Result<Fitted, EstimatorError> {
        Ok(match &self.learners {
            Some(lib) => Fitted::Sl(fit_super_learner(lib, x, y, w, folds, seed)?),
            None => Fitted::Glm(fit_binomial(x, y, w, what)?),
        })
    }
}

impl Fitted {
    fn predict(&self, x: &Matrix) -> Result<Vec<f64>, EstimatorError> {
        Ok(match self {
            Fitted::Glm(f) => f.predict_mean(x)?,
            Fitted::Sl(f) => f.predict(x),
        })
    }
}

/// Confounded-model outcome probabilities at the observed treatment and at
/// `x = 1`, `x = 0`, for every row, standardized.
fn augmentation(d: &Dataset, model: &WorkingModelSpec) -> Result<[Vec<f64>; 3], EstimatorError> {
    let f = model.confounded_outcome();
    let design = design_matrix(d, &f)?;
    let y = d.observed(OUTCOME)?;
    let fit = fit_binomial(&design.x, y, &vec![1.0; d.n_rows()], "confounded outcome model")?;
    let observed = fit.predict_mean(&design.x)?;
    let p1 = fit.predict_mean(&design_matrix_with(d, &f, &[(TREATMENT, 1.0)])?.x)?;
    let p0 = fit.predict_mean(&design_matrix_with(d, &f, &[(TREATMENT, 0.0)])?.x)?;
    // Standardized so a GLM coefficient on it stays on the scale of the
    // others (the separation guard bounds coefficient size).
    let n = observed.len() as f64;
    let mean = observed.iter().sum::<f64>() / n;
    let sd = (observed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    let z = |v: Vec<f64>| v.into_iter().map(|p| (p - mean) / sd).collect();
    Ok([z(observed), z(p1), z(p0)])
}

pub fn estimate_tmle(
    d: &Dataset,
    model: &WorkingModelSpec,
    estimands: &[Estimand],
    config: &TmleConfig,
    shared: Option<&SharedFits>,
) -> Result<EstimatorOutput, EstimatorError> {
    if estimands.contains(&Estimand::ClogOr) {
        return Err(EstimatorError::Usage("TMLE does not target clogOR".into()));
    }
    let n = d.n_rows();
    let r = d.observed(INDICATOR)?;
    let rows: Vec<usize> = (0..n).filter(|&i| r[i] == 1.0).collect();
    if rows.is_empty() {
        return Err(EstimatorError::NoCompleteCases);
    }
    let aug = if config.augment { Some(augmentation(d, model)?) } else { None };
    let pick = |v: &[f64]| -> Vec<f64> { rows.iter().map(|&i| v[i]).collect() };
    let seed = crate::rng::StreamKey::root(config.seed);

    // Observation probabilities, all rows.
    let pi_model = Nuisance { formula: &model.missingness, learners: Some(library(false)) };
    let pi_x = pi_model.inputs(d, &[], aug.as_ref().map(|a| a[0].as_slice()))?;
    let fit_pi = |s: u64| pi_model.fit(&pi_x, r, &vec![1.0; n], config.sl_folds, s, "missingness model")?.predict(&pi_x);
    let raw = match shared {
        Some(c) => c.observation_probabilities(config.augment, fit_pi)?,
        None => fit_pi(seed.label("pi").value())?,
    };
    let pi: Vec<f64> = raw.into_iter().map(|p| config.clip(p)).collect();

    let cc = d.select_rows(&rows);
    let m = rows.len();
    let w: Vec<f64> = rows.iter().map(|&i| 1.0 / pi[i]).collect();
    let y = cc.observed(OUTCOME)?;
    let x = cc.observed(TREATMENT)?;
    let sl = config.sl_scope == SlScope::AllThree;

    // Treatment probabilities on complete cases.
    let g_model = Nuisance { formula: &model.propensity, learners: sl.then(|| library(false)) };
    let g_x = g_model.inputs(&cc, &[], None)?;
    let g_fit = g_model.fit(&g_x, x, &w, config.sl_folds, seed.label("g").value(), "treatment model")?;
    let g1: Vec<f64> = g_fit.predict(&g_x)?.into_iter().map(|p| config.clip(p)).collect();

    // Initial outcome fit and counterfactual predictions.
    let q_model = Nuisance { formula: &model.outcome, learners: sl.then(|| library(config.rare_library)) };
    let aug_cc = aug.as_ref().map(|a| [pick(&a[0]), pick(&a[1]), pick(&a[2])]);
    let q_x = q_model.inputs(&cc, &[], aug_cc.as_ref().map(|a| a[0].as_slice()))?;
    let q_fit = q_model.fit(&q_x, y, &w, config.sl_folds, seed.label("Q").value(), "outcome model")?;
    let q1 = q_fit.predict(&q_model.inputs(&cc, &[(TREATMENT, 1.0)], aug_cc.as_ref().map(|a| a[1].as_slice()))?)?;
    let q0 = q_fit.predict(&q_model.inputs(&cc, &[(TREATMENT, 0.0)], aug_cc.as_ref().map(|a| a[2].as_slice()))?)?;

    let h: Vec<[f64; 2]> = (0..m).map(|i| if x[i] == 1.0 { [1.0 / g1[i], 0.0] } else { [0.0, 1.0 / (1.0 - g1[i])] }).collect();
    let qa: Vec<f64> = (0..m).map(|i| if x[i] == 1.0 { q1[i] } else { q0[i] }).collect();
    let fl = fluctuate(y, &qa, &h, &w);
    if !fl.converged {
        return Err(EstimatorError::NotConverged("TMLE fluctuation".into()));
    }
    let update = |q: f64, shift: f64| expit(logit(q.clamp(CLIP, 1.0 - CLIP)) + shift);
    let qs1: Vec<f64> = (0..m).map(|i| update(q1[i], fl.epsilon[0] / g1[i])).collect();
    let qs0: Vec<f64> = (0..m).map(|i| update(q0[i], fl.epsilon[1] / (1.0 - g1[i]))).collect();

    let wsum: f64 = w.iter().sum();
    let mu1 = qs1.iter().zip(&w).map(|(q, wi)| q * wi).sum::<f64>() / wsum;
    let mu0 = qs0.iter().zip(&w).map(|(q, wi)| q * wi).sum::<f64>() / wsum;

    // Influence values; rows with R = 0 contribute −μ.
    let mut ic = vec![[-mu1, -mu0]; n];
    for (k, &i) in rows.iter().enumerate() {
        let t1 = if x[k] == 1.0 { (y[k] - qs1[k]) / g1[k] } else { 0.0 };
        let t0 = if x[k] == 0.0 { (y[k] - qs0[k]) / (1.0 - g1[k]) } else { 0.0 };
        ic[i] = [w[k] * (t1 + qs1[k]) - mu1, w[k] * (t0 + qs0[k]) - mu0];
    }
    let mean = [ic.iter().map(|v| v[0]).sum::<f64>() / n as f64, ic.iter().map(|v| v[1]).sum::<f64>() / n as f64];
    let mut cov = [[0.0; 2]; 2];
    for v in &ic {
        for a in 0..2 {
            for b in 0..2 {
                cov[a][b] += (v[a] - mean[a]) * (v[b] - mean[b]);
            }
        }
    }
    let n2 = (n * n) as f64;
    for row in &mut cov {
        for c in row.iter_mut() {
            *c /= n2;
        }
    }
    let result = MarginalResult { mu1, mu0, cov };
    Ok(estimands.iter().map(|&e| (e, marginal_estimate(&result, e))).collect())
}
