//! Marginal risks under treatment/control and the contrasts built on them.

use nalgebra::DMatrix;

use crate::formula::{design_matrix_with, Design, Formula, FormulaError};
use crate::glm::{Family, GlmError, GlmFit};
use crate::matrix::{dot, Matrix};
use crate::table::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Measure {
    Rd,
    Rr,
    Or,
    LogRr,
    LogOr,
}

impl Measure {
    pub const ALL: [Measure; 5] = [Measure::Rd, Measure::Rr, Measure::Or, Measure::LogRr, Measure::LogOr];

    /// Value at `(μ1, μ0)`; `None` where a ratio is undefined.
    pub fn value(self, mu1: f64, mu0: f64) -> Option<f64> {
        let interior = |m: f64| m > 0.0 && m < 1.0;
        if self != Measure::Rd && !(interior(mu1) && interior(mu0)) {
            return None;
        }
        let odds = |m: f64| m / (1.0 - m);
        Some(match self {
            Measure::Rd => mu1 - mu0,
            Measure::Rr => mu1 / mu0,
            Measure::Or => odds(mu1) / odds(mu0),
            Measure::LogRr => mu1.ln() - mu0.ln(),
            Measure::LogOr => (mu1.ln() - (-mu1).ln_1p()) - (mu0.ln() - (-mu0).ln_1p()),
        })
    }

    /// Gradient with respect to `(μ1, μ0)`.
    pub fn gradient(self, mu1: f64, mu0: f64) -> Option<[f64; 2]> {
        self.value(mu1, mu0)?;
        Some(match self {
            Measure::Rd => [1.0, -1.0],
            Measure::Rr => [1.0 / mu0, -mu1 / (mu0 * mu0)],
            Measure::Or => {
                let or = self.value(mu1, mu0)?;
                [or / (mu1 * (1.0 - mu1)), -or / (mu0 * (1.0 - mu0))]
            }
            Measure::LogRr => [1.0 / mu1, -1.0 / mu0],
            Measure::LogOr => [1.0 / (mu1 * (1.0 - mu1)), -1.0 / (mu0 * (1.0 - mu0))],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalResult {
    pub mu1: f64,
    pub mu0: f64,
    /// Covariance of `(μ1, μ0)`.
    pub cov: [[f64; 2]; 2],
}

impl MarginalResult {
    pub fn value(&self, m: Measure) -> Option<f64> {
        m.value(self.mu1, self.mu0)
    }

    pub fn se(&self, m: Measure) -> Option<f64> {
        let g = m.gradient(self.mu1, self.mu0)?;
        let c = &self.cov;
        let v = g[0] * g[0] * c[0][0] + 2.0 * g[0] * g[1] * c[0][1] + g[1] * g[1] * c[1][1];
        (v >= 0.0 && v.is_finite()).then(|| v.sqrt())
    }

    pub fn ratio_defined(&self) -> bool {
        self.value(Measure::LogOr).is_some()
    }
}

fn weighted_mean_and_gradient(family: Family, beta: &[f64], x: &Matrix, w: &[f64]) -> (f64, Vec<f64>) {
    let p = x.cols();
    let mut total = 0.0;
    let mut grad = vec![0.0; p];
    let wsum: f64 = w.iter().sum();
    for (i, wi) in w.iter().enumerate() {
        if *wi == 0.0 {
            continue;
        }
        let r = x.row(i);
        let eta = dot(r, beta);
        total += wi * family.inverse_link(eta);
        let d = wi * family.mu_eta(eta);
        for (g, v) in grad.iter_mut().zip(r) {
            *g += d * v;
        }
    }
    for g in &mut grad {
        *g /= wsum;
    }
    (total / wsum, grad)
}

/// `(μ1, μ0)` for coefficients `beta`, averaging over rows with weights `w`.
pub fn marginal_means(family: Family, beta: &[f64], x1: &Matrix, x0: &Matrix, w: &[f64]) -> (f64, f64) {
    (
        weighted_mean_and_gradient(family, beta, x1, w).0,
        weighted_mean_and_gradient(family, beta, x0, w).0,
    )
}

/// Gradient of a measure with respect to the regression coefficients.
pub fn measure_gradient(m: Measure, family: Family, beta: &[f64], x1: &Matrix, x0: &Matrix, w: &[f64]) -> Option<Vec<f64>> {
    let (mu1, g1) = weighted_mean_and_gradient(family, beta, x1, w);
    let (mu0, g0) = weighted_mean_and_gradient(family, beta, x0, w);
    let d = m.gradient(mu1, mu0)?;
    Some(g1.iter().zip(&g0).map(|(a, b)| d[0] * a + d[1] * b).collect())
}

/// Standardize a fitted outcome model over rows of `x1`/`x0` (the same rows
/// with treatment set to 1 and 0). Weights are treated as fixed.
pub fn marginalize_designs(fit: &GlmFit, cov: &DMatrix<f64>, x1: &Matrix, x0: &Matrix, w: &[f64]) -> Result<MarginalResult, GlmError> {
    if !fit.converged {
        return Err(GlmError::NotConverged);
    }
    let p = fit.coefficients.len();
    if x1.cols() != p || x0.cols() != p || x1.rows() != w.len() || x0.rows() != w.len() {
        return Err(GlmError::Dimension("marginal design shape".into()));
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) || !w.iter().any(|v| *v > 0.0) {
        return Err(GlmError::Weights);
    }
    let (mu1, g1) = weighted_mean_and_gradient(fit.family, &fit.coefficients, x1, w);
    let (mu0, g0) = weighted_mean_and_gradient(fit.family, &fit.coefficients, x0, w);
    let quad = |a: &[f64], b: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..p {
            for j in 0..p {
                s += a[i] * cov[(i, j)] * b[j];
            }
        }
        s
    };
    Ok(MarginalResult { mu1, mu0, cov: [[quad(&g1, &g1), quad(&g1, &g0)], [quad(&g0, &g1), quad(&g0, &g0)]] })
}

#[derive(Debug, thiserror::Error)]
pub enum MarginalError {
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error(transparent)]
    Formula(#[from] FormulaError),
}

/// Counterfactual designs for `treat = 1` and `treat = 0`.
pub fn counterfactual_designs(d: &Dataset, formula: &Formula, treat: &str) -> Result<(Design, Design), FormulaError> {
    Ok((design_matrix_with(d, formula, &[(treat, 1.0)])?, design_matrix_with(d, formula, &[(treat, 0.0)])?))
}

pub fn marginalize(fit: &GlmFit, d: &Dataset, formula: &Formula, w: &[f64], treat: &str) -> Result<MarginalResult, MarginalError> {
    let (x1, x0) = counterfactual_designs(d, formula, treat)?;
    Ok(marginalize_designs(fit, &fit.covariance, &x1.x, &x0.x, w)?)
}
