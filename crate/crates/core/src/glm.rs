//! Weighted GLM fitting by iteratively reweighted least squares.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::matrix::{dot, spd_inverse, spd_solve, weighted_gram, weighted_xtv, Matrix};

#[derive(Debug, thiserror::Error)]
pub enum GlmError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("weights must be finite, non-negative and not all zero")]
    Weights,
    #[error("response invalid for {0:?} family")]
    Response(Family),
    #[error("fit did not converge")]
    NotConverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    /// Logistic regression.
    Binomial,
    Gaussian,
    /// Log-linear counts.
    Poisson,
}

impl Family {
    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            Family::Binomial => expit(eta),
            Family::Gaussian => eta,
            Family::Poisson => eta.min(700.0).exp(),
        }
    }

    pub fn link(self, mu: f64) -> f64 {
        match self {
            Family::Binomial => logit(mu),
            Family::Gaussian => mu,
            Family::Poisson => mu.ln(),
        }
    }

    /// dμ/dη, which for canonical links is also the variance function.
    pub fn mu_eta(self, eta: f64) -> f64 {
        match self {
            Family::Binomial => {
                let p = expit(eta);
                p * (1.0 - p)
            }
            Family::Gaussian => 1.0,
            Family::Poisson => eta.min(700.0).exp(),
        }
    }

    fn unit_deviance(self, y: f64, eta: f64) -> f64 {
        match self {
            Family::Binomial => {
                if y == 1.0 {
                    2.0 * softplus(-eta)
                } else {
                    2.0 * softplus(eta)
                }
            }
            Family::Gaussian => (y - eta) * (y - eta),
            Family::Poisson => {
                let mu = self.inverse_link(eta);
                let t = if y > 0.0 { y * (y / mu).ln() } else { 0.0 };
                2.0 * (t - (y - mu))
            }
        }
    }

    fn valid_response(self, y: f64) -> bool {
        match self {
            Family::Binomial => y == 0.0 || y == 1.0,
            Family::Gaussian => y.is_finite(),
            Family::Poisson => y.is_finite() && y >= 0.0,
        }
    }
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlmOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Binomial fits with any |coefficient| above this are treated as
    /// diverging (separation).
    pub divergence_bound: f64,
}

impl Default for GlmOptions {
    fn default() -> Self {
        GlmOptions { tol: 1e-8, max_iter: 50, divergence_bound: 25.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovarianceKind {
    Model,
    Sandwich,
}

#[derive(Debug, Clone)]
pub struct GlmFit {
    pub family: Family,
    pub coefficients: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub covariance_kind: CovarianceKind,
    /// Inverse of the unscaled weighted information `Xᵀ diag(w·v) X`.
    pub bread: DMatrix<f64>,
    pub dispersion: f64,
    pub converged: bool,
    pub deviance: f64,
    pub iterations: usize,
    pub n_used: usize,
    pub weight_sum: f64,
}

fn check_inputs(x: &Matrix, y: &[f64], w: &[f64], family: Family, offset: Option<&[f64]>) -> Result<(), GlmError> {
    let n = x.rows();
    if y.len() != n || w.len() != n {
        return Err(GlmError::Dimension(format!("X has {n} rows, y {}, w {}", y.len(), w.len())));
    }
    if let Some(o) = offset {
        if o.len() != n {
            return Err(GlmError::Dimension(format!("offset has {} entries for {n} rows", o.len())));
        }
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) || !w.iter().any(|v| *v > 0.0) {
        return Err(GlmError::Weights);
    }
    if y.iter().zip(w).any(|(v, wi)| *wi > 0.0 && !family.valid_response(*v)) {
        return Err(GlmError::Response(family));
    }
    Ok(())
}

pub fn fit_glm(x: &Matrix, y: &[f64], w: &[f64], family: Family) -> Result<GlmFit, GlmError> {
    fit_glm_with(x, y, w, family, None, &GlmOptions::default())
}

/// IRLS with step halving. Numerical failure is reported through
/// `converged = false`, never as an error.
pub fn fit_glm_with(
    x: &Matrix,
    y: &[f64],
    w: &[f64],
    family: Family,
    offset: Option<&[f64]>,
    opts: &GlmOptions,
) -> Result<GlmFit, GlmError> {
    check_inputs(x, y, w, family, offset)?;
    let n = x.rows();
    let p = x.cols();
    let off = |i: usize| offset.map_or(0.0, |o| o[i]);
    let n_used = w.iter().filter(|v| **v > 0.0).count();
    let weight_sum: f64 = w.iter().sum();

    let deviance_at = |eta: &[f64]| -> f64 {
        eta.iter().zip(y).zip(w).filter(|(_, wi)| **wi > 0.0).map(|((e, yi), wi)| wi * family.unit_deviance(*yi, *e)).sum()
    };

    let mut eta: Vec<f64> = (0..n)
        .map(|i| match family {
            Family::Binomial => logit((y[i] + 0.5) / 2.0),
            Family::Gaussian => y[i],
            Family::Poisson => (y[i] + 0.1).ln(),
        })
        .collect();
    let mut beta = vec![0.0; p];
    let mut have_beta = false;
    let mut dev_old = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let mut solve_failed = false;

    for iter in 1..=opts.max_iter {
        iterations = iter;
        let mut ww = vec![0.0; n];
        let mut z = vec![0.0; n];
        for i in 0..n {
            if w[i] == 0.0 {
                continue;
            }
            let mu = family.inverse_link(eta[i]);
            let d = family.mu_eta(eta[i]).max(1e-300);
            ww[i] = w[i] * d;
            z[i] = eta[i] - off(i) + (y[i] - mu) / d;
        }
        let info = weighted_gram(x, &ww);
        let rhs = weighted_xtv(x, &ww, &z);
        let Some(sol) = spd_solve(&info, &rhs) else {
            solve_failed = true;
            break;
        };
        let mut cand: Vec<f64> = sol.iter().copied().collect();
        let mut cand_eta: Vec<f64> = (0..n).map(|i| dot(x.row(i), &cand) + off(i)).collect();
        let mut dev = deviance_at(&cand_eta);
        if have_beta {
            let mut halvings = 0;
            while (!dev.is_finite() || dev > dev_old * (1.0 + 1e-12) + 1e-12) && halvings < 30 {
                for (c, b) in cand.iter_mut().zip(&beta) {
                    *c = 0.5 * (*c + b);
                }
                cand_eta = (0..n).map(|i| dot(x.row(i), &cand) + off(i)).collect();
                dev = deviance_at(&cand_eta);
                halvings += 1;
            }
        }
        if !dev.is_finite() {
            solve_failed = true;
            break;
        }
        beta = cand;
        eta = cand_eta;
        have_beta = true;
        if converged {
            // Polishing step taken; keep it whatever the criterion says.
            dev_old = dev;
            break;
        }
        if (dev - dev_old).abs() / (dev.abs() + 0.1) < opts.tol {
            // One more Newton step drives the score to rounding level.
            converged = true;
        }
        dev_old = dev;
    }

    let deviance = if have_beta { dev_old } else { f64::NAN };
    if solve_failed && !have_beta {
        beta = vec![f64::NAN; p];
    }
    converged &= !solve_failed;

    if family == Family::Binomial {
        let mut seen = [false; 2];
        for (yi, wi) in y.iter().zip(w) {
            if *wi > 0.0 {
                seen[usize::from(*yi == 1.0)] = true;
            }
        }
        if !(seen[0] && seen[1]) {
            converged = false;
        }
        if beta.iter().any(|b| b.abs() > opts.divergence_bound) {
            converged = false;
        }
    }
    if beta.iter().any(|b| !b.is_finite()) {
        converged = false;
    }

    let ww: Vec<f64> = (0..n).map(|i| if w[i] > 0.0 { w[i] * family.mu_eta(eta[i]) } else { 0.0 }).collect();
    let bread = spd_inverse(&weighted_gram(x, &ww));
    if bread.is_none() {
        converged = false;
    }
    let bread = bread.unwrap_or_else(|| DMatrix::from_element(p, p, f64::NAN));
    let dispersion = match family {
        Family::Gaussian => {
            let rss: f64 = (0..n).map(|i| w[i] * (y[i] - eta[i]).powi(2)).sum();
            if n_used > p {
                rss / (n_used - p) as f64
            } else {
                f64::NAN
            }
        }
        _ => 1.0,
    };
    Ok(GlmFit {
        family,
        coefficients: beta,
        covariance: &bread * dispersion,
        covariance_kind: CovarianceKind::Model,
        bread,
        dispersion,
        converged,
        deviance,
        iterations,
        n_used,
        weight_sum,
    })
}

impl GlmFit {
    pub fn linear_predictor(&self, x: &Matrix) -> Result<Vec<f64>, GlmError> {
        if x.cols() != self.coefficients.len() {
            return Err(GlmError::Dimension(format!(
                "design has {} columns, fit has {} coefficients",
                x.cols(),
                self.coefficients.len()
            )));
        }
        Ok(x.mul_vec(&self.coefficients))
    }

    pub fn predict_mean(&self, x: &Matrix) -> Result<Vec<f64>, GlmError> {
        Ok(self.linear_predictor(x)?.into_iter().map(|e| self.family.inverse_link(e)).collect())
    }

    pub fn se(&self, j: usize) -> f64 {
        self.covariance[(j, j)].sqrt()
    }

    /// Per-row `bread · xᵢ (yᵢ − mᵢ)` (unweighted by the training weights).
    fn score_directions(&self, x: &Matrix, y: &[f64], offset: Option<&[f64]>) -> Result<Matrix, GlmError> {
        if !self.converged {
            return Err(GlmError::NotConverged);
        }
        let n = x.rows();
        if y.len() != n || offset.is_some_and(|o| o.len() != n) {
            return Err(GlmError::Dimension("response length".into()));
        }
        let eta = self.linear_predictor(x)?;
        let p = x.cols();
        let mut out = Matrix::zeros(n, p);
        let mut tmp = DVector::zeros(p);
        for i in 0..n {
            let e = eta[i] + offset.map_or(0.0, |o| o[i]);
            let r = y[i] - self.family.inverse_link(e);
            for (j, v) in x.row(i).iter().enumerate() {
                tmp[j] = v * r;
            }
            let u = &self.bread * &tmp;
            out.row_mut(i).copy_from_slice(u.as_slice());
        }
        Ok(out)
    }

    /// Influence rows `n · bread · wᵢ xᵢ (yᵢ − mᵢ)`.
    pub fn coefficient_eif(&self, x: &Matrix, y: &[f64], w: &[f64]) -> Result<Matrix, GlmError> {
        self.coefficient_eif_offset(x, y, w, None)
    }

    pub fn coefficient_eif_offset(&self, x: &Matrix, y: &[f64], w: &[f64], offset: Option<&[f64]>) -> Result<Matrix, GlmError> {
        if w.len() != x.rows() {
            return Err(GlmError::Dimension("weight length".into()));
        }
        let mut u = self.score_directions(x, y, offset)?;
        let n = x.rows() as f64;
        for (i, wi) in w.iter().enumerate() {
            for v in u.row_mut(i) {
                *v *= n * wi;
            }
        }
        Ok(u)
    }

    /// Robust covariance `Σ wᵢ² uᵢ uᵢᵀ` with `uᵢ = bread · xᵢ (yᵢ − mᵢ)`.
    pub fn sandwich(&self, x: &Matrix, y: &[f64], w: &[f64]) -> Result<DMatrix<f64>, GlmError> {
        let u = self.score_directions(x, y, None)?;
        let w2: Vec<f64> = w.iter().map(|v| v * v).collect();
        Ok(weighted_gram(&u, &w2))
    }

    pub fn with_sandwich(mut self, x: &Matrix, y: &[f64], w: &[f64]) -> Result<Self, GlmError> {
        self.covariance = self.sandwich(x, y, w)?;
        self.covariance_kind = CovarianceKind::Sandwich;
        Ok(self)
    }
}
