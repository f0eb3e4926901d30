//! Generalized raking with the exponential-tilting distance.
//!
//! Given base weights `wᵢ` on the selected rows and auxiliaries `hᵢ` on all
//! rows, find multipliers `aᵢ = exp(hᵢᵀλ)` such that
//! `Σ_sel wᵢ aᵢ hᵢ = Σ_all hᵢ`. λ minimizes the convex dual
//! `D(λ) = Σ_sel wᵢ exp(hᵢᵀλ) − λᵀT`.

use nalgebra::{DMatrix, DVector};

use crate::glm::{GlmError, GlmFit};
use crate::matrix::{dot, spd_inverse, spd_solve, weighted_gram, Matrix};

#[derive(Debug, thiserror::Error)]
pub enum CalibrationError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("base weights must be finite and positive")]
    BaseWeights,
    #[error("{selected} selected rows cannot calibrate {k} auxiliaries")]
    TooFewCases { selected: usize, k: usize },
}

#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    /// One weight per selected row, in row order.
    pub base_weights: Vec<f64>,
    /// Auxiliaries for every row of the full cohort.
    pub aux: Matrix,
    pub selected: Vec<bool>,
    pub tol: f64,
    pub max_iter: usize,
}

impl CalibrationProblem {
    pub fn new(base_weights: Vec<f64>, aux: Matrix, selected: Vec<bool>) -> Self {
        CalibrationProblem { base_weights, aux, selected, tol: 1e-8, max_iter: 100 }
    }

    pub fn selected_rows(&self) -> Vec<usize> {
        (0..self.selected.len()).filter(|&i| self.selected[i]).collect()
    }

    pub fn totals(&self) -> Vec<f64> {
        let k = self.aux.cols();
        let mut t = vec![0.0; k];
        for i in 0..self.aux.rows() {
            for (tj, v) in t.iter_mut().zip(self.aux.row(i)) {
                *tj += v;
            }
        }
        t
    }
}

#[derive(Debug, Clone)]
pub struct CalibratedWeights {
    pub multipliers: Vec<f64>,
    pub lambda: Vec<f64>,
    pub converged: bool,
    pub residual_norm: f64,
    pub iterations: usize,
    /// Dual objective after each accepted step, starting at λ = 0.
    pub dual_trace: Vec<f64>,
}

impl CalibratedWeights {
    /// Final weights `wᵢ aᵢ`.
    pub fn weights(&self, base: &[f64]) -> Vec<f64> {
        base.iter().zip(&self.multipliers).map(|(w, a)| w * a).collect()
    }
}

struct Dual<'a> {
    h: &'a Matrix,
    w: &'a [f64],
    t: &'a [f64],
}

impl Dual<'_> {
    fn objective(&self, lambda: &[f64]) -> f64 {
        let s: f64 = (0..self.h.rows()).map(|i| self.w[i] * dot(self.h.row(i), lambda).exp()).sum();
        s - dot(lambda, self.t)
    }

    fn residual(&self, lambda: &[f64]) -> Vec<f64> {
        let k = self.t.len();
        let mut f: Vec<f64> = self.t.iter().map(|v| -v).collect();
        for i in 0..self.h.rows() {
            let r = self.h.row(i);
            let s = self.w[i] * dot(r, lambda).exp();
            for j in 0..k {
                f[j] += s * r[j];
            }
        }
        f
    }

    fn hessian(&self, lambda: &[f64]) -> DMatrix<f64> {
        let g: Vec<f64> = (0..self.h.rows()).map(|i| self.w[i] * dot(self.h.row(i), lambda).exp()).collect();
        weighted_gram(self.h, &g)
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Damped Newton on the dual. Singular Jacobians and iteration limits are
/// reported through `converged = false`.
pub fn rake(problem: &CalibrationProblem) -> Result<CalibratedWeights, CalibrationError> {
    let n = problem.aux.rows();
    let k = problem.aux.cols();
    if problem.selected.len() != n {
        return Err(CalibrationError::Dimension(format!("{} selection flags for {n} rows", problem.selected.len())));
    }
    let rows = problem.selected_rows();
    if rows.len() != problem.base_weights.len() {
        return Err(CalibrationError::Dimension(format!(
            "{} base weights for {} selected rows",
            problem.base_weights.len(),
            rows.len()
        )));
    }
    if problem.base_weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
        return Err(CalibrationError::BaseWeights);
    }
    if rows.len() < k {
        return Err(CalibrationError::TooFewCases { selected: rows.len(), k });
    }
    let h = problem.aux.select_rows(&rows);
    let totals = problem.totals();
    let dual = Dual { h: &h, w: &problem.base_weights, t: &totals };

    let mut lambda = vec![0.0; k];
    let mut obj = dual.objective(&lambda);
    let mut f = dual.residual(&lambda);
    let mut norm = inf_norm(&f);
    let mut trace = vec![obj];
    let mut converged = norm < problem.tol;
    let mut iterations = 0;

    while !converged && iterations < problem.max_iter {
        iterations += 1;
        let hess = dual.hessian(&lambda);
        let Some(step) = spd_solve(&hess, &DVector::from_column_slice(&f)) else {
            break;
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = lambda.iter().zip(step.iter()).map(|(l, d)| l - t * d).collect();
            let cand_obj = dual.objective(&cand);
            if cand_obj.is_finite() {
                let cand_f = dual.residual(&cand);
                let cand_norm = inf_norm(&cand_f);
                // Near the optimum the objective change drops below rounding;
                // accept flat steps that still shrink the residual.
                let flat = cand_obj <= obj + 4.0 * f64::EPSILON * obj.abs();
                if cand_obj < obj || (flat && cand_norm < norm) {
                    lambda = cand;
                    obj = cand_obj;
                    f = cand_f;
                    norm = cand_norm;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        trace.push(obj);
        converged = norm < problem.tol;
    }

    let multipliers = (0..h.rows()).map(|i| dot(h.row(i), &lambda).exp()).collect();
    Ok(CalibratedWeights { multipliers, lambda, converged, residual_norm: norm, iterations, dual_trace: trace })
}

#[derive(Debug, Clone)]
pub struct RakingVariance {
    pub covariance: DMatrix<f64>,
    /// False when the auxiliary regression was rank deficient and the
    /// un-residualized variance was used instead.
    pub residualized: bool,
}

/// Linearized two-phase variance of coefficients fitted with calibrated
/// weights `gᵢ = wᵢ aᵢ`:
///
/// `V = Σ gᵢ uᵢuᵢᵀ + Σ (1 − πᵢ) gᵢ² eᵢeᵢᵀ`, with `uᵢ = bread · xᵢ(yᵢ − mᵢ)`,
/// `πᵢ = 1/wᵢ`, and `eᵢ` the residual of `uᵢ` after weighted regression on
/// `hᵢ` among the selected rows.
pub fn raking_variance(
    fit: &GlmFit,
    x_sel: &Matrix,
    y_sel: &[f64],
    base_weights: &[f64],
    calibrated: &CalibratedWeights,
    aux_sel: &Matrix,
) -> Result<RakingVariance, GlmError> {
    let m = x_sel.rows();
    if y_sel.len() != m || base_weights.len() != m || calibrated.multipliers.len() != m || aux_sel.rows() != m {
        return Err(GlmError::Dimension("selected-row inputs disagree in length".into()));
    }
    let g = calibrated.weights(base_weights);
    // bread·xᵢ(yᵢ − mᵢ): unit-weight influence directions.
    let u = fit.coefficient_eif(x_sel, y_sel, &vec![1.0 / m as f64; m])?;
    let p = u.cols();
    let k = aux_sel.cols();

    let hh = weighted_gram(aux_sel, &g);
    let mut residualized = false;
    let mut e = u.clone();
    if k > 0 {
        if let Some(hh_inv) = spd_inverse(&hh) {
            // B = (Σ g h hᵀ)⁻¹ Σ g h uᵀ, k × p.
            let mut hu = DMatrix::zeros(k, p);
            for i in 0..m {
                let (hr, ur) = (aux_sel.row(i), u.row(i));
                for a in 0..k {
                    let s = g[i] * hr[a];
                    for b in 0..p {
                        hu[(a, b)] += s * ur[b];
                    }
                }
            }
            let coef = hh_inv * hu;
            for i in 0..m {
                let hr = aux_sel.row(i);
                let er = e.row_mut(i);
                for b in 0..p {
                    let fitted: f64 = (0..k).map(|a| hr[a] * coef[(a, b)]).sum();
                    er[b] -= fitted;
                }
            }
            residualized = true;
        }
    }
    let phase2: Vec<f64> = (0..m)
        .map(|i| {
            let pi = (1.0 / base_weights[i]).min(1.0);
            (1.0 - pi) * g[i] * g[i]
        })
        .collect();
    let covariance = weighted_gram(&u, &g) + weighted_gram(&e, &phase2);
    Ok(RakingVariance { covariance, residualized })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::{fit_glm, Family};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_instance(seed: u64, n: usize, k: usize) -> CalibrationProblem {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let selected: Vec<bool> = (0..n).map(|i| i % 3 != 0 || rng.random_bool(0.3)).collect();
        let m = selected.iter().filter(|s| **s).count();
        let w = (0..m).map(|_| rng.random_range(1.0..2.5)).collect();
        CalibrationProblem::new(w, Matrix::from_rows(&rows), selected)
    }

    /// Generic first-order convex minimizer (gradient descent with Armijo
    /// backtracking and Barzilai-Borwein step lengths) on the same dual.
    fn oracle_lambda(p: &CalibrationProblem) -> Vec<f64> {
        let rows = p.selected_rows();
        let h = p.aux.select_rows(&rows);
        let t = p.totals();
        let f = |l: &[f64]| -> f64 {
            (0..h.rows()).map(|i| p.base_weights[i] * dot(h.row(i), l).exp()).sum::<f64>() - dot(l, &t)
        };
        let grad = |l: &[f64]| -> Vec<f64> {
            let mut g: Vec<f64> = t.iter().map(|v| -v).collect();
            for i in 0..h.rows() {
                let s = p.base_weights[i] * dot(h.row(i), l).exp();
                for (gj, hj) in g.iter_mut().zip(h.row(i)) {
                    *gj += s * hj;
                }
            }
            g
        };
        let k = t.len();
        let mut l = vec![0.0; k];
        let mut g = grad(&l);
        let mut step = 1e-2;
        for _ in 0..200_000 {
            if inf_norm(&g) < 1e-12 {
                break;
            }
            let fl = f(&l);
            let gg = dot(&g, &g);
            let mut s = step;
            let mut next;
            loop {
                next = l.iter().zip(&g).map(|(a, b)| a - s * b).collect::<Vec<_>>();
                if f(&next) <= fl - 1e-4 * s * gg || s < 1e-20 {
                    break;
                }
                s *= 0.5;
            }
            let gn = grad(&next);
            let sv: Vec<f64> = next.iter().zip(&l).map(|(a, b)| a - b).collect();
            let yv: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&sv, &yv);
            step = if sy > 0.0 { dot(&sv, &sv) / sy } else { 1e-2 };
            l = next;
            g = gn;
        }
        l
    }

    #[test]
    fn matches_generic_convex_optimizer() {
        for seed in 0..5 {
            let p = random_instance(100 + seed, 30, 3);
            let fit = rake(&p).unwrap();
            assert!(fit.converged, "seed {seed}");
            let oracle = oracle_lambda(&p);
            let rows = p.selected_rows();
            for (idx, &i) in rows.iter().enumerate() {
                let a = dot(p.aux.row(i), &oracle).exp();
                assert!((a - fit.multipliers[idx]).abs() < 1e-6, "seed {seed} row {i}");
            }
        }
    }

    #[test]
    fn balanced_problem_needs_no_tilt() {
        // Selected rows with weight 2 are exactly half the cohort, mirrored.
        let rows = vec![vec![1.0, 0.5], vec![-1.0, 2.0], vec![1.0, 0.5], vec![-1.0, 2.0]];
        let p = CalibrationProblem::new(vec![2.0, 2.0], Matrix::from_rows(&rows), vec![true, true, false, false]);
        let fit = rake(&p).unwrap();
        assert!(fit.converged);
        assert_eq!(fit.lambda, vec![0.0, 0.0]);
        assert_eq!(fit.multipliers, vec![1.0, 1.0]);
    }

    #[test]
    fn scalar_closed_form() {
        // h = +1, -1 on two selected rows with unit weights; cohort total 0.5.
        let rows = vec![vec![1.0], vec![-1.0], vec![0.5]];
        let p = CalibrationProblem::new(vec![1.0, 1.0], Matrix::from_rows(&rows), vec![true, true, false]);
        let fit = rake(&p).unwrap();
        // e^λ − e^{−λ} = 0.5  ⇒  λ = asinh(0.25).
        let lam = 0.25f64.asinh();
        assert!((fit.lambda[0] - lam).abs() < 1e-12);
        assert!((fit.multipliers[0] - lam.exp()).abs() < 1e-12);
        assert!((fit.multipliers[1] - (-lam).exp()).abs() < 1e-12);
    }

    #[test]
    fn invalid_inputs() {
        let m = Matrix::from_rows(&[vec![1.0], vec![2.0]]);
        let neg = CalibrationProblem::new(vec![-1.0], m.clone(), vec![true, false]);
        assert!(matches!(rake(&neg), Err(CalibrationError::BaseWeights)));
        let len = CalibrationProblem::new(vec![1.0, 1.0], m.clone(), vec![true, false]);
        assert!(matches!(rake(&len), Err(CalibrationError::Dimension(_))));
        let few = CalibrationProblem::new(vec![], m, vec![false, false]);
        assert!(matches!(rake(&few), Err(CalibrationError::TooFewCases { .. })));
    }

    #[test]
    fn infeasible_totals_do_not_converge() {
        // Every selected h is positive but the total is negative.
        let rows = vec![vec![1.0], vec![2.0], vec![-10.0]];
        let p = CalibrationProblem::new(vec![1.0, 1.0], Matrix::from_rows(&rows), vec![true, true, false]);
        let fit = rake(&p).unwrap();
        assert!(!fit.converged);
        assert!(fit.multipliers.iter().all(|a| *a >= 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn dual_decreases_and_totals_match(seed in 0u64..100_000, k in 1usize..4) {
            let p = random_instance(seed, 40, k);
            let fit = rake(&p).unwrap();
            for pair in fit.dual_trace.windows(2) {
                prop_assert!(pair[1] <= pair[0] + 4.0 * f64::EPSILON * pair[0].abs());
            }
            prop_assert!(fit.multipliers.iter().all(|a| *a > 0.0));
            if fit.converged {
                let rows = p.selected_rows();
                let t = p.totals();
                for j in 0..k {
                    let s: f64 = rows.iter().enumerate().map(|(idx, &i)| p.base_weights[idx] * fit.multipliers[idx] * p.aux.get(i, j)).sum();
                    prop_assert!((s - t[j]).abs() < 1e-8);
                }
            }
        }

        #[test]
        fn constant_column_with_matching_total(seed in 0u64..100_000) {
            // A constant auxiliary calibrates the weight total to n.
            let mut p = random_instance(seed, 40, 2);
            let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![1.0, p.aux.get(i, 0), p.aux.get(i, 1)]).collect();
            p.aux = Matrix::from_rows(&rows);
            let fit = rake(&p).unwrap();
            prop_assert!(fit.converged);
            prop_assert!(fit.residual_norm < 1e-8);
            let total: f64 = fit.weights(&p.base_weights).iter().sum();
            prop_assert!((total - 40.0).abs() < 1e-8);
        }
    }

    fn variance_setup(seed: u64) -> (Matrix, Vec<f64>, Vec<f64>, GlmFit) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m = 300;
        let rows: Vec<Vec<f64>> = (0..m).map(|_| vec![1.0, rng.random_range(-1.0..1.0)]).collect();
        let y: Vec<f64> = rows.iter().map(|r| f64::from(u8::from(rng.random_bool(crate::glm::expit(-0.5 + r[1]))))).collect();
        let w: Vec<f64> = (0..m).map(|_| rng.random_range(1.0..3.0)).collect();
        let x = Matrix::from_rows(&rows);
        let fit = fit_glm(&x, &y, &w, Family::Binomial).unwrap();
        (x, y, w, fit)
    }

    #[test]
    fn zero_auxiliaries_give_ipw_sandwich() {
        let (x, y, w, fit) = variance_setup(1);
        let m = x.rows();
        let cal = CalibratedWeights {
            multipliers: vec![1.0; m],
            lambda: vec![0.0],
            converged: true,
            residual_norm: 0.0,
            iterations: 0,
            dual_trace: vec![],
        };
        let v = raking_variance(&fit, &x, &y, &w, &cal, &Matrix::zeros(m, 1)).unwrap();
        assert!(!v.residualized);
        let sandwich = fit.sandwich(&x, &y, &w).unwrap();
        assert!((&v.covariance - &sandwich).amax() < 1e-12 * sandwich.amax());
    }

    #[test]
    fn predictive_auxiliary_removes_phase_two() {
        let (x, y, w, fit) = variance_setup(2);
        let m = x.rows();
        let cal = CalibratedWeights {
            multipliers: vec![1.0; m],
            lambda: vec![0.0; 2],
            converged: true,
            residual_norm: 0.0,
            iterations: 0,
            dual_trace: vec![],
        };
        let u = fit.coefficient_eif(&x, &y, &vec![1.0; m]).unwrap();
        let v = raking_variance(&fit, &x, &y, &w, &cal, &u).unwrap();
        assert!(v.residualized);
        let phase1 = weighted_gram(&fit.coefficient_eif(&x, &y, &vec![1.0 / m as f64; m]).unwrap(), &w);
        assert!((&v.covariance - &phase1).amax() < 1e-10 * phase1.amax());
    }
}
