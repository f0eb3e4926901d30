//! Frozen outputs of independent implementations (statsmodels, scipy).
//! Regenerate with the scripts in tests/data/.

use misscon::calibration::{rake, CalibrationProblem};
use misscon::glm::{fit_glm, fit_glm_with, Family, GlmOptions};
use misscon::marginal::{marginalize_designs, Measure};
use misscon::matrix::Matrix;
use serde::Deserialize;

#[derive(Deserialize)]
struct Coefs {
    coef: Vec<f64>,
    se: Vec<f64>,
}

#[derive(Deserialize)]
struct Standardized {
    mu1: f64,
    mu0: f64,
    #[serde(rename = "mRD")]
    rd: f64,
    #[serde(rename = "mlogRR")]
    log_rr: f64,
    #[serde(rename = "mlogOR")]
    log_or: f64,
    se: [f64; 3],
}

#[derive(Deserialize)]
struct GlmOracle {
    x: Vec<f64>,
    z1: Vec<f64>,
    z2: Vec<f64>,
    y: Vec<f64>,
    g: Vec<f64>,
    w: Vec<f64>,
    logistic: Coefs,
    weighted_logistic_hc0: Coefs,
    gaussian: Coefs,
    standardized: Standardized,
}

#[derive(Deserialize)]
struct RakingInstance {
    aux: Vec<Vec<f64>>,
    selected: Vec<bool>,
    base_weights: Vec<f64>,
    multipliers: Vec<f64>,
}

#[derive(Deserialize)]
struct RakingOracle {
    instances: Vec<RakingInstance>,
}

fn glm_oracle() -> GlmOracle {
    serde_json::from_str(include_str!("data/glm_oracle.json")).unwrap()
}

fn design(o: &GlmOracle, treat: Option<f64>) -> Matrix {
    let n = o.y.len();
    let x = treat.map_or_else(|| o.x.clone(), |t| vec![t; n]);
    Matrix::from_columns(n, &[vec![1.0; n], x, o.z1.clone(), o.z2.clone()])
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs().max(1e-3)
}

fn tight() -> GlmOptions {
    GlmOptions { tol: 1e-12, ..GlmOptions::default() }
}

#[test]
fn logistic_fit_matches_statsmodels() {
    let o = glm_oracle();
    let fit = fit_glm_with(&design(&o, None), &o.y, &vec![1.0; o.y.len()], Family::Binomial, None, &tight()).unwrap();
    assert!(fit.converged);
    for j in 0..4 {
        assert!(close(fit.coefficients[j], o.logistic.coef[j], 1e-7), "coef {j}");
        assert!(close(fit.se(j), o.logistic.se[j], 1e-6), "se {j}");
    }
}

#[test]
fn weighted_sandwich_matches_hc0() {
    let o = glm_oracle();
    let x = design(&o, None);
    let fit = fit_glm_with(&x, &o.y, &o.w, Family::Binomial, None, &tight()).unwrap().with_sandwich(&x, &o.y, &o.w).unwrap();
    for j in 0..4 {
        assert!(close(fit.coefficients[j], o.weighted_logistic_hc0.coef[j], 1e-7), "coef {j}");
        assert!(close(fit.se(j), o.weighted_logistic_hc0.se[j], 1e-6), "se {j}");
    }
}

#[test]
fn gaussian_fit_matches_statsmodels() {
    let o = glm_oracle();
    let fit = fit_glm(&design(&o, None), &o.g, &vec![1.0; o.g.len()], Family::Gaussian).unwrap();
    for j in 0..4 {
        assert!(close(fit.coefficients[j], o.gaussian.coef[j], 1e-9), "coef {j}");
        assert!(close(fit.se(j), o.gaussian.se[j], 1e-9), "se {j}");
    }
}

#[test]
fn standardized_contrasts_and_delta_ses() {
    let o = glm_oracle();
    let x = design(&o, None);
    let fit = fit_glm_with(&x, &o.y, &o.w, Family::Binomial, None, &tight()).unwrap().with_sandwich(&x, &o.y, &o.w).unwrap();
    let m = marginalize_designs(&fit, &fit.covariance, &design(&o, Some(1.0)), &design(&o, Some(0.0)), &o.w).unwrap();
    let s = &o.standardized;
    assert!(close(m.mu1, s.mu1, 1e-7) && close(m.mu0, s.mu0, 1e-7));
    for (k, (measure, value)) in [(Measure::Rd, s.rd), (Measure::LogRr, s.log_rr), (Measure::LogOr, s.log_or)].into_iter().enumerate() {
        assert!(close(m.value(measure).unwrap(), value, 1e-7), "{measure:?}");
        // reference gradient is a central difference
        assert!(close(m.se(measure).unwrap(), s.se[k], 1e-5), "{measure:?} se");
    }
}

#[test]
fn raking_matches_generic_solver() {
    let o: RakingOracle = serde_json::from_str(include_str!("data/raking_oracle.json")).unwrap();
    assert_eq!(o.instances.len(), 5);
    for (k, inst) in o.instances.iter().enumerate() {
        let p = CalibrationProblem::new(inst.base_weights.clone(), Matrix::from_rows(&inst.aux), inst.selected.clone());
        let c = rake(&p).unwrap();
        assert!(c.converged, "instance {k}");
        for (a, b) in c.multipliers.iter().zip(&inst.multipliers) {
            assert!((a - b).abs() < 1e-6, "instance {k}: {a} vs {b}");
        }
    }
}
