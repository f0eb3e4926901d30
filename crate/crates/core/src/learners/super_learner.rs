use rand::seq::SliceRandom;

use super::{fit_learner, FittedLearner, LearnerError, LearnerSpec, CLIP};
use crate::matrix::Matrix;
use crate::rng::StreamKey;

#[derive(Debug, Clone)]
pub struct SuperLearnerFit {
    pub specs: Vec<LearnerSpec>,
    pub learners: Vec<FittedLearner>,
    /// Convex combination weights, aligned with `learners`.
    pub weights: Vec<f64>,
    /// Cross-validated weighted log-loss per retained learner.
    pub cv_risk: Vec<f64>,
    /// Ensemble log-loss on the same out-of-fold predictions.
    pub ensemble_risk: f64,
    pub dropped: Vec<(LearnerSpec, String)>,
}

impl SuperLearnerFit {
    pub fn predict(&self, x: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0; x.rows()];
        for (l, a) in self.learners.iter().zip(&self.weights) {
            if *a == 0.0 {
                continue;
            }
            for (o, p) in out.iter_mut().zip(l.predict(x)) {
                *o += a * p;
            }
        }
        out.into_iter().map(|p| p.clamp(CLIP, 1.0 - CLIP)).collect()
    }
}

/// Fold of each row: a seeded permutation dealt round-robin.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut StreamKey::root(seed).label("folds").rng());
    let mut out = vec![0; n];
    for (k, i) in idx.into_iter().enumerate() {
        out[i] = k % folds;
    }
    out
}

fn log_loss(p: &[f64], y: &[f64], w: &[f64]) -> f64 {
    let wsum: f64 = w.iter().sum();
    -p.iter()
        .zip(y)
        .zip(w)
        .map(|((pi, yi), wi)| wi * if *yi == 1.0 { pi.ln() } else { (1.0 - pi).ln() })
        .sum::<f64>()
        / wsum
}

fn combine(z: &[Vec<f64>], alpha: &[f64]) -> Vec<f64> {
    let n = z.first().map_or(0, Vec::len);
    (0..n).map(|i| z.iter().zip(alpha).map(|(c, a)| a * c[i]).sum()).collect()
}

/// Exponentiated-gradient descent on the simplex for weighted log-loss of
/// the convex combination of the columns of `z`.
fn simplex_weights(z: &[Vec<f64>], y: &[f64], w: &[f64]) -> Vec<f64> {
    let l = z.len();
    let wsum: f64 = w.iter().sum();
    let mut alpha = vec![1.0 / l as f64; l];
    let mut loss = log_loss(&combine(z, &alpha), y, w);
    let mut eta = 1.0;
    for _ in 0..10_000 {
        let p = combine(z, &alpha);
        let mut grad = vec![0.0; l];
        for i in 0..y.len() {
            let d = w[i] * if y[i] == 1.0 { -1.0 / p[i] } else { 1.0 / (1.0 - p[i]) } / wsum;
            for (g, c) in grad.iter_mut().zip(z) {
                *g += d * c[i];
            }
        }
        let gmax = grad.iter().fold(f64::NEG_INFINITY, |m, g| m.max(*g));
        let mut improved = false;
        while eta > 1e-12 {
            let mut next: Vec<f64> = alpha.iter().zip(&grad).map(|(a, g)| a * (-eta * (g - gmax)).exp()).collect();
            let s: f64 = next.iter().sum();
            for v in &mut next {
                *v /= s;
            }
            let next_loss = log_loss(&combine(z, &next), y, w);
            if next_loss < loss {
                let change = loss - next_loss;
                alpha = next;
                loss = next_loss;
                eta *= 1.5;
                improved = change >= 1e-10;
                break;
            }
            eta *= 0.5;
        }
        if !improved {
            break;
        }
    }
    alpha
}

/// V-fold cross-validated convex ensemble. Learners that fail on any fold
/// are dropped and recorded.
pub fn fit_super_learner(
    library: &[LearnerSpec],
    x: &Matrix,
    y: &[f64],
    w: &[f64],
    folds: usize,
    seed: u64,
) -> Result<SuperLearnerFit, LearnerError> {
    let n = x.rows();
    if folds < 2 || n < folds {
        return Err(LearnerError::Input(format!("{folds} folds for {n} rows")));
    }
    if library.is_empty() {
        return Err(LearnerError::Input("empty library".into()));
    }
    if y.len() != n || w.len() != n {
        return Err(LearnerError::Input("row counts disagree".into()));
    }
    let fold = fold_assignment(n, folds, seed);
    let mut specs = Vec::new();
    let mut oof: Vec<Vec<f64>> = Vec::new();
    let mut dropped = Vec::new();
    'lib: for spec in library {
        let mut pred = vec![0.0; n];
        for v in 0..folds {
            let train_w: Vec<f64> = (0..n).map(|i| if fold[i] == v { 0.0 } else { w[i] }).collect();
            let held: Vec<usize> = (0..n).filter(|&i| fold[i] == v).collect();
            let fitted = match fit_learner(spec, x, y, &train_w) {
                Ok(f) => f,
                Err(e) => {
                    dropped.push((spec.clone(), format!("fold {v}: {e}")));
                    continue 'lib;
                }
            };
            for (i, p) in held.iter().zip(fitted.predict(&x.select_rows(&held))) {
                pred[*i] = p;
            }
        }
        specs.push(spec.clone());
        oof.push(pred);
    }
    if specs.is_empty() {
        return Err(LearnerError::EmptyEnsemble);
    }
    let cv_risk: Vec<f64> = oof.iter().map(|p| log_loss(p, y, w)).collect();
    let mut weights = if specs.len() == 1 { vec![1.0] } else { simplex_weights(&oof, y, w) };
    let mut ensemble_risk = log_loss(&combine(&oof, &weights), y, w);
    // Never worse than the best single learner.
    let (best, best_risk) = cv_risk.iter().enumerate().fold((0, f64::INFINITY), |b, (k, r)| if *r < b.1 { (k, *r) } else { b });
    if best_risk < ensemble_risk {
        weights = vec![0.0; specs.len()];
        weights[best] = 1.0;
        ensemble_risk = best_risk;
    }

    let mut learners = Vec::with_capacity(specs.len());
    let mut kept = Vec::new();
    for (k, spec) in specs.iter().enumerate() {
        match fit_learner(spec, x, y, w) {
            Ok(f) => {
                learners.push(f);
                kept.push(k);
            }
            Err(e) => dropped.push((spec.clone(), format!("full data: {e}"))),
        }
    }
    if learners.is_empty() {
        return Err(LearnerError::EmptyEnsemble);
    }
    let mut final_weights: Vec<f64> = kept.iter().map(|&k| weights[k]).collect();
    let s: f64 = final_weights.iter().sum();
    if s > 0.0 {
        for v in &mut final_weights {
            *v /= s;
        }
    } else {
        final_weights = vec![1.0 / kept.len() as f64; kept.len()];
    }
    Ok(SuperLearnerFit {
        specs: kept.iter().map(|&k| specs[k].clone()).collect(),
        learners,
        weights: final_weights,
        cv_risk: kept.iter().map(|&k| cv_risk[k]).collect(),
        ensemble_risk,
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::expit;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn data(n: usize, seed: u64) -> (Matrix, Vec<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-2.0..2.0), f64::from(u8::from(rng.random_bool(0.4)))]).collect();
        let y = rows.iter().map(|r| f64::from(u8::from(rng.random_bool(expit(-0.4 + 1.2 * r[0] - 0.8 * r[1]))))).collect();
        (Matrix::from_rows(&rows), y)
    }

    #[test]
    fn single_learner_gets_all_weight() {
        let (x, y) = data(200, 1);
        let fit = fit_super_learner(&[LearnerSpec::GlmMainEffects], &x, &y, &[1.0; 200], 5, 3).unwrap();
        assert_eq!(fit.weights, vec![1.0]);
    }

    #[test]
    fn correct_model_dominates_noise() {
        let n = 4000;
        let (x, y) = data(n, 2);
        let lib = [LearnerSpec::GlmMainEffects, LearnerSpec::Constant { p: 0.5 }];
        let fit = fit_super_learner(&lib, &x, &y, &vec![1.0; n], 10, 5).unwrap();
        assert!(fit.weights[0] >= 0.9, "{:?}", fit.weights);
    }

    #[test]
    fn duplicated_learner_is_symmetric() {
        let (x, y) = data(300, 3);
        let lib = [LearnerSpec::GlmMainEffects, LearnerSpec::GlmMainEffects];
        let fit = fit_super_learner(&lib, &x, &y, &[1.0; 300], 5, 9).unwrap();
        assert!((fit.cv_risk[0] - fit.cv_risk[1]).abs() < 1e-12);
        let split = SuperLearnerFit { weights: vec![0.9, 0.1], ..fit.clone() };
        for (a, b) in fit.predict(&x).iter().zip(split.predict(&x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn failing_learner_is_dropped() {
        // Perfectly separable data: the GLM diverges, boosting does not.
        let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![f64::from(i)]).collect();
        let y: Vec<f64> = (0..100).map(|i| f64::from(u8::from(i >= 50))).collect();
        let x = Matrix::from_rows(&rows);
        let lib = [LearnerSpec::GlmMainEffects, LearnerSpec::boosted(1)];
        let fit = fit_super_learner(&lib, &x, &y, &[1.0; 100], 5, 1).unwrap();
        assert_eq!(fit.specs, vec![LearnerSpec::boosted(1)]);
        assert_eq!(fit.dropped.len(), 1);
    }

    #[test]
    fn folds_are_deterministic_and_balanced() {
        let a = fold_assignment(103, 10, 42);
        assert_eq!(a, fold_assignment(103, 10, 42));
        assert_ne!(a, fold_assignment(103, 10, 43));
        for v in 0..10 {
            let c = a.iter().filter(|f| **f == v).count();
            assert!(c == 10 || c == 11);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn ensemble_no_worse_than_best_single(seed in 0u64..1000) {
            let (x, y) = data(300, seed);
            let lib = [LearnerSpec::GlmMainEffects, LearnerSpec::Boosted { depth: 1, shrinkage: 0.1, rounds: 30 }, LearnerSpec::Constant { p: 0.3 }];
            let fit = fit_super_learner(&lib, &x, &y, &[1.0; 300], 5, seed).unwrap();
            let best = fit.cv_risk.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert!(fit.ensemble_risk <= best + 1e-8);
            prop_assert!((fit.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(fit.weights.iter().all(|a| *a >= 0.0));
            prop_assert!(fit.predict(&x).iter().all(|p| *p >= CLIP && *p <= 1.0 - CLIP));
        }
    }
}
