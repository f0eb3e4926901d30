//! Plasmode simulation: resample covariate rows from a cohort, then draw
//! treatment, outcome and PHQ missingness from fixed logistic models.

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::formula::{check_columns, Formula, FormulaError, Term};
use crate::glm::expit;
use crate::rng::StreamKey;
use crate::synthetic::{Generated, LinearModel};
use crate::table::{ColumnKind, Dataset, Schema, TableError};

/// Published coefficient table, in the format read by [`PlasmodeModels::parse`].
pub const PUBLISHED_MODELS: &str = include_str!("../data/plasmode_glm.txt");

/// Columns masked when the PHQ is missing.
pub const PHQ_COLUMNS: [&str; 2] = ["phq8", "phq9"];

const SECTIONS: [&str; 4] = ["missing", "treatment", "outcome_5yr", "outcome_1yr"];

#[derive(Debug, thiserror::Error)]
pub enum PlasmodeError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("section [{0}] is missing")]
    MissingSection(String),
    #[error("the cohort is empty")]
    EmptyCohort,
    #[error("unknown plasmode scenario `{0}`")]
    Unknown(String),
    #[error(transparent)]
    Formula(#[from] FormulaError),
    #[error(transparent)]
    Table(#[from] TableError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Horizon {
    FiveYear,
    OneYear,
}

impl Horizon {
    pub fn id(self) -> &'static str {
        match self {
            Horizon::FiveYear => "5yr",
            Horizon::OneYear => "1yr",
        }
    }
}

impl FromStr for Horizon {
    type Err = PlasmodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "5yr" => Ok(Horizon::FiveYear),
            "1yr" => Ok(Horizon::OneYear),
            _ => Err(PlasmodeError::Unknown(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlasmodeModels {
    /// Linear predictor is the logit of P(PHQ missing).
    pub missing: LinearModel,
    pub treatment: LinearModel,
    pub outcome_5yr: LinearModel,
    pub outcome_1yr: LinearModel,
}

impl PlasmodeModels {
    pub fn published() -> Self {
        Self::parse(PUBLISHED_MODELS).expect("embedded table parses")
    }

    pub fn outcome(&self, h: Horizon) -> &LinearModel {
        match h {
            Horizon::FiveYear => &self.outcome_5yr,
            Horizon::OneYear => &self.outcome_1yr,
        }
    }

    /// Sections `[missing]`, `[treatment]`, `[outcome_5yr]`, `[outcome_1yr]`,
    /// each a list of `term = coefficient` lines with one `(Intercept)`.
    /// `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, PlasmodeError> {
        let mut sections: Vec<(String, Option<f64>, Vec<(Term, f64)>)> = Vec::new();
        for (k, raw) in text.lines().enumerate() {
            let line_no = k + 1;
            let err = |message: String| PlasmodeError::Syntax { line: line_no, message };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| err("unterminated section header".into()))?.trim();
                if !SECTIONS.contains(&name) {
                    return Err(err(format!("unknown section [{name}]")));
                }
                if sections.iter().any(|(s, _, _)| s == name) {
                    return Err(err(format!("section [{name}] repeated")));
                }
                sections.push((name.to_string(), None, Vec::new()));
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected `term = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let value: f64 = value.parse().map_err(|_| err(format!("bad coefficient `{value}`")))?;
            if value.is_nan() {
                return Err(err("coefficient is NaN".into()));
            }
            let (_, intercept, terms) = sections.last_mut().ok_or_else(|| err("entry before any section".into()))?;
            if key == "(Intercept)" {
                if intercept.replace(value).is_some() {
                    return Err(err("intercept repeated".into()));
                }
                continue;
            }
            let f = Formula::parse(key).map_err(|e| err(e.to_string()))?;
            let [term] = <[Term; 1]>::try_from(f.terms).map_err(|_| err(format!("`{key}` is not a single term")))?;
            if terms.iter().any(|(t, _)| *t == term) {
                return Err(err(format!("term `{key}` repeated")));
            }
            terms.push((term, value));
        }
        let mut take = |name: &str| -> Result<LinearModel, PlasmodeError> {
            let k = sections.iter().position(|(s, _, _)| s == name).ok_or_else(|| PlasmodeError::MissingSection(name.into()))?;
            let (_, intercept, terms) = sections.swap_remove(k);
            let (terms, coefficients) = terms.into_iter().unzip();
            Ok(LinearModel { intercept: intercept.unwrap_or(0.0), formula: Formula { terms }, coefficients })
        };
        Ok(PlasmodeModels {
            missing: take("missing")?,
            treatment: take("treatment")?,
            outcome_5yr: take("outcome_5yr")?,
            outcome_1yr: take("outcome_1yr")?,
        })
    }
}

fn levels(names: &[&str]) -> ColumnKind {
    ColumnKind::Categorical(names.iter().map(|s| s.to_string()).collect())
}

pub fn cohort_schema() -> Schema {
    Schema::new(vec![
        ("female".into(), ColumnKind::Binary),
        ("age".into(), ColumnKind::Continuous),
        ("charlson".into(), levels(&["0", "1", "2", "3+"])),
        ("anxiety".into(), ColumnKind::Binary),
        ("alcohol".into(), ColumnKind::Binary),
        ("self_harm".into(), ColumnKind::Binary),
        ("mh_hosp".into(), ColumnKind::Binary),
        ("phq8".into(), levels(&["0-5", "5-10", "11-15", "16-20", "21-24"])),
        ("phq9".into(), levels(&["0", "1", "2", "3"])),
    ])
}

const AGE_BANDS: [(f64, f64, f64); 5] =
    [(13.0, 18.0, 9.0), (18.0, 30.0, 23.0), (30.0, 45.0, 25.1), (45.0, 65.0, 29.5), (65.0, 90.0, 13.3)];
const CHARLSON: [f64; 4] = [77.1, 13.6, 4.5, 4.7];
const PHQ8: [f64; 5] = [9.7, 21.7, 31.1, 26.8, 10.7];
const PHQ9: [f64; 4] = [66.8, 20.3, 7.9, 5.1];

/// Stand-in cohort with independent covariates matching published
/// marginals. Age is uniform within its band.
pub fn synth_cohort(n: usize, rng: &mut impl Rng) -> Dataset {
    let band = WeightedIndex::new(AGE_BANDS.iter().map(|b| b.2)).expect("weights");
    let charlson = WeightedIndex::new(CHARLSON).expect("weights");
    let phq8 = WeightedIndex::new(PHQ8).expect("weights");
    let phq9 = WeightedIndex::new(PHQ9).expect("weights");
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); 9];
    for _ in 0..n {
        let flag = |rng: &mut dyn rand::RngCore, p: f64| f64::from(u8::from(rng.random::<f64>() < p));
        let (lo, hi, _) = AGE_BANDS[band.sample(rng)];
        cols[0].push(flag(rng, 0.648));
        cols[1].push(rng.random_range(lo..hi));
        cols[2].push(charlson.sample(rng) as f64);
        cols[3].push(flag(rng, 0.157));
        cols[4].push(flag(rng, 0.022));
        cols[5].push(flag(rng, 0.005));
        cols[6].push(flag(rng, 0.059));
        cols[7].push(phq8.sample(rng) as f64);
        cols[8].push(phq9.sample(rng) as f64);
    }
    let mut d = Dataset::new(n);
    for ((name, kind), values) in cohort_schema().columns.into_iter().zip(cols) {
        d.push_column(&name, kind, values, None).expect("valid cohort column");
    }
    d
}

fn bernoulli(lp: Vec<f64>, rng: &mut impl Rng) -> Vec<f64> {
    lp.into_iter().map(|e| f64::from(u8::from(rng.random::<f64>() < expit(e)))).collect()
}

/// `n` rows resampled with replacement from `cohort`, then `x`, `y` and `r`
/// drawn in that order. PHQ columns are masked in the analysis dataset where
/// `r = 0`.
pub fn generate_plasmode(
    cohort: &Dataset,
    models: &PlasmodeModels,
    horizon: Horizon,
    n: usize,
    key: StreamKey,
) -> Result<Generated, PlasmodeError> {
    if cohort.n_rows() == 0 {
        return Err(PlasmodeError::EmptyCohort);
    }
    let outcome = models.outcome(horizon);
    let schema = cohort.schema();
    let mut known = schema.columns.clone();
    check_columns(|c| known.iter().find(|(n, _)| n == c).map(|(_, k)| k.clone()), &models.treatment.formula)?;
    known.push(("x".into(), ColumnKind::Binary));
    check_columns(|c| known.iter().find(|(n, _)| n == c).map(|(_, k)| k.clone()), &outcome.formula)?;
    known.push(("y".into(), ColumnKind::Binary));
    check_columns(|c| known.iter().find(|(n, _)| n == c).map(|(_, k)| k.clone()), &models.missing.formula)?;

    let mut rng = key.label("resample").rng();
    let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..cohort.n_rows())).collect();
    let mut d = cohort.select_rows(&rows);
    let x = bernoulli(models.treatment.linear_predictor(&d)?, &mut key.label("treatment").rng());
    d.push_column("x", ColumnKind::Binary, x, None)?;
    let y = bernoulli(outcome.linear_predictor(&d)?, &mut key.label("outcome").rng());
    d.push_column("y", ColumnKind::Binary, y, None)?;
    let missing = bernoulli(models.missing.linear_predictor(&d)?, &mut key.label("missing").rng());
    let mut analysis = d.clone();
    analysis.push_column("r", ColumnKind::Binary, missing.iter().map(|m| 1.0 - m).collect(), None)?;
    let flags: Vec<bool> = missing.iter().map(|m| *m == 1.0).collect();
    for c in PHQ_COLUMNS {
        analysis.mask(c, &flags)?;
    }
    Ok(Generated { ideal: d, analysis })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PlasmodeScenario {
    pub horizon: Horizon,
}

impl fmt::Display for PlasmodeScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "plasmode/{}", self.horizon.id())
    }
}

impl FromStr for PlasmodeScenario {
    type Err = PlasmodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let h = s.strip_prefix("plasmode/").ok_or_else(|| PlasmodeError::Unknown(s.to_string()))?;
        Ok(PlasmodeScenario { horizon: h.parse().map_err(|_| PlasmodeError::Unknown(s.to_string()))? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_table_shape() {
        let m = PlasmodeModels::published();
        assert_eq!(m.outcome_5yr.coefficients.len(), 33);
        assert_eq!(m.treatment.coefficients.len(), 32);
        assert_eq!(m.outcome_5yr.coefficient("x"), Some(-0.21));
        assert_eq!(m.outcome_1yr.coefficient("x"), Some(0.10));
        assert_eq!(m.missing.intercept, 0.15);
        assert_eq!(m.outcome_5yr.coefficient("phq9[3]:self_harm"), Some(-0.53));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad = "[missing]\n(Intercept) = 1\nfoo = x\n";
        match PlasmodeModels::parse(bad) {
            Err(PlasmodeError::Syntax { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(PlasmodeModels::parse("[missing]\n"), Err(PlasmodeError::MissingSection(_))));
        assert!(PlasmodeModels::parse("a = 1").is_err());
        assert!(PlasmodeModels::parse("[missing]\na + b = 1").is_err());
        assert!(PlasmodeModels::parse("[bogus]").is_err());
    }

    #[test]
    fn one_row_cohort() {
        let d = synth_cohort(1, &mut StreamKey::root(1).rng());
        assert_eq!(d.n_rows(), 1);
        assert_eq!(d.schema(), cohort_schema());
    }

    #[test]
    fn certain_observation_masks_nothing() {
        let mut models = PlasmodeModels::published();
        models.missing.intercept = f64::NEG_INFINITY;
        let cohort = synth_cohort(200, &mut StreamKey::root(2).rng());
        let g = generate_plasmode(&cohort, &models, Horizon::FiveYear, 500, StreamKey::root(3)).unwrap();
        assert!(g.analysis.incomplete_columns().is_empty());
        assert!(g.analysis.values("r").unwrap().iter().all(|r| *r == 1.0));
    }

    #[test]
    fn only_phq_is_masked() {
        let cohort = synth_cohort(300, &mut StreamKey::root(4).rng());
        let g = generate_plasmode(&cohort, &PlasmodeModels::published(), Horizon::OneYear, 2000, StreamKey::root(5)).unwrap();
        assert_eq!(g.analysis.incomplete_columns(), PHQ_COLUMNS.to_vec());
    }

    #[test]
    fn absent_column_is_reported() {
        let mut models = PlasmodeModels::published();
        models.treatment.formula = "bmi".parse().unwrap();
        models.treatment.coefficients = vec![1.0];
        let cohort = synth_cohort(10, &mut StreamKey::root(6).rng());
        let err = generate_plasmode(&cohort, &models, Horizon::FiveYear, 10, StreamKey::root(7)).unwrap_err();
        assert!(err.to_string().contains("bmi"));
    }

    #[test]
    fn scenario_ids() {
        assert_eq!("plasmode/5yr".parse::<PlasmodeScenario>().unwrap().to_string(), "plasmode/5yr");
        assert!("plasmode/2yr".parse::<PlasmodeScenario>().is_err());
    }
}
