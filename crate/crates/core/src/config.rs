//! TOML run configuration for one simulation grid.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::estimators::{Estimand, Estimator, EstimatorConfig};
use crate::scenario::{Scenario, DEFAULT_COHORT_SIZE};
use crate::truth::{Flavor, MIN_DRAWS};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Stand-in cohort settings for plasmode scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlasmodeConfig {
    /// CSV cohort to resample; a synthetic stand-in is drawn when absent.
    pub cohort: Option<PathBuf>,
    pub cohort_size: usize,
    pub cohort_seed: u64,
    /// Coefficient file replacing the built-in table.
    pub coefficients: Option<PathBuf>,
}

impl Default for PlasmodeConfig {
    fn default() -> Self {
        PlasmodeConfig { cohort: None, cohort_size: DEFAULT_COHORT_SIZE, cohort_seed: 1, coefficients: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenarios: Vec<String>,
    pub n: usize,
    pub replicates: u64,
    pub estimators: Vec<Estimator>,
    pub estimands: Vec<Estimand>,
    #[serde(default = "default_flavors")]
    pub flavors: Vec<Flavor>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default = "default_truth_draws")]
    pub truth_draws: usize,
    #[serde(default)]
    pub truth_seed: u64,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub plasmode: PlasmodeConfig,
}

fn default_flavors() -> Vec<Flavor> {
    Flavor::ALL.to_vec()
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_jobs() -> usize {
    1
}

fn default_truth_draws() -> usize {
    2_000_000
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let c: RunConfig = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    pub fn scenario_list(&self) -> Result<Vec<Scenario>, ConfigError> {
        self.scenarios
            .iter()
            .map(|s| s.parse::<Scenario>().map_err(|e| ConfigError::Invalid(format!("scenario `{s}`: {e}"))))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.scenarios.is_empty() || self.estimators.is_empty() || self.estimands.is_empty() || self.flavors.is_empty() {
            return bad("scenarios, estimators, estimands and flavors must be non-empty".into());
        }
        self.scenario_list()?;
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        if self.n < 50 {
            return bad(format!("n = {} is too small (minimum 50)", self.n));
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        if self.truth_draws < MIN_DRAWS {
            return bad(format!("truth_draws must be at least {MIN_DRAWS}"));
        }
        for e in &self.estimators {
            for m in &self.estimands {
                if !e.supports(*m) {
                    return bad(format!("{e} does not target {m}; put it in a grid without {m}"));
                }
            }
        }
        let dup = |v: &[String]| (1..v.len()).any(|i| v[..i].contains(&v[i]));
        if dup(&self.scenarios)
            || dup(&self.estimators.iter().map(|e| e.id().to_string()).collect::<Vec<_>>())
            || dup(&self.estimands.iter().map(|e| e.id().to_string()).collect::<Vec<_>>())
        {
            return bad("duplicate scenario, estimator or estimand".into());
        }
        if self.plasmode.cohort_size == 0 {
            return bad("plasmode.cohort_size must be positive".into());
        }
        self.estimator.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
scenarios = ["X1/Y1.1/M1.1"]
n = 500
replicates = 3
estimators = ["CC", "IPW"]
estimands = ["clogOR", "mlogOR", "mlogRR", "mRD"]
seed = 7
"#;

    #[test]
    fn parses_with_defaults() {
        let c = RunConfig::parse(BASE).unwrap();
        assert_eq!(c.jobs, 1);
        assert_eq!(c.estimator, EstimatorConfig::default());
        assert_eq!(c.flavors, Flavor::ALL.to_vec());
        assert_eq!(c.estimators, vec![Estimator::Cc, Estimator::Ipw]);
    }

    #[test]
    fn tmle_with_conditional_odds_ratio_is_rejected() {
        let text = BASE.replace("[\"CC\", \"IPW\"]", "[\"CC\", \"T-MTO\"]");
        match RunConfig::parse(&text) {
            Err(ConfigError::Invalid(m)) => assert!(m.contains("T-MTO")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse(&BASE.replace("replicates = 3", "replicates = 0")).is_err());
        assert!(RunConfig::parse(&BASE.replace("X1/Y1.1/M1.1", "X9/Y1.1/M1.1")).is_err());
        assert!(RunConfig::parse(&BASE.replace("\"IPW\"", "\"IPX\"")).is_err());
        assert!(RunConfig::parse(&format!("{BASE}\nbogus = 1\n")).is_err());
        assert!(RunConfig::parse(&format!("{BASE}\n[estimator]\ntruncation = [0.5, 0.4]\n")).is_err());
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = RunConfig::parse(BASE).unwrap();
        assert_eq!(a.hash(), RunConfig::parse(BASE).unwrap().hash());
        let mut b = a.clone();
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.estimator.mice_imputations = 5;
        assert_ne!(a.hash(), c.hash());
        let mut d = a.clone();
        d.jobs = 8;
        assert_ne!(a.hash(), d.hash());
    }
}
