//! Synthetic and plasmode scenarios behind one interface.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::estimators::WorkingModelSpec;
use crate::plasmode::{generate_plasmode, synth_cohort, PlasmodeError, PlasmodeModels, PlasmodeScenario};
use crate::rng::StreamKey;
use crate::synthetic::{generate, generate_ideal, Generated, LinearModel, ScenarioError, SyntheticScenario};
use crate::table::Dataset;

/// Size of the stand-in cohort when none is supplied.
pub const DEFAULT_COHORT_SIZE: usize = 50_337;

#[derive(Debug, thiserror::Error)]
pub enum GenerateError {
    #[error(transparent)]
    Synthetic(#[from] ScenarioError),
    #[error(transparent)]
    Plasmode(#[from] PlasmodeError),
    #[error("plasmode scenarios need a cohort")]
    NoCohort,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    Synthetic(SyntheticScenario),
    Plasmode(PlasmodeScenario),
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scenario::Synthetic(s) => s.fmt(f),
            Scenario::Plasmode(p) => p.fmt(f),
        }
    }
}

impl FromStr for Scenario {
    type Err = GenerateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.starts_with("plasmode/") {
            Ok(Scenario::Plasmode(s.parse()?))
        } else {
            Ok(Scenario::Synthetic(s.parse()?))
        }
    }
}

/// Shared inputs for plasmode generation.
#[derive(Debug, Clone)]
pub struct PlasmodeContext {
    pub cohort: Arc<Dataset>,
    pub models: PlasmodeModels,
}

impl PlasmodeContext {
    pub fn new(cohort: Dataset, models: PlasmodeModels) -> Self {
        PlasmodeContext { cohort: Arc::new(cohort), models }
    }

    /// Synthetic stand-in cohort with the published models.
    pub fn stand_in(size: usize, seed: u64) -> Self {
        let cohort = synth_cohort(size, &mut StreamKey::root(seed).label("cohort").rng());
        PlasmodeContext::new(cohort, PlasmodeModels::published())
    }
}

impl Scenario {
    pub fn id(&self) -> String {
        self.to_string()
    }

    /// The part of the id that determines the full-data distribution.
    pub fn truth_id(&self) -> String {
        match self {
            Scenario::Synthetic(s) => format!("{}/{}", s.covariates.id(), s.outcome.id),
            Scenario::Plasmode(p) => p.to_string(),
        }
    }

    pub fn true_outcome<'a>(&'a self, ctx: Option<&'a PlasmodeContext>) -> Result<&'a LinearModel, GenerateError> {
        match self {
            Scenario::Synthetic(s) => Ok(&s.outcome.model),
            Scenario::Plasmode(p) => Ok(ctx.ok_or(GenerateError::NoCohort)?.models.outcome(p.horizon)),
        }
    }

    /// Fixed analysis models, with the true outcome formula as the oracle.
    pub fn working_model(&self, ctx: Option<&PlasmodeContext>) -> Result<WorkingModelSpec, GenerateError> {
        let base = match self {
            Scenario::Synthetic(_) => WorkingModelSpec::synthetic(),
            Scenario::Plasmode(_) => WorkingModelSpec::plasmode(),
        };
        Ok(base.with_oracle(self.true_outcome(ctx)?.formula.clone()))
    }

    pub fn generate(&self, ctx: Option<&PlasmodeContext>, n: usize, key: StreamKey) -> Result<Generated, GenerateError> {
        match self {
            Scenario::Synthetic(s) => Ok(generate(s, n, key)?),
            Scenario::Plasmode(p) => {
                let c = ctx.ok_or(GenerateError::NoCohort)?;
                Ok(generate_plasmode(&c.cohort, &c.models, p.horizon, n, key)?)
            }
        }
    }

    /// Fully observed rows only.
    pub fn generate_ideal(&self, ctx: Option<&PlasmodeContext>, n: usize, key: StreamKey) -> Result<Dataset, GenerateError> {
        match self {
            Scenario::Synthetic(s) => Ok(generate_ideal(s.covariates, &s.outcome, n, key)?),
            Scenario::Plasmode(_) => Ok(self.generate(ctx, n, key)?.ideal),
        }
    }

    pub fn is_plasmode(&self) -> bool {
        matches!(self, Scenario::Plasmode(_))
    }
}
