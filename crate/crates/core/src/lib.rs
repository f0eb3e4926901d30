//! Estimators and a simulation harness for causal effects when some
//! confounders are missing for part of the cohort.

pub mod calibration;
pub mod config;
pub mod estimators;
pub mod formula;
pub mod glm;
pub mod learners;
pub mod marginal;
pub mod matrix;
pub mod metrics;
pub mod mice;
pub mod plasmode;
pub mod records;
pub mod report;
pub mod rng;
pub mod runner;
pub mod scenario;
pub mod synthetic;
pub mod table;
pub mod truth;
