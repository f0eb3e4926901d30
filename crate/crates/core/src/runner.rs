//! Grid orchestration: replicates, truths, summaries and artifacts.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, RunConfig};
use crate::estimators::{estimate, EstimatorInput, SharedFits};
use crate::metrics::{summarize_all, write_summaries, MetricsError, SummaryRow};
use crate::plasmode::{cohort_schema, PlasmodeError, PlasmodeModels};
use crate::records::{records_from_output, write_records, EstimateRecord, RecordError};
use crate::rng::StreamKey;
use crate::scenario::{GenerateError, PlasmodeContext, Scenario};
use crate::table::{load_table, TableError};
use crate::truth::{TruthCache, TruthError, TruthValue};

pub const RECORDS_FILE: &str = "records.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error(transparent)]
    Truth(#[from] TruthError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Records(#[from] RecordError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Plasmode(#[from] PlasmodeError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

/// Plasmode inputs, built only when the grid has a plasmode scenario.
pub fn plasmode_context(config: &RunConfig) -> Result<Option<PlasmodeContext>, RunError> {
    if !config.scenario_list()?.iter().any(Scenario::is_plasmode) {
        return Ok(None);
    }
    let p = &config.plasmode;
    let models = match &p.coefficients {
        Some(path) => PlasmodeModels::parse(&fs::read_to_string(path).map_err(io(path))?)?,
        None => PlasmodeModels::published(),
    };
    Ok(Some(match &p.cohort {
        Some(path) => PlasmodeContext::new(load_table(path, &cohort_schema())?, models),
        None => PlasmodeContext { models, ..PlasmodeContext::stand_in(p.cohort_size, p.cohort_seed) },
    }))
}

/// Seed of replicate `r` of `scenario`.
pub fn replicate_key(base_seed: u64, scenario: &Scenario, r: u64) -> StreamKey {
    StreamKey::root(base_seed).label(&scenario.id()).child(r)
}

/// Every estimator on one generated replicate. Failures become
/// non-converged records.
pub fn replicate_records(config: &RunConfig, scenario: &Scenario, ctx: Option<&PlasmodeContext>, r: u64) -> Vec<EstimateRecord> {
    let id = scenario.id();
    let key = replicate_key(config.seed, scenario, r);
    let failed_all = || {
        config
            .estimators
            .iter()
            .flat_map(|e| config.estimands.iter().map(|m| EstimateRecord::failed(&id, r, *e, *m)))
            .collect::<Vec<_>>()
    };
    let (Ok(data), Ok(model)) = (scenario.generate(ctx, config.n, key.label("data")), scenario.working_model(ctx)) else {
        return failed_all();
    };
    let shared = SharedFits::new(key.label("shared"));
    let input = EstimatorInput { analysis: &data.analysis, ideal: Some(&data.ideal), model: &model, shared: Some(&shared) };
    let mut out = Vec::with_capacity(config.estimators.len() * config.estimands.len());
    for e in &config.estimators {
        match estimate(*e, &input, &config.estimands, &config.estimator, key.label("estimator").label(e.id())) {
            Ok(o) => out.extend(records_from_output(&id, r, *e, &o)),
            Err(_) => out.extend(config.estimands.iter().map(|m| EstimateRecord::failed(&id, r, *e, *m))),
        }
    }
    out
}

/// Records for the whole grid, ordered by (scenario, replicate, estimator,
/// estimand) whatever the thread count.
pub fn simulate(config: &RunConfig, ctx: Option<&PlasmodeContext>) -> Result<Vec<EstimateRecord>, RunError> {
    let scenarios = config.scenario_list()?;
    let tasks: Vec<(&Scenario, u64)> = scenarios.iter().flat_map(|s| (0..config.replicates).map(move |r| (s, r))).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(config.jobs).build()?;
    let parts: Vec<Vec<EstimateRecord>> =
        pool.install(|| tasks.par_iter().map(|(s, r)| replicate_records(config, s, ctx, *r)).collect());
    Ok(parts.into_iter().flatten().collect())
}

/// Truths for every scenario, estimand and flavor of the grid, through the
/// cache file in the output directory.
pub fn truths(config: &RunConfig, ctx: Option<&PlasmodeContext>) -> Result<Vec<TruthValue>, RunError> {
    let path = config.output.join(TRUTH_FILE);
    fs::create_dir_all(&config.output).map_err(io(&config.output))?;
    let mut cache = TruthCache::load(&path)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(config.jobs).build()?;
    let mut out = Vec::new();
    let mut seen = Vec::new();
    for s in config.scenario_list()? {
        if seen.contains(&s.truth_id()) {
            continue;
        }
        seen.push(s.truth_id());
        for m in &config.estimands {
            for f in &config.flavors {
                out.push(pool.install(|| cache.get_or_compute(&s, ctx, *m, *f, config.truth_draws, config.truth_seed))?);
            }
        }
    }
    cache.save(&path)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config: RunConfig,
    pub version: String,
    /// How replicate seeds derive from the base seed.
    pub seeding: String,
    pub records: usize,
    pub non_converged: usize,
    pub records_sha256: String,
}

pub struct RunOutput {
    pub records: Vec<EstimateRecord>,
    pub truths: Vec<TruthValue>,
    pub summaries: Vec<SummaryRow>,
    pub manifest: Manifest,
}

fn write_file(path: &Path, f: impl FnOnce(BufWriter<File>) -> Result<(), RunError>) -> Result<(), RunError> {
    f(BufWriter::new(File::create(path).map_err(io(path))?))
}

/// Simulate, compute truths, summarize, and write all artifacts.
pub fn run(config: &RunConfig) -> Result<RunOutput, RunError> {
    config.validate()?;
    fs::create_dir_all(&config.output).map_err(io(&config.output))?;
    let ctx = plasmode_context(config)?;
    let records = simulate(config, ctx.as_ref())?;
    let truths = truths(config, ctx.as_ref())?;
    let summaries = summarize_all(&records, &truths)?;

    let mut buf = Vec::new();
    write_records(&records, &mut buf)?;
    let records_path = config.output.join(RECORDS_FILE);
    fs::write(&records_path, &buf).map_err(io(&records_path))?;
    write_file(&config.output.join(SUMMARY_FILE), |w| Ok(write_summaries(&summaries, w)?))?;
    let manifest = Manifest {
        config_hash: config.hash(),
        config: config.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seeding: "replicate r of scenario s: root(seed).label(s).child(r); data from .label(\"data\"), estimator e from .label(\"estimator\").label(e), observation model shared by TMLE variants from .label(\"shared\")".into(),
        records: records.len(),
        non_converged: records.iter().filter(|r| !r.converged).count(),
        records_sha256: hex::encode(Sha256::digest(&buf)),
    };
    let manifest_path = config.output.join(MANIFEST_FILE);
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?).map_err(io(&manifest_path))?;
    Ok(RunOutput { records, truths, summaries, manifest })
}
