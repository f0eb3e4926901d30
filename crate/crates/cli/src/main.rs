use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use misscon::config::RunConfig;
use misscon::metrics::{read_summaries, summarize_all, write_summaries};
use misscon::plasmode::{cohort_schema, Horizon, PlasmodeModels, PlasmodeScenario};
use misscon::records::read_records;
use misscon::report::{text_report, write_report};
use misscon::rng::StreamKey;
use misscon::runner::{self, plasmode_context};
use misscon::scenario::{PlasmodeContext, Scenario, DEFAULT_COHORT_SIZE};
use misscon::table::{load_table, write_table};
use misscon::truth::read_truths;

#[derive(Parser)]
#[command(name = "misscon", version, about = "Causal-effect estimators with missing confounders, and a simulation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GridArgs {
    /// Grid configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Override the output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

impl GridArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut c = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(j) = self.jobs {
            c.jobs = j;
        }
        if let Some(o) = &self.output {
            c.output = o.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compute (or read from cache) truth values for a grid.
    Truth(GridArgs),
    /// Run a grid: records, truths, summaries and a manifest.
    Simulate(GridArgs),
    /// Summarize a records file against a truth file.
    Summarize {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate one plasmode dataset.
    PlasmodeGenerate {
        /// Outcome horizon: 5yr or 1yr.
        #[arg(long, default_value = "5yr")]
        horizon: Horizon,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Cohort CSV to resample; a synthetic stand-in otherwise.
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_COHORT_SIZE)]
        cohort_size: usize,
        /// Coefficient file replacing the built-in table.
        #[arg(long)]
        coefficients: Option<PathBuf>,
        /// Analysis dataset (PHQ masked where r = 0).
        #[arg(long)]
        out: PathBuf,
        /// Also write the fully observed dataset here.
        #[arg(long)]
        ideal: Option<PathBuf>,
    },
    /// Text report and SVG panels from a summary file.
    Report {
        #[arg(long)]
        summary: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Truth(args) => {
            let c = args.load()?;
            let ctx = plasmode_context(&c)?;
            let truths = runner::truths(&c, ctx.as_ref())?;
            let mut out = io::stdout().lock();
            for t in truths {
                writeln!(out, "{} {} {} {:.6} (mc se {:.6})", t.scenario, t.estimand, t.flavor, t.value, t.mc_se)?;
            }
        }
        Command::Simulate(args) => {
            let c = args.load()?;
            let out = runner::run(&c)?;
            print!("{}", text_report(&out.summaries));
            eprintln!(
                "{} records ({} not converged) in {}",
                out.manifest.records,
                out.manifest.non_converged,
                c.output.display()
            );
        }
        Command::Summarize { records, truth, out } => {
            let recs = read_records(File::open(&records).with_context(|| records.display().to_string())?)?;
            let truths = read_truths(File::open(&truth).with_context(|| truth.display().to_string())?)?;
            let rows = summarize_all(&recs, &truths)?;
            match out {
                Some(p) => write_summaries(&rows, BufWriter::new(File::create(&p).with_context(|| p.display().to_string())?))?,
                None => write_summaries(&rows, io::stdout().lock())?,
            }
        }
        Command::PlasmodeGenerate { horizon, n, seed, cohort, cohort_size, coefficients, out, ideal } => {
            let models = match coefficients {
                Some(p) => PlasmodeModels::parse(&std::fs::read_to_string(&p).with_context(|| p.display().to_string())?)?,
                None => PlasmodeModels::published(),
            };
            let ctx = match cohort {
                Some(p) => PlasmodeContext::new(load_table(&p, &cohort_schema())?, models),
                None => PlasmodeContext { models, ..PlasmodeContext::stand_in(cohort_size, seed) },
            };
            let s = Scenario::Plasmode(PlasmodeScenario { horizon });
            let g = s.generate(Some(&ctx), n, StreamKey::root(seed))?;
            write_table(&g.analysis, BufWriter::new(File::create(&out).with_context(|| out.display().to_string())?))?;
            if let Some(p) = ideal {
                write_table(&g.ideal, BufWriter::new(File::create(&p).with_context(|| p.display().to_string())?))?;
            }
        }
        Command::Report { summary, out } => {
            let rows = read_summaries(File::open(&summary).with_context(|| summary.display().to_string())?)?;
            for p in write_report(&rows, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
