//! `conflict-exposure` command-line interface.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use conflict_exposure::config::{RunConfig, Stage};
use conflict_exposure::pipeline::{run_pipeline, run_stage, StageReport};
use conflict_exposure::Error;

#[derive(Parser)]
#[command(
    name = "conflict-exposure",
    version,
    about = "Conflict-exposure trends and forecasts from gridded event data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
    /// Master seed.
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
    /// Months forecast past the last fitted month [default: 36].
    #[arg(long, value_name = "M")]
    horizon: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the event file and copy it into the output tree.
    Ingest(Common),
    /// Generate synthetic events and latent truth.
    Synth(Common),
    /// Fit and extrapolate temporal exposure trends.
    FitTce(Common),
    /// Fit the spatial model and estimate monthly exposure surfaces.
    FitSce(Common),
    /// Fit and extrapolate tempo-spatial exposure trends.
    FitTsce(Common),
    /// Derive the 24 trend features.
    Features(Common),
    /// Forward feature selection.
    Select(Common),
    /// Train the forest ensemble.
    Train(Common),
    /// Predict conflict probabilities for the forecast months.
    Forecast(Common),
    /// Score the forecasts.
    Evaluate(Common),
    /// Run every configured stage in order.
    Pipeline(Common),
    /// Print the default configuration.
    DefaultConfig,
}

fn resolve(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(j) = common.jobs {
        cfg.jobs = j;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(h) = common.horizon {
        cfg.horizon = h;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(r: &StageReport, started: Instant) {
    eprintln!(
        "[{}] wrote {} files in {:.1}s",
        r.stage,
        r.outputs.len(),
        started.elapsed().as_secs_f64()
    );
    for n in &r.notes {
        eprintln!("[{}] {n}", r.stage);
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 1,
        e if e.is_numerical() => 3,
        _ => 2,
    }
}

fn run(command: Command) -> Result<(), Error> {
    let (common, stage) = match command {
        Command::DefaultConfig => {
            print!("{}", RunConfig::default().to_text());
            return Ok(());
        }
        Command::Ingest(c) => (c, Some(Stage::Ingest)),
        Command::Synth(c) => (c, Some(Stage::Synth)),
        Command::FitTce(c) => (c, Some(Stage::FitTce)),
        Command::FitSce(c) => (c, Some(Stage::FitSce)),
        Command::FitTsce(c) => (c, Some(Stage::FitTsce)),
        Command::Features(c) => (c, Some(Stage::Features)),
        Command::Select(c) => (c, Some(Stage::Select)),
        Command::Train(c) => (c, Some(Stage::Train)),
        Command::Forecast(c) => (c, Some(Stage::Forecast)),
        Command::Evaluate(c) => (c, Some(Stage::Evaluate)),
        Command::Pipeline(c) => (c, None),
    };
    let cfg = resolve(&common)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build_global()
        .map_err(|e| Error::InvalidData(format!("thread pool: {e}")))?;
    let mut started = Instant::now();
    match stage {
        Some(s) => print_report(&run_stage(&cfg, s)?, started),
        None => {
            run_pipeline(&cfg, |r| {
                print_report(r, started);
                started = Instant::now();
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
