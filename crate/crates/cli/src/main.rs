//! `ctp`: data collection, training, planning and benchmarking from the
//! command line. Every command works on a run directory given by `--out`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctp_core::config::RunConfig;
use ctp_core::pipeline::{self, files, RunDir, Stage};
use ctp_core::CtpError;

const EXIT_USAGE: u8 = 2;
const EXIT_MISSING: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

#[derive(Parser)]
#[command(name = "ctp", version, about = "Consistency trajectory planning on toy control tasks")]
#[command(after_help = "Any config key can be overridden from the environment as \
CTP_<SECTION>__<KEY>=<value> (top-level keys: CTP_<KEY>), e.g. CTP_TEACHER__STEPS=200.\n\
Exit codes: 0 success, 2 usage or config error, 3 missing artifact, 4 numeric divergence.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the scripted behaviour policy and write the dataset.
    GenData(Common),
    /// Train the teacher denoiser.
    TrainTeacher(Common),
    /// Distill the teacher into the one-step student.
    Distill(Common),
    /// Train the inverse dynamics model and the critic.
    TrainAux(Common),
    /// Evaluate the planner over the evaluation seeds.
    Plan(Common),
    /// Sweep denoising steps for both samplers and record score and latency.
    Bench(Common),
    /// Run every stage from `--stage` on, skipping completed ones.
    Train {
        #[command(flatten)]
        common: Common,
        /// Rerun stages even when their outputs exist.
        #[arg(long)]
        force: bool,
    },
}

#[derive(Args)]
struct Common {
    /// Run directory for all artifacts.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// TOML config; defaults to DIR/config.toml if present, else the preset.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Built-in preset used when no config file is found.
    #[arg(long, value_parser = ["maze", "integrator"], default_value = "maze")]
    preset: String,
    /// Sets every stage seed.
    #[arg(long)]
    seed: Option<u64>,
    /// First stage for `train`.
    #[arg(long, value_parser = ["data", "teacher", "distill", "aux", "plan", "bench"])]
    stage: Option<String>,
    /// Denoising steps: the sweep for `bench`, the first entry for `plan`.
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    steps: Option<Vec<usize>>,
}

fn resolve_config(c: &Common) -> Result<RunConfig, CtpError> {
    let fallback = c.out.join(files::CONFIG);
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None if fallback.exists() => RunConfig::load(&fallback)?,
        None if c.preset == "integrator" => RunConfig::integrator(),
        None => RunConfig::maze(),
    };
    cfg = cfg.with_overrides(std::env::vars())?;
    if let Some(seed) = c.seed {
        cfg = cfg.reseeded(seed);
    }
    if let Some(steps) = &c.steps {
        if steps.is_empty() {
            return Err(CtpError::Config("--steps needs at least one value".into()));
        }
        cfg.bench.steps = steps.clone();
        cfg.plan.denoise_steps = steps[0];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(e: &CtpError) -> u8 {
    match e {
        CtpError::MissingArtifact(_) => EXIT_MISSING,
        CtpError::Divergence { .. } | CtpError::NonFinite(_) => EXIT_DIVERGED,
        CtpError::Config(_) => EXIT_USAGE,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), (Option<Stage>, CtpError)> {
    let log = |m: &str| eprintln!("{m}");
    let (common, stages, force) = match &cli.command {
        Command::GenData(c) => (c, Some(Stage::Data), true),
        Command::TrainTeacher(c) => (c, Some(Stage::Teacher), true),
        Command::Distill(c) => (c, Some(Stage::Distill), true),
        Command::TrainAux(c) => (c, Some(Stage::Aux), true),
        Command::Plan(c) => (c, Some(Stage::Plan), true),
        Command::Bench(c) => (c, Some(Stage::Bench), true),
        Command::Train { common, force } => (common, None, *force),
    };
    let cfg = resolve_config(common).map_err(|e| (None, e))?;
    let dir = RunDir::new(&common.out).map_err(|e| (None, e))?;
    match stages {
        Some(stage) => pipeline::run_stage(&cfg, &dir, stage, &log).map_err(|e| (Some(stage), e)),
        None => {
            let first = common
                .stage
                .as_deref()
                .and_then(Stage::parse)
                .unwrap_or(Stage::Data);
            for stage in Stage::ALL.into_iter().filter(|s| *s >= first) {
                if !force && dir.is_complete(stage) {
                    log(&format!("{}: outputs present, skipping", stage.name()));
                    continue;
                }
                pipeline::run_stage(&cfg, &dir, stage, &log).map_err(|e| (Some(stage), e))?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((stage, e)) => {
            match stage {
                Some(s) => eprintln!("error: stage {} failed: {e}", s.name()),
                None => eprintln!("error: {e}"),
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
