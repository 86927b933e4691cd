use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use memgen_cli::report::verify;
use memgen_cli::{CliError, CliResult, ExperimentConfig, Pipeline, Stage};
use memgen_core::datagen::TaskKind;

#[derive(Parser)]
#[command(name = "memgen", version, about = "Memorization vs generalization neurons: train, analyze, steer")]
struct Cli {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; overrides `master_seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override a config field, e.g. `--set train.learning_rate=0.001`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Primary task; overrides `task` in the config.
    #[arg(long, global = true)]
    task: Option<TaskArg>,
    /// With `run-all`, stop after this stage.
    #[arg(long, global = true)]
    stage: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Incontext,
    Arith,
}

#[derive(Subcommand)]
enum Command {
    /// Generate task configs and example files.
    Datagen,
    /// Train the task models until both behaviors appear.
    Train,
    /// Collect divergent activation pairs.
    Capture,
    /// Compute mean differences, correlations, and heatmaps.
    Analyze,
    /// Train per-layer behavior probes.
    Probe,
    /// Grid-search, steer, and run transfer evaluations.
    Steer,
    /// Write the report bundle from existing artifacts.
    Report,
    /// Run every stage that is not up to date, then the report.
    RunAll,
    /// Recompute acceptance flags from artifacts; exit 5 on failure.
    Verify,
}

fn resolve_config(cli: &Cli) -> CliResult<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg = cfg.with_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if let Some(t) = cli.task {
        cfg.task = match t {
            TaskArg::Incontext => TaskKind::InContext,
            TaskArg::Arith => TaskKind::Arithmetic,
        };
    }
    let out = cli.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("runs/default"));
    cfg.output_dir = None;
    Ok((cfg, out))
}

fn set_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("MEMGEN_THREADS") {
        let n: usize = v.parse().map_err(|_| CliError::Config(format!("MEMGEN_THREADS={v:?} is not a thread count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    set_threads()?;
    let (cfg, out) = resolve_config(&cli)?;
    let last = match &cli.stage {
        Some(name) => Some(Stage::parse(name).ok_or_else(|| CliError::Config(format!("unknown stage {name:?}")))?),
        None => None,
    };
    let mut p = Pipeline::open(cfg, out)?;
    let single = |p: &mut Pipeline, s: Stage| p.run_stage(s, true).map(|_| ());
    match cli.command {
        Command::Datagen => single(&mut p, Stage::Datagen),
        Command::Train => single(&mut p, Stage::Train),
        Command::Capture => single(&mut p, Stage::Capture),
        Command::Analyze => single(&mut p, Stage::Analyze),
        Command::Probe => single(&mut p, Stage::Probe),
        Command::Steer => single(&mut p, Stage::Steer),
        Command::Report => p.report(),
        Command::RunAll => match last {
            Some(stop) => {
                for s in Stage::ALL.into_iter().filter(|s| *s <= stop) {
                    p.run_stage(s, false)?;
                }
                p.report()
            }
            None => p.run_all(),
        },
        Command::Verify => {
            let s = verify(&p)?;
            println!("{}", serde_json::to_string_pretty(&s.acceptance)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
