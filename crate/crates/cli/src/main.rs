//! `hybrid`: data generation, fine-tuning, rejection sampling, RL and
//! evaluation for the hybrid-reasoning detection task.
//!
//! Exit codes: 0 success, 2 config error, 3 numerical abort, 4 empty output.

mod config;
mod failure;
mod manifest;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use failure::Failure;
use stages::Layout;

#[derive(Debug, Parser)]
#[command(name = "hybrid", version, about = "Hybrid-reasoning training pipeline")]
struct Cli {
    /// Run directory holding data/, checkpoints/, telemetry/ and reports/.
    #[arg(long, global = true, env = "HYBRID_RUN_DIR", default_value = "runs/default")]
    run_dir: PathBuf,

    /// JSON run config; defaults to <run-dir>/config.json when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed for every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Caps worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic training and held-out splits.
    GenData(GenDataArgs),
    /// Supervised fine-tuning on dual-mode targets.
    Hft(HftArgs),
    /// Drop training records the checkpoint solves in every one of k trials.
    Reject(RejectArgs),
    /// Group-relative policy optimization from the fine-tuned checkpoint.
    Hgrpo(HgrpoArgs),
    /// Evaluate checkpoints on the held-out split.
    Eval(EvalArgs),
    /// Verify every manifest in the run directory and print the results.
    Report,
    /// Run every enabled stage in order.
    Run,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    n_easy: Option<usize>,
    #[arg(long)]
    n_hard: Option<usize>,
    /// Held-out samples per difficulty.
    #[arg(long)]
    n_heldout: Option<usize>,
    /// Output directory; defaults to <run-dir>/data.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct HftArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint path; defaults to <run-dir>/checkpoints/sft.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RejectArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Trials per record.
    #[arg(long)]
    k: Option<usize>,
    /// Filtered JSONL; defaults to <run-dir>/data/rl.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct HgrpoArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    sft_checkpoint: Option<PathBuf>,
    /// Checkpoint path; defaults to <run-dir>/checkpoints/hrl.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoints to evaluate, named by file stem. Defaults to whichever of
    /// sft.json and hrl.json exist.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Report directory; defaults to <run-dir>/reports.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve_config(cli: &Cli, layout: &Layout) -> Result<RunConfig, Failure> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None if layout.config().is_file() => RunConfig::load(&layout.config())?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    Ok(config)
}

fn save_config(config: &RunConfig, layout: &Layout) -> Result<(), Failure> {
    std::fs::create_dir_all(&layout.root)?;
    let mut bytes = serde_json::to_vec_pretty(config)?;
    bytes.push(b'\n');
    std::fs::write(layout.config(), bytes)?;
    Ok(())
}

fn or_default(path: &Option<PathBuf>, default: PathBuf) -> PathBuf {
    path.clone().unwrap_or(default)
}

fn default_checkpoints(layout: &Layout) -> Vec<PathBuf> {
    [layout.sft(), layout.hrl()].into_iter().filter(|p| p.is_file()).collect()
}

fn run_all(config: &RunConfig, layout: &Layout) -> Result<(), Failure> {
    layout.create()?;
    save_config(config, layout)?;
    match (&config.train_data, &config.heldout_data) {
        (Some(train), Some(heldout)) => stages::import_data(config, layout, train, heldout)?,
        (None, None) => stages::gen_data(config, layout, &layout.data())?,
        _ => return Err(Failure::Config("train_data and heldout_data must be given together".into())),
    }
    let s = config.stages;
    if s.hft {
        stages::hft(config, layout, &layout.train(), &layout.sft())?;
    }
    let rl_data = if s.reject {
        stages::reject(config, layout, &layout.train(), &layout.sft(), config.reject_k, &layout.rl())?;
        layout.rl()
    } else {
        layout.train()
    };
    if s.hgrpo {
        stages::hgrpo(config, layout, &rl_data, &layout.sft(), &layout.hrl())?;
    }
    if s.eval {
        stages::eval(config, layout, &default_checkpoints(layout), &layout.heldout(), &layout.reports())?;
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Config(e.to_string()))?;
    }
    let layout = Layout::new(&cli.run_dir);
    if let Command::Report = cli.command {
        return stages::report(&layout);
    }
    let mut config = resolve_config(cli, &layout)?;
    match &cli.command {
        Command::GenData(a) => {
            config.n_easy = a.n_easy.unwrap_or(config.n_easy);
            config.n_hard = a.n_hard.unwrap_or(config.n_hard);
            config.n_heldout = a.n_heldout.unwrap_or(config.n_heldout);
            config.validate()?;
            save_config(&config, &layout)?;
            stages::gen_data(&config, &layout, &or_default(&a.out, layout.data()))
        }
        Command::Hft(a) => {
            config.validate()?;
            stages::hft(&config, &layout, &or_default(&a.data, layout.train()), &or_default(&a.out, layout.sft()))
        }
        Command::Reject(a) => {
            config.validate()?;
            let k = a.k.unwrap_or(config.reject_k);
            stages::reject(
                &config,
                &layout,
                &or_default(&a.data, layout.train()),
                &or_default(&a.checkpoint, layout.sft()),
                k,
                &or_default(&a.out, layout.rl()),
            )
        }
        Command::Hgrpo(a) => {
            config.validate()?;
            stages::hgrpo(
                &config,
                &layout,
                &or_default(&a.data, layout.rl()),
                &or_default(&a.sft_checkpoint, layout.sft()),
                &or_default(&a.out, layout.hrl()),
            )
        }
        Command::Eval(a) => {
            config.validate()?;
            let checkpoints = if a.checkpoint.is_empty() {
                default_checkpoints(&layout)
            } else {
                a.checkpoint.clone()
            };
            stages::eval(
                &config,
                &layout,
                &checkpoints,
                &or_default(&a.data, layout.heldout()),
                &or_default(&a.out, layout.reports()),
            )
        }
        Command::Run => {
            config.validate()?;
            run_all(&config, &layout)
        }
        Command::Report => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.exit_code())
        }
    }
}
