//! Command-line interface. Exit codes: 0 success, 2 configuration error,
//! 3 runtime failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{self, ExperimentConfig, Overrides};
use crate::error::{Error, Result, EXIT_CONFIG, EXIT_OK};
use crate::report::RunManifest;
use crate::runner;

#[derive(Debug, Parser)]
#[command(name = "plotfuse", version, about = "Plot-augmented time-series models: train, evaluate, ablate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment TOML, or a run manifest (JSON) to repeat a run.
    #[arg(long)]
    pub config: PathBuf,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Set a config value, e.g. `model.tokenizer.r=8`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every seed; write checkpoints, report and manifest.
    Train(Common),
    /// Score saved checkpoints on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoints to score; defaults to the ones `train` wrote.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Write one PNG per layout for test windows.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Run the product of the configured ablation axes.
    Sweep(Common),
    /// Train on the source dataset, evaluate on the target dataset.
    Zeroshot(Common),
    /// Train on a fraction of the training split.
    Fewshot {
        #[command(flatten)]
        common: Common,
        /// Share of the training split to keep (default 0.1).
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Dump averaged attention maps of a checkpoint.
    Attn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Tabulate report files or directories of reports.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Resolve the experiment config from a TOML file or a run manifest.
pub fn resolve(common: &Common, env: Vec<(String, String)>) -> Result<(ExperimentConfig, Option<RunManifest>)> {
    let ov = Overrides {
        env,
        pairs: common.overrides.clone(),
        seed: common.seed,
        jobs: common.jobs,
        out: common.out.clone(),
    };
    if common.config.extension().is_some_and(|e| e == "json") {
        let m = RunManifest::load(&common.config)?;
        if !ov.pairs.is_empty() || ov.seed.is_some() {
            return Err(Error::config("--config", "a manifest replays a run as recorded; drop --override and --seed"));
        }
        let mut cfg = m.config.clone();
        if let Some(j) = ov.jobs {
            cfg.jobs = j;
        }
        if let Some(o) = ov.out {
            cfg.out_dir = Some(o);
        }
        return Ok((cfg, Some(m)));
    }
    let (cfg, _) = config::load(&common.config, &ov)?;
    Ok((cfg, None))
}

fn announce(m: &RunManifest) {
    for o in &m.outputs {
        println!("{o}");
    }
}

pub fn execute(cli: Cli, env: Vec<(String, String)>) -> Result<()> {
    match cli.command {
        Command::Train(c) => announce(&runner::train(&resolve(&c, env)?.0)?),
        Command::Eval { common, checkpoint } => announce(&runner::eval(&resolve(&common, env)?.0, &checkpoint)?),
        Command::Render { common, count } => announce(&runner::render(&resolve(&common, env)?.0, count)?),
        Command::Sweep(c) => announce(&runner::sweep(&resolve(&c, env)?.0)?),
        Command::Zeroshot(c) => announce(&runner::zeroshot(&resolve(&c, env)?.0)?),
        Command::Fewshot { common, fraction } => {
            let (cfg, m) = resolve(&common, env)?;
            let recorded = m.and_then(|m| m.params.get("fraction").and_then(|f| f.parse().ok()));
            announce(&runner::fewshot(&cfg, fraction.or(recorded).unwrap_or(0.1))?)
        }
        Command::Attn { common, checkpoint } => {
            announce(&runner::attn(&resolve(&common, env)?.0, checkpoint.as_deref())?)
        }
        Command::Report { inputs, out } => {
            for p in runner::report(&inputs, Path::new(&out))? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

/// Parse `args`, run, print errors to stderr, return the exit code.
pub fn main_with(args: impl IntoIterator<Item = String>, env: Vec<(String, String)>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli, env) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
