use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use mcm_core::app;
use mcm_core::check::CheckOptions;
use mcm_core::config::Config;

/// Keypoint-correspondence hand pose estimation: train, evaluate, check, benchmark.
#[derive(Parser)]
#[command(name = "mcm", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on `train_dir`, generating synthetic samples if it is empty.
    Train(Common),
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out_dir>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `val_dir`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report directory; defaults to `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write predicted joints per sample.
        #[arg(long)]
        dump_joints: bool,
    },
    /// Run every registered property suite.
    Check {
        /// Offset the analytic gradient of this operation (negative control).
        #[arg(long, value_name = "OP")]
        fault: Option<String>,
        /// Random seeds per gradient and invariance check.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Per-stage forward timing.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write synthetic train and validation splits.
    Gen(Common),
}

enum Failure {
    Usage(anyhow::Error),
    Run(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Run(e.into())
    }
}

fn load_config(c: &Common) -> Result<Config, Failure> {
    let usage = |e: mcm_core::Error| Failure::Usage(e.into());
    let mut cfg = match &c.config {
        Some(p) => Config::load(p).map_err(usage)?,
        None => Config::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    for kv in &c.set {
        cfg.apply_override(kv).map_err(usage)?;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn run(cmd: Command) -> Result<bool, Failure> {
    match cmd {
        Command::Train(common) => {
            let cfg = load_config(&common)?;
            let out = app::cmd_train(&cfg)?;
            println!("steps: {}", out.steps);
            println!("final_loss: {:?}", out.final_loss);
            println!("train_mke_mm: {:?}", out.report.mke_mm);
            println!("checkpoint: {}", out.checkpoint.display());
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            out,
            dump_joints,
        } => {
            let cfg = load_config(&common)?;
            let ckpt = checkpoint.unwrap_or_else(|| Path::new(&cfg.out_dir).join(app::CHECKPOINT_FILE));
            let out_dir = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
            let data = data.unwrap_or_else(|| PathBuf::from(&cfg.val_dir));
            let report = app::cmd_eval(&cfg, &ckpt, &data, &out_dir, dump_joints)
                .with_context(|| format!("evaluating {} on {}", ckpt.display(), data.display()))?;
            print!("{}", report.to_text());
        }
        Command::Check { fault, seeds } => {
            let results = app::cmd_check(&CheckOptions { fault, seeds })?;
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.passed()).count();
            println!("{} suites, {failed} failed", results.len());
            return Ok(failed == 0);
        }
        Command::Bench { common, checkpoint } => {
            let cfg = load_config(&common)?;
            print!("{}", app::cmd_bench(&cfg, checkpoint.as_deref())?.to_text());
        }
        Command::Gen(common) => {
            let cfg = load_config(&common)?;
            let (t, v) = app::cmd_gen(&cfg)?;
            println!("train: {t} samples in {}", Path::new(&cfg.train_dir).display());
            println!("val: {v} samples in {}", Path::new(&cfg.val_dir).display());
        }
    }
    Ok(true)
}

/// Context chain down to the first library error, whose message already
/// includes its own source.
fn describe(e: &anyhow::Error) -> String {
    let mut parts = Vec::new();
    for cause in e.chain() {
        parts.push(cause.to_string());
        if cause.is::<mcm_core::Error>() {
            break;
        }
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Usage(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}
