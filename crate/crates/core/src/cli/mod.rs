//! Command-line entry points.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{
    cmd_icil, cmd_smoothness, cmd_sweep, cmd_synth, cmd_train_tokenizer, code_perplexity,
    dataset_hash, raw_smoothness, tokenizer_config, IcilSummary, SweepCell, SweepReport,
    TokenizerMetrics,
};
pub use config::{DataMode, RunConfig, SweepTarget};

use crate::error::{Error, Result};

/// Lipschitz-constrained action tokenizers and in-context imitation.
#[derive(Debug, Parser)]
#[command(name = "liptok", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Root seed; overrides the file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory; overrides the file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Parallel workers for sweeps and suites.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate expert episodes or minimum-jerk action sequences.
    Synth,
    /// Train one tokenizer on a dataset's actions.
    TrainTokenizer,
    /// Score latent smoothness of trained checkpoints.
    Smoothness,
    /// Train and evaluate in-context policies per tokenizer kind.
    Icil,
    /// Codebook-size and Lipschitz ablation sweep.
    Sweep,
}

impl Cli {
    /// File values, then flags, then `--set` overrides.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

/// Installs the logger; `LIPTOK_LOG` takes error, info or debug.
pub fn init_logging() {
    let level = std::env::var("LIPTOK_LOG").unwrap_or_else(|_| "info".into());
    let filter = match level.as_str() {
        "error" | "info" | "debug" => level.as_str(),
        _ => "info",
    };
    let _ = env_logger::Builder::new()
        .parse_filters(filter)
        .format_timestamp(None)
        .try_init();
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.resolve()?;
    match cli.command {
        Command::Synth => {
            let path = cmd_synth(&cfg)?;
            println!("{}", path.display());
        }
        Command::TrainTokenizer => {
            let m = cmd_train_tokenizer(&cfg)?;
            println!("{}", serde_json::to_string(&m)?);
        }
        Command::Smoothness => {
            for r in cmd_smoothness(&cfg)? {
                println!("{}\t{:.4}\t{}", r.tokenizer, r.score, r.trajectory_count);
            }
        }
        Command::Icil => {
            let s = cmd_icil(&cfg)?;
            for r in &s.report.rows {
                println!("{}\t{}\t{:.3}", r.label, r.task, r.mean_success);
            }
            if let Some(rho) = s.spearman {
                println!("spearman(smoothness, success) = {rho:.3}");
            }
            if s.report.diverged > 0 {
                return Err(Error::Diverged(format!("{} suite runs diverged", s.report.diverged)));
            }
        }
        Command::Sweep => {
            let r = cmd_sweep(&cfg)?;
            let failed = r.cells.iter().filter(|c| c.status != "ok").count();
            println!("{} cells, {failed} failed", r.cells.len());
            if failed > 0 {
                return Err(Error::Diverged(format!("{failed} sweep cells failed")));
            }
        }
    }
    Ok(())
}
