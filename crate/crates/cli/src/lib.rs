//! `dtvg`: stage-1 training, grouping reports, stage-2 transfer and the
//! mode comparison, each writing TPVF vectors, a JSONL metrics stream and a
//! run manifest into the output directory.
//!
//! Exit codes: 0 on success, 1 on a runtime failure (a JSON error object is
//! printed to stderr), 2 on a usage error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dtvg_core::config::ExperimentConfig;
use dtvg_core::transfer::TransferMode;

mod commands;
pub mod plot;

#[derive(Debug, Parser)]
#[command(name = "dtvg", version, about = "Dynamic task vector grouping on a toy prompt-tuning testbed")]
pub struct Cli {
    /// TOML experiment config; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0, value_name = "N")]
    pub seed: u64,
    #[arg(long, global = true, env = "DTVG_OUT_DIR", default_value = "dtvg-out", value_name = "DIR")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

/// Stage-2 overrides shared by `transfer`, `compare` and `train-target-baseline`.
#[derive(Debug, Clone, Default, Args)]
pub struct TransferFlags {
    /// Examples per class in the few-shot target set (0 keeps all).
    #[arg(long, value_name = "N")]
    pub k: Option<usize>,
    #[arg(long, value_name = "N")]
    pub regroup_every: Option<usize>,
    #[arg(long, value_name = "N")]
    pub steps: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the task family and write it as JSON.
    GenTasks,
    /// Stage 1 on every source task; writes one TPVF vector per source.
    TrainSource,
    /// Stage 1 on the target under the stage-2 data view.
    TrainTargetBaseline {
        #[command(flatten)]
        flags: TransferFlags,
    },
    /// Grouping report (greedy and exact) from TPVF vectors or a similarity table.
    Group {
        /// Target vector (TPVF); sources follow as positional arguments.
        #[arg(long, value_name = "PATH", conflicts_with = "table", requires = "sources")]
        target: Option<PathBuf>,
        #[arg(value_name = "SOURCE")]
        sources: Vec<PathBuf>,
        /// JSON similarity table with `s2t`, `s2s` and optional `source_ids`.
        #[arg(long, value_name = "PATH", required_unless_present = "target")]
        table: Option<PathBuf>,
        /// Weight of the consistency term in the exact objective.
        #[arg(long, default_value_t = 1.0, value_name = "X")]
        lambda: f64,
        #[arg(long)]
        early_stop: bool,
        #[arg(long)]
        strict: bool,
    },
    /// Stage 2 for the target in one mode.
    Transfer {
        #[arg(long, value_name = "M")]
        mode: Option<TransferMode>,
        #[command(flatten)]
        flags: TransferFlags,
        /// Also solve each regroup exactly and log its objective.
        #[arg(long)]
        log_exact: bool,
    },
    /// Every mode over several seeds, starting at --seed.
    Compare {
        #[arg(long, default_value_t = 5, value_name = "N")]
        seeds: u64,
        /// Comma-separated modes (default: all).
        #[arg(long, value_delimiter = ',', value_name = "M,...")]
        modes: Vec<TransferMode>,
        #[command(flatten)]
        flags: TransferFlags,
    },
    /// Reduce a metrics stream to CSV tables for plotting.
    PlotData {
        #[arg(value_name = "METRICS")]
        metrics: PathBuf,
    },
    /// Finite-difference check of both backward passes.
    Fdcheck {
        #[arg(long, default_value_t = 20, value_name = "N")]
        configs: usize,
    },
}

impl TransferFlags {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(k) = self.k {
            cfg.transfer.few_shot_k = k;
        }
        if let Some(n) = self.regroup_every {
            cfg.transfer.regroup_every = n;
        }
        if let Some(n) = self.steps {
            cfg.transfer.n_max = n;
        }
    }
}

/// Loads the config file (or the defaults) and applies flag overrides.
pub fn resolve_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    match &cli.command {
        Command::TrainTargetBaseline { flags } | Command::Compare { flags, .. } => flags.apply(&mut cfg),
        Command::Transfer { mode, flags, log_exact } => {
            flags.apply(&mut cfg);
            if let Some(m) = mode {
                cfg.transfer.mode = *m;
            }
            cfg.transfer.log_exact |= *log_exact;
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::execute(&cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            let msg = serde_json::json!({
                "status": "error",
                "command": commands::name(&cli.command),
                "message": format!("{e:#}"),
            });
            eprintln!("{msg}");
            1
        }
    }
}
