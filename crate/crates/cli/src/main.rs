//! `eegfm`: command-line front end for corpus preparation, pretraining,
//! embedding extraction and downstream evaluation.

mod commands;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use eegfm_core::config::{parse_override, RunConfig};
use eegfm_core::Error;

#[derive(Parser, Debug)]
#[command(name = "eegfm", version, about = "EEG foundation-model toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; defaults apply to every key it omits.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random draw of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dotted-path override, e.g. `pretrain.mask.m_r=0.5`. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Child processes run at once by multi-seed commands.
    #[arg(long, global = true, default_value_t = 1)]
    pub parallel: usize,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Generate a labelled synthetic corpus.
    Synth,
    /// Resample, filter, normalize and attach electrode positions.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
    },
    /// Masked-autoencoder pretraining from a fresh initialization.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
    },
    /// Token and pooled embeddings of every recording.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Linear probe on a frozen encoder.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Two-step fine-tuning, optionally over several seeds.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        /// Number of seeds, starting at the run seed.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Elementwise average of compatible checkpoints.
    Soup {
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
    },
    /// Score a fine-tuned checkpoint or a probe on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Probe directory written by `probe`; without it the checkpoint
        /// must carry a classifier head.
        #[arg(long)]
        probe: Option<PathBuf>,
    },
    /// Training-time estimate from the FLOP count.
    Flops,
    /// Learning-rate schedule as CSV.
    LrCurve,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Preprocess { .. } => "preprocess",
            Command::Pretrain { .. } => "pretrain",
            Command::Embed { .. } => "embed",
            Command::Probe { .. } => "probe",
            Command::Finetune { .. } => "finetune",
            Command::Soup { .. } => "soup",
            Command::Eval { .. } => "eval",
            Command::Flops => "flops",
            Command::LrCurve => "lr-curve",
        }
    }
}

/// Loads the configuration, layers flags on top and validates the result.
fn resolve(cli: &Cli) -> eegfm_core::Result<(RunConfig, PathBuf)> {
    let overrides = cli
        .common
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<eegfm_core::Result<Vec<_>>>()?;
    let mut cfg = RunConfig::load(cli.common.config.as_deref(), &overrides)?;
    if let Some(seed) = cli.common.seed {
        commands::apply_seed(&mut cfg, seed);
    }
    let out = cli
        .common
        .out
        .clone()
        .or_else(|| cfg.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
    cfg.out = Some(out.display().to_string());
    cfg.validate()?;
    Ok((cfg, out))
}

fn error_record(command: &str, err: &anyhow::Error) -> serde_json::Value {
    let (kind, details) = match err.downcast_ref::<Error>() {
        Some(Error::Config(v)) => ("config", v.clone()),
        Some(Error::UnresolvedChannels(v)) => ("unresolved_channels", v.clone()),
        Some(e) => (e.kind(), Vec::new()),
        None => ("runtime", Vec::new()),
    };
    json!({
        "error": {
            "command": command,
            "kind": kind,
            "message": format!("{err:#}"),
            "details": details,
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    let result = resolve(&cli)
        .map_err(anyhow::Error::from)
        .and_then(|(cfg, out)| commands::run(&cli, &cfg, &out).map(|summary| (out, summary)));
    match result {
        Ok((_, summary)) => {
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = error_record(name, &e);
            let _ = writeln!(std::io::stderr(), "{}", serde_json::to_string_pretty(&record).unwrap_or_default());
            let is_config = matches!(e.downcast_ref::<Error>(), Some(Error::Config(_)));
            ExitCode::from(if is_config { 2 } else { 1 })
        }
    }
}
