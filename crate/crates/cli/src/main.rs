mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::OnceLock;

use clap::{Parser, Subcommand};

use config::{ConfigError, RunConfig};

fn config_defaults() -> &'static str {
    static TEXT: OnceLock<String> = OnceLock::new();
    TEXT.get_or_init(|| {
        format!(
            "Config file keys and their defaults (`key = value`, grouped in sections):\n\n{}\n\
             Exit codes: 0 success, 1 runtime failure, 2 invalid config or usage, \
             3 missing or unreadable file, 4 non-finite loss.\n\
             RFNET_THREADS caps the worker threads of `ablate`.",
            RunConfig::default().to_text()
        )
    })
}

#[derive(Parser, Debug)]
#[command(name = "rfnet", version, about = "Multi-view fusion captioning on a synthetic scene benchmark")]
#[command(after_long_help = config_defaults())]
struct Cli {
    /// Config file; missing keys keep their defaults (see --help)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Seed override: data.seed for gen-data, gradcheck.seed for gradcheck,
    /// train.seed otherwise [config default: 1]
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Dataset directory (data.dir) [config default: data]
    #[arg(long, global = true, value_name = "DIR")]
    data: Option<PathBuf>,

    /// Input checkpoint (run.checkpoint) [config default: none]
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,

    /// Comma-separated encoder views the model uses (model.views)
    /// [config default: all]
    #[arg(long, global = true, value_name = "LIST")]
    views: Option<String>,

    /// Beam size for captioning and evaluation (run.beam) [config default: 3]
    #[arg(long, global = true, value_name = "K")]
    beam: Option<usize>,

    /// Maximum generated caption length (train.max_len) [config default: 16]
    #[arg(long = "max-len", global = true, value_name = "N")]
    max_len: Option<usize>,

    /// Weight of the discriminative loss (train.lambda) [config default: 10]
    #[arg(long, global = true, value_name = "X")]
    lambda: Option<f64>,

    /// Fusion variant: full, no-stage-I, no-stage-II or no-interaction
    /// (model.ablation) [config default: full]
    #[arg(long, global = true, value_name = "NAME")]
    ablation: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Generate the synthetic dataset into --out
    GenData,
    /// Cross-entropy training with early stopping on validation CIDEr-D
    Train,
    /// Self-critical fine-tuning of --checkpoint
    FinetuneRl,
    /// Caption a split (run.split) with --checkpoint
    Caption,
    /// BLEU and CIDEr-D of --checkpoint on a split
    Evaluate,
    /// Train every variant for every seed and tabulate test CIDEr-D
    Ablate,
    /// Compare tape gradients with finite differences on a tiny model
    Gradcheck,
}

impl Cli {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let mut set = |section: &str, key: &str, v: String| cfg.set(section, key, &v);
        if let Some(s) = self.seed {
            match self.command {
                Command::GenData => set("data", "seed", s.to_string())?,
                Command::Gradcheck => set("gradcheck", "seed", s.to_string())?,
                _ => set("train", "seed", s.to_string())?,
            }
        }
        if let Some(d) = &self.data {
            set("data", "dir", d.display().to_string())?;
        }
        if let Some(c) = &self.checkpoint {
            set("run", "checkpoint", c.display().to_string())?;
        }
        if let Some(v) = &self.views {
            set("model", "views", v.clone())?;
        }
        if let Some(b) = self.beam {
            set("run", "beam", b.to_string())?;
        }
        if let Some(n) = self.max_len {
            set("train", "max_len", n.to_string())?;
        }
        if let Some(l) = self.lambda {
            set("train", "lambda", l.to_string())?;
        }
        if let Some(a) = &self.ablation {
            set("model", "ablation", a.clone())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use rfnet_core::Error as E;
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(core) = cause.downcast_ref::<E>() {
            return match core {
                E::NonFiniteLoss { .. } | E::NonFinite { .. } | E::NonFiniteGradient(_) | E::NonFiniteProbe { .. } => 4,
                E::Io(_) | E::Format(_) => 3,
                E::InvalidArgument(_) | E::ViewCountMismatch { .. } => 2,
                _ => 1,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = cli.resolve().and_then(|cfg| commands::run(cli.command, &cfg, &cli.out));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
