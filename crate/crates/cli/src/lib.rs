//! Command-line front end: `train`, `eval`, `detect`, `bench` and `synth`.

pub mod commands;
pub mod config;
pub mod render;

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use pdd_core::{Error, Result};

pub use commands::{cmd_bench, cmd_detect, cmd_eval, cmd_synth, cmd_train, Layout, Seeds};
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "yolo-pdd", version, about = "PCB defect detection: train, evaluate, detect and benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every command. Each maps onto a config key.
#[derive(Debug, Args, Default)]
pub struct Common {
    /// Plain-text `key = value` config file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (checkpoints/, logs/, reports/, curves/)
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Use generated boards instead of a dataset directory
    #[arg(long)]
    pub synthetic: bool,
    /// Number of synthetic images
    #[arg(long)]
    pub images: Option<usize>,
    /// Dataset directory with images/ and annotations/
    #[arg(long)]
    pub data: Option<String>,
    /// Detection confidence threshold
    #[arg(long)]
    pub conf: Option<f64>,
    /// Any other config key
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a detector and write checkpoints and the per-step log
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Continue from checkpoints/last.ckpt in the output directory
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint and write the report and PR curves
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Detect defects in image files
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write annotated PNGs
        #[arg(long)]
        render: bool,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Measure end-to-end throughput
    Bench {
        #[command(flatten)]
        common: Common,
        /// Benchmark this checkpoint instead of a freshly initialized model
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
    },
    /// Export a synthetic dataset
    Synth {
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    pub fn overrides(&self) -> Result<BTreeMap<String, String>> {
        let mut m = BTreeMap::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            m.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        put("output_dir", self.out.clone());
        put("seed", self.seed.map(|v| v.to_string()));
        put("image_size", self.image_size.map(|v| v.to_string()));
        put("synth_images", self.images.map(|v| v.to_string()));
        put("data_dir", self.data.clone());
        put("conf_threshold", self.conf.map(|v| v.to_string()));
        if self.synthetic {
            m.insert("synthetic".into(), "true".into());
        }
        Ok(m)
    }

    pub fn load(&self, extra: BTreeMap<String, String>) -> Result<RunConfig> {
        let mut m = self.overrides()?;
        m.extend(extra);
        RunConfig::load(self.config.as_deref(), &m)
    }
}

/// Runs a parsed command and returns the text to print.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train { common, epochs, batch, lr, resume } => {
            let extra: BTreeMap<String, String> = [
                ("epochs", epochs.map(|v| v.to_string())),
                ("batch_size", batch.map(|v| v.to_string())),
                ("lr", lr.map(|v| v.to_string())),
            ]
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
            .collect();
            let cfg = common.load(extra)?;
            let out = cmd_train(&cfg, resume)?;
            let first = out.log.first().map_or(0.0, |r| r.loss.total);
            let last = out.log.last().map_or(0.0, |r| r.loss.total);
            Ok(format!(
                "trained {} steps; loss {first:.6} -> {last:.6}\ncheckpoint {}\nlog {}\n",
                out.log.len(),
                out.final_checkpoint.display(),
                Layout::new(&cfg.output_dir).train_log().display()
            ))
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.load(BTreeMap::new())?;
            Ok(cmd_eval(&cfg, &checkpoint)?.render())
        }
        Command::Detect { common, checkpoint, render, inputs } => {
            let cfg = common.load(BTreeMap::new())?;
            cmd_detect(&cfg, &checkpoint, &inputs, render)
        }
        Command::Bench { common, checkpoint, runs, warmup } => {
            let cfg = common.load(BTreeMap::new())?;
            Ok(cmd_bench(&cfg, checkpoint.as_deref(), warmup, runs)?.render())
        }
        Command::Synth { common } => {
            let cfg = common.load(BTreeMap::new())?;
            let n = cmd_synth(&cfg)?;
            Ok(format!("wrote {n} images to {}\n", cfg.output_dir.display()))
        }
    }
}
