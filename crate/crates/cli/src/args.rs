// SPDX-License-Identifier: MIT OR Apache-2.0

use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "fencebench", version, about = "Feature-fence workbench")]
pub struct Cli {
    /// Desk config JSON; unset fields take built-in defaults.
    #[arg(long, global = true, env = "FENCEBENCH_CONFIG")]
    pub config: Option<PathBuf>,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub cmd: Cmd,
}

/// Where model calls go: a running service or a local checkpoint.
#[derive(Args)]
pub struct Target {
    #[arg(long, env = "FENCEBENCH_CKPT")]
    pub ckpt: Option<PathBuf>,
    /// Base URL of a running `serve`; wins over `--ckpt`.
    #[arg(long, env = "FENCEBENCH_SERVER")]
    pub server: Option<String>,
}

/// Overrides for curriculum schedule fields.
#[derive(Args, Default)]
pub struct ScheduleArgs {
    #[arg(long, env = "FENCEBENCH_STEPS")]
    pub steps: Option<u64>,
    #[arg(long, env = "FENCEBENCH_STAGE1_STEPS")]
    pub stage1_steps: Option<u64>,
    #[arg(long, env = "FENCEBENCH_RAMP_STEPS")]
    pub ramp_steps: Option<u64>,
    #[arg(long, env = "FENCEBENCH_LAMBDA_MAX")]
    pub lambda_max: Option<f32>,
    #[arg(long, env = "FENCEBENCH_LR")]
    pub lr: Option<f32>,
    #[arg(long, env = "FENCEBENCH_WARMUP_STEPS")]
    pub warmup_steps: Option<u64>,
    #[arg(long, env = "FENCEBENCH_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    #[arg(long, env = "FENCEBENCH_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "FENCEBENCH_CHECKPOINT_EVERY")]
    pub checkpoint_every: Option<u64>,
    #[arg(long, env = "FENCEBENCH_EVAL_EVERY")]
    pub eval_every: Option<u64>,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Write the effective desk config as JSON.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate train, held-out and probe corpora plus the vocabulary.
    GenCorpus {
        #[arg(long, env = "FENCEBENCH_CORPUS_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also request examples from the external LLM (FENCEBENCH_LLM_*).
        #[arg(long)]
        llm: bool,
        #[arg(long, default_value_t = 100)]
        llm_examples: usize,
    },
    /// Calibrate per-layer targets on a checkpoint and write the fence
    /// config.
    Calibrate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Layout to calibrate; defaults to the config's fence.
        #[arg(long)]
        fence: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the fence curriculum, pretraining a baseline first if none is
    /// given.
    Train {
        /// Directory written by `gen-corpus`; generated from the config if
        /// absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Calibrated fence config; calibrated on the baseline if absent.
        #[arg(long)]
        fence: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/fenced/model.ckpt`.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        schedule: ScheduleArgs,
    },
    /// Print the normalized fence heatmap for a text as JSON.
    Trace {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        text: String,
        /// `feature=on|off|auto`, repeatable.
        #[arg(long)]
        clamp: Vec<String>,
    },
    /// Complete a prompt, optionally with clamps.
    Generate {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        prompt: String,
        /// `feature=on|off|auto`, repeatable.
        #[arg(long)]
        clamp: Vec<String>,
        #[arg(long, default_value_t = 32)]
        max_tokens: usize,
        #[arg(long, default_value_t = 0.0)]
        temperature: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print the full response instead of the completion text.
        #[arg(long)]
        json: bool,
    },
    /// Linear-probe erosion report for a baseline and a fenced checkpoint.
    Probe {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        fenced: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Must match the fence stored in the fenced checkpoint.
        #[arg(long)]
        fence: Option<PathBuf>,
        /// 0-based layer; defaults to the middle layer.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Held-out perplexity as a function of fence width.
    PplSweep {
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<usize>>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Steps per width.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve one checkpoint over HTTP.
    Serve {
        #[arg(long, env = "FENCEBENCH_CKPT")]
        ckpt: PathBuf,
        #[arg(long, env = "FENCEBENCH_ADDR", default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Allowed console origin; any origin when unset.
        #[arg(long, env = "FENCEBENCH_CORS_ORIGIN")]
        cors_origin: Option<String>,
    },
    /// Every measurement for an existing baseline and fenced checkpoint.
    /// Curriculum metrics are read from `metrics.jsonl` in the fenced run
    /// directory.
    Report {
        /// Directory written by `gen-corpus` or `pipeline`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        /// `<run>/fenced/model.ckpt`
        #[arg(long)]
        fenced: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// The whole desk run: corpus, baseline, curriculum, every measurement.
    Pipeline {
        #[arg(long)]
        out: PathBuf,
        /// Also run the fence-width perplexity sweep.
        #[arg(long)]
        sweep: bool,
        #[command(flatten)]
        schedule: ScheduleArgs,
    },
}
