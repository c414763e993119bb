mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<t2s_core::Error> for CliError {
    fn from(e: t2s_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "t2s", version, about = "Text-conditioned time-series generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Caption raw series fragment by fragment through an LLM endpoint
    BuildDataset(BuildDatasetFlags),
    /// Pretrain the length-adaptive VAE
    TrainVae(TrainVaeFlags),
    /// Train the diffusion transformer on frozen VAE latents
    TrainDit(TrainDitFlags),
    /// Generate one series from a caption
    Generate(GenerateFlags),
    /// Score generated candidates against a captioned dataset
    Evaluate(EvaluateFlags),
    /// Evaluate a guidance-scale by step-count grid
    Sweep(SweepFlags),
    /// Write the deterministic synthetic corpus
    MakeSynth(MakeSynthFlags),
}

/// Shared `--config` option, never echoed into the effective config.
#[derive(Args, Debug, Clone)]
pub struct ConfigArg {
    /// TOML config file or a previous run manifest (JSON)
    #[arg(long = "config", value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct MakeSynthFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub cfg: ConfigArg,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_length: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lengths: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
pub struct EncoderFlags {
    /// `offline` or `remote`
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_endpoint: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_model: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_cache: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct BuildDatasetFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub cfg: ConfigArg,
    /// JSONL of `{"source_id", "series", "domain"}` records
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub llm_endpoint: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub llm_model: Option<String>,
    /// Serve completions from the bundled in-process mock
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mock_llm: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub llm_cache: Option<PathBuf>,
    /// `batched` or `per_candidate`
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub request_mode: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retries: Option<u32>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backoff_ms: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed_prompt: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fragments: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_limit: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidates: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub encoder: EncoderFlags,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sequential: Option<bool>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainCommonFlags {
    /// Dataset files (JSONL or CSV), comma separated
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<Vec<PathBuf>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lengths: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// `minmax` or `zscore`
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norm: Option<String>,
    /// Write a loss-curve PNG next to the checkpoint
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plot: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sequential: Option<bool>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainVaeFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub cfg: ConfigArg,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: TrainCommonFlags,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_kl: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_len: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainDitFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub cfg: ConfigArg,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: TrainCommonFlags,
    /// Pretrained VAE checkpoint directory
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vae: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_drop: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_model: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlp_ratio: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unfreeze_vae: Option<bool>,
    #[command(flatten)]
    #[serde(flatten)]
    pub encoder: EncoderFlags,
}

#[derive(Args, Debug, Serialize)]
pub struct ModelFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vae: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dit: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct GenerateFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub cfg: ConfigArg,
    #[command(flatten)]
    #[serde(flatten)]
    pub models: ModelFlags,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
    /// Guidance scale
    #[arg(long = "cfg", alias = "cfg-scale")]
    #[serde(rename = "cfg_scale", skip_serializing_if = "Option::is_none")]
    pub cfg_scale: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Also write the JSON result to this file
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Directory receiving the run manifest
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalCommonFlags {
    #[command(flatten)]
    #[serde(flatten)]
    pub models: ModelFlags,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<Vec<PathBuf>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidates: Option<usize>,
    /// Evaluate at most this many samples per (dataset, length)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norm: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sequential: Option<bool>,
}

#[derive(Args, Debug, Serialize)]
pub struct EvaluateFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub cfg: ConfigArg,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: EvalCommonFlags,
    #[arg(long = "cfg", alias = "cfg-scale")]
    #[serde(rename = "cfg_scale", skip_serializing_if = "Option::is_none")]
    pub cfg_scale: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct SweepFlags {
    #[command(flatten)]
    #[serde(skip)]
    pub cfg: ConfigArg,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: EvalCommonFlags,
    /// Guidance scales, comma separated
    #[arg(long = "cfg", alias = "cfg-scale", value_delimiter = ',')]
    #[serde(rename = "cfg_scale", skip_serializing_if = "Option::is_none")]
    pub cfg_scale: Option<Vec<f64>>,
    /// Step counts, comma separated
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<Vec<usize>>,
    /// Metric drawn in the heatmap: `wape`, `mse` or `mrr_at_10`
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::MakeSynth(f) => commands::make_synth(f),
        Command::BuildDataset(f) => commands::build_dataset(f),
        Command::TrainVae(f) => commands::train_vae(f),
        Command::TrainDit(f) => commands::train_dit(f),
        Command::Generate(f) => commands::generate(f),
        Command::Evaluate(f) => commands::evaluate(f),
        Command::Sweep(f) => commands::sweep(f),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
