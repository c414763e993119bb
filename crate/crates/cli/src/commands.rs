//! Subcommand implementations over the resolved options.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use t2s_core::caption::{
    build_fragment_dataset, load_raw_series, scores_path, CompletionClientConfig, HttpCompletionClient,
    PipelineConfig, RequestMode, SeedPrompt,
};
use t2s_core::dataset::{load_dataset, Dataset, FileFormat, NormScheme};
use t2s_core::dit::{DenoiserConfig, Dit};
use t2s_core::flow::SamplerConfig;
use t2s_core::metrics::{evaluate as run_eval, sweep as run_sweep, EvalConfig, Metric, ModelGenerator};
use t2s_core::mock::{trend_caption_responder, MockServer};
use t2s_core::par::Execution;
use t2s_core::synth::{write_synth, SynthConfig};
use t2s_core::text::{EmbeddingClientConfig, TextEncoder, TextEncoderSpec};
use t2s_core::trainer::{self, Phase, TrainingConfig};
use t2s_core::vae::{LaVae, VaeConfig};
use t2s_core::plot;

use crate::config::resolve;
use crate::{
    BuildDatasetFlags, CliError, EvaluateFlags, GenerateFlags, MakeSynthFlags, SweepFlags, TrainDitFlags,
    TrainVaeFlags,
};

pub const ENCODER_FILE: &str = "encoder.json";

type CliResult<T = ()> = Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

/// `<dir>/<subcommand>.manifest.json` holding the effective config.
fn write_manifest<T: Serialize>(dir: &Path, subcommand: &str, config: &T, seed: u64) -> CliResult {
    std::fs::create_dir_all(dir)?;
    let manifest = json!({
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "versions": {
            "t2s": env!("CARGO_PKG_VERSION"),
            "checkpoint_format": t2s_core::checkpoint::FORMAT_VERSION,
        },
    });
    let path = dir.join(format!("{subcommand}.manifest.json"));
    std::fs::write(path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn load_all(paths: &[PathBuf]) -> CliResult<Vec<Dataset>> {
    if paths.is_empty() {
        return usage("at least one --data file is required");
    }
    paths
        .iter()
        .map(|p| load_dataset(p, FileFormat::from_path(p)).map_err(CliError::from))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    #[default]
    Offline,
    Remote,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderOpts {
    pub encoder: EncoderKind,
    pub dim: usize,
    pub embed_endpoint: Option<String>,
    pub embed_model: String,
    pub embed_cache: Option<PathBuf>,
}

impl Default for EncoderOpts {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::Offline,
            dim: t2s_core::text::DEFAULT_TEXT_DIM,
            embed_endpoint: None,
            embed_model: "text-embedding-3-small".into(),
            embed_cache: None,
        }
    }
}

impl EncoderOpts {
    fn spec(&self) -> CliResult<TextEncoderSpec> {
        Ok(match self.encoder {
            EncoderKind::Offline => TextEncoderSpec::Offline { dim: self.dim },
            EncoderKind::Remote => {
                let Some(endpoint) = &self.embed_endpoint else {
                    return usage("--encoder remote needs --embed-endpoint");
                };
                let mut c = EmbeddingClientConfig::new(endpoint.clone(), self.embed_model.clone(), self.dim);
                c.cache_path = self.embed_cache.clone();
                TextEncoderSpec::Remote(c)
            }
        })
    }
}

// make-synth

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MakeSynthOpts {
    pub out: PathBuf,
    pub per_length: usize,
    pub lengths: Vec<usize>,
    pub seed: u64,
    pub noise: f64,
}

impl Default for MakeSynthOpts {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            out: PathBuf::from("data/synth"),
            per_length: s.per_length,
            lengths: s.lengths,
            seed: s.seed,
            noise: s.noise,
        }
    }
}

pub fn make_synth(flags: MakeSynthFlags) -> CliResult {
    let o: MakeSynthOpts = resolve(flags.cfg.config.as_deref(), &flags)?;
    let cfg = SynthConfig {
        per_length: o.per_length,
        lengths: o.lengths.clone(),
        seed: o.seed,
        noise: o.noise,
    };
    let files = write_synth(&cfg, &o.out)?;
    write_manifest(&o.out, "make-synth", &o, o.seed)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

// build-dataset

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuildDatasetOpts {
    pub input: Option<PathBuf>,
    pub out: PathBuf,
    pub llm_endpoint: Option<String>,
    pub llm_model: String,
    pub mock_llm: bool,
    pub llm_cache: Option<PathBuf>,
    pub request_mode: RequestMode,
    pub retries: u32,
    pub backoff_ms: u64,
    pub seed_prompt: Option<PathBuf>,
    pub fragments: usize,
    pub token_limit: usize,
    pub candidates: usize,
    pub encoder: EncoderKind,
    pub dim: usize,
    pub embed_endpoint: Option<String>,
    pub embed_model: String,
    pub embed_cache: Option<PathBuf>,
    pub sequential: bool,
}

impl Default for BuildDatasetOpts {
    fn default() -> Self {
        let p = PipelineConfig::default();
        let c = CompletionClientConfig::new("", "gpt-4o-mini");
        let e = EncoderOpts::default();
        Self {
            input: None,
            out: PathBuf::from("data/fragments.jsonl"),
            llm_endpoint: None,
            llm_model: c.model,
            mock_llm: false,
            llm_cache: None,
            request_mode: c.mode,
            retries: c.max_retries,
            backoff_ms: c.backoff_ms,
            seed_prompt: None,
            fragments: p.fragments_per_series,
            token_limit: p.token_limit,
            candidates: p.candidates,
            encoder: e.encoder,
            dim: e.dim,
            embed_endpoint: e.embed_endpoint,
            embed_model: e.embed_model,
            embed_cache: e.embed_cache,
            sequential: false,
        }
    }
}

pub fn build_dataset(flags: BuildDatasetFlags) -> CliResult {
    let o: BuildDatasetOpts = resolve(flags.cfg.config.as_deref(), &flags)?;
    let Some(input) = &o.input else {
        return usage("--input is required");
    };
    let mock = if o.mock_llm {
        Some(MockServer::chat(trend_caption_responder)?)
    } else {
        None
    };
    let endpoint = match (&mock, &o.llm_endpoint) {
        (Some(m), _) => m.url(),
        (None, Some(e)) => e.clone(),
        (None, None) => return usage("either --llm-endpoint or --mock-llm is required"),
    };
    let seeds = match &o.seed_prompt {
        Some(p) => SeedPrompt::load(p)?,
        None => SeedPrompt::shipped(),
    };
    let mut client_cfg = CompletionClientConfig::new(endpoint, o.llm_model.clone());
    client_cfg.max_tokens = o.token_limit;
    client_cfg.max_retries = o.retries;
    client_cfg.backoff_ms = o.backoff_ms;
    client_cfg.mode = o.request_mode;
    client_cfg.cache_path = o.llm_cache.clone();
    let client = HttpCompletionClient::new(client_cfg)?;
    let encoder = EncoderOpts {
        encoder: o.encoder,
        dim: o.dim,
        embed_endpoint: o.embed_endpoint.clone(),
        embed_model: o.embed_model.clone(),
        embed_cache: o.embed_cache.clone(),
    }
    .spec()?
    .build()?;
    let corpus = load_raw_series(input)?;
    let cfg = PipelineConfig {
        fragments_per_series: o.fragments,
        token_limit: o.token_limit,
        candidates: o.candidates,
        execution: execution(o.sequential),
    };
    let res = build_fragment_dataset(&corpus, &seeds, &client, encoder.as_ref(), &cfg, Some(&o.out))?;
    write_manifest(&parent_dir(&o.out), "build-dataset", &o, 0)?;
    for s in &res.skipped {
        eprintln!(
            "skipped {} fragment {}: {}",
            s.fragment.source_id, s.fragment.fragment, s.error
        );
    }
    let written = res.dataset.as_ref().map_or(0, Dataset::len);
    println!(
        "{}",
        json!({
            "dataset": o.out,
            "scores": scores_path(&o.out),
            "records": written,
            "skipped": res.skipped.len(),
            "llm_requests": client.network_calls(),
        })
    );
    if written == 0 {
        return Err(CliError::Runtime("every fragment failed; no dataset written".into()));
    }
    Ok(())
}

// training

fn plot_losses(log: &[trainer::RunRecord], dir: &Path) -> CliResult {
    let losses: Vec<f64> = log.iter().map(|r| r.total_loss).collect();
    plot::loss_curve(&losses, &dir.join("loss_curve.png"))?;
    Ok(())
}

fn last_loss(log: &[trainer::RunRecord]) -> Option<f64> {
    log.last().map(|r| r.total_loss)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainVaeOpts {
    pub data: Vec<PathBuf>,
    pub out: PathBuf,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: Option<f64>,
    pub lengths: Vec<usize>,
    pub seed: u64,
    pub norm: NormScheme,
    pub plot: bool,
    pub sequential: bool,
    pub lambda: f64,
    pub beta_kl: f64,
    pub grid: usize,
    pub stride: usize,
    pub channels: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for TrainVaeOpts {
    fn default() -> Self {
        let t = TrainingConfig::for_phase(Phase::Vae);
        let v = VaeConfig::default();
        Self {
            data: Vec::new(),
            out: PathBuf::from("runs/vae"),
            iterations: t.iterations,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lengths: t.lengths,
            seed: t.seed,
            norm: t.norm,
            plot: false,
            sequential: false,
            lambda: t.lambda,
            beta_kl: t.beta_kl,
            grid: v.grid,
            stride: v.stride,
            channels: v.channels,
            min_len: v.min_len,
            max_len: v.max_len,
        }
    }
}

pub fn train_vae(flags: TrainVaeFlags) -> CliResult {
    let o: TrainVaeOpts = resolve(flags.cfg.config.as_deref(), &flags)?;
    let datasets = load_all(&o.data)?;
    let vae = LaVae::new(VaeConfig {
        grid: o.grid,
        stride: o.stride,
        channels: o.channels,
        min_len: o.min_len,
        max_len: o.max_len,
        init_seed: o.seed,
    })?;
    let cfg = TrainingConfig {
        phase: Phase::Vae,
        iterations: o.iterations,
        batch_size: o.batch_size,
        learning_rate: o.learning_rate,
        lambda: o.lambda,
        beta_kl: o.beta_kl,
        lengths: o.lengths.clone(),
        seed: o.seed,
        norm: o.norm,
        execution: execution(o.sequential),
        output_dir: Some(o.out.clone()),
        ..TrainingConfig::default()
    };
    write_manifest(&o.out, "train-vae", &o, o.seed)?;
    let res = trainer::train_vae(vae, &cfg, &datasets)?;
    if o.plot {
        plot_losses(&res.log, &o.out)?;
    }
    println!(
        "{}",
        json!({ "checkpoint": o.out, "updates": res.updates, "final_loss": last_loss(&res.log) })
    );
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainDitOpts {
    pub data: Vec<PathBuf>,
    pub out: PathBuf,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: Option<f64>,
    pub lengths: Vec<usize>,
    pub seed: u64,
    pub norm: NormScheme,
    pub plot: bool,
    pub sequential: bool,
    pub vae: PathBuf,
    pub p_drop: f64,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
    pub unfreeze_vae: bool,
    pub encoder: EncoderKind,
    pub dim: usize,
    pub embed_endpoint: Option<String>,
    pub embed_model: String,
    pub embed_cache: Option<PathBuf>,
}

impl Default for TrainDitOpts {
    fn default() -> Self {
        let t = TrainingConfig::for_phase(Phase::Diffusion);
        let d = DenoiserConfig::default();
        let e = EncoderOpts::default();
        Self {
            data: Vec::new(),
            out: PathBuf::from("runs/dit"),
            iterations: t.iterations,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lengths: t.lengths,
            seed: t.seed,
            norm: t.norm,
            plot: false,
            sequential: false,
            vae: PathBuf::from("runs/vae"),
            p_drop: t.p_drop,
            d_model: d.d_model,
            depth: d.depth,
            heads: d.heads,
            patch: d.patch,
            mlp_ratio: d.mlp_ratio,
            unfreeze_vae: false,
            encoder: e.encoder,
            dim: e.dim,
            embed_endpoint: e.embed_endpoint,
            embed_model: e.embed_model,
            embed_cache: e.embed_cache,
        }
    }
}

pub fn train_dit(flags: TrainDitFlags) -> CliResult {
    let o: TrainDitOpts = resolve(flags.cfg.config.as_deref(), &flags)?;
    let datasets = load_all(&o.data)?;
    let vae = LaVae::load(&o.vae)?;
    let spec = EncoderOpts {
        encoder: o.encoder,
        dim: o.dim,
        embed_endpoint: o.embed_endpoint.clone(),
        embed_model: o.embed_model.clone(),
        embed_cache: o.embed_cache.clone(),
    }
    .spec()?;
    let encoder = spec.build()?;
    let dit = Dit::new(DenoiserConfig {
        grid: vae.grid(),
        patch: o.patch,
        d_model: o.d_model,
        depth: o.depth,
        heads: o.heads,
        d_text: encoder.dim(),
        mlp_ratio: o.mlp_ratio,
        init_seed: o.seed,
        ..DenoiserConfig::default()
    })?;
    let cfg = TrainingConfig {
        phase: Phase::Diffusion,
        iterations: o.iterations,
        batch_size: o.batch_size,
        learning_rate: o.learning_rate,
        p_drop: o.p_drop,
        lengths: o.lengths.clone(),
        seed: o.seed,
        norm: o.norm,
        unfreeze_vae: o.unfreeze_vae,
        execution: execution(o.sequential),
        output_dir: Some(o.out.clone()),
        ..TrainingConfig::for_phase(Phase::Diffusion)
    };
    write_manifest(&o.out, "train-dit", &o, o.seed)?;
    let res = trainer::train_diffusion(dit, vae, encoder.as_ref(), &cfg, &datasets)?;
    if !o.unfreeze_vae {
        res.vae.save(&o.out.join("vae"), None)?;
    }
    std::fs::write(o.out.join(ENCODER_FILE), serde_json::to_vec_pretty(&spec)?)?;
    if o.plot {
        plot_losses(&res.log, &o.out)?;
    }
    println!(
        "{}",
        json!({ "checkpoint": o.out, "updates": res.updates, "final_loss": last_loss(&res.log) })
    );
    Ok(())
}

// inference

struct Models {
    vae: LaVae,
    dit: Dit,
    encoder: Box<dyn TextEncoder>,
}

fn load_models(dit_dir: &Path, vae_dir: Option<&Path>) -> CliResult<Models> {
    let dit = Dit::load(dit_dir)?;
    let default_vae = dit_dir.join("vae");
    let vae_dir = match vae_dir {
        Some(v) => v.to_path_buf(),
        None if default_vae.is_dir() => default_vae,
        None => return usage(format!("no VAE under {}; pass --vae", dit_dir.display())),
    };
    let vae = LaVae::load(&vae_dir)?;
    let spec_path = dit_dir.join(ENCODER_FILE);
    let spec: TextEncoderSpec = if spec_path.exists() {
        serde_json::from_slice(&std::fs::read(&spec_path)?)?
    } else {
        TextEncoderSpec::Offline {
            dim: dit.config().d_text,
        }
    };
    Ok(Models {
        vae,
        dit,
        encoder: spec.build()?,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateOpts {
    pub vae: Option<PathBuf>,
    pub dit: PathBuf,
    pub caption: Option<String>,
    pub length: usize,
    pub cfg_scale: f64,
    pub steps: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
}

impl Default for GenerateOpts {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            vae: None,
            dit: PathBuf::from("runs/dit"),
            caption: None,
            length: 96,
            cfg_scale: s.cfg_scale,
            steps: s.steps,
            seed: s.seed,
            out: None,
            run_dir: None,
        }
    }
}

pub fn generate(flags: GenerateFlags) -> CliResult {
    let o: GenerateOpts = resolve(flags.cfg.config.as_deref(), &flags)?;
    let Some(caption) = &o.caption else {
        return usage("--caption is required");
    };
    let m = load_models(&o.dit, o.vae.as_deref())?;
    let sampler = SamplerConfig {
        steps: o.steps,
        cfg_scale: o.cfg_scale,
        seed: o.seed,
    };
    let cond = m.encoder.encode(caption)?;
    let series = trainer::generate(&m.vae, &m.dit, &cond, o.length, &sampler)?;
    let result = json!({
        "caption": caption,
        "length": o.length,
        "cfg_scale": o.cfg_scale,
        "steps": o.steps,
        "seed": o.seed,
        "series": series,
    });
    println!("{result}");
    if let Some(out) = &o.out {
        std::fs::create_dir_all(parent_dir(out))?;
        std::fs::write(out, serde_json::to_vec_pretty(&result)?)?;
    }
    let run_dir = o.run_dir.clone().or_else(|| o.out.as_deref().map(parent_dir));
    if let Some(dir) = run_dir {
        write_manifest(&dir, "generate", &o, o.seed)?;
    }
    Ok(())
}

/// First `limit` samples of every length of every dataset.
fn limit_per_length(datasets: Vec<Dataset>, limit: Option<usize>) -> CliResult<Vec<Dataset>> {
    let Some(limit) = limit else {
        return Ok(datasets);
    };
    if limit == 0 {
        return usage("--limit must be at least 1");
    }
    let mut out = Vec::with_capacity(datasets.len());
    for d in datasets {
        let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
        let samples = d
            .samples()
            .iter()
            .filter(|s| {
                let c = seen.entry(s.len()).or_insert(0);
                *c += 1;
                *c <= limit
            })
            .cloned()
            .collect();
        out.push(Dataset::new(d.name.clone(), samples)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateOpts {
    pub vae: Option<PathBuf>,
    pub dit: PathBuf,
    pub data: Vec<PathBuf>,
    pub seed: u64,
    pub threshold: f64,
    pub candidates: usize,
    pub limit: Option<usize>,
    pub norm: NormScheme,
    pub out: PathBuf,
    pub sequential: bool,
    pub cfg_scale: f64,
    pub steps: usize,
}

impl Default for EvaluateOpts {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            vae: None,
            dit: PathBuf::from("runs/dit"),
            data: Vec::new(),
            seed: e.sampler.seed,
            threshold: e.threshold,
            candidates: e.candidates,
            limit: None,
            norm: e.norm,
            out: PathBuf::from("runs/eval"),
            sequential: false,
            cfg_scale: e.sampler.cfg_scale,
            steps: e.sampler.steps,
        }
    }
}

pub fn evaluate(flags: EvaluateFlags) -> CliResult {
    let o: EvaluateOpts = resolve(flags.cfg.config.as_deref(), &flags)?;
    let datasets = limit_per_length(load_all(&o.data)?, o.limit)?;
    let m = load_models(&o.dit, o.vae.as_deref())?;
    let cfg = EvalConfig {
        sampler: SamplerConfig {
            steps: o.steps,
            cfg_scale: o.cfg_scale,
            seed: o.seed,
        },
        candidates: o.candidates,
        threshold: o.threshold,
        norm: o.norm,
    };
    write_manifest(&o.out, "evaluate", &o, o.seed)?;
    let generator = ModelGenerator::new(&m.vae, &m.dit, m.encoder.as_ref(), execution(o.sequential));
    let report = run_eval(&generator, &datasets, &cfg)?;
    let path = o.out.join("eval_report.json");
    report.write_json(&path)?;
    println!("{}", json!({ "report": path, "overall": report.overall }));
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepOpts {
    pub vae: Option<PathBuf>,
    pub dit: PathBuf,
    pub data: Vec<PathBuf>,
    pub seed: u64,
    pub threshold: f64,
    pub candidates: usize,
    pub limit: Option<usize>,
    pub norm: NormScheme,
    pub out: PathBuf,
    pub sequential: bool,
    pub cfg_scale: Vec<f64>,
    pub steps: Vec<usize>,
    pub metric: Metric,
}

impl Default for SweepOpts {
    fn default() -> Self {
        let e = EvaluateOpts::default();
        Self {
            vae: None,
            dit: e.dit,
            data: Vec::new(),
            seed: e.seed,
            threshold: e.threshold,
            candidates: e.candidates,
            limit: None,
            norm: e.norm,
            out: PathBuf::from("runs/sweep"),
            sequential: false,
            cfg_scale: vec![1.0, 4.0, 7.0, 10.0, 13.0],
            steps: vec![10, 20, 50],
            metric: Metric::Wape,
        }
    }
}

pub fn sweep(flags: SweepFlags) -> CliResult {
    let o: SweepOpts = resolve(flags.cfg.config.as_deref(), &flags)?;
    if o.cfg_scale.is_empty() || o.steps.is_empty() {
        return usage("--cfg and --steps need at least one value each");
    }
    let datasets = limit_per_length(load_all(&o.data)?, o.limit)?;
    let m = load_models(&o.dit, o.vae.as_deref())?;
    let base = EvalConfig {
        sampler: SamplerConfig {
            seed: o.seed,
            ..SamplerConfig::default()
        },
        candidates: o.candidates,
        threshold: o.threshold,
        norm: o.norm,
    };
    write_manifest(&o.out, "sweep", &o, o.seed)?;
    let generator = ModelGenerator::new(&m.vae, &m.dit, m.encoder.as_ref(), execution(o.sequential));
    let report = run_sweep(&generator, &datasets, &base, &o.cfg_scale, &o.steps)?;
    let csv = o.out.join("sweep.csv");
    let json_path = o.out.join("sweep.json");
    let png = o.out.join("sweep_heatmap.png");
    report.write_csv(&csv)?;
    std::fs::write(&json_path, serde_json::to_vec_pretty(&report)?)?;
    plot::heatmap(&report.matrix(o.metric), &png)?;
    let cells: Vec<Value> = report
        .cells
        .iter()
        .flatten()
        .map(|r| json!({ "cfg_scale": r.settings.cfg_scale, "steps": r.settings.steps, "overall": r.overall }))
        .collect();
    println!("{}", json!({ "csv": csv, "json": json_path, "heatmap": png, "cells": cells }));
    Ok(())
}
