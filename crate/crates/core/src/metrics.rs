//! WAPE, MSE and MRR@10, the evaluation harness and the parameter sweep.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::dataset::{normalize, Dataset, NormScheme};
use crate::dit::Dit;
use crate::error::{arg, Error, Result};
use crate::flow::SamplerConfig;
use crate::par::Execution;
use crate::text::{cosine, ConditionEmbedding, TextEncoder};
use crate::trainer::{generate_batch, GenerationRequest};
use crate::vae::LaVae;

pub const CANDIDATES: usize = 10;
pub const DEFAULT_THRESHOLD: f64 = 0.9;

fn check_pairs(truth: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<()> {
    if truth.len() != generated.len() {
        return arg(format!(
            "{} truths paired with {} generated series",
            truth.len(),
            generated.len()
        ));
    }
    for (i, (y, g)) in truth.iter().zip(generated).enumerate() {
        if y.len() != g.len() {
            return arg(format!("pair {i}: lengths {} and {} differ", y.len(), g.len()));
        }
    }
    Ok(())
}

/// `Σ|y − ŷ| / Σ|y|` over every point of every pair.
pub fn wape(truth: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<f64> {
    check_pairs(truth, generated)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (y, g) in truth.iter().zip(generated) {
        for (a, b) in y.iter().zip(g) {
            num += (a - b).abs();
            den += a.abs();
        }
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric("WAPE with an all-zero truth set".into()));
    }
    Ok(num / den)
}

/// Mean squared error over every point of every pair.
pub fn mse(truth: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<f64> {
    check_pairs(truth, generated)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (y, g) in truth.iter().zip(generated) {
        for (a, b) in y.iter().zip(g) {
            sum += (a - b).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("MSE over zero points".into()));
    }
    Ok(sum / n as f64)
}

/// One-based rank of the first candidate whose cosine with `truth` exceeds `threshold`.
pub fn first_relevant_rank(candidates: &[Vec<f64>], truth: &[f64], threshold: f64) -> Option<usize> {
    candidates
        .iter()
        .position(|c| cosine(c, truth).is_some_and(|s| s > threshold))
        .map(|i| i + 1)
}

/// Mean reciprocal rank over truths, each with exactly ten candidates.
pub fn mrr_at_10(candidates: &[Vec<Vec<f64>>], truths: &[Vec<f64>], threshold: f64) -> Result<f64> {
    if candidates.len() != truths.len() {
        return arg("one candidate list per truth is required");
    }
    if truths.is_empty() {
        return Err(Error::UndefinedMetric("MRR@10 over zero truths".into()));
    }
    let mut sum = 0.0;
    for (i, (cands, y)) in candidates.iter().zip(truths).enumerate() {
        if cands.len() != CANDIDATES {
            return arg(format!("truth {i} has {} candidates, expected {CANDIDATES}", cands.len()));
        }
        if let Some(c) = cands.iter().find(|c| c.len() != y.len()) {
            return arg(format!("truth {i}: candidate length {} vs {}", c.len(), y.len()));
        }
        if let Some(r) = first_relevant_rank(cands, y, threshold) {
            sum += 1.0 / r as f64;
        }
    }
    Ok(sum / truths.len() as f64)
}

/// A series to produce during evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct GenTask {
    pub sample_index: usize,
    pub caption: String,
    pub length: usize,
    pub seed: u64,
}

/// Anything that turns captions into series (trained models, oracles, baselines).
pub trait SeriesGenerator: Sync {
    /// One result per task, in order; a failure affects only its own task.
    fn generate(&self, tasks: &[GenTask], sampler: &SamplerConfig) -> Vec<Result<Vec<f64>>>;
}

/// The trained VAE and denoiser behind a text encoder.
pub struct ModelGenerator<'a> {
    pub vae: &'a LaVae,
    pub dit: &'a Dit,
    pub encoder: &'a dyn TextEncoder,
    pub execution: Execution,
    cache: Mutex<HashMap<String, ConditionEmbedding>>,
}

impl<'a> ModelGenerator<'a> {
    pub fn new(vae: &'a LaVae, dit: &'a Dit, encoder: &'a dyn TextEncoder, execution: Execution) -> Self {
        Self {
            vae,
            dit,
            encoder,
            execution,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn embed(&self, captions: &[&str]) -> Result<Vec<ConditionEmbedding>> {
        let mut cache = self.cache.lock().expect("embedding cache poisoned");
        let mut missing: Vec<String> = captions
            .iter()
            .filter(|c| !cache.contains_key(**c))
            .map(|c| c.to_string())
            .collect();
        missing.sort();
        missing.dedup();
        if !missing.is_empty() {
            let e = self.encoder.encode_batch(&missing)?;
            cache.extend(missing.into_iter().zip(e));
        }
        Ok(captions.iter().map(|c| cache[*c].clone()).collect())
    }
}

impl SeriesGenerator for ModelGenerator<'_> {
    fn generate(&self, tasks: &[GenTask], sampler: &SamplerConfig) -> Vec<Result<Vec<f64>>> {
        let captions: Vec<&str> = tasks.iter().map(|t| t.caption.as_str()).collect();
        let conds = match self.embed(&captions) {
            Ok(c) => c,
            Err(e) => {
                let msg = e.to_string();
                return tasks.iter().map(|_| Err(Error::Argument(msg.clone()))).collect();
            }
        };
        let reqs: Vec<GenerationRequest> = tasks
            .iter()
            .zip(conds)
            .map(|(t, c)| GenerationRequest {
                condition: c,
                length: t.length,
                seed: t.seed,
            })
            .collect();
        match generate_batch(self.vae, self.dit, &reqs, sampler, self.execution) {
            Ok(v) => v.into_iter().map(Ok).collect(),
            // isolate the failing requests
            Err(_) => reqs
                .iter()
                .map(|r| generate_batch(self.vae, self.dit, std::slice::from_ref(r), sampler, Execution::Sequential).map(|mut v| v.remove(0)))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub sampler: SamplerConfig,
    pub candidates: usize,
    pub threshold: f64,
    pub norm: NormScheme,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            candidates: CANDIDATES,
            threshold: DEFAULT_THRESHOLD,
            norm: NormScheme::Minmax,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub cfg_scale: f64,
    pub steps: usize,
    pub seed: u64,
    pub candidates: usize,
    pub threshold: f64,
    pub norm: NormScheme,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub dataset: String,
    pub length: usize,
    pub samples: usize,
    pub failed: usize,
    pub wape: Option<f64>,
    pub mse: Option<f64>,
    pub mrr_at_10: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub settings: EvalSettings,
    pub groups: Vec<GroupReport>,
    /// Pooled over every evaluated sample of every group.
    pub overall: GroupReport,
    pub errors: Vec<String>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        if let Some(d) = path.parent() {
            std::fs::create_dir_all(d)?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        std::iter::once(&self.overall).chain(&self.groups).all(|g| {
            [g.wape, g.mse, g.mrr_at_10]
                .iter()
                .all(|m| m.is_some_and(f64::is_finite))
        })
    }
}

struct Pool {
    truths: Vec<Vec<f64>>,
    cands: Vec<Vec<Vec<f64>>>,
}

fn summarise(dataset: String, length: usize, samples: usize, failed: usize, pool: &Pool, threshold: f64) -> GroupReport {
    let flat_t: Vec<Vec<f64>> = pool
        .truths
        .iter()
        .zip(&pool.cands)
        .flat_map(|(t, c)| std::iter::repeat_n(t.clone(), c.len()))
        .collect();
    let flat_c: Vec<Vec<f64>> = pool.cands.iter().flatten().cloned().collect();
    let mrr = if pool.cands.iter().all(|c| c.len() == CANDIDATES) {
        mrr_at_10(&pool.cands, &pool.truths, threshold).ok()
    } else {
        // fewer than ten candidates: same arithmetic over what is available
        (!pool.truths.is_empty()).then(|| {
            pool.cands
                .iter()
                .zip(&pool.truths)
                .map(|(c, t)| first_relevant_rank(c, t, threshold).map_or(0.0, |r| 1.0 / r as f64))
                .sum::<f64>()
                / pool.truths.len() as f64
        })
    };
    GroupReport {
        dataset,
        length,
        samples,
        failed,
        wape: wape(&flat_t, &flat_c).ok(),
        mse: mse(&flat_t, &flat_c).ok(),
        mrr_at_10: mrr,
    }
}

/// Generate `candidates` series per caption and score them per (dataset, length).
///
/// Candidate `n` of sample `i` uses seed `sampler.seed + i·candidates + n`,
/// where `i` indexes the sample within its dataset.
pub fn evaluate(generator: &dyn SeriesGenerator, datasets: &[Dataset], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.sampler.validate()?;
    if cfg.candidates == 0 {
        return arg("at least one candidate per caption is required");
    }
    if datasets.is_empty() {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    let k = cfg.candidates;
    let mut groups = Vec::new();
    let mut errors = Vec::new();
    let mut all = Pool {
        truths: Vec::new(),
        cands: Vec::new(),
    };
    let (mut all_samples, mut all_failed) = (0, 0);
    for d in datasets {
        let mut by_len: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, s) in d.samples().iter().enumerate() {
            by_len.entry(s.len()).or_default().push(i);
        }
        for (len, idx) in by_len {
            let tasks: Vec<GenTask> = idx
                .iter()
                .flat_map(|&i| {
                    let caption = d.samples()[i].caption.clone();
                    (0..k).map(move |n| GenTask {
                        sample_index: i,
                        caption: caption.clone(),
                        length: len,
                        seed: cfg.sampler.seed + (i * k + n) as u64,
                    })
                })
                .collect();
            let results = generator.generate(&tasks, &cfg.sampler);
            if results.len() != tasks.len() {
                return arg("generator returned the wrong number of series");
            }
            let mut pool = Pool {
                truths: Vec::new(),
                cands: Vec::new(),
            };
            let mut failed = 0;
            for (j, &i) in idx.iter().enumerate() {
                let mut cands = Vec::with_capacity(k);
                let mut bad = None;
                for r in &results[j * k..(j + 1) * k] {
                    match r {
                        Ok(s) if s.len() == len => cands.push(s.clone()),
                        Ok(s) => bad = Some(format!("length {} instead of {len}", s.len())),
                        Err(e) => bad = Some(e.to_string()),
                    }
                }
                match bad {
                    Some(msg) => {
                        failed += 1;
                        errors.push(format!("{}[{i}]: {msg}", d.name));
                    }
                    None => {
                        pool.truths.push(normalize(&d.samples()[i].series, cfg.norm).0);
                        pool.cands.push(cands);
                    }
                }
            }
            groups.push(summarise(d.name.clone(), len, idx.len(), failed, &pool, cfg.threshold));
            all_samples += idx.len();
            all_failed += failed;
            all.truths.extend(pool.truths);
            all.cands.extend(pool.cands);
        }
    }
    let overall = summarise("all".into(), 0, all_samples, all_failed, &all, cfg.threshold);
    Ok(EvalReport {
        settings: EvalSettings {
            cfg_scale: cfg.sampler.cfg_scale,
            steps: cfg.sampler.steps,
            seed: cfg.sampler.seed,
            candidates: k,
            threshold: cfg.threshold,
            norm: cfg.norm,
        },
        groups,
        overall,
        errors,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cfg_grid: Vec<f64>,
    pub steps_grid: Vec<usize>,
    /// `cells[i][j]` evaluates `cfg_grid[i]` with `steps_grid[j]`.
    pub cells: Vec<Vec<EvalReport>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Wape,
    Mse,
    #[serde(alias = "mrr_at_10", alias = "mrr")]
    MrrAt10,
}

impl Metric {
    pub fn of(self, g: &GroupReport) -> Option<f64> {
        match self {
            Metric::Wape => g.wape,
            Metric::Mse => g.mse,
            Metric::MrrAt10 => g.mrr_at_10,
        }
    }
}

impl SweepReport {
    /// `cfg_grid.len() × steps_grid.len()` matrix of an overall metric (NaN when undefined).
    pub fn matrix(&self, metric: Metric) -> Vec<Vec<f64>> {
        self.cells
            .iter()
            .map(|row| row.iter().map(|r| metric.of(&r.overall).unwrap_or(f64::NAN)).collect())
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(d) = path.parent() {
            std::fs::create_dir_all(d)?;
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Argument(e.to_string()))?;
        let io = |e: csv::Error| Error::Argument(e.to_string());
        w.write_record(["cfg_scale", "steps", "threshold", "samples", "failed", "wape", "mse", "mrr_at_10"])
            .map_err(io)?;
        let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
        for row in &self.cells {
            for r in row {
                let o = &r.overall;
                w.write_record([
                    format!("{}", r.settings.cfg_scale),
                    r.settings.steps.to_string(),
                    format!("{}", r.settings.threshold),
                    o.samples.to_string(),
                    o.failed.to_string(),
                    fmt(o.wape),
                    fmt(o.mse),
                    fmt(o.mrr_at_10),
                ])
                .map_err(io)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Evaluate the full `cfg_grid × steps_grid` cross product.
pub fn sweep(
    generator: &dyn SeriesGenerator,
    datasets: &[Dataset],
    base: &EvalConfig,
    cfg_grid: &[f64],
    steps_grid: &[usize],
) -> Result<SweepReport> {
    if cfg_grid.is_empty() || steps_grid.is_empty() {
        return arg("sweep grids must be non-empty");
    }
    let mut cells = Vec::with_capacity(cfg_grid.len());
    for &cfg_scale in cfg_grid {
        let mut row = Vec::with_capacity(steps_grid.len());
        for &steps in steps_grid {
            let cfg = EvalConfig {
                sampler: SamplerConfig {
                    cfg_scale,
                    steps,
                    ..base.sampler.clone()
                },
                ..base.clone()
            };
            row.push(evaluate(generator, datasets, &cfg)?);
        }
        cells.push(row);
    }
    Ok(SweepReport {
        cfg_grid: cfg_grid.to_vec(),
        steps_grid: steps_grid.to_vec(),
        cells,
    })
}
