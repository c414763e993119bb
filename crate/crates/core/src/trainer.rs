//! Interleaved mixed-length training for both phases, plus generation.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, ParamGrads, Tape};
use crate::dataset::{mixed_batch_locations, normalize, Dataset, DatasetSampler, NormScheme};
use crate::dit::{self, Dit};
use crate::error::{config, Error, Result};
use crate::flow::{ode_sample_batch, sample_training_time, initial_noise, SamplerConfig};
use crate::par::{self, stream_seed, Execution};
use crate::tensor::Matrix;
use crate::text::{null_condition, ConditionEmbedding, TextEncoder};
use crate::vae::{interp_matrix, vae_loss_tape, EncodeMode, LaVae, LatentGrid, VaeLossTerms};

pub const RUN_LOG_FILE: &str = "run_log.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Vae,
    Diffusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub phase: Phase,
    pub iterations: usize,
    pub batch_size: usize,
    /// Defaults to 1e-3 for the VAE phase and 3e-4 for diffusion.
    pub learning_rate: Option<f64>,
    pub lambda: f64,
    pub beta_kl: f64,
    pub p_drop: f64,
    pub lengths: Vec<usize>,
    pub seed: u64,
    pub norm: NormScheme,
    pub clip_norm: Option<f64>,
    /// Also update the VAE while training the denoiser.
    pub unfreeze_vae: bool,
    pub execution: Execution,
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Vae,
            iterations: 2000,
            batch_size: 32,
            learning_rate: None,
            lambda: 0.1,
            beta_kl: 1e-4,
            p_drop: 0.1,
            lengths: vec![24, 48, 96],
            seed: 0,
            norm: NormScheme::Minmax,
            clip_norm: Some(1.0),
            unfreeze_vae: false,
            execution: Execution::Parallel,
            output_dir: None,
        }
    }
}

impl TrainingConfig {
    pub fn for_phase(phase: Phase) -> Self {
        Self {
            phase,
            iterations: match phase {
                Phase::Vae => 2000,
                Phase::Diffusion => 5000,
            },
            ..Self::default()
        }
    }

    pub fn lr(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.phase {
            Phase::Vae => 1e-3,
            Phase::Diffusion => 3e-4,
        })
    }

    pub fn validate(&self, min_len: usize, max_len: usize) -> Result<()> {
        if self.iterations == 0 {
            return config("iterations must be at least 1");
        }
        if self.batch_size == 0 {
            return config("batch_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return config(format!("p_drop {} outside [0, 1]", self.p_drop));
        }
        if self.lengths.is_empty() {
            return config("at least one training length is required");
        }
        if let Some(l) = self.lengths.iter().find(|&&l| l < min_len || l > max_len) {
            return config(format!("length {l} outside the model range [{min_len}, {max_len}]"));
        }
        if !(self.lr() > 0.0) {
            return config("learning rate must be positive");
        }
        Ok(())
    }
}

/// Loss of one length group in one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub length: usize,
    pub count: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vae: Option<VaeLossTerms>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub iteration: usize,
    pub phase: Phase,
    pub groups: Vec<GroupRecord>,
    pub total_loss: f64,
    pub grad_norm: f64,
    /// Optimizer updates applied after this iteration.
    pub updates: u64,
    pub wall_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diverged: Option<String>,
}

/// Append-only per-iteration log, mirrored to JSONL when a path is set.
#[derive(Debug, Default)]
pub struct RunLog {
    records: Vec<RunRecord>,
    sink: Option<fs::File>,
}

impl RunLog {
    pub fn new(path: Option<&Path>) -> Result<Self> {
        let sink = match path {
            Some(p) => {
                if let Some(d) = p.parent() {
                    fs::create_dir_all(d)?;
                }
                Some(fs::File::create(p)?)
            }
            None => None,
        };
        Ok(Self {
            records: Vec::new(),
            sink,
        })
    }

    pub fn push(&mut self, rec: RunRecord) -> Result<()> {
        if let Some(f) = self.sink.as_mut() {
            use std::io::Write;
            serde_json::to_writer(&mut *f, &rec)?;
            f.write_all(b"\n")?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<RunRecord> {
        self.records
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.total_loss).collect()
    }

    pub fn load(path: &Path) -> Result<Vec<RunRecord>> {
        fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }
}

/// Null condition with probability `p_drop`, otherwise `c` unchanged.
pub fn condition_dropout(c: &ConditionEmbedding, p_drop: f64, rng: &mut impl Rng) -> ConditionEmbedding {
    if p_drop > 0.0 && rng.random::<f64>() < p_drop {
        null_condition(c.dim())
    } else {
        c.clone()
    }
}

pub struct TrainOutcome<M> {
    pub model: M,
    pub log: Vec<RunRecord>,
    pub updates: u64,
}

/// Normalised training views of the input datasets, one per (dataset, length).
fn prepare(datasets: &[Dataset], cfg: &TrainingConfig) -> Result<Vec<Dataset>> {
    if datasets.is_empty() {
        return Err(Error::EmptyDataset("no training datasets given".into()));
    }
    let mut out = Vec::new();
    for d in datasets {
        for part in d.split_by_length() {
            let len = part.samples()[0].len();
            if !cfg.lengths.contains(&len) {
                continue;
            }
            let samples = part
                .samples()
                .iter()
                .map(|s| {
                    let mut s = s.clone();
                    s.series = normalize(&s.series, cfg.norm).0;
                    s
                })
                .collect();
            out.push(Dataset::new(part.name.clone(), samples)?);
        }
    }
    for &l in &cfg.lengths {
        if !out.iter().any(|d| d.samples()[0].len() == l) {
            return Err(Error::EmptyDataset(format!("no training samples of length {l}")));
        }
    }
    Ok(out)
}

fn log_path(cfg: &TrainingConfig) -> Option<PathBuf> {
    cfg.output_dir.as_ref().map(|d| d.join(RUN_LOG_FILE))
}

fn divergence(iteration: usize, log: &mut RunLog, rec: RunRecord, what: &str) -> Error {
    let message = format!("non-finite {what} at iteration {iteration}");
    let _ = log.push(RunRecord {
        diverged: Some(message.clone()),
        ..rec
    });
    Error::Numerical {
        step: iteration,
        message,
    }
}

/// LA-VAE pretraining under the interleaved loop.
pub fn train_vae(mut vae: LaVae, cfg: &TrainingConfig, datasets: &[Dataset]) -> Result<TrainOutcome<LaVae>> {
    let vc = vae.config().clone();
    cfg.validate(vc.min_len, vc.max_len)?;
    let data = prepare(datasets, cfg)?;
    let sampler = DatasetSampler::for_datasets(&data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&vae.params, cfg.lr());
    adam.clip_norm = cfg.clip_norm;
    let mut log = RunLog::new(log_path(cfg).as_deref())?;
    for it in 0..cfg.iterations {
        let start = Instant::now();
        let groups: Vec<(usize, Vec<&[f64]>)> = mixed_batch_locations(&data, &sampler, cfg.batch_size, &mut rng)
            .into_iter()
            .map(|(len, locs)| {
                let xs = locs
                    .iter()
                    .map(|l| data[l.dataset].samples()[l.element].series.as_slice())
                    .collect();
                (len, xs)
            })
            .collect();
        let model = &vae;
        let results = par::map(cfg.execution, &groups, |(len, xs)| {
            let mut grng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, it as u64, *len as u64));
            let mut tape = Tape::new();
            let slot = tape.bind(&model.params);
            let f = model.forward_group(&mut tape, slot, xs, EncodeMode::Train, &mut grng);
            let l = vae_loss_tape(&mut tape, f.x, f.x_hat, f.h, f.h_hat, f.mean, f.logvar, cfg.lambda, cfg.beta_kl);
            let terms = l.values(&tape);
            let grads = tape.backward(l.total).into_params(slot);
            (terms, grads)
        });
        let mut total = 0.0;
        let mut grads = ParamGrads::default();
        let mut records = Vec::with_capacity(groups.len());
        for ((len, xs), (terms, g)) in groups.iter().zip(results) {
            total += terms.total;
            grads = grads.add(g);
            records.push(GroupRecord {
                length: *len,
                count: xs.len(),
                loss: terms.total,
                vae: Some(terms),
            });
        }
        let grad_norm = grads.global_norm();
        let mut rec = RunRecord {
            iteration: it,
            phase: Phase::Vae,
            groups: records,
            total_loss: total,
            grad_norm,
            updates: adam.updates(),
            wall_ms: 0.0,
            diverged: None,
        };
        if !total.is_finite() || !grad_norm.is_finite() {
            return Err(divergence(it, &mut log, rec, "VAE loss"));
        }
        adam.step(&mut vae.params, &grads);
        rec.updates = adam.updates();
        rec.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        log.push(rec)?;
    }
    if let Some(dir) = &cfg.output_dir {
        vae.save(dir, Some(serde_json::to_value(cfg)?))?;
    }
    Ok(TrainOutcome {
        model: vae,
        updates: adam.updates(),
        log: log.into_records(),
    })
}

/// Per-sample targets for the diffusion phase.
struct DiffusionItem {
    series: Vec<f64>,
    z1: Matrix,
    cond: ConditionEmbedding,
}

fn embed_captions(encoder: &dyn TextEncoder, datasets: &[Dataset]) -> Result<HashMap<String, ConditionEmbedding>> {
    let mut unique: Vec<String> = datasets
        .iter()
        .flat_map(|d| d.samples().iter().map(|s| s.caption.clone()))
        .collect();
    unique.sort();
    unique.dedup();
    let embs = encoder.encode_batch(&unique)?;
    Ok(unique.into_iter().zip(embs).collect())
}

fn check_pair(vae: &LaVae, dit: &Dit, d_text: usize) -> Result<()> {
    if vae.grid() != dit.config().grid {
        return config(format!(
            "VAE grid {} does not match denoiser grid {}",
            vae.grid(),
            dit.config().grid
        ));
    }
    if d_text != dit.config().d_text {
        return config(format!(
            "text encoder dimension {d_text} does not match denoiser d_text {}",
            dit.config().d_text
        ));
    }
    Ok(())
}

/// Diffusion training with the caption embedding under condition dropout.
pub struct DiffusionOutcome {
    pub dit: Dit,
    pub vae: LaVae,
    pub log: Vec<RunRecord>,
    pub updates: u64,
}

pub fn train_diffusion(
    mut dit: Dit,
    mut vae: LaVae,
    encoder: &dyn TextEncoder,
    cfg: &TrainingConfig,
    datasets: &[Dataset],
) -> Result<DiffusionOutcome> {
    let vc = vae.config().clone();
    cfg.validate(vc.min_len, vc.max_len)?;
    check_pair(&vae, &dit, encoder.dim())?;
    let data = prepare(datasets, cfg)?;
    let sampler = DatasetSampler::for_datasets(&data)?;
    let embeddings = embed_captions(encoder, &data)?;
    let grid = vae.grid();
    let p = dit.config().patch;

    // latents of the frozen encoder, computed once per dataset view
    let items: Vec<Vec<DiffusionItem>> = {
        let model = &vae;
        par::map(cfg.execution, &data, |d| -> Result<Vec<DiffusionItem>> {
            let xs: Vec<&[f64]> = d.samples().iter().map(|s| s.series.as_slice()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let enc = model.encode_batch(&xs, EncodeMode::Eval, &mut rng)?;
            d.samples()
                .iter()
                .zip(enc)
                .map(|(s, (h, _))| {
                    let z = crate::vae::upsample(&h, grid)?;
                    Ok(DiffusionItem {
                        series: s.series.clone(),
                        z1: dit::patchify(z.matrix(), p)?,
                        cond: embeddings[&s.caption].clone(),
                    })
                })
                .collect()
        })
        .into_iter()
        .collect::<Result<_>>()?
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&dit.params, cfg.lr());
    adam.clip_norm = cfg.clip_norm;
    let mut vae_adam = Adam::new(&vae.params, match cfg.learning_rate {
        Some(lr) => lr,
        None => 1e-3,
    });
    vae_adam.clip_norm = cfg.clip_norm;
    let mut log = RunLog::new(log_path(cfg).as_deref())?;
    let n_tok = dit.config().num_patches();
    for it in 0..cfg.iterations {
        let start = Instant::now();
        let groups: Vec<(usize, Vec<&DiffusionItem>)> = mixed_batch_locations(&data, &sampler, cfg.batch_size, &mut rng)
            .into_iter()
            .map(|(len, locs)| (len, locs.iter().map(|l| &items[l.dataset][l.element]).collect()))
            .collect();
        let (model, frozen) = (&dit, &vae);
        let results = par::map(cfg.execution, &groups, |(len, group)| {
            let b = group.len();
            let mut grng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, it as u64, *len as u64));
            let ts: Vec<f64> = (0..b).map(|_| sample_training_time(&mut grng)).collect();
            let conds: Vec<ConditionEmbedding> = group
                .iter()
                .map(|item| condition_dropout(&item.cond, cfg.p_drop, &mut grng))
                .collect();
            let z0 = Matrix::from_fn(b * n_tok, p * p, |_, _| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut grng));
            let tcol = Matrix::from_fn(b * n_tok, p * p, |r, _| ts[r / n_tok]);
            let mut tape = Tape::new();
            let slot = tape.bind(&model.params);
            let vslot = if cfg.unfreeze_vae {
                tape.bind(&frozen.params)
            } else {
                tape.bind_frozen(&frozen.params)
            };
            let (z_t, target, vae_terms) = if cfg.unfreeze_vae {
                let xs: Vec<&[f64]> = group.iter().map(|i| i.series.as_slice()).collect();
                let tokens = frozen.config().tokens_for(*len);
                let (mean, _) = frozen.encoder_tape(&mut tape, vslot, &xs);
                let up = tape.block_map(mean, Arc::new(interp_matrix(grid, tokens)));
                let z1 = tape.gather(up, dit::patchify_map(b, grid, p), b * n_tok, p * p);
                let tc = tape.constant(tcol.clone());
                let a = tape.mul(z1, tc);
                let rest = tape.constant(z0.zip_map(&tcol, |z, t| (1.0 - t) * z));
                let z_t = tape.add(a, rest);
                let z0c = tape.constant(z0.clone());
                let target = tape.sub(z1, z0c);
                let f = frozen.forward_group(&mut tape, vslot, &xs, EncodeMode::Train, &mut grng);
                let l = vae_loss_tape(&mut tape, f.x, f.x_hat, f.h, f.h_hat, f.mean, f.logvar, cfg.lambda, cfg.beta_kl);
                (z_t, target, Some(l))
            } else {
                let z1 = stack(group.iter().map(|i| &i.z1), b * n_tok, p * p);
                let rest = z0.zip_map(&tcol, |z, t| (1.0 - t) * z);
                let z_t = z1.zip_map(&tcol, |a, t| t * a).zip_map(&rest, |a, r| a + r);
                let target = z1.zip_map(&z0, |a, z| a - z);
                (tape.constant(z_t), tape.constant(target), None)
            };
            let pred = model.forward_tape(&mut tape, slot, z_t, &ts, &conds);
            let fm = tape.mse(pred, target);
            let root = match vae_terms {
                Some(l) => tape.add(fm, l.total),
                None => fm,
            };
            let fm_value = tape.scalar(fm);
            let vterms = vae_terms.map(|l| l.values(&tape));
            let mut grads = tape.backward(root);
            let vgrads = cfg.unfreeze_vae.then(|| grads.take_params(vslot));
            let dgrads = grads.into_params(slot);
            (fm_value, vterms, dgrads, vgrads)
        });
        let mut total = 0.0;
        let mut grads = ParamGrads::default();
        let mut vgrads = ParamGrads::default();
        let mut records = Vec::with_capacity(groups.len());
        for ((len, group), (fm, vterms, g, vg)) in groups.iter().zip(results) {
            total += fm + vterms.map_or(0.0, |v| v.total);
            grads = grads.add(g);
            if let Some(vg) = vg {
                vgrads = vgrads.add(vg);
            }
            records.push(GroupRecord {
                length: *len,
                count: group.len(),
                loss: fm,
                vae: vterms,
            });
        }
        let grad_norm = grads.global_norm();
        let mut rec = RunRecord {
            iteration: it,
            phase: Phase::Diffusion,
            groups: records,
            total_loss: total,
            grad_norm,
            updates: adam.updates(),
            wall_ms: 0.0,
            diverged: None,
        };
        if !total.is_finite() || !grad_norm.is_finite() {
            return Err(divergence(it, &mut log, rec, "diffusion loss"));
        }
        adam.step(&mut dit.params, &grads);
        if cfg.unfreeze_vae {
            vae_adam.step(&mut vae.params, &vgrads);
        }
        rec.updates = adam.updates();
        rec.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        log.push(rec)?;
    }
    if let Some(dir) = &cfg.output_dir {
        dit.save(dir, Some(serde_json::to_value(cfg)?))?;
        if cfg.unfreeze_vae {
            vae.save(&dir.join("vae"), Some(serde_json::to_value(cfg)?))?;
        }
    }
    Ok(DiffusionOutcome {
        dit,
        vae,
        updates: adam.updates(),
        log: log.into_records(),
    })
}

fn stack<'a>(ms: impl Iterator<Item = &'a Matrix>, rows: usize, cols: usize) -> Matrix {
    let mut data = Vec::with_capacity(rows * cols);
    for m in ms {
        data.extend_from_slice(m.as_slice());
    }
    Matrix::from_vec(rows, cols, data)
}

/// One series to generate.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRequest {
    pub condition: ConditionEmbedding,
    pub length: usize,
    pub seed: u64,
}

/// Noise on the grid → guided ODE → resample to `ceil(length / s)` tokens → decode.
pub fn generate(
    vae: &LaVae,
    dit: &Dit,
    condition: &ConditionEmbedding,
    length: usize,
    sampler: &SamplerConfig,
) -> Result<Vec<f64>> {
    let req = GenerationRequest {
        condition: condition.clone(),
        length,
        seed: sampler.seed,
    };
    Ok(generate_batch(vae, dit, &[req], sampler, Execution::Sequential)?.remove(0))
}

/// Batched generation; each request uses its own seed, `sampler.seed` is ignored.
pub fn generate_batch(
    vae: &LaVae,
    dit: &Dit,
    requests: &[GenerationRequest],
    sampler: &SamplerConfig,
    exec: Execution,
) -> Result<Vec<Vec<f64>>> {
    sampler.validate()?;
    check_pair(vae, dit, requests.first().map_or(dit.config().d_text, |r| r.condition.dim()))?;
    for r in requests {
        vae.config().check_len(r.length)?;
        if r.condition.dim() != dit.config().d_text {
            return config("all conditions must share the denoiser text width");
        }
    }
    let chunk = requests.len().div_ceil(par::workers(exec) * 2).clamp(1, 32);
    let chunks: Vec<&[GenerationRequest]> = requests.chunks(chunk).collect();
    let out = par::map(exec, &chunks, |reqs| -> Result<Vec<Vec<f64>>> {
        let conds: Vec<ConditionEmbedding> = reqs.iter().map(|r| r.condition.clone()).collect();
        let z0: Vec<LatentGrid> = reqs.iter().map(|r| initial_noise(vae.grid(), r.seed)).collect();
        let z1 = ode_sample_batch(dit, &conds, sampler, z0)?;
        let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in reqs.iter().enumerate() {
            by_len.entry(r.length).or_default().push(i);
        }
        let mut series = vec![Vec::new(); reqs.len()];
        for (len, idx) in by_len {
            let zs: Vec<LatentGrid> = idx.iter().map(|&i| z1[i].clone()).collect();
            for (i, s) in idx.into_iter().zip(vae.decode_grids(&zs, len)?) {
                if s.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical {
                        step: sampler.steps,
                        message: "decoded series is not finite".into(),
                    });
                }
                series[i] = s;
            }
        }
        Ok(series)
    });
    let mut flat = Vec::with_capacity(requests.len());
    for r in out {
        flat.extend(r?);
    }
    Ok(flat)
}
