//! Length-adaptive VAE.
//!
//! A series of length `L` is encoded to `ceil(L / stride)` latent tokens of
//! width `grid`, linearly resampled to a fixed `grid × grid` latent image and
//! back, and decoded to exactly `L` points.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autograd::{ParamStore, Slot, Tape, Var};
use crate::checkpoint;
use crate::error::{arg, config, Result};
use crate::nn::{Conv1d, Linear};
use crate::tensor::Matrix;

pub const CHECKPOINT_KIND: &str = "la_vae";

/// Fixed-size single-channel latent image `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid(Matrix);

impl LatentGrid {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() != m.cols() || m.is_empty() {
            return arg(format!("latent grid must be square, got {:?}", m.shape()));
        }
        Ok(Self(m))
    }

    pub fn zeros(size: usize) -> Self {
        Self(Matrix::zeros(size, size))
    }

    pub fn filled(size: usize, v: f64) -> Self {
        Self(Matrix::filled(size, size, v))
    }

    /// Standard-normal noise from a seeded stream.
    pub fn noise(size: usize, rng: &mut impl Rng) -> Self {
        Self(Matrix::from_fn(size, size, |_, _| StandardNormal.sample(rng)))
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }
}

/// Token-level latent `h`, `tokens × d_latent`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence(pub Matrix);

impl LatentSequence {
    pub fn tokens(&self) -> usize {
        self.0.rows()
    }

    pub fn width(&self) -> usize {
        self.0.cols()
    }
}

/// Diagonal Gaussian posterior over `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct VaePosterior {
    pub mean: Matrix,
    pub logvar: Matrix,
}

impl VaePosterior {
    /// Standard-normal prior of the given shape (mean 0, log-variance 0).
    pub fn prior(tokens: usize, width: usize) -> Self {
        Self {
            mean: Matrix::zeros(tokens, width),
            logvar: Matrix::zeros(tokens, width),
        }
    }
}

/// Linear-interpolation matrix (`out × in`) with aligned end points.
pub fn interp_matrix(out_n: usize, in_n: usize) -> Matrix {
    assert!(out_n > 0 && in_n > 0);
    let mut w = Matrix::zeros(out_n, in_n);
    if in_n == 1 {
        for r in 0..out_n {
            w.set(r, 0, 1.0);
        }
        return w;
    }
    for r in 0..out_n {
        let pos = if out_n == 1 {
            0.0
        } else {
            r as f64 * (in_n - 1) as f64 / (out_n - 1) as f64
        };
        let lo = (pos.floor() as usize).min(in_n - 1);
        let frac = pos - lo as f64;
        if lo + 1 < in_n && frac > 0.0 {
            w.set(r, lo, 1.0 - frac);
            w.set(r, lo + 1, frac);
        } else {
            w.set(r, lo, 1.0);
        }
    }
    w
}

/// Resample `h` along the token axis to `grid` rows.
pub fn upsample(h: &LatentSequence, grid: usize) -> Result<LatentGrid> {
    if h.width() != grid {
        return config(format!(
            "latent width {} must equal the grid size {grid}",
            h.width()
        ));
    }
    if h.tokens() == 0 {
        return arg("latent sequence has no tokens");
    }
    LatentGrid::new(interp_matrix(grid, h.tokens()).matmul(&h.0))
}

/// Resample the grid rows back to `target_tokens`.
pub fn downsample(z: &LatentGrid, target_tokens: usize) -> Result<LatentSequence> {
    if target_tokens == 0 {
        return arg("target token count must be at least 1");
    }
    Ok(LatentSequence(
        interp_matrix(target_tokens, z.size()).matmul(z.matrix()),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    /// Latent grid side `G`; also the latent token width.
    pub grid: usize,
    pub stride: usize,
    pub channels: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub init_seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            grid: 16,
            stride: 4,
            channels: 32,
            min_len: 8,
            max_len: 128,
            init_seed: 0,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.stride == 0 || self.channels == 0 {
            return config("VAE grid, stride and channels must be positive");
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return config(format!(
                "invalid VAE length range [{}, {}]",
                self.min_len, self.max_len
            ));
        }
        Ok(())
    }

    pub fn tokens_for(&self, len: usize) -> usize {
        len.div_ceil(self.stride)
    }

    pub fn check_len(&self, len: usize) -> Result<()> {
        if len < self.min_len || len > self.max_len {
            return arg(format!(
                "length {len} outside the supported range [{}, {}]",
                self.min_len, self.max_len
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodeMode {
    /// Reparameterised sample `h = μ + σ·ε`.
    Train,
    /// Posterior mean.
    Eval,
}

/// Individual terms of the reconstruction objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VaeLossTerms {
    pub reconstruction: f64,
    pub consistency: f64,
    pub kl: f64,
    pub total: f64,
}

/// `MSE(x, x̂) + λ·MSE(h, ĥ) + β·KL(q ‖ N(0, I))`, the KL averaged per latent element.
pub fn vae_loss(
    x: &[f64],
    x_hat: &[f64],
    h: &LatentSequence,
    h_hat: &LatentSequence,
    posterior: &VaePosterior,
    lambda: f64,
    beta_kl: f64,
) -> Result<VaeLossTerms> {
    if x.len() != x_hat.len() || h.0.shape() != h_hat.0.shape() {
        return arg("vae_loss shape mismatch");
    }
    if posterior.mean.shape() != posterior.logvar.shape() {
        return arg("posterior mean and log-variance shapes differ");
    }
    let mse = |a: &[f64], b: &[f64]| {
        if a.is_empty() {
            0.0
        } else {
            a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / a.len() as f64
        }
    };
    let reconstruction = mse(x, x_hat);
    let consistency = mse(h.0.as_slice(), h_hat.0.as_slice());
    let kl = kl_mean(&posterior.mean, &posterior.logvar);
    Ok(VaeLossTerms {
        reconstruction,
        consistency,
        kl,
        total: reconstruction + lambda * consistency + beta_kl * kl,
    })
}

fn kl_mean(mean: &Matrix, logvar: &Matrix) -> f64 {
    if mean.is_empty() {
        return 0.0;
    }
    mean.as_slice()
        .iter()
        .zip(logvar.as_slice())
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum::<f64>()
        / mean.len() as f64
}

/// Tape nodes for the three loss terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct VaeLossVars {
    pub reconstruction: Var,
    pub consistency: Var,
    pub kl: Var,
    pub total: Var,
}

impl VaeLossVars {
    pub fn values(&self, tape: &Tape) -> VaeLossTerms {
        VaeLossTerms {
            reconstruction: tape.scalar(self.reconstruction),
            consistency: tape.scalar(self.consistency),
            kl: tape.scalar(self.kl),
            total: tape.scalar(self.total),
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn vae_loss_tape(
    tape: &mut Tape,
    x: Var,
    x_hat: Var,
    h: Var,
    h_hat: Var,
    mean: Var,
    logvar: Var,
    lambda: f64,
    beta_kl: f64,
) -> VaeLossVars {
    let reconstruction = tape.mse(x, x_hat);
    let consistency = tape.mse(h, h_hat);
    // 0.5·(μ² + e^lv − 1 − lv)
    let m2 = tape.square(mean);
    let e = tape.exp(logvar);
    let s = tape.add(m2, e);
    let s = tape.sub(s, logvar);
    let s = tape.add_scalar(s, -1.0);
    let s = tape.mean(s);
    let kl = tape.scale(s, 0.5);
    let c = tape.scale(consistency, lambda);
    let k = tape.scale(kl, beta_kl);
    let total = tape.add(reconstruction, c);
    let total = tape.add(total, k);
    VaeLossVars {
        reconstruction,
        consistency,
        kl,
        total,
    }
}

#[derive(Clone, Debug)]
struct Layers {
    enc_in: Conv1d,
    enc_mid: Conv1d,
    enc_down: Linear,
    enc_tok: Conv1d,
    enc_head: Linear,
    dec_in: Linear,
    dec_tok: Conv1d,
    dec_up: Linear,
    dec_mid: Conv1d,
    dec_out: Conv1d,
}

/// The length-adaptive VAE with its parameters.
#[derive(Clone, Debug)]
pub struct LaVae {
    config: VaeConfig,
    pub params: ParamStore,
    layers: Layers,
}

/// Forward values of one same-length group, as tape nodes.
pub struct VaeForward {
    pub x: Var,
    pub mean: Var,
    pub logvar: Var,
    pub h: Var,
    pub h_hat: Var,
    pub x_hat: Var,
}

impl LaVae {
    pub fn new(config: VaeConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut p = ParamStore::new();
        let (c, s, d) = (config.channels, config.stride, config.grid);
        let layers = Layers {
            enc_in: Conv1d::new(&mut p, "enc.in", 1, c, 5, &mut rng),
            enc_mid: Conv1d::new(&mut p, "enc.mid", c, c, 5, &mut rng),
            enc_down: Linear::new(&mut p, "enc.down", s * c, c, true, &mut rng),
            enc_tok: Conv1d::new(&mut p, "enc.tok", c, c, 3, &mut rng),
            enc_head: Linear::new(&mut p, "enc.head", c, 2 * d, true, &mut rng),
            dec_in: Linear::new(&mut p, "dec.in", d, c, true, &mut rng),
            dec_tok: Conv1d::new(&mut p, "dec.tok", c, c, 3, &mut rng),
            dec_up: Linear::new(&mut p, "dec.up", c, s * c, true, &mut rng),
            dec_mid: Conv1d::new(&mut p, "dec.mid", c, c, 5, &mut rng),
            dec_out: Conv1d::new(&mut p, "dec.out", c, 1, 5, &mut rng),
        };
        Ok(Self {
            config,
            params: p,
            layers,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn grid(&self) -> usize {
        self.config.grid
    }

    /// Encoder nodes for a group of equal-length series (each of length `len`).
    pub fn encoder_tape(&self, tape: &mut Tape, slot: Slot, series: &[&[f64]]) -> (Var, Var) {
        let len = series[0].len();
        let s = self.config.stride;
        let tokens = self.config.tokens_for(len);
        let padded = tokens * s;
        let mut data = Vec::with_capacity(series.len() * padded);
        for x in series {
            debug_assert_eq!(x.len(), len);
            data.extend_from_slice(x);
            let last = *x.last().unwrap();
            data.extend(std::iter::repeat_n(last, padded - len));
        }
        let b = series.len();
        let c = self.config.channels;
        let l = &self.layers;
        let x0 = tape.constant(Matrix::from_vec(b * padded, 1, data));
        let y = l.enc_in.forward(tape, slot, x0, padded);
        let y = tape.silu(y);
        let y = l.enc_mid.forward(tape, slot, y, padded);
        let y = tape.silu(y);
        let y = tape.reshape(y, b * tokens, s * c);
        let y = l.enc_down.forward(tape, slot, y);
        let y = tape.silu(y);
        let y = l.enc_tok.forward(tape, slot, y, tokens);
        let y = tape.silu(y);
        let head = l.enc_head.forward(tape, slot, y);
        let d = self.config.grid;
        let mean = tape.slice_cols(head, 0, d);
        let logvar = tape.slice_cols(head, d, d);
        (mean, logvar)
    }

    /// Decoder nodes: `h` is `(batch·tokens) × grid`; output is `(batch·len) × 1`.
    pub fn decoder_tape(&self, tape: &mut Tape, slot: Slot, h: Var, len: usize) -> Var {
        let s = self.config.stride;
        let c = self.config.channels;
        let tokens = self.config.tokens_for(len);
        let padded = tokens * s;
        let b = tape.shape(h).0 / tokens;
        let l = &self.layers;
        let y = l.dec_in.forward(tape, slot, h);
        let y = tape.silu(y);
        let y = l.dec_tok.forward(tape, slot, y, tokens);
        let y = tape.silu(y);
        let y = l.dec_up.forward(tape, slot, y);
        let y = tape.silu(y);
        let y = tape.reshape(y, b * padded, c);
        let y = l.dec_mid.forward(tape, slot, y, padded);
        let y = tape.silu(y);
        let y = if padded != len {
            let mut src = Vec::with_capacity(b * len * c);
            for bi in 0..b {
                let base = bi * padded * c;
                src.extend((base..base + len * c).map(|i| i as u32));
            }
            tape.gather(y, Arc::new(src), b * len, c)
        } else {
            y
        };
        l.dec_out.forward(tape, slot, y, len)
    }

    /// Full reconstruction graph for one same-length group, with `ĥ = down(up(h))`.
    pub fn forward_group(
        &self,
        tape: &mut Tape,
        slot: Slot,
        series: &[&[f64]],
        mode: EncodeMode,
        rng: &mut impl Rng,
    ) -> VaeForward {
        let len = series[0].len();
        let b = series.len();
        let tokens = self.config.tokens_for(len);
        let (mean, logvar) = self.encoder_tape(tape, slot, series);
        let h = match mode {
            EncodeMode::Eval => mean,
            EncodeMode::Train => {
                let d = self.config.grid;
                let eps = Matrix::from_fn(b * tokens, d, |_, _| StandardNormal.sample(rng));
                let eps = tape.constant(eps);
                let half = tape.scale(logvar, 0.5);
                let std = tape.exp(half);
                let noise = tape.mul(std, eps);
                tape.add(mean, noise)
            }
        };
        let h_hat = self.resample_tape(tape, h, tokens);
        let x_hat = self.decoder_tape(tape, slot, h_hat, len);
        let x = tape.constant(Matrix::from_vec(
            b * len,
            1,
            series.iter().flat_map(|s| s.iter().copied()).collect(),
        ));
        VaeForward {
            x,
            mean,
            logvar,
            h,
            h_hat,
            x_hat,
        }
    }

    /// `down(up(h))` on the tape for `(batch·tokens) × grid` input.
    pub fn resample_tape(&self, tape: &mut Tape, h: Var, tokens: usize) -> Var {
        let g = self.config.grid;
        let up = Arc::new(interp_matrix(g, tokens));
        let down = Arc::new(interp_matrix(tokens, g));
        let z = tape.block_map(h, up);
        tape.block_map(z, down)
    }

    pub fn encode_batch(
        &self,
        series: &[&[f64]],
        mode: EncodeMode,
        rng: &mut impl Rng,
    ) -> Result<Vec<(LatentSequence, VaePosterior)>> {
        let Some(first) = series.first() else {
            return Ok(Vec::new());
        };
        let len = first.len();
        self.config.check_len(len)?;
        if series.iter().any(|s| s.len() != len) {
            return arg("encode_batch needs equal-length series");
        }
        let tokens = self.config.tokens_for(len);
        let d = self.config.grid;
        let mut tape = Tape::new();
        let slot = tape.bind_frozen(&self.params);
        let (mean, logvar) = self.encoder_tape(&mut tape, slot, series);
        let (mean, logvar) = (tape.value(mean), tape.value(logvar));
        let mut out = Vec::with_capacity(series.len());
        for b in 0..series.len() {
            let rows = |m: &Matrix| {
                Matrix::from_vec(
                    tokens,
                    d,
                    m.as_slice()[b * tokens * d..(b + 1) * tokens * d].to_vec(),
                )
            };
            let post = VaePosterior {
                mean: rows(mean),
                logvar: rows(logvar),
            };
            let h = match mode {
                EncodeMode::Eval => post.mean.clone(),
                EncodeMode::Train => {
                    let mut h = post.mean.clone();
                    for (v, lv) in h.as_mut_slice().iter_mut().zip(post.logvar.as_slice()) {
                        let e: f64 = StandardNormal.sample(rng);
                        *v += (0.5 * lv).exp() * e;
                    }
                    h
                }
            };
            out.push((LatentSequence(h), post));
        }
        Ok(out)
    }

    pub fn vae_encode(
        &self,
        series: &[f64],
        mode: EncodeMode,
        rng: &mut impl Rng,
    ) -> Result<(LatentSequence, VaePosterior)> {
        Ok(self.encode_batch(&[series], mode, rng)?.remove(0))
    }

    /// Decode each latent sequence to `target_len` points.
    pub fn decode_batch(&self, hs: &[LatentSequence], target_len: usize) -> Result<Vec<Vec<f64>>> {
        self.config.check_len(target_len)?;
        if hs.is_empty() {
            return Ok(Vec::new());
        }
        let tokens = self.config.tokens_for(target_len);
        let d = self.config.grid;
        for h in hs {
            if h.tokens() != tokens || h.width() != d {
                return arg(format!(
                    "latent {}x{} cannot be decoded to length {target_len} (needs {tokens}x{d})",
                    h.tokens(),
                    h.width()
                ));
            }
        }
        let data: Vec<f64> = hs.iter().flat_map(|h| h.0.as_slice().iter().copied()).collect();
        let mut tape = Tape::new();
        let slot = tape.bind_frozen(&self.params);
        let hv = tape.constant(Matrix::from_vec(hs.len() * tokens, d, data));
        let out = self.decoder_tape(&mut tape, slot, hv, target_len);
        let flat = tape.value(out).as_slice();
        Ok(flat.chunks(target_len).map(<[f64]>::to_vec).collect())
    }

    pub fn vae_decode(&self, h: &LatentSequence, target_len: usize) -> Result<Vec<f64>> {
        Ok(self.decode_batch(std::slice::from_ref(h), target_len)?.remove(0))
    }

    /// Latent grid `z = up(μ)` used as the diffusion target.
    pub fn latent_grid(&self, series: &[f64]) -> Result<LatentGrid> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (h, _) = self.vae_encode(series, EncodeMode::Eval, &mut rng)?;
        upsample(&h, self.config.grid)
    }

    /// Decode a latent grid to a series of `len` points.
    pub fn decode_grid(&self, z: &LatentGrid, len: usize) -> Result<Vec<f64>> {
        self.decode_grids(std::slice::from_ref(z), len).map(|mut v| v.remove(0))
    }

    pub fn decode_grids(&self, zs: &[LatentGrid], len: usize) -> Result<Vec<Vec<f64>>> {
        self.config.check_len(len)?;
        let tokens = self.config.tokens_for(len);
        let hs = zs
            .iter()
            .map(|z| downsample(z, tokens))
            .collect::<Result<Vec<_>>>()?;
        self.decode_batch(&hs, len)
    }

    /// Eval-mode round trip through the fixed grid: `dec(down(up(μ(x))))`.
    pub fn reconstruct(&self, series: &[f64]) -> Result<Vec<f64>> {
        let z = self.latent_grid(series)?;
        self.decode_grid(&z, series.len())
    }

    pub fn save(&self, dir: &Path, training: Option<Value>) -> Result<()> {
        checkpoint::save(dir, CHECKPOINT_KIND, &self.config, training, &self.params)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = checkpoint::read_manifest(dir, CHECKPOINT_KIND)?;
        let config: VaeConfig = serde_json::from_value(manifest.model_config.clone())?;
        let mut vae = LaVae::new(config)?;
        checkpoint::load_weights(dir, &manifest, &mut vae.params)?;
        Ok(vae)
    }
}
