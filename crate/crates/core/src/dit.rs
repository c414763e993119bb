//! Patchified diffusion transformer predicting the flow velocity.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autograd::{ParamStore, Slot, Tape, Var};
use crate::checkpoint;
use crate::error::{arg, config, Error, Result};
use crate::flow::VelocityField;
use crate::nn::Linear;
use crate::tensor::Matrix;
use crate::text::ConditionEmbedding;
use crate::vae::LatentGrid;

pub const CHECKPOINT_KIND: &str = "dit";
const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub grid: usize,
    pub patch: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub d_text: usize,
    /// Width of the sinusoidal timestep features.
    pub time_freq_dim: usize,
    pub mlp_ratio: usize,
    pub init_seed: u64,
    /// Zero-initialise the modulation and output layers (identity blocks, zero output).
    pub zero_init: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            grid: 16,
            patch: 4,
            d_model: 128,
            depth: 4,
            heads: 4,
            d_text: 64,
            time_freq_dim: 64,
            mlp_ratio: 4,
            init_seed: 0,
            zero_init: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.grid == 0 || self.grid % self.patch != 0 {
            return config(format!(
                "grid {} is not divisible by patch size {}",
                self.grid, self.patch
            ));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.d_model % 4 != 0 {
            return config("d_model must be a multiple of 4 for the 2D positional table");
        }
        if self.depth == 0 || self.d_text == 0 || self.mlp_ratio == 0 {
            return config("depth, d_text and mlp_ratio must be positive");
        }
        if self.time_freq_dim == 0 || self.time_freq_dim % 2 != 0 {
            return config("time_freq_dim must be a positive even number");
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.grid / self.patch).pow(2)
    }
}

/// Row-major flattened `p × p` patches in raster order: `(G/p)² × p²`.
pub fn patchify(z: &Matrix, p: usize) -> Result<Matrix> {
    let g = z.rows();
    if z.cols() != g || p == 0 || g % p != 0 {
        return config(format!("grid {:?} is not divisible by patch size {p}", z.shape()));
    }
    let n = g / p;
    Ok(Matrix::from_fn(n * n, p * p, |tok, k| {
        let (pr, pc) = (tok / n, tok % n);
        let (r, c) = (k / p, k % p);
        z.get(pr * p + r, pc * p + c)
    }))
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Matrix, grid: usize, p: usize) -> Result<Matrix> {
    if p == 0 || grid % p != 0 || tokens.shape() != ((grid / p).pow(2), p * p) {
        return config(format!(
            "tokens {:?} do not tile a {grid}x{grid} grid with patch {p}",
            tokens.shape()
        ));
    }
    let n = grid / p;
    Ok(Matrix::from_fn(grid, grid, |r, c| {
        tokens.get((r / p) * n + c / p, (r % p) * p + c % p)
    }))
}

/// Fixed 2D sine-cosine table for a square patch grid: `num_patches × d_model`.
pub fn positional_embedding(num_patches: usize, d_model: usize) -> Result<Matrix> {
    let n = (num_patches as f64).sqrt().round() as usize;
    if n * n != num_patches {
        return arg(format!("{num_patches} patches do not form a square grid"));
    }
    if d_model % 4 != 0 {
        return arg("d_model must be a multiple of 4");
    }
    let quarter = d_model / 4;
    Ok(Matrix::from_fn(num_patches, d_model, |tok, j| {
        // first half encodes the patch row, second half the column
        let pos = if j < d_model / 2 { tok / n } else { tok % n } as f64;
        let k = j % (d_model / 2);
        let omega = 1.0 / 10000f64.powf((k % quarter) as f64 / quarter as f64);
        if k < quarter {
            (pos * omega).sin()
        } else {
            (pos * omega).cos()
        }
    }))
}

/// Sinusoidal features of a flow time in `[0, 1]`.
pub fn timestep_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let scaled = 1000.0 * t;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out.push((scaled * freq).cos());
    }
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out.push((scaled * freq).sin());
    }
    out
}

/// Modulation vectors of one block.
///
/// `gamma*` are stored as offsets: the applied scale is `1 + gamma`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockConditioning {
    pub beta1: Vec<f64>,
    pub gamma1: Vec<f64>,
    pub alpha1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub gamma2: Vec<f64>,
    pub alpha2: Vec<f64>,
}

impl BlockConditioning {
    pub fn neutral(d: usize) -> Self {
        Self {
            beta1: vec![0.0; d],
            gamma1: vec![0.0; d],
            alpha1: vec![1.0; d],
            beta2: vec![0.0; d],
            gamma2: vec![0.0; d],
            alpha2: vec![1.0; d],
        }
    }

    fn to_row(&self) -> Vec<f64> {
        [&self.beta1, &self.gamma1, &self.alpha1, &self.beta2, &self.gamma2, &self.alpha2]
            .iter()
            .flat_map(|v| v.iter().copied())
            .collect()
    }

    fn from_row(row: &[f64], d: usize) -> Self {
        let c = |i: usize| row[i * d..(i + 1) * d].to_vec();
        Self {
            beta1: c(0),
            gamma1: c(1),
            alpha1: c(2),
            beta2: c(3),
            gamma2: c(4),
            alpha2: c(5),
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    ada: Linear,
    qkv: Linear,
    proj: Linear,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct Layers {
    patch_embed: Linear,
    time1: Linear,
    time2: Linear,
    text1: Linear,
    text2: Linear,
    blocks: Vec<Block>,
    final_ada: Linear,
    head: Linear,
}

#[derive(Clone, Debug)]
pub struct Dit {
    config: DenoiserConfig,
    pub params: ParamStore,
    layers: Layers,
    pos: Matrix,
}

impl Dit {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut p = ParamStore::new();
        let d = config.d_model;
        let pp = config.patch * config.patch;
        let zero = config.zero_init;
        let gated = |p: &mut ParamStore, name: &str, d_in, d_out, rng: &mut ChaCha8Rng| {
            if zero {
                Linear::zeroed(p, name, d_in, d_out, true)
            } else {
                Linear::new(p, name, d_in, d_out, true, rng)
            }
        };
        let patch_embed = Linear::new(&mut p, "patch_embed", pp, d, true, &mut rng);
        let time1 = Linear::new(&mut p, "time.fc1", config.time_freq_dim, d, true, &mut rng);
        let time2 = Linear::new(&mut p, "time.fc2", d, d, true, &mut rng);
        let text1 = Linear::new(&mut p, "text.fc1", config.d_text, d, false, &mut rng);
        let text2 = Linear::new(&mut p, "text.fc2", d, d, false, &mut rng);
        let hidden = config.mlp_ratio * d;
        let blocks = (0..config.depth)
            .map(|i| Block {
                ada: gated(&mut p, &format!("block{i}.ada"), d, 6 * d, &mut rng),
                qkv: Linear::new(&mut p, &format!("block{i}.qkv"), d, 3 * d, true, &mut rng),
                proj: Linear::new(&mut p, &format!("block{i}.proj"), d, d, true, &mut rng),
                ff1: Linear::new(&mut p, &format!("block{i}.ff1"), d, hidden, true, &mut rng),
                ff2: Linear::new(&mut p, &format!("block{i}.ff2"), hidden, d, true, &mut rng),
            })
            .collect();
        let final_ada = gated(&mut p, "final.ada", d, 2 * d, &mut rng);
        let head = gated(&mut p, "final.head", d, pp, &mut rng);
        let pos = positional_embedding(config.num_patches(), d)?;
        Ok(Self {
            config,
            params: p,
            layers: Layers {
                patch_embed,
                time1,
                time2,
                text1,
                text2,
                blocks,
                final_ada,
                head,
            },
            pos,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    fn check_inputs(&self, z: &[LatentGrid], t: &[f64], cond: &[ConditionEmbedding]) -> Result<()> {
        if z.len() != t.len() || z.len() != cond.len() {
            return arg("denoiser batch needs one time and one condition per grid");
        }
        for zi in z {
            if zi.size() != self.config.grid {
                return config(format!(
                    "latent grid {} does not match the denoiser grid {}",
                    zi.size(),
                    self.config.grid
                ));
            }
            if !zi.is_finite() {
                return arg("latent input is not finite");
            }
        }
        if let Some(&bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return arg(format!("flow time {bad} outside [0, 1]"));
        }
        if let Some(c) = cond.iter().find(|c| c.dim() != self.config.d_text) {
            return config(format!(
                "condition has dimension {}, expected {}",
                c.dim(),
                self.config.d_text
            ));
        }
        Ok(())
    }

    /// `c_t` rows (`batch × d_model`) on the tape.
    pub fn condition_tape(&self, tape: &mut Tape, slot: Slot, t: &[f64], cond: &[ConditionEmbedding]) -> Var {
        let f = self.config.time_freq_dim;
        let tf: Vec<f64> = t.iter().flat_map(|&t| timestep_features(t, f)).collect();
        let tf = tape.constant(Matrix::from_vec(t.len(), f, tf));
        let l = &self.layers;
        let a = l.time1.forward(tape, slot, tf);
        let a = tape.silu(a);
        let a = l.time2.forward(tape, slot, a);
        let cv: Vec<f64> = cond.iter().flat_map(|c| c.vector().iter().copied()).collect();
        let cv = tape.constant(Matrix::from_vec(cond.len(), self.config.d_text, cv));
        let b = l.text1.forward(tape, slot, cv);
        let b = tape.silu(b);
        let b = l.text2.forward(tape, slot, b);
        tape.add(a, b)
    }

    fn modulated_ln(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Var {
        let n = tape.layer_norm(x, LN_EPS);
        let s = tape.add_scalar(scale, 1.0);
        let y = tape.mul(n, s);
        tape.add(y, shift)
    }

    /// One block; `m` is the `(batch·tokens) × 6d` broadcast modulation.
    fn block_tape(&self, tape: &mut Tape, slot: Slot, i: usize, x: Var, m: Var) -> Var {
        let d = self.config.d_model;
        let n = self.config.num_patches();
        let blk = &self.layers.blocks[i];
        let chunk = |tape: &mut Tape, k: usize| tape.slice_cols(m, k * d, d);
        let (beta1, gamma1, alpha1) = (chunk(tape, 0), chunk(tape, 1), chunk(tape, 2));
        let (beta2, gamma2, alpha2) = (chunk(tape, 3), chunk(tape, 4), chunk(tape, 5));

        let z1 = Self::modulated_ln(tape, x, beta1, gamma1);
        let qkv = blk.qkv.forward(tape, slot, z1);
        let q = tape.slice_cols(qkv, 0, d);
        let k = tape.slice_cols(qkv, d, d);
        let v = tape.slice_cols(qkv, 2 * d, d);
        let att = tape.attention(q, k, v, n, self.config.heads);
        let att = blk.proj.forward(tape, slot, att);
        let att = tape.mul(alpha1, att);
        let z2 = tape.add(x, att);

        let z3 = Self::modulated_ln(tape, z2, beta2, gamma2);
        let h = blk.ff1.forward(tape, slot, z3);
        let h = tape.gelu(h);
        let h = blk.ff2.forward(tape, slot, h);
        let h = tape.mul(alpha2, h);
        tape.add(z2, h)
    }

    /// Velocity patches `(batch·tokens) × p²` for patchified inputs `(batch·tokens) × p²`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        slot: Slot,
        patches: Var,
        t: &[f64],
        cond: &[ConditionEmbedding],
    ) -> Var {
        let n = self.config.num_patches();
        let d = self.config.d_model;
        let b = t.len();
        let l = &self.layers;
        let x = l.patch_embed.forward(tape, slot, patches);
        let pos = tape.constant(tile_rows(&self.pos, b));
        let mut x = tape.add(x, pos);
        let c = self.condition_tape(tape, slot, t, cond);
        let c = tape.silu(c);
        for i in 0..self.config.depth {
            let m = l.blocks[i].ada.forward(tape, slot, c);
            let m = tape.repeat_rows(m, n);
            x = self.block_tape(tape, slot, i, x, m);
        }
        let fm = l.final_ada.forward(tape, slot, c);
        let fm = tape.repeat_rows(fm, n);
        let shift = tape.slice_cols(fm, 0, d);
        let scale = tape.slice_cols(fm, d, d);
        let y = Self::modulated_ln(tape, x, shift, scale);
        l.head.forward(tape, slot, y)
    }

    /// Stack patchified grids into one `(batch·tokens) × p²` matrix.
    pub fn patchify_batch(&self, z: &[LatentGrid]) -> Result<Matrix> {
        let p = self.config.patch;
        let n = self.config.num_patches();
        let mut data = Vec::with_capacity(z.len() * n * p * p);
        for zi in z {
            data.extend_from_slice(patchify(zi.matrix(), p)?.as_slice());
        }
        Ok(Matrix::from_vec(z.len() * n, p * p, data))
    }

    pub fn unpatchify_batch(&self, patches: &Matrix) -> Result<Vec<LatentGrid>> {
        let p = self.config.patch;
        let n = self.config.num_patches();
        patches
            .as_slice()
            .chunks(n * p * p)
            .map(|c| {
                let tokens = Matrix::from_vec(n, p * p, c.to_vec());
                LatentGrid::new(unpatchify(&tokens, self.config.grid, p)?)
            })
            .collect()
    }

    /// `c_t` for a single `(t, C)`.
    pub fn condition_embed(&self, t: f64, cond: &ConditionEmbedding) -> Result<Vec<f64>> {
        if cond.dim() != self.config.d_text {
            return config(format!(
                "condition has dimension {}, expected {}",
                cond.dim(),
                self.config.d_text
            ));
        }
        let mut tape = Tape::new();
        let slot = tape.bind_frozen(&self.params);
        let c = self.condition_tape(&mut tape, slot, &[t], std::slice::from_ref(cond));
        Ok(tape.value(c).as_slice().to_vec())
    }

    /// Per-block modulation followed by the final layer's `(shift, scale)`.
    pub fn adaln_modulation(&self, c_t: &[f64]) -> Result<(Vec<BlockConditioning>, Vec<f64>)> {
        let d = self.config.d_model;
        if c_t.len() != d {
            return config(format!("c_t has dimension {}, expected {d}", c_t.len()));
        }
        let mut tape = Tape::new();
        let slot = tape.bind_frozen(&self.params);
        let c = tape.constant(Matrix::row_vector(c_t));
        let c = tape.silu(c);
        let blocks = self
            .layers
            .blocks
            .iter()
            .map(|b| {
                let m = b.ada.forward(&mut tape, slot, c);
                BlockConditioning::from_row(tape.value(m).as_slice(), d)
            })
            .collect();
        let f = self.layers.final_ada.forward(&mut tape, slot, c);
        Ok((blocks, tape.value(f).as_slice().to_vec()))
    }

    /// Apply block `index` to token rows `tokens × d_model` under explicit modulation.
    pub fn dit_block(&self, index: usize, tokens: &Matrix, cond: &BlockConditioning) -> Result<Matrix> {
        let d = self.config.d_model;
        let n = self.config.num_patches();
        if index >= self.config.depth || tokens.shape() != (n, d) {
            return arg(format!("block {index} cannot take tokens {:?}", tokens.shape()));
        }
        let mut tape = Tape::new();
        let slot = tape.bind_frozen(&self.params);
        let x = tape.constant(tokens.clone());
        let m = tape.constant(Matrix::row_vector(&cond.to_row()));
        let m = tape.repeat_rows(m, n);
        let y = self.block_tape(&mut tape, slot, index, x, m);
        Ok(tape.value(y).clone())
    }

    /// Velocity for a batch of grids with per-item times.
    pub fn denoise_batch(
        &self,
        z: &[LatentGrid],
        t: &[f64],
        cond: &[ConditionEmbedding],
    ) -> Result<Vec<LatentGrid>> {
        self.check_inputs(z, t, cond)?;
        if z.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let slot = tape.bind_frozen(&self.params);
        let x = tape.constant(self.patchify_batch(z)?);
        let y = self.forward_tape(&mut tape, slot, x, t, cond);
        let out = tape.value(y);
        if !out.is_finite() {
            return Err(Error::Numerical {
                step: 0,
                message: "denoiser produced non-finite velocities".into(),
            });
        }
        self.unpatchify_batch(out)
    }

    pub fn denoise(&self, z: &LatentGrid, t: f64, cond: &ConditionEmbedding) -> Result<LatentGrid> {
        Ok(self
            .denoise_batch(std::slice::from_ref(z), &[t], std::slice::from_ref(cond))?
            .remove(0))
    }

    pub fn save(&self, dir: &Path, training: Option<Value>) -> Result<()> {
        checkpoint::save(dir, CHECKPOINT_KIND, &self.config, training, &self.params)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = checkpoint::read_manifest(dir, CHECKPOINT_KIND)?;
        let config: DenoiserConfig = serde_json::from_value(manifest.model_config.clone())?;
        let mut dit = Dit::new(config)?;
        checkpoint::load_weights(dir, &manifest, &mut dit.params)?;
        Ok(dit)
    }
}

impl VelocityField for Dit {
    fn velocity(&self, z: &[LatentGrid], t: f64, cond: &[ConditionEmbedding]) -> Result<Vec<LatentGrid>> {
        self.denoise_batch(z, &vec![t; z.len()], cond)
    }

    fn condition_dim(&self) -> usize {
        self.config.d_text
    }
}

fn tile_rows(m: &Matrix, times: usize) -> Matrix {
    let mut data = Vec::with_capacity(m.len() * times);
    for _ in 0..times {
        data.extend_from_slice(m.as_slice());
    }
    Matrix::from_vec(m.rows() * times, m.cols(), data)
}

/// Gather map taking patch rows back to grid layout, for on-tape use.
pub fn unpatchify_map(batch: usize, grid: usize, p: usize) -> Arc<Vec<u32>> {
    let n = grid / p;
    let per = n * n * p * p;
    let mut src = Vec::with_capacity(batch * grid * grid);
    for b in 0..batch {
        for r in 0..grid {
            for c in 0..grid {
                let tok = (r / p) * n + c / p;
                let k = (r % p) * p + c % p;
                src.push((b * per + tok * p * p + k) as u32);
            }
        }
    }
    Arc::new(src)
}

/// Gather map taking stacked grids `(batch·G) × G` to patch rows, for on-tape use.
pub fn patchify_map(batch: usize, grid: usize, p: usize) -> Arc<Vec<u32>> {
    let n = grid / p;
    let mut src = Vec::with_capacity(batch * grid * grid);
    for b in 0..batch {
        for tok in 0..n * n {
            let (pr, pc) = (tok / n, tok % n);
            for k in 0..p * p {
                let (r, c) = (pr * p + k / p, pc * p + k % p);
                src.push((b * grid * grid + r * grid + c) as u32);
            }
        }
    }
    Arc::new(src)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::null_condition;

    fn tiny(zero_init: bool) -> Dit {
        Dit::new(DenoiserConfig {
            grid: 8,
            patch: 2,
            d_model: 16,
            depth: 2,
            heads: 2,
            d_text: 8,
            time_freq_dim: 8,
            mlp_ratio: 2,
            init_seed: 1,
            zero_init,
        })
        .unwrap()
    }

    #[test]
    fn patch_round_trip() {
        let z = Matrix::from_fn(16, 16, |r, c| (r * 16 + c) as f64);
        assert_eq!(patchify(&z, 4).unwrap().rows(), 16);
        assert_eq!(patchify(&z, 16).unwrap().rows(), 1);
        assert_eq!(unpatchify(&patchify(&z, 4).unwrap(), 16, 4).unwrap(), z);
        assert!(matches!(patchify(&z, 5), Err(Error::Config(_))));
        let map = unpatchify_map(1, 16, 4);
        let tok = patchify(&z, 4).unwrap();
        let back: Vec<f64> = map.iter().map(|&i| tok.as_slice()[i as usize]).collect();
        assert_eq!(back, z.as_slice());
        let fwd = patchify_map(1, 16, 4);
        let got: Vec<f64> = fwd.iter().map(|&i| z.as_slice()[i as usize]).collect();
        assert_eq!(got, tok.as_slice());
    }

    #[test]
    fn positional_table() {
        let pe = positional_embedding(16, 32).unwrap();
        for i in 0..16 {
            let ri = pe.row(i);
            assert!(ri.iter().map(|v| v * v).sum::<f64>().sqrt() <= (32f64).sqrt() + 1e-12);
            for j in 0..i {
                assert!(ri.iter().zip(pe.row(j)).any(|(a, b)| (a - b).abs() > 1e-9));
            }
        }
        assert_eq!(pe, positional_embedding(16, 32).unwrap());
        assert!(positional_embedding(15, 32).is_err());
    }

    #[test]
    fn init_contracts() {
        let dit = tiny(true);
        let c = ConditionEmbedding::new(vec![0.3; 8]);
        let z = LatentGrid::filled(8, 0.7);
        let v = dit.denoise(&z, 0.4, &c).unwrap();
        assert!(v.matrix().as_slice().iter().all(|&x| x == 0.0));
        let ct = dit.condition_embed(0.4, &c).unwrap();
        let (mods, _) = dit.adaln_modulation(&ct).unwrap();
        assert_eq!(mods.len(), 2);
        for m in &mods {
            assert!(m.alpha1.iter().chain(&m.alpha2).all(|&a| a == 0.0));
            assert_eq!(m.to_row().len(), 6 * 16);
        }
        let tokens = Matrix::from_fn(16, 16, |r, c| ((r * 3 + c) as f64).sin());
        assert_eq!(dit.dit_block(0, &tokens, &mods[0]).unwrap(), tokens);
    }

    #[test]
    fn null_condition_depends_only_on_t() {
        let dit = tiny(false);
        let a = dit.condition_embed(0.25, &null_condition(8)).unwrap();
        let b = dit.condition_embed(0.75, &null_condition(8)).unwrap();
        let mut tape = Tape::new();
        let slot = tape.bind_frozen(&dit.params);
        let tf = tape.constant(Matrix::row_vector(&timestep_features(0.25, 8)));
        let h = dit.layers.time1.forward(&mut tape, slot, tf);
        let h = tape.silu(h);
        let h = dit.layers.time2.forward(&mut tape, slot, h);
        assert_eq!(tape.value(h).as_slice(), a.as_slice());
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let dit = tiny(false);
        let tokens = Matrix::from_fn(16, 16, |r, c| ((r * 5 + c * 7) as f64 * 0.1).cos());
        let cond = BlockConditioning::neutral(16);
        let out = dit.dit_block(1, &tokens, &cond).unwrap();
        let perm: Vec<usize> = (0..16).map(|i| (i * 5 + 3) % 16).collect();
        let pt = Matrix::from_fn(16, 16, |r, c| tokens.get(perm[r], c));
        let pout = dit.dit_block(1, &pt, &cond).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                assert!((pout.get(r, c) - out.get(perm[r], c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dit = tiny(false);
        let dir = tempfile::tempdir().unwrap();
        dit.save(dir.path(), None).unwrap();
        let back = Dit::load(dir.path()).unwrap();
        let c = ConditionEmbedding::new(vec![0.1; 8]);
        let z = LatentGrid::filled(8, 0.2);
        assert_eq!(back.denoise(&z, 0.3, &c).unwrap(), dit.denoise(&z, 0.3, &c).unwrap());
        assert!(crate::vae::LaVae::load(dir.path()).is_err());
    }
}
