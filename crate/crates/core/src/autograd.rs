//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records one forward pass. Parameters live outside the tape in
//! [`ParamStore`]s and are borrowed, so building a tape never copies weights.
//! The op set is the minimum the VAE and the denoiser need; attention and
//! layer normalization are fused ops with hand-written adjoints.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{gemm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Xavier-uniform initialised weight plus optional zero bias.
    pub fn add_xavier(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..limit));
        self.add(name, w)
    }

    pub fn add_normal(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let w = Matrix::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        });
        self.add(name, w)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.values.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Index of a parameter store bound to a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot(usize);

const GATHER_ZERO: u32 = u32::MAX;

enum Op {
    Leaf,
    Param { slot: usize, id: usize },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Gelu(Var),
    Exp(Var),
    Square(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Reshape(Var),
    Gather { x: Var, src: Arc<Vec<u32>> },
    BlockMap { x: Var, w: Arc<Matrix> },
    Mean(Var),
    Sum(Var),
}

struct Node {
    op: Op,
    value: Option<Matrix>,
    requires_grad: bool,
}

pub struct Tape<'p> {
    stores: Vec<(&'p ParamStore, bool)>,
    nodes: Vec<Node>,
    param_cache: HashMap<(usize, usize), Var>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            stores: Vec::new(),
            nodes: Vec::new(),
            param_cache: HashMap::new(),
        }
    }

    /// Bind a store whose parameters receive gradients.
    pub fn bind(&mut self, store: &'p ParamStore) -> Slot {
        self.stores.push((store, true));
        Slot(self.stores.len() - 1)
    }

    /// Bind a store used read-only: its parameters are treated as constants.
    pub fn bind_frozen(&mut self, store: &'p ParamStore) -> Slot {
        self.stores.push((store, false));
        Slot(self.stores.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param { slot, id } => &self.stores[slot].0.values[id],
            _ => node.value.as_ref().expect("non-parameter node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.len(), 1, "scalar() on non-scalar node");
        m.as_slice()[0]
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(Op::Leaf, m, false)
    }

    /// Input whose gradient is tracked (for sensitivity checks).
    pub fn variable(&mut self, m: Matrix) -> Var {
        self.push(Op::Leaf, m, true)
    }

    pub fn param(&mut self, slot: Slot, id: ParamId) -> Var {
        if let Some(&v) = self.param_cache.get(&(slot.0, id.0)) {
            return v;
        }
        let trainable = self.stores[slot.0].1;
        self.nodes.push(Node {
            op: Op::Param {
                slot: slot.0,
                id: id.0,
            },
            value: None,
            requires_grad: trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_cache.insert((slot.0, id.0), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = gemm(self.value(a), false, self.value(b), false);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), out, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), out, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub(a, b), out, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul(a, b), out, rg)
    }

    /// `a + 1ᵀ row`: adds a `1×n` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ra, ca) = self.shape(a);
        assert_eq!(self.shape(row), (1, ca), "add_row expects a 1x{ca} row");
        let r = self.value(row).as_slice().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..ra {
            for (x, b) in out.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(Op::AddRow(a, row), out, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(Op::Scale(a, s), out, rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(Op::AddScalar(a), out, rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(Op::Silu(a), out, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(Op::Gelu(a), out, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(Op::Exp(a), out, rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(Op::Square(a), out, rg)
    }

    /// Per-row standardisation `(x − μ) / sqrt(σ² + eps)` with no affine part.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(a);
        self.push(Op::LayerNorm { x: a, inv_std }, out, rg)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `(batch·seq) × d` with heads laid out as contiguous
    /// column blocks of width `d / heads`. Attention never crosses a batch
    /// boundary.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Var {
        let (rows, d) = self.shape(q);
        assert_eq!(self.shape(k), (rows, d));
        assert_eq!(self.shape(v), (rows, d));
        assert!(seq > 0 && rows % seq == 0, "rows must be a multiple of seq");
        assert!(heads > 0 && d % heads == 0, "d must be divisible by heads");
        let batch = rows / seq;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let mut out = Matrix::zeros(rows, d);
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let c0 = h * dh;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qm.row(b * seq + i)[c0..c0 + dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &km.row(b * seq + j)[c0..c0 + dh];
                        *s = dot(qi, kj) * scale;
                        max = max.max(*s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let prow = &mut probs[pbase + i * seq..pbase + (i + 1) * seq];
                    for (p, s) in prow.iter_mut().zip(&scores) {
                        *p = s / z;
                    }
                    let orow = &mut out.row_mut(b * seq + i)[c0..c0 + dh];
                    for (j, &p) in prow.iter().enumerate() {
                        let vj = &vm.row(b * seq + j)[c0..c0 + dh];
                        for (o, vv) in orow.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            },
            out,
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshaped(rows, cols);
        let rg = self.rg(a);
        self.push(Op::Reshape(a), out, rg)
    }

    /// Output element `i` is input element `src[i]`, or zero for `None`.
    pub fn gather(&mut self, a: Var, src: Arc<Vec<u32>>, rows: usize, cols: usize) -> Var {
        assert_eq!(src.len(), rows * cols, "gather map size mismatch");
        let x = self.value(a).as_slice();
        let data = src
            .iter()
            .map(|&s| if s == GATHER_ZERO { 0.0 } else { x[s as usize] })
            .collect();
        let out = Matrix::from_vec(rows, cols, data);
        let rg = self.rg(a);
        self.push(Op::Gather { x: a, src }, out, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (rows, cols) = self.shape(a);
        assert!(start + len <= cols, "column slice out of range");
        let mut src = Vec::with_capacity(rows * len);
        for r in 0..rows {
            for c in start..start + len {
                src.push((r * cols + c) as u32);
            }
        }
        self.gather(a, Arc::new(src), rows, len)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (rows, cols) = self.shape(a);
        assert!(start + len <= rows, "row slice out of range");
        let src = ((start * cols) as u32..((start + len) * cols) as u32).collect();
        self.gather(a, Arc::new(src), len, cols)
    }

    /// Repeat every row `times` times consecutively: `(b × d) → (b·times × d)`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let (rows, cols) = self.shape(a);
        let mut src = Vec::with_capacity(rows * times * cols);
        for r in 0..rows {
            for _ in 0..times {
                src.extend((r * cols..(r + 1) * cols).map(|i| i as u32));
            }
        }
        self.gather(a, Arc::new(src), rows * times, cols)
    }

    /// Left-multiply each consecutive block of `w.cols()` rows by the constant `w`.
    pub fn block_map(&mut self, a: Var, w: Arc<Matrix>) -> Var {
        let (rows, cols) = self.shape(a);
        let (out_rows, in_rows) = w.shape();
        assert!(in_rows > 0 && rows % in_rows == 0, "block_map row mismatch");
        let blocks = rows / in_rows;
        let x = self.value(a);
        let mut out = Matrix::zeros(blocks * out_rows, cols);
        for b in 0..blocks {
            for o in 0..out_rows {
                let orow = o + b * out_rows;
                for i in 0..in_rows {
                    let wv = w.get(o, i);
                    if wv == 0.0 {
                        continue;
                    }
                    let xr = x.row(b * in_rows + i);
                    for (dst, s) in out.row_mut(orow).iter_mut().zip(xr) {
                        *dst += wv * s;
                    }
                }
            }
        }
        let rg = self.rg(a);
        self.push(Op::BlockMap { x: a, w }, out, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Matrix::filled(1, 1, self.value(a).mean());
        let rg = self.rg(a);
        self.push(Op::Mean(a), out, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::filled(1, 1, self.value(a).sum());
        let rg = self.rg(a);
        self.push(Op::Sum(a), out, rg)
    }

    /// Mean squared difference as a `1×1` node.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean(sq)
    }

    /// Adjoints of every node with respect to the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params: Vec<Vec<Option<Matrix>>> = self
            .stores
            .iter()
            .map(|(s, _)| (0..s.len()).map(|_| None).collect())
            .collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param { slot, id } = node.op {
                if node.requires_grad {
                    params[slot][id] = grads[i].clone();
                }
            }
        }
        Gradients {
            nodes: grads,
            params,
        }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let ga = gemm(g, false, self.value(*b), true);
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = gemm(self.value(*a), true, g, false);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*row) {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, v) in gr.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, *row, gr);
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Silu(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| {
                    let s = sigmoid(x);
                    gv * s * (1.0 + x * (1.0 - s))
                });
                accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| gv * gelu_grad(x));
                accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let y = node.value.as_ref().unwrap();
                accumulate(grads, *a, g.zip_map(y, |gv, yv| gv * yv));
            }
            Op::Square(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| 2.0 * gv * x);
                accumulate(grads, *a, ga);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = node.value.as_ref().unwrap();
                let (rows, cols) = y.shape();
                let mut gx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let mg = gr.iter().sum::<f64>() / cols as f64;
                    let mgy = dot(gr, yr) / cols as f64;
                    for ((o, gv), yv) in gx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = inv_std[r] * (gv - mg - yv * mgy);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            } => {
                let (gq, gk, gv) =
                    self.attention_backward(*q, *k, *v, *seq, *heads, probs, g);
                if self.rg(*q) {
                    accumulate(grads, *q, gq);
                }
                if self.rg(*k) {
                    accumulate(grads, *k, gk);
                }
                if self.rg(*v) {
                    accumulate(grads, *v, gv);
                }
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                accumulate(grads, *a, g.clone().reshaped(r, c));
            }
            Op::Gather { x, src } => {
                let (r, c) = self.shape(*x);
                let mut gx = Matrix::zeros(r, c);
                let dst = gx.as_mut_slice();
                for (&s, gv) in src.iter().zip(g.as_slice()) {
                    if s != GATHER_ZERO {
                        dst[s as usize] += gv;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::BlockMap { x, w } => {
                let (rows, cols) = self.shape(*x);
                let (out_rows, in_rows) = w.shape();
                let blocks = rows / in_rows;
                let mut gx = Matrix::zeros(rows, cols);
                for b in 0..blocks {
                    for o in 0..out_rows {
                        let gr = g.row(b * out_rows + o);
                        for i in 0..in_rows {
                            let wv = w.get(o, i);
                            if wv == 0.0 {
                                continue;
                            }
                            for (dst, gv) in gx.row_mut(b * in_rows + i).iter_mut().zip(gr) {
                                *dst += wv * gv;
                            }
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                let n = (r * c).max(1) as f64;
                accumulate(grads, *a, Matrix::filled(r, c, g.as_slice()[0] / n));
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                accumulate(grads, *a, Matrix::filled(r, c, g.as_slice()[0]));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: &[f64],
        g: &Matrix,
    ) -> (Matrix, Matrix, Matrix) {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qm.shape();
        let batch = rows / seq;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Matrix::zeros(rows, d);
        let mut gk = Matrix::zeros(rows, d);
        let mut gv = Matrix::zeros(rows, d);
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let c0 = h * dh;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let prow = &probs[pbase + i * seq..pbase + (i + 1) * seq];
                    let go = &g.row(b * seq + i)[c0..c0 + dh];
                    for (j, d) in dp.iter_mut().enumerate() {
                        *d = dot(go, &vm.row(b * seq + j)[c0..c0 + dh]);
                    }
                    let centre = dot(prow, &dp);
                    for j in 0..seq {
                        let p = prow[j];
                        let gvj = &mut gv.row_mut(b * seq + j)[c0..c0 + dh];
                        for (dst, x) in gvj.iter_mut().zip(go) {
                            *dst += p * x;
                        }
                        let ds = p * (dp[j] - centre) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &km.row(b * seq + j)[c0..c0 + dh];
                        let gqi = &mut gq.row_mut(b * seq + i)[c0..c0 + dh];
                        for (dst, x) in gqi.iter_mut().zip(kj) {
                            *dst += ds * x;
                        }
                        let qi = &qm.row(b * seq + i)[c0..c0 + dh];
                        let gkj = &mut gk.row_mut(b * seq + j)[c0..c0 + dh];
                        for (dst, x) in gkj.iter_mut().zip(qi) {
                            *dst += ds * x;
                        }
                    }
                }
            }
        }
        (gq, gk, gv)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: Vec<Vec<Option<Matrix>>>,
}

impl Gradients {
    /// Gradient with respect to any node; `None` if it does not influence the root.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].as_ref()
    }

    /// Per-parameter gradients for a bound store, in store order.
    pub fn params(&self, slot: Slot) -> &[Option<Matrix>] {
        &self.params[slot.0]
    }

    pub fn into_params(mut self, slot: Slot) -> ParamGrads {
        self.take_params(slot)
    }

    /// Move one store's gradients out, leaving the other slots in place.
    pub fn take_params(&mut self, slot: Slot) -> ParamGrads {
        ParamGrads(std::mem::take(&mut self.params[slot.0]))
    }
}

/// Gradients for one store, summable across independently built tapes.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads(pub Vec<Option<Matrix>>);

impl ParamGrads {
    pub fn add(mut self, other: ParamGrads) -> ParamGrads {
        if self.0.is_empty() {
            return other;
        }
        for (a, b) in self.0.iter_mut().zip(other.0) {
            match (a.as_mut(), b) {
                (Some(x), Some(y)) => x.add_assign(&y),
                (None, Some(y)) => *a = Some(y),
                _ => {}
            }
        }
        self
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.0.get(id.0).and_then(Option::as_ref)
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .map(|m| m.as_slice().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Clip the global gradient norm to this value when set.
    pub clip_norm: Option<f64>,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    steps: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Matrix> = store
            .iter()
            .map(|(_, _, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        }
    }

    /// Number of parameter updates applied so far.
    pub fn updates(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        self.steps += 1;
        let t = self.steps as i32;
        let scale = match self.clip_norm {
            Some(c) => {
                let n = grads.global_norm();
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, value) in store.values_mut().enumerate() {
            let Some(g) = grads.0.get(i).and_then(Option::as_ref) else {
                continue;
            };
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for (((p, gv), mv), vv) in value
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gs = gv * scale;
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gs;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gs * gs;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
