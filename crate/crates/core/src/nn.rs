//! Layers built on the tape.

use std::sync::Arc;

use rand::Rng;

use crate::autograd::{ParamId, ParamStore, Slot, Tape, Var};
use crate::tensor::Matrix;

/// `y = x·W (+ b)`, with `W` stored as `in × out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add_xavier(&format!("{name}.weight"), d_in, d_out, rng);
        let b = bias.then(|| store.add(format!("{name}.bias"), Matrix::zeros(1, d_out)));
        Self { w, b, d_in, d_out }
    }

    /// Weight and bias start at exactly zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = store.add(format!("{name}.weight"), Matrix::zeros(d_in, d_out));
        let b = bias.then(|| store.add(format!("{name}.bias"), Matrix::zeros(1, d_out)));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, slot: Slot, x: Var) -> Var {
        let w = tape.param(slot, self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = tape.param(slot, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Stride-1 "same" convolution over `(batch·len) × channels` inputs.
///
/// Each batch item is a contiguous block of `len` rows; zero padding is
/// applied at every block edge so items never leak into each other.
#[derive(Clone, Copy, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd for same padding");
        let w = store.add_xavier(&format!("{name}.weight"), kernel * c_in, c_out, rng);
        let b = store.add(format!("{name}.bias"), Matrix::zeros(1, c_out));
        Self {
            w,
            b,
            kernel,
            c_in,
            c_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, slot: Slot, x: Var, len: usize) -> Var {
        let (rows, cols) = tape.shape(x);
        assert_eq!(cols, self.c_in, "conv input channels");
        assert!(len > 0 && rows % len == 0, "conv rows not a multiple of len");
        let cols_out = self.kernel * self.c_in;
        let map = im2col_map(rows / len, len, self.c_in, self.kernel);
        let patches = tape.gather(x, map, rows, cols_out);
        let w = tape.param(slot, self.w);
        let y = tape.matmul(patches, w);
        let b = tape.param(slot, self.b);
        tape.add_row(y, b)
    }
}

fn im2col_map(batch: usize, len: usize, channels: usize, kernel: usize) -> Arc<Vec<u32>> {
    let pad = (kernel / 2) as isize;
    let mut src = Vec::with_capacity(batch * len * kernel * channels);
    for b in 0..batch {
        for i in 0..len {
            for k in 0..kernel {
                let pos = i as isize + k as isize - pad;
                if pos < 0 || pos >= len as isize {
                    src.extend(std::iter::repeat_n(u32::MAX, channels));
                } else {
                    let base = (b * len + pos as usize) * channels;
                    src.extend((base..base + channels).map(|s| s as u32));
                }
            }
        }
    }
    Arc::new(src)
}
