//! Rectified-flow objective and guided Euler sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, config, Error, Result};
use crate::tensor::Matrix;
use crate::text::{null_condition, ConditionEmbedding};
use crate::vae::LatentGrid;

/// A point on the path between noise and data.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub z_t: LatentGrid,
    pub t: f64,
}

impl FlowState {
    pub fn new(z_t: LatentGrid, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return arg(format!("flow time {t} outside [0, 1]"));
        }
        if !z_t.is_finite() {
            return arg("flow state holds non-finite values");
        }
        Ok(Self { z_t, t })
    }
}

fn same_shape(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return arg(format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// `z_t = t·z1 + (1 − t)·z0`.
pub fn forward_path(z0: &Matrix, z1: &Matrix, t: f64) -> Result<Matrix> {
    same_shape(z0, z1)?;
    if !(0.0..=1.0).contains(&t) {
        return arg(format!("flow time {t} outside [0, 1]"));
    }
    Ok(z0.zip_map(z1, |a, b| t * b + (1.0 - t) * a))
}

/// `v = z1 − z0`.
pub fn target_velocity(z0: &Matrix, z1: &Matrix) -> Result<Matrix> {
    same_shape(z0, z1)?;
    Ok(z1.zip_map(z0, |b, a| b - a))
}

/// Mean squared error between predicted and target velocities.
pub fn fm_loss(predicted: &Matrix, target: &Matrix) -> f64 {
    assert_eq!(predicted.shape(), target.shape(), "fm_loss shape mismatch");
    if predicted.is_empty() {
        return 0.0;
    }
    predicted
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(p, v)| (p - v).powi(2))
        .sum::<f64>()
        / predicted.len() as f64
}

/// Gradient of [`fm_loss`] with respect to `predicted`.
pub fn fm_loss_grad(predicted: &Matrix, target: &Matrix) -> Matrix {
    assert_eq!(predicted.shape(), target.shape(), "fm_loss shape mismatch");
    let n = predicted.len().max(1) as f64;
    predicted.zip_map(target, |p, v| 2.0 * (p - v) / n)
}

pub fn sample_training_time(rng: &mut impl Rng) -> f64 {
    rng.random::<f64>()
}

/// `u = (1 + δ)·u_cond − δ·u_uncond`, evaluated as `u_cond + δ·(u_cond − u_uncond)`
/// so that agreeing branches come back unchanged for every δ.
pub fn guided_velocity(u_cond: &Matrix, u_uncond: &Matrix, delta: f64) -> Result<Matrix> {
    same_shape(u_cond, u_uncond)?;
    if delta < 0.0 {
        return arg(format!("guidance scale {delta} must be non-negative"));
    }
    Ok(u_cond.zip_map(u_uncond, |c, u| c + delta * (c - u)))
}

/// A velocity predictor evaluated on a batch sharing one time value.
pub trait VelocityField: Sync {
    fn velocity(
        &self,
        z: &[LatentGrid],
        t: f64,
        cond: &[ConditionEmbedding],
    ) -> Result<Vec<LatentGrid>>;

    /// Width of the condition vectors the field expects.
    fn condition_dim(&self) -> usize;
}

/// Adapts a plain function `u(z, t, C)` into a [`VelocityField`].
pub struct FnField<F> {
    pub f: F,
    pub dim: usize,
}

impl<F> VelocityField for FnField<F>
where
    F: Fn(&LatentGrid, f64, &ConditionEmbedding) -> LatentGrid + Sync,
{
    fn velocity(
        &self,
        z: &[LatentGrid],
        t: f64,
        cond: &[ConditionEmbedding],
    ) -> Result<Vec<LatentGrid>> {
        Ok(z.iter().zip(cond).map(|(z, c)| (self.f)(z, t, c)).collect())
    }

    fn condition_dim(&self) -> usize {
        self.dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 30,
            cfg_scale: 7.5,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return config("sampler needs at least one step");
        }
        if !(self.cfg_scale >= 0.0) {
            return config(format!("guidance scale {} must be non-negative", self.cfg_scale));
        }
        Ok(())
    }
}

/// Standard-normal starting grid for a given seed.
pub fn initial_noise(grid: usize, seed: u64) -> LatentGrid {
    LatentGrid::noise(grid, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Explicit Euler integration of `dz/dt = u(z, t, C)` from `t = 0` to `t = 1`.
pub fn ode_sample(
    field: &dyn VelocityField,
    condition: &ConditionEmbedding,
    sampler: &SamplerConfig,
    z0: LatentGrid,
) -> Result<LatentGrid> {
    Ok(ode_sample_batch(field, std::slice::from_ref(condition), sampler, vec![z0])?.remove(0))
}

/// Batched sampling: item `i` starts from `z0[i]` under `conditions[i]`.
///
/// When guidance is active the conditional and null branches go through the
/// field in one call.
pub fn ode_sample_batch(
    field: &dyn VelocityField,
    conditions: &[ConditionEmbedding],
    sampler: &SamplerConfig,
    z0: Vec<LatentGrid>,
) -> Result<Vec<LatentGrid>> {
    sampler.validate()?;
    if conditions.len() != z0.len() {
        return arg("one condition per starting grid is required");
    }
    if z0.is_empty() {
        return Ok(z0);
    }
    let n = z0.len();
    let guided = sampler.cfg_scale > 0.0;
    let null = null_condition(field.condition_dim());
    let mut conds: Vec<ConditionEmbedding> = conditions.to_vec();
    if guided {
        conds.extend(std::iter::repeat_n(null, n));
    }
    let mut z = z0;
    let dt = 1.0 / sampler.steps as f64;
    for step in 0..sampler.steps {
        let t = step as f64 * dt;
        let input: Vec<LatentGrid> = if guided {
            z.iter().chain(z.iter()).cloned().collect()
        } else {
            z.clone()
        };
        let u = field.velocity(&input, t, &conds)?;
        if u.len() != input.len() {
            return arg("velocity field returned the wrong batch size");
        }
        for (i, zi) in z.iter_mut().enumerate() {
            let ui = if guided {
                guided_velocity(u[i].matrix(), u[n + i].matrix(), sampler.cfg_scale)?
            } else {
                u[i].matrix().clone()
            };
            same_shape(zi.matrix(), &ui)?;
            let m = zi.matrix_mut();
            for (a, b) in m.as_mut_slice().iter_mut().zip(ui.as_slice()) {
                *a += dt * b;
            }
            if !zi.is_finite() {
                return Err(Error::Numerical {
                    step: step + 1,
                    message: format!("sample {i} left the finite range at t = {:.4}", t + dt),
                });
            }
        }
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> LatentGrid {
        LatentGrid::filled(1, v)
    }

    #[test]
    fn path_and_velocity_examples() {
        let z0 = Matrix::from_vec(1, 2, vec![1.0, 2.0]);
        let z1 = Matrix::from_vec(1, 2, vec![3.0, 1.0]);
        assert_eq!(forward_path(&z0, &z1, 0.0).unwrap(), z0);
        assert_eq!(forward_path(&z0, &z1, 1.0).unwrap(), z1);
        assert_eq!(target_velocity(&z0, &z1).unwrap().as_slice(), &[2.0, -1.0]);
        let mid = forward_path(&Matrix::zeros(1, 1), &Matrix::filled(1, 1, 2.0), 0.5).unwrap();
        assert_eq!(mid.as_slice(), &[1.0]);
        assert!(forward_path(&z0, &Matrix::zeros(2, 1), 0.5).is_err());
        assert!(target_velocity(&z0, &Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn guidance_examples() {
        let one = Matrix::filled(1, 1, 1.0);
        let half = Matrix::filled(1, 1, 0.5);
        assert_eq!(guided_velocity(&one, &half, 1.0).unwrap().as_slice(), &[1.5]);
        assert_eq!(guided_velocity(&one, &half, 0.0).unwrap(), one);
        assert!(guided_velocity(&one, &half, -1.0).is_err());
    }

    #[test]
    fn euler_on_linear_field() {
        let field = FnField {
            f: |z: &LatentGrid, _t: f64, _c: &ConditionEmbedding| z.clone(),
            dim: 4,
        };
        let c = ConditionEmbedding::new(vec![1.0, 0.0, 0.0, 0.0]);
        let run = |steps| {
            let cfg = SamplerConfig { steps, cfg_scale: 0.0, seed: 0 };
            ode_sample(&field, &c, &cfg, scalar(1.0)).unwrap().matrix().get(0, 0)
        };
        assert!((run(1) - 2.0).abs() < 1e-15);
        assert!((run(2) - 2.25).abs() < 1e-15);
    }

    #[test]
    fn divergence_reports_step() {
        let field = FnField {
            f: |z: &LatentGrid, _t: f64, _c: &ConditionEmbedding| {
                LatentGrid::filled(z.size(), if z.matrix().get(0, 0) > 10.0 { f64::INFINITY } else { 100.0 })
            },
            dim: 2,
        };
        let cfg = SamplerConfig { steps: 10, cfg_scale: 0.0, seed: 0 };
        let err = ode_sample(&field, &null_condition(2), &cfg, scalar(0.0)).unwrap_err();
        assert!(matches!(err, Error::Numerical { step: 3, .. }), "{err}");
    }
}
