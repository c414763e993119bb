//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use t2s_core::autograd::{Adam, Tape};
use t2s_core::caption::{
    build_fragment_dataset, scores_path, select_best, CompletionClientConfig, HttpCompletionClient, PipelineConfig,
    RawSeries, RequestMode, SeedPrompt,
};
use t2s_core::dataset::{dataset_sampling, normalize, CaptionedSample, Dataset, Level, NormScheme};
use t2s_core::dit::{patchify, unpatchify, BlockConditioning, DenoiserConfig, Dit};
use t2s_core::flow::{
    forward_path, guided_velocity, initial_noise, ode_sample, ode_sample_batch, sample_training_time,
    target_velocity, FnField, SamplerConfig,
};
use t2s_core::metrics::{evaluate, mrr_at_10, mse, sweep, wape, EvalConfig, GenTask, ModelGenerator, SeriesGenerator};
use t2s_core::mock::{trend_caption_responder, MockServer};
use t2s_core::par::Execution;
use t2s_core::synth::{ls_slope, make_synth, SynthConfig};
use t2s_core::tensor::Matrix;
use t2s_core::text::{null_condition, ConditionEmbedding, OfflineEncoder, TextEncoder};
use t2s_core::trainer::{
    condition_dropout, generate_batch, train_diffusion, train_vae, GenerationRequest, Phase, TrainingConfig,
};
use t2s_core::vae::{
    downsample, upsample, vae_loss, vae_loss_tape, EncodeMode, LaVae, LatentGrid, LatentSequence, VaeConfig,
    VaePosterior,
};
use t2s_core::Result;

const LENGTHS: [usize; 3] = [24, 48, 96];

struct Outcome {
    pass: bool,
    detail: String,
}

/// Accumulates named checks into one verdict.
#[derive(Default)]
struct Checks {
    failed: Vec<String>,
    notes: Vec<String>,
}

impl Checks {
    fn check(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failed.push(what.into());
        }
    }

    fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }

    fn finish(self, elapsed: Duration, limit: Duration) -> Outcome {
        let mut failed = self.failed;
        if elapsed > limit {
            failed.push(format!("runtime {:.1}s over {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()));
        }
        let mut detail = self.notes.join("; ");
        if !failed.is_empty() {
            if !detail.is_empty() {
                detail.push_str("; ");
            }
            detail.push_str("failed: ");
            detail.push_str(&failed.join(", "));
        }
        Outcome {
            pass: failed.is_empty(),
            detail,
        }
    }
}

fn rand_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

// 1. flow matching identities and Euler behaviour

fn c1() -> Outcome {
    let start = Instant::now();
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let z0 = rand_matrix(4, 4, &mut rng);
        let z1 = rand_matrix(4, 4, &mut rng);
        c.check(forward_path(&z0, &z1, 0.0).unwrap() == z0, "path at t=0");
        c.check(forward_path(&z0, &z1, 1.0).unwrap() == z1, "path at t=1");
        let mid = z0.zip_map(&z1, |a, b| (a + b) / 2.0);
        c.check(forward_path(&z0, &z1, 0.5).unwrap() == mid, "path midpoint");
        let v = target_velocity(&z0, &z1).unwrap();
        c.check(v == z1.zip_map(&z0, |b, a| b - a), "target velocity");
        let uc = rand_matrix(4, 4, &mut rng);
        let uu = rand_matrix(4, 4, &mut rng);
        c.check(guided_velocity(&uc, &uu, 0.0).unwrap() == uc, "guidance at delta=0");
        for delta in [0.5, 2.0, 7.5, 13.0] {
            c.check(guided_velocity(&uc, &uc, delta).unwrap() == uc, "guidance cancellation");
            let g = guided_velocity(&uc, &uu, delta).unwrap();
            let closed = uc.zip_map(&uu, |a, b| (1.0 + delta) * a - delta * b);
            c.check(g.max_abs_diff(&closed) <= 1e-12, "guidance closed form");
        }
    }

    let cond = ConditionEmbedding::new(vec![1.0, 0.0]);
    let constant = FnField {
        f: |z: &LatentGrid, _t: f64, _c: &ConditionEmbedding| LatentGrid::filled(z.size(), 1.5),
        dim: 2,
    };
    let run = |field: &dyn t2s_core::flow::VelocityField, steps: usize, z0: f64| {
        let cfg = SamplerConfig {
            steps,
            cfg_scale: 0.0,
            seed: 0,
        };
        ode_sample(field, &cond, &cfg, LatentGrid::filled(1, z0)).unwrap().matrix().get(0, 0)
    };
    for n in [1, 2, 4, 8, 16, 32, 64] {
        c.check(run(&constant, n, 0.25) == 1.75, format!("constant field exact at N={n}"));
    }
    for n in [3, 30] {
        c.check((run(&constant, n, 0.25) - 1.75).abs() <= 1e-12, format!("constant field at N={n}"));
    }

    let linear = FnField {
        f: |z: &LatentGrid, _t: f64, _c: &ConditionEmbedding| z.clone(),
        dim: 2,
    };
    let mut prev = f64::INFINITY;
    let mut errs = Vec::new();
    for k in 0..=6 {
        let n = 1usize << k;
        let got = run(&linear, n, 1.0);
        let closed = (1.0 + 1.0 / n as f64).powi(n as i32);
        c.check((got - closed).abs() <= 1e-12, format!("(1+1/N)^N at N={n}"));
        let err = (got - std::f64::consts::E).abs();
        c.check(err < prev, format!("error decrease at N={n}"));
        prev = err;
        errs.push(format!("{err:.2e}"));
    }
    c.note(format!("Euler error N=1..64: {}", errs.join(" ")));
    c.finish(start.elapsed(), Duration::from_secs(5))
}

// 2. denoiser structure

fn small_dit(zero_init: bool, d_model: usize) -> Dit {
    Dit::new(DenoiserConfig {
        d_model,
        depth: 2,
        heads: 2,
        d_text: 8,
        time_freq_dim: 16,
        mlp_ratio: 2,
        init_seed: 5,
        zero_init,
        ..DenoiserConfig::default()
    })
    .unwrap()
}

fn dit_loss(dit: &Dit, patches: &Matrix, t: &[f64], cond: &[ConditionEmbedding], target: &Matrix) -> f64 {
    let mut tape = Tape::new();
    let slot = tape.bind_frozen(&dit.params);
    let x = tape.constant(patches.clone());
    let y = dit.forward_tape(&mut tape, slot, x, t, cond);
    let tg = tape.constant(target.clone());
    let l = tape.mse(y, tg);
    tape.scalar(l)
}

fn c2() -> Outcome {
    let start = Instant::now();
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for p in [1, 2, 4, 8, 16] {
        let z = rand_matrix(16, 16, &mut rng);
        let back = unpatchify(&patchify(&z, p).unwrap(), 16, p).unwrap();
        c.check(back == z, format!("patch round trip p={p}"));
    }

    let enc = OfflineEncoder::new(64);
    let fresh = Dit::new(DenoiserConfig::default()).unwrap();
    let mut zero = true;
    for k in 0..4 {
        let z = LatentGrid::noise(16, &mut rng);
        let cond = if k == 0 {
            null_condition(64)
        } else {
            enc.encode(&format!("caption number {k}")).unwrap()
        };
        let out = fresh.denoise(&z, rng.random::<f64>(), &cond).unwrap();
        zero &= out.matrix().as_slice().iter().all(|&v| v == 0.0);
    }
    c.check(zero, "zero output at initialisation");

    let dit = small_dit(false, 16);
    let n = dit.config().num_patches();
    let d = 16;
    let mut ident = true;
    for index in 0..2 {
        let tokens = rand_matrix(n, d, &mut rng);
        let r = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.sample(StandardNormal)).collect::<Vec<f64>>();
        let cond = BlockConditioning {
            beta1: r(&mut rng),
            gamma1: r(&mut rng),
            alpha1: vec![0.0; d],
            beta2: r(&mut rng),
            gamma2: r(&mut rng),
            alpha2: vec![0.0; d],
        };
        ident &= dit.dit_block(index, &tokens, &cond).unwrap() == tokens;
    }
    c.check(ident, "identity block with alpha=0");

    // gradient against central differences
    let b = 2;
    let z: Vec<LatentGrid> = (0..b).map(|_| LatentGrid::noise(16, &mut rng)).collect();
    let patches = dit.patchify_batch(&z).unwrap();
    let target = rand_matrix(patches.rows(), patches.cols(), &mut rng);
    let t = [0.3, 0.8];
    let cond: Vec<ConditionEmbedding> = vec![ConditionEmbedding::new((0..8).map(|i| i as f64 / 8.0).collect()), null_condition(8)];
    let grads = {
        let mut tape = Tape::new();
        let slot = tape.bind(&dit.params);
        let x = tape.constant(patches.clone());
        let y = dit.forward_tape(&mut tape, slot, x, &t, &cond);
        let tg = tape.constant(target.clone());
        let l = tape.mse(y, tg);
        tape.backward(l).into_params(slot)
    };
    let ids: Vec<_> = dit.params.iter().map(|(id, _, m)| (id, m.len())).collect();
    let mut dit = dit;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let h = 1e-5;
    for (id, len) in ids {
        for k in 0..3 {
            let e = rng.random_range(0..len);
            let g = grads.get(id).map_or(0.0, |m| m.as_slice()[e]);
            let orig = dit.params.get(id).as_slice()[e];
            dit.params.get_mut(id).as_mut_slice()[e] = orig + h;
            let lp = dit_loss(&dit, &patches, &t, &cond, &target);
            dit.params.get_mut(id).as_mut_slice()[e] = orig - h;
            let lm = dit_loss(&dit, &patches, &t, &cond, &target);
            dit.params.get_mut(id).as_mut_slice()[e] = orig;
            let fd = (lp - lm) / (2.0 * h);
            worst = worst.max(rel_err(g, fd, 1e-6));
            checked += 1;
            let _ = k;
        }
    }
    c.check(worst <= 1e-3, format!("gradient relative error {worst:.2e}"));
    c.note(format!("{checked} gradient entries, worst relative error {worst:.2e}"));
    c.finish(start.elapsed(), Duration::from_secs(60))
}

// shared toy models

struct Toy {
    encoder: OfflineEncoder,
    vae: LaVae,
    vae_secs: f64,
    dit: Dit,
    baseline: Dit,
    dit_secs: f64,
    held_out: [Dataset; 3],
}

fn toy_dit_config() -> DenoiserConfig {
    DenoiserConfig {
        d_model: 64,
        depth: 2,
        heads: 4,
        ..DenoiserConfig::default()
    }
}

fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let train = make_synth(&SynthConfig::default()).unwrap();
        let held_out = make_synth(&SynthConfig {
            per_length: 30,
            seed: 99,
            ..SynthConfig::default()
        })
        .unwrap();
        let start = Instant::now();
        let vae_cfg = TrainingConfig {
            iterations: 2000,
            ..TrainingConfig::for_phase(Phase::Vae)
        };
        let vae = train_vae(LaVae::new(VaeConfig::default()).unwrap(), &vae_cfg, &train)
            .unwrap()
            .model;
        let vae_secs = start.elapsed().as_secs_f64();

        let start = Instant::now();
        let encoder = OfflineEncoder::new(64);
        let dit_cfg = TrainingConfig {
            iterations: 4000,
            ..TrainingConfig::for_phase(Phase::Diffusion)
        };
        let instance = &train[..1];
        let dit = train_diffusion(Dit::new(toy_dit_config()).unwrap(), vae.clone(), &encoder, &dit_cfg, instance)
            .unwrap()
            .dit;
        let base_cfg = TrainingConfig {
            p_drop: 1.0,
            ..dit_cfg
        };
        let baseline = train_diffusion(Dit::new(toy_dit_config()).unwrap(), vae.clone(), &encoder, &base_cfg, instance)
            .unwrap()
            .dit;
        Toy {
            encoder,
            vae,
            vae_secs,
            dit,
            baseline,
            dit_secs: start.elapsed().as_secs_f64(),
            held_out,
        }
    })
}

// 3. LA-VAE

fn vae_total(vae: &LaVae, series: &[&[f64]], seed: u64) -> f64 {
    let mut tape = Tape::new();
    let slot = tape.bind_frozen(&vae.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = vae.forward_group(&mut tape, slot, series, EncodeMode::Train, &mut rng);
    let l = vae_loss_tape(&mut tape, f.x, f.x_hat, f.h, f.h_hat, f.mean, f.logvar, 0.1, 1e-2);
    tape.scalar(l.total)
}

fn c3() -> Outcome {
    let start = Instant::now();
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    let vae = LaVae::new(VaeConfig::default()).unwrap();
    let mut fidelity = true;
    for len in 24..=96 {
        let x: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
        fidelity &= vae.reconstruct(&x).unwrap().len() == len;
        fidelity &= vae.decode_grid(&LatentGrid::noise(16, &mut rng), len).unwrap().len() == len;
    }
    c.check(fidelity, "length fidelity 24..=96");

    let mut resample = 0.0f64;
    for tokens in [1, 2, 3, 6, 12, 16, 24, 32] {
        let k = rng.random_range(-3.0..3.0);
        let h = LatentSequence(Matrix::filled(tokens, 16, k));
        let z = upsample(&h, 16).unwrap();
        resample = resample.max(z.matrix().as_slice().iter().map(|v| (v - k).abs()).fold(0.0, f64::max));
        let back = downsample(&LatentGrid::filled(16, k), tokens).unwrap();
        resample = resample.max(back.0.as_slice().iter().map(|v| (v - k).abs()).fold(0.0, f64::max));
        if tokens > 1 {
            // affine along the token axis, column-dependent coefficients
            let a: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let pos = |i: usize, n: usize| i as f64 / (n - 1) as f64;
            let hs = LatentSequence(Matrix::from_fn(tokens, 16, |i, j| a[j] + b[j] * pos(i, tokens)));
            let up = upsample(&hs, 16).unwrap();
            let expect = Matrix::from_fn(16, 16, |i, j| a[j] + b[j] * pos(i, 16));
            resample = resample.max(up.matrix().max_abs_diff(&expect));
            let down = downsample(&LatentGrid::new(expect).unwrap(), tokens).unwrap();
            resample = resample.max(down.0.max_abs_diff(&hs.0));
        }
    }
    c.check(resample <= 1e-12, format!("resampling error {resample:.1e}"));

    let mut decomposition = 0.0f64;
    let mut kl_iff = true;
    for _ in 0..100 {
        let n: usize = rng.random_range(4..40);
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let xh: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let tokens = n.div_ceil(4);
        let h = LatentSequence(rand_matrix(tokens, 16, &mut rng));
        let hh = LatentSequence(rand_matrix(tokens, 16, &mut rng));
        let post = VaePosterior {
            mean: rand_matrix(tokens, 16, &mut rng),
            logvar: rand_matrix(tokens, 16, &mut rng),
        };
        let (lambda, beta) = (rng.random_range(0.0..2.0), rng.random_range(0.0..1.0));
        let t = vae_loss(&x, &xh, &h, &hh, &post, lambda, beta).unwrap();
        decomposition = decomposition.max((t.total - (t.reconstruction + lambda * t.consistency + beta * t.kl)).abs());
        kl_iff &= t.kl > 0.0;
        let prior = VaePosterior::prior(tokens, 16);
        kl_iff &= vae_loss(&x, &xh, &h, &hh, &prior, lambda, beta).unwrap().kl == 0.0;
    }
    c.check(decomposition <= 1e-9, "loss decomposition");
    c.check(kl_iff, "KL zero exactly at the prior");

    // gradient of the full objective with the consistency term
    let small = LaVae::new(VaeConfig {
        grid: 8,
        channels: 4,
        init_seed: 11,
        ..VaeConfig::default()
    })
    .unwrap();
    let s1: Vec<f64> = (0..22).map(|i| (i as f64 / 5.0).sin()).collect();
    let s2: Vec<f64> = (0..22).map(|i| i as f64 / 21.0).collect();
    let series: Vec<&[f64]> = vec![&s1, &s2];
    let grads = {
        let mut tape = Tape::new();
        let slot = tape.bind(&small.params);
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let f = small.forward_group(&mut tape, slot, &series, EncodeMode::Train, &mut r);
        let l = vae_loss_tape(&mut tape, f.x, f.x_hat, f.h, f.h_hat, f.mean, f.logvar, 0.1, 1e-2);
        tape.backward(l.total).into_params(slot)
    };
    let ids: Vec<_> = small.params.iter().map(|(id, _, m)| (id, m.len())).collect();
    let mut small = small;
    let mut worst: f64 = 0.0;
    let h = 1e-6;
    for (id, len) in ids {
        for _ in 0..4 {
            let e = rng.random_range(0..len);
            let g = grads.get(id).map_or(0.0, |m| m.as_slice()[e]);
            let orig = small.params.get(id).as_slice()[e];
            small.params.get_mut(id).as_mut_slice()[e] = orig + h;
            let lp = vae_total(&small, &series, 4);
            small.params.get_mut(id).as_mut_slice()[e] = orig - h;
            let lm = vae_total(&small, &series, 4);
            small.params.get_mut(id).as_mut_slice()[e] = orig;
            worst = worst.max(rel_err(g, (lp - lm) / (2.0 * h), 1e-6));
        }
    }
    c.check(worst <= 1e-4, format!("objective gradient relative error {worst:.2e}"));
    c.note(format!("gradient worst relative error {worst:.2e}"));

    let toy = toy();
    let mut per_len = Vec::new();
    for len in LENGTHS {
        let (mut se, mut n) = (0.0, 0usize);
        for d in &toy.held_out {
            for s in d.samples().iter().filter(|s| s.len() == len) {
                let x = normalize(&s.series, NormScheme::Minmax).0;
                let r = toy.vae.reconstruct(&x).unwrap();
                se += x.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                n += len;
            }
        }
        let m = se / n as f64;
        c.check(m <= 0.05, format!("held-out MSE {m:.4} at length {len}"));
        per_len.push(format!("L{len}={m:.4}"));
    }
    c.note(format!("held-out MSE {} after {:.0}s of training", per_len.join(" "), toy.vae_secs));
    // the shared toy build also trains the denoisers; only the VAE share counts here
    let elapsed = start.elapsed().saturating_sub(Duration::from_secs_f64(toy.dit_secs));
    c.finish(elapsed, Duration::from_secs(600))
}

// 4. end-to-end toy generation

fn c4() -> Outcome {
    let start = Instant::now();
    let mut c = Checks::default();
    let toy = toy();
    let sampler = SamplerConfig::default();
    let mut rates = Vec::new();
    for (caption, sign) in [("increasing", 1.0), ("decreasing", -1.0)] {
        let cond = toy.encoder.encode(caption).unwrap();
        for len in LENGTHS {
            let reqs: Vec<GenerationRequest> = (0..100)
                .map(|seed| GenerationRequest {
                    condition: cond.clone(),
                    length: len,
                    seed,
                })
                .collect();
            let out = generate_batch(&toy.vae, &toy.dit, &reqs, &sampler, Execution::Parallel).unwrap();
            let hits = out.iter().filter(|s| sign * ls_slope(s) > 0.0).count();
            c.check(hits >= 90, format!("{caption} at {len}: {hits}/100"));
            rates.push(format!("{caption}@{len}={hits}"));
        }
    }
    c.note(format!("matching slope sign per 100 seeds: {}", rates.join(" ")));

    let samples: Vec<&CaptionedSample> = toy.held_out[0]
        .samples()
        .iter()
        .filter(|s| s.caption.contains("increasing") || s.caption.contains("decreasing"))
        .collect();
    let truths: Vec<Vec<f64>> = samples.iter().map(|s| normalize(&s.series, NormScheme::Minmax).0).collect();
    let cond_reqs: Vec<GenerationRequest> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| GenerationRequest {
            condition: toy.encoder.encode(&s.caption).unwrap(),
            length: s.len(),
            seed: 1000 + i as u64,
        })
        .collect();
    let base_reqs: Vec<GenerationRequest> = cond_reqs
        .iter()
        .map(|r| GenerationRequest {
            condition: null_condition(64),
            ..r.clone()
        })
        .collect();
    let cond_out = generate_batch(&toy.vae, &toy.dit, &cond_reqs, &sampler, Execution::Parallel).unwrap();
    let unguided = SamplerConfig {
        cfg_scale: 0.0,
        ..sampler
    };
    let base_out = generate_batch(&toy.vae, &toy.baseline, &base_reqs, &unguided, Execution::Parallel).unwrap();
    let w_cond = wape(&truths, &cond_out).unwrap();
    let w_base = wape(&truths, &base_out).unwrap();
    let gain = 1.0 - w_cond / w_base;
    c.check(gain >= 0.2, format!("relative WAPE improvement {gain:.3}"));
    c.note(format!(
        "WAPE conditional {w_cond:.4} vs unconditional {w_base:.4} on {} series (gain {:.1}%)",
        truths.len(),
        100.0 * gain
    ));
    let total = toy.vae_secs + toy.dit_secs + start.elapsed().as_secs_f64();
    c.note(format!("training + evaluation {total:.0}s"));
    c.finish(Duration::from_secs_f64(total), Duration::from_secs(1800))
}

// 5. two-point distributional oracle

fn c5() -> Outcome {
    let start = Instant::now();
    let mut c = Checks::default();
    let enc = OfflineEncoder::new(16);
    let conds = [enc.encode("upper mode").unwrap(), enc.encode("lower mode").unwrap()];
    let targets = [1.0, -1.0];
    let mut dit = Dit::new(DenoiserConfig {
        grid: 1,
        patch: 1,
        d_model: 32,
        depth: 2,
        heads: 2,
        d_text: 16,
        time_freq_dim: 32,
        mlp_ratio: 4,
        init_seed: 7,
        zero_init: true,
    })
    .unwrap();
    let mut adam = Adam::new(&dit.params, 1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = 64;
    for _ in 0..3000 {
        let mut zt = Vec::with_capacity(batch);
        let mut v = Vec::with_capacity(batch);
        let mut ts = Vec::with_capacity(batch);
        let mut cs = Vec::with_capacity(batch);
        for _ in 0..batch {
            let k = rng.random_range(0..2);
            let z0: f64 = rng.sample(StandardNormal);
            let z1 = targets[k];
            let t = sample_training_time(&mut rng);
            zt.push(t * z1 + (1.0 - t) * z0);
            v.push(z1 - z0);
            ts.push(t);
            cs.push(condition_dropout(&conds[k], 0.1, &mut rng));
        }
        let grads = {
            let mut tape = Tape::new();
            let slot = tape.bind(&dit.params);
            let x = tape.constant(Matrix::from_vec(batch, 1, zt));
            let y = dit.forward_tape(&mut tape, slot, x, &ts, &cs);
            let tg = tape.constant(Matrix::from_vec(batch, 1, v));
            let l = tape.mse(y, tg);
            tape.backward(l).into_params(slot)
        };
        adam.step(&mut dit.params, &grads);
    }
    let sampler = SamplerConfig {
        steps: 30,
        cfg_scale: 2.0,
        seed: 0,
    };
    let n = 400;
    let mut means = Vec::new();
    for (cond, target) in conds.iter().zip(targets) {
        let z0: Vec<LatentGrid> = (0..n).map(|s| initial_noise(1, 10_000 + s as u64)).collect();
        let out = ode_sample_batch(&dit, &vec![cond.clone(); n], &sampler, z0).unwrap();
        let mean = out.iter().map(|z| z.matrix().get(0, 0)).sum::<f64>() / n as f64;
        c.check((mean - target).abs() <= 0.15, format!("mean {mean:.3} for target {target}"));
        means.push(format!("{target:+} -> {mean:+.3}"));
    }
    c.note(format!("sample means over {n} seeds: {}", means.join(" ")));
    c.finish(start.elapsed(), Duration::from_secs(300))
}

// 6. metrics

struct Oracle<'a>(&'a Dataset);

impl SeriesGenerator for Oracle<'_> {
    fn generate(&self, tasks: &[GenTask], _: &SamplerConfig) -> Vec<Result<Vec<f64>>> {
        tasks
            .iter()
            .map(|t| Ok(normalize(&self.0.samples()[t.sample_index].series, NormScheme::Minmax).0))
            .collect()
    }
}

fn brute_mrr(cands: &[Vec<Vec<f64>>], truths: &[Vec<f64>], threshold: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    };
    let mut sum = 0.0;
    for (cs, y) in cands.iter().zip(truths) {
        // smallest qualifying rank, found by scanning every candidate
        let mut best = usize::MAX;
        for (r, c) in cs.iter().enumerate() {
            if cos(c, y) > threshold && r + 1 < best {
                best = r + 1;
            }
        }
        if best != usize::MAX {
            sum += 1.0 / best as f64;
        }
    }
    sum / truths.len() as f64
}

fn c6() -> Outcome {
    let start = Instant::now();
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut scale_err = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..30);
        let y: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let base = wape(&[y.clone()], &[g.clone()]).unwrap();
        let k: f64 = rng.random_range(-100.0..100.0);
        if k == 0.0 {
            continue;
        }
        let scaled = wape(&[y.iter().map(|v| k * v).collect()], &[g.iter().map(|v| k * v).collect()]).unwrap();
        scale_err = scale_err.max(rel_err(base, scaled, 1e-300));
        let p2 = 2f64.powi(rng.random_range(-20..20));
        let exact = wape(&[y.iter().map(|v| p2 * v).collect()], &[g.iter().map(|v| p2 * v).collect()]).unwrap();
        c.check(exact == base, "WAPE invariance under power-of-two scaling");
    }
    c.check(scale_err <= 1e-12, format!("WAPE scale invariance {scale_err:.1e}"));

    let h = wape(&[vec![1.0, 2.0, 3.0]], &[vec![2.0, 2.0, 2.0]]).unwrap();
    c.check((h - 0.3333).abs() < 5e-5, format!("hand WAPE {h:.4}"));
    c.check(mse(&[vec![1.0, 2.0, 3.0]], &[vec![2.0, 2.0, 2.0]]).unwrap() == 2.0 / 3.0, "hand MSE");

    let truth = vec![1.0, 2.0, 3.0];
    for r in 1..=10 {
        let mut cands = vec![vec![-1.0, 0.0, 1.0]; 10];
        cands[r - 1] = truth.clone();
        let m = mrr_at_10(&[cands], &[truth.clone()], 0.9).unwrap();
        c.check(m == 1.0 / r as f64, format!("MRR rank {r}"));
    }
    let mut agree = true;
    let mut in_range = true;
    for _ in 0..300 {
        let q = rng.random_range(1..6);
        let len = rng.random_range(2..6);
        let truths: Vec<Vec<f64>> = (0..q).map(|_| (0..len).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let cands: Vec<Vec<Vec<f64>>> = truths
            .iter()
            .map(|y| {
                (0..10)
                    .map(|_| y.iter().map(|v| v + 0.6 * rng.sample::<f64, _>(StandardNormal)).collect())
                    .collect()
            })
            .collect();
        let threshold = rng.random_range(0.5..0.99);
        let m = mrr_at_10(&cands, &truths, threshold).unwrap();
        agree &= (m - brute_mrr(&cands, &truths, threshold)).abs() < 1e-15;
        in_range &= (0.0..=1.0).contains(&m);
        // permuting candidates moves the rank with them
        let mut perm: Vec<usize> = (0..10).collect();
        for i in (1..10).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted: Vec<Vec<Vec<f64>>> = cands.iter().map(|cs| perm.iter().map(|&j| cs[j].clone()).collect()).collect();
        let mp = mrr_at_10(&permuted, &truths, threshold).unwrap();
        agree &= (mp - brute_mrr(&permuted, &truths, threshold)).abs() < 1e-15;
    }
    c.check(agree, "MRR brute-force agreement");
    c.check(in_range, "MRR in [0, 1]");

    let data = &make_synth(&SynthConfig {
        per_length: 4,
        seed: 12,
        ..SynthConfig::default()
    })
    .unwrap()[0];
    let report = evaluate(&Oracle(data), std::slice::from_ref(data), &EvalConfig::default()).unwrap();
    let o = &report.overall;
    c.check(
        o.wape == Some(0.0) && o.mse == Some(0.0) && o.mrr_at_10 == Some(1.0),
        format!("oracle report {:?} {:?} {:?}", o.wape, o.mse, o.mrr_at_10),
    );
    c.note("oracle generator scores WAPE 0, MSE 0, MRR@10 1");
    c.finish(start.elapsed(), Duration::from_secs(5))
}

// 7. interleaved-training fidelity

fn c7() -> Outcome {
    let start = Instant::now();
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sizes = [3usize, 5, 7, 1, 4];
    let datasets: Vec<Dataset> = sizes
        .iter()
        .enumerate()
        .map(|(m, &n)| {
            let samples = (0..n)
                .map(|i| CaptionedSample {
                    series: vec![0.0; 8 + 4 * m],
                    caption: format!("d{m} s{i}"),
                    level: Level::Instance,
                    domain: String::new(),
                    source_id: format!("{m}-{i}"),
                })
                .collect();
            Dataset::new(format!("d{m}"), samples).unwrap()
        })
        .collect();
    let total: usize = sizes.iter().sum();
    let draws = 100_000;
    let mut counts: HashMap<String, usize> = HashMap::new();
    for _ in 0..draws {
        let s = dataset_sampling(&datasets, &mut rng).unwrap();
        *counts.entry(s.source_id.clone()).or_default() += 1;
    }
    let expected = draws as f64 / total as f64;
    let chi2: f64 = counts.values().map(|&o| (o as f64 - expected).powi(2) / expected).sum::<f64>()
        + (total - counts.len()) as f64 * expected;
    let p = 1.0 - ChiSquared::new((total - 1) as f64).unwrap().cdf(chi2);
    c.check(p > 0.001, format!("chi-square p = {p:.4}"));
    c.note(format!("chi-square {chi2:.2} on {} dof, p = {p:.3}", total - 1));

    let synth = make_synth(&SynthConfig {
        per_length: 6,
        lengths: vec![24, 48],
        seed: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    let vae_cfg = TrainingConfig {
        iterations: 9,
        batch_size: 8,
        lengths: vec![24, 48],
        ..TrainingConfig::for_phase(Phase::Vae)
    };
    let small = LaVae::new(VaeConfig {
        channels: 4,
        ..VaeConfig::default()
    })
    .unwrap();
    let out = train_vae(small, &vae_cfg, &synth).unwrap();
    let multi = out.log.iter().filter(|r| r.groups.len() > 1).count();
    let counters = out.log.iter().enumerate().all(|(i, r)| r.updates == i as u64 + 1);
    c.check(out.updates == 9 && counters, "one VAE update per iteration");
    c.check(multi > 0, "some iterations span several lengths");
    let dit_cfg = TrainingConfig {
        iterations: 6,
        batch_size: 8,
        lengths: vec![24, 48],
        ..TrainingConfig::for_phase(Phase::Diffusion)
    };
    let enc = OfflineEncoder::new(16);
    let dit = Dit::new(DenoiserConfig {
        d_model: 16,
        depth: 1,
        heads: 2,
        d_text: 16,
        ..DenoiserConfig::default()
    })
    .unwrap();
    let d = train_diffusion(dit, out.model, &enc, &dit_cfg, &synth).unwrap();
    let counters = d.log.iter().enumerate().all(|(i, r)| r.updates == i as u64 + 1);
    c.check(d.updates == 6 && counters, "one denoiser update per iteration");
    c.note(format!("updates: VAE {} over 9 iterations ({multi} multi-length), denoiser {} over 6", out.updates, d.updates));

    let cond = ConditionEmbedding::new(vec![0.5; 8]);
    let n = 10_000;
    let p_drop = 0.1;
    let dropped = (0..n).filter(|_| condition_dropout(&cond, p_drop, &mut rng).is_null()).count();
    let rate = dropped as f64 / n as f64;
    let half = 2.5758 * (p_drop * (1.0 - p_drop) / n as f64).sqrt();
    c.check((rate - p_drop).abs() <= half, format!("dropout rate {rate:.4}"));
    c.note(format!("dropout rate {rate:.4} within {p_drop}±{half:.4}"));
    c.finish(start.elapsed(), Duration::from_secs(300))
}

// 8. caption pipeline

fn brute_select(e: &[ConditionEmbedding]) -> usize {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scores: Vec<f64> = (0..e.len())
        .map(|i| {
            let a = e[i].vector();
            if norm(a) == 0.0 {
                return -1.0;
            }
            let mut s = 0.0;
            for (j, other) in e.iter().enumerate() {
                if j == i {
                    continue;
                }
                let b = other.vector();
                let nb = norm(b);
                if nb > 0.0 {
                    s += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * nb);
                }
            }
            s / (e.len() - 1) as f64
        })
        .collect();
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    best
}

fn pipeline_run(corpus: &[RawSeries], endpoint: &str, cache: &Path, out: &Path, m: usize) -> (usize, Vec<u8>, Vec<u8>) {
    let mut cfg = CompletionClientConfig::new(endpoint, "mock-model");
    cfg.cache_path = Some(cache.to_path_buf());
    cfg.max_tokens = m;
    cfg.max_retries = 0;
    cfg.mode = RequestMode::Batched;
    let client = HttpCompletionClient::new(cfg).unwrap();
    let pcfg = PipelineConfig {
        fragments_per_series: 3,
        token_limit: m,
        ..PipelineConfig::default()
    };
    let res = build_fragment_dataset(corpus, &SeedPrompt::shipped(), &client, &OfflineEncoder::new(64), &pcfg, Some(out)).unwrap();
    assert!(res.skipped.is_empty(), "{:?}", res.skipped);
    (
        client.network_calls(),
        std::fs::read(out).unwrap(),
        std::fs::read(scores_path(out)).unwrap(),
    )
}

fn c8() -> Outcome {
    let start = Instant::now();
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut agree = 0;
    for k in 0..1000 {
        let n = rng.random_range(2..8);
        let dim = rng.random_range(2..10);
        let mut e: Vec<ConditionEmbedding> = (0..n)
            .map(|_| ConditionEmbedding::new((0..dim).map(|_| rng.sample(StandardNormal)).collect()))
            .collect();
        if k % 10 == 0 {
            e[n - 1] = e[0].clone();
        }
        if k % 17 == 0 {
            e[0] = ConditionEmbedding::new(vec![0.0; dim]);
        }
        let names: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
        if select_best(&names, &e).unwrap() == brute_select(&e) {
            agree += 1;
        }
    }
    c.check(agree == 1000, format!("select_best agreement {agree}/1000"));

    let dir = tempfile::tempdir().unwrap();
    let corpus: Vec<RawSeries> = (0..4)
        .map(|k| RawSeries {
            source_id: format!("r{k}"),
            series: (0..36).map(|i| ((i * (k + 1)) as f64 / 7.0).sin() + i as f64 * (k as f64 - 1.5) / 10.0).collect(),
            domain: "test".into(),
        })
        .collect();
    let cache = dir.path().join("llm_cache.jsonl");
    let runs: Vec<(usize, Vec<u8>, Vec<u8>)> = {
        let server = MockServer::chat(trend_caption_responder).unwrap();
        let url = server.url();
        let cold = pipeline_run(&corpus, &url, &cache, &dir.path().join("cold.jsonl"), 30);
        drop(server);
        // the endpoint is gone: warm runs are served from the cache alone
        let warm1 = pipeline_run(&corpus, &url, &cache, &dir.path().join("warm1.jsonl"), 30);
        let warm2 = pipeline_run(&corpus, &url, &cache, &dir.path().join("warm2.jsonl"), 30);
        vec![cold, warm1, warm2]
    };
    c.check(runs[1].0 == 0 && runs[2].0 == 0, "warm runs make no requests");
    c.check(runs[1].1 == runs[2].1 && runs[1].2 == runs[2].2, "warm runs byte-identical");
    c.check(runs[0].1 == runs[1].1 && runs[0].2 == runs[1].2, "cold and warm runs byte-identical");

    let long = MockServer::chat(|_prompt: &str, call: usize| {
        Some((0..50).map(|i| format!("w{}", (i + call) % 7)).collect::<Vec<_>>().join(" "))
    })
    .unwrap();
    let mut within = true;
    for m in [8, 30] {
        let (_, data, _) = pipeline_run(
            &corpus,
            &long.url(),
            &dir.path().join(format!("long_cache_{m}.jsonl")),
            &dir.path().join(format!("long_{m}.jsonl")),
            m,
        );
        for line in std::str::from_utf8(&data).unwrap().lines() {
            let s: CaptionedSample = serde_json::from_str(line).unwrap();
            within &= s.caption.split_whitespace().count() <= m;
        }
    }
    for run in &runs {
        for line in std::str::from_utf8(&run.1).unwrap().lines() {
            let s: CaptionedSample = serde_json::from_str(line).unwrap();
            within &= s.caption.split_whitespace().count() <= 30;
        }
    }
    c.check(within, "captions within the token limit");
    c.note(format!("{agree}/1000 selections agree; {} cold requests; warm reruns byte-identical", runs[0].0));
    c.finish(start.elapsed(), Duration::from_secs(120))
}

// 9. sweep harness

fn c9() -> Outcome {
    let start = Instant::now();
    let mut c = Checks::default();
    let toy = toy();
    let subset: Vec<CaptionedSample> = LENGTHS
        .iter()
        .flat_map(|&l| toy.held_out[0].samples().iter().filter(move |s| s.len() == l).take(2).cloned())
        .collect();
    let data = Dataset::new("held-out", subset).unwrap();
    let generator = ModelGenerator::new(&toy.vae, &toy.dit, &toy.encoder, Execution::Parallel);
    let cfg_grid = [1.0, 4.0, 7.0, 10.0, 13.0];
    let steps_grid = [10, 20, 50];
    let base = EvalConfig::default();
    let report = sweep(&generator, std::slice::from_ref(&data), &base, &cfg_grid, &steps_grid).unwrap();
    c.check(report.cells.len() == 5 && report.cells.iter().all(|r| r.len() == 3), "5x3 cells");
    let mut finite = true;
    let mut settings = true;
    for (i, row) in report.cells.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            finite &= cell.is_finite() && cell.errors.is_empty();
            let s = &cell.settings;
            settings &= s.cfg_scale == cfg_grid[i] && s.steps == steps_grid[j] && s.threshold == base.threshold;
        }
    }
    c.check(finite, "finite metrics in every cell");
    c.check(settings, "settings recorded per cell");
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    report.write_csv(&csv).unwrap();
    let rows = std::fs::read_to_string(&csv).unwrap().lines().count();
    c.check(rows == 16, format!("csv rows {rows}"));
    let wapes: Vec<String> = report
        .matrix(t2s_core::metrics::Metric::Wape)
        .iter()
        .map(|r| r.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join("/"))
        .collect();
    c.note(format!("WAPE rows by guidance scale: {}", wapes.join(" | ")));
    c.finish(start.elapsed(), Duration::from_secs(600))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("flow-matching identities and Euler convergence", c1),
        ("denoiser structure and gradients", c2),
        ("length-adaptive VAE", c3),
        ("end-to-end toy generation", c4),
        ("two-point distributional oracle", c5),
        ("evaluation metrics", c6),
        ("interleaved training fidelity", c7),
        ("caption pipeline", c8),
        ("sweep harness", c9),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| Outcome {
            pass: false,
            detail: format!(
                "panicked: {}",
                e.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            ),
        });
        if !outcome.pass {
            failures += 1;
        }
        println!(
            "criterion {n} {}: {name} ({:.1}s): {}",
            if outcome.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            outcome.detail
        );
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
