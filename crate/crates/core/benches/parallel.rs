use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use t2s_core::dit::{DenoiserConfig, Dit};
use t2s_core::flow::SamplerConfig;
use t2s_core::par::Execution;
use t2s_core::synth::{make_synth, SynthConfig};
use t2s_core::text::{OfflineEncoder, TextEncoder};
use t2s_core::trainer::{generate_batch, train_vae, GenerationRequest, Phase, TrainingConfig};
use t2s_core::vae::{LaVae, VaeConfig};

fn models() -> (LaVae, Dit) {
    let vae = LaVae::new(VaeConfig {
        channels: 8,
        ..VaeConfig::default()
    })
    .unwrap();
    let dit = Dit::new(DenoiserConfig {
        d_model: 32,
        depth: 2,
        heads: 2,
        d_text: 32,
        zero_init: false,
        ..DenoiserConfig::default()
    })
    .unwrap();
    (vae, dit)
}

fn sampling(c: &mut Criterion) {
    let (vae, dit) = models();
    let enc = OfflineEncoder::new(32);
    let cond = enc.encode("increasing then flat").unwrap();
    let reqs: Vec<GenerationRequest> = (0..16)
        .map(|seed| GenerationRequest {
            condition: cond.clone(),
            length: 48,
            seed,
        })
        .collect();
    let sampler = SamplerConfig {
        steps: 10,
        ..SamplerConfig::default()
    };
    let mut g = c.benchmark_group("generate_batch");
    g.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| generate_batch(&vae, &dit, &reqs, &sampler, exec).unwrap())
        });
    }
    g.finish();
}

fn vae_training(c: &mut Criterion) {
    let data = make_synth(&SynthConfig {
        per_length: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    let (vae, _) = models();
    let mut g = c.benchmark_group("train_vae_5_iterations");
    g.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        let cfg = TrainingConfig {
            iterations: 5,
            batch_size: 16,
            execution: exec,
            ..TrainingConfig::for_phase(Phase::Vae)
        };
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &cfg, |b, cfg| {
            b.iter(|| train_vae(vae.clone(), cfg, &data).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, sampling, vae_training);
criterion_main!(benches);
