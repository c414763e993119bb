//! Deterministic synthetic corpus with templated trend captions.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{normalize, point_captions_to_window, CaptionedSample, Dataset, Level, NormScheme};
use crate::error::{arg, Result};
use crate::par::stream_seed;

pub const SYNTH_LENGTHS: [usize; 3] = [24, 48, 96];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Increasing,
    Decreasing,
    Sinusoid,
    StepUp,
    StepDown,
    Flat,
}

impl Shape {
    pub const ALL: [Shape; 6] = [
        Shape::Increasing,
        Shape::Decreasing,
        Shape::Sinusoid,
        Shape::StepUp,
        Shape::StepDown,
        Shape::Flat,
    ];

    /// Caption templates for a whole series of this shape; the first is the bare keyword.
    pub fn templates(self) -> &'static [&'static str] {
        match self {
            Shape::Increasing => &["increasing", "steadily increasing", "an increasing trend", "the series is increasing"],
            Shape::Decreasing => &["decreasing", "steadily decreasing", "a decreasing trend", "the series is decreasing"],
            Shape::Sinusoid => &["periodic", "periodic oscillation", "a seasonal wave", "the series oscillates"],
            Shape::StepUp => &["step up", "a sudden step up", "level shift upward"],
            Shape::StepDown => &["step down", "a sudden step down", "level shift downward"],
            Shape::Flat => &["flat", "stable and flat", "the series stays flat"],
        }
    }

    /// Short word used in fragment captions.
    pub fn word(self) -> &'static str {
        match self {
            Shape::Increasing => "increasing",
            Shape::Decreasing => "decreasing",
            Shape::Sinusoid => "oscillating",
            Shape::StepUp => "stepping up",
            Shape::StepDown => "stepping down",
            Shape::Flat => "flat",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub per_length: usize,
    pub lengths: Vec<usize>,
    pub seed: u64,
    /// Noise standard deviation relative to the signal amplitude.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            per_length: 300,
            lengths: SYNTH_LENGTHS.to_vec(),
            seed: 0,
            noise: 0.02,
        }
    }
}

/// Noise-free profile of `shape` over `len` points in `[0, 1]`.
pub fn profile(shape: Shape, len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let denom = (len - 1).max(1) as f64;
    match shape {
        Shape::Increasing => (0..len).map(|i| i as f64 / denom).collect(),
        Shape::Decreasing => (0..len).map(|i| 1.0 - i as f64 / denom).collect(),
        Shape::Sinusoid => {
            let cycles = rng.random_range(1.0..3.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (0..len)
                .map(|i| 0.5 + 0.5 * (std::f64::consts::TAU * cycles * i as f64 / denom + phase).sin())
                .collect()
        }
        Shape::StepUp | Shape::StepDown => {
            let at = rng.random_range(len / 4..=(3 * len / 4).max(len / 4));
            let up = shape == Shape::StepUp;
            (0..len).map(|i| if (i >= at) == up { 1.0 } else { 0.0 }).collect()
        }
        Shape::Flat => vec![0.5; len],
    }
}

fn noisy(shape: Shape, len: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let level = rng.random_range(-5.0..5.0);
    let amp = rng.random_range(0.5..3.0);
    let n = Normal::new(0.0, noise.max(0.0) * amp + 1e-12).unwrap();
    profile(shape, len, rng)
        .into_iter()
        .map(|v| level + amp * v + n.sample(rng))
        .collect()
}

fn point_word(v: f64) -> &'static str {
    if v < 1.0 / 3.0 {
        "low"
    } else if v < 2.0 / 3.0 {
        "mid"
    } else {
        "high"
    }
}

/// Instance, fragment and point level datasets, `per_length` records per length each.
pub fn make_synth(cfg: &SynthConfig) -> Result<[Dataset; 3]> {
    if cfg.per_length == 0 || cfg.lengths.is_empty() {
        return arg("synthetic corpus needs at least one record and one length");
    }
    if let Some(l) = cfg.lengths.iter().find(|&&l| l < 4) {
        return arg(format!("synthetic length {l} is too short"));
    }
    let mut instance = Vec::new();
    let mut fragment = Vec::new();
    let mut point = Vec::new();
    for &len in &cfg.lengths {
        for i in 0..cfg.per_length {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, len as u64, i as u64));
            let shape = Shape::ALL[i % Shape::ALL.len()];
            let t = shape.templates();
            instance.push(CaptionedSample {
                series: noisy(shape, len, cfg.noise, &mut rng),
                caption: t[rng.random_range(0..t.len())].to_string(),
                level: Level::Instance,
                domain: "synthetic".into(),
                source_id: format!("synth-instance-{len}-{i}"),
            });

            let a = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
            let b = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
            let cut = len / 2;
            let mut s = noisy(a, cut, cfg.noise, &mut rng);
            let offset = s[cut - 1];
            let tail = noisy(b, len - cut, cfg.noise, &mut rng);
            let shift = offset - tail[0];
            s.extend(tail.into_iter().map(|v| v + shift));
            fragment.push(CaptionedSample {
                series: s,
                caption: format!("{} then {}", a.word(), b.word()),
                level: Level::Fragment,
                domain: "synthetic".into(),
                source_id: format!("synth-fragment-{len}-{i}"),
            });

            let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
            let series = noisy(shape, len, cfg.noise, &mut rng);
            let (norm, _) = normalize(&series, NormScheme::Minmax);
            let words: Vec<String> = norm.iter().map(|&v| point_word(v).to_string()).collect();
            point.push(CaptionedSample {
                series,
                caption: point_captions_to_window(&words),
                level: Level::Point,
                domain: "synthetic".into(),
                source_id: format!("synth-point-{len}-{i}"),
            });
        }
    }
    Ok([
        Dataset::new("synth-instance", instance)?,
        Dataset::new("synth-fragment", fragment)?,
        Dataset::new("synth-point", point)?,
    ])
}

/// Write the three levels as `<dir>/{instance,fragment,point}.jsonl`.
pub fn write_synth(cfg: &SynthConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let sets = make_synth(cfg)?;
    let mut out = Vec::new();
    for (d, name) in sets.iter().zip(["instance", "fragment", "point"]) {
        let p = dir.join(format!("{name}.jsonl"));
        d.write_jsonl(&p)?;
        out.push(p);
    }
    Ok(out)
}

/// Ordinary least-squares slope of `y` against `0..n`.
pub fn ls_slope(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    if y.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in y.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (v - my);
        sxx += dx * dx;
    }
    sxy / sxx
}
