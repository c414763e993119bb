//! Captioned series, file loading, normalization, segmentation and the
//! interleaved mixed-length sampler.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};

/// Caption granularity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Point,
    Fragment,
    Instance,
}

impl std::str::FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "point" => Ok(Level::Point),
            "fragment" => Ok(Level::Fragment),
            "instance" => Ok(Level::Instance),
            other => arg(format!("unknown caption level {other:?}")),
        }
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Level::Point => "point",
            Level::Fragment => "fragment",
            Level::Instance => "instance",
        })
    }
}

/// One series with its caption. Serialises to exactly the JSONL record layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionedSample {
    pub series: Vec<f64>,
    pub caption: String,
    pub level: Level,
    #[serde(default)]
    pub domain: String,
    #[serde(default)]
    pub source_id: String,
}

impl CaptionedSample {
    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.series.len() < 2 {
            return arg(format!("series length {} is below 2", self.series.len()));
        }
        if let Some(i) = self.series.iter().position(|v| !v.is_finite()) {
            return arg(format!("series value {i} is not finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    samples: Vec<CaptionedSample>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, samples: Vec<CaptionedSample>) -> Result<Self> {
        let name = name.into();
        let Some(first) = samples.first() else {
            return Err(Error::EmptyDataset(name));
        };
        let level = first.level;
        if let Some(bad) = samples.iter().position(|s| s.level != level) {
            return arg(format!(
                "dataset {name}: sample {bad} has level {} but the dataset is {level}",
                samples[bad].level
            ));
        }
        for (i, s) in samples.iter().enumerate() {
            s.validate()
                .map_err(|e| Error::Argument(format!("dataset {name}: sample {i}: {e}")))?;
        }
        Ok(Self { name, samples })
    }

    pub fn samples(&self) -> &[CaptionedSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn level(&self) -> Level {
        self.samples[0].level
    }

    /// Distinct series lengths, ascending.
    pub fn lengths(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.samples.iter().map(CaptionedSample::len).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// One dataset per distinct length, named `<name>/L<len>`.
    pub fn split_by_length(&self) -> Vec<Dataset> {
        let mut groups: BTreeMap<usize, Vec<CaptionedSample>> = BTreeMap::new();
        for s in &self.samples {
            groups.entry(s.len()).or_default().push(s.clone());
        }
        groups
            .into_iter()
            .map(|(len, samples)| Dataset {
                name: format!("{}/L{len}", self.name),
                samples,
            })
            .collect()
    }

    /// Random subset keeping `fraction` of the samples (at least one), in original order.
    pub fn subset(&self, fraction: f64, rng: &mut impl Rng) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return arg(format!("subset fraction {fraction} outside (0, 1]"));
        }
        let keep = ((self.len() as f64 * fraction).round() as usize).clamp(1, self.len());
        let mut idx: Vec<usize> = (0..self.len()).collect();
        for i in 0..keep {
            let j = rng.random_range(i..idx.len());
            idx.swap(i, j);
        }
        let mut chosen = idx[..keep].to_vec();
        chosen.sort_unstable();
        Ok(Dataset {
            name: format!("{}@{fraction}", self.name),
            samples: chosen.into_iter().map(|i| self.samples[i].clone()).collect(),
        })
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.samples)
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Jsonl,
    Csv,
}

impl FileFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => FileFormat::Csv,
            _ => FileFormat::Jsonl,
        }
    }
}

/// Load a dataset, named after the file stem.
pub fn load_dataset(path: &Path, format: FileFormat) -> Result<Dataset> {
    let samples = match format {
        FileFormat::Jsonl => read_jsonl_samples(path)?,
        FileFormat::Csv => read_csv_samples(path)?,
    };
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    if samples.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    Dataset::new(name, samples)
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_jsonl_samples(path: &Path) -> Result<Vec<CaptionedSample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: CaptionedSample =
            serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        sample
            .validate()
            .map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        out.push(sample);
    }
    Ok(out)
}

/// CSV layout: header with `series,caption,level[,domain][,source_id]`;
/// the series column holds whitespace- or `;`-separated numbers.
fn read_csv_samples(path: &Path) -> Result<Vec<CaptionedSample>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(series_col), Some(caption_col), Some(level_col)) =
        (col("series"), col("caption"), col("level"))
    else {
        return Err(parse_err(path, 1, "header must contain series, caption, level"));
    };
    let domain_col = col("domain");
    let source_col = col("source_id");
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let field = |c: usize| rec.get(c).unwrap_or("").to_string();
        let series = field(series_col)
            .split(|c: char| c.is_whitespace() || c == ';')
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| parse_err(path, line, format!("bad value {t:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let level: Level = field(level_col)
            .parse()
            .map_err(|e: Error| parse_err(path, line, e.to_string()))?;
        let sample = CaptionedSample {
            series,
            caption: field(caption_col),
            level,
            domain: domain_col.map(field).unwrap_or_default(),
            source_id: source_col.map(field).unwrap_or_default(),
        };
        sample
            .validate()
            .map_err(|e| parse_err(path, line, e.to_string()))?;
        out.push(sample);
    }
    Ok(out)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e
        .position()
        .map(|p| p.line() as usize)
        .unwrap_or_default();
    parse_err(path, line, e.to_string())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormScheme {
    #[default]
    Minmax,
    Zscore,
}

/// Per-sample statistics needed to undo [`normalize`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum NormalizationParams {
    Minmax { min: f64, max: f64 },
    Zscore { mean: f64, std: f64 },
}

const DEGENERATE: f64 = 1e-12;

pub fn normalize(series: &[f64], scheme: NormScheme) -> (Vec<f64>, NormalizationParams) {
    match scheme {
        NormScheme::Minmax => {
            let min = series.iter().copied().fold(f64::INFINITY, f64::min);
            let max = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let range = max - min;
            let out = if range > DEGENERATE {
                series.iter().map(|v| (v - min) / range).collect()
            } else {
                vec![0.0; series.len()]
            };
            (out, NormalizationParams::Minmax { min, max })
        }
        NormScheme::Zscore => {
            let n = series.len().max(1) as f64;
            let mean = series.iter().sum::<f64>() / n;
            let std = (series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let out = if std > DEGENERATE {
                series.iter().map(|v| (v - mean) / std).collect()
            } else {
                vec![0.0; series.len()]
            };
            (out, NormalizationParams::Zscore { mean, std })
        }
    }
}

pub fn denormalize(series: &[f64], params: &NormalizationParams) -> Vec<f64> {
    match *params {
        NormalizationParams::Minmax { min, max } => {
            let range = max - min;
            if range > DEGENERATE {
                series.iter().map(|v| v * range + min).collect()
            } else {
                vec![min; series.len()]
            }
        }
        NormalizationParams::Zscore { mean, std } => {
            if std > DEGENERATE {
                series.iter().map(|v| v * std + mean).collect()
            } else {
                vec![mean; series.len()]
            }
        }
    }
}

/// Split at strictly increasing cut indices in `(0, len)`.
pub fn segment_series(series: &[f64], boundaries: &[usize]) -> Result<Vec<Vec<f64>>> {
    let len = series.len();
    let mut prev = 0;
    for &b in boundaries {
        if b == 0 || b >= len {
            return arg(format!("boundary {b} outside (0, {len})"));
        }
        if b <= prev {
            return arg(format!("boundaries must be strictly increasing, got {boundaries:?}"));
        }
        prev = b;
    }
    let mut out = Vec::with_capacity(boundaries.len() + 1);
    let mut start = 0;
    for &b in boundaries.iter().chain(std::iter::once(&len)) {
        out.push(series[start..b].to_vec());
        start = b;
    }
    Ok(out)
}

/// Cut indices giving `k` near-equal fragments.
pub fn equal_boundaries(len: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > len {
        return arg(format!("cannot split length {len} into {k} fragments"));
    }
    Ok((1..k).map(|j| j * len / k).collect())
}

/// Point-level annotations become one caption per window, in temporal order.
pub fn point_captions_to_window(point_texts: &[String]) -> String {
    point_texts
        .iter()
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Position of one sample inside a list of datasets (both zero-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleLocation {
    pub dataset: usize,
    pub element: usize,
}

/// Uniform sampling over the concatenation of several datasets.
#[derive(Clone, Debug)]
pub struct DatasetSampler {
    /// `offsets[m]` is the number of samples in datasets `0..m`.
    offsets: Vec<usize>,
}

impl DatasetSampler {
    pub fn new(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() {
            return arg("dataset sampling needs at least one dataset");
        }
        if let Some(i) = sizes.iter().position(|&n| n == 0) {
            return arg(format!("dataset {i} is empty"));
        }
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        offsets.push(0);
        for &n in sizes {
            offsets.push(offsets.last().unwrap() + n);
        }
        Ok(Self { offsets })
    }

    pub fn for_datasets(datasets: &[Dataset]) -> Result<Self> {
        Self::new(&datasets.iter().map(Dataset::len).collect::<Vec<_>>())
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Map a one-based global index `j ∈ [1, n]` to its dataset and element.
    pub fn locate(&self, j: usize) -> SampleLocation {
        assert!(j >= 1 && j <= self.total(), "index {j} outside [1, {}]", self.total());
        // first m with offsets[m + 1] >= j
        let m = self.offsets[1..].partition_point(|&end| end < j);
        SampleLocation {
            dataset: m,
            element: j - self.offsets[m] - 1,
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> SampleLocation {
        let j = rng.random_range(1..=self.total());
        self.locate(j)
    }
}

pub fn dataset_sampling<'a>(datasets: &'a [Dataset], rng: &mut impl Rng) -> Result<&'a CaptionedSample> {
    let loc = DatasetSampler::for_datasets(datasets)?.sample(rng);
    Ok(&datasets[loc.dataset].samples[loc.element])
}

/// Draw `batch_size` locations and group them by series length.
pub fn mixed_batch_locations(
    datasets: &[Dataset],
    sampler: &DatasetSampler,
    batch_size: usize,
    rng: &mut impl Rng,
) -> BTreeMap<usize, Vec<SampleLocation>> {
    let mut groups: BTreeMap<usize, Vec<SampleLocation>> = BTreeMap::new();
    for _ in 0..batch_size {
        let loc = sampler.sample(rng);
        let len = datasets[loc.dataset].samples[loc.element].len();
        groups.entry(len).or_default().push(loc);
    }
    groups
}

pub fn make_mixed_batch<'a>(
    datasets: &'a [Dataset],
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<BTreeMap<usize, Vec<&'a CaptionedSample>>> {
    if batch_size == 0 {
        return arg("batch_size must be at least 1");
    }
    let sampler = DatasetSampler::for_datasets(datasets)?;
    Ok(mixed_batch_locations(datasets, &sampler, batch_size, rng)
        .into_iter()
        .map(|(len, locs)| {
            let samples = locs
                .into_iter()
                .map(|l| &datasets[l.dataset].samples[l.element])
                .collect();
            (len, samples)
        })
        .collect())
}
