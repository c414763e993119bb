//! Caption → condition embedding.
//!
//! [`OfflineEncoder`] is a deterministic hashed encoder that needs no network;
//! [`RemoteEmbeddingClient`] talks to any embedding endpoint speaking the
//! `{"model", "input"} → {"data": [{"embedding"}]}` contract and keeps an
//! on-disk JSONL cache keyed by a content hash of (model, caption).

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{arg, config, Error, Result};
use crate::http;

pub const EMBED_API_KEY_VAR: &str = "T2S_EMBED_API_KEY";
pub const DEFAULT_TEXT_DIM: usize = 64;

/// Text condition `C`. The all-zero vector is the null (unconditional) condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionEmbedding {
    vector: Vec<f64>,
}

impl ConditionEmbedding {
    pub fn new(vector: Vec<f64>) -> Self {
        Self { vector }
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn is_null(&self) -> bool {
        self.vector.iter().all(|&v| v == 0.0)
    }

    pub fn dot(&self, other: &ConditionEmbedding) -> f64 {
        self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

pub fn null_condition(d_text: usize) -> ConditionEmbedding {
    ConditionEmbedding::new(vec![0.0; d_text])
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na * nb))
    }
}

pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;

    fn encode(&self, caption: &str) -> Result<ConditionEmbedding>;

    /// Order-preserving batch encode.
    fn encode_batch(&self, captions: &[String]) -> Result<Vec<ConditionEmbedding>> {
        captions.iter().map(|c| self.encode(c)).collect()
    }
}

/// Hashed bag of unigrams and boundary-padded bigrams, each feature mapped to
/// a pseudo-random Gaussian direction and modulated by a sinusoid of its
/// token position, then L2-normalised.
#[derive(Clone, Debug)]
pub struct OfflineEncoder {
    dim: usize,
}

impl OfflineEncoder {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

pub(crate) fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn feature_direction(feature: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(feature.as_bytes());
    let seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

impl TextEncoder for OfflineEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, caption: &str) -> Result<ConditionEmbedding> {
        if self.dim < 8 {
            return arg(format!("text dimension {} is below 8", self.dim));
        }
        let tokens = tokenize(caption);
        if tokens.is_empty() {
            return arg("cannot encode an empty caption; use null_condition instead");
        }
        let d = self.dim;
        let mut acc = vec![0.0; d];
        let mut add = |feature: String, pos: usize, weight: f64| {
            let dir = feature_direction(&feature, d);
            for (k, (a, r)) in acc.iter_mut().zip(dir).enumerate() {
                let freq = 1.0 / 10_000f64.powf((k / 2 * 2) as f64 / d as f64);
                let phase = if k % 2 == 0 { 0.0 } else { std::f64::consts::FRAC_PI_2 };
                let mix = 1.0 + 0.25 * (pos as f64 * freq + phase).sin();
                *a += weight * r * mix;
            }
        };
        for (i, t) in tokens.iter().enumerate() {
            add(format!("u:{t}"), i, 1.0);
        }
        for i in 0..=tokens.len() {
            let left = if i == 0 { "<s>" } else { tokens[i - 1].as_str() };
            let right = tokens.get(i).map_or("</s>", String::as_str);
            add(format!("b:{left} {right}"), i, 1.0);
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        acc.iter_mut().for_each(|x| *x /= norm);
        Ok(ConditionEmbedding::new(acc))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingClientConfig {
    pub endpoint: String,
    pub model: String,
    pub dim: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
}

fn default_timeout() -> f64 {
    30.0
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    200
}

impl EmbeddingClientConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, dim: usize) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            dim,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_ms: default_backoff(),
            cache_path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0) {
            return config("embedding client timeout must be positive");
        }
        if self.dim == 0 {
            return config("embedding dimension must be positive");
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    model: String,
    caption: String,
    embedding: Vec<f64>,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    embedding: Vec<f64>,
}

pub struct RemoteEmbeddingClient {
    config: EmbeddingClientConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
    cache: Mutex<HashMap<String, Vec<f64>>>,
    network_calls: AtomicUsize,
}

pub fn cache_key(model: &str, caption: &str) -> String {
    let mut h = Sha256::new();
    h.update(model.as_bytes());
    h.update([0u8]);
    h.update(caption.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl RemoteEmbeddingClient {
    pub fn new(config: EmbeddingClientConfig) -> Result<Self> {
        config.validate()?;
        let mut cache = HashMap::new();
        if let Some(path) = &config.cache_path {
            if path.exists() {
                for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let entry: CacheLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                        path: path.clone(),
                        line: i + 1,
                        message: e.to_string(),
                    })?;
                    cache.insert(entry.key, entry.embedding);
                }
            }
        }
        Ok(Self {
            agent: http::agent(config.timeout_secs),
            api_key: http::api_key(EMBED_API_KEY_VAR),
            config,
            cache: Mutex::new(cache),
            network_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &EmbeddingClientConfig {
        &self.config
    }

    /// Successful or failed HTTP exchanges attempted by [`fetch_embeddings`](Self::fetch_embeddings).
    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    pub fn fetch_embeddings(&self, captions: &[String]) -> Result<Vec<ConditionEmbedding>> {
        let model = &self.config.model;
        let keys: Vec<String> = captions.iter().map(|c| cache_key(model, c)).collect();
        let mut missing: Vec<String> = Vec::new();
        {
            let cache = self.cache.lock().unwrap();
            for (c, k) in captions.iter().zip(&keys) {
                if !cache.contains_key(k) && !missing.contains(c) {
                    missing.push(c.clone());
                }
            }
        }
        if !missing.is_empty() {
            let body = EmbedRequest {
                model,
                input: &missing,
            };
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            let resp: EmbedResponse = http::post_json(
                &self.agent,
                &self.config.endpoint,
                self.api_key.as_deref(),
                &body,
                self.config.max_retries,
                self.config.backoff_ms,
            )?;
            if resp.data.len() != missing.len() {
                return Err(Error::Transport(format!(
                    "embedding endpoint returned {} vectors for {} inputs",
                    resp.data.len(),
                    missing.len()
                )));
            }
            if let Some(bad) = resp.data.iter().find(|d| d.embedding.len() != self.config.dim) {
                return config(format!(
                    "embedding dimension {} does not match configured {}",
                    bad.embedding.len(),
                    self.config.dim
                ));
            }
            let mut cache = self.cache.lock().unwrap();
            let mut file = match &self.config.cache_path {
                Some(p) => {
                    if let Some(parent) = p.parent() {
                        if !parent.as_os_str().is_empty() {
                            std::fs::create_dir_all(parent)?;
                        }
                    }
                    Some(OpenOptions::new().create(true).append(true).open(p)?)
                }
                None => None,
            };
            for (caption, datum) in missing.iter().zip(resp.data) {
                let key = cache_key(model, caption);
                if let Some(f) = file.as_mut() {
                    let line = CacheLine {
                        key: key.clone(),
                        model: model.clone(),
                        caption: caption.clone(),
                        embedding: datum.embedding.clone(),
                    };
                    serde_json::to_writer(&mut *f, &line)?;
                    f.write_all(b"\n")?;
                }
                cache.insert(key, datum.embedding);
            }
        }
        let cache = self.cache.lock().unwrap();
        Ok(keys
            .iter()
            .map(|k| ConditionEmbedding::new(cache[k].clone()))
            .collect())
    }
}

impl TextEncoder for RemoteEmbeddingClient {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn encode(&self, caption: &str) -> Result<ConditionEmbedding> {
        Ok(self.fetch_embeddings(&[caption.to_string()])?.remove(0))
    }

    fn encode_batch(&self, captions: &[String]) -> Result<Vec<ConditionEmbedding>> {
        self.fetch_embeddings(captions)
    }
}

/// Serializable choice of text encoder, recorded in denoiser manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TextEncoderSpec {
    Offline { dim: usize },
    Remote(EmbeddingClientConfig),
}

impl Default for TextEncoderSpec {
    fn default() -> Self {
        TextEncoderSpec::Offline {
            dim: DEFAULT_TEXT_DIM,
        }
    }
}

impl TextEncoderSpec {
    pub fn dim(&self) -> usize {
        match self {
            TextEncoderSpec::Offline { dim } => *dim,
            TextEncoderSpec::Remote(c) => c.dim,
        }
    }

    pub fn build(&self) -> Result<Box<dyn TextEncoder>> {
        Ok(match self {
            TextEncoderSpec::Offline { dim } => Box::new(OfflineEncoder::new(*dim)),
            TextEncoderSpec::Remote(c) => Box::new(RemoteEmbeddingClient::new(c.clone())?),
        })
    }
}
