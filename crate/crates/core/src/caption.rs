//! Fragment captioning: seed prompts, candidate generation through a chat
//! completion endpoint, and selection by mutual embedding similarity.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{equal_boundaries, segment_series, write_jsonl, CaptionedSample, Dataset, Level};
use crate::error::{arg, config, Error, Result};
use crate::http;
use crate::par::{self, Execution};
use crate::synth::ls_slope;
use crate::text::{cosine, ConditionEmbedding, TextEncoder};

pub const LLM_API_KEY_VAR: &str = "T2S_LLM_API_KEY";
pub const DEFAULT_TOKEN_LIMIT: usize = 30;
pub const DEFAULT_CANDIDATES: usize = 5;
const SHIPPED_SEED_PROMPT: &str = include_str!("../data/seed_prompt.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedPrompt {
    pub version: String,
    #[serde(default)]
    pub note: String,
    pub exemplars: Vec<String>,
    /// Slots: `{M}`, `{exemplars}`, `{length}`, `{values}`, `{min}`, `{max}`, `{mean}`, `{slope}`.
    pub template: String,
}

impl SeedPrompt {
    pub fn shipped() -> Self {
        serde_json::from_str(SHIPPED_SEED_PROMPT).expect("bundled seed prompt is valid JSON")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: SeedPrompt = serde_json::from_slice(&std::fs::read(path)?)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.template.contains("{M}") {
            return config("seed template lacks the {M} token-limit slot");
        }
        if self.exemplars.is_empty() {
            return config("seed prompt needs at least one exemplar");
        }
        Ok(())
    }
}

/// Fill the seed template for one fragment; values are printed with four decimals.
pub fn build_prompt(fragment: &[f64], seeds: &SeedPrompt, m: usize) -> Result<String> {
    if fragment.is_empty() {
        return arg("cannot caption an empty fragment");
    }
    if m < 8 {
        return arg(format!("token limit {m} is below the minimum of 8"));
    }
    seeds.validate()?;
    let f = |v: f64| format!("{v:.4}");
    let values: Vec<String> = fragment.iter().map(|&v| f(v)).collect();
    let min = fragment.iter().copied().fold(f64::INFINITY, f64::min);
    let max = fragment.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = fragment.iter().sum::<f64>() / fragment.len() as f64;
    let exemplars: Vec<String> = seeds.exemplars.iter().map(|e| format!("- {e}")).collect();
    Ok(seeds
        .template
        .replace("{M}", &m.to_string())
        .replace("{exemplars}", &exemplars.join("\n"))
        .replace("{length}", &fragment.len().to_string())
        .replace("{values}", &values.join(", "))
        .replace("{min}", &f(min))
        .replace("{max}", &f(max))
        .replace("{mean}", &f(mean))
        .replace("{slope}", &f(ls_slope(fragment))))
}

/// Keep at most `m` whitespace-separated tokens, joined by single spaces.
pub fn truncate_tokens(text: &str, m: usize) -> String {
    text.split_whitespace().take(m).collect::<Vec<_>>().join(" ")
}

/// A text completion backend returning `n` candidates for one prompt.
pub trait CompletionClient: Sync {
    fn complete(&self, prompt: &str, n: usize) -> Result<Vec<String>>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestMode {
    /// One request asking for all candidates (`"n": 5`).
    #[default]
    Batched,
    /// One request per candidate (`"n": 1`), each retried on its own.
    PerCandidate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionClientConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_m")]
    pub max_tokens: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default)]
    pub mode: RequestMode,
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
}

fn default_m() -> usize {
    DEFAULT_TOKEN_LIMIT
}
fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    200
}

impl CompletionClientConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            max_tokens: default_m(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_ms: default_backoff(),
            mode: RequestMode::default(),
            cache_path: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CompletionCacheLine {
    key: String,
    model: String,
    candidate: usize,
    text: String,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    max_tokens: usize,
    n: usize,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

/// Chat-completions client with an on-disk JSONL cache keyed by (model, prompt, candidate).
pub struct HttpCompletionClient {
    config: CompletionClientConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
    cache: Mutex<HashMap<String, String>>,
    network_calls: AtomicUsize,
}

fn completion_key(model: &str, prompt: &str, candidate: usize) -> String {
    let mut h = Sha256::new();
    h.update(model.as_bytes());
    h.update([0u8]);
    h.update(prompt.as_bytes());
    h.update([0u8]);
    h.update(candidate.to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl HttpCompletionClient {
    pub fn new(cfg: CompletionClientConfig) -> Result<Self> {
        if !(cfg.timeout_secs > 0.0) {
            return config("completion client timeout must be positive");
        }
        let mut cache = HashMap::new();
        if let Some(path) = &cfg.cache_path {
            if path.exists() {
                for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let e: CompletionCacheLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                        path: path.clone(),
                        line: i + 1,
                        message: e.to_string(),
                    })?;
                    cache.insert(e.key, e.text);
                }
            }
        }
        Ok(Self {
            agent: http::agent(cfg.timeout_secs),
            api_key: http::api_key(LLM_API_KEY_VAR),
            config: cfg,
            cache: Mutex::new(cache),
            network_calls: AtomicUsize::new(0),
        })
    }

    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    fn request(&self, prompt: &str, n: usize) -> Result<Vec<String>> {
        self.network_calls.fetch_add(1, Ordering::SeqCst);
        let body = ChatRequest {
            model: &self.config.model,
            messages: vec![ChatMessage {
                role: "user",
                content: prompt,
            }],
            max_tokens: self.config.max_tokens,
            n,
        };
        let resp: ChatResponse = http::post_json(
            &self.agent,
            &self.config.endpoint,
            self.api_key.as_deref(),
            &body,
            self.config.max_retries,
            self.config.backoff_ms,
        )?;
        Ok(resp.choices.into_iter().map(|c| c.message.content).collect())
    }

    fn store(&self, prompt: &str, found: &[(usize, String)]) -> Result<()> {
        let mut cache = self.cache.lock().unwrap();
        let mut file = match &self.config.cache_path {
            Some(p) => {
                if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(parent)?;
                }
                Some(OpenOptions::new().create(true).append(true).open(p)?)
            }
            None => None,
        };
        for (i, text) in found {
            let key = completion_key(&self.config.model, prompt, *i);
            if let Some(f) = file.as_mut() {
                let line = CompletionCacheLine {
                    key: key.clone(),
                    model: self.config.model.clone(),
                    candidate: *i,
                    text: text.clone(),
                };
                serde_json::to_writer(&mut *f, &line)?;
                f.write_all(b"\n")?;
            }
            cache.insert(key, text.clone());
        }
        Ok(())
    }
}

impl CompletionClient for HttpCompletionClient {
    fn complete(&self, prompt: &str, n: usize) -> Result<Vec<String>> {
        let model = &self.config.model;
        let mut out: Vec<Option<String>> = {
            let cache = self.cache.lock().unwrap();
            (0..n).map(|i| cache.get(&completion_key(model, prompt, i)).cloned()).collect()
        };
        let missing: Vec<usize> = (0..n).filter(|&i| out[i].is_none()).collect();
        if missing.is_empty() {
            return Ok(out.into_iter().flatten().collect());
        }
        let mut found = Vec::new();
        match self.config.mode {
            RequestMode::Batched => {
                let texts = self
                    .request(prompt, missing.len())
                    .map_err(|e| Error::Transport(format!("candidate {}: {e}", missing[0])))?;
                if texts.len() < missing.len() {
                    return Err(Error::Transport(format!(
                        "candidate {}: endpoint returned {} of {} choices",
                        missing[texts.len()],
                        texts.len(),
                        missing.len()
                    )));
                }
                found.extend(missing.iter().copied().zip(texts));
            }
            RequestMode::PerCandidate => {
                for &i in &missing {
                    let text = self
                        .request(prompt, 1)
                        .map_err(|e| Error::Transport(format!("candidate {i}: {e}")))?
                        .into_iter()
                        .next()
                        .ok_or_else(|| Error::Transport(format!("candidate {i}: no choices returned")))?;
                    found.push((i, text));
                }
            }
        }
        self.store(prompt, &found)?;
        for (i, t) in found {
            out[i] = Some(t);
        }
        Ok(out.into_iter().flatten().collect())
    }
}

/// `n` candidates for a prompt, each cut to `m` whitespace tokens.
pub fn generate_candidates(client: &dyn CompletionClient, prompt: &str, n: usize, m: usize) -> Result<Vec<String>> {
    let texts = client.complete(prompt, n)?;
    if texts.len() != n {
        return Err(Error::Transport(format!("expected {n} candidates, got {}", texts.len())));
    }
    Ok(texts.iter().map(|t| truncate_tokens(t, m)).collect())
}

/// Mean cosine of each embedding with all others; zero-norm embeddings score −1.
pub fn candidate_scores(embeddings: &[ConditionEmbedding]) -> Result<Vec<f64>> {
    let n = embeddings.len();
    if n < 2 {
        return arg("selection needs at least two candidates");
    }
    Ok((0..n)
        .map(|i| {
            if embeddings[i].norm() == 0.0 {
                return -1.0;
            }
            let total: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| cosine(embeddings[i].vector(), embeddings[j].vector()).unwrap_or(0.0))
                .sum();
            total / (n - 1) as f64
        })
        .collect())
}

/// Index of the highest score; the lowest index wins ties.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn select_best(candidates: &[String], embeddings: &[ConditionEmbedding]) -> Result<usize> {
    if candidates.len() != embeddings.len() {
        return arg("one embedding per candidate is required");
    }
    Ok(argmax_first(&candidate_scores(embeddings)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FragmentRef {
    pub source_id: String,
    pub fragment: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub fragment: FragmentRef,
    pub candidates: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub selected: usize,
}

/// A series awaiting captions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSeries {
    #[serde(alias = "id")]
    pub source_id: String,
    pub series: Vec<f64>,
    #[serde(default)]
    pub domain: String,
}

pub fn load_raw_series(path: &Path) -> Result<Vec<RawSeries>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: RawSeries = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if r.series.is_empty() || r.series.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "series must be non-empty and finite".into(),
            });
        }
        out.push(r);
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub fragments_per_series: usize,
    pub token_limit: usize,
    pub candidates: usize,
    pub execution: Execution,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            fragments_per_series: 4,
            token_limit: DEFAULT_TOKEN_LIMIT,
            candidates: DEFAULT_CANDIDATES,
            execution: Execution::Parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedFragment {
    pub fragment: FragmentRef,
    pub error: String,
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub dataset: Option<Dataset>,
    pub scores: Vec<CandidateSet>,
    pub skipped: Vec<SkippedFragment>,
}

/// Sidecar path: `x.jsonl` → `x.scores.jsonl`.
pub fn scores_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.scores.jsonl"))
}

/// Segment, caption and select for every fragment of every series.
///
/// Failed fragments are skipped and reported; with `out` set, the dataset is
/// written there and candidate scores go to the sidecar next to it.
pub fn build_fragment_dataset(
    corpus: &[RawSeries],
    seeds: &SeedPrompt,
    llm: &dyn CompletionClient,
    encoder: &dyn TextEncoder,
    cfg: &PipelineConfig,
    out: Option<&Path>,
) -> Result<PipelineOutput> {
    seeds.validate()?;
    if cfg.candidates < 2 {
        return arg("at least two candidates are needed for selection");
    }
    let mut work: Vec<(FragmentRef, Vec<f64>, String)> = Vec::new();
    for r in corpus {
        let b = equal_boundaries(r.series.len(), cfg.fragments_per_series)?;
        let parts = segment_series(&r.series, &b)?;
        let mut start = 0;
        for (j, p) in parts.into_iter().enumerate() {
            let end = start + p.len();
            work.push((
                FragmentRef {
                    source_id: r.source_id.clone(),
                    fragment: j,
                    start,
                    end,
                },
                p,
                r.domain.clone(),
            ));
            start = end;
        }
    }
    let results = par::map(cfg.execution, &work, |(fref, values, _)| -> Result<CandidateSet> {
        let prompt = build_prompt(values, seeds, cfg.token_limit)?;
        let candidates = generate_candidates(llm, &prompt, cfg.candidates, cfg.token_limit)?;
        let embeddings = encoder.encode_batch(&candidates)?;
        let scores = candidate_scores(&embeddings)?;
        let selected = argmax_first(&scores);
        Ok(CandidateSet {
            fragment: fref.clone(),
            candidates,
            embeddings: embeddings.iter().map(|e| e.vector().to_vec()).collect(),
            scores,
            selected,
        })
    });
    let mut samples = Vec::new();
    let mut sets = Vec::new();
    let mut skipped = Vec::new();
    for ((fref, values, domain), r) in work.into_iter().zip(results) {
        match r {
            Ok(set) => {
                samples.push(CaptionedSample {
                    series: values,
                    caption: set.candidates[set.selected].clone(),
                    level: Level::Fragment,
                    domain,
                    source_id: format!("{}#f{}", fref.source_id, fref.fragment),
                });
                sets.push(set);
            }
            Err(e) => skipped.push(SkippedFragment {
                fragment: fref,
                error: e.to_string(),
            }),
        }
    }
    let dataset = if samples.is_empty() {
        None
    } else {
        Some(Dataset::new("fragments", samples)?)
    };
    if let Some(path) = out {
        match &dataset {
            Some(d) => d.write_jsonl(path)?,
            None => write_jsonl::<CaptionedSample>(path, &[])?,
        }
        write_jsonl(&scores_path(path), &sets)?;
    }
    Ok(PipelineOutput {
        dataset,
        scores: sets,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_contract() {
        let seeds = SeedPrompt::shipped();
        let frag: Vec<f64> = (0..24).map(|i| i as f64 / 7.0).collect();
        let p = build_prompt(&frag, &seeds, 30).unwrap();
        assert_eq!(p, build_prompt(&frag, &seeds, 30).unwrap());
        assert!(p.contains("at most 30 words"));
        for v in &frag {
            assert!(p.contains(&format!("{v:.4}")));
        }
        assert!(build_prompt(&[], &seeds, 30).is_err());
        assert!(build_prompt(&frag, &seeds, 7).is_err());
    }

    #[test]
    fn truncation() {
        assert_eq!(truncate_tokens("  a  b\tc\nd e ", 3), "a b c");
        assert_eq!(truncate_tokens("a b", 30), "a b");
    }

    #[test]
    fn selection_examples() {
        let e = |v: Vec<f64>| ConditionEmbedding::new(v);
        let c: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        let embs = vec![e(vec![0.0, 1.0]), e(vec![1.0, 0.0]), e(vec![1.0, 0.0])];
        assert_eq!(select_best(&c, &embs).unwrap(), 1);
        let same = vec![e(vec![1.0, 1.0]); 3];
        assert_eq!(select_best(&c, &same).unwrap(), 0);
        let zero = vec![e(vec![0.0, 0.0]), e(vec![1.0, 0.0]), e(vec![0.0, 1.0])];
        assert_eq!(candidate_scores(&zero).unwrap()[0], -1.0);
        assert_ne!(select_best(&c, &zero).unwrap(), 0);
        assert!(select_best(&c[..1], &embs[..1]).is_err());
    }
}
