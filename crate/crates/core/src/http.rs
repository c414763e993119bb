//! Blocking JSON-over-HTTP plumbing shared by the embedding and completion clients.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub(crate) fn agent(timeout_secs: f64) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs_f64(timeout_secs)))
        .build()
        .into()
}

enum Failure {
    Retryable(String),
    Fatal(String),
}

fn post_once<B: Serialize, R: DeserializeOwned>(
    agent: &ureq::Agent,
    url: &str,
    api_key: Option<&str>,
    body: &B,
) -> std::result::Result<R, Failure> {
    let mut req = agent.post(url).header("Content-Type", "application/json");
    if let Some(key) = api_key {
        req = req.header("Authorization", &format!("Bearer {key}"));
    }
    match req.send_json(body) {
        Ok(mut resp) => resp
            .body_mut()
            .read_json::<R>()
            .map_err(|e| Failure::Fatal(format!("malformed response from {url}: {e}"))),
        Err(ureq::Error::StatusCode(code)) if code == 429 || code >= 500 => {
            Err(Failure::Retryable(format!("{url} returned HTTP {code}")))
        }
        Err(ureq::Error::StatusCode(code)) => Err(Failure::Fatal(format!("{url} returned HTTP {code}"))),
        Err(e) => Err(Failure::Retryable(format!("{url}: {e}"))),
    }
}

/// POST `body` and decode the JSON reply, retrying transient failures with
/// exponential backoff (`backoff_ms · 2^attempt`).
pub(crate) fn post_json<B: Serialize, R: DeserializeOwned>(
    agent: &ureq::Agent,
    url: &str,
    api_key: Option<&str>,
    body: &B,
    max_retries: u32,
    backoff_ms: u64,
) -> Result<R> {
    let mut attempt = 0u32;
    loop {
        match post_once(agent, url, api_key, body) {
            Ok(r) => return Ok(r),
            Err(Failure::Fatal(msg)) => return Err(Error::Transport(msg)),
            Err(Failure::Retryable(msg)) => {
                if attempt >= max_retries {
                    return Err(Error::Transport(format!(
                        "{msg} (gave up after {} attempts)",
                        attempt + 1
                    )));
                }
                let delay = backoff_ms.saturating_mul(1u64 << attempt.min(16));
                std::thread::sleep(Duration::from_millis(delay));
                attempt += 1;
            }
        }
    }
}

pub(crate) fn api_key(var: &str) -> Option<String> {
    std::env::var(var).ok().filter(|k| !k.is_empty())
}
