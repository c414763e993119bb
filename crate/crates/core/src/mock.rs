//! In-process HTTP servers implementing the embedding and completion
//! contracts, for tests and offline demos.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde_json::{json, Value};

use crate::text::{OfflineEncoder, TextEncoder};

#[derive(Clone, Debug)]
pub struct MockRequest {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl MockRequest {
    pub fn json(&self) -> Option<Value> {
        serde_json::from_slice(&self.body).ok()
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct MockResponse {
    pub status: u16,
    pub body: String,
}

impl MockResponse {
    pub fn ok(body: Value) -> Self {
        Self {
            status: 200,
            body: body.to_string(),
        }
    }

    pub fn error(status: u16) -> Self {
        Self {
            status,
            body: json!({"error": "injected failure"}).to_string(),
        }
    }
}

type Handler = dyn Fn(&MockRequest) -> MockResponse + Send + Sync;

pub struct MockServer {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    requests: Arc<AtomicUsize>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start<F>(handler: F) -> std::io::Result<Self>
    where
        F: Fn(&MockRequest) -> MockResponse + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let requests = Arc::new(AtomicUsize::new(0));
        let handler: Arc<Handler> = Arc::new(handler);
        let (stop, count) = (shutdown.clone(), requests.clone());
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                if let Some(req) = read_request(&stream) {
                    count.fetch_add(1, Ordering::SeqCst);
                    let resp = handler(&req);
                    let _ = write_response(stream, &resp);
                }
            }
        });
        Ok(Self {
            addr,
            shutdown,
            requests,
            handle: Some(handle),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Requests received so far, including injected failures.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    /// Embedding endpoint returning offline-encoder vectors of dimension `dim`;
    /// the first `fail_first` requests answer HTTP 500.
    pub fn embeddings(dim: usize, fail_first: usize) -> std::io::Result<Self> {
        let encoder = OfflineEncoder::new(dim);
        let seen = AtomicUsize::new(0);
        Self::start(move |req| {
            if seen.fetch_add(1, Ordering::SeqCst) < fail_first {
                return MockResponse::error(500);
            }
            let Some(body) = req.json() else {
                return MockResponse::error(400);
            };
            let inputs: Vec<String> = body["input"]
                .as_array()
                .map(|a| a.iter().filter_map(|v| v.as_str().map(String::from)).collect())
                .unwrap_or_default();
            let data: Vec<Value> = inputs
                .iter()
                .map(|t| match encoder.encode(t) {
                    Ok(e) => json!({ "embedding": e.vector() }),
                    Err(_) => json!({ "embedding": vec![0.0; dim] }),
                })
                .collect();
            MockResponse::ok(json!({ "data": data }))
        })
    }

    /// Embedding endpoint serving a fixed caption → vector table.
    pub fn fixed_embeddings(table: HashMap<String, Vec<f64>>) -> std::io::Result<Self> {
        Self::start(move |req| {
            let Some(body) = req.json() else {
                return MockResponse::error(400);
            };
            let mut data = Vec::new();
            for v in body["input"].as_array().into_iter().flatten() {
                match v.as_str().and_then(|t| table.get(t)) {
                    Some(e) => data.push(json!({ "embedding": e })),
                    None => return MockResponse::error(404),
                }
            }
            MockResponse::ok(json!({ "data": data }))
        })
    }

    /// Chat-completion endpoint. `responder(prompt, call)` gets the user
    /// prompt and how many times that prompt was seen before; `None`
    /// answers HTTP 500.
    pub fn chat<F>(responder: F) -> std::io::Result<Self>
    where
        F: Fn(&str, usize) -> Option<String> + Send + Sync + 'static,
    {
        let calls: Mutex<HashMap<String, usize>> = Mutex::new(HashMap::new());
        Self::start(move |req| {
            let Some(body) = req.json() else {
                return MockResponse::error(400);
            };
            let prompt = body["messages"]
                .as_array()
                .and_then(|m| {
                    m.iter()
                        .rev()
                        .find(|x| x["role"] == "user")
                        .and_then(|x| x["content"].as_str())
                })
                .unwrap_or("")
                .to_string();
            let n = body["n"].as_u64().unwrap_or(1).max(1) as usize;
            let call = {
                let mut c = calls.lock().unwrap();
                let e = c.entry(prompt.clone()).or_insert(0);
                *e += 1;
                *e - 1
            };
            let mut choices = Vec::with_capacity(n);
            for i in 0..n {
                match responder(&prompt, call * n + i) {
                    Some(text) => choices.push(json!({
                        "index": i,
                        "message": { "role": "assistant", "content": text }
                    })),
                    None => return MockResponse::error(500),
                }
            }
            MockResponse::ok(json!({ "choices": choices }))
        })
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn read_request(stream: &TcpStream) -> Option<MockRequest> {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let mut parts = line.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();
    let mut headers = Vec::new();
    let mut content_length = 0usize;
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h).ok()? == 0 {
            break;
        }
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k.eq_ignore_ascii_case("content-length") {
                content_length = v.parse().unwrap_or(0);
            }
            headers.push((k, v));
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body).ok()?;
    Some(MockRequest {
        method,
        path,
        headers,
        body,
    })
}

fn write_response(mut stream: TcpStream, resp: &MockResponse) -> std::io::Result<()> {
    let reason = if resp.status < 400 { "OK" } else { "Error" };
    write!(
        stream,
        "HTTP/1.1 {} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        resp.status,
        reason,
        resp.body.len(),
        resp.body
    )?;
    stream.flush()
}
/// Trend read from a prompt's summary statistics: `increasing`, `decreasing` or `flat`.
pub fn prompt_trend(prompt: &str) -> &'static str {
    let num = |key: &str| -> Option<f64> {
        let rest = &prompt[prompt.find(key)? + key.len()..];
        let tok = rest.split_whitespace().next()?;
        tok.trim_end_matches([',', '.']).parse().ok()
    };
    let (Some(slope), Some(min), Some(max)) = (num("slope "), num("min "), num("max ")) else {
        return "flat";
    };
    let len = prompt
        .find(" points)")
        .and_then(|e| prompt[..e].rsplit('(').next()?.trim().parse::<f64>().ok())
        .unwrap_or(2.0);
    let change = slope * (len - 1.0);
    let range = (max - min).max(1e-12);
    if change > 0.3 * range {
        "increasing"
    } else if change < -0.3 * range {
        "decreasing"
    } else {
        "flat"
    }
}

/// Canned candidate `call % 5` for a prompt: index 0 is an off-topic distractor,
/// the rest paraphrase the prompt's trend.
pub fn trend_caption_responder(prompt: &str, call: usize) -> Option<String> {
    let t = prompt_trend(prompt);
    Some(match call % 5 {
        0 => "bright sunny weather with a light breeze".to_string(),
        1 => format!("steadily {t}"),
        2 => format!("{t} trend across the fragment"),
        3 => format!("the values are {t}"),
        _ => format!("{t} overall with small noise"),
    })
}

