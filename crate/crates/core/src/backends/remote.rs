//! OpenAI-compatible chat-completions and embeddings client with a
//! record/replay cassette.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{BackendConfig, BackendError, FinishReason, GenerationResult};
use crate::prompting::{ChatTranscript, Speaker};
use crate::textmetrics::{EmbedError, Embedder};

/// One recorded exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub request_hash: String,
    pub transcript: Value,
    pub response: Value,
    pub timestamp: u64,
}

/// JSON-lines store of past requests keyed by the SHA-256 of the request body.
#[derive(Debug)]
pub struct Cassette {
    path: PathBuf,
    entries: Mutex<HashMap<String, Value>>,
}

impl Cassette {
    pub fn open(path: &Path) -> Result<Self, BackendError> {
        let mut entries = HashMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(path)
                .map_err(|e| BackendError::Cassette(format!("{}: {e}", path.display())))?;
            for (i, line) in text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
            {
                let e: CassetteEntry = serde_json::from_str(line).map_err(|e| {
                    BackendError::Cassette(format!("{} line {}: {e}", path.display(), i + 1))
                })?;
                entries.insert(e.request_hash, e.response);
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries: Mutex::new(entries),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lookup(&self, hash: &str) -> Option<Value> {
        self.entries.lock().unwrap().get(hash).cloned()
    }

    pub fn record(
        &self,
        hash: &str,
        request: &Value,
        response: &Value,
    ) -> Result<(), BackendError> {
        let mut entries = self.entries.lock().unwrap();
        if entries.contains_key(hash) {
            return Ok(());
        }
        let entry = CassetteEntry {
            request_hash: hash.to_string(),
            transcript: request.clone(),
            response: response.clone(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| BackendError::Cassette(format!("{}: {e}", self.path.display())))?;
        let line =
            serde_json::to_string(&entry).map_err(|e| BackendError::Cassette(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| BackendError::Cassette(e.to_string()))?;
        entries.insert(hash.to_string(), response.clone());
        Ok(())
    }
}

pub fn request_hash(body: &Value) -> String {
    // serde_json maps are ordered, so this serialization is canonical
    hex::encode(Sha256::digest(body.to_string().as_bytes()))
}

/// Chat-completions request body for a transcript.
pub fn chat_request(cfg: &BackendConfig, transcript: &ChatTranscript) -> Value {
    let mut messages = vec![json!({"role": "system", "content": transcript.system})];
    for t in &transcript.turns {
        let role = match t.speaker {
            Speaker::User => "user",
            Speaker::Assistant => "assistant",
        };
        messages.push(json!({"role": role, "content": t.text}));
    }
    json!({
        "model": cfg.model.clone().unwrap_or_default(),
        "messages": messages,
        "temperature": cfg.temperature,
        "top_p": cfg.top_p,
        "max_tokens": cfg.max_tokens,
    })
}

enum Failure {
    Transient(String),
    Fatal(String),
}

#[derive(Debug)]
pub struct RemoteBackend {
    cfg: BackendConfig,
    api_key: Option<String>,
    cassette: Option<Cassette>,
    client: Option<reqwest::blocking::Client>,
}

impl RemoteBackend {
    pub fn new(cfg: &BackendConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        let cassette = cfg.cassette.as_deref().map(Cassette::open).transpose()?;
        let client = if cfg.offline {
            None
        } else {
            Some(
                reqwest::blocking::Client::builder()
                    .timeout(Duration::from_secs_f64(cfg.timeout_secs))
                    .build()
                    .map_err(|e| BackendError::Config(e.to_string()))?,
            )
        };
        Ok(Self {
            api_key: std::env::var(&cfg.api_key_env).ok(),
            cfg: cfg.clone(),
            cassette,
            client,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    pub fn cassette(&self) -> Option<&Cassette> {
        self.cassette.as_ref()
    }

    fn url(&self, path: &str) -> String {
        let base = self
            .cfg
            .endpoint
            .as_deref()
            .unwrap_or_default()
            .trim_end_matches('/');
        format!("{base}/{path}")
    }

    fn post_once(&self, url: &str, body: &Value) -> Result<Value, Failure> {
        let client = self
            .client
            .as_ref()
            .ok_or_else(|| Failure::Fatal("offline mode forbids network calls".into()))?;
        let mut req = client.post(url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Failure::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Failure::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(Failure::Fatal(format!("HTTP {status}: {text}")));
        }
        resp.json::<Value>()
            .map_err(|e| Failure::Fatal(format!("bad JSON body: {e}")))
    }

    /// Replays from the cassette when possible, otherwise POSTs with
    /// retries and records the response. Returns the body and attempt count.
    fn call(&self, path: &str, body: &Value) -> (Result<Value, String>, u32) {
        let hash = request_hash(body);
        if let Some(hit) = self.cassette.as_ref().and_then(|c| c.lookup(&hash)) {
            return (Ok(hit), 0);
        }
        if self.cfg.offline {
            return (
                Err(format!("offline and no cassette entry for request {hash}")),
                0,
            );
        }
        let url = self.url(path);
        let mut attempts = 0;
        let mut last = String::new();
        while attempts <= self.cfg.retry_budget {
            if attempts > 0 {
                let wait = self.cfg.backoff_ms * 2u64.saturating_pow(attempts - 1);
                std::thread::sleep(Duration::from_millis(wait));
            }
            attempts += 1;
            match self.post_once(&url, body) {
                Ok(v) => {
                    if let Some(c) = &self.cassette {
                        if let Err(e) = c.record(&hash, body, &v) {
                            log::warn!("cassette write failed: {e}");
                        }
                    }
                    return (Ok(v), attempts);
                }
                Err(Failure::Fatal(m)) => return (Err(m), attempts),
                Err(Failure::Transient(m)) => {
                    log::warn!("attempt {attempts} failed: {m}");
                    last = m;
                }
            }
        }
        (Err(format!("retries exhausted: {last}")), attempts)
    }

    pub fn generate(&self, transcript: &ChatTranscript) -> GenerationResult {
        let started = Instant::now();
        let body = chat_request(&self.cfg, transcript);
        let (res, attempts) = self.call("chat/completions", &body);
        let latency_ms = started.elapsed().as_secs_f64() * 1e3;
        let parsed = res.and_then(|v| {
            let choice = &v["choices"][0];
            let text = choice["message"]["content"]
                .as_str()
                .ok_or_else(|| "response has no choices[0].message.content".to_string())?;
            let finish = match choice["finish_reason"].as_str() {
                Some("length") => FinishReason::Length,
                _ => FinishReason::Stop,
            };
            Ok((text.to_string(), finish))
        });
        match parsed {
            Ok((text, finish)) => GenerationResult {
                text,
                finish,
                latency_ms,
                attempts,
                diagnostic: None,
            },
            Err(m) => GenerationResult::error(m, latency_ms, attempts),
        }
    }

    /// Asks for `n` alternative completions in one request (the `n` field of
    /// the chat API). Empty completions are dropped.
    pub fn generate_n(
        &self,
        transcript: &ChatTranscript,
        n: usize,
    ) -> Result<Vec<String>, BackendError> {
        let mut body = chat_request(&self.cfg, transcript);
        if n > 1 {
            body["n"] = json!(n);
        }
        let (res, _) = self.call("chat/completions", &body);
        let v = res.map_err(BackendError::Generation)?;
        let choices = v["choices"]
            .as_array()
            .ok_or_else(|| BackendError::Generation("response has no choices".into()))?;
        Ok(choices
            .iter()
            .filter_map(|c| c["message"]["content"].as_str())
            .map(|t| t.trim().to_string())
            .filter(|t| !t.is_empty())
            .collect())
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let body = json!({
            "model": self.cfg.embedding_model.clone().or_else(|| self.cfg.model.clone()).unwrap_or_default(),
            "input": text,
        });
        let (res, _) = self.call("embeddings", &body);
        let v = res.map_err(EmbedError::Backend)?;
        v["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| EmbedError::Backend("response has no data[0].embedding".into()))?
            .iter()
            .map(|x| {
                x.as_f64()
                    .ok_or_else(|| EmbedError::Backend("non-numeric embedding".into()))
            })
            .collect()
    }
}

/// Remote embedder that pins its dimension on a startup probe.
#[derive(Debug)]
pub struct RemoteEmbedder {
    backend: RemoteBackend,
    dim: usize,
    id: String,
}

impl RemoteEmbedder {
    pub fn connect(cfg: &BackendConfig) -> Result<Self, EmbedError> {
        let backend = RemoteBackend::new(cfg).map_err(|e| EmbedError::Backend(e.to_string()))?;
        let probe = backend.embed("dimension probe")?;
        if let Some(expected) = cfg.embedding_dim {
            if expected != probe.len() {
                return Err(EmbedError::DimensionDrift {
                    expected,
                    actual: probe.len(),
                });
            }
        }
        Ok(Self {
            id: format!(
                "remote:{}",
                cfg.embedding_model
                    .clone()
                    .or_else(|| cfg.model.clone())
                    .unwrap_or_default()
            ),
            dim: probe.len(),
            backend,
        })
    }
}

impl Embedder for RemoteEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let v = self.backend.embed(text)?;
        if v.len() != self.dim {
            return Err(EmbedError::DimensionDrift {
                expected: self.dim,
                actual: v.len(),
            });
        }
        Ok(v)
    }
}
