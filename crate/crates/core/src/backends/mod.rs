//! Uniform text-generation interface over the in-process toy policy, remote
//! chat-completion services and deterministic scripted responders.

mod remote;
mod scripted;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use remote::{
    chat_request, request_hash, Cassette, CassetteEntry, RemoteBackend, RemoteEmbedder,
};
pub use scripted::{lexical_answer, recover_by_rules, Fallback, ScriptedBackend};

use crate::prompting::{
    build_inverse_prompt, parse_answer, qa_user_turn, Answer, ChatTranscript, FewShotBank,
};
use crate::textmetrics::EmbedError;
use crate::toymodel::{self, DecodeConfig, ModelError, PolicyParams, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("cassette: {0}")]
    Cassette(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Toy,
    Remote,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Base URL, e.g. `http://localhost:8000/v1`.
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub embedding_model: Option<String>,
    /// Expected embedding width; checked against the startup probe.
    pub embedding_dim: Option<usize>,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
    pub timeout_secs: f64,
    pub retry_budget: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    pub cassette: Option<PathBuf>,
    /// Replay only: never open a network connection.
    pub offline: bool,
    /// Scripted miss behaviour.
    pub fallback: Fallback,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Scripted,
            endpoint: None,
            model: None,
            embedding_model: None,
            embedding_dim: None,
            api_key_env: "RLQG_API_KEY".into(),
            temperature: 0.6,
            top_p: 0.9,
            max_tokens: 4096,
            timeout_secs: 60.0,
            retry_budget: 3,
            backoff_ms: 500,
            max_in_flight: 4,
            cassette: None,
            offline: false,
            fallback: Fallback::None,
        }
    }
}

impl BackendConfig {
    pub fn scripted(fallback: Fallback) -> Self {
        Self {
            kind: BackendKind::Scripted,
            fallback,
            ..Self::default()
        }
    }

    pub fn remote(endpoint: &str, model: &str) -> Self {
        Self {
            kind: BackendKind::Remote,
            endpoint: Some(endpoint.into()),
            model: Some(model.into()),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::Config(m.into()));
        if self.kind == BackendKind::Remote && (self.endpoint.is_none() || self.model.is_none()) {
            return bad("remote backend needs endpoint and model");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must lie in (0, 1]");
        }
        if self.max_tokens == 0 || self.max_in_flight == 0 {
            return bad("max_tokens and max_in_flight must be positive");
        }
        if !(self.timeout_secs > 0.0) {
            return bad("timeout must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub finish: FinishReason,
    pub latency_ms: f64,
    pub attempts: u32,
    /// Present exactly when `finish` is `Error`.
    pub diagnostic: Option<String>,
}

impl GenerationResult {
    pub fn error(diagnostic: String, latency_ms: f64, attempts: u32) -> Self {
        Self {
            text: String::new(),
            finish: FinishReason::Error,
            latency_ms,
            attempts,
            diagnostic: Some(diagnostic),
        }
    }

    pub fn is_error(&self) -> bool {
        self.finish == FinishReason::Error
    }
}

/// How the toy backend turns a prompt into text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyMode {
    Greedy,
    Sample,
    /// Best beam hypothesis.
    Beam,
}

#[derive(Debug, Clone)]
pub struct ToyBackend {
    pub params: Arc<PolicyParams>,
    pub decode: DecodeConfig,
    pub mode: ToyMode,
}

impl ToyBackend {
    pub fn new(params: PolicyParams, decode: DecodeConfig, mode: ToyMode) -> Self {
        Self {
            params: Arc::new(params),
            decode,
            mode,
        }
    }

    /// Decodes the final user turn as the prompt.
    pub fn complete(&self, prompt: &str) -> (String, FinishReason) {
        let p = &self.params;
        match self.mode {
            ToyMode::Greedy | ToyMode::Sample => {
                let cfg = DecodeConfig {
                    greedy: self.mode == ToyMode::Greedy,
                    ..self.decode.clone()
                };
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                let s = toymodel::sample_ids(p, &p.vocab.encode(prompt), &cfg, &mut rng);
                let finish = if s.finished {
                    FinishReason::Stop
                } else {
                    FinishReason::Length
                };
                (p.vocab.decode(&s.tokens), finish)
            }
            ToyMode::Beam => {
                let r = toymodel::beam_search(p, prompt, &self.decode);
                match r.hypotheses.into_iter().next() {
                    Some(h) => (h.text, FinishReason::Stop),
                    None => (String::new(), FinishReason::Length),
                }
            }
        }
    }
}

/// A configured generation backend. Immutable and shareable across threads.
#[derive(Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Backend {
    Toy(ToyBackend),
    Scripted(ScriptedBackend),
    Remote(RemoteBackend),
}

impl Backend {
    /// Builds a scripted or remote backend; toy backends need parameters and
    /// are built with [`Backend::Toy`].
    pub fn from_config(cfg: &BackendConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        match cfg.kind {
            BackendKind::Scripted => Ok(Backend::Scripted(match cfg.fallback {
                Fallback::InverseRules => ScriptedBackend::inverse_default(),
                Fallback::LexicalQa => ScriptedBackend::qa_default(),
                Fallback::None => ScriptedBackend::default(),
            })),
            BackendKind::Remote => Ok(Backend::Remote(RemoteBackend::new(cfg)?)),
            BackendKind::Toy => Err(BackendError::Config(
                "toy backends are built from a policy checkpoint".into(),
            )),
        }
    }

    pub fn max_in_flight(&self) -> usize {
        match self {
            Backend::Remote(r) => r.config().max_in_flight,
            _ => usize::MAX,
        }
    }
}

/// Runs one generation call for `transcript`.
pub fn generate(backend: &Backend, transcript: &ChatTranscript) -> GenerationResult {
    let started = Instant::now();
    let elapsed = || started.elapsed().as_secs_f64() * 1e3;
    if !transcript.is_valid() {
        return GenerationResult::error(
            "transcript must alternate turns and end with a user turn".into(),
            0.0,
            0,
        );
    }
    let user = transcript.last_user().unwrap_or_default();
    match backend {
        Backend::Scripted(s) => match s.respond(user) {
            Some(text) => GenerationResult {
                text,
                finish: FinishReason::Stop,
                latency_ms: elapsed(),
                attempts: 1,
                diagnostic: None,
            },
            None => {
                GenerationResult::error(format!("no scripted response for {user:?}"), elapsed(), 1)
            }
        },
        Backend::Toy(t) => {
            let (text, finish) = t.complete(user);
            GenerationResult {
                text,
                finish,
                latency_ms: elapsed(),
                attempts: 1,
                diagnostic: None,
            }
        }
        Backend::Remote(r) => r.generate(transcript),
    }
}

/// Asks `question` about `context` through the `[ANS]` protocol.
pub fn qa_answer(
    backend: &Backend,
    question: &str,
    context: &str,
    shots: &FewShotBank,
) -> Result<Answer, BackendError> {
    if question.trim().is_empty() {
        return Err(BackendError::EmptyInput("question"));
    }
    if context.trim().is_empty() {
        return Err(BackendError::EmptyInput("context"));
    }
    let transcript = shots.transcript(&qa_user_turn(question, context));
    let result = generate(backend, &transcript);
    if result.is_error() {
        return Err(BackendError::Generation(
            result.diagnostic.unwrap_or_default(),
        ));
    }
    let answer = parse_answer(&result.text);
    if answer.untagged {
        log::debug!("untagged QA response: {:?}", result.text);
    }
    Ok(answer)
}

/// Regenerates an event description from a trigger and a question.
pub fn inverse_recover(
    backend: &Backend,
    trigger: &str,
    question: &str,
    shots: &FewShotBank,
) -> Result<String, BackendError> {
    if trigger.trim().is_empty() {
        return Err(BackendError::EmptyInput("trigger"));
    }
    if question.trim().is_empty() {
        return Err(BackendError::EmptyInput("question"));
    }
    let transcript = shots.transcript(&build_inverse_prompt(trigger, question).text);
    let result = generate(backend, &transcript);
    if result.is_error() {
        return Err(BackendError::Generation(
            result.diagnostic.unwrap_or_default(),
        ));
    }
    Ok(result.text.trim().to_string())
}

/// One embedding from a remote backend.
pub fn embed_remote(backend: &Backend, text: &str) -> Result<Vec<f64>, EmbedError> {
    if text.trim().is_empty() {
        return Err(EmbedError::EmptyText);
    }
    match backend {
        Backend::Remote(r) => r.embed(text),
        _ => Err(EmbedError::Backend(
            "embedding needs a remote backend".into(),
        )),
    }
}

/// Maps `f` over `items` with at most `jobs` workers; output order follows input order.
pub fn parallel_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(_) => items.iter().map(f).collect(),
    }
}

/// Trains a toy context recoverer on (trigger, question, context) triples;
/// the result answers `trigger: .. question: ..` turns greedily.
pub fn train_toy_recoverer(
    triples: &[(String, String, String)],
    cfg: &TrainConfig,
    max_len: usize,
) -> Result<ToyBackend, BackendError> {
    let pairs: Vec<(String, String)> = triples
        .iter()
        .map(|(t, q, c)| (build_inverse_prompt(t, q).text, c.clone()))
        .collect();
    let (params, _) = toymodel::sft_train(&pairs, cfg)?;
    let decode = DecodeConfig {
        max_len,
        ..DecodeConfig::default()
    };
    Ok(ToyBackend::new(params, decode, ToyMode::Greedy))
}

/// Bundled (trigger, question, context) triples for context recovery.
pub fn bundled_inverse_triples() -> Vec<(String, String, String)> {
    #[derive(Deserialize)]
    struct Row {
        trigger: String,
        question: String,
        context: String,
    }
    include_str!("../../data/inverse_pairs.jsonl")
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let r: Row = serde_json::from_str(l).expect("bundled pairs");
            (r.trigger, r.question, r.context)
        })
        .collect()
}
