//! Reranking backends behind one client.
//!
//! [`ModelClient`] wraps a [`Backend`] with an admission gate (at most
//! `max_in_flight` concurrent calls), request accounting and an optional
//! [`ResponseCache`]. Backends are either a chat-completions HTTP endpoint or
//! one of the deterministic scripted oracles used for offline runs.

mod cache;
mod http;
mod oracle;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::Qrels;
use crate::prompt::PromptRequest;

pub use cache::{cache_key, CacheError, ResponseCache};
pub use http::{ChatMessage, ChatRequestBody, HttpBackend};
pub use oracle::{IdentityOracle, NoiseKind, NoisyOracle, QrelsOracle, ReverseOracle, REFUSAL_TEXT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Identity,
    Reverse,
    QrelsOracle,
    NoisyOracle,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Http => "http",
            BackendKind::Identity => "identity",
            BackendKind::Reverse => "reverse",
            BackendKind::QrelsOracle => "qrels_oracle",
            BackendKind::NoisyOracle => "noisy_oracle",
        }
    }

    pub fn is_deterministic(self) -> bool {
        self != BackendKind::Http
    }
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "http" => Ok(Self::Http),
            "identity" => Ok(Self::Identity),
            "reverse" => Ok(Self::Reverse),
            "qrels_oracle" => Ok(Self::QrelsOracle),
            "noisy_oracle" => Ok(Self::NoisyOracle),
            other => Err(format!("unknown backend kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Full chat-completions URL (http only).
    pub endpoint: Option<String>,
    /// Model name sent to the endpoint; also part of the cache key. Defaults to the kind name.
    pub model: Option<String>,
    /// Environment variable holding the bearer token (http only).
    pub token_env: String,
    /// Always zero.
    pub temperature: f64,
    pub timeout_secs: f64,
    /// Retries after the first attempt, on timeouts, connection errors, 429 and 5xx.
    pub max_retries: u32,
    /// Backoff before retry `i` (0-based) is `backoff_base_ms * 2^i`.
    pub backoff_base_ms: u64,
    pub max_in_flight: usize,
    pub noise_rate: f64,
    pub seed: u64,
    /// Forces the noisy oracle to always pick this corruption when it fires.
    pub forced_noise: Option<NoiseKind>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Identity,
            endpoint: None,
            model: None,
            token_env: "OPENAI_API_KEY".to_string(),
            temperature: 0.0,
            timeout_secs: 120.0,
            max_retries: 3,
            backoff_base_ms: 1000,
            max_in_flight: 4,
            noise_rate: 0.0,
            seed: 0,
            forced_noise: None,
        }
    }
}

impl BackendConfig {
    pub fn new(kind: BackendKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn model_name(&self) -> String {
        self.model.clone().unwrap_or_else(|| self.kind.as_str().to_string())
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        let invalid = |msg: &str| Err(ClientError::InvalidConfig(msg.to_string()));
        if self.temperature != 0.0 {
            return invalid("temperature must be 0");
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return invalid("noise_rate must lie in [0, 1]");
        }
        if self.max_in_flight == 0 {
            return invalid("max_in_flight must be at least 1");
        }
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return invalid("timeout_secs must be positive");
        }
        if self.kind == BackendKind::Http && self.endpoint.is_none() {
            return invalid("http backend requires an endpoint");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend gave up after {attempts} attempts (last status {status:?}): {message}")]
    Exhausted {
        attempts: u32,
        status: Option<u16>,
        message: String,
    },
    #[error("backend returned status {status}: {message}")]
    Status { status: u16, message: String },
    #[error("malformed backend response: {0}")]
    Protocol(String),
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid backend configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

/// Text returned by a backend plus the 1-based attempt that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub attempt: u32,
}

pub trait Backend: Send + Sync {
    fn complete(&self, req: &PromptRequest) -> Result<Completion, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawResponse {
    pub text: String,
    pub latency: Duration,
    pub cached: bool,
    pub attempt: u32,
}

#[derive(Debug)]
struct Gate {
    limit: usize,
    in_flight: Mutex<usize>,
    released: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(limit: usize) -> Self {
        Self {
            limit,
            in_flight: Mutex::new(0),
            released: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.limit {
            n = self.released.wait(n).unwrap();
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().unwrap() -= 1;
        self.0.released.notify_one();
    }
}

/// Snapshot of a client's request accounting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClientStats {
    pub requests: u64,
    pub backend_calls: u64,
    pub cache_hits: u64,
}

pub struct ModelClient {
    backend: Box<dyn Backend>,
    model: String,
    kind: Option<BackendKind>,
    cache: Option<Arc<ResponseCache>>,
    gate: Gate,
    requests: AtomicU64,
    backend_calls: AtomicU64,
    cache_hits: AtomicU64,
}

impl std::fmt::Debug for ModelClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelClient")
            .field("model", &self.model)
            .field("kind", &self.kind)
            .field("cached", &self.cache.is_some())
            .finish()
    }
}

impl ModelClient {
    pub fn new(backend: Box<dyn Backend>, model: impl Into<String>, max_in_flight: usize) -> Self {
        Self {
            backend,
            model: model.into(),
            kind: None,
            cache: None,
            gate: Gate::new(max_in_flight.max(1)),
            requests: AtomicU64::new(0),
            backend_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
        }
    }

    /// Builds the backend described by `cfg`. Qrels are required for the oracle kinds
    /// that consult relevance.
    pub fn from_config(cfg: &BackendConfig, qrels: Option<Arc<Qrels>>) -> Result<Self, ClientError> {
        cfg.validate()?;
        let need_qrels = || {
            qrels
                .clone()
                .ok_or_else(|| ClientError::InvalidConfig(format!("{} backend requires qrels", cfg.kind.as_str())))
        };
        let backend: Box<dyn Backend> = match cfg.kind {
            BackendKind::Http => Box::new(HttpBackend::from_config(cfg)?),
            BackendKind::Identity => Box::new(IdentityOracle),
            BackendKind::Reverse => Box::new(ReverseOracle),
            BackendKind::QrelsOracle => Box::new(QrelsOracle::new(need_qrels()?)),
            BackendKind::NoisyOracle => Box::new(NoisyOracle::new(
                QrelsOracle::new(need_qrels()?),
                cfg.noise_rate,
                cfg.seed,
                cfg.forced_noise,
            )),
        };
        let mut client = Self::new(backend, cfg.model_name(), cfg.max_in_flight);
        client.kind = Some(cfg.kind);
        Ok(client)
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn kind(&self) -> Option<BackendKind> {
        self.kind
    }

    pub fn max_in_flight(&self) -> usize {
        self.gate.limit
    }

    pub fn stats(&self) -> ClientStats {
        ClientStats {
            requests: self.requests.load(Ordering::SeqCst),
            backend_calls: self.backend_calls.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
        }
    }

    /// Calls the backend directly, bypassing any cache.
    pub fn complete(&self, req: &PromptRequest) -> Result<RawResponse, ClientError> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        self.call_backend(req)
    }

    fn call_backend(&self, req: &PromptRequest) -> Result<RawResponse, ClientError> {
        let _permit = self.gate.acquire();
        self.backend_calls.fetch_add(1, Ordering::SeqCst);
        let start = Instant::now();
        let Completion { text, attempt } = self.backend.complete(req)?;
        Ok(RawResponse {
            text,
            latency: start.elapsed(),
            cached: false,
            attempt,
        })
    }

    /// Looks the prompt up in `cache`; on a miss calls the backend and stores the text.
    pub fn cached_complete(&self, req: &PromptRequest, cache: &ResponseCache) -> Result<RawResponse, ClientError> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let key = cache_key(&self.model, &req.system_text, &req.user_text);
        let start = Instant::now();
        if let Some(text) = cache.get(&key) {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(RawResponse {
                text,
                latency: start.elapsed(),
                cached: true,
                attempt: 0,
            });
        }
        let resp = self.call_backend(req)?;
        cache.put(&key, &self.model, &resp.text)?;
        Ok(resp)
    }

    /// Uses the attached cache when there is one.
    pub fn send(&self, req: &PromptRequest) -> Result<RawResponse, ClientError> {
        match &self.cache {
            Some(cache) => self.cached_complete(req, cache),
            None => self.complete(req),
        }
    }
}
