//! Chat completion over HTTP or a deterministic offline backend.

use std::collections::HashSet;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::kg::{EntityId, Query};
use crate::prompt::{format_sort_response, Message};
use crate::seed;

pub mod cache;

pub use cache::{cache_key, flush_cache, Cache, CacheRecord};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("environment variable {0} holding the API key is not set")]
    MissingApiKey(String),
    #[error("request failed after {attempts} attempts: {message}")]
    Network { attempts: usize, message: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed completion response: {0}")]
    MalformedResponse(String),
    #[error("response cache: {0}")]
    Cache(String),
    #[error("scripted backend: {0}")]
    Script(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    /// Echoes the candidates in the order given.
    Identity,
    /// Puts the ground truth first when it knows the query.
    Oracle,
    /// Replays a fixed list of replies.
    Scripted,
}

impl std::str::FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "http" => Ok(Self::Http),
            "identity" => Ok(Self::Identity),
            "oracle" => Ok(Self::Oracle),
            "scripted" => Ok(Self::Scripted),
            _ => Err(format!("unknown backend {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            initial_backoff_ms: 1000,
            max_backoff_ms: 60_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based), jittered into [0.5, 1.5) of nominal.
    fn backoff(&self, attempt: usize, jitter: f64) -> Duration {
        let nominal = self
            .initial_backoff_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_backoff_ms) as f64;
        Duration::from_millis((nominal * (0.5 + jitter)) as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub backend: BackendKind,
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub top_p: f64,
    pub presence_penalty: f64,
    pub frequency_penalty: f64,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub cache_path: Option<PathBuf>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
    /// JSON array of replies for the scripted backend.
    pub script_path: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Identity,
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            temperature: 0.0,
            top_p: 1.0,
            presence_penalty: 0.0,
            frequency_penalty: 0.0,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            cache_path: None,
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 120,
            script_path: None,
        }
    }
}

/// What the caller will do with the reply. Offline backends answer from
/// this instead of reading the prompt.
#[derive(Debug, Clone, PartialEq)]
pub enum Expect {
    /// A full order over these display names.
    Order {
        names: Vec<String>,
    },
    /// A score for the candidate at this index.
    Score {
        candidate: usize,
    },
    Alignment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hints {
    pub expect: Expect,
    pub query: Option<Query>,
    pub candidates: Vec<EntityId>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub requests: usize,
    pub network_calls: usize,
    pub cache_hits: usize,
    pub retries: usize,
    pub peak_in_flight: usize,
}

struct Limiter {
    max: usize,
    current: Mutex<usize>,
    freed: Condvar,
    peak: AtomicUsize,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            current: Mutex::new(0),
            freed: Condvar::new(),
            peak: AtomicUsize::new(0),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.current.lock().expect("limiter lock");
        while *n >= self.max {
            n = self.freed.wait(n).expect("limiter lock");
        }
        *n += 1;
        self.peak.fetch_max(*n, Ordering::SeqCst);
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.current.lock().expect("limiter lock");
        *n -= 1;
        self.0.freed.notify_one();
    }
}

enum Backend {
    Http { agent: ureq::Agent, api_key: String },
    Identity,
    Oracle(HashSet<Query>),
    Scripted { replies: Vec<String>, next: AtomicUsize },
}

/// Gateway-wide entry point; safe to share across worker threads.
pub struct Gateway {
    config: GatewayConfig,
    backend: Backend,
    cache: Option<Mutex<Cache>>,
    limiter: Limiter,
    jitter: Mutex<seed::Rng>,
    requests: AtomicUsize,
    network_calls: AtomicUsize,
    cache_hits: AtomicUsize,
    retries: AtomicUsize,
}

impl Gateway {
    /// Builds the backend named in `config`. The oracle starts with an empty
    /// answer table; see [`Gateway::with_oracle_queries`].
    pub fn new(config: GatewayConfig) -> Result<Self, GatewayError> {
        let backend = match config.backend {
            BackendKind::Http => {
                let api_key = std::env::var(&config.api_key_env)
                    .map_err(|_| GatewayError::MissingApiKey(config.api_key_env.clone()))?;
                let agent = ureq::Agent::new_with_config(
                    ureq::Agent::config_builder()
                        .http_status_as_error(false)
                        .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
                        .build(),
                );
                Backend::Http { agent, api_key }
            }
            BackendKind::Identity => Backend::Identity,
            BackendKind::Oracle => Backend::Oracle(HashSet::new()),
            BackendKind::Scripted => {
                let path = config
                    .script_path
                    .as_ref()
                    .ok_or_else(|| GatewayError::Script("no script_path configured".into()))?;
                let text =
                    fs::read_to_string(path).map_err(|e| GatewayError::Script(format!("{}: {e}", path.display())))?;
                let replies: Vec<String> = serde_json::from_str(&text)
                    .map_err(|e| GatewayError::Script(format!("{}: {e}", path.display())))?;
                return Self::scripted_with(config, replies);
            }
        };
        Self::assemble(config, backend)
    }

    fn assemble(config: GatewayConfig, backend: Backend) -> Result<Self, GatewayError> {
        let cache = match (&backend, &config.cache_path) {
            (Backend::Http { .. }, Some(path)) => Some(Mutex::new(Cache::open(path)?)),
            (Backend::Http { .. }, None) => Some(Mutex::new(Cache::in_memory())),
            _ => None,
        };
        Ok(Self {
            limiter: Limiter::new(config.max_in_flight),
            jitter: Mutex::new(seed::substream(0, seed::JITTER)),
            config,
            backend,
            cache,
            requests: AtomicUsize::new(0),
            network_calls: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
            retries: AtomicUsize::new(0),
        })
    }

    pub fn identity() -> Self {
        let config = GatewayConfig {
            backend: BackendKind::Identity,
            ..Default::default()
        };
        Self::assemble(config, Backend::Identity).expect("offline backend")
    }

    /// An oracle that knows the answers of `queries`.
    pub fn oracle(queries: &[Query]) -> Self {
        let config = GatewayConfig {
            backend: BackendKind::Oracle,
            ..Default::default()
        };
        Self::assemble(config, Backend::Oracle(HashSet::new()))
            .expect("offline backend")
            .with_oracle_queries(queries)
    }

    /// Adds `queries` to the oracle's answer table; no effect on other backends.
    pub fn with_oracle_queries(mut self, queries: &[Query]) -> Self {
        if let Backend::Oracle(table) = &mut self.backend {
            table.extend(queries.iter().copied());
        }
        self
    }

    /// Replays `replies` in order, wrapping around at the end.
    pub fn scripted(replies: Vec<String>) -> Result<Self, GatewayError> {
        let config = GatewayConfig {
            backend: BackendKind::Scripted,
            ..Default::default()
        };
        Self::scripted_with(config, replies)
    }

    fn scripted_with(config: GatewayConfig, replies: Vec<String>) -> Result<Self, GatewayError> {
        if replies.is_empty() {
            return Err(GatewayError::Script("script has no replies".into()));
        }
        Self::assemble(
            config,
            Backend::Scripted {
                replies,
                next: AtomicUsize::new(0),
            },
        )
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            requests: self.requests.load(Ordering::SeqCst),
            network_calls: self.network_calls.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
            retries: self.retries.load(Ordering::SeqCst),
            peak_in_flight: self.limiter.peak.load(Ordering::SeqCst),
        }
    }

    /// The chat-completion request body for `messages`.
    pub fn request_body(&self, messages: &[Message]) -> serde_json::Value {
        let msgs: Vec<serde_json::Value> = messages
            .iter()
            .map(|m| json!({ "role": m.role, "content": m.text }))
            .collect();
        json!({
            "model": self.config.model,
            "messages": msgs,
            "temperature": self.config.temperature,
            "top_p": self.config.top_p,
            "presence_penalty": self.config.presence_penalty,
            "frequency_penalty": self.config.frequency_penalty,
        })
    }

    /// Reply text for one request.
    pub fn complete(&self, messages: &[Message], hints: &Hints) -> Result<String, GatewayError> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        match &self.backend {
            Backend::Http { agent, api_key } => {
                let body = self.request_body(messages);
                let key = cache_key(&body);
                if let Some(cache) = &self.cache {
                    if let Some(rec) = cache.lock().expect("cache lock").get(&key) {
                        self.cache_hits.fetch_add(1, Ordering::SeqCst);
                        return Ok(rec.response.clone());
                    }
                }
                let reply = {
                    let _permit = self.limiter.acquire();
                    self.post_with_retries(agent, api_key, &body)?
                };
                if let Some(cache) = &self.cache {
                    cache.lock().expect("cache lock").insert(body, reply.clone())?;
                }
                Ok(reply)
            }
            offline => {
                let _permit = self.limiter.acquire();
                Ok(offline_reply(offline, hints))
            }
        }
    }

    fn post_with_retries(
        &self,
        agent: &ureq::Agent,
        api_key: &str,
        body: &serde_json::Value,
    ) -> Result<String, GatewayError> {
        let attempts = self.config.retry.max_attempts.max(1);
        let payload = serde_json::to_string(body).expect("json value serializes");
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                self.retries.fetch_add(1, Ordering::SeqCst);
                let jitter = self.jitter.lock().expect("jitter lock").random::<f64>();
                std::thread::sleep(self.config.retry.backoff(attempt - 1, jitter));
            }
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            let sent = agent
                .post(&self.config.endpoint)
                .header("Authorization", &format!("Bearer {api_key}"))
                .header("Content-Type", "application/json")
                .send(payload.as_str());
            let mut resp = match sent {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("attempt {}: {e}", attempt + 1);
                    last = e.to_string();
                    continue;
                }
            };
            let status = resp.status().as_u16();
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            if (200..300).contains(&status) {
                return first_choice(&text);
            }
            if status == 429 || status >= 500 {
                log::warn!("attempt {}: HTTP {status}", attempt + 1);
                last = format!("HTTP {status}: {text}");
                continue;
            }
            return Err(GatewayError::Http { status, body: text });
        }
        Err(GatewayError::Network {
            attempts,
            message: last,
        })
    }

    /// Rewrites the cache file compactly; returns the number of records.
    pub fn flush_cache(&self) -> Result<usize, GatewayError> {
        match &self.cache {
            Some(cache) => cache.lock().expect("cache lock").flush(),
            None => Ok(0),
        }
    }
}

fn first_choice(body: &str) -> Result<String, GatewayError> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| GatewayError::MalformedResponse("no choices[0].message.content".into()))
}

fn offline_reply(backend: &Backend, hints: &Hints) -> String {
    let truth = match backend {
        Backend::Oracle(table) => hints.query.filter(|q| table.contains(q)).map(|q| q.answer),
        _ => None,
    };
    match backend {
        Backend::Scripted { replies, next } => {
            let i = next.fetch_add(1, Ordering::SeqCst);
            return replies[i % replies.len()].clone();
        }
        Backend::Http { .. } => unreachable!("handled by the caller"),
        Backend::Identity | Backend::Oracle(_) => {}
    }
    match &hints.expect {
        Expect::Order { names } => {
            let mut order: Vec<usize> = (0..names.len()).collect();
            if let Some(pos) = truth.and_then(|t| hints.candidates.iter().position(|&c| c == t)) {
                order.remove(pos);
                order.insert(0, pos);
            }
            let ordered: Vec<&str> = order.iter().map(|&i| names[i].as_str()).collect();
            format_sort_response(&ordered)
        }
        Expect::Score { candidate } => match truth {
            Some(t) if hints.candidates.get(*candidate) == Some(&t) => "100".into(),
            Some(_) => "0".into(),
            None => "50".into(),
        },
        Expect::Alignment => format_sort_response::<&str>(&[]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{Direction, RelationId};

    fn hints(names: &[&str]) -> Hints {
        Hints {
            expect: Expect::Order {
                names: names.iter().map(|s| s.to_string()).collect(),
            },
            query: Some(Query {
                direction: Direction::TailMissing,
                anchor: EntityId(9),
                relation: RelationId(0),
                answer: EntityId(1),
            }),
            candidates: vec![EntityId(0), EntityId(1), EntityId(2)],
        }
    }

    #[test]
    fn identity_echoes() {
        let g = Gateway::identity();
        assert_eq!(
            g.complete(&[], &hints(&["a", "b", "c"])).unwrap(),
            "The final order: [a | b | c]"
        );
    }

    #[test]
    fn oracle_promotes_truth() {
        let h = hints(&["a", "b", "c"]);
        let g = Gateway::oracle(&[h.query.unwrap()]);
        assert_eq!(g.complete(&[], &h).unwrap(), "The final order: [b | a | c]");
        let score = |i| Hints {
            expect: Expect::Score { candidate: i },
            ..h.clone()
        };
        assert_eq!(g.complete(&[], &score(1)).unwrap(), "100");
        assert_eq!(g.complete(&[], &score(2)).unwrap(), "0");
        // unknown query: behaves like identity
        let g = Gateway::oracle(&[]);
        assert_eq!(g.complete(&[], &h).unwrap(), "The final order: [a | b | c]");
    }

    #[test]
    fn scripted_cycles() {
        let g = Gateway::scripted(vec!["x".into(), "y".into()]).unwrap();
        let h = hints(&["a"]);
        let got: Vec<String> = (0..3).map(|_| g.complete(&[], &h).unwrap()).collect();
        assert_eq!(got, ["x", "y", "x"]);
        assert!(Gateway::scripted(Vec::new()).is_err());
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_attempts: 5,
            initial_backoff_ms: 100,
            max_backoff_ms: 300,
        };
        assert_eq!(p.backoff(0, 0.5), Duration::from_millis(100));
        assert_eq!(p.backoff(1, 0.5), Duration::from_millis(200));
        assert_eq!(p.backoff(3, 0.5), Duration::from_millis(300));
        assert_eq!(p.backoff(0, 0.0), Duration::from_millis(50));
    }

    #[test]
    fn defaults_are_zero_randomness() {
        let c = GatewayConfig::default();
        assert_eq!(
            (c.temperature, c.top_p, c.presence_penalty, c.frequency_penalty),
            (0.0, 1.0, 0.0, 0.0)
        );
        assert_eq!(c.retry.max_attempts, 5);
        assert_eq!(c.retry.initial_backoff_ms, 1000);
    }
}
