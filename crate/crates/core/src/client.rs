//! Blocking chat-completions client with retries, bounded parallelism and
//! an on-disk response cache keyed by the SHA-256 of the request body.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::prompt::{render_chat_request, serialize_request, PromptBundle, PromptError, RequestOptions};

pub const API_KEY_ENV: &str = "SCENE2PROMPT_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub base_url: String,
    /// Read from the environment, never from config files.
    #[serde(skip)]
    pub api_key: Option<String>,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub parallelism: usize,
    pub backoff_base_secs: f64,
    pub backoff_factor: f64,
    /// Relative jitter applied to each backoff delay, e.g. 0.2 for ±20%.
    pub backoff_jitter: f64,
    pub seed: u64,
    pub cache_dir: Option<PathBuf>,
    pub use_cache: bool,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            api_key: None,
            timeout_secs: 60.0,
            max_retries: 3,
            parallelism: 4,
            backoff_base_secs: 1.0,
            backoff_factor: 2.0,
            backoff_jitter: 0.2,
            seed: 0,
            cache_dir: None,
            use_cache: true,
        }
    }
}

impl EndpointConfig {
    pub fn with_env_key(mut self) -> Self {
        self.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        self
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        let bad = |m: String| Err(ClientError::Config(m));
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return bad(format!("base_url '{}' must start with http:// or https://", self.base_url));
        }
        if !(self.timeout_secs > 0.0) {
            return bad(format!("timeout_secs must be positive, got {}", self.timeout_secs));
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        if !(self.backoff_base_secs >= 0.0 && self.backoff_factor >= 1.0 && (0.0..1.0).contains(&self.backoff_jitter)) {
            return bad("backoff needs base >= 0, factor >= 1 and jitter in [0, 1)".into());
        }
        Ok(())
    }
}

/// Adapter for the wire format of a chat endpoint.
pub trait ChatProtocol: Send + Sync {
    /// Path appended to the base URL.
    fn path(&self) -> &str;
    /// Pull the answer text out of a successful response.
    fn extract_answer(&self, response: &Value) -> Result<String, String>;
}

/// `POST {base}/chat/completions`, answer in `choices[0].message.content`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ChatCompletions;

impl ChatProtocol for ChatCompletions {
    fn path(&self) -> &str {
        "/chat/completions"
    }

    fn extract_answer(&self, response: &Value) -> Result<String, String> {
        let content = response
            .pointer("/choices/0/message/content")
            .ok_or_else(|| "response has no choices[0].message.content".to_string())?;
        match content {
            Value::String(s) => Ok(s.trim().to_string()),
            // some servers return content as a list of typed parts
            Value::Array(parts) => Ok(parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .concat()
                .trim()
                .to_string()),
            other => Err(format!("message content has unexpected type: {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Attempt {
    /// Delay slept before this attempt.
    pub delay_secs: f64,
    pub status: Option<u16>,
    pub error: Option<String>,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Answer {
    pub answer_text: String,
    pub latency_secs: f64,
    pub raw_response: Value,
    pub attempts: Vec<Attempt>,
    pub from_cache: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("invalid endpoint config: {0}")]
    Config(String),
    #[error("request failed after {} attempts: {message}", attempts.len())]
    Transport { message: String, attempts: Vec<Attempt> },
    #[error("endpoint rejected request with status {status}: {body}")]
    Rejected { status: u16, body: String, attempts: Vec<Attempt> },
    #[error("malformed response: {message}")]
    Protocol { message: String, raw: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("cache: {0}")]
    Cache(#[from] std::io::Error),
}

impl ClientError {
    pub fn attempts(&self) -> &[Attempt] {
        match self {
            ClientError::Transport { attempts, .. } | ClientError::Rejected { attempts, .. } => attempts,
            _ => &[],
        }
    }
}

/// Hex SHA-256 of the exact request bytes.
pub fn request_key(body: &[u8]) -> String {
    hex::encode(Sha256::digest(body))
}

/// Backoff delay before retry `retry` (0-based): `base * factor^retry`
/// scaled by `1 + jitter * u` with `u` uniform in `[-1, 1]`.
pub fn backoff_delay(cfg: &EndpointConfig, retry: u32, u: f64) -> f64 {
    cfg.backoff_base_secs * cfg.backoff_factor.powi(retry as i32) * (1.0 + cfg.backoff_jitter * u)
}

pub struct Client {
    config: EndpointConfig,
    protocol: Box<dyn ChatProtocol>,
    agent: ureq::Agent,
    rng: Mutex<ChaCha8Rng>,
    tmp_counter: AtomicUsize,
}

enum Outcome {
    Done(u16, String),
    Retry(Option<u16>, String),
}

impl Client {
    pub fn new(config: EndpointConfig) -> Result<Self, ClientError> {
        Self::with_protocol(config, Box::new(ChatCompletions))
    }

    pub fn with_protocol(config: EndpointConfig, protocol: Box<dyn ChatProtocol>) -> Result<Self, ClientError> {
        config.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let rng = Mutex::new(ChaCha8Rng::seed_from_u64(config.seed));
        Ok(Self { config, protocol, agent, rng, tmp_counter: AtomicUsize::new(0) })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    fn url(&self) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), self.protocol.path())
    }

    fn cache_path(&self, key: &str) -> Option<PathBuf> {
        self.config.cache_dir.as_ref().filter(|_| self.config.use_cache).map(|d| d.join(format!("{key}.json")))
    }

    fn send_once(&self, body: &[u8]) -> Outcome {
        let mut req = self.agent.post(&self.url()).header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        match req.send(body) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                match resp.body_mut().read_to_string() {
                    Ok(text) if status >= 500 => Outcome::Retry(Some(status), text),
                    Ok(text) => Outcome::Done(status, text),
                    Err(e) => Outcome::Retry(Some(status), e.to_string()),
                }
            }
            Err(e) => Outcome::Retry(None, e.to_string()),
        }
    }

    /// Send one serialized request body, retrying server errors and
    /// transport failures.
    pub fn ask_raw(&self, body: &[u8]) -> Result<Answer, ClientError> {
        let start = Instant::now();
        let cache = self.cache_path(&request_key(body));
        if let Some(path) = &cache {
            if let Ok(text) = std::fs::read_to_string(path) {
                let raw: Value = serde_json::from_str(&text).map_err(|e| ClientError::Protocol { message: e.to_string(), raw: text.clone() })?;
                let answer_text = self.protocol.extract_answer(&raw).map_err(|message| ClientError::Protocol { message, raw: text })?;
                return Ok(Answer { answer_text, latency_secs: start.elapsed().as_secs_f64(), raw_response: raw, attempts: vec![], from_cache: true });
            }
        }
        let mut attempts = Vec::new();
        let mut delay = 0.0;
        loop {
            if delay > 0.0 {
                std::thread::sleep(Duration::from_secs_f64(delay));
            }
            let t = Instant::now();
            let outcome = self.send_once(body);
            let elapsed_secs = t.elapsed().as_secs_f64();
            match outcome {
                Outcome::Done(status, text) => {
                    attempts.push(Attempt { delay_secs: delay, status: Some(status), error: None, elapsed_secs });
                    if !(200..300).contains(&status) {
                        return Err(ClientError::Rejected { status, body: text, attempts });
                    }
                    let raw: Value = serde_json::from_str(&text).map_err(|e| ClientError::Protocol { message: e.to_string(), raw: text.clone() })?;
                    let answer_text = self.protocol.extract_answer(&raw).map_err(|message| ClientError::Protocol { message, raw: text.clone() })?;
                    if let Some(path) = &cache {
                        self.write_cache(path, text.as_bytes())?;
                    }
                    return Ok(Answer { answer_text, latency_secs: start.elapsed().as_secs_f64(), raw_response: raw, attempts, from_cache: false });
                }
                Outcome::Retry(status, message) => {
                    log::warn!("attempt {} failed: {}", attempts.len() + 1, status.map_or(message.clone(), |s| format!("status {s}")));
                    attempts.push(Attempt { delay_secs: delay, status, error: Some(message.clone()), elapsed_secs });
                    let retry = attempts.len() as u32 - 1;
                    if retry >= self.config.max_retries {
                        return Err(ClientError::Transport { message, attempts });
                    }
                    let u = self.rng.lock().expect("rng lock").gen_range(-1.0..=1.0);
                    delay = backoff_delay(&self.config, retry, u);
                }
            }
        }
    }

    pub fn ask(&self, body: &Value) -> Result<Answer, ClientError> {
        self.ask_raw(&serialize_request(body))
    }

    pub fn ask_bundle(&self, bundle: &PromptBundle, opts: &RequestOptions) -> Result<Answer, ClientError> {
        self.ask(&render_chat_request(bundle, opts)?)
    }

    /// Run requests with at most `parallelism` in flight. Results keep the
    /// input order; one failure does not stop the others.
    pub fn ask_batch(&self, bodies: &[Value]) -> Vec<Result<Answer, ClientError>> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<Answer, ClientError>>>> = bodies.iter().map(|_| Mutex::new(None)).collect();
        let workers = self.config.parallelism.min(bodies.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= bodies.len() {
                        break;
                    }
                    let r = self.ask(&bodies[i]);
                    *slots[i].lock().expect("slot lock") = Some(r);
                });
            }
        });
        slots.into_iter().map(|m| m.into_inner().expect("slot lock").expect("every slot filled")).collect()
    }

    fn write_cache(&self, path: &Path, bytes: &[u8]) -> Result<(), ClientError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = path.with_extension(format!("tmp{}-{n}", std::process::id()));
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}
