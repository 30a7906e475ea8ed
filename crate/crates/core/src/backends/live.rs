//! Live HTTP adapters.
//!
//! All four capabilities speak JSON over a small transport trait so the
//! retry and parsing logic is testable with injected faults. The LLM and
//! judge adapters target OpenAI-style chat-completions endpoints; the
//! generator and embedder target a sidecar with the minimal contract
//! documented in the README.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::Engine;
use serde_json::{json, Value};

use super::{finish_embedding, BackendDescriptor, Embedder, Generator, LlmClient, VlmJudge};
use crate::error::Error;
use crate::model::AttackSpec;
use crate::Result;

/// Transport-level failure; `retryable` marks transient faults (connect
/// errors, timeouts, HTTP 5xx and 429).
#[derive(Debug, Clone)]
pub struct TransportError {
    pub message: String,
    pub retryable: bool,
}

/// Blocking JSON-over-HTTP POST. Implemented by [`ReqwestTransport`] for
/// real traffic and by test fakes for fault injection.
pub trait JsonTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
    ) -> std::result::Result<Value, TransportError>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new(timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Transport { message: e.to_string(), retryable: false })?;
        Ok(ReqwestTransport { client })
    }
}

impl JsonTransport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
    ) -> std::result::Result<Value, TransportError> {
        let mut req = self.client.post(url).json(body);
        for (k, v) in headers {
            req = req.header(k, v);
        }
        let resp = req.send().map_err(|e| TransportError {
            message: e.to_string(),
            retryable: e.is_timeout() || e.is_connect(),
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(TransportError {
                message: format!("http status {status}"),
                retryable: status.is_server_error() || status.as_u16() == 429,
            });
        }
        resp.json().map_err(|e| TransportError { message: e.to_string(), retryable: false })
    }
}

/// Runs `op`, retrying transient failures up to `max_retries` extra
/// attempts with linear backoff.
pub fn with_retries<T>(
    max_retries: u32,
    backoff: Duration,
    mut op: impl FnMut() -> std::result::Result<T, TransportError>,
) -> Result<T> {
    let mut attempt = 0;
    loop {
        match op() {
            Ok(v) => return Ok(v),
            Err(e) if e.retryable && attempt < max_retries => {
                attempt += 1;
                std::thread::sleep(backoff.saturating_mul(attempt));
            }
            Err(e) => {
                return Err(Error::Transport { message: e.message, retryable: e.retryable })
            }
        }
    }
}

/// Minimum-interval rate limiter, per backend.
pub struct RateLimiter {
    min_interval: Duration,
    last: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(min_interval: Duration) -> Self {
        RateLimiter { min_interval, last: Mutex::new(None) }
    }

    pub fn wait(&self) {
        if self.min_interval.is_zero() {
            return;
        }
        let mut last = self.last.lock().expect("rate limiter poisoned");
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < self.min_interval {
                std::thread::sleep(self.min_interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }
}

struct HttpCommon {
    endpoint: String,
    headers: Vec<(String, String)>,
    transport: Arc<dyn JsonTransport>,
    max_retries: u32,
    backoff: Duration,
    limiter: RateLimiter,
}

impl HttpCommon {
    fn from_descriptor(desc: &BackendDescriptor) -> Result<Self> {
        let endpoint = desc.require("endpoint")?.to_string();
        let mut headers = Vec::new();
        if let Some(var) = desc.get("api_key_env") {
            let key = std::env::var(var).map_err(|_| Error::BackendConfig {
                backend_id: desc.backend_id.clone(),
                message: format!("credential variable {var} is not set"),
            })?;
            headers.push(("Authorization".to_string(), format!("Bearer {key}")));
        }
        let timeout_ms: u64 = desc.get("timeout_ms").unwrap_or("60000").parse().unwrap_or(60000);
        let max_retries: u32 = desc.get("max_retries").unwrap_or("2").parse().unwrap_or(2);
        let backoff_ms: u64 = desc.get("backoff_ms").unwrap_or("250").parse().unwrap_or(250);
        let min_interval_ms: u64 =
            desc.get("min_interval_ms").unwrap_or("0").parse().unwrap_or(0);
        Ok(HttpCommon {
            endpoint,
            headers,
            transport: Arc::new(ReqwestTransport::new(Duration::from_millis(timeout_ms))?),
            max_retries,
            backoff: Duration::from_millis(backoff_ms),
            limiter: RateLimiter::new(Duration::from_millis(min_interval_ms)),
        })
    }

    fn post(&self, body: &Value) -> Result<Value> {
        self.limiter.wait();
        with_retries(self.max_retries, self.backoff, || {
            self.transport.post_json(&self.endpoint, &self.headers, body)
        })
    }
}

fn chat_content(response: &Value) -> Result<String> {
    response["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Transport {
            message: "response has no choices[0].message.content".into(),
            retryable: false,
        })
}

/// OpenAI-style chat-completions LLM.
pub struct HttpLlm {
    id: String,
    model: String,
    common: HttpCommon,
}

impl HttpLlm {
    pub fn from_descriptor(desc: &BackendDescriptor) -> Result<Self> {
        Ok(HttpLlm {
            id: desc.backend_id.clone(),
            model: desc.get("model").unwrap_or("gpt-4.1").to_string(),
            common: HttpCommon::from_descriptor(desc)?,
        })
    }

    #[cfg(test)]
    fn with_transport(mut self, transport: Arc<dyn JsonTransport>) -> Self {
        self.common.transport = transport;
        self
    }
}

impl LlmClient for HttpLlm {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        chat_content(&self.common.post(&body)?)
    }
}

/// Chat-completions judge with the image inlined as a data URL.
pub struct HttpJudge {
    id: String,
    model: String,
    common: HttpCommon,
}

impl HttpJudge {
    pub fn from_descriptor(desc: &BackendDescriptor) -> Result<Self> {
        Ok(HttpJudge {
            id: desc.backend_id.clone(),
            model: desc.get("model").unwrap_or("gpt-4o").to_string(),
            common: HttpCommon::from_descriptor(desc)?,
        })
    }

    #[cfg(test)]
    fn with_transport(mut self, transport: Arc<dyn JsonTransport>) -> Self {
        self.common.transport = transport;
        self
    }
}

impl VlmJudge for HttpJudge {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn raw_reply(&self, png: &[u8], question: &str, attempt: u32) -> Result<String> {
        let data_url = format!(
            "data:image/png;base64,{}",
            base64::engine::general_purpose::STANDARD.encode(png)
        );
        let text = if attempt == 0 {
            question.to_string()
        } else {
            format!("{question} Reply with exactly one word: yes or no.")
        };
        let body = json!({
            "model": self.model,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": text},
                    {"type": "image_url", "image_url": {"url": data_url}},
                ],
            }],
        });
        chat_content(&self.common.post(&body)?)
    }
}

/// Sidecar generator: POST {prompt, seed, checkpoint, sampler} and receive
/// {"image_b64": ...}.
pub struct HttpGenerator {
    effective_id: String,
    checkpoint: Option<String>,
    sampler: BTreeMap<String, String>,
    common: HttpCommon,
}

impl HttpGenerator {
    pub fn from_descriptor(
        desc: &BackendDescriptor,
        attack: Option<&AttackSpec>,
        effective_id: String,
        sampler: BTreeMap<String, String>,
    ) -> Result<Self> {
        // Per-attack checkpoints: `checkpoint.RR-u0b20 = path` wins over the
        // generic `checkpoint = path`.
        let checkpoint = match attack {
            Some(spec) => {
                let key = format!("checkpoint.{}-{}", spec.family, spec.trigger_slug());
                match desc.get(&key).or_else(|| desc.get("checkpoint")) {
                    Some(c) => Some(c.to_string()),
                    None => {
                        return Err(Error::BackendConfig {
                            backend_id: desc.backend_id.clone(),
                            message: format!("no checkpoint configured for attack {key}"),
                        })
                    }
                }
            }
            None => desc.get("checkpoint").map(str::to_string),
        };
        Ok(HttpGenerator {
            effective_id,
            checkpoint,
            sampler,
            common: HttpCommon::from_descriptor(desc)?,
        })
    }
}

impl Generator for HttpGenerator {
    fn backend_id(&self) -> &str {
        &self.effective_id
    }

    fn generate_png(&self, caption_text: &str, seed: u64) -> Result<Vec<u8>> {
        let body = json!({
            "prompt": caption_text,
            "seed": seed,
            "checkpoint": self.checkpoint,
            "sampler": self.sampler,
        });
        let resp = self.common.post(&body)?;
        let b64 = resp["image_b64"].as_str().ok_or_else(|| Error::Transport {
            message: "response has no image_b64".into(),
            retryable: false,
        })?;
        base64::engine::general_purpose::STANDARD
            .decode(b64)
            .map_err(|e| Error::Image(format!("invalid image_b64: {e}")))
    }
}

/// Sidecar embedder: POST {"text": ...} or {"image_b64": ...} and receive
/// {"embedding": [...]}.
pub struct HttpEmbedder {
    id: String,
    dim: usize,
    common: HttpCommon,
}

impl HttpEmbedder {
    pub fn from_descriptor(desc: &BackendDescriptor) -> Result<Self> {
        let dim: usize = desc.get("dim").unwrap_or("512").parse().map_err(|_| {
            Error::BackendConfig {
                backend_id: desc.backend_id.clone(),
                message: "dim must be a positive integer".into(),
            }
        })?;
        Ok(HttpEmbedder { id: desc.backend_id.clone(), dim, common: HttpCommon::from_descriptor(desc)? })
    }

    fn embedding_of(&self, body: &Value) -> Result<Vec<f64>> {
        let resp = self.common.post(body)?;
        let v: Vec<f64> = serde_json::from_value(resp["embedding"].clone())
            .map_err(|_| Error::Transport { message: "response has no embedding".into(), retryable: false })?;
        finish_embedding(v, self.dim)
    }
}

impl Embedder for HttpEmbedder {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(Error::validation("cannot embed empty text"));
        }
        self.embedding_of(&json!({"text": text}))
    }

    fn embed_image(&self, png: &[u8]) -> Result<Vec<f64>> {
        let b64 = base64::engine::general_purpose::STANDARD.encode(png);
        self.embedding_of(&json!({"image_b64": b64}))
    }
}
