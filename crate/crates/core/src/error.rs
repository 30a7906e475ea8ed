//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A domain-type invariant was violated; the message names the invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Homoglyph injection found no occurrence of the target character.
    #[error("no substitution site: target character {target_char:?} not present in caption")]
    NoSubstitutionSite { target_char: char },

    /// Replay fixture lookup failed; signals fixture drift.
    #[error("fixture miss for {kind} key {key}")]
    FixtureMiss { kind: String, key: String },

    /// Fixture file schema version does not match this build.
    #[error("fixture schema version mismatch: found {found}, expected {expected}")]
    FixtureSchema { found: u32, expected: u32 },

    /// A backend does not expose a capability a caller requires.
    #[error("backend {backend} has no {capability} capability")]
    CapabilityUnavailable { backend: String, capability: String },

    /// Live transport failure. `retryable` distinguishes transient faults
    /// (timeouts, 5xx) from permanent ones (auth, bad request).
    #[error("transport failure ({}): {message}", if *.retryable { "retryable" } else { "permanent" })]
    Transport { message: String, retryable: bool },

    /// The VLM judge reply could not be parsed as yes/no after a re-ask.
    #[error("unparseable judge verdict: {reply:?}")]
    JudgeParse { reply: String },

    /// Backend configuration is incomplete or inconsistent.
    #[error("backend config error for {backend_id}: {message}")]
    BackendConfig { backend_id: String, message: String },

    /// Numerical failure (dimension mismatch, non-PSD covariance, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The rewrite retry policy was exhausted in strict mode.
    #[error("rewrite rejected after {attempts} attempts: {reason}")]
    RewriteExhausted { attempts: u32, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image decode error: {0}")]
    Image(String),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Whether a retry of the failed operation could plausibly succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport { retryable: true, .. })
    }
}
