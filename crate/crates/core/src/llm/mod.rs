//! Text-completion gateway: request types, a retrying and caching client,
//! a table-driven mock, a concurrency/rate throttle and an HTTP backend.

mod cache;
mod client;
mod http;
mod mock;
mod throttle;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{DiskCache, ResponseCache};
pub use client::{trim_at_stop, LlmClient, RetryPolicy};
pub use http::{HttpCompletionService, API_KEY_ENV, BASE_URL_ENV};
pub use mock::{Matcher, MockCompletionService, MockEntry, MockFailure, MockTable};
pub use throttle::{Clock, SystemClock, Throttle, ThrottleConfig, VirtualClock};

pub const DEFAULT_MODEL: &str = "code-davinci-002";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transient failure: {0}")]
    Retryable(String),
    #[error("service rejected the request: {0}")]
    Fatal(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("cache error: {0}")]
    Cache(String),
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, LlmError::Retryable(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub num_samples: u32,
    pub stop: Vec<String>,
}

impl CompletionRequest {
    /// Temperature 0, a single sample.
    pub fn greedy(
        model: impl Into<String>,
        prompt: impl Into<String>,
        max_tokens: u32,
        stop: Vec<String>,
    ) -> Self {
        Self {
            model: model.into(),
            prompt: prompt.into(),
            max_tokens,
            temperature: 0.0,
            num_samples: 1,
            stop,
        }
    }

    pub fn sampled(
        model: impl Into<String>,
        prompt: impl Into<String>,
        max_tokens: u32,
        temperature: f64,
        num_samples: u32,
        stop: Vec<String>,
    ) -> Self {
        Self {
            model: model.into(),
            prompt: prompt.into(),
            max_tokens,
            temperature,
            num_samples,
            stop,
        }
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature == 0.0
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        let bad = |msg: &str| Err(LlmError::InvalidRequest(msg.to_string()));
        if self.model.is_empty() {
            return bad("model is empty");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        if self.num_samples == 0 {
            return bad("num_samples must be positive");
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return bad("temperature must be finite and non-negative");
        }
        if self.is_greedy() && self.num_samples != 1 {
            return bad("greedy decoding (temperature 0) takes exactly one sample");
        }
        Ok(())
    }

    pub fn cache_key(&self) -> CacheKey {
        let canonical = serde_json::to_vec(&(
            &self.model,
            &self.prompt,
            self.max_tokens,
            self.temperature,
            self.num_samples,
            &self.stop,
        ))
        .expect("request fields serialize");
        CacheKey(hex::encode(Sha256::digest(&canonical)))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub choices: Vec<String>,
    #[serde(default)]
    pub usage: Usage,
    #[serde(default)]
    pub cached: bool,
}

/// Hex SHA-256 over every request field.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Anything that turns a prompt into completions.
pub trait CompletionService: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError>;
}

impl<S: CompletionService + ?Sized> CompletionService for Arc<S> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        (**self).complete(request)
    }
}

impl<S: CompletionService + ?Sized> CompletionService for Box<S> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        (**self).complete(request)
    }
}
