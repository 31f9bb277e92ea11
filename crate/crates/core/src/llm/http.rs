use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use super::{CompletionRequest, CompletionResponse, CompletionService, LlmError, Usage};

pub const BASE_URL_ENV: &str = "LLM_BASE_URL";
pub const API_KEY_ENV: &str = "LLM_API_KEY";

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    n: u32,
    #[serde(skip_serializing_if = "<[String]>::is_empty")]
    stop: &'a [String],
}

#[derive(Deserialize)]
struct WireChoice {
    text: String,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Usage,
}

/// Text-completion endpoint speaking `POST {base}/completions`.
#[derive(Debug, Clone)]
pub struct HttpCompletionService {
    base_url: String,
    api_key: Option<String>,
    client: Client,
}

impl HttpCompletionService {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Result<Self, LlmError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| LlmError::Fatal(format!("cannot build http client: {e}")))?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            client,
        })
    }

    /// Reads `LLM_BASE_URL` (required) and `LLM_API_KEY` (optional).
    pub fn from_env() -> Result<Self, LlmError> {
        let base = std::env::var(BASE_URL_ENV)
            .map_err(|_| LlmError::Fatal(format!("{BASE_URL_ENV} is not set")))?;
        Self::new(base, std::env::var(API_KEY_ENV).ok())
    }

    pub fn endpoint(&self) -> String {
        format!("{}/completions", self.base_url)
    }
}

fn classify(status: StatusCode, body: &str) -> LlmError {
    let msg = format!("{status}: {}", body.chars().take(300).collect::<String>());
    match status {
        StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN | StatusCode::PAYMENT_REQUIRED => {
            LlmError::Fatal(msg)
        }
        StatusCode::TOO_MANY_REQUESTS if body.contains("insufficient_quota") => {
            LlmError::Fatal(msg)
        }
        StatusCode::TOO_MANY_REQUESTS | StatusCode::REQUEST_TIMEOUT => LlmError::Retryable(msg),
        s if s.is_server_error() => LlmError::Retryable(msg),
        _ => LlmError::Fatal(msg),
    }
}

impl CompletionService for HttpCompletionService {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let body = WireRequest {
            model: &request.model,
            prompt: &request.prompt,
            max_tokens: request.max_tokens,
            temperature: request.temperature,
            n: request.num_samples,
            stop: &request.stop,
        };
        let mut call = self.client.post(self.endpoint()).json(&body);
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let response = call
            .send()
            .map_err(|e| LlmError::Retryable(format!("transport: {e}")))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| LlmError::Retryable(format!("reading body: {e}")))?;
        if !status.is_success() {
            return Err(classify(status, &text));
        }
        let wire: WireResponse = serde_json::from_str(&text)
            .map_err(|e| LlmError::Protocol(format!("bad response body: {e}")))?;
        Ok(CompletionResponse {
            choices: wire.choices.into_iter().map(|c| c.text).collect(),
            usage: wire.usage,
            cached: false,
        })
    }
}
