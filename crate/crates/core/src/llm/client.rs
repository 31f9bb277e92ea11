use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use log::warn;

use super::{
    CacheKey, CompletionRequest, CompletionResponse, CompletionService, LlmError, ResponseCache,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_attempts: 1,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.min(16)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(20),
        }
    }
}

/// Cuts `text` at the earliest occurrence of any non-empty stop string.
pub fn trim_at_stop(text: &str, stop: &[String]) -> String {
    let cut = stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    text[..cut].to_string()
}

type Shared = Result<CompletionResponse, LlmError>;

#[derive(Default)]
struct InFlight {
    result: Mutex<Option<Shared>>,
    ready: Condvar,
}

/// Front door for every completion call: validation, cache lookup, in-flight
/// coalescing of identical concurrent requests, bounded retries and stop
/// trimming.
pub struct LlmClient {
    service: Arc<dyn CompletionService>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    in_flight: Mutex<HashMap<CacheKey, Arc<InFlight>>>,
    upstream_calls: AtomicU64,
}

impl LlmClient {
    /// A client with an in-memory cache and the default retry policy.
    pub fn new(service: Arc<dyn CompletionService>) -> Self {
        Self {
            service,
            cache: Some(ResponseCache::memory()),
            retry: RetryPolicy::default(),
            in_flight: Mutex::new(HashMap::new()),
            upstream_calls: AtomicU64::new(0),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn without_cache(mut self) -> Self {
        self.cache = None;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Number of requests forwarded to the underlying service, retries included.
    pub fn upstream_calls(&self) -> u64 {
        self.upstream_calls.load(Ordering::Relaxed)
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        request.validate()?;
        let key = request.cache_key();
        if let Some(cache) = &self.cache {
            if let Some(mut hit) = cache.get(&key)? {
                hit.cached = true;
                return Ok(hit);
            }
        }

        let (slot, leader) = {
            let mut map = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
            match map.get(&key) {
                Some(slot) => (Arc::clone(slot), false),
                None => {
                    let slot = Arc::new(InFlight::default());
                    map.insert(key.clone(), Arc::clone(&slot));
                    (slot, true)
                }
            }
        };

        if !leader {
            let mut guard = slot.result.lock().unwrap_or_else(|e| e.into_inner());
            while guard.is_none() {
                guard = slot.ready.wait(guard).unwrap_or_else(|e| e.into_inner());
            }
            return guard.clone().expect("result present").map(|mut r| {
                r.cached = true;
                r
            });
        }

        let result = self.fetch(request, &key);
        *slot.result.lock().unwrap_or_else(|e| e.into_inner()) = Some(result.clone());
        slot.ready.notify_all();
        self.in_flight
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .remove(&key);
        result
    }

    fn fetch(&self, request: &CompletionRequest, key: &CacheKey) -> Shared {
        let mut attempt = 0;
        let raw = loop {
            self.upstream_calls.fetch_add(1, Ordering::Relaxed);
            match self.service.complete(request) {
                Ok(resp) => break resp,
                Err(err) if err.is_retryable() && attempt + 1 < self.retry.max_attempts => {
                    let delay = self.retry.delay(attempt);
                    warn!("completion attempt {} failed ({err}); retrying in {delay:?}", attempt + 1);
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(err) => return Err(err),
            }
        };

        if raw.choices.is_empty() {
            return Err(LlmError::Protocol("service returned no choices".into()));
        }
        if raw.choices.len() != request.num_samples as usize {
            return Err(LlmError::Protocol(format!(
                "requested {} samples, got {}",
                request.num_samples,
                raw.choices.len()
            )));
        }
        let response = CompletionResponse {
            choices: raw
                .choices
                .iter()
                .map(|c| trim_at_stop(c, &request.stop))
                .collect(),
            usage: raw.usage,
            cached: false,
        };
        if let Some(cache) = &self.cache {
            cache.put(key, request, &response)?;
        }
        Ok(response)
    }
}

impl CompletionService for LlmClient {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        LlmClient::complete(self, request)
    }
}
