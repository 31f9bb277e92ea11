//! Deterministic table-driven completion service for tests and offline runs.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CompletionRequest, CompletionResponse, CompletionService, LlmError, Usage};
use crate::jsonl::{self, JsonlError};

/// How an entry recognizes a prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Matcher {
    Suffix(String),
    Full(String),
    Contains(String),
}

impl Matcher {
    pub fn matches(&self, prompt: &str) -> bool {
        match self {
            Matcher::Suffix(s) => prompt.ends_with(s.as_str()),
            Matcher::Full(s) => prompt == s,
            Matcher::Contains(s) => prompt.contains(s.as_str()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MockFailure {
    Transient,
    Fatal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEntry {
    #[serde(flatten)]
    pub matcher: Matcher,
    #[serde(default)]
    pub responses: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<MockFailure>,
    /// With `error` set: fail this many times, then answer normally.
    /// Absent means fail forever.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail_times: Option<u32>,
}

impl MockEntry {
    pub fn new(matcher: Matcher, responses: &[&str]) -> Self {
        Self {
            matcher,
            responses: responses.iter().map(|s| s.to_string()).collect(),
            error: None,
            fail_times: None,
        }
    }
}

fn default_answer() -> String {
    "unknown".to_string()
}

/// The on-disk mock description. First matching entry wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockTable {
    #[serde(default = "default_answer")]
    pub default: String,
    /// When set, sampled requests (temperature > 0) draw from the matched
    /// response list with a generator seeded by this value and the prompt.
    /// Otherwise samples cycle through the list in order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub entries: Vec<MockEntry>,
}

impl Default for MockTable {
    fn default() -> Self {
        Self {
            default: default_answer(),
            seed: None,
            entries: Vec::new(),
        }
    }
}

impl MockTable {
    pub fn load(path: &Path) -> Result<Self, JsonlError> {
        jsonl::read_json(path)
    }
}

fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

#[derive(Debug)]
pub struct MockCompletionService {
    table: MockTable,
    latency: Option<Duration>,
    calls: AtomicU64,
    failures: Mutex<HashMap<usize, u32>>,
}

impl MockCompletionService {
    pub fn new(table: MockTable) -> Self {
        Self {
            table,
            latency: None,
            calls: AtomicU64::new(0),
            failures: Mutex::new(HashMap::new()),
        }
    }

    /// Convenience constructor from `(matcher, responses)` pairs with
    /// `default` for unmatched prompts.
    pub fn from_table(entries: Vec<(Matcher, Vec<String>)>, default: impl Into<String>) -> Self {
        Self::new(MockTable {
            default: default.into(),
            seed: None,
            entries: entries
                .into_iter()
                .map(|(matcher, responses)| MockEntry {
                    matcher,
                    responses,
                    error: None,
                    fail_times: None,
                })
                .collect(),
        })
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = Some(latency);
        self
    }

    pub fn table(&self) -> &MockTable {
        &self.table
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl CompletionService for MockCompletionService {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(latency) = self.latency {
            std::thread::sleep(latency);
        }
        let matched = self
            .table
            .entries
            .iter()
            .enumerate()
            .find(|(_, e)| e.matcher.matches(&request.prompt));

        if let Some((idx, entry)) = matched {
            if let Some(kind) = entry.error {
                let mut failures = self.failures.lock().unwrap_or_else(|e| e.into_inner());
                let count = failures.entry(idx).or_insert(0);
                if entry.fail_times.is_none_or(|limit| *count < limit) {
                    *count += 1;
                    let msg = format!("mock failure for entry {idx}");
                    return Err(match kind {
                        MockFailure::Transient => LlmError::Retryable(msg),
                        MockFailure::Fatal => LlmError::Fatal(msg),
                    });
                }
            }
        }

        let default = [self.table.default.clone()];
        let pool: &[String] = match matched {
            Some((_, entry)) if !entry.responses.is_empty() => &entry.responses,
            _ => &default,
        };
        let n = request.num_samples as usize;
        let choices: Vec<String> = match self.table.seed {
            Some(seed) if !request.is_greedy() => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&request.prompt));
                (0..n)
                    .map(|_| pool[rng.gen_range(0..pool.len())].clone())
                    .collect()
            }
            _ => (0..n).map(|i| pool[i % pool.len()].clone()).collect(),
        };
        let prompt_tokens = request.prompt.split_whitespace().count() as u64;
        let completion_tokens = choices
            .iter()
            .map(|c| c.split_whitespace().count() as u64)
            .sum();
        Ok(CompletionResponse {
            choices,
            usage: Usage {
                prompt_tokens,
                completion_tokens,
                total_tokens: prompt_tokens + completion_tokens,
            },
            cached: false,
        })
    }
}
