//! Prompt-guided caption pipeline for caption-mediated visual question
//! answering: annotation ingestion, caption synthesis and filtering with a
//! text-completion model, in-context example retrieval, and evaluation.
//!
//! Every neural model sits behind a service trait so each stage runs against
//! deterministic mocks as well as real endpoints.

pub mod config;
pub mod corpus;
mod jsonl;
mod parallel;
pub mod metrics;
pub mod llm;
pub mod prompts;
pub mod retrieval;
pub mod runner;
pub mod synthesis;

pub use jsonl::{read_json, read_jsonl, to_jsonl_string, write_json, write_jsonl, JsonlError};
