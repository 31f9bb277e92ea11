//! Scoring functions: answer normalization, character error rate, soft and
//! standard VQA accuracy, BLEU-4, CIDEr and keyword accuracy.
//!
//! All functions are pure. Float results are produced in a fixed iteration
//! order so repeated runs yield identical bits.

mod caption;
mod report;
mod text;
mod vqa;

use thiserror::Error;

pub use caption::{bleu4, caption_similarity, tokenize_caption, CaptionMetric, CiderScorer};
pub use report::{aggregate, InstanceScore, MetricName, MetricReport};
pub use text::{char_error_rate, levenshtein, normalize_answer};
pub use vqa::{
    keyword_accuracy, soft_vqa_accuracy, soft_vqa_accuracy_with, standard_vqa_accuracy, IndexMode,
};

/// Absolute tolerance used when comparing scores for ties.
pub const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("ground-truth answer list is empty")]
    EmptyGroundTruth,
    #[error("keyword list is empty")]
    EmptyKeywords,
    #[error("no instances to aggregate")]
    NoInstances,
    #[error("candidates without references: {}", .0.join(", "))]
    MissingReferences(Vec<String>),
}
