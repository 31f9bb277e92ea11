//! Per-instance BLEU-4 and CIDEr over whitespace tokens.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::report::{aggregate, MetricName, MetricReport};
use super::MetricError;

const MAX_N: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionMetric {
    Bleu4,
    Cider,
}

/// Lowercase tokens; punctuation splits words, in-word apostrophes stay.
pub fn tokenize_caption(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().flat_map(char::to_lowercase).collect();
    let mut cleaned = String::with_capacity(chars.len());
    for (i, &c) in chars.iter().enumerate() {
        let in_word_apostrophe = c == '\''
            && i > 0
            && chars[i - 1].is_alphanumeric()
            && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
        if c.is_alphanumeric() || in_word_apostrophe {
            cleaned.push(c);
        } else {
            cleaned.push(' ');
        }
    }
    cleaned.split_whitespace().map(str::to_string).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window.join(" ")).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence-level BLEU-4: clipped n-gram precisions for n = 1..4, uniform
/// geometric mean, brevity penalty against the closest reference length
/// (shorter wins ties). No smoothing.
pub fn bleu4(candidate: &str, references: &[String]) -> f64 {
    let cand = tokenize_caption(candidate);
    if cand.is_empty() || references.is_empty() {
        return 0.0;
    }
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize_caption(r)).collect();

    let mut log_precision_sum = 0.0;
    for n in 1..=MAX_N {
        let cand_counts = ngram_counts(&cand, n);
        let total: usize = cand_counts.values().sum();
        if total == 0 {
            return 0.0;
        }
        let mut max_ref: HashMap<&str, usize> = HashMap::new();
        let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
        for counts in &ref_counts {
            for (gram, &count) in counts {
                let slot = max_ref.entry(gram.as_str()).or_insert(0);
                *slot = (*slot).max(count);
            }
        }
        let clipped: usize = cand_counts
            .iter()
            .map(|(gram, &count)| count.min(max_ref.get(gram.as_str()).copied().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            return 0.0;
        }
        log_precision_sum += (clipped as f64 / total as f64).ln();
    }

    let c = cand.len();
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(0);
    let brevity = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    (brevity * (log_precision_sum / MAX_N as f64).exp()).clamp(0.0, 1.0)
}

/// CIDEr with document frequencies taken from a reference corpus, where each
/// document is one image's reference set.
///
/// Score = 10 * mean over n = 1..4 of the mean cosine between the candidate's
/// tf-idf vector and each reference's. A zero-norm vector gives cosine 0.
#[derive(Debug, Clone)]
pub struct CiderScorer {
    num_docs: usize,
    doc_freq: Vec<HashMap<String, usize>>,
}

impl CiderScorer {
    pub fn new<I, R>(reference_sets: I) -> Self
    where
        I: IntoIterator<Item = R>,
        R: AsRef<[String]>,
    {
        let mut doc_freq = vec![HashMap::new(); MAX_N];
        let mut num_docs = 0;
        for set in reference_sets {
            num_docs += 1;
            let tokenized: Vec<Vec<String>> =
                set.as_ref().iter().map(|r| tokenize_caption(r)).collect();
            for (n, df) in doc_freq.iter_mut().enumerate() {
                let mut seen = std::collections::BTreeSet::new();
                for tokens in &tokenized {
                    seen.extend(ngram_counts(tokens, n + 1).into_keys());
                }
                for gram in seen {
                    *df.entry(gram).or_insert(0) += 1;
                }
            }
        }
        Self { num_docs, doc_freq }
    }

    pub fn num_docs(&self) -> usize {
        self.num_docs
    }

    /// `ln(N) - ln(max(1, df))`; unseen n-grams get the full `ln(N)`.
    pub fn idf(&self, n: usize, gram: &str) -> f64 {
        let df = self.doc_freq[n - 1].get(gram).copied().unwrap_or(0);
        (self.num_docs.max(1) as f64).ln() - (df.max(1) as f64).ln()
    }

    fn tfidf(&self, tokens: &[String], n: usize) -> BTreeMap<String, f64> {
        ngram_counts(tokens, n)
            .into_iter()
            .map(|(gram, count)| {
                let weight = count as f64 * self.idf(n, &gram);
                (gram, weight)
            })
            .collect()
    }

    pub fn score(&self, candidate: &str, references: &[String]) -> f64 {
        if references.is_empty() {
            return 0.0;
        }
        let cand = tokenize_caption(candidate);
        let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize_caption(r)).collect();
        let mut per_n_sum = 0.0;
        for n in 1..=MAX_N {
            let cand_vec = self.tfidf(&cand, n);
            let cos_sum: f64 = refs
                .iter()
                .map(|r| cosine(&cand_vec, &self.tfidf(r, n)))
                .sum();
            per_n_sum += cos_sum / refs.len() as f64;
        }
        (10.0 * per_n_sum / MAX_N as f64).clamp(0.0, 10.0)
    }
}

fn cosine(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let norm_a = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let norm_b = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if norm_a == 0.0 || norm_b == 0.0 {
        return 0.0;
    }
    let dot: f64 = a
        .iter()
        .filter_map(|(gram, va)| b.get(gram).map(|vb| va * vb))
        .sum();
    (dot / (norm_a * norm_b)).clamp(0.0, 1.0)
}

/// Scores each `(id, caption)` against `references[id]`. CIDEr document
/// frequencies come from the whole reference map.
pub fn caption_similarity(
    candidates: &[(String, String)],
    references: &BTreeMap<String, Vec<String>>,
    metric: CaptionMetric,
) -> Result<MetricReport, MetricError> {
    let mut missing: Vec<String> = candidates
        .iter()
        .filter(|(id, _)| references.get(id).is_none_or(Vec::is_empty))
        .map(|(id, _)| id.clone())
        .collect();
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(MetricError::MissingReferences(missing));
    }
    let scores: Vec<(String, f64)> = match metric {
        CaptionMetric::Bleu4 => candidates
            .iter()
            .map(|(id, caption)| (id.clone(), bleu4(caption, &references[id])))
            .collect(),
        CaptionMetric::Cider => {
            let scorer = CiderScorer::new(references.values());
            candidates
                .iter()
                .map(|(id, caption)| (id.clone(), scorer.score(caption, &references[id])))
                .collect()
        }
    };
    let name = match metric {
        CaptionMetric::Bleu4 => MetricName::Bleu4,
        CaptionMetric::Cider => MetricName::Cider,
    };
    aggregate(name, scores)
}
