use serde::{Deserialize, Serialize};

use super::MetricError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    SoftVqaAccuracy,
    VqaAccuracy,
    MultipleChoiceAccuracy,
    KeywordAccuracy,
    Bleu4,
    Cider,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub record_id: String,
    pub score: f64,
}

/// Per-instance scores plus their arithmetic mean. Rows are sorted by
/// `record_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric_name: MetricName,
    pub aggregate: f64,
    pub count: usize,
    pub per_instance: Vec<InstanceScore>,
}

impl MetricReport {
    pub fn score_of(&self, record_id: &str) -> Option<f64> {
        self.per_instance
            .binary_search_by(|row| row.record_id.as_str().cmp(record_id))
            .ok()
            .map(|idx| self.per_instance[idx].score)
    }
}

pub fn aggregate<I>(metric_name: MetricName, scores: I) -> Result<MetricReport, MetricError>
where
    I: IntoIterator<Item = (String, f64)>,
{
    let mut per_instance: Vec<InstanceScore> = scores
        .into_iter()
        .map(|(record_id, score)| InstanceScore { record_id, score })
        .collect();
    if per_instance.is_empty() {
        return Err(MetricError::NoInstances);
    }
    per_instance.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    let sum: f64 = per_instance.iter().map(|row| row.score).sum();
    Ok(MetricReport {
        metric_name,
        aggregate: sum / per_instance.len() as f64,
        count: per_instance.len(),
        per_instance,
    })
}
