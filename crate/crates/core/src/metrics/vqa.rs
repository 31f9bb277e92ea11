use super::text::{char_error_rate, normalize_answer};
use super::MetricError;

/// How the three indices of the soft accuracy maximization are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IndexMode {
    /// Three different ground-truth answers.
    #[default]
    Distinct,
    /// Indices may repeat, which collapses to the single best agreement.
    WithRepetition,
}

/// Mean of the three best `max(0, 1 - CER)` agreements between the
/// prediction and the ground-truth answers, all normalized first. With fewer
/// than three answers, the mean over all of them.
pub fn soft_vqa_accuracy(pred: &str, gts: &[String]) -> Result<f64, MetricError> {
    soft_vqa_accuracy_with(pred, gts, IndexMode::Distinct)
}

pub fn soft_vqa_accuracy_with(
    pred: &str,
    gts: &[String],
    mode: IndexMode,
) -> Result<f64, MetricError> {
    if gts.is_empty() {
        return Err(MetricError::EmptyGroundTruth);
    }
    let pred = normalize_answer(pred);
    let mut agreements: Vec<f64> = gts
        .iter()
        .map(|gt| (1.0 - char_error_rate(&pred, &normalize_answer(gt))).max(0.0))
        .collect();
    agreements.sort_by(|a, b| b.total_cmp(a));
    Ok(match mode {
        IndexMode::WithRepetition => agreements[0],
        IndexMode::Distinct => {
            let top = &agreements[..agreements.len().min(3)];
            top.iter().sum::<f64>() / top.len() as f64
        }
    })
}

/// `min(#exact matches / 3, 1)` after normalization.
pub fn standard_vqa_accuracy(pred: &str, gts: &[String]) -> Result<f64, MetricError> {
    if gts.is_empty() {
        return Err(MetricError::EmptyGroundTruth);
    }
    let pred = normalize_answer(pred);
    let matches = gts.iter().filter(|gt| normalize_answer(gt) == pred).count();
    Ok((matches as f64 / 3.0).min(1.0))
}

/// Fraction of keywords whose normalized form occurs inside the normalized
/// answer.
pub fn keyword_accuracy(answer: &str, keywords: &[String]) -> Result<f64, MetricError> {
    if keywords.is_empty() {
        return Err(MetricError::EmptyKeywords);
    }
    let answer = normalize_answer(answer);
    let hits = keywords
        .iter()
        .filter(|k| answer.contains(&normalize_answer(k)))
        .count();
    Ok(hits as f64 / keywords.len() as f64)
}
