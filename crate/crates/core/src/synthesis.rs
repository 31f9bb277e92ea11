//! Training-data synthesis: sample prompt-guided captions from a completion
//! model, keep the one a caption-only QA system answers best, and export
//! `{prompt, image, caption}` triples for a captioner trainer.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ImageRef, Split, VqaRecord};
use crate::jsonl::{self, JsonlError};
use crate::llm::{CompletionRequest, CompletionService, LlmError, DEFAULT_MODEL};
use crate::metrics::{soft_vqa_accuracy, CiderScorer, MetricError, TIE_TOLERANCE};
use crate::prompts::{
    render_captioner_prompt, render_icl_prompt, render_synthesis_prompt, PromptError,
    PromptTemplates, SynthesisExample, SynthesisTarget,
};
use crate::retrieval::ExamplePool;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("record {0}: every sampled candidate was empty")]
    Unsynthesizable(String),
    #[error("record {0}: no candidates to filter")]
    NoCandidates(String),
    #[error("record {record_id}: {source}")]
    Llm {
        record_id: String,
        #[source]
        source: LlmError,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("no training records to export")]
    EmptyExport,
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub model: String,
    pub num_candidates: u32,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Demonstrations in each filter QA prompt.
    pub filter_examples: usize,
    pub filter_max_tokens: u32,
    pub seed: u64,
    /// Only records whose image split is listed are synthesized.
    pub allowed_splits: Vec<Split>,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            model: DEFAULT_MODEL.to_string(),
            num_candidates: 5,
            temperature: 1.0,
            max_tokens: 60,
            filter_examples: 16,
            filter_max_tokens: 10,
            seed: 0,
            allowed_splits: vec![Split::Train2014],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateCaption {
    pub record_id: String,
    pub candidate_index: usize,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cider: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa_answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub record_id: String,
    pub candidate_index: usize,
    pub soft_accuracy: f64,
    pub cider: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRecord {
    pub prompt: String,
    pub image: ImageRef,
    pub caption: String,
    pub provenance: Provenance,
}

/// One line of the exported training file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLine {
    pub prompt: String,
    pub image_id: String,
    pub split: Split,
    pub caption: String,
    pub provenance: Provenance,
}

impl From<&TrainingRecord> for TrainingLine {
    fn from(r: &TrainingRecord) -> Self {
        Self {
            prompt: r.prompt.clone(),
            image_id: r.image.image_id.clone(),
            split: r.image.split,
            caption: r.caption.clone(),
            provenance: r.provenance.clone(),
        }
    }
}

impl From<TrainingLine> for TrainingRecord {
    fn from(l: TrainingLine) -> Self {
        Self {
            prompt: l.prompt,
            image: ImageRef::new(l.image_id, l.split),
            caption: l.caption,
            provenance: l.provenance,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisSummary {
    pub synthesized: usize,
    /// Outside the split guard, without reference captions, or with only
    /// empty samples.
    pub skipped: usize,
    pub failed: usize,
}

/// Shared inputs for every stage.
pub struct Synthesizer<'a> {
    pub service: &'a dyn CompletionService,
    pub templates: &'a PromptTemplates,
    pub seed_examples: &'a [SynthesisExample],
    pub config: &'a SynthesisConfig,
}

impl Synthesizer<'_> {
    /// Samples `num_candidates` summaries for one record. Outputs are
    /// trimmed, empties dropped and duplicates collapsed onto their first
    /// index.
    pub fn generate_candidates(
        &self,
        record: &VqaRecord,
    ) -> Result<Vec<CandidateCaption>, SynthesisError> {
        let target = SynthesisTarget::from_record(record, &self.templates.context_separator)?;
        let prompt = render_synthesis_prompt(
            &self.templates.synthesis_instruction,
            self.seed_examples,
            &target,
        );
        let request = CompletionRequest::sampled(
            &self.config.model,
            prompt.rendered,
            self.config.max_tokens,
            self.config.temperature,
            self.config.num_candidates,
            vec!["\n".to_string()],
        );
        let response = self
            .service
            .complete(&request)
            .map_err(|source| SynthesisError::Llm {
                record_id: record.record_id.clone(),
                source,
            })?;
        let mut seen = HashSet::new();
        let candidates: Vec<CandidateCaption> = response
            .choices
            .iter()
            .enumerate()
            .filter_map(|(index, raw)| {
                let text = raw.trim();
                (!text.is_empty() && seen.insert(text.to_string())).then(|| CandidateCaption {
                    record_id: record.record_id.clone(),
                    candidate_index: index,
                    text: text.to_string(),
                    soft_accuracy: None,
                    cider: None,
                    qa_answer: None,
                })
            })
            .collect();
        if candidates.is_empty() {
            return Err(SynthesisError::Unsynthesizable(record.record_id.clone()));
        }
        Ok(candidates)
    }

    fn answer_with_caption(
        &self,
        record: &VqaRecord,
        caption: &str,
        pool: &ExamplePool,
    ) -> Result<String, LlmError> {
        let examples: Vec<_> = pool
            .sample(self.config.filter_examples, self.config.seed, &record.record_id)
            .into_iter()
            .map(|e| e.to_icl())
            .collect();
        let prompt = render_icl_prompt(
            &self.templates.icl_instruction,
            &examples,
            caption,
            &record.question,
        );
        let request = CompletionRequest::greedy(
            &self.config.model,
            prompt.rendered,
            self.config.filter_max_tokens,
            vec!["\n".to_string(), "===".to_string()],
        );
        let response = self.service.complete(&request)?;
        Ok(first_line(&response.choices[0]))
    }

    /// Scores every candidate and returns them, selected one first.
    ///
    /// Selection: highest soft accuracy; candidates within [`TIE_TOLERANCE`]
    /// of it are separated by CIDEr against the record's reference captions,
    /// then by the lowest candidate index.
    pub fn filter_candidates(
        &self,
        record: &VqaRecord,
        candidates: &[CandidateCaption],
        pool: &ExamplePool,
        scorer: &CiderScorer,
    ) -> Result<Vec<CandidateCaption>, SynthesisError> {
        if candidates.is_empty() {
            return Err(SynthesisError::NoCandidates(record.record_id.clone()));
        }
        let mut scored = Vec::with_capacity(candidates.len());
        for candidate in candidates {
            let mut c = candidate.clone();
            match self.answer_with_caption(record, &c.text, pool) {
                Ok(answer) => {
                    c.soft_accuracy = Some(soft_vqa_accuracy(&answer, &record.answers)?);
                    c.qa_answer = Some(answer);
                }
                Err(err) => {
                    warn!(
                        "record {} candidate {}: QA failed ({err}); scoring 0",
                        record.record_id, c.candidate_index
                    );
                    c.soft_accuracy = Some(0.0);
                }
            }
            scored.push(c);
        }
        let references = record
            .reference_captions
            .as_ref()
            .map(|s| s.captions.as_slice())
            .unwrap_or(&[]);
        let selected = select(&mut scored, |text| scorer.score(text, references));
        scored.sort_by_key(|c| c.candidate_index);
        let chosen = scored.remove(
            scored
                .iter()
                .position(|c| c.candidate_index == selected)
                .expect("selected index present"),
        );
        scored.insert(0, chosen);
        Ok(scored)
    }

    /// Generates candidates for every record on a pool of `workers` threads.
    /// Failures are logged and counted, never fatal.
    pub fn generate_all(
        &self,
        records: &[VqaRecord],
        workers: usize,
    ) -> Result<(Vec<CandidateCaption>, SynthesisSummary), SynthesisError> {
        let allowed: BTreeSet<Split> = self.config.allowed_splits.iter().copied().collect();
        let mut summary = SynthesisSummary::default();
        let eligible: Vec<&VqaRecord> = records
            .iter()
            .filter(|r| {
                let keep = allowed.contains(&r.image.split);
                if !keep {
                    info!("record {}: split {} excluded by guard", r.record_id, r.image.split);
                    summary.skipped += 1;
                }
                keep
            })
            .collect();
        let results: Vec<(String, Result<Vec<CandidateCaption>, SynthesisError>)> =
            run_pool(workers, || {
                eligible
                    .par_iter()
                    .map(|r| (r.record_id.clone(), self.generate_candidates(r)))
                    .collect()
            })?;
        let mut all = Vec::new();
        for (record_id, result) in results {
            match result {
                Ok(c) => {
                    summary.synthesized += 1;
                    all.extend(c);
                }
                Err(e @ (SynthesisError::Unsynthesizable(_) | SynthesisError::Prompt(_))) => {
                    warn!("record {record_id}: skipped ({e})");
                    summary.skipped += 1;
                }
                Err(e) => {
                    warn!("record {record_id}: failed ({e})");
                    summary.failed += 1;
                }
            }
        }
        all.sort_by(|a, b| {
            (a.record_id.as_str(), a.candidate_index).cmp(&(b.record_id.as_str(), b.candidate_index))
        });
        Ok((all, summary))
    }

    /// Filters grouped candidates for each record that has any. Returns the
    /// selected candidates and every scored candidate, both sorted by
    /// `(record_id, candidate_index)`.
    pub fn filter_all(
        &self,
        records: &[VqaRecord],
        candidates: &[CandidateCaption],
        pool: &ExamplePool,
        workers: usize,
    ) -> Result<FilterOutput, SynthesisError> {
        let scorer = CiderScorer::new(
            records
                .iter()
                .filter_map(|r| r.reference_captions.as_ref())
                .map(|s| s.captions.as_slice()),
        );
        let mut grouped: BTreeMap<&str, Vec<CandidateCaption>> = BTreeMap::new();
        for c in candidates {
            grouped.entry(c.record_id.as_str()).or_default().push(c.clone());
        }
        let jobs: Vec<(&VqaRecord, Vec<CandidateCaption>)> = records
            .iter()
            .filter_map(|r| grouped.remove(r.record_id.as_str()).map(|c| (r, c)))
            .collect();
        for orphan in grouped.keys() {
            warn!("candidates for unknown record {orphan} ignored");
        }
        let results: Vec<(String, Result<Vec<CandidateCaption>, SynthesisError>)> =
            run_pool(workers, || {
                jobs.par_iter()
                    .map(|(r, c)| (r.record_id.clone(), self.filter_candidates(r, c, pool, &scorer)))
                    .collect()
            })?;
        let mut out = FilterOutput::default();
        for (record_id, result) in results {
            match result {
                Ok(mut scored) => {
                    out.selected.push(scored[0].clone());
                    out.scored.append(&mut scored);
                }
                Err(e) => {
                    warn!("record {record_id}: filter failed ({e})");
                    out.failed += 1;
                }
            }
        }
        let by_key = |a: &CandidateCaption, b: &CandidateCaption| {
            (a.record_id.as_str(), a.candidate_index).cmp(&(b.record_id.as_str(), b.candidate_index))
        };
        out.selected.sort_by(by_key);
        out.scored.sort_by(by_key);
        Ok(out)
    }

    /// Full pipeline: generate, filter, and pair each selection with its
    /// captioner prompt and image.
    pub fn synthesize_dataset(
        &self,
        records: &[VqaRecord],
        pool: &ExamplePool,
        workers: usize,
    ) -> Result<(Vec<TrainingRecord>, SynthesisSummary), SynthesisError> {
        let (candidates, mut summary) = self.generate_all(records, workers)?;
        let filtered = self.filter_all(records, &candidates, pool, workers)?;
        summary.synthesized -= filtered.failed;
        summary.failed += filtered.failed;
        let training = training_records(records, &filtered.selected, self.templates)?;
        info!(
            "synthesized {}, skipped {}, failed {}",
            summary.synthesized, summary.skipped, summary.failed
        );
        Ok((training, summary))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutput {
    pub selected: Vec<CandidateCaption>,
    pub scored: Vec<CandidateCaption>,
    pub failed: usize,
}

/// Text up to the first newline, trimmed.
pub fn first_line(text: &str) -> String {
    text.lines().next().unwrap_or("").trim().to_string()
}

/// Picks the winner among scored candidates and fills `cider` for the
/// soft-accuracy ties. Returns the winner's candidate index.
fn select(scored: &mut [CandidateCaption], cider: impl Fn(&str) -> f64) -> usize {
    let soft = |c: &CandidateCaption| c.soft_accuracy.unwrap_or(0.0);
    let best = scored.iter().map(soft).fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = (0..scored.len())
        .filter(|&i| best - soft(&scored[i]) <= TIE_TOLERANCE)
        .collect();
    if tied.len() == 1 {
        return scored[tied[0]].candidate_index;
    }
    for &i in &tied {
        scored[i].cider = Some(cider(&scored[i].text));
    }
    let best_cider = tied
        .iter()
        .map(|&i| scored[i].cider.unwrap_or(0.0))
        .fold(f64::NEG_INFINITY, f64::max);
    tied.iter()
        .filter(|&&i| best_cider - scored[i].cider.unwrap_or(0.0) <= TIE_TOLERANCE)
        .map(|&i| scored[i].candidate_index)
        .min()
        .expect("at least one tied candidate")
}

/// Joins selected candidates with their records. Candidates whose record is
/// missing are dropped with a warning.
pub fn training_records(
    records: &[VqaRecord],
    selected: &[CandidateCaption],
    templates: &PromptTemplates,
) -> Result<Vec<TrainingRecord>, SynthesisError> {
    let by_id: BTreeMap<&str, &VqaRecord> =
        records.iter().map(|r| (r.record_id.as_str(), r)).collect();
    let mut out = Vec::with_capacity(selected.len());
    for c in selected {
        let Some(record) = by_id.get(c.record_id.as_str()) else {
            warn!("selected caption for unknown record {} dropped", c.record_id);
            continue;
        };
        let prompt = render_captioner_prompt(
            &templates.captioner_prefix,
            &record.question,
            record.ocr_tokens.as_deref(),
        )?;
        out.push(TrainingRecord {
            prompt: prompt.rendered,
            image: record.image.clone(),
            caption: c.text.clone(),
            provenance: Provenance {
                record_id: c.record_id.clone(),
                candidate_index: c.candidate_index,
                soft_accuracy: c.soft_accuracy.unwrap_or(0.0),
                cider: c.cider,
            },
        });
    }
    out.sort_by(|a, b| a.provenance.record_id.cmp(&b.provenance.record_id));
    Ok(out)
}

pub fn export_training_file(records: &[TrainingRecord], path: &Path) -> Result<(), SynthesisError> {
    if records.is_empty() {
        return Err(SynthesisError::EmptyExport);
    }
    let mut lines: Vec<TrainingLine> = records.iter().map(TrainingLine::from).collect();
    lines.sort_by(|a, b| a.provenance.record_id.cmp(&b.provenance.record_id));
    Ok(jsonl::write_jsonl(path, lines.iter())?)
}

pub fn read_training_file(path: &Path) -> Result<Vec<TrainingRecord>, SynthesisError> {
    let lines: Vec<TrainingLine> = jsonl::read_jsonl(path)?;
    Ok(lines.into_iter().map(TrainingRecord::from).collect())
}

pub fn write_candidates(path: &Path, candidates: &[CandidateCaption]) -> Result<(), SynthesisError> {
    Ok(jsonl::write_jsonl(path, candidates.iter())?)
}

pub fn read_candidates(path: &Path) -> Result<Vec<CandidateCaption>, SynthesisError> {
    Ok(jsonl::read_jsonl(path)?)
}

fn run_pool<T: Send>(workers: usize, job: impl FnOnce() -> T + Send) -> Result<T, SynthesisError> {
    crate::parallel::with_workers(workers, job).map_err(|e| SynthesisError::Pool(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CaptionSet;
    use crate::llm::{Matcher, MockCompletionService, MockEntry, MockFailure, MockTable};
    use crate::prompts::default_seed_examples;
    use crate::retrieval::ExampleEntry;

    fn strings(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn record(id: &str, split: Split, question: &str, answers: &[&str], caps: &[&str]) -> VqaRecord {
        let image = ImageRef::new(format!("img-{id}"), split);
        let mut r = VqaRecord::new(id, image.clone(), question, strings(answers));
        r.reference_captions = Some(CaptionSet {
            image,
            captions: strings(caps),
        });
        r
    }

    fn pool() -> ExamplePool {
        ExamplePool::new(
            (0..4)
                .map(|k| ExampleEntry {
                    record_id: format!("pool{k}"),
                    question: format!("question {k}?"),
                    context: format!("context {k}"),
                    answer: format!("answer {k}"),
                })
                .collect(),
        )
        .unwrap()
    }

    fn run<R>(table: MockTable, f: impl FnOnce(&Synthesizer<'_>) -> R) -> R {
        let service = MockCompletionService::new(table);
        let templates = PromptTemplates::default();
        let seeds = default_seed_examples();
        let config = SynthesisConfig::default();
        f(&Synthesizer {
            service: &service,
            templates: &templates,
            seed_examples: &seeds,
            config: &config,
        })
    }

    fn table(entries: Vec<MockEntry>) -> MockTable {
        MockTable {
            default: "unknown".into(),
            seed: None,
            entries,
        }
    }

    fn bike() -> VqaRecord {
        record(
            "1",
            Split::Train2014,
            "How is the bike affixed to the pole?",
            &["chain"],
            &["a bike by a pole", "a bicycle", "bike", "pole", "street"],
        )
    }

    #[test]
    fn five_distinct_samples_give_five_candidates() {
        let t = table(vec![MockEntry::new(
            Matcher::Contains("Summary:".into()),
            &["a", "b", "c", "d", "e"],
        )]);
        let c = run(t, |s| s.generate_candidates(&bike()).unwrap());
        let idx: Vec<_> = c.iter().map(|c| c.candidate_index).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn duplicates_collapse_to_first_index() {
        let t = table(vec![MockEntry::new(
            Matcher::Contains("Summary:".into()),
            &["a", "a", " b", "b", "b"],
        )]);
        let c = run(t, |s| s.generate_candidates(&bike()).unwrap());
        let got: Vec<_> = c.iter().map(|c| (c.candidate_index, c.text.as_str())).collect();
        assert_eq!(got, vec![(0, "a"), (2, "b")]);
    }

    #[test]
    fn all_empty_is_unsynthesizable() {
        let t = table(vec![MockEntry::new(Matcher::Contains("Summary:".into()), &["  ", ""])]);
        let err = run(t, |s| s.generate_candidates(&bike()).unwrap_err());
        assert!(matches!(err, SynthesisError::Unsynthesizable(id) if id == "1"));
    }

    fn cand(index: usize, text: &str) -> CandidateCaption {
        CandidateCaption {
            record_id: "1".into(),
            candidate_index: index,
            text: text.into(),
            soft_accuracy: None,
            cider: None,
            qa_answer: None,
        }
    }

    fn qa_table(pairs: &[(&str, &str)]) -> MockTable {
        table(
            pairs
                .iter()
                .map(|(caption, answer)| {
                    MockEntry::new(Matcher::Contains(format!("Context: {caption}\n")), &[answer])
                })
                .collect(),
        )
    }

    #[test]
    fn correct_answer_beats_incorrect() {
        let t = qa_table(&[("bike with lock", "chain"), ("a red bike", "rope")]);
        let scorer = CiderScorer::new(vec![bike().reference_captions.unwrap().captions]);
        let out = run(t, |s| {
            s.filter_candidates(
                &bike(),
                &[cand(0, "a red bike"), cand(1, "bike with lock")],
                &pool(),
                &scorer,
            )
            .unwrap()
        });
        assert_eq!(out[0].candidate_index, 1);
        assert_eq!(out[0].soft_accuracy, Some(1.0));
        assert_eq!(out[0].qa_answer.as_deref(), Some("chain"));
        assert!(out[0].cider.is_none());
        assert!(out.iter().all(|c| c.soft_accuracy <= out[0].soft_accuracy));
    }

    #[test]
    fn single_candidate_selected_even_at_zero() {
        let t = qa_table(&[("nothing useful", "banana")]);
        let scorer = CiderScorer::new(vec![bike().reference_captions.unwrap().captions]);
        let out = run(t, |s| {
            s.filter_candidates(&bike(), &[cand(3, "nothing useful")], &pool(), &scorer)
                .unwrap()
        });
        assert_eq!(out[0].candidate_index, 3);
        assert_eq!(out[0].soft_accuracy, Some(0.0));
    }

    #[test]
    fn ties_go_to_higher_cider_then_lower_index() {
        let r = record(
            "1",
            Split::Train2014,
            "What animal?",
            &["cat"],
            &["a black cat on a car", "a cat sitting on a car", "black cat", "car", "cat"],
        );
        let other = strings(&["a dog on grass", "grass field", "dog", "a brown dog", "park"]);
        let scorer = CiderScorer::new(vec![r.reference_captions.clone().unwrap().captions, other]);
        let close = "a black cat sitting on a car";
        let far = "an animal outdoors";
        assert!(scorer.score(close, &r.reference_captions.as_ref().unwrap().captions)
            > scorer.score(far, &r.reference_captions.as_ref().unwrap().captions));
        let t = qa_table(&[(close, "cat"), (far, "cat"), ("an animal indoors", "cat")]);
        let out = run(t, |s| {
            s.filter_candidates(
                &r,
                &[cand(0, far), cand(1, close), cand(2, "an animal indoors")],
                &pool(),
                &scorer,
            )
            .unwrap()
        });
        assert_eq!(out[0].text, close);
        assert!(out.iter().all(|c| c.cider.is_some()));

        // equal CIDEr (both zero overlap) falls back to the lower index
        let t = qa_table(&[("zzz", "cat"), ("yyy", "cat")]);
        let out = run(t, |s| {
            s.filter_candidates(&r, &[cand(4, "zzz"), cand(2, "yyy")], &pool(), &scorer)
                .unwrap()
        });
        assert_eq!(out[0].candidate_index, 2);
    }

    #[test]
    fn qa_failure_scores_zero() {
        let mut failing = MockEntry::new(Matcher::Contains("Context: broken\n".into()), &["chain"]);
        failing.error = Some(MockFailure::Fatal);
        let t = table(vec![
            failing,
            MockEntry::new(Matcher::Contains("Context: fine\n".into()), &["rope"]),
        ]);
        let scorer = CiderScorer::new(vec![bike().reference_captions.unwrap().captions]);
        let out = run(t, |s| {
            s.filter_candidates(&bike(), &[cand(0, "broken"), cand(1, "fine")], &pool(), &scorer)
                .unwrap()
        });
        let broken = out.iter().find(|c| c.text == "broken").unwrap();
        assert_eq!(broken.soft_accuracy, Some(0.0));
        assert!(broken.qa_answer.is_none());
    }

    #[test]
    fn filter_prompt_excludes_record_and_uses_sixteen_examples() {
        let big = ExamplePool::new(
            (0..40)
                .map(|k| ExampleEntry {
                    record_id: k.to_string(),
                    question: format!("q{k}"),
                    context: format!("c{k}"),
                    answer: format!("a{k}"),
                })
                .collect(),
        )
        .unwrap();
        let service = MockCompletionService::new(table(vec![]));
        let templates = PromptTemplates::default();
        let config = SynthesisConfig::default();
        let s = Synthesizer {
            service: &service,
            templates: &templates,
            seed_examples: &[],
            config: &config,
        };
        let examples = big.sample(config.filter_examples, config.seed, "1");
        assert_eq!(examples.len(), 16);
        assert!(examples.iter().all(|e| e.record_id != "1"));
        assert_eq!(s.answer_with_caption(&bike(), "x", &big).unwrap(), "unknown");
    }

    fn three_records() -> Vec<VqaRecord> {
        vec![
            record("b", Split::Train2014, "What color?", &["red"], &["red car", "car", "a car", "road", "red"]),
            record("a", Split::Train2014, "What animal?", &["cat"], &["cat", "a cat", "pet", "animal", "kitty"]),
            record("c", Split::Val2014, "How many?", &["two"], &["two dogs", "dogs", "pets", "two", "yard"]),
        ]
    }

    fn pipeline_table() -> MockTable {
        MockTable {
            default: "unknown".into(),
            seed: None,
            entries: vec![
                MockEntry::new(Matcher::Contains("Question: What color?\nAnswer: red\nSummary:".into()), &["", "a red car", "a car"]),
                MockEntry::new(Matcher::Contains("Question: What animal?\nAnswer: cat\nSummary:".into()), &["a cat", "a grey cat", "pet"]),
                MockEntry::new(Matcher::Contains("Question: How many?\nAnswer: two\nSummary:".into()), &["two dogs"]),
                MockEntry::new(Matcher::Contains("Context: a red car\n".into()), &["red"]),
                MockEntry::new(Matcher::Contains("Context: a grey cat\n".into()), &["cat"]),
                MockEntry::new(Matcher::Contains("Context: a cat\n".into()), &["cat"]),
            ],
        }
    }

    #[test]
    fn guard_drops_validation_record() {
        let out = run(pipeline_table(), |s| s.synthesize_dataset(&three_records(), &pool(), 2).unwrap());
        let (training, summary) = out;
        let ids: Vec<_> = training.iter().map(|t| t.provenance.record_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b"]);
        assert_eq!(summary, SynthesisSummary { synthesized: 2, skipped: 1, failed: 0 });
        assert!(training.iter().all(|t| t.image.split == Split::Train2014));
        assert_eq!(training[0].prompt, "describe to answer: What animal?");
    }

    #[test]
    fn all_empty_record_is_skipped() {
        let mut t = pipeline_table();
        t.entries[1] = MockEntry::new(Matcher::Contains("Question: What animal?".into()), &[" "]);
        let (training, summary) = run(t, |s| s.synthesize_dataset(&three_records(), &pool(), 1).unwrap());
        assert_eq!(training.len(), 1);
        assert_eq!(summary, SynthesisSummary { synthesized: 1, skipped: 2, failed: 0 });
    }

    #[test]
    fn export_is_stable_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (training, _) = run(pipeline_table(), |s| s.synthesize_dataset(&three_records(), &pool(), 4).unwrap());
        let first = dir.path().join("one.jsonl");
        let second = dir.path().join("two.jsonl");
        export_training_file(&training, &first).unwrap();
        let (again, _) = run(pipeline_table(), |s| s.synthesize_dataset(&three_records(), &pool(), 1).unwrap());
        export_training_file(&again, &second).unwrap();
        assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
        assert_eq!(read_training_file(&first).unwrap(), training);
        let line: serde_json::Value =
            serde_json::from_str(std::fs::read_to_string(&first).unwrap().lines().next().unwrap()).unwrap();
        for key in ["prompt", "image_id", "split", "caption", "provenance"] {
            assert!(line.get(key).is_some(), "{key}");
        }
        assert!(matches!(export_training_file(&[], &first), Err(SynthesisError::EmptyExport)));
    }

    #[test]
    fn hundred_record_round_trip() {
        let training: Vec<TrainingRecord> = (0..100)
            .map(|k| TrainingRecord {
                prompt: format!("describe to answer: q{k}?"),
                image: ImageRef::new(format!("{k}"), Split::Train2014),
                caption: format!("caption \"{k}\" with unicode é"),
                provenance: Provenance {
                    record_id: format!("{k:03}"),
                    candidate_index: k % 5,
                    soft_accuracy: k as f64 / 7.0,
                    cider: (k % 2 == 0).then(|| k as f64 / 13.0),
                },
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        export_training_file(&training, &path).unwrap();
        assert_eq!(read_training_file(&path).unwrap(), training);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn selection_ignores_arrival_order(
                softs in prop::collection::vec(prop::sample::select(vec![0.0, 1.0 / 3.0, 0.5, 1.0]), 1..6),
                rotate in 0usize..6,
            ) {
                let texts = ["a cat", "black cat on car", "car", "a dog", "cat on car", "grass"];
                let refs = strings(&["a black cat on a car", "cat on car", "cat"]);
                let scorer = CiderScorer::new(vec![refs.clone(), strings(&["dog on grass"])]);
                let base: Vec<CandidateCaption> = softs
                    .iter()
                    .enumerate()
                    .map(|(i, s)| CandidateCaption { soft_accuracy: Some(*s), ..cand(i, texts[i]) })
                    .collect();
                let mut a = base.clone();
                let mut b = base.clone();
                let len = b.len();
                b.rotate_left(rotate % len);
                b.reverse();
                let pick_a = select(&mut a, |t| scorer.score(t, &refs));
                let pick_b = select(&mut b, |t| scorer.score(t, &refs));
                prop_assert_eq!(pick_a, pick_b);
                let best = softs.iter().cloned().fold(0.0, f64::max);
                prop_assert!(softs[pick_a] >= best - TIE_TOLERANCE);
            }
        }
    }
}
