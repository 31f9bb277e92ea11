//! Caption-mediated VQA: caption lookup, demonstration selection, prompt
//! construction, greedy decoding and scoring.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use rayon::prelude::*;
use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::VqaRecord;
use crate::jsonl::{self, JsonlError};
use crate::llm::{CompletionRequest, CompletionService, LlmError, DEFAULT_MODEL};
use crate::metrics::{
    aggregate, char_error_rate, keyword_accuracy, normalize_answer, standard_vqa_accuracy,
    MetricError, MetricName, MetricReport, TIE_TOLERANCE,
};
use crate::prompts::{render_captioner_prompt, render_icl_prompt, DEFAULT_ICL_INSTRUCTION};
use crate::retrieval::{top_n_where, EmbeddingPool, ExampleEntry, ExamplePool, RetrievalError};
use crate::synthesis::first_line;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("record {0}: no caption available")]
    MissingCaption(String),
    #[error("record {0}: no query embedding")]
    MissingEmbedding(String),
    #[error("caption source {source_name} is missing {} records: {}", missing.len(), missing.join(", "))]
    Coverage {
        source_name: String,
        missing: Vec<String>,
    },
    #[error("record {record_id}: {source}")]
    Llm {
        record_id: String,
        #[source]
        source: LlmError,
    },
    #[error("record {record_id}: {reason}")]
    InvalidRecord { record_id: String, reason: String },
    #[error("prediction for unknown record {0}")]
    UnknownRecord(String),
    #[error("caption file: duplicate key {0}")]
    DuplicateCaption(String),
    #[error("caption service: {0}")]
    Captioner(String),
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Okvqa,
    AokvqaDa,
    AokvqaMc,
    Vqav2,
    Textvqa,
    Webqa,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::Okvqa,
        Task::AokvqaDa,
        Task::AokvqaMc,
        Task::Vqav2,
        Task::Textvqa,
        Task::Webqa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Okvqa => "okvqa",
            Task::AokvqaDa => "aokvqa_da",
            Task::AokvqaMc => "aokvqa_mc",
            Task::Vqav2 => "vqav2",
            Task::Textvqa => "textvqa",
            Task::Webqa => "webqa",
        }
    }

    pub fn metric(self) -> MetricName {
        match self {
            Task::AokvqaMc => MetricName::MultipleChoiceAccuracy,
            Task::Webqa => MetricName::KeywordAccuracy,
            _ => MetricName::VqaAccuracy,
        }
    }

    pub fn default_examples(self) -> usize {
        match self {
            Task::Webqa => 8,
            _ => 32,
        }
    }

    pub fn default_max_tokens(self) -> u32 {
        match self {
            Task::Webqa => 100,
            _ => 10,
        }
    }

    /// Long-form answers keep their newlines.
    pub fn stop(self) -> Vec<String> {
        match self {
            Task::Webqa => vec!["===".to_string()],
            _ => vec!["\n".to_string(), "===".to_string()],
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = RunError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| RunError::Config(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Retrieved,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: String,
    pub task: Task,
    pub strategy: Strategy,
    /// `None` uses the task default.
    pub n_examples: Option<usize>,
    pub seeds: Vec<u64>,
    pub instruction: String,
    /// `None` uses the task default.
    pub max_tokens: Option<u32>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: DEFAULT_MODEL.to_string(),
            task: Task::Okvqa,
            strategy: Strategy::Random,
            n_examples: None,
            seeds: vec![0, 1, 2],
            instruction: DEFAULT_ICL_INSTRUCTION.to_string(),
            max_tokens: None,
        }
    }
}

impl RunConfig {
    pub fn examples(&self) -> usize {
        self.n_examples.unwrap_or_else(|| self.task.default_examples())
    }

    pub fn answer_tokens(&self) -> u32 {
        self.max_tokens.unwrap_or_else(|| self.task.default_max_tokens())
    }
}

/// Where test-time captions come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "locator", rename_all = "snake_case")]
pub enum CaptionSource {
    PrecomputedFile(std::path::PathBuf),
    CaptionerService(String),
}

impl CaptionSource {
    pub fn open(&self, prefix: &str) -> Result<Box<dyn Captioner>, RunError> {
        Ok(match self {
            CaptionSource::PrecomputedFile(path) => Box::new(PrecomputedCaptions::load(path)?),
            CaptionSource::CaptionerService(url) => Box::new(HttpCaptioner::new(url, prefix)?),
        })
    }
}

pub trait Captioner: Send + Sync {
    fn caption(&self, record: &VqaRecord) -> Result<String, RunError>;

    /// Ids of records this source cannot caption without trying.
    fn missing(&self, _records: &[VqaRecord]) -> Vec<String> {
        Vec::new()
    }
}

/// One line of a caption file. A record-level caption wins over an
/// image-level one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    pub caption: String,
}

#[derive(Debug, Clone, Default)]
pub struct PrecomputedCaptions {
    by_record: BTreeMap<String, String>,
    by_image: BTreeMap<String, String>,
}

impl PrecomputedCaptions {
    pub fn new(lines: Vec<CaptionLine>) -> Result<Self, RunError> {
        let mut out = Self::default();
        for line in lines {
            let (map, key) = match (line.record_id, line.image_id) {
                (Some(id), _) => (&mut out.by_record, id),
                (None, Some(id)) => (&mut out.by_image, id),
                (None, None) => {
                    return Err(RunError::Config(
                        "caption line needs record_id or image_id".into(),
                    ))
                }
            };
            if map.insert(key.clone(), line.caption).is_some() {
                return Err(RunError::DuplicateCaption(key));
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        Self::new(jsonl::read_jsonl(path)?)
    }

    fn lookup(&self, record: &VqaRecord) -> Option<&String> {
        self.by_record
            .get(&record.record_id)
            .or_else(|| self.by_image.get(&record.image.image_id))
    }
}

impl Captioner for PrecomputedCaptions {
    fn caption(&self, record: &VqaRecord) -> Result<String, RunError> {
        self.lookup(record)
            .cloned()
            .ok_or_else(|| RunError::MissingCaption(record.record_id.clone()))
    }

    fn missing(&self, records: &[VqaRecord]) -> Vec<String> {
        records
            .iter()
            .filter(|r| self.lookup(r).is_none())
            .map(|r| r.record_id.clone())
            .collect()
    }
}

/// `POST {base}/caption` with `{prompt, image_id, image_uri}`, answered by
/// `{caption}`.
#[derive(Debug, Clone)]
pub struct HttpCaptioner {
    base_url: String,
    prefix: String,
    client: Client,
}

#[derive(Serialize)]
struct CaptionRequest<'a> {
    prompt: &'a str,
    image_id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_uri: Option<&'a str>,
}

#[derive(Deserialize)]
struct CaptionResponse {
    caption: String,
}

impl HttpCaptioner {
    pub fn new(base_url: &str, prefix: &str) -> Result<Self, RunError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| RunError::Captioner(e.to_string()))?;
        Ok(Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            prefix: prefix.to_string(),
            client,
        })
    }
}

impl Captioner for HttpCaptioner {
    fn caption(&self, record: &VqaRecord) -> Result<String, RunError> {
        let prompt = render_captioner_prompt(&self.prefix, &record.question, record.ocr_tokens.as_deref())
            .map_err(|e| RunError::InvalidRecord {
                record_id: record.record_id.clone(),
                reason: e.to_string(),
            })?;
        let body = CaptionRequest {
            prompt: &prompt.rendered,
            image_id: &record.image.image_id,
            image_uri: record.image.uri.as_deref(),
        };
        let response = self
            .client
            .post(format!("{}/caption", self.base_url))
            .json(&body)
            .send()
            .map_err(|e| RunError::Captioner(e.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| RunError::Captioner(e.to_string()))?;
        if !status.is_success() {
            return Err(RunError::Captioner(format!("{status}: {text}")));
        }
        let parsed: CaptionResponse =
            serde_json::from_str(&text).map_err(|e| RunError::Captioner(e.to_string()))?;
        Ok(parsed.caption)
    }
}

/// How demonstrations are chosen for a test record.
#[derive(Clone, Copy)]
pub enum ExampleSelector<'a> {
    Random {
        pool: &'a ExamplePool,
    },
    /// `embeddings` covers pool entries; `queries` covers test records. Both
    /// may be the same pool.
    Retrieved {
        pool: &'a ExamplePool,
        embeddings: &'a EmbeddingPool,
        queries: &'a EmbeddingPool,
    },
}

impl<'a> ExampleSelector<'a> {
    pub fn strategy(&self) -> Strategy {
        match self {
            ExampleSelector::Random { .. } => Strategy::Random,
            ExampleSelector::Retrieved { .. } => Strategy::Retrieved,
        }
    }

    /// Demonstrations in prompt order. Retrieved examples put the most
    /// similar one last, next to the test instance.
    pub fn select(&self, record_id: &str, n: usize, seed: u64) -> Result<Vec<&'a ExampleEntry>, RunError> {
        if n == 0 {
            return Ok(Vec::new());
        }
        match *self {
            ExampleSelector::Random { pool } => Ok(pool.sample(n, seed, record_id)),
            ExampleSelector::Retrieved {
                pool,
                embeddings,
                queries,
            } => {
                let query = queries
                    .get(record_id)
                    .ok_or_else(|| RunError::MissingEmbedding(record_id.to_string()))?;
                let hits = top_n_where(query, embeddings, n, |id| pool.get(id).is_some())?;
                Ok(hits
                    .iter()
                    .rev()
                    .map(|h| pool.get(&h.record_id).expect("filtered to pool"))
                    .collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub record_id: String,
    pub answer: String,
    pub examples_used: Vec<String>,
    pub prompt_digest: String,
}

/// Choice with the highest `1 - CER(answer, choice)` after normalization;
/// the earliest choice wins ties.
pub fn multiple_choice_answer(answer: &str, choices: &[String]) -> Result<String, RunError> {
    if choices.len() != 4 {
        return Err(RunError::Config(format!(
            "multiple choice needs 4 choices, got {}",
            choices.len()
        )));
    }
    let answer = normalize_answer(answer);
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, choice) in choices.iter().enumerate() {
        let score = 1.0 - char_error_rate(&answer, &normalize_answer(choice));
        if score > best.0 + TIE_TOLERANCE {
            best = (score, i);
        }
    }
    Ok(choices[best.1].clone())
}

/// Answers one record with a single greedy completion.
pub fn answer_one(
    record: &VqaRecord,
    captioner: &dyn Captioner,
    selector: &ExampleSelector<'_>,
    config: &RunConfig,
    seed: u64,
    service: &dyn CompletionService,
) -> Result<Prediction, RunError> {
    let caption = captioner.caption(record)?;
    let chosen = selector.select(&record.record_id, config.examples(), seed)?;
    let examples: Vec<_> = chosen.iter().map(|e| e.to_icl()).collect();
    let prompt = render_icl_prompt(&config.instruction, &examples, &caption, &record.question);
    let request = CompletionRequest::greedy(
        &config.model,
        prompt.rendered,
        config.answer_tokens(),
        config.task.stop(),
    );
    let prompt_digest = request.cache_key().to_string();
    let response = service.complete(&request).map_err(|source| RunError::Llm {
        record_id: record.record_id.clone(),
        source,
    })?;
    let raw = &response.choices[0];
    let mut answer = match config.task {
        Task::Webqa => raw.trim().to_string(),
        _ => first_line(raw),
    };
    if config.task == Task::AokvqaMc {
        let choices = record.choices.as_deref().ok_or_else(|| RunError::InvalidRecord {
            record_id: record.record_id.clone(),
            reason: "no answer choices".into(),
        })?;
        answer = multiple_choice_answer(&answer, choices)?;
    }
    Ok(Prediction {
        record_id: record.record_id.clone(),
        answer,
        examples_used: chosen.iter().map(|e| e.record_id.clone()).collect(),
        prompt_digest,
    })
}

/// Task metric for one answer.
pub fn score_answer(task: Task, record: &VqaRecord, answer: &str) -> Result<f64, RunError> {
    let invalid = |reason: &str| RunError::InvalidRecord {
        record_id: record.record_id.clone(),
        reason: reason.to_string(),
    };
    Ok(match task {
        Task::AokvqaMc => {
            let choices = record.choices.as_ref().ok_or_else(|| invalid("no answer choices"))?;
            let correct = record
                .correct_choice
                .and_then(|i| choices.get(i))
                .ok_or_else(|| invalid("no correct choice"))?;
            if answer == correct {
                1.0
            } else {
                0.0
            }
        }
        Task::Webqa => {
            let keywords = record.keywords.as_deref().ok_or_else(|| invalid("no keywords"))?;
            keyword_accuracy(answer, keywords)?
        }
        _ => standard_vqa_accuracy(answer, &record.answers)?,
    })
}

pub fn evaluate_predictions(
    task: Task,
    records: &[VqaRecord],
    predictions: &[Prediction],
) -> Result<MetricReport, RunError> {
    let by_id: BTreeMap<&str, &VqaRecord> =
        records.iter().map(|r| (r.record_id.as_str(), r)).collect();
    let scores = predictions
        .iter()
        .map(|p| {
            let record = by_id
                .get(p.record_id.as_str())
                .ok_or_else(|| RunError::UnknownRecord(p.record_id.clone()))?;
            Ok((p.record_id.clone(), score_answer(task, record, &p.answer)?))
        })
        .collect::<Result<Vec<_>, RunError>>()?;
    Ok(aggregate(task.metric(), scores)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    /// `None` for retrieved runs.
    pub seed: Option<u64>,
    pub predictions: Vec<Prediction>,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub task: Task,
    pub runs: Vec<SeedRun>,
    /// Mean of the per-run aggregates.
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub seed: Option<u64>,
    pub aggregate: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub task: Task,
    pub metric_name: MetricName,
    pub strategy: Strategy,
    pub n_examples: usize,
    pub per_seed: Vec<SeedAggregate>,
    pub mean: f64,
}

impl RunOutput {
    pub fn summary(&self, config: &RunConfig) -> RunSummary {
        RunSummary {
            task: self.task,
            metric_name: self.task.metric(),
            strategy: config.strategy,
            n_examples: config.examples(),
            per_seed: self
                .runs
                .iter()
                .map(|r| SeedAggregate {
                    seed: r.seed,
                    aggregate: r.report.aggregate,
                    count: r.report.count,
                })
                .collect(),
            mean: self.mean,
        }
    }

    /// Mean score per record across runs.
    pub fn record_scores(&self) -> BTreeMap<String, f64> {
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        for run in &self.runs {
            for row in &run.report.per_instance {
                *sums.entry(row.record_id.clone()).or_insert(0.0) += row.score;
            }
        }
        let runs = self.runs.len() as f64;
        sums.values_mut().for_each(|v| *v /= runs);
        sums
    }
}

/// Answers and scores every record: once per seed for the random strategy,
/// once for retrieval.
pub fn run_task(
    records: &[VqaRecord],
    captioner: &dyn Captioner,
    selector: &ExampleSelector<'_>,
    config: &RunConfig,
    service: &dyn CompletionService,
    workers: usize,
) -> Result<RunOutput, RunError> {
    if selector.strategy() != config.strategy {
        return Err(RunError::Config(format!(
            "strategy {:?} needs a matching example selector",
            config.strategy
        )));
    }
    let seeds: Vec<Option<u64>> = match config.strategy {
        Strategy::Random if config.seeds.is_empty() => {
            return Err(RunError::Config("random strategy needs at least one seed".into()))
        }
        Strategy::Random => config.seeds.iter().copied().map(Some).collect(),
        Strategy::Retrieved => vec![None],
    };
    let missing = captioner.missing(records);
    if !missing.is_empty() {
        return Err(RunError::Coverage {
            source_name: "captions".into(),
            missing,
        });
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for seed in seeds {
        let mut predictions = crate::parallel::with_workers(workers, || {
            records
                .par_iter()
                .map(|r| answer_one(r, captioner, selector, config, seed.unwrap_or(0), service))
                .collect::<Result<Vec<_>, _>>()
        })
        .map_err(|e| RunError::Pool(e.to_string()))??;
        predictions.sort_by(|a, b| a.record_id.cmp(&b.record_id));
        let report = evaluate_predictions(config.task, records, &predictions)?;
        runs.push(SeedRun {
            seed,
            predictions,
            report,
        });
    }
    let mean = runs.iter().map(|r| r.report.aggregate).sum::<f64>() / runs.len() as f64;
    Ok(RunOutput {
        task: config.task,
        runs,
        mean,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub record_id: String,
    pub score_a: f64,
    pub score_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub metric_name: MetricName,
    pub rows: Vec<PairedRow>,
    pub aggregate_a: f64,
    pub aggregate_b: f64,
    /// `aggregate_a - aggregate_b`.
    pub delta: f64,
}

/// Pairs per-record scores of two runs over the same records.
pub fn pair_runs(a: &RunOutput, b: &RunOutput) -> Result<PairedReport, RunError> {
    let sa = a.record_scores();
    let sb = b.record_scores();
    let unmatched: Vec<String> = sa
        .keys()
        .filter(|k| !sb.contains_key(*k))
        .chain(sb.keys().filter(|k| !sa.contains_key(*k)))
        .cloned()
        .collect();
    if !unmatched.is_empty() {
        return Err(RunError::Coverage {
            source_name: "paired runs".into(),
            missing: unmatched,
        });
    }
    if sa.is_empty() {
        return Err(MetricError::NoInstances.into());
    }
    let rows: Vec<PairedRow> = sa
        .iter()
        .map(|(id, score_a)| PairedRow {
            record_id: id.clone(),
            score_a: *score_a,
            score_b: sb[id],
        })
        .collect();
    let n = rows.len() as f64;
    let aggregate_a = rows.iter().map(|r| r.score_a).sum::<f64>() / n;
    let aggregate_b = rows.iter().map(|r| r.score_b).sum::<f64>() / n;
    Ok(PairedReport {
        metric_name: a.task.metric(),
        rows,
        aggregate_a,
        aggregate_b,
        delta: aggregate_a - aggregate_b,
    })
}

/// Runs the same task with two caption sources and reports the paired
/// difference. Both sources must cover every record.
pub fn compare_caption_sources(
    records: &[VqaRecord],
    source_a: &dyn Captioner,
    source_b: &dyn Captioner,
    selector: &ExampleSelector<'_>,
    config: &RunConfig,
    service: &dyn CompletionService,
    workers: usize,
) -> Result<PairedReport, RunError> {
    for (name, source) in [("a", source_a), ("b", source_b)] {
        let missing = source.missing(records);
        if !missing.is_empty() {
            return Err(RunError::Coverage {
                source_name: name.into(),
                missing,
            });
        }
    }
    let a = run_task(records, source_a, selector, config, service, workers)?;
    let b = run_task(records, source_b, selector, config, service, workers)?;
    pair_runs(&a, &b)
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<(), RunError> {
    Ok(jsonl::write_jsonl(path, predictions.iter())?)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>, RunError> {
    Ok(jsonl::read_jsonl(path)?)
}
