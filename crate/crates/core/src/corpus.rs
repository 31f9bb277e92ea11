//! Annotation ingestion: COCO-style caption files and VQA-style question /
//! annotation pairs, joined into [`VqaRecord`]s and filtered by image split.
//!
//! Answers and captions are stored exactly as they appear in the source
//! files. Normalization only ever happens inside [`crate::metrics`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("questions without annotations: {}", .0.join(", "))]
    MissingAnnotations(Vec<String>),
    #[error("duplicate question id {id} in {path}")]
    DuplicateQuestion { id: String, path: PathBuf },
    #[error("invalid record {record_id}: {reason}")]
    InvalidRecord { record_id: String, reason: String },
    #[error("unknown split {0:?}")]
    UnknownSplit(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

/// Image split. Only COCO 2014 train images may feed synthesized training
/// data under the OK-VQA guard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train2014,
    Val2014,
    Train2017,
    Val2017,
    External,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::Train2014,
        Split::Val2014,
        Split::Train2017,
        Split::Val2017,
        Split::External,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train2014 => "train2014",
            Split::Val2014 => "val2014",
            Split::Train2017 => "train2017",
            Split::Val2017 => "val2017",
            Split::External => "external",
        }
    }

    /// Finds a split tag inside a file name such as `COCO_val2014_000000000042.jpg`.
    pub fn infer_from_name(name: &str) -> Option<Split> {
        let lower = name.to_ascii_lowercase();
        Split::ALL
            .into_iter()
            .filter(|s| *s != Split::External)
            .find(|s| lower.contains(s.as_str()))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|split| split.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| CorpusError::UnknownSplit(s.to_string()))
    }
}

/// The split set allowed by the OK-VQA / A-OKVQA leakage guard.
pub fn okvqa_guard() -> BTreeSet<Split> {
    BTreeSet::from([Split::Train2014])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_id: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uri: Option<String>,
}

impl ImageRef {
    pub fn new(image_id: impl Into<String>, split: Split) -> Self {
        Self {
            image_id: image_id.into(),
            split,
            uri: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSet {
    pub image: ImageRef,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaRecord {
    pub record_id: String,
    pub image: ImageRef,
    pub question: String,
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ocr_tokens: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_captions: Option<CaptionSet>,
    /// Multiple-choice options (A-OKVQA style).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct_choice: Option<usize>,
    /// Human keywords for keyword-accuracy scoring (WebQA style).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keywords: Option<Vec<String>>,
}

impl VqaRecord {
    pub fn new(
        record_id: impl Into<String>,
        image: ImageRef,
        question: impl Into<String>,
        answers: Vec<String>,
    ) -> Self {
        Self {
            record_id: record_id.into(),
            image,
            question: question.into(),
            answers,
            ocr_tokens: None,
            reference_captions: None,
            choices: None,
            correct_choice: None,
            keywords: None,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |reason: &str| CorpusError::InvalidRecord {
            record_id: self.record_id.clone(),
            reason: reason.to_string(),
        };
        if self.record_id.is_empty() {
            return Err(invalid("empty record id"));
        }
        if self.image.image_id.is_empty() {
            return Err(invalid("empty image id"));
        }
        if self.question.trim().is_empty() {
            return Err(invalid("empty question"));
        }
        if self.answers.is_empty() {
            return Err(invalid("no ground-truth answers"));
        }
        if let (Some(choices), Some(idx)) = (&self.choices, self.correct_choice) {
            if idx >= choices.len() {
                return Err(invalid("correct_choice out of range"));
            }
        }
        Ok(())
    }

    /// Most frequent annotator answer (compared after normalization); ties go
    /// to the answer seen first. Returned in its raw form.
    pub fn majority_answer(&self) -> &str {
        let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
        for (idx, answer) in self.answers.iter().enumerate() {
            let entry = counts
                .entry(crate::metrics::normalize_answer(answer))
                .or_insert((0, idx));
            entry.0 += 1;
        }
        let (_, first) = counts
            .values()
            .copied()
            .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
            .unwrap_or((0, 0));
        self.answers.get(first).map(String::as_str).unwrap_or("")
    }
}

/// How many reference captions an image must carry to be kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptionPolicy {
    pub min_captions: usize,
    /// Captions beyond this count are dropped (in file order).
    pub keep: Option<usize>,
}

impl CaptionPolicy {
    /// COCO: exactly five reference captions per image.
    pub const fn coco_strict() -> Self {
        Self {
            min_captions: 5,
            keep: Some(5),
        }
    }

    /// External corpora: any image with at least one caption.
    pub const fn lenient() -> Self {
        Self {
            min_captions: 1,
            keep: None,
        }
    }
}

impl Default for CaptionPolicy {
    fn default() -> Self {
        Self::coco_strict()
    }
}

#[derive(Debug, Clone)]
pub struct CocoLoadOptions {
    pub policy: CaptionPolicy,
    /// Used when an image's file name carries no split tag.
    pub default_split: Split,
}

impl Default for CocoLoadOptions {
    fn default() -> Self {
        Self {
            policy: CaptionPolicy::coco_strict(),
            default_split: Split::Train2014,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedImage {
    pub image_id: String,
    pub caption_count: usize,
}

#[derive(Debug, Clone, Default)]
pub struct CaptionIndex {
    pub sets: BTreeMap<String, CaptionSet>,
    pub skipped: Vec<SkippedImage>,
}

/// Numeric or string identifiers, as found in COCO / VQA json.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum JsonId {
    Num(u64),
    Str(String),
}

impl JsonId {
    fn into_string(self) -> String {
        match self {
            JsonId::Num(n) => n.to_string(),
            JsonId::Str(s) => s,
        }
    }
}

#[derive(Deserialize)]
struct CocoCaptionFile {
    #[serde(default)]
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: JsonId,
    #[serde(default)]
    file_name: Option<String>,
    #[serde(default)]
    coco_url: Option<String>,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: JsonId,
    caption: String,
}

fn read_document<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn load_coco_captions(
    path: &Path,
    options: &CocoLoadOptions,
) -> Result<CaptionIndex, CorpusError> {
    let doc: CocoCaptionFile = read_document(path)?;
    parse_coco_captions(doc, options)
}

fn parse_coco_captions(
    doc: CocoCaptionFile,
    options: &CocoLoadOptions,
) -> Result<CaptionIndex, CorpusError> {
    let mut images: BTreeMap<String, ImageRef> = BTreeMap::new();
    for image in doc.images {
        let id = image.id.into_string();
        let split = image
            .file_name
            .as_deref()
            .and_then(Split::infer_from_name)
            .or_else(|| image.coco_url.as_deref().and_then(Split::infer_from_name))
            .unwrap_or(options.default_split);
        let uri = image.coco_url.or(image.file_name);
        images.insert(
            id.clone(),
            ImageRef {
                image_id: id,
                split,
                uri,
            },
        );
    }

    let mut captions: BTreeMap<String, Vec<String>> =
        images.keys().map(|id| (id.clone(), Vec::new())).collect();
    for ann in doc.annotations {
        let id = ann.image_id.into_string();
        if ann.caption.trim().is_empty() {
            warn!("image {id}: dropping blank caption");
            captions.entry(id).or_default();
            continue;
        }
        captions.entry(id).or_default().push(ann.caption);
    }

    let mut index = CaptionIndex::default();
    for (id, mut caps) in captions {
        if id.is_empty() || caps.len() < options.policy.min_captions.max(1) {
            warn!(
                "image {id:?}: {} caption(s), below minimum {}; skipped",
                caps.len(),
                options.policy.min_captions.max(1)
            );
            index.skipped.push(SkippedImage {
                image_id: id,
                caption_count: caps.len(),
            });
            continue;
        }
        if let Some(keep) = options.policy.keep {
            caps.truncate(keep);
        }
        let image = images
            .get(&id)
            .cloned()
            .unwrap_or_else(|| ImageRef::new(id.clone(), options.default_split));
        index.sets.insert(
            id,
            CaptionSet {
                image,
                captions: caps,
            },
        );
    }
    Ok(index)
}

#[derive(Debug, Clone)]
pub struct VqaLoadOptions {
    /// Used when neither the question nor the document names a split.
    pub default_split: Split,
}

impl Default for VqaLoadOptions {
    fn default() -> Self {
        Self {
            default_split: Split::Train2014,
        }
    }
}

#[derive(Deserialize)]
struct QuestionFile {
    #[serde(default)]
    data_subtype: Option<String>,
    questions: Vec<QuestionEntry>,
}

#[derive(Deserialize)]
struct QuestionEntry {
    question_id: JsonId,
    image_id: JsonId,
    question: String,
    #[serde(default)]
    split: Option<String>,
    #[serde(default)]
    image_uri: Option<String>,
    #[serde(default)]
    ocr_tokens: Option<Vec<String>>,
    #[serde(default)]
    choices: Option<Vec<String>>,
}

#[derive(Deserialize)]
struct AnnotationFile {
    annotations: Vec<AnnotationEntry>,
}

#[derive(Deserialize)]
struct AnnotationEntry {
    question_id: JsonId,
    answers: Vec<AnswerEntry>,
    #[serde(default)]
    correct_choice_idx: Option<usize>,
    #[serde(default)]
    keywords: Option<Vec<String>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AnswerEntry {
    Object { answer: String },
    Plain(String),
}

impl AnswerEntry {
    fn into_string(self) -> String {
        match self {
            AnswerEntry::Object { answer } => answer,
            AnswerEntry::Plain(s) => s,
        }
    }
}

/// Joins a questions document with its annotations document. Output is
/// sorted by `record_id`.
pub fn load_vqa(
    questions_path: &Path,
    annotations_path: &Path,
    options: &VqaLoadOptions,
) -> Result<Vec<VqaRecord>, CorpusError> {
    let questions: QuestionFile = read_document(questions_path)?;
    let annotations: AnnotationFile = read_document(annotations_path)?;

    let mut by_id: HashMap<String, AnnotationEntry> = HashMap::new();
    for ann in annotations.annotations {
        let id = ann.question_id.clone().into_string();
        if by_id.insert(id.clone(), ann).is_some() {
            return Err(CorpusError::DuplicateQuestion {
                id,
                path: annotations_path.to_path_buf(),
            });
        }
    }

    let doc_split = match questions.data_subtype.as_deref() {
        Some(sub) => Split::infer_from_name(sub),
        None => None,
    };

    let mut seen = BTreeSet::new();
    let mut missing = Vec::new();
    let mut records = Vec::with_capacity(questions.questions.len());
    for q in questions.questions {
        let record_id = q.question_id.into_string();
        if !seen.insert(record_id.clone()) {
            return Err(CorpusError::DuplicateQuestion {
                id: record_id,
                path: questions_path.to_path_buf(),
            });
        }
        let Some(ann) = by_id.remove(&record_id) else {
            missing.push(record_id);
            continue;
        };
        let split = match q.split.as_deref() {
            Some(s) => s.parse()?,
            None => doc_split.unwrap_or(options.default_split),
        };
        let mut image = ImageRef::new(q.image_id.into_string(), split);
        image.uri = q.image_uri;
        let mut record = VqaRecord::new(
            record_id,
            image,
            q.question,
            ann.answers.into_iter().map(AnswerEntry::into_string).collect(),
        );
        record.ocr_tokens = q.ocr_tokens;
        record.choices = q.choices;
        record.correct_choice = ann.correct_choice_idx;
        record.keywords = ann.keywords;
        record.validate()?;
        records.push(record);
    }
    if !missing.is_empty() {
        missing.sort();
        return Err(CorpusError::MissingAnnotations(missing));
    }
    if !by_id.is_empty() {
        warn!(
            "{} annotation(s) without a matching question ignored",
            by_id.len()
        );
    }
    records.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    Ok(records)
}

#[derive(Debug, Clone, Default)]
pub struct GuardOutcome {
    pub records: Vec<VqaRecord>,
    /// Records dropped because their image split is not allowed.
    pub excluded: usize,
    /// Kept records for which no caption set was found.
    pub without_captions: usize,
}

/// Attaches reference captions by image id and drops records whose image
/// split is not in `allowed_splits`. Question and answer text is untouched.
pub fn join_and_guard(
    records: Vec<VqaRecord>,
    caption_sets: &BTreeMap<String, CaptionSet>,
    allowed_splits: &BTreeSet<Split>,
) -> GuardOutcome {
    let mut outcome = GuardOutcome::default();
    for mut record in records {
        if !allowed_splits.contains(&record.image.split) {
            outcome.excluded += 1;
            continue;
        }
        match caption_sets.get(&record.image.image_id) {
            Some(set) => {
                if record.image.uri.is_none() {
                    record.image.uri = set.image.uri.clone();
                }
                record.reference_captions = Some(set.clone());
            }
            None => outcome.without_captions += 1,
        }
        outcome.records.push(record);
    }
    outcome.records.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    outcome
}

/// Canonical corpus: one [`VqaRecord`] per line.
pub fn write_corpus(path: &Path, records: &[VqaRecord]) -> Result<(), CorpusError> {
    Ok(jsonl::write_jsonl(path, records)?)
}

pub fn read_corpus(path: &Path) -> Result<Vec<VqaRecord>, CorpusError> {
    let mut records: Vec<VqaRecord> = jsonl::read_jsonl(path)?;
    let mut ids = BTreeSet::new();
    for record in &records {
        record.validate()?;
        if !ids.insert(record.record_id.as_str()) {
            return Err(CorpusError::DuplicateQuestion {
                id: record.record_id.clone(),
                path: path.to_path_buf(),
            });
        }
    }
    records.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    Ok(records)
}
