//! Prompt rendering: the captioner instruction, the caption-synthesis
//! summarization prompt and the caption-mediated in-context QA prompt.
//!
//! Layouts are byte-exact. Fields are single-line: any tab, carriage return
//! or newline inside a field is rendered as a space.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::VqaRecord;

pub const DEFAULT_CAPTIONER_PREFIX: &str = "describe to answer: ";
pub const DEFAULT_SYNTHESIS_INSTRUCTION: &str = "Summarize the context to help answer the question";
pub const DEFAULT_ICL_INSTRUCTION: &str = "Please answer the question according to the above context.";

const SEED_EXAMPLES_JSON: &str = include_str!("../data/seed_examples.json");

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("{0} must not be empty")]
    EmptyField(&'static str),
    #[error("record {0} has no reference captions")]
    MissingReferenceCaptions(String),
    #[error("expected {expected} seed examples, found {found}")]
    SeedCount { expected: usize, found: usize },
    #[error("bad seed example file: {0}")]
    SeedFile(String),
}

/// Template strings, externalized so byte-level changes show up in config
/// review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplates {
    pub captioner_prefix: String,
    pub synthesis_instruction: String,
    pub icl_instruction: String,
    /// Joins an image's reference captions into "Original contexts".
    pub context_separator: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            captioner_prefix: DEFAULT_CAPTIONER_PREFIX.to_string(),
            synthesis_instruction: DEFAULT_SYNTHESIS_INSTRUCTION.to_string(),
            icl_instruction: DEFAULT_ICL_INSTRUCTION.to_string(),
            context_separator: " ".to_string(),
        }
    }
}

fn field(text: &str) -> std::borrow::Cow<'_, str> {
    if text.contains(['\t', '\r', '\n']) {
        text.replace(['\t', '\r', '\n'], " ").into()
    } else {
        text.into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionerPrompt {
    pub question: String,
    pub ocr_tokens: Option<Vec<String>>,
    pub rendered: String,
}

/// `prefix + question`, plus `" OCR: "` and the space-joined tokens when any
/// are given. An empty token list counts as absent.
pub fn render_captioner_prompt(
    prefix: &str,
    question: &str,
    ocr_tokens: Option<&[String]>,
) -> Result<CaptionerPrompt, PromptError> {
    if question.trim().is_empty() {
        return Err(PromptError::EmptyField("question"));
    }
    let ocr_tokens = ocr_tokens.filter(|t| !t.is_empty());
    let mut rendered = format!("{}{}", field(prefix), field(question));
    if let Some(tokens) = ocr_tokens {
        rendered.push_str(" OCR: ");
        let joined: Vec<_> = tokens.iter().map(|t| field(t)).collect();
        rendered.push_str(&joined.join(" "));
    }
    Ok(CaptionerPrompt {
        question: question.to_string(),
        ocr_tokens: ocr_tokens.map(<[String]>::to_vec),
        rendered,
    })
}

/// One human-written demonstration of the summarization task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisExample {
    pub contexts: String,
    pub question: String,
    pub answer: String,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisTarget {
    pub contexts: String,
    pub question: String,
    pub answer: String,
}

impl SynthesisTarget {
    pub fn from_captions(
        captions: &[String],
        separator: &str,
        question: &str,
        answer: &str,
    ) -> Result<Self, PromptError> {
        if captions.is_empty() {
            return Err(PromptError::EmptyField("reference captions"));
        }
        Ok(Self {
            contexts: captions.join(separator),
            question: question.to_string(),
            answer: answer.to_string(),
        })
    }

    /// Uses the record's reference captions and its majority answer.
    pub fn from_record(record: &VqaRecord, separator: &str) -> Result<Self, PromptError> {
        let set = record
            .reference_captions
            .as_ref()
            .filter(|s| !s.captions.is_empty())
            .ok_or_else(|| PromptError::MissingReferenceCaptions(record.record_id.clone()))?;
        Self::from_captions(
            &set.captions,
            separator,
            &record.question,
            record.majority_answer(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisPrompt {
    pub instruction: String,
    pub human_examples: Vec<SynthesisExample>,
    pub target: SynthesisTarget,
    pub rendered: String,
}

/// Instruction, blank line, then one block per example separated by blank
/// lines. The target block ends with `"Summary:"` and nothing after it.
pub fn render_synthesis_prompt(
    instruction: &str,
    human_examples: &[SynthesisExample],
    target: &SynthesisTarget,
) -> SynthesisPrompt {
    let mut rendered = String::new();
    rendered.push_str(&field(instruction));
    rendered.push_str("\n\n");
    for ex in human_examples {
        rendered.push_str(&format!(
            "Original contexts: {}\nQuestion: {}\nAnswer: {}\nSummary: {}\n\n",
            field(&ex.contexts),
            field(&ex.question),
            field(&ex.answer),
            field(&ex.summary)
        ));
    }
    rendered.push_str(&format!(
        "Original contexts: {}\nQuestion: {}\nAnswer: {}\nSummary:",
        field(&target.contexts),
        field(&target.question),
        field(&target.answer)
    ));
    SynthesisPrompt {
        instruction: instruction.to_string(),
        human_examples: human_examples.to_vec(),
        target: target.clone(),
        rendered,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IclExample {
    pub context: String,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclPrompt {
    pub instruction: String,
    pub examples: Vec<IclExample>,
    pub test_context: String,
    pub test_question: String,
    pub rendered: String,
}

/// Caption-mediated QA prompt. Examples appear in the given order; callers
/// put the most similar one last.
pub fn render_icl_prompt(
    instruction: &str,
    examples: &[IclExample],
    test_context: &str,
    test_question: &str,
) -> IclPrompt {
    let mut rendered = String::new();
    rendered.push_str(&field(instruction));
    rendered.push_str("\n\n");
    for ex in examples {
        rendered.push_str(&format!(
            "===\nContext: {}\n===\nQ: {}\nA: {}\n\n",
            field(&ex.context),
            field(&ex.question),
            field(&ex.answer)
        ));
    }
    rendered.push_str(&format!(
        "===\nContext: {}\n===\nQ: {}\nA:",
        field(test_context),
        field(test_question)
    ));
    IclPrompt {
        instruction: instruction.to_string(),
        examples: examples.to_vec(),
        test_context: test_context.to_string(),
        test_question: test_question.to_string(),
        rendered,
    }
}

fn strip<'a>(line: Option<&'a str>, prefix: &str) -> Option<&'a str> {
    line?.strip_prefix(prefix)
}

/// Inverse of [`render_icl_prompt`] for single-line fields.
pub fn parse_icl_prompt(rendered: &str) -> Option<IclPrompt> {
    let (instruction, body) = rendered.split_once("\n\n")?;
    let blocks: Vec<&str> = body.split("\n\n").collect();
    let (test, demos) = blocks.split_last()?;
    let mut examples = Vec::with_capacity(demos.len());
    for block in demos {
        let mut lines = block.split('\n');
        (lines.next()? == "===").then_some(())?;
        let context = strip(lines.next(), "Context: ")?;
        (lines.next()? == "===").then_some(())?;
        let question = strip(lines.next(), "Q: ")?;
        let answer = strip(lines.next(), "A: ")?;
        lines.next().is_none().then_some(())?;
        examples.push(IclExample {
            context: context.to_string(),
            question: question.to_string(),
            answer: answer.to_string(),
        });
    }
    let mut lines = test.split('\n');
    (lines.next()? == "===").then_some(())?;
    let test_context = strip(lines.next(), "Context: ")?;
    (lines.next()? == "===").then_some(())?;
    let test_question = strip(lines.next(), "Q: ")?;
    (lines.next()? == "A:").then_some(())?;
    lines.next().is_none().then_some(())?;
    Some(IclPrompt {
        instruction: instruction.to_string(),
        examples,
        test_context: test_context.to_string(),
        test_question: test_question.to_string(),
        rendered: rendered.to_string(),
    })
}

/// Inverse of [`render_synthesis_prompt`] for single-line fields.
pub fn parse_synthesis_prompt(rendered: &str) -> Option<SynthesisPrompt> {
    let (instruction, body) = rendered.split_once("\n\n")?;
    let blocks: Vec<&str> = body.split("\n\n").collect();
    let (target, demos) = blocks.split_last()?;
    let mut human_examples = Vec::with_capacity(demos.len());
    for block in demos {
        let mut lines = block.split('\n');
        let contexts = strip(lines.next(), "Original contexts: ")?;
        let question = strip(lines.next(), "Question: ")?;
        let answer = strip(lines.next(), "Answer: ")?;
        let summary = strip(lines.next(), "Summary: ")?;
        lines.next().is_none().then_some(())?;
        human_examples.push(SynthesisExample {
            contexts: contexts.to_string(),
            question: question.to_string(),
            answer: answer.to_string(),
            summary: summary.to_string(),
        });
    }
    let mut lines = target.split('\n');
    let contexts = strip(lines.next(), "Original contexts: ")?;
    let question = strip(lines.next(), "Question: ")?;
    let answer = strip(lines.next(), "Answer: ")?;
    (lines.next()? == "Summary:").then_some(())?;
    lines.next().is_none().then_some(())?;
    Some(SynthesisPrompt {
        instruction: instruction.to_string(),
        human_examples,
        target: SynthesisTarget {
            contexts: contexts.to_string(),
            question: question.to_string(),
            answer: answer.to_string(),
        },
        rendered: rendered.to_string(),
    })
}

/// The human-written demonstrations bundled with the crate.
pub fn default_seed_examples() -> Vec<SynthesisExample> {
    serde_json::from_str(SEED_EXAMPLES_JSON).expect("bundled seed examples are valid json")
}

/// Parses a seed file and checks it holds exactly `expected` examples.
pub fn parse_seed_examples(
    json: &str,
    expected: usize,
) -> Result<Vec<SynthesisExample>, PromptError> {
    let examples: Vec<SynthesisExample> =
        serde_json::from_str(json).map_err(|e| PromptError::SeedFile(e.to_string()))?;
    if examples.len() != expected {
        return Err(PromptError::SeedCount {
            expected,
            found: examples.len(),
        });
    }
    Ok(examples)
}
