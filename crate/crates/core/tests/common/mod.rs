//! Fixture builders shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use serde::Deserialize;

use capqa::corpus::{CaptionSet, ImageRef, Split, VqaRecord};
use capqa::llm::{Matcher, MockEntry, MockTable};
use capqa::retrieval::ExampleEntry;
use capqa::runner::CaptionLine;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn read_fixture(name: &str) -> String {
    std::fs::read_to_string(fixture(name)).unwrap()
}

#[derive(Deserialize)]
pub struct SynthesisFixture {
    pub record_id: String,
    pub image_id: String,
    pub question: String,
    pub answer: String,
    pub captions: Vec<String>,
    pub completion: String,
}

#[derive(Deserialize)]
pub struct IclFixtureExample {
    pub context: String,
    pub question: String,
    pub answer: String,
}

#[derive(Deserialize)]
pub struct IclFixtureTest {
    pub context: String,
    pub question: String,
}

#[derive(Deserialize)]
pub struct IclFixture {
    pub examples: Vec<IclFixtureExample>,
    pub test: IclFixtureTest,
    pub completion: String,
}

pub fn synthesis_fixture() -> SynthesisFixture {
    serde_json::from_str(&read_fixture("synthesis_target.json")).unwrap()
}

pub fn icl_fixture() -> IclFixture {
    serde_json::from_str(&read_fixture("icl_okvqa.json")).unwrap()
}

pub fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

const OBJECTS: [&str; 10] = [
    "cat", "dog", "bus", "kite", "pizza", "horse", "boat", "clock", "train", "bench",
];
const COLORS: [&str; 5] = ["red", "blue", "green", "white", "black"];

/// Record `k` of the synthetic corpus: image `k % 40`, a color question
/// whose answer depends on `k`, five reference captions.
pub fn synthetic_record(k: usize, split: Split) -> VqaRecord {
    let object = OBJECTS[k % OBJECTS.len()];
    let color = COLORS[k % COLORS.len()];
    let image = ImageRef::new(format!("{}", 1000 + k % 40), split);
    let mut record = VqaRecord::new(
        format!("q{k:04}"),
        image.clone(),
        format!("What color is the {object} number {k}?"),
        vec![color.to_string(); 10],
    );
    record.reference_captions = Some(CaptionSet {
        image,
        captions: vec![
            format!("a {color} {object} in a street"),
            format!("the {object} is {color}"),
            format!("a photo of a {object}"),
            format!("{color} {object} next to a wall"),
            format!("an old {object} on a sunny day"),
        ],
    });
    record
}

pub fn synthetic_corpus(n: usize) -> Vec<VqaRecord> {
    (0..n).map(|k| synthetic_record(k, Split::Train2014)).collect()
}

/// Mock table for the synthetic corpus: every synthesis prompt draws from
/// the same candidate list (seeded), and a QA prompt answers correctly only
/// when its test context names the color.
pub fn synthetic_mock() -> MockTable {
    let mut entries = vec![MockEntry::new(
        Matcher::Suffix("Summary:".into()),
        &[
            "a colorful object outdoors",
            "an object near a wall",
            "",
            "a thing in a street",
            "a scene with an object",
            "caption red",
            "caption blue",
        ],
    )];
    for color in COLORS {
        entries.push(MockEntry::new(
            Matcher::Contains(format!("===\nContext: caption {color}\n===\nQ:")),
            &[color],
        ));
    }
    MockTable {
        default: "unknown".into(),
        seed: Some(11),
        entries,
    }
}

pub fn synthetic_captions(records: &[VqaRecord]) -> Vec<CaptionLine> {
    records
        .iter()
        .enumerate()
        .map(|(k, r)| CaptionLine {
            record_id: Some(r.record_id.clone()),
            image_id: None,
            caption: if k % 3 == 0 {
                "caption vague".to_string()
            } else {
                format!("caption {}", r.answers[0])
            },
        })
        .collect()
}

pub fn synthetic_examples(n: usize) -> Vec<ExampleEntry> {
    (0..n)
        .map(|k| ExampleEntry {
            record_id: format!("train{k:04}"),
            question: format!("What is shown in picture {k}?"),
            context: format!("a picture of a {}", OBJECTS[k % OBJECTS.len()]),
            answer: OBJECTS[k % OBJECTS.len()].to_string(),
        })
        .collect()
}

pub struct CliFixture {
    pub corpus: PathBuf,
    pub mock: PathBuf,
    pub captions: PathBuf,
    pub weak_captions: PathBuf,
    pub examples: PathBuf,
    pub embeddings: PathBuf,
}

/// Writes the synthetic corpus and its companion inputs under `dir`.
pub fn write_cli_fixture(dir: &Path, n: usize) -> CliFixture {
    use capqa::retrieval::EmbeddingRecord;

    let records = synthetic_corpus(n);
    let fx = CliFixture {
        corpus: dir.join("corpus.jsonl"),
        mock: dir.join("mock.json"),
        captions: dir.join("captions.jsonl"),
        weak_captions: dir.join("weak_captions.jsonl"),
        examples: dir.join("examples.jsonl"),
        embeddings: dir.join("embeddings.jsonl"),
    };
    capqa::corpus::write_corpus(&fx.corpus, &records).unwrap();
    capqa::write_json(&fx.mock, &synthetic_mock()).unwrap();
    capqa::write_jsonl(&fx.captions, synthetic_captions(&records).iter()).unwrap();
    let mut seen = std::collections::BTreeSet::new();
    let weak: Vec<CaptionLine> = records
        .iter()
        .filter(|r| seen.insert(r.image.image_id.clone()))
        .map(|r| CaptionLine {
            record_id: None,
            image_id: Some(r.image.image_id.clone()),
            caption: "caption vague".into(),
        })
        .collect();
    capqa::write_jsonl(&fx.weak_captions, weak.iter()).unwrap();
    let examples = synthetic_examples(60);
    capqa::write_jsonl(&fx.examples, examples.iter()).unwrap();
    let embeddings: Vec<EmbeddingRecord> = examples
        .iter()
        .map(|e| e.record_id.clone())
        .chain(records.iter().map(|r| r.record_id.clone()))
        .enumerate()
        .map(|(k, id)| {
            let angle = k as f64 * 0.37;
            EmbeddingRecord::new(
                id,
                vec![angle.cos(), angle.sin(), 0.5],
                vec![(2.0 * angle).sin(), 1.0, (3.0 * angle).cos()],
            )
            .unwrap()
        })
        .collect();
    capqa::write_jsonl(&fx.embeddings, embeddings.iter()).unwrap();
    fx
}

pub fn run_cli(args: &[&str]) -> std::process::Output {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_capqa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "capqa {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Runs synthesize, filter, export-train and a 3-seed run-vqa into `out`.
pub fn run_pipeline(fx: &CliFixture, out: &Path, workers: usize) {
    let w = workers.to_string();
    let common = ["--mock", path_str(&fx.mock), "--workers", &w];
    let candidates = out.join("candidates.jsonl");
    let selected = out.join("selected.jsonl");
    let scored = out.join("scored.jsonl");
    let train = out.join("train.jsonl");
    let mut args = vec!["synthesize", "--corpus", path_str(&fx.corpus), "--out", path_str(&candidates)];
    args.extend(common);
    run_cli(&args);
    let mut args = vec![
        "filter", "--corpus", path_str(&fx.corpus), "--candidates", path_str(&candidates),
        "--out", path_str(&selected), "--scored", path_str(&scored),
    ];
    args.extend(common);
    run_cli(&args);
    run_cli(&["export-train", "--corpus", path_str(&fx.corpus), "--selected", path_str(&selected), "--out", path_str(&train)]);
    let vqa = out.join("vqa");
    let mut args = vec![
        "run-vqa", "--corpus", path_str(&fx.corpus), "--captions", path_str(&fx.captions),
        "--examples", path_str(&fx.examples), "--strategy", "random", "--seeds", "0,1,2",
        "--out", path_str(&vqa),
    ];
    args.extend(common);
    run_cli(&args);
}

/// Every file under `dir`, relative path to bytes.
pub fn snapshot(dir: &Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut std::collections::BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}
