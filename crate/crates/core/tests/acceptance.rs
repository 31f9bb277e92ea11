//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero when
//! any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use capqa::corpus::{join_and_guard, okvqa_guard, CaptionSet, ImageRef, Split, VqaRecord};
use capqa::llm::{Matcher, MockCompletionService, MockEntry, MockTable};
use capqa::metrics::{
    bleu4, caption_similarity, char_error_rate, normalize_answer, soft_vqa_accuracy,
    standard_vqa_accuracy, CaptionMetric, CiderScorer,
};
use capqa::prompts::{
    default_seed_examples, render_icl_prompt, render_synthesis_prompt, IclExample,
    PromptTemplates, SynthesisTarget, DEFAULT_ICL_INSTRUCTION, DEFAULT_SYNTHESIS_INSTRUCTION,
};
use capqa::retrieval::{
    pair_similarity, top_n, EmbeddingPool, EmbeddingRecord, ExamplePool, NormalizedPool,
};
use capqa::runner::{
    answer_one, run_task, ExampleSelector, PrecomputedCaptions, RunConfig, Task,
};
use capqa::synthesis::{CandidateCaption, SynthesisConfig, Synthesizer};
use common::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(budget: Duration, start: Instant) -> Result<Duration, String> {
    let spent = start.elapsed();
    if spent > budget {
        Err(format!("took {spent:?}, budget {budget:?}"))
    } else {
        Ok(spent)
    }
}

/// Plain full-matrix edit distance over chars.
fn edit_distance_oracle(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    d[0] = (0..=b.len()).collect();
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

fn cer_oracle(pred: &str, gt: &str) -> f64 {
    edit_distance_oracle(pred, gt) as f64 / gt.chars().count().max(1) as f64
}

/// Best mean over every 3-subset of distinct answer indices; with fewer than
/// three answers, the mean over all of them.
fn soft_accuracy_oracle(pred: &str, gts: &[String]) -> f64 {
    let pred = normalize_answer(pred);
    let s: Vec<f64> = gts
        .iter()
        .map(|g| (1.0 - cer_oracle(&pred, &normalize_answer(g))).max(0.0))
        .collect();
    if s.len() < 3 {
        return s.iter().sum::<f64>() / s.len() as f64;
    }
    let mut best = f64::NEG_INFINITY;
    for i in 0..s.len() {
        for j in i + 1..s.len() {
            for k in j + 1..s.len() {
                best = best.max((s[i] + s[j] + s[k]) / 3.0);
            }
        }
    }
    best
}

fn random_word(rng: &mut ChaCha8Rng, alphabet: &[char], max_len: usize) -> String {
    let len = rng.gen_range(0..=max_len);
    (0..len).map(|_| *alphabet.choose(rng).unwrap()).collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let alphabet: Vec<char> = "abcdo".chars().collect();
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let n = rng.gen_range(1..=10);
        let gts: Vec<String> = (0..n).map(|_| random_word(&mut rng, &alphabet, 6)).collect();
        let pred = if rng.gen_bool(0.3) {
            gts[rng.gen_range(0..n)].clone()
        } else {
            random_word(&mut rng, &alphabet, 6)
        };
        let got = soft_vqa_accuracy(&pred, &gts).map_err(|e| e.to_string())?;
        let want = soft_accuracy_oracle(&pred, &gts);
        worst = worst.max((got - want).abs());
        ensure!((got - want).abs() <= 1e-12, "case {case}: {pred:?} vs {gts:?}: {got} != {want}");
    }
    let spent = within(Duration::from_secs(5), start)?;
    Ok(format!("1000 cases, max error {worst:e}, {spent:.2?}"))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let alphabet: Vec<char> = "abcxyz é漢".chars().collect();
    for case in 0..1000 {
        let a = random_word(&mut rng, &alphabet, 40);
        let b = random_word(&mut rng, &alphabet, 40);
        let got = char_error_rate(&a, &b);
        let want = cer_oracle(&a, &b);
        ensure!(got == want, "case {case}: CER({a:?}, {b:?}) = {got}, oracle {want}");
    }
    let gts = strings(&["coin"]);
    let soft = soft_vqa_accuracy("coins", &gts).map_err(|e| e.to_string())?;
    let contribution = 1.0 - char_error_rate("coins", "coin");
    ensure!((contribution - 0.75).abs() < 1e-12, "coins/coin contribution {contribution}");
    ensure!((soft - 0.75).abs() < 1e-12, "coins/coin soft accuracy {soft}");
    let standard = standard_vqa_accuracy("coins", &strings(&["coin"; 10])).map_err(|e| e.to_string())?;
    ensure!(standard == 0.0, "coins/coin exact match {standard}");
    Ok("1000 pairs exact; coins/coin = 0.75, exact match 0".into())
}

fn criterion_3() -> Outcome {
    let fx = synthesis_fixture();
    let target = SynthesisTarget::from_captions(&fx.captions, " ", &fx.question, &fx.answer)
        .map_err(|e| e.to_string())?;
    let synthesis = render_synthesis_prompt(DEFAULT_SYNTHESIS_INSTRUCTION, &default_seed_examples(), &target);
    let golden = read_fixture("golden/synthesis_prompt.txt");
    ensure!(synthesis.rendered == golden, "synthesis prompt differs from golden file");
    ensure!(
        golden.starts_with("Summarize the context to help answer the question\n"),
        "synthesis instruction line missing"
    );

    let icl = icl_fixture();
    let examples: Vec<IclExample> = icl
        .examples
        .iter()
        .map(|e| IclExample {
            context: e.context.clone(),
            question: e.question.clone(),
            answer: e.answer.clone(),
        })
        .collect();
    let rendered = render_icl_prompt(DEFAULT_ICL_INSTRUCTION, &examples, &icl.test.context, &icl.test.question);
    let golden = read_fixture("golden/icl_okvqa_prompt.txt");
    ensure!(rendered.rendered == golden, "ICL prompt differs from golden file");
    ensure!(
        golden.starts_with("Please answer the question according to the above context.\n"),
        "ICL instruction line missing"
    );
    Ok(format!(
        "synthesis {} bytes, ICL {} bytes identical",
        synthesis.rendered.len(),
        rendered.rendered.len()
    ))
}

fn random_record(rng: &mut ChaCha8Rng, id: String, dim: usize) -> EmbeddingRecord {
    let q = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let i = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    EmbeddingRecord::new(id, q, i).unwrap()
}

fn full_sort(query: &EmbeddingRecord, records: &[EmbeddingRecord], n: usize) -> Vec<String> {
    let mut scored: Vec<(f64, &str)> = records
        .iter()
        .filter(|r| r.record_id != query.record_id)
        .map(|r| (pair_similarity(query, r).unwrap(), r.record_id.as_str()))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
    scored.into_iter().take(n).map(|(_, id)| id.to_string()).collect()
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut max_asym: f64 = 0.0;
    for pool_idx in 0..20 {
        let records: Vec<EmbeddingRecord> =
            (0..500).map(|k| random_record(&mut rng, format!("r{k:03}"), 32)).collect();
        let pool = EmbeddingPool::new(records.clone()).map_err(|e| e.to_string())?;
        let query = random_record(&mut rng, "query".into(), 32);
        let got: Vec<String> = top_n(&query, &pool, 32)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|h| h.record_id)
            .collect();
        ensure!(got == full_sort(&query, &records, 32), "pool {pool_idx}: top 32 differs from full sort");
        let fast: Vec<String> = NormalizedPool::from_pool(&pool)
            .top_n(&query, 32)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|h| h.record_id)
            .collect();
        ensure!(fast == got, "pool {pool_idx}: normalized fast path differs");

        let scale = |r: &EmbeddingRecord, rng: &mut ChaCha8Rng| {
            let c: f64 = rng.gen_range(0.001..1000.0);
            EmbeddingRecord::new(
                r.record_id.clone(),
                r.question_vec.iter().map(|x| x * c).collect(),
                r.image_vec.iter().map(|x| x * c).collect(),
            )
            .unwrap()
        };
        let scaled: Vec<EmbeddingRecord> = records.iter().map(|r| scale(r, &mut rng)).collect();
        let scaled_query = scale(&query, &mut rng);
        let rescaled: Vec<String> = top_n(&scaled_query, &EmbeddingPool::new(scaled).unwrap(), 32)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|h| h.record_id)
            .collect();
        ensure!(rescaled == got, "pool {pool_idx}: selection changed under rescaling");

        for pair in records.chunks(2) {
            let ab = pair_similarity(&pair[0], &pair[1]).unwrap();
            let ba = pair_similarity(&pair[1], &pair[0]).unwrap();
            max_asym = max_asym.max((ab - ba).abs());
        }
    }
    ensure!(max_asym <= 1e-12, "asymmetry {max_asym:e}");
    let spent = within(Duration::from_secs(10), start)?;
    Ok(format!("20 pools x 500, max asymmetry {max_asym:e}, {spent:.2?}"))
}

fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn grams(tokens: &[String], n: usize) -> HashMap<Vec<String>, f64> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    out
}

/// Straightforward tf-idf CIDEr, documents are per-image reference sets.
fn cider_oracle(candidate: &str, refs: &[String], corpus: &[Vec<String>]) -> f64 {
    let n_docs = corpus.len() as f64;
    let mut total = 0.0;
    for n in 1..=4 {
        let mut df: HashMap<Vec<String>, f64> = HashMap::new();
        for doc in corpus {
            let mut seen = BTreeSet::new();
            for r in doc {
                seen.extend(grams(&tokens(r), n).into_keys());
            }
            for g in seen {
                *df.entry(g).or_insert(0.0) += 1.0;
            }
        }
        let vec = |text: &str| -> HashMap<Vec<String>, f64> {
            grams(&tokens(text), n)
                .into_iter()
                .map(|(g, tf)| {
                    let idf = n_docs.ln() - df.get(&g).copied().unwrap_or(0.0).max(1.0).ln();
                    (g, tf * idf)
                })
                .collect()
        };
        let c = vec(candidate);
        let norm = |v: &HashMap<Vec<String>, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
        let mut sum = 0.0;
        for r in refs {
            let rv = vec(r);
            let (nc, nr) = (norm(&c), norm(&rv));
            if nc > 0.0 && nr > 0.0 {
                let dot: f64 = c.iter().filter_map(|(g, x)| rv.get(g).map(|y| x * y)).sum();
                sum += dot / (nc * nr);
            }
        }
        total += sum / refs.len() as f64;
    }
    10.0 * total / 4.0
}

fn filter_record(id: &str, refs: &[String]) -> VqaRecord {
    let image = ImageRef::new(format!("img-{id}"), Split::Train2014);
    let mut r = VqaRecord::new(id, image.clone(), "What is on the car?", strings(&["cat"; 10]));
    r.reference_captions = Some(CaptionSet {
        image,
        captions: refs.to_vec(),
    });
    r
}

fn filter_pick(record: &VqaRecord, cands: &[CandidateCaption], answers: &HashMap<String, String>, scorer: &CiderScorer) -> Result<String, String> {
    let entries = answers
        .iter()
        .map(|(text, answer)| MockEntry::new(Matcher::Contains(format!("Context: {text}\n")), &[answer]))
        .collect();
    let service = MockCompletionService::new(MockTable {
        default: "unknown".into(),
        seed: None,
        entries,
    });
    let templates = PromptTemplates::default();
    let config = SynthesisConfig::default();
    let synth = Synthesizer {
        service: &service,
        templates: &templates,
        seed_examples: &[],
        config: &config,
    };
    let pool = ExamplePool::new(vec![]).unwrap();
    let out = synth
        .filter_candidates(record, cands, &pool, scorer)
        .map_err(|e| e.to_string())?;
    Ok(out[0].text.clone())
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let texts = [
        "a black cat on a red car",
        "a cat sitting on top of a car",
        "a small animal near a vehicle",
        "cat on car roof",
        "a kitten resting on a parked car",
    ];
    let corpus: Vec<Vec<String>> = vec![
        strings(&["a black cat on a car", "a cat on top of a red car", "cat sitting on a car"]),
        strings(&["a dog on the grass", "a brown dog running"]),
        strings(&["a red car parked on a street", "a car on the road"]),
    ];
    let refs = corpus[0].clone();
    let record = filter_record("r0", &refs);
    let scorer = CiderScorer::new(corpus.iter().map(|d| d.as_slice()));
    let mut checked = 0;
    for trial in 0..50 {
        let k = rng.gen_range(2..=5);
        let mut chosen: Vec<&str> = texts.to_vec();
        chosen.shuffle(&mut rng);
        chosen.truncate(k);
        let cands: Vec<CandidateCaption> = chosen
            .iter()
            .enumerate()
            .map(|(i, t)| CandidateCaption {
                record_id: "r0".into(),
                candidate_index: i,
                text: t.to_string(),
                soft_accuracy: None,
                cider: None,
                qa_answer: None,
            })
            .collect();
        // trial parity decides between a single correct answer and a tie
        let correct: Vec<usize> = if trial % 2 == 0 {
            vec![rng.gen_range(0..k)]
        } else {
            let mut idx: Vec<usize> = (0..k).collect();
            idx.shuffle(&mut rng);
            idx.truncate(2);
            idx
        };
        let answers: HashMap<String, String> = chosen
            .iter()
            .enumerate()
            .map(|(i, t)| (t.to_string(), if correct.contains(&i) { "cat".into() } else { "xyz".into() }))
            .collect();
        let expected = if correct.len() == 1 {
            chosen[correct[0]].to_string()
        } else {
            let (a, b) = (correct[0], correct[1]);
            let (ca, cb) = (
                cider_oracle(chosen[a], &refs, &corpus),
                cider_oracle(chosen[b], &refs, &corpus),
            );
            ensure!((ca - cb).abs() > 1e-6, "fixture has a CIDEr tie");
            if ca > cb { chosen[a] } else { chosen[b] }.to_string()
        };
        let mut order = cands.clone();
        for _ in 0..4 {
            order.shuffle(&mut rng);
            let got = filter_pick(&record, &order, &answers, &scorer)?;
            ensure!(got == expected, "trial {trial}: picked {got:?}, expected {expected:?}");
            checked += 1;
        }
    }
    Ok(format!("{checked} selections over 50 fixtures, all order-invariant"))
}

fn criterion_6() -> Outcome {
    let refs = |sets: &[&[&str]]| -> BTreeMap<String, Vec<String>> {
        sets.iter()
            .enumerate()
            .map(|(i, s)| (format!("img{i}"), strings(s)))
            .collect()
    };
    let corpus = refs(&[
        &["a black cat sleeping on a red car"],
        &["two dogs running across a green field"],
        &["a plate of pancakes with bananas"],
    ]);
    let same = vec![("img0".to_string(), "a black cat sleeping on a red car".to_string())];
    let cider = caption_similarity(&same, &corpus, CaptionMetric::Cider).map_err(|e| e.to_string())?;
    ensure!((cider.aggregate - 10.0).abs() <= 1e-6, "identical CIDEr {}", cider.aggregate);
    let bleu = caption_similarity(&same, &corpus, CaptionMetric::Bleu4).map_err(|e| e.to_string())?;
    ensure!((bleu.aggregate - 1.0).abs() <= 1e-9, "identical BLEU-4 {}", bleu.aggregate);

    let disjoint = vec![("img0".to_string(), "pancakes with syrup".to_string())];
    let small = refs(&[&["a black cat on a car"], &["two dogs in a field"]]);
    for metric in [CaptionMetric::Cider, CaptionMetric::Bleu4] {
        let score = caption_similarity(&disjoint, &small, metric).map_err(|e| e.to_string())?;
        ensure!(score.aggregate == 0.0, "zero-overlap {metric:?} {}", score.aggregate);
    }

    // Hand derivation: N = 3 documents, df(black) = df(on) = 2, every other
    // n-gram df = 1. Candidate "cat on car" vs reference "black cat on car".
    let l3 = 3f64.ln();
    let l32 = l3 - 2f64.ln();
    let cos1 = (2.0 * l3 * l3 + l32 * l32)
        / ((2.0 * l3 * l3 + l32 * l32).sqrt() * (2.0 * l3 * l3 + 2.0 * l32 * l32).sqrt());
    let cos2 = 2.0 / 6f64.sqrt();
    let cos3 = 1.0 / 2f64.sqrt();
    let expected = 10.0 * (cos1 + cos2 + cos3) / 4.0;
    let hand = refs(&[&["black cat on car"], &["dog on grass"], &["black dog"]]);
    let cand = vec![("img0".to_string(), "cat on car".to_string())];
    let got = caption_similarity(&cand, &hand, CaptionMetric::Cider).map_err(|e| e.to_string())?;
    ensure!((got.aggregate - expected).abs() <= 1e-6, "hand CIDEr {} vs {expected}", got.aggregate);
    ensure!(
        (bleu4("a black cat sleeping on a red car", &corpus["img0"]) - 1.0).abs() <= 1e-9,
        "direct BLEU-4"
    );
    Ok(format!("identical 10.0 / 1.0, disjoint 0 / 0, hand CIDEr {expected:.6}"))
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fx = write_cli_fixture(dir.path(), 100);
    let mut snapshots = Vec::new();
    for (label, workers) in [("w1a", 1), ("w1b", 1), ("w4a", 4), ("w4b", 4)] {
        let out = dir.path().join(label);
        run_pipeline(&fx, &out, workers);
        snapshots.push((label, snapshot(&out)));
    }
    let (_, reference) = &snapshots[0];
    ensure!(reference.len() >= 8, "expected all output files, found {:?}", reference.keys());
    let training = String::from_utf8_lossy(&reference["train.jsonl"]).lines().count();
    ensure!(training > 0, "empty training file");
    for (label, snap) in &snapshots[1..] {
        ensure!(snap == reference, "{label} differs from w1a");
    }
    let spent = within(Duration::from_secs(60), start)?;
    Ok(format!(
        "{} files identical over 4 runs (workers 1,1,4,4), {training} training lines, {spent:.2?}",
        reference.len()
    ))
}

fn criterion_8() -> Outcome {
    let mut gts = strings(&["dog"; 2]);
    gts.extend(strings(&["cat", "bird", "fish", "cow", "pig", "hen", "ant", "bee"]));
    let two = standard_vqa_accuracy("dog", &gts).map_err(|e| e.to_string())?;
    ensure!((two - 2.0 / 3.0).abs() <= 1e-12, "2 of 10 gives {two}");
    for matches in 3..=10 {
        let mut gts = strings(&vec!["dog"; matches]);
        gts.extend(std::iter::repeat_n("cat".to_string(), 10 - matches));
        let s = standard_vqa_accuracy("Dog.", &gts).map_err(|e| e.to_string())?;
        ensure!(s == 1.0, "{matches} matches gives {s}");
    }
    Ok("2/10 -> 2/3, 3..10/10 -> 1".into())
}

fn criterion_9() -> Outcome {
    let records: Vec<VqaRecord> = (0..10).map(|k| synthetic_record(k, Split::Val2014)).collect();
    let captions = PrecomputedCaptions::new(synthetic_captions(&records)).map_err(|e| e.to_string())?;
    let pool = ExamplePool::new(synthetic_examples(100)).map_err(|e| e.to_string())?;
    let service = MockCompletionService::new(synthetic_mock());
    let config = RunConfig::default();
    let out = run_task(&records, &captions, &ExampleSelector::Random { pool: &pool }, &config, &service, 2)
        .map_err(|e| e.to_string())?;
    let summary = out.summary(&config);
    ensure!(summary.per_seed.len() == 3, "{} per-seed aggregates", summary.per_seed.len());
    let mean = summary.per_seed.iter().map(|s| s.aggregate).sum::<f64>() / 3.0;
    ensure!((summary.mean - mean).abs() <= 1e-12, "mean {} vs {mean}", summary.mean);
    let json = serde_json::to_value(&summary).map_err(|e| e.to_string())?;
    ensure!(json["per_seed"].as_array().map(Vec::len) == Some(3) && json["mean"].is_number(), "report shape");

    let webqa = RunConfig {
        task: Task::Webqa,
        ..RunConfig::default()
    };
    ensure!(webqa.examples() == 8, "webqa default {}", webqa.examples());
    let mut record = synthetic_record(1, Split::Val2014);
    record.keywords = Some(strings(&["blue"]));
    let prediction = answer_one(&record, &captions, &ExampleSelector::Random { pool: &pool }, &webqa, 0, &service)
        .map_err(|e| e.to_string())?;
    ensure!(prediction.examples_used.len() == 8, "webqa used {}", prediction.examples_used.len());
    Ok(format!(
        "per-seed {:?}, mean {:.4}; webqa uses 8 examples",
        summary.per_seed.iter().map(|s| s.aggregate).collect::<Vec<_>>(),
        summary.mean
    ))
}

fn criterion_10() -> Outcome {
    let records: Vec<VqaRecord> = (0..30)
        .map(|k| synthetic_record(k, if k % 3 == 0 { Split::Val2014 } else { Split::Train2014 }))
        .collect();
    let train_ids: BTreeSet<String> = records
        .iter()
        .filter(|r| r.image.split == Split::Train2014)
        .map(|r| r.record_id.clone())
        .collect();

    let sets: BTreeMap<String, CaptionSet> = records
        .iter()
        .map(|r| (r.image.image_id.clone(), r.reference_captions.clone().unwrap()))
        .collect();
    let mut bare = records.clone();
    bare.iter_mut().for_each(|r| r.reference_captions = None);
    let guarded = join_and_guard(bare, &sets, &okvqa_guard());
    ensure!(guarded.excluded == 10, "guard excluded {}", guarded.excluded);
    ensure!(
        guarded.records.iter().all(|r| r.image.split == Split::Train2014),
        "guard kept a validation image"
    );

    let service = MockCompletionService::new(synthetic_mock());
    let templates = PromptTemplates::default();
    let seeds = default_seed_examples();
    let config = SynthesisConfig::default();
    let synth = Synthesizer {
        service: &service,
        templates: &templates,
        seed_examples: &seeds,
        config: &config,
    };
    let pool = ExamplePool::from_reference_captions(&records).map_err(|e| e.to_string())?;
    let (training, summary) = synth.synthesize_dataset(&records, &pool, 4).map_err(|e| e.to_string())?;
    ensure!(!training.is_empty(), "no training records");
    for t in &training {
        ensure!(t.image.split == Split::Train2014, "training record from {}", t.image.split);
        ensure!(train_ids.contains(&t.provenance.record_id), "unexpected record {}", t.provenance.record_id);
    }
    Ok(format!(
        "{} training records, all train2014; {} skipped (10 by guard)",
        training.len(),
        summary.skipped
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("soft accuracy matches exhaustive 3-subset oracle", criterion_1),
        ("CER matches edit-distance oracle; coins/coin", criterion_2),
        ("prompts byte-identical to golden files", criterion_3),
        ("top-n retrieval, rescaling, symmetry", criterion_4),
        ("filter selection, CIDEr tie-break, order invariance", criterion_5),
        ("CIDEr and BLEU-4 checks", criterion_6),
        ("end-to-end CLI determinism across workers", criterion_7),
        ("standard VQA accuracy", criterion_8),
        ("3-seed protocol and WebQA example count", criterion_9),
        ("split guard keeps train2014 only", criterion_10),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(msg)
        });
        match outcome {
            Ok(detail) => println!("PASS  criterion {:>2}: {name} ({detail})", i + 1),
            Err(reason) => {
                failed += 1;
                println!("FAIL  criterion {:>2}: {name} ({reason})", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
