use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use capqa::config::Config;
use capqa::corpus::{
    join_and_guard, load_coco_captions, load_vqa, read_corpus, write_corpus, CaptionPolicy,
    CocoLoadOptions, Split, VqaLoadOptions, VqaRecord,
};
use capqa::llm::{
    CompletionService, DiskCache, HttpCompletionService, LlmClient, MockCompletionService,
    MockTable, ResponseCache, Throttle,
};
use capqa::metrics::{caption_similarity, CaptionMetric};
use capqa::prompts::default_seed_examples;
use capqa::retrieval::{load_embeddings, top_n, EmbeddingPool, ExamplePool, Neighbor};
use capqa::runner::{
    compare_caption_sources, evaluate_predictions, read_predictions, run_task,
    write_predictions, Captioner, CaptionSource, ExampleSelector, RunConfig, Strategy, Task,
};
use capqa::synthesis::{
    export_training_file, read_candidates, training_records, write_candidates, Synthesizer,
};
use capqa::{write_json, write_jsonl};

#[derive(Parser)]
#[command(name = "capqa", version, about = "Prompt-guided caption synthesis and caption-mediated VQA")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Persistent completion cache directory.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Serve completions from a mock table (JSON) instead of the network.
    #[arg(long, global = true)]
    mock: Option<PathBuf>,
    /// Worker threads; overrides the config.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Join VQA questions, answers and COCO captions into a corpus file.
    Ingest(IngestArgs),
    /// Sample candidate captions for every corpus record.
    Synthesize(SynthesizeArgs),
    /// Score candidates with caption-only QA and keep one per record.
    Filter(FilterArgs),
    /// Write the captioner training file from filtered captions.
    ExportTrain(ExportArgs),
    /// Nearest pool entries for each query embedding.
    Retrieve(RetrieveArgs),
    /// Answer questions from captions with in-context examples.
    RunVqa(RunVqaArgs),
    /// Score a prediction file.
    Evaluate(EvaluateArgs),
    /// Score captions against reference captions.
    ScoreCaptions(ScoreCaptionsArgs),
    /// Compare two caption sources on the same task.
    Compare(CompareArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    questions: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    /// COCO caption files; may be repeated.
    #[arg(long)]
    captions: Vec<PathBuf>,
    /// Keep only these image splits (comma separated); default keeps all.
    #[arg(long, value_delimiter = ',')]
    allowed_splits: Vec<Split>,
    /// Accept images with fewer than five captions.
    #[arg(long)]
    lenient_captions: bool,
    #[arg(long, default_value = "train2014")]
    default_split: Split,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthesizeArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Candidate captions, one per line.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    candidates: PathBuf,
    /// QA demonstrations; defaults to the corpus with its first reference
    /// caption as context.
    #[arg(long)]
    examples: Option<PathBuf>,
    /// Selected caption per record.
    #[arg(long)]
    out: PathBuf,
    /// Every scored candidate, for audit.
    #[arg(long)]
    scored: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Output of `filter --out`.
    #[arg(long)]
    selected: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    pool: PathBuf,
    #[arg(long, default_value_t = 32)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectionArgs {
    /// Demonstration pool: {record_id, question, context, answer} per line.
    #[arg(long)]
    examples: PathBuf,
    /// Embeddings of pool entries (retrieved strategy).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Embeddings of test records; defaults to --embeddings.
    #[arg(long)]
    query_embeddings: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    strategy: Option<StrategyArg>,
    #[arg(long)]
    n_examples: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Retrieved,
    Random,
}

#[derive(Args)]
struct RunVqaArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Caption file: {record_id or image_id, caption} per line.
    #[arg(long, conflicts_with = "captioner_url")]
    captions: Option<PathBuf>,
    /// Captioner service base url.
    #[arg(long)]
    captioner_url: Option<String>,
    #[command(flatten)]
    selection: SelectionArgs,
    /// Output directory for predictions and the report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Cider,
    Bleu4,
}

#[derive(Args)]
struct ScoreCaptionsArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    captions: PathBuf,
    #[arg(long, default_value = "cider")]
    metric: MetricArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    captions_a: PathBuf,
    #[arg(long)]
    captions_b: PathBuf,
    #[command(flatten)]
    selection: SelectionArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(w) = cli.workers {
        config.workers = w;
    }
    match &cli.command {
        Command::Ingest(args) => ingest(args),
        Command::Synthesize(args) => synthesize(&cli, &config, args),
        Command::Filter(args) => filter(&cli, &config, args),
        Command::ExportTrain(args) => export_train(&config, args),
        Command::Retrieve(args) => retrieve(args),
        Command::RunVqa(args) => run_vqa(&cli, &config, args),
        Command::Evaluate(args) => evaluate(&config, args),
        Command::ScoreCaptions(args) => score_captions(args),
        Command::Compare(args) => compare(&cli, &config, args),
    }
}

fn completion_service(cli: &Cli, config: &Config) -> Result<LlmClient> {
    let inner: Arc<dyn CompletionService> = match &cli.mock {
        Some(path) => Arc::new(MockCompletionService::new(
            MockTable::load(path).with_context(|| format!("loading mock table {}", path.display()))?,
        )),
        None => Arc::new(match &config.llm.base_url {
            Some(base) => HttpCompletionService::new(base, std::env::var(capqa::llm::API_KEY_ENV).ok())?,
            None => HttpCompletionService::from_env()?,
        }),
    };
    let throttled = Throttle::new(inner, config.llm.throttle())?;
    let client = LlmClient::new(Arc::new(throttled)).with_retry(config.llm.retry());
    Ok(match cli.cache_dir.as_ref().or(config.llm.cache_dir.as_ref()) {
        Some(dir) => client.with_cache(ResponseCache::Disk(DiskCache::open(dir)?)),
        None => client,
    })
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn ingest(args: &IngestArgs) -> Result<()> {
    let options = CocoLoadOptions {
        policy: if args.lenient_captions {
            CaptionPolicy::lenient()
        } else {
            CaptionPolicy::coco_strict()
        },
        default_split: args.default_split,
    };
    let mut sets = BTreeMap::new();
    let mut skipped_images = 0;
    for path in &args.captions {
        let index = load_coco_captions(path, &options)?;
        skipped_images += index.skipped.len();
        sets.extend(index.sets);
    }
    let records = load_vqa(
        &args.questions,
        &args.annotations,
        &VqaLoadOptions {
            default_split: args.default_split,
        },
    )?;
    let allowed: BTreeSet<Split> = if args.allowed_splits.is_empty() {
        Split::ALL.into_iter().collect()
    } else {
        args.allowed_splits.iter().copied().collect()
    };
    let outcome = join_and_guard(records, &sets, &allowed);
    write_corpus(&args.out, &outcome.records)?;
    print_json(&serde_json::json!({
        "records": outcome.records.len(),
        "excluded_by_split": outcome.excluded,
        "without_captions": outcome.without_captions,
        "images_skipped": skipped_images,
    }))
}

fn synthesize(cli: &Cli, config: &Config, args: &SynthesizeArgs) -> Result<()> {
    let records = read_corpus(&args.corpus)?;
    let client = completion_service(cli, config)?;
    let seeds = default_seed_examples();
    let synth = Synthesizer {
        service: &client,
        templates: &config.prompts,
        seed_examples: &seeds,
        config: &config.synthesis,
    };
    let (candidates, summary) = synth.generate_all(&records, config.workers)?;
    write_candidates(&args.out, &candidates)?;
    info!("{} candidates written to {}", candidates.len(), args.out.display());
    print_json(&summary)
}

fn filter(cli: &Cli, config: &Config, args: &FilterArgs) -> Result<()> {
    let records = read_corpus(&args.corpus)?;
    let candidates = read_candidates(&args.candidates)?;
    let pool = match &args.examples {
        Some(path) => ExamplePool::load(path)?,
        None => ExamplePool::from_reference_captions(&records)?,
    };
    let client = completion_service(cli, config)?;
    let synth = Synthesizer {
        service: &client,
        templates: &config.prompts,
        seed_examples: &[],
        config: &config.synthesis,
    };
    let out = synth.filter_all(&records, &candidates, &pool, config.workers)?;
    write_candidates(&args.out, &out.selected)?;
    if let Some(path) = &args.scored {
        write_candidates(path, &out.scored)?;
    }
    print_json(&serde_json::json!({
        "selected": out.selected.len(),
        "failed": out.failed,
    }))
}

fn export_train(config: &Config, args: &ExportArgs) -> Result<()> {
    let records = read_corpus(&args.corpus)?;
    let selected = read_candidates(&args.selected)?;
    let training = training_records(&records, &selected, &config.prompts)?;
    export_training_file(&training, &args.out)?;
    print_json(&serde_json::json!({ "training_records": training.len() }))
}

#[derive(Serialize)]
struct NeighborLine {
    record_id: String,
    neighbors: Vec<Neighbor>,
}

fn retrieve(args: &RetrieveArgs) -> Result<()> {
    let queries = load_embeddings(&args.queries)?;
    let pool = load_embeddings(&args.pool)?;
    let lines = queries
        .iter()
        .map(|q| {
            Ok(NeighborLine {
                record_id: q.record_id.clone(),
                neighbors: top_n(q, &pool, args.n)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(&args.out, lines.iter())?;
    Ok(())
}

struct Selection {
    pool: ExamplePool,
    embeddings: Option<(EmbeddingPool, Option<EmbeddingPool>)>,
    config: RunConfig,
}

impl Selection {
    fn load(base: &RunConfig, args: &SelectionArgs) -> Result<Self> {
        let mut config = base.clone();
        if let Some(task) = args.task {
            config.task = task;
        }
        if let Some(strategy) = args.strategy {
            config.strategy = match strategy {
                StrategyArg::Retrieved => Strategy::Retrieved,
                StrategyArg::Random => Strategy::Random,
            };
        }
        if args.n_examples.is_some() {
            config.n_examples = args.n_examples;
        }
        if let Some(seeds) = &args.seeds {
            config.seeds = seeds.clone();
        }
        let embeddings = match (&args.embeddings, config.strategy) {
            (Some(path), _) => Some((
                load_embeddings(path)?,
                args.query_embeddings.as_deref().map(load_embeddings).transpose()?,
            )),
            (None, Strategy::Retrieved) => bail!("the retrieved strategy needs --embeddings"),
            (None, Strategy::Random) => None,
        };
        Ok(Self {
            pool: ExamplePool::load(&args.examples)?,
            embeddings,
            config,
        })
    }

    fn selector(&self) -> ExampleSelector<'_> {
        match (&self.embeddings, self.config.strategy) {
            (Some((embeddings, queries)), Strategy::Retrieved) => ExampleSelector::Retrieved {
                pool: &self.pool,
                embeddings,
                queries: queries.as_ref().unwrap_or(embeddings),
            },
            _ => ExampleSelector::Random { pool: &self.pool },
        }
    }
}

fn caption_source(captions: &Option<PathBuf>, url: &Option<String>) -> Result<CaptionSource> {
    match (captions, url) {
        (Some(path), _) => Ok(CaptionSource::PrecomputedFile(path.clone())),
        (None, Some(url)) => Ok(CaptionSource::CaptionerService(url.clone())),
        (None, None) => bail!("give --captions or --captioner-url"),
    }
}

fn run_vqa(cli: &Cli, config: &Config, args: &RunVqaArgs) -> Result<()> {
    let records = read_corpus(&args.corpus)?;
    let selection = Selection::load(&config.runner, &args.selection)?;
    let captioner = caption_source(&args.captions, &args.captioner_url)?
        .open(&config.prompts.captioner_prefix)?;
    let client = completion_service(cli, config)?;
    let output = run_task(
        &records,
        captioner.as_ref(),
        &selection.selector(),
        &selection.config,
        &client,
        config.workers,
    )?;
    for run in &output.runs {
        let name = match run.seed {
            Some(seed) => format!("predictions_seed{seed}.jsonl"),
            None => "predictions.jsonl".to_string(),
        };
        write_predictions(&args.out.join(name), &run.predictions)?;
    }
    let summary = output.summary(&selection.config);
    write_json(&args.out.join("report.json"), &summary)?;
    print_json(&summary)
}

fn evaluate(config: &Config, args: &EvaluateArgs) -> Result<()> {
    let records = read_corpus(&args.corpus)?;
    let predictions = read_predictions(&args.predictions)?;
    let task = args.task.unwrap_or(config.runner.task);
    let report = evaluate_predictions(task, &records, &predictions)?;
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    print_json(&serde_json::json!({
        "metric_name": report.metric_name,
        "aggregate": report.aggregate,
        "count": report.count,
    }))
}

fn score_captions(args: &ScoreCaptionsArgs) -> Result<()> {
    let records = read_corpus(&args.corpus)?;
    let captions = CaptionSource::PrecomputedFile(args.captions.clone()).open("")?;
    let (candidates, references) = caption_pairs(&records, captions.as_ref())?;
    let metric = match args.metric {
        MetricArg::Cider => CaptionMetric::Cider,
        MetricArg::Bleu4 => CaptionMetric::Bleu4,
    };
    let report = caption_similarity(&candidates, &references, metric)?;
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    print_json(&serde_json::json!({
        "metric_name": report.metric_name,
        "aggregate": report.aggregate,
        "count": report.count,
    }))
}

type CaptionPairs = (Vec<(String, String)>, BTreeMap<String, Vec<String>>);

/// Candidate and reference captions keyed by record id, for records that
/// have both.
fn caption_pairs(records: &[VqaRecord], captions: &dyn Captioner) -> Result<CaptionPairs> {
    let mut candidates = Vec::new();
    let mut references = BTreeMap::new();
    for record in records {
        let Some(set) = &record.reference_captions else {
            continue;
        };
        if let Ok(caption) = captions.caption(record) {
            candidates.push((record.record_id.clone(), caption));
            references.insert(record.record_id.clone(), set.captions.clone());
        }
    }
    if candidates.is_empty() {
        bail!("no record has both a caption and reference captions");
    }
    Ok((candidates, references))
}

fn compare(cli: &Cli, config: &Config, args: &CompareArgs) -> Result<()> {
    let records = read_corpus(&args.corpus)?;
    let selection = Selection::load(&config.runner, &args.selection)?;
    let a = CaptionSource::PrecomputedFile(args.captions_a.clone()).open("")?;
    let b = CaptionSource::PrecomputedFile(args.captions_b.clone()).open("")?;
    let client = completion_service(cli, config)?;
    let report = compare_caption_sources(
        &records,
        a.as_ref(),
        b.as_ref(),
        &selection.selector(),
        &selection.config,
        &client,
        config.workers,
    )?;
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    print_json(&serde_json::json!({
        "metric_name": report.metric_name,
        "aggregate_a": report.aggregate_a,
        "aggregate_b": report.aggregate_b,
        "delta": report.delta,
    }))
}
