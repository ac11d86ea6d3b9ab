use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sumtopic::corpus::{build_vocabulary, load_corpus, Corpus, LoadOptions, SourceFormat};
use sumtopic::embed::{embed_corpus, EmbedOptions, EmbeddingMatrix};
use sumtopic::eval::{Evaluator, InputType, RunMeta};
use sumtopic::runner::{regenerate_report, run_experiment, GridConfig, Providers, ProvidersConfig};
use sumtopic::summarize::{
    summarize_corpus, PromptTemplate, SummarizeOptions, SummaryCache, SummaryKind, SummaryVariant,
};
use sumtopic::topics::{TopicConfig, TopicPipeline};

#[derive(Parser)]
#[command(name = "sumtopic", version, about = "Summarization-augmented topic modeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a raw corpus and write it as normalized JSONL.
    Ingest(IngestArgs),
    /// Summarize every document of a corpus into a derived corpus.
    Summarize(SummarizeArgs),
    /// Embed a corpus into a binary embedding file.
    Embed(EmbedArgs),
    /// Fit one topic model and optionally score it.
    Model(ModelArgs),
    /// Run the full experiment grid from a config file.
    Grid(GridArgs),
    /// Regenerate summary.csv and charts from a grid directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct ProviderArgs {
    /// Config file whose [providers] section selects remote endpoints.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the offline fallback providers regardless of config.
    #[arg(long)]
    offline: bool,
}

impl ProviderArgs {
    fn providers(&self) -> Result<Providers> {
        let cfg = match &self.config {
            Some(p) => GridConfig::from_file(p)?.providers,
            None => ProvidersConfig::default(),
        };
        Ok(cfg.select(self.offline)?)
    }
}

#[derive(Args)]
struct IngestArgs {
    input: PathBuf,
    #[arg(long, default_value = "jsonl")]
    format: String,
    #[arg(long, default_value = "text")]
    text_field: String,
    #[arg(long)]
    label_field: Option<String>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long, short)]
    out: PathBuf,
    /// Also write the vocabulary as JSON.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct SummarizeArgs {
    /// Normalized corpus JSONL (as written by `ingest`).
    corpus: PathBuf,
    #[arg(long)]
    variant: SummaryKind,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value = "summary-cache")]
    cache: PathBuf,
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long, default_value_t = sumtopic::corpus::DEFAULT_TRUNCATION_LIMIT)]
    truncation_limit: usize,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[command(flatten)]
    providers: ProviderArgs,
}

#[derive(Args)]
struct EmbedArgs {
    corpus: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[command(flatten)]
    providers: ProviderArgs,
}

#[derive(Args)]
struct ModelArgs {
    /// Model input corpus (full text or a summary corpus).
    corpus: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    min_topic_size: usize,
    #[arg(long, default_value_t = 0.1)]
    diversity: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
    /// Original full-text corpus; when given, prints the metrics record.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value = "full")]
    input_type: String,
    #[command(flatten)]
    providers: ProviderArgs,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    offline: bool,
}

#[derive(Args)]
struct ReportArgs {
    dir: PathBuf,
}

fn read_corpus(path: &Path) -> Result<Corpus> {
    let opts = LoadOptions::new(SourceFormat::Jsonl).with_label("label");
    load_corpus(path, &opts).with_context(|| format!("loading {}", path.display()))
}

fn ingest(a: IngestArgs) -> Result<()> {
    let format: SourceFormat = a.format.parse().map_err(anyhow::Error::msg)?;
    let mut opts = LoadOptions::new(format).with_text_field(&a.text_field);
    if let Some(l) = &a.label_field {
        opts = opts.with_label(l);
    }
    if let Some(n) = &a.name {
        opts = opts.named(n);
    }
    let corpus = load_corpus(&a.input, &opts)?;
    let vocab = build_vocabulary(&corpus)?;
    corpus.write_jsonl(&a.out)?;
    if let Some(v) = &a.vocab {
        std::fs::write(v, vocab.to_json()).with_context(|| format!("writing {}", v.display()))?;
    }
    let over = corpus
        .documents
        .iter()
        .filter(|d| d.word_count > sumtopic::corpus::DEFAULT_TRUNCATION_LIMIT)
        .count();
    println!(
        "{}: {} documents, {} labels, {} terms, {} over the default truncation limit",
        corpus.name,
        corpus.len(),
        corpus.labels().len(),
        vocab.len(),
        over
    );
    Ok(())
}

fn summarize(a: SummarizeArgs) -> Result<()> {
    let corpus = read_corpus(&a.corpus)?;
    let providers = a.providers.providers()?;
    let template = match &a.template {
        Some(p) => PromptTemplate::from_file(p, a.variant)?,
        None => PromptTemplate::builtin(a.variant),
    };
    let opts = SummarizeOptions {
        truncation_limit: a.truncation_limit,
        concurrency_limit: a.concurrency,
        cache: Some(SummaryCache::new(&a.cache)),
        ..SummarizeOptions::default()
    };
    let variant = SummaryVariant::of(a.variant);
    let out = summarize_corpus(&corpus, providers.completion.as_ref(), &template, &variant, &opts)?;
    out.corpus.write_jsonl(&a.out)?;
    println!(
        "{} {} summaries via {}: {} outside {} words, {} failed",
        out.records.iter().flatten().count(),
        a.variant,
        providers.completion.id(),
        out.out_of_range(),
        variant.range_label(),
        out.failures.len()
    );
    for (id, why) in &out.failures {
        eprintln!("  {id}: {why}");
    }
    Ok(())
}

fn embed(a: EmbedArgs) -> Result<()> {
    let corpus = read_corpus(&a.corpus)?;
    let providers = a.providers.providers()?;
    let opts = EmbedOptions {
        batch_size: a.batch_size,
        ..EmbedOptions::default()
    };
    let m = embed_corpus(&corpus, providers.embedding.as_ref(), &opts)?;
    m.save(&a.out)?;
    println!("{} x {} embeddings via {} -> {}", m.len(), m.dim, m.provider_id, a.out.display());
    Ok(())
}

fn model(a: ModelArgs) -> Result<()> {
    let corpus = read_corpus(&a.corpus)?;
    let embeddings = EmbeddingMatrix::load(&a.embeddings)?;
    let providers = a.providers.providers()?;
    let pipeline = TopicPipeline::new(&corpus, &embeddings, providers.embedding.as_ref())?;
    let config = TopicConfig::new(a.min_topic_size, a.diversity, a.seed);
    let model = pipeline.fit(&config)?;
    std::fs::write(&a.out, model.to_json()).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{} topics, {} outliers", model.n_topics, model.n_outliers);
    for t in &model.topics {
        let words: Vec<&str> = t.keywords.iter().map(|k| k.term.as_str()).collect();
        println!("  {:>3} ({:>4} docs): {}", t.id, t.size, words.join(" "));
    }
    if let Some(r) = &a.reference {
        let reference = read_corpus(r)?;
        let input_type: InputType = a.input_type.parse()?;
        let meta = RunMeta {
            dataset: reference.name.clone(),
            input_type,
            diversity_param: a.diversity,
            min_topic_size: a.min_topic_size,
            seed: a.seed,
        };
        let record = Evaluator::new(&reference)?.evaluate(&model, &meta);
        println!(
            "diversity {} coherence_cv {} degenerate {} unknown_terms {}",
            fmt_opt(record.diversity),
            fmt_opt(record.coherence_cv),
            record.degenerate,
            record.unknown_terms
        );
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn grid(a: GridArgs) -> Result<()> {
    let cfg = GridConfig::from_file(&a.config)?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    let result = run_experiment(&cfg, base, a.offline)?;
    println!(
        "{}: {} records, {} cells, {} degenerate -> {}",
        result.dataset,
        result.records.len(),
        result.aggregate.cells.len(),
        result.aggregate.excluded_degenerate,
        base.join(&cfg.output.dir).display()
    );
    for t in &result.aggregate.input_types {
        println!(
            "  {:<5} diversity {} coherence_cv {}",
            t.input_type,
            fmt_opt(t.diversity),
            fmt_opt(t.coherence_cv)
        );
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    if !a.dir.join("records.csv").exists() {
        bail!("{} has no records.csv", a.dir.display());
    }
    let agg = regenerate_report(&a.dir)?;
    println!("regenerated {} cell means in {}", agg.cells.len(), a.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Summarize(a) => summarize(a),
        Command::Embed(a) => embed(a),
        Command::Model(a) => model(a),
        Command::Grid(a) => grid(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
