//! Experiment grid: input type x MMR diversity x minimum topic size, each
//! repeated with consecutive seeds, then aggregated and charted.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{load_corpus, Corpus, CorpusError, LoadOptions, SourceFormat, DEFAULT_TRUNCATION_LIMIT};
use crate::embed::{
    embed_corpus, EmbedError, EmbedOptions, EmbeddingMatrix, EmbeddingProvider, HashingEmbedder,
    HttpEmbeddingConfig, HttpEmbeddingProvider,
};
use crate::eval::{EvalError, Evaluator, InputType, MetricsRecord, RunMeta};
use crate::provider::ProviderError;
use crate::reduce::UmapParams;
use crate::summarize::{
    summarize_corpus, CompletionProvider, ExtractiveProvider, HttpCompletionConfig,
    HttpCompletionProvider, PromptTemplate, SummarizeError, SummarizeOptions, SummaryCache,
    SummaryKind, SummaryVariant,
};
use crate::topics::{TopicConfig, TopicError, TopicModel, TopicPipeline, DEFAULT_CANDIDATES, DEFAULT_TOP_N};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Csv { path: PathBuf, reason: String },
    #[error("no input corpus supplied for input type `{0}`")]
    MissingInput(InputType),
    #[error("nothing to report: no records")]
    NoRecords,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Summarize(#[from] SummarizeError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Topic(#[from] TopicError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Artifact defaults for unconfigured minimum topic sizes, by corpus size.
pub fn suggested_min_topic_sizes(n_docs: usize) -> Vec<usize> {
    if n_docs < 8_000 {
        vec![10, 15, 20]
    } else {
        vec![50, 100, 150]
    }
}

/// The pure grid, independent of where inputs come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub diversity_values: Vec<f64>,
    pub min_topic_sizes: Vec<usize>,
    pub input_types: Vec<InputType>,
    pub repeats: usize,
    pub base_seed: u64,
    pub top_n: usize,
    pub n_candidates: usize,
    pub window_size: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            diversity_values: vec![0.1, 0.2, 0.3],
            min_topic_sizes: Vec::new(),
            input_types: InputType::ALL.to_vec(),
            repeats: 3,
            base_seed: 42,
            top_n: DEFAULT_TOP_N,
            n_candidates: DEFAULT_CANDIDATES,
            window_size: crate::eval::DEFAULT_WINDOW,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), RunnerError> {
        let bad = |m: &str| Err(RunnerError::Config(m.to_string()));
        if self.repeats < 1 {
            return bad("grid.repeats must be at least 1");
        }
        if self.diversity_values.is_empty() || self.min_topic_sizes.is_empty() || self.input_types.is_empty() {
            return bad("grid lists must be non-empty");
        }
        if self.diversity_values.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return bad("grid.diversity_values must lie in [0, 1]");
        }
        if self.min_topic_sizes.iter().any(|&m| m < 2) {
            return bad("grid.min_topic_sizes must be at least 2");
        }
        if self.top_n == 0 || self.n_candidates < self.top_n {
            return bad("grid.n_candidates must be at least grid.top_n, which must be positive");
        }
        if self.window_size == 0 {
            return bad("grid.window_size must be at least 1");
        }
        Ok(())
    }

    /// Every run in canonical order: input type, diversity, size, repeat.
    pub fn runs(&self, dataset: &str) -> Vec<RunMeta> {
        let mut out = Vec::new();
        for &input_type in &self.input_types {
            for &diversity_param in &self.diversity_values {
                for &min_topic_size in &self.min_topic_sizes {
                    for r in 0..self.repeats {
                        out.push(RunMeta {
                            dataset: dataset.to_string(),
                            input_type,
                            diversity_param,
                            min_topic_size,
                            seed: self.base_seed + r as u64,
                        });
                    }
                }
            }
        }
        out
    }
}

/// One model input: its corpus and document embeddings.
pub struct GridInput<'a> {
    pub corpus: &'a Corpus,
    pub embeddings: &'a EmbeddingMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub dataset: String,
    pub records: Vec<MetricsRecord>,
    pub aggregate: Aggregate,
    /// Fitted models aligned with `records`; `None` where a run failed.
    pub models: Vec<Option<TopicModel>>,
}

/// Runs every configured cell and repeat, evaluating against `reference`.
/// Failed runs become degenerate records carrying the error as a note.
pub fn run_grid(
    spec: &GridSpec,
    umap: &UmapParams,
    dataset: &str,
    reference: &Corpus,
    inputs: &BTreeMap<InputType, GridInput<'_>>,
    term_provider: &dyn EmbeddingProvider,
    workers: usize,
) -> Result<GridResult, RunnerError> {
    spec.validate()?;
    let evaluator = Evaluator::with_window(reference, spec.window_size)?;
    let mut pipelines = BTreeMap::new();
    for &t in &spec.input_types {
        let input = inputs.get(&t).ok_or(RunnerError::MissingInput(t))?;
        pipelines.insert(t, TopicPipeline::new(input.corpus, input.embeddings, term_provider)?);
    }
    let runs = spec.runs(dataset);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    let outcomes: Vec<(MetricsRecord, Option<TopicModel>)> = pool.install(|| {
        runs.par_iter()
            .map(|meta| {
                let config = TopicConfig {
                    umap: UmapParams {
                        seed: meta.seed,
                        ..umap.clone()
                    },
                    top_n: spec.top_n,
                    n_candidates: spec.n_candidates,
                    ..TopicConfig::new(meta.min_topic_size, meta.diversity_param, meta.seed)
                };
                match pipelines[&meta.input_type].fit(&config) {
                    Ok(model) => (evaluator.evaluate(&model, meta), Some(model)),
                    Err(e) => (MetricsRecord::degenerate(meta, Some(e.to_string())), None),
                }
            })
            .collect()
    });
    let (records, models): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
    let aggregate = aggregate(&records)?;
    Ok(GridResult {
        dataset: dataset.to_string(),
        records,
        aggregate,
        models,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMean {
    pub input_type: InputType,
    pub diversity_param: f64,
    pub min_topic_size: usize,
    pub n_records: usize,
    pub n_degenerate: usize,
    /// `None` when every record of the cell is degenerate.
    pub diversity: Option<f64>,
    pub coherence_cv: Option<f64>,
    pub n_topics: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputTypeMean {
    pub input_type: InputType,
    pub n_cells: usize,
    pub n_undefined_cells: usize,
    pub diversity: Option<f64>,
    pub coherence_cv: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub cells: Vec<CellMean>,
    pub input_types: Vec<InputTypeMean>,
    pub excluded_degenerate: usize,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Cell means over non-degenerate repeats; input-type means over defined
/// cell means. Groups keep first-appearance order.
pub fn aggregate(records: &[MetricsRecord]) -> Result<Aggregate, RunnerError> {
    if records.is_empty() {
        return Err(RunnerError::NoRecords);
    }
    let mut order: Vec<(InputType, u64, usize)> = Vec::new();
    let mut groups: BTreeMap<(InputType, u64, usize), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        let key = (r.input_type, r.diversity_param.to_bits(), r.min_topic_size);
        groups
            .entry(key)
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(r);
    }
    let cells: Vec<CellMean> = order
        .iter()
        .map(|key| {
            let rs = &groups[key];
            let ok: Vec<&&MetricsRecord> = rs.iter().filter(|r| !r.degenerate).collect();
            CellMean {
                input_type: key.0,
                diversity_param: f64::from_bits(key.1),
                min_topic_size: key.2,
                n_records: rs.len(),
                n_degenerate: rs.len() - ok.len(),
                diversity: mean(ok.iter().filter_map(|r| r.diversity)),
                coherence_cv: mean(ok.iter().filter_map(|r| r.coherence_cv)),
                n_topics: mean(ok.iter().map(|r| r.n_topics as f64)),
            }
        })
        .collect();
    let mut type_order: Vec<InputType> = Vec::new();
    for c in &cells {
        if !type_order.contains(&c.input_type) {
            type_order.push(c.input_type);
        }
    }
    let input_types = type_order
        .into_iter()
        .map(|t| {
            let cs: Vec<&CellMean> = cells.iter().filter(|c| c.input_type == t).collect();
            InputTypeMean {
                input_type: t,
                n_cells: cs.len(),
                n_undefined_cells: cs.iter().filter(|c| c.diversity.is_none()).count(),
                diversity: mean(cs.iter().filter_map(|c| c.diversity)),
                coherence_cv: mean(cs.iter().filter_map(|c| c.coherence_cv)),
            }
        })
        .collect();
    Ok(Aggregate {
        cells,
        input_types,
        excluded_degenerate: records.iter().filter(|r| r.degenerate).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SummaryRow {
    level: String,
    input_type: InputType,
    diversity_param: Option<f64>,
    min_topic_size: Option<usize>,
    n_records: usize,
    n_degenerate: usize,
    diversity: Option<f64>,
    coherence_cv: Option<f64>,
    n_topics: Option<f64>,
}

fn summary_rows(agg: &Aggregate) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = agg
        .cells
        .iter()
        .map(|c| SummaryRow {
            level: "cell".into(),
            input_type: c.input_type,
            diversity_param: Some(c.diversity_param),
            min_topic_size: Some(c.min_topic_size),
            n_records: c.n_records,
            n_degenerate: c.n_degenerate,
            diversity: c.diversity,
            coherence_cv: c.coherence_cv,
            n_topics: c.n_topics,
        })
        .collect();
    for t in &agg.input_types {
        let cs = agg.cells.iter().filter(|c| c.input_type == t.input_type);
        let (n_records, n_degenerate) = cs.fold((0, 0), |(a, b), c| (a + c.n_records, b + c.n_degenerate));
        rows.push(SummaryRow {
            level: "input_type".into(),
            input_type: t.input_type,
            diversity_param: None,
            min_topic_size: None,
            n_records,
            n_degenerate,
            diversity: t.diversity,
            coherence_cv: t.coherence_cv,
            n_topics: None,
        });
    }
    rows
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

pub fn records_csv(records: &[MetricsRecord]) -> Vec<u8> {
    csv_bytes(records)
}

pub fn summary_csv(agg: &Aggregate) -> Vec<u8> {
    csv_bytes(&summary_rows(agg))
}

pub fn read_records_csv(path: &Path) -> Result<Vec<MetricsRecord>, RunnerError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| RunnerError::Csv {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    r.deserialize()
        .collect::<Result<Vec<MetricsRecord>, _>>()
        .map_err(|e| RunnerError::Csv {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Diversity,
    Coherence,
}

impl Metric {
    fn of(self, c: &CellMean) -> Option<f64> {
        match self {
            Metric::Diversity => c.diversity,
            Metric::Coherence => c.coherence_cv,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Metric::Diversity => "Topic diversity",
            Metric::Coherence => "C_V coherence",
        }
    }
}

const SVG_W: f64 = 760.0;
const SVG_H: f64 = 400.0;
const PAD_L: f64 = 70.0;
const PAD_R: f64 = 120.0;
const PAD_T: f64 = 40.0;
const PAD_B: f64 = 80.0;

fn color(t: InputType) -> &'static str {
    match t {
        InputType::Full => "#1f77b4",
        InputType::Short => "#d62728",
        InputType::Long => "#2ca02c",
    }
}

/// Multi-line chart: x is the cell index within an input type
/// (diversity-major), one polyline per input type.
pub fn render_chart(dataset: &str, agg: &Aggregate, metric: Metric) -> String {
    let mut series: Vec<(InputType, Vec<&CellMean>)> = Vec::new();
    for c in &agg.cells {
        match series.iter_mut().find(|s| s.0 == c.input_type) {
            Some(s) => s.1.push(c),
            None => series.push((c.input_type, vec![c])),
        }
    }
    let n_x = series.iter().map(|s| s.1.len()).max().unwrap_or(0);
    let values: Vec<f64> = agg.cells.iter().filter_map(|c| metric.of(c)).collect();
    let (mut lo, mut hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        lo -= 0.05;
        hi += 0.05;
    } else {
        let pad = (hi - lo) * 0.08;
        lo -= pad;
        hi += pad;
    }
    let plot_w = SVG_W - PAD_L - PAD_R;
    let plot_h = SVG_H - PAD_T - PAD_B;
    let x_at = |i: usize| {
        if n_x <= 1 {
            PAD_L + plot_w / 2.0
        } else {
            PAD_L + plot_w * i as f64 / (n_x - 1) as f64
        }
    };
    let y_at = |v: f64| PAD_T + plot_h * (hi - v) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="15">{} ({})</text>"#,
        PAD_L + plot_w / 2.0,
        metric.label(),
        xml_escape(dataset)
    );
    let _ = writeln!(
        s,
        r##"<rect x="{PAD_L}" y="{PAD_T}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444"/>"##
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = y_at(v);
        let _ = writeln!(
            s,
            r##"<line x1="{PAD_L}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"##,
            PAD_L + plot_w,
            PAD_L - 6.0,
            y + 4.0
        );
    }
    if let Some((_, cells)) = series.first() {
        for (i, c) in cells.iter().enumerate() {
            let x = x_at(i);
            let _ = writeln!(
                s,
                r#"<text x="{x:.2}" y="{:.2}" text-anchor="end" transform="rotate(-40 {x:.2} {:.2})">d={} m={}</text>"#,
                PAD_T + plot_h + 16.0,
                PAD_T + plot_h + 16.0,
                c.diversity_param,
                c.min_topic_size
            );
        }
    }
    for (k, (t, cells)) in series.iter().enumerate() {
        // undefined cells break the line
        let mut segments: Vec<Vec<(f64, f64)>> = vec![Vec::new()];
        for (i, c) in cells.iter().enumerate() {
            match metric.of(c) {
                Some(v) => segments.last_mut().expect("segment").push((x_at(i), y_at(v))),
                None => segments.push(Vec::new()),
            }
        }
        for seg in segments.iter().filter(|seg| !seg.is_empty()) {
            let pts: Vec<String> = seg.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
            let _ = writeln!(
                s,
                r#"<polyline class="series" data-input="{t}" fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
                color(*t),
                pts.join(" ")
            );
            for (x, y) in seg {
                let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{}"/>"#, color(*t));
            }
        }
        let ly = PAD_T + 14.0 + 20.0 * k as f64;
        let lx = PAD_L + plot_w + 14.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{t}</text>"#,
            lx + 20.0,
            color(*t),
            lx + 26.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn model_file_name(r: &MetricsRecord) -> String {
    format!(
        "{}-d{}-m{}-s{}.json",
        r.input_type, r.diversity_param, r.min_topic_size, r.seed
    )
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), RunnerError> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes the deterministic report files derived from records alone.
fn write_derived(out_dir: &Path, dataset: &str, agg: &Aggregate) -> Result<(), RunnerError> {
    write(&out_dir.join("summary.csv"), &summary_csv(agg))?;
    write(
        &out_dir.join("diversity.svg"),
        render_chart(dataset, agg, Metric::Diversity).as_bytes(),
    )?;
    write(
        &out_dir.join("coherence.svg"),
        render_chart(dataset, agg, Metric::Coherence).as_bytes(),
    )
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub dataset: String,
    pub config_fingerprint: Option<String>,
    pub reference_corpus_hash: Option<String>,
    pub providers: BTreeMap<String, String>,
    pub n_records: usize,
    pub n_cells: usize,
    pub excluded_degenerate: usize,
    pub model_fingerprints: Vec<Option<String>>,
    pub unknown_terms: Vec<usize>,
    pub notes: Vec<Option<String>>,
    pub timings_secs: BTreeMap<String, f64>,
}

/// Writes records.csv, summary.csv, both charts, per-run model JSON and
/// run-manifest.json.
pub fn emit_report(result: &GridResult, out_dir: &Path, mut manifest: Manifest) -> Result<(), RunnerError> {
    if result.records.is_empty() {
        return Err(RunnerError::NoRecords);
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write(&out_dir.join("records.csv"), &records_csv(&result.records))?;
    write_derived(out_dir, &result.dataset, &result.aggregate)?;
    let models_dir = out_dir.join("models");
    fs::create_dir_all(&models_dir).map_err(io_err(&models_dir))?;
    for (r, m) in result.records.iter().zip(&result.models) {
        if let Some(m) = m {
            write(&models_dir.join(model_file_name(r)), m.to_json().as_bytes())?;
        }
    }
    manifest.version = env!("CARGO_PKG_VERSION").to_string();
    manifest.dataset = result.dataset.clone();
    manifest.n_records = result.records.len();
    manifest.n_cells = result.aggregate.cells.len();
    manifest.excluded_degenerate = result.aggregate.excluded_degenerate;
    manifest.model_fingerprints = result
        .models
        .iter()
        .map(|m| m.as_ref().map(|m| m.params_fingerprint.clone()))
        .collect();
    manifest.unknown_terms = result.records.iter().map(|r| r.unknown_terms).collect();
    manifest.notes = result.records.iter().map(|r| r.note.clone()).collect();
    write(
        &out_dir.join("run-manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest").as_bytes(),
    )
}

/// Rebuilds summary.csv and the charts from an existing records.csv.
pub fn regenerate_report(dir: &Path) -> Result<Aggregate, RunnerError> {
    let records = read_records_csv(&dir.join("records.csv"))?;
    let agg = aggregate(&records)?;
    write_derived(dir, &records[0].dataset, &agg)?;
    Ok(agg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: Option<String>,
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: String,
    #[serde(default = "default_text_field")]
    pub text_field: String,
    pub label_field: Option<String>,
    #[serde(default = "default_truncation")]
    pub truncation_limit: usize,
}

fn default_format() -> String {
    "jsonl".into()
}

fn default_text_field() -> String {
    "text".into()
}

fn default_truncation() -> usize {
    DEFAULT_TRUNCATION_LIMIT
}

impl DatasetConfig {
    pub fn load(&self, base: &Path) -> Result<Corpus, RunnerError> {
        let format: SourceFormat = self
            .format
            .parse()
            .map_err(|e: String| RunnerError::Config(format!("dataset.format: {e}")))?;
        let mut opts = LoadOptions::new(format).with_text_field(&self.text_field);
        if let Some(l) = &self.label_field {
            opts = opts.with_label(l);
        }
        if let Some(n) = &self.name {
            opts = opts.named(n);
        }
        Ok(load_corpus(&base.join(&self.path), &opts)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProvidersConfig {
    /// Force the extractive summarizer and hashing embedder.
    pub offline: bool,
    pub completion: Option<HttpCompletionConfig>,
    pub embedding: Option<HttpEmbeddingConfig>,
    pub fallback_dim: usize,
    pub fallback_seed: u64,
    pub prompt_template: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub summarize_concurrency: usize,
    pub embed_concurrency: usize,
    pub embed_batch_size: usize,
}

impl Default for ProvidersConfig {
    fn default() -> Self {
        Self {
            offline: false,
            completion: None,
            embedding: None,
            fallback_dim: 256,
            fallback_seed: 42,
            prompt_template: None,
            cache_dir: None,
            summarize_concurrency: 4,
            embed_concurrency: 2,
            embed_batch_size: 64,
        }
    }
}

pub struct Providers {
    pub completion: Box<dyn CompletionProvider>,
    pub embedding: Box<dyn EmbeddingProvider>,
}

impl ProvidersConfig {
    /// Remote providers only when configured and not offline.
    pub fn select(&self, offline: bool) -> Result<Providers, RunnerError> {
        let offline = offline || self.offline;
        let completion: Box<dyn CompletionProvider> = match (&self.completion, offline) {
            (Some(c), false) => Box::new(HttpCompletionProvider::new(c.clone())?),
            _ => Box::new(ExtractiveProvider),
        };
        let embedding: Box<dyn EmbeddingProvider> = match (&self.embedding, offline) {
            (Some(c), false) => Box::new(HttpEmbeddingProvider::new(c.clone())?),
            _ => Box::new(HashingEmbedder::new(self.fallback_dim, self.fallback_seed)),
        };
        Ok(Providers { completion, embedding })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("grid-out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub umap: UmapParams,
    #[serde(default)]
    pub providers: ProvidersConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl GridConfig {
    pub fn parse(text: &str) -> Result<Self, RunnerError> {
        toml::from_str(text).map_err(|e| RunnerError::Config(e.message().to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self, RunnerError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text).map_err(|e| match e {
            RunnerError::Config(m) => RunnerError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// Everything for one dataset: load, summarize, embed, grid, report.
/// Relative paths resolve against `base`.
pub fn run_experiment(config: &GridConfig, base: &Path, offline: bool) -> Result<GridResult, RunnerError> {
    let providers = config.providers.select(offline)?;
    run_experiment_with(config, base, &providers)
}

pub fn run_experiment_with(
    config: &GridConfig,
    base: &Path,
    providers: &Providers,
) -> Result<GridResult, RunnerError> {
    let mut timings = BTreeMap::new();
    let started = Instant::now();
    let reference = config.dataset.load(base)?;
    let mut spec = config.grid.clone();
    if spec.min_topic_sizes.is_empty() {
        spec.min_topic_sizes = suggested_min_topic_sizes(reference.len());
    }
    spec.validate()?;
    let out_dir = base.join(&config.output.dir);
    let cache_dir = config
        .providers
        .cache_dir
        .as_ref()
        .map_or_else(|| out_dir.join("cache"), |d| base.join(d));

    let mut corpora: BTreeMap<InputType, Corpus> = BTreeMap::new();
    for &t in &spec.input_types {
        let corpus = match t {
            InputType::Full => reference.clone(),
            InputType::Short | InputType::Long => {
                let kind = if t == InputType::Short { SummaryKind::Short } else { SummaryKind::Long };
                let template = match &config.providers.prompt_template {
                    Some(p) => PromptTemplate::from_file(&base.join(p), kind)?,
                    None => PromptTemplate::builtin(kind),
                };
                let opts = SummarizeOptions {
                    truncation_limit: config.dataset.truncation_limit,
                    concurrency_limit: config.providers.summarize_concurrency,
                    cache: Some(SummaryCache::new(&cache_dir)),
                    ..SummarizeOptions::default()
                };
                let outcome = summarize_corpus(
                    &reference,
                    providers.completion.as_ref(),
                    &template,
                    &SummaryVariant::of(kind),
                    &opts,
                )?;
                outcome.corpus
            }
        };
        corpora.insert(t, corpus);
    }
    timings.insert("summarize".to_string(), started.elapsed().as_secs_f64());

    let t_embed = Instant::now();
    let embed_opts = EmbedOptions {
        batch_size: config.providers.embed_batch_size,
        concurrency_limit: config.providers.embed_concurrency,
        ..EmbedOptions::default()
    };
    let mut embeddings = BTreeMap::new();
    for (&t, c) in &corpora {
        embeddings.insert(t, embed_corpus(c, providers.embedding.as_ref(), &embed_opts)?);
    }
    timings.insert("embed".to_string(), t_embed.elapsed().as_secs_f64());

    let inputs: BTreeMap<InputType, GridInput<'_>> = corpora
        .iter()
        .map(|(&t, c)| {
            (
                t,
                GridInput {
                    corpus: c,
                    embeddings: &embeddings[&t],
                },
            )
        })
        .collect();
    let t_grid = Instant::now();
    let result = run_grid(
        &spec,
        &config.umap,
        &reference.name,
        &reference,
        &inputs,
        providers.embedding.as_ref(),
        config.workers,
    )?;
    timings.insert("grid".to_string(), t_grid.elapsed().as_secs_f64());
    timings.insert("total".to_string(), started.elapsed().as_secs_f64());

    let manifest = Manifest {
        config_fingerprint: Some(config.fingerprint()),
        reference_corpus_hash: Some(hex::encode(reference.content_hash())),
        providers: BTreeMap::from([
            ("completion".to_string(), providers.completion.id().to_string()),
            ("embedding".to_string(), providers.embedding.id().to_string()),
        ]),
        timings_secs: timings,
        ..Manifest::default()
    };
    emit_report(&result, &out_dir, manifest)?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: InputType, d: f64, m: usize, seed: u64, div: Option<f64>, coh: Option<f64>) -> MetricsRecord {
        MetricsRecord {
            dataset: "toy".into(),
            input_type: t,
            diversity_param: d,
            min_topic_size: m,
            seed,
            n_topics: if div.is_some() { 4 } else { 0 },
            diversity: div,
            coherence_cv: coh,
            degenerate: div.is_none(),
            unknown_terms: 0,
            note: None,
        }
    }

    fn fixture_81() -> Vec<MetricsRecord> {
        let spec = GridSpec {
            min_topic_sizes: vec![10, 15, 20],
            ..GridSpec::default()
        };
        spec.runs("toy")
            .into_iter()
            .enumerate()
            .map(|(i, m)| {
                let base = match m.input_type {
                    InputType::Full => 0.90,
                    InputType::Short => 0.95,
                    InputType::Long => 0.93,
                };
                let v = base + 0.001 * (i % 7) as f64;
                rec(m.input_type, m.diversity_param, m.min_topic_size, m.seed, Some(v), Some(v / 2.0))
            })
            .collect()
    }

    #[test]
    fn canonical_run_order_and_shape() {
        let spec = GridSpec {
            min_topic_sizes: vec![10, 15, 20],
            ..GridSpec::default()
        };
        let runs = spec.runs("x");
        assert_eq!(runs.len(), 81);
        assert_eq!(runs[0].seed, 42);
        assert_eq!(runs[2].seed, 44);
        assert_eq!(runs[3].min_topic_size, 15);
        assert_eq!(runs[27].input_type, InputType::Short);
        let agg = aggregate(&fixture_81()).unwrap();
        assert_eq!(agg.cells.len(), 27);
        assert_eq!(agg.input_types.len(), 3);
    }

    #[test]
    fn cell_mean_arithmetic() {
        let rs = vec![
            rec(InputType::Full, 0.1, 10, 1, Some(0.9), Some(0.5)),
            rec(InputType::Full, 0.1, 10, 2, Some(0.95), Some(0.5)),
            rec(InputType::Full, 0.1, 10, 3, Some(1.0), Some(0.5)),
        ];
        let agg = aggregate(&rs).unwrap();
        assert!((agg.cells[0].diversity.unwrap() - 0.95).abs() < 1e-15);
        assert_eq!(agg.input_types[0].diversity, agg.cells[0].diversity);
    }

    #[test]
    fn singleton_and_degenerate_cells() {
        let agg = aggregate(&[rec(InputType::Long, 0.2, 5, 1, Some(0.7), Some(0.4))]).unwrap();
        assert_eq!(agg.cells[0].diversity, Some(0.7));
        let rs = vec![
            rec(InputType::Full, 0.1, 10, 1, None, None),
            rec(InputType::Full, 0.1, 10, 2, Some(0.8), Some(0.3)),
            rec(InputType::Full, 0.2, 10, 1, None, None),
        ];
        let agg = aggregate(&rs).unwrap();
        assert_eq!(agg.excluded_degenerate, 2);
        assert_eq!(agg.cells[0].diversity, Some(0.8));
        assert_eq!(agg.cells[1].diversity, None);
        assert_eq!(agg.input_types[0].n_undefined_cells, 1);
        assert_eq!(agg.input_types[0].diversity, Some(0.8));
        assert!(matches!(aggregate(&[]), Err(RunnerError::NoRecords)));
    }

    #[test]
    fn input_mean_is_mean_of_cell_means() {
        // unequal repeat counts separate the two definitions
        let rs = vec![
            rec(InputType::Full, 0.1, 10, 1, Some(1.0), Some(0.0)),
            rec(InputType::Full, 0.2, 10, 1, Some(0.0), Some(0.0)),
            rec(InputType::Full, 0.2, 10, 2, Some(0.0), Some(0.0)),
            rec(InputType::Full, 0.2, 10, 3, Some(0.0), Some(0.0)),
        ];
        assert_eq!(aggregate(&rs).unwrap().input_types[0].diversity, Some(0.5));
    }

    #[test]
    fn csv_roundtrip_rederives_summary() {
        let dir = tempfile::tempdir().unwrap();
        let rs = fixture_81();
        fs::write(dir.path().join("records.csv"), records_csv(&rs)).unwrap();
        let text = fs::read_to_string(dir.path().join("records.csv")).unwrap();
        assert_eq!(text.lines().count(), 82);
        assert!(text.starts_with(
            "dataset,input_type,diversity_param,min_topic_size,seed,n_topics,diversity,coherence_cv,degenerate\n"
        ));
        let back = read_records_csv(&dir.path().join("records.csv")).unwrap();
        assert_eq!(back, rs);
        let agg = regenerate_report(dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join("summary.csv")).unwrap(), summary_csv(&aggregate(&rs).unwrap()));
        assert_eq!(agg, aggregate(&rs).unwrap());
    }

    fn polyline_ys(svg: &str, input: &str) -> Vec<f64> {
        let tag = format!(r#"data-input="{input}""#);
        let line = svg.lines().find(|l| l.contains(&tag)).expect("polyline");
        let pts = line.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        pts.split(' ').map(|p| p.split(',').nth(1).unwrap().parse().unwrap()).collect()
    }

    #[test]
    fn chart_geometry_and_determinism() {
        let agg = aggregate(&fixture_81()).unwrap();
        let svg = render_chart("toy", &agg, Metric::Diversity);
        assert_eq!(svg, render_chart("toy", &agg, Metric::Diversity));
        assert_eq!(svg.matches("<polyline").count(), 3);
        let short = polyline_ys(&svg, "short");
        let full = polyline_ys(&svg, "full");
        assert_eq!(short.len(), 9);
        assert!(short.iter().zip(&full).all(|(s, f)| s < f), "short above full");
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = GridConfig::parse("[dataset]\npath = \"x.jsonl\"\n[grid]\nrepeat = 2\n").unwrap_err();
        assert!(err.to_string().contains("repeat"), "{err}");
        let err = GridConfig::parse("[dataset]\npath = \"x\"\n[umap]\nneighbours = 3\n").unwrap_err();
        assert!(err.to_string().contains("neighbours"), "{err}");
        let ok = GridConfig::parse("[dataset]\npath = \"x\"\n").unwrap();
        assert_eq!(ok.grid.repeats, 3);
        assert_eq!(ok.grid.diversity_values, vec![0.1, 0.2, 0.3]);
        assert_eq!(ok.grid.input_types, InputType::ALL.to_vec());
    }

    #[test]
    fn provider_tables_keep_their_own_defaults() {
        let cfg = GridConfig::parse(
            "[dataset]\npath = \"x\"\n[providers.completion]\nmodel = \"m\"\n[providers.embedding]\nbase_url = \"http://h\"\napi_key_env = \"\"\n",
        )
        .unwrap();
        let c = cfg.providers.completion.unwrap();
        assert_eq!((c.endpoint.path.as_str(), c.endpoint.model.as_str(), c.max_tokens), ("/v1/completions", "m", 160));
        let e = cfg.providers.embedding.unwrap();
        assert_eq!(e.endpoint.url(), "http://h/v1/embeddings");
        assert_eq!(e.endpoint.api_key_env, None);
        let err = GridConfig::parse("[dataset]\npath = \"x\"\n[providers.completion]\nmodle = \"m\"\n").unwrap_err();
        assert!(err.to_string().contains("modle"), "{err}");
    }

    #[test]
    fn spec_validation() {
        let mut s = GridSpec {
            min_topic_sizes: vec![10],
            ..GridSpec::default()
        };
        assert!(s.validate().is_ok());
        s.repeats = 0;
        assert!(s.validate().is_err());
        s.repeats = 1;
        s.diversity_values = vec![1.5];
        assert!(s.validate().is_err());
    }

    #[test]
    fn offline_selection_ignores_endpoints() {
        let cfg = GridConfig::parse(
            "[dataset]\npath = \"x\"\n[providers.completion]\nbase_url = \"http://127.0.0.1:9\"\napi_key_env = \"NOPE_NOT_SET\"\n",
        )
        .unwrap();
        let p = cfg.providers.select(true).unwrap();
        assert_eq!(p.completion.id(), "extractive");
        assert!(p.embedding.id().starts_with("hashing-"));
    }
}
