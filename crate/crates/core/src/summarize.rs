//! Few-shot persona prompting for length-controlled summaries, with a
//! content-addressed on-disk cache.
//!
//! A summary is keyed by `(provider_id, prompt_hash)`, where the hash covers
//! the full prompt text. Changing the template, the exemplars, the variant or
//! the truncation limit therefore yields a new key.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{truncate_words, word_count, Corpus, Document, DEFAULT_TRUNCATION_LIMIT};
use crate::provider::{path_safe, HttpEndpoint, ProviderError, RetryPolicy};

const BUILTIN_TEMPLATE: &str = include_str!("../data/prompt_template.json");

/// Tolerated share of failed documents before `summarize_corpus` aborts.
pub const MAX_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum SummarizeError {
    #[error("document `{0}` has no text to summarize")]
    EmptyDocument(String),
    #[error("provider failed after {attempts} attempts: {source}")]
    Provider {
        attempts: u32,
        #[source]
        source: ProviderError,
    },
    #[error("provider returned an empty completion twice for document `{0}`")]
    EmptyCompletion(String),
    #[error("invalid prompt template: {0}")]
    Template(String),
    #[error("summary cache i/o at {path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{failed} of {total} documents failed to summarize (first: {first})")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: String,
    },
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SummaryKind {
    Short,
    Long,
}

impl fmt::Display for SummaryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Short => "short",
            Self::Long => "long",
        })
    }
}

impl std::str::FromStr for SummaryKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "short" => Ok(Self::Short),
            "long" => Ok(Self::Long),
            other => Err(format!("unknown summary variant `{other}` (expected short or long)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryVariant {
    pub kind: SummaryKind,
    pub min_words: usize,
    pub max_words: usize,
}

impl SummaryVariant {
    pub const SHORT: Self = Self {
        kind: SummaryKind::Short,
        min_words: 20,
        max_words: 30,
    };
    pub const LONG: Self = Self {
        kind: SummaryKind::Long,
        min_words: 60,
        max_words: 80,
    };

    pub fn of(kind: SummaryKind) -> Self {
        match kind {
            SummaryKind::Short => Self::SHORT,
            SummaryKind::Long => Self::LONG,
        }
    }

    pub fn range_label(&self) -> String {
        format!("{}-{}", self.min_words, self.max_words)
    }

    pub fn contains(&self, words: usize) -> bool {
        (self.min_words..=self.max_words).contains(&words)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub document: String,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub persona_instruction: String,
    /// Uses `{min}` and `{max}` placeholders for the variant's word range.
    pub length_instruction: String,
    pub exemplars: [Exemplar; 2],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    persona_instruction: String,
    length_instruction: String,
    exemplars: Vec<ExemplarFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExemplarFile {
    document: String,
    short_summary: String,
    long_summary: String,
}

impl PromptTemplate {
    /// Built-in neutral news-style exemplars; replace them via [`Self::from_file`].
    pub fn builtin(kind: SummaryKind) -> Self {
        Self::parse(BUILTIN_TEMPLATE, kind).expect("built-in template is valid")
    }

    /// Loads a template file holding a persona, a length instruction and two
    /// exemplar documents, each with a short and a long summary.
    pub fn from_file(path: &Path, kind: SummaryKind) -> Result<Self, SummarizeError> {
        let raw = std::fs::read_to_string(path).map_err(|source| SummarizeError::Cache {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&raw, kind)
    }

    pub fn parse(raw: &str, kind: SummaryKind) -> Result<Self, SummarizeError> {
        let file: TemplateFile =
            serde_json::from_str(raw).map_err(|e| SummarizeError::Template(e.to_string()))?;
        let [a, b]: [ExemplarFile; 2] = file.exemplars.try_into().map_err(|v: Vec<_>| {
            SummarizeError::Template(format!("expected exactly 2 exemplars, found {}", v.len()))
        })?;
        let pick = |e: ExemplarFile| Exemplar {
            document: e.document,
            summary: match kind {
                SummaryKind::Short => e.short_summary,
                SummaryKind::Long => e.long_summary,
            },
        };
        let template = Self {
            persona_instruction: file.persona_instruction,
            length_instruction: file.length_instruction,
            exemplars: [pick(a), pick(b)],
        };
        template.validate()?;
        Ok(template)
    }

    pub fn validate(&self) -> Result<(), SummarizeError> {
        if self.persona_instruction.trim().is_empty() {
            return Err(SummarizeError::Template("persona instruction is empty".into()));
        }
        if !self.persona_instruction.to_lowercase().contains("summarization expert") {
            return Err(SummarizeError::Template(
                "persona instruction must cast the model as a summarization expert".into(),
            ));
        }
        Ok(())
    }

    fn length_line(&self, variant: &SummaryVariant) -> String {
        self.length_instruction
            .replace("{min}", &variant.min_words.to_string())
            .replace("{max}", &variant.max_words.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub doc_id: String,
    pub variant: SummaryKind,
    pub text: String,
    pub word_count: usize,
    pub provider_id: String,
    pub prompt_hash: String,
    pub in_length_range: bool,
}

/// Everything a provider may need: HTTP providers send `prompt`, the offline
/// extractive provider works from `document` directly.
#[derive(Debug, Clone, Copy)]
pub struct CompletionRequest<'a> {
    pub prompt: &'a str,
    pub document: &'a str,
    pub variant: SummaryVariant,
}

pub trait CompletionProvider: Send + Sync {
    /// Stable identifier; also the cache namespace.
    fn id(&self) -> &str;

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ProviderError>;
}

/// Deterministic offline provider backed by [`extractive_fallback`].
#[derive(Debug, Default, Clone, Copy)]
pub struct ExtractiveProvider;

impl CompletionProvider for ExtractiveProvider {
    fn id(&self) -> &str {
        "extractive"
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ProviderError> {
        Ok(extractive_fallback(request.document, &request.variant))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "CompletionConfigInput")]
pub struct HttpCompletionConfig {
    #[serde(flatten)]
    pub endpoint: HttpEndpoint,
    pub temperature: f64,
    pub max_tokens: u32,
    /// JSON pointer to the completion text in the response body.
    pub response_pointer: String,
}

impl Default for HttpCompletionConfig {
    fn default() -> Self {
        Self {
            endpoint: HttpEndpoint::default(),
            temperature: 0.0,
            max_tokens: 160,
            response_pointer: "/choices/0/text".into(),
        }
    }
}

crate::provider::endpoint_config_input!(CompletionConfigInput {
    temperature: f64,
    max_tokens: u32,
    response_pointer: String,
});

impl From<CompletionConfigInput> for HttpCompletionConfig {
    fn from(mut raw: CompletionConfigInput) -> Self {
        let d = Self::default();
        Self {
            endpoint: raw.endpoint_over(d.endpoint),
            temperature: raw.temperature.unwrap_or(d.temperature),
            max_tokens: raw.max_tokens.unwrap_or(d.max_tokens),
            response_pointer: raw.response_pointer.unwrap_or(d.response_pointer),
        }
    }
}

/// Completion-endpoint client: posts `{model, prompt, temperature, max_tokens}`.
pub struct HttpCompletionProvider {
    config: HttpCompletionConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
    id: String,
}

impl HttpCompletionProvider {
    pub fn new(config: HttpCompletionConfig) -> Result<Self, ProviderError> {
        let api_key = config.endpoint.api_key()?;
        let id = format!("http-{}", path_safe(&config.endpoint.model));
        Ok(Self {
            agent: config.endpoint.agent(),
            config,
            api_key,
            id,
        })
    }
}

impl CompletionProvider for HttpCompletionProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ProviderError> {
        let body = serde_json::json!({
            "model": self.config.endpoint.model,
            "prompt": request.prompt,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        });
        let resp = self
            .config
            .endpoint
            .post_json(&self.agent, self.api_key.as_deref(), body)?;
        resp.pointer(&self.config.response_pointer)
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| {
                ProviderError::BadResponse(format!(
                    "no string at `{}` in response",
                    self.config.response_pointer
                ))
            })
    }
}

pub fn build_prompt(
    doc: &Document,
    template: &PromptTemplate,
    variant: &SummaryVariant,
) -> Result<String, SummarizeError> {
    if doc.text.trim().is_empty() {
        return Err(SummarizeError::EmptyDocument(doc.id.clone()));
    }
    let mut prompt = String::with_capacity(doc.text.len() + 2048);
    prompt.push_str(template.persona_instruction.trim());
    prompt.push('\n');
    prompt.push_str(template.length_line(variant).trim());
    prompt.push_str("\n\n");
    for ex in &template.exemplars {
        prompt.push_str("Document: ");
        prompt.push_str(ex.document.trim());
        prompt.push_str("\nSummary: ");
        prompt.push_str(ex.summary.trim());
        prompt.push_str("\n\n");
    }
    prompt.push_str("Document: ");
    prompt.push_str(doc.text.trim());
    prompt.push_str("\nSummary:");
    Ok(prompt)
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Leading sentences that fit within `max_words`, or the first `max_words`
/// words when even the first sentence is too long.
pub fn extractive_fallback(doc_text: &str, variant: &SummaryVariant) -> String {
    let max = variant.max_words;
    let mut picked: Vec<String> = Vec::new();
    let mut used = 0;
    for sentence in split_sentences(doc_text) {
        let words: Vec<&str> = sentence.split_whitespace().collect();
        if words.is_empty() {
            continue;
        }
        if used + words.len() > max {
            if picked.is_empty() {
                return words[..max].join(" ");
            }
            break;
        }
        used += words.len();
        picked.push(words.join(" "));
    }
    picked.join(" ")
}

fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if matches!(c, '.' | '!' | '?') {
            let end = i + c.len_utf8();
            out.push(&text[start..end]);
            start = end;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

fn clean_completion(raw: &str) -> String {
    let trimmed = raw.trim();
    let stripped = match trimmed.get(..8) {
        Some(head) if head.eq_ignore_ascii_case("summary:") => &trimmed[8..],
        _ => trimmed,
    };
    stripped.trim().to_string()
}

/// Content-addressed store: `<dir>/<provider_id>/<prompt_hash>.json`.
#[derive(Debug, Clone)]
pub struct SummaryCache {
    dir: PathBuf,
}

impl SummaryCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, provider_id: &str, prompt_hash: &str) -> PathBuf {
        self.dir
            .join(path_safe(provider_id))
            .join(format!("{prompt_hash}.json"))
    }

    pub fn get(&self, provider_id: &str, prompt_hash: &str) -> Option<SummaryRecord> {
        let raw = std::fs::read(self.path_for(provider_id, prompt_hash)).ok()?;
        serde_json::from_slice(&raw).ok()
    }

    /// Atomic write via a temp file renamed into place.
    pub fn put(&self, record: &SummaryRecord) -> Result<(), SummarizeError> {
        let path = self.path_for(&record.provider_id, &record.prompt_hash);
        let parent = path.parent().expect("cache path has a parent");
        let io_err = |source| SummarizeError::Cache {
            path: path.clone(),
            source,
        };
        std::fs::create_dir_all(parent).map_err(io_err)?;
        let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(io_err)?;
        let body = serde_json::to_vec_pretty(record).expect("record serializes");
        tmp.write_all(&body).map_err(io_err)?;
        tmp.persist(&path).map_err(|e| io_err(e.error))?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SummarizeOptions {
    pub truncation_limit: usize,
    pub retry: RetryPolicy,
    pub concurrency_limit: usize,
    pub cache: Option<SummaryCache>,
}

impl Default for SummarizeOptions {
    fn default() -> Self {
        Self {
            truncation_limit: DEFAULT_TRUNCATION_LIMIT,
            retry: RetryPolicy::default(),
            concurrency_limit: 4,
            cache: None,
        }
    }
}

struct PreparedPrompt {
    truncated: Document,
    prompt: String,
    hash: String,
}

fn prepare(
    doc: &Document,
    template: &PromptTemplate,
    variant: &SummaryVariant,
    truncation_limit: usize,
) -> Result<PreparedPrompt, SummarizeError> {
    let truncated = truncate_words(doc, truncation_limit);
    let prompt = build_prompt(&truncated, template, variant)?;
    let hash = prompt_hash(&prompt);
    Ok(PreparedPrompt {
        truncated,
        prompt,
        hash,
    })
}

fn generate(
    prepared: &PreparedPrompt,
    provider: &dyn CompletionProvider,
    variant: &SummaryVariant,
    opts: &SummarizeOptions,
) -> Result<SummaryRecord, SummarizeError> {
    let doc_id = &prepared.truncated.id;
    if let Some(cache) = &opts.cache {
        if let Some(mut hit) = cache.get(provider.id(), &prepared.hash) {
            hit.doc_id = doc_id.clone();
            return Ok(hit);
        }
    }
    let request = CompletionRequest {
        prompt: &prepared.prompt,
        document: &prepared.truncated.text,
        variant: *variant,
    };
    let mut text = String::new();
    for _ in 0..2 {
        let raw = opts
            .retry
            .run(|| provider.complete(&request))
            .map_err(|(attempts, source)| SummarizeError::Provider { attempts, source })?;
        text = clean_completion(&raw);
        if !text.is_empty() {
            break;
        }
    }
    if text.is_empty() {
        return Err(SummarizeError::EmptyCompletion(doc_id.clone()));
    }
    let word_count = word_count(&text);
    let record = SummaryRecord {
        doc_id: doc_id.clone(),
        variant: variant.kind,
        in_length_range: variant.contains(word_count),
        word_count,
        text,
        provider_id: provider.id().to_string(),
        prompt_hash: prepared.hash.clone(),
    };
    if let Some(cache) = &opts.cache {
        cache.put(&record)?;
    }
    Ok(record)
}

pub fn summarize_document(
    doc: &Document,
    provider: &dyn CompletionProvider,
    template: &PromptTemplate,
    variant: &SummaryVariant,
    opts: &SummarizeOptions,
) -> Result<SummaryRecord, SummarizeError> {
    let prepared = prepare(doc, template, variant, opts.truncation_limit)?;
    generate(&prepared, provider, variant, opts)
}

#[derive(Debug, Clone)]
pub struct SummaryOutcome {
    /// One entry per source document; `None` where summarization failed.
    pub records: Vec<Option<SummaryRecord>>,
    /// Source ids and labels with summary texts (empty text for failures).
    pub corpus: Corpus,
    pub failures: Vec<(String, String)>,
}

impl SummaryOutcome {
    pub fn out_of_range(&self) -> usize {
        self.records
            .iter()
            .flatten()
            .filter(|r| !r.in_length_range)
            .count()
    }
}

/// Summarizes every document with bounded parallelism.
///
/// Documents whose prompts are identical share one provider call.
pub fn summarize_corpus(
    corpus: &Corpus,
    provider: &dyn CompletionProvider,
    template: &PromptTemplate,
    variant: &SummaryVariant,
    opts: &SummarizeOptions,
) -> Result<SummaryOutcome, SummarizeError> {
    let prepared: Vec<Result<PreparedPrompt, SummarizeError>> = corpus
        .documents
        .iter()
        .map(|d| prepare(d, template, variant, opts.truncation_limit))
        .collect();

    let mut first_by_hash: HashMap<&str, usize> = HashMap::new();
    let mut unique = Vec::new();
    for (i, p) in prepared.iter().enumerate() {
        if let Ok(p) = p {
            if !first_by_hash.contains_key(p.hash.as_str()) {
                first_by_hash.insert(&p.hash, i);
                unique.push(i);
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.concurrency_limit.max(1))
        .build()
        .expect("thread pool");
    let generated: Vec<Result<SummaryRecord, String>> = pool.install(|| {
        unique
            .par_iter()
            .map(|&i| {
                let p = prepared[i].as_ref().expect("only prepared prompts are unique");
                generate(p, provider, variant, opts).map_err(|e| e.to_string())
            })
            .collect()
    });
    let by_hash: HashMap<&str, &Result<SummaryRecord, String>> = unique
        .iter()
        .zip(&generated)
        .map(|(&i, r)| (prepared[i].as_ref().unwrap().hash.as_str(), r))
        .collect();

    let mut records = Vec::with_capacity(corpus.len());
    let mut failures = Vec::new();
    let mut docs = Vec::with_capacity(corpus.len());
    for (doc, p) in corpus.documents.iter().zip(&prepared) {
        let result = match p {
            Ok(p) => by_hash[p.hash.as_str()].clone(),
            Err(e) => Err(e.to_string()),
        };
        match result {
            Ok(mut rec) => {
                rec.doc_id = doc.id.clone();
                docs.push(Document::new(&doc.id, &rec.text, doc.label.clone()));
                records.push(Some(rec));
            }
            Err(msg) => {
                failures.push((doc.id.clone(), msg));
                docs.push(Document::new(&doc.id, "", doc.label.clone()));
                records.push(None);
            }
        }
    }

    if failures.len() as f64 > MAX_FAILURE_RATE * corpus.len() as f64 {
        return Err(SummarizeError::TooManyFailures {
            failed: failures.len(),
            total: corpus.len(),
            first: format!("{}: {}", failures[0].0, failures[0].1),
        });
    }
    let derived = Corpus::new(
        format!("{}-{}", corpus.name, variant.kind),
        docs,
        corpus.source_format,
    )?;
    Ok(SummaryOutcome {
        records,
        corpus: derived,
        failures,
    })
}
