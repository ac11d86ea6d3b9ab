//! Document collections: loading, tokenization, truncation and vocabularies.
//!
//! Word counts are whitespace-token counts. Terms are produced by
//! [`tokenize`], which is the single tokenization rule shared by c-TF-IDF and
//! the coherence windows.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Default word limit applied before prompting a completion model.
pub const DEFAULT_TRUNCATION_LIMIT: usize = 2_800;

const STOPWORDS_EN: &str = include_str!("../data/stopwords_en.txt");

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus source not found: {0}")]
    MissingPath(PathBuf),
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record {record} in {path}: {reason}")]
    Malformed {
        path: PathBuf,
        /// 1-based line (JSONL) or data-row (CSV) number.
        record: usize,
        reason: String,
    },
    #[error("duplicate document id `{0}`")]
    DuplicateId(String),
    #[error("corpus `{0}` is empty")]
    Empty(String),
    #[error("vocabulary is empty: no document produced any term")]
    EmptyVocabulary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceFormat {
    Jsonl,
    Csv,
    DirOfTextFiles,
}

impl std::str::FromStr for SourceFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(Self::Jsonl),
            "csv" => Ok(Self::Csv),
            "dir" | "dir_of_text_files" => Ok(Self::DirOfTextFiles),
            other => Err(format!("unknown corpus format `{other}` (expected jsonl, csv or dir)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub word_count: usize,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: Option<String>) -> Self {
        let text = text.into();
        let word_count = word_count(&text);
        Self {
            id: id.into(),
            text,
            label,
            word_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub documents: Vec<Document>,
    pub source_format: SourceFormat,
}

impl Corpus {
    /// Builds a corpus, enforcing non-emptiness and id uniqueness.
    pub fn new(
        name: impl Into<String>,
        documents: Vec<Document>,
        source_format: SourceFormat,
    ) -> Result<Self, CorpusError> {
        let name = name.into();
        if documents.is_empty() {
            return Err(CorpusError::Empty(name));
        }
        let mut seen = HashSet::with_capacity(documents.len());
        for doc in &documents {
            if !seen.insert(doc.id.as_str()) {
                return Err(CorpusError::DuplicateId(doc.id.clone()));
            }
        }
        Ok(Self {
            name,
            documents,
            source_format,
        })
    }

    /// Convenience constructor for in-memory texts; ids are `<name>-<index>`.
    pub fn from_texts<S: AsRef<str>>(name: &str, texts: &[S]) -> Result<Self, CorpusError> {
        let docs = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Document::new(format!("{name}-{i}"), t.as_ref(), None))
            .collect();
        Self::new(name, docs, SourceFormat::Jsonl)
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.documents.iter().map(|d| d.text.as_str())
    }

    pub fn labels(&self) -> BTreeMap<&str, usize> {
        let mut out = BTreeMap::new();
        for label in self.documents.iter().filter_map(|d| d.label.as_deref()) {
            *out.entry(label).or_insert(0) += 1;
        }
        out
    }

    /// SHA-256 over ids and texts in order.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for doc in &self.documents {
            hasher.update(doc.id.as_bytes());
            hasher.update([0u8]);
            hasher.update(doc.text.as_bytes());
            hasher.update([0u8]);
        }
        hasher.finalize().into()
    }

    /// Writes the corpus as JSONL with `id`, `text` and `label` keys.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let io_err = |source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = String::new();
        for doc in &self.documents {
            let mut obj = serde_json::Map::new();
            obj.insert("id".into(), doc.id.clone().into());
            obj.insert("text".into(), doc.text.clone().into());
            if let Some(label) = &doc.label {
                obj.insert("label".into(), label.clone().into());
            }
            out.push_str(&serde_json::Value::Object(obj).to_string());
            out.push('\n');
        }
        std::fs::write(path, out).map_err(io_err)
    }
}

/// Field mapping for [`load_corpus`].
#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub format: SourceFormat,
    pub text_field: String,
    pub label_field: Option<String>,
    /// Corpus name; defaults to the file stem of the source path.
    pub name: Option<String>,
}

impl LoadOptions {
    pub fn new(format: SourceFormat) -> Self {
        Self {
            format,
            text_field: "text".to_string(),
            label_field: None,
            name: None,
        }
    }

    pub fn with_label(mut self, field: impl Into<String>) -> Self {
        self.label_field = Some(field.into());
        self
    }

    pub fn with_text_field(mut self, field: impl Into<String>) -> Self {
        self.text_field = field.into();
        self
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }
}

pub fn load_corpus(path: &Path, opts: &LoadOptions) -> Result<Corpus, CorpusError> {
    if !path.exists() {
        return Err(CorpusError::MissingPath(path.to_path_buf()));
    }
    let name = opts.name.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "corpus".to_string())
    });
    let docs = match opts.format {
        SourceFormat::Jsonl => load_jsonl(path, &name, opts)?,
        SourceFormat::Csv => load_csv(path, &name, opts)?,
        SourceFormat::DirOfTextFiles => load_dir(path)?,
    };
    Corpus::new(name, docs, opts.format)
}

fn load_jsonl(path: &Path, name: &str, opts: &LoadOptions) -> Result<Vec<Document>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let malformed = |record, reason: String| CorpusError::Malformed {
        path: path.to_path_buf(),
        record,
        reason,
    };
    let mut docs = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| malformed(lineno + 1, e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| malformed(lineno + 1, "expected a JSON object".into()))?;
        let text = obj
            .get(&opts.text_field)
            .and_then(|v| v.as_str())
            .ok_or_else(|| {
                malformed(lineno + 1, format!("missing string field `{}`", opts.text_field))
            })?;
        let label = match &opts.label_field {
            Some(field) => obj.get(field).map(json_scalar_to_string),
            None => None,
        };
        let id = obj
            .get("id")
            .map(json_scalar_to_string)
            .unwrap_or_else(|| format!("{name}-{}", docs.len()));
        docs.push(Document::new(id, text, label));
    }
    Ok(docs)
}

fn json_scalar_to_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn load_csv(path: &Path, name: &str, opts: &LoadOptions) -> Result<Vec<Document>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CorpusError::Malformed {
            path: path.to_path_buf(),
            record: 0,
            reason: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::Malformed {
            path: path.to_path_buf(),
            record: 0,
            reason: format!("unreadable header: {e}"),
        })?
        .clone();
    let position = |field: &str| headers.iter().position(|h| h == field);
    let text_col = position(&opts.text_field).ok_or_else(|| CorpusError::Malformed {
        path: path.to_path_buf(),
        record: 0,
        reason: format!("header has no `{}` column", opts.text_field),
    })?;
    let label_col = match &opts.label_field {
        Some(field) => Some(position(field).ok_or_else(|| CorpusError::Malformed {
            path: path.to_path_buf(),
            record: 0,
            reason: format!("header has no `{field}` column"),
        })?),
        None => None,
    };
    let id_col = position("id");

    let mut docs = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| CorpusError::Malformed {
            path: path.to_path_buf(),
            record: i + 1,
            reason: e.to_string(),
        })?;
        let field = |col: usize| {
            row.get(col).ok_or_else(|| CorpusError::Malformed {
                path: path.to_path_buf(),
                record: i + 1,
                reason: format!("missing column {col}"),
            })
        };
        let text = field(text_col)?;
        let label = label_col.map(field).transpose()?.map(str::to_string);
        let id = match id_col {
            Some(col) => field(col)?.to_string(),
            None => format!("{name}-{i}"),
        };
        docs.push(Document::new(id, text, label));
    }
    Ok(docs)
}

fn load_dir(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let mut docs = Vec::new();
    for entry in walkdir::WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(|e| CorpusError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let file = entry.path();
        let bytes = std::fs::read(file).map_err(|source| CorpusError::Io {
            path: file.to_path_buf(),
            source,
        })?;
        // Newsgroup dumps are frequently latin-1; keep them loadable.
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let id = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let label = file
            .parent()
            .filter(|p| *p != path)
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned());
        docs.push(Document::new(id, text, label));
    }
    Ok(docs)
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Keeps the first `max_words` whitespace tokens, re-joined by single spaces.
///
/// Documents already under the limit are returned unchanged.
pub fn truncate_words(doc: &Document, max_words: usize) -> Document {
    let max_words = max_words.max(1);
    if doc.word_count <= max_words {
        return doc.clone();
    }
    let text = doc
        .text
        .split_whitespace()
        .take(max_words)
        .collect::<Vec<_>>()
        .join(" ");
    Document {
        id: doc.id.clone(),
        label: doc.label.clone(),
        word_count: max_words,
        text,
    }
}

pub fn stopwords() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| STOPWORDS_EN.lines().map(str::trim).filter(|w| !w.is_empty()).collect())
}

/// Lowercases, splits on non-alphanumeric characters and drops short, numeric
/// and stopword tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let stop = stopwords();
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|tok| tok.chars().nth(1).is_some())
        .filter(|tok| !tok.chars().all(|c| c.is_numeric()))
        .map(str::to_lowercase)
        .filter(|tok| !stop.contains(tok.as_str()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    terms: Vec<String>,
    doc_freq: Vec<u64>,
    total_freq: Vec<u64>,
    #[serde(skip)]
    term_index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_parts(terms: Vec<String>, doc_freq: Vec<u64>, total_freq: Vec<u64>) -> Self {
        let term_index = terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            terms,
            doc_freq,
            total_freq,
            term_index,
        }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn term(&self, index: usize) -> &str {
        &self.terms[index]
    }

    pub fn index_of(&self, term: &str) -> Option<usize> {
        self.term_index.get(term).copied()
    }

    pub fn contains(&self, term: &str) -> bool {
        self.term_index.contains_key(term)
    }

    pub fn doc_freq(&self, term: &str) -> u64 {
        self.index_of(term).map_or(0, |i| self.doc_freq[i])
    }

    pub fn total_freq(&self, term: &str) -> u64 {
        self.index_of(term).map_or(0, |i| self.total_freq[i])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("vocabulary serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        let raw: Self = serde_json::from_str(s)?;
        Ok(Self::from_parts(raw.terms, raw.doc_freq, raw.total_freq))
    }
}

pub fn build_vocabulary(corpus: &Corpus) -> Result<Vocabulary, CorpusError> {
    let mut counts: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for doc in &corpus.documents {
        let tokens = tokenize(&doc.text);
        let mut seen = HashSet::new();
        for tok in tokens {
            let first = seen.insert(tok.clone());
            let entry = counts.entry(tok).or_insert((0, 0));
            entry.1 += 1;
            if first {
                entry.0 += 1;
            }
        }
    }
    if counts.is_empty() {
        return Err(CorpusError::EmptyVocabulary);
    }
    let mut terms = Vec::with_capacity(counts.len());
    let mut doc_freq = Vec::with_capacity(counts.len());
    let mut total_freq = Vec::with_capacity(counts.len());
    for (term, (df, tf)) in counts {
        terms.push(term);
        doc_freq.push(df);
        total_freq.push(tf);
    }
    Ok(Vocabulary::from_parts(terms, doc_freq, total_freq))
}
