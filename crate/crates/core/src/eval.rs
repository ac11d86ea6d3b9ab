//! Topic diversity and C_V coherence.
//!
//! Coherence is always measured against the tokenized original corpus using
//! boolean sliding windows that never cross document boundaries.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{tokenize, Corpus};
use crate::topics::TopicModel;

pub const DEFAULT_WINDOW: usize = 110;
pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("no topics to evaluate")]
    NoTopics,
    #[error("window size must be at least 1")]
    WindowSize,
    #[error("reference corpus is empty")]
    EmptyReference,
    #[error("unknown input type `{0}` (expected full, short or long)")]
    InputType(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputType {
    Full,
    Short,
    Long,
}

impl InputType {
    pub const ALL: [InputType; 3] = [InputType::Full, InputType::Short, InputType::Long];

    pub fn as_str(self) -> &'static str {
        match self {
            InputType::Full => "full",
            InputType::Short => "short",
            InputType::Long => "long",
        }
    }
}

impl fmt::Display for InputType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InputType {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(InputType::Full),
            "short" => Ok(InputType::Short),
            "long" => Ok(InputType::Long),
            _ => Err(EvalError::InputType(s.to_string())),
        }
    }
}

/// Fraction of distinct terms over all keyword slots.
pub fn topic_diversity<S: AsRef<str>>(keyword_lists: &[Vec<S>]) -> Result<f64, EvalError> {
    let total: usize = keyword_lists.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(EvalError::NoTopics);
    }
    let distinct: BTreeSet<&str> = keyword_lists
        .iter()
        .flat_map(|l| l.iter().map(AsRef::as_ref))
        .collect();
    Ok(distinct.len() as f64 / total as f64)
}

/// Reference corpus as interned token streams.
#[derive(Debug, Clone)]
pub struct ReferenceIndex {
    terms: Vec<String>,
    index: HashMap<String, u32>,
    docs: Vec<Vec<u32>>,
}

impl ReferenceIndex {
    pub fn new(corpus: &Corpus) -> Result<Self, EvalError> {
        if corpus.is_empty() {
            return Err(EvalError::EmptyReference);
        }
        let mut terms = Vec::new();
        let mut index = HashMap::new();
        let docs = corpus
            .documents
            .iter()
            .map(|d| {
                tokenize(&d.text)
                    .into_iter()
                    .map(|t| {
                        *index.entry(t).or_insert_with_key(|k: &String| {
                            terms.push(k.clone());
                            (terms.len() - 1) as u32
                        })
                    })
                    .collect()
            })
            .collect();
        Ok(Self { terms, index, docs })
    }

    pub fn n_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn contains(&self, term: &str) -> bool {
        self.index.contains_key(term)
    }

    /// Window statistics restricted to `terms`; terms absent from the
    /// reference get zero counts.
    pub fn window_stats<S: AsRef<str>>(
        &self,
        terms: &[S],
        window_size: usize,
    ) -> Result<WindowStats, EvalError> {
        if window_size == 0 {
            return Err(EvalError::WindowSize);
        }
        let mut wanted: Vec<String> = terms.iter().map(|t| t.as_ref().to_string()).collect();
        wanted.sort();
        wanted.dedup();
        // reference id -> position in `wanted`
        let mut local = vec![u32::MAX; self.terms.len()];
        for (i, t) in wanted.iter().enumerate() {
            if let Some(&id) = self.index.get(t) {
                local[id as usize] = i as u32;
            }
        }
        let k = wanted.len();
        let counts = self
            .docs
            .par_iter()
            .map(|doc| count_document(doc, &local, k, window_size))
            .reduce(
                || Counts::new(k),
                |mut a, b| {
                    a.merge(&b);
                    a
                },
            );
        Ok(WindowStats::from_counts(wanted, counts, window_size))
    }

    pub fn all_terms(&self) -> &[String] {
        &self.terms
    }
}

#[derive(Debug, Clone)]
struct Counts {
    k: usize,
    n_windows: u64,
    occurrence: Vec<u64>,
    // upper triangle, row-major, i < j
    pairs: Vec<u64>,
}

impl Counts {
    fn new(k: usize) -> Self {
        Self {
            k,
            n_windows: 0,
            occurrence: vec![0; k],
            pairs: vec![0; k * k.saturating_sub(1) / 2],
        }
    }

    fn pair_slot(k: usize, i: usize, j: usize) -> usize {
        debug_assert!(i < j);
        i * (2 * k - i - 1) / 2 + (j - i - 1)
    }

    fn add_window_set(&mut self, present: &[u32], mult: u64) {
        for (x, &i) in present.iter().enumerate() {
            self.occurrence[i as usize] += mult;
            for &j in &present[x + 1..] {
                let (a, b) = if i < j { (i, j) } else { (j, i) };
                self.pairs[Self::pair_slot(self.k, a as usize, b as usize)] += mult;
            }
        }
    }

    fn merge(&mut self, other: &Counts) {
        self.n_windows += other.n_windows;
        for (a, b) in self.occurrence.iter_mut().zip(&other.occurrence) {
            *a += b;
        }
        for (a, b) in self.pairs.iter_mut().zip(&other.pairs) {
            *a += b;
        }
    }
}

/// Slides the window one token at a time; consecutive windows with the same
/// set of wanted terms are counted together.
fn count_document(doc: &[u32], local: &[u32], k: usize, window: usize) -> Counts {
    let mut counts = Counts::new(k);
    let n_windows = if doc.len() <= window {
        1
    } else {
        doc.len() - window + 1
    };
    counts.n_windows = n_windows as u64;
    if k == 0 {
        return counts;
    }
    let mapped: Vec<u32> = doc.iter().map(|&t| local[t as usize]).collect();
    let width = window.min(doc.len());
    let mut in_window = vec![0u32; k];
    let mut present: Vec<u32> = Vec::new();
    for &t in mapped.iter().take(width).filter(|&&t| t != u32::MAX) {
        if in_window[t as usize] == 0 {
            present.push(t);
        }
        in_window[t as usize] += 1;
    }
    let mut run = 1u64;
    for start in 1..n_windows {
        let out = mapped[start - 1];
        let inc = mapped[start + width - 1];
        if out == inc {
            run += 1;
            continue;
        }
        let leaves = out != u32::MAX && in_window[out as usize] == 1;
        let enters = inc != u32::MAX && in_window[inc as usize] == 0;
        if leaves || enters {
            counts.add_window_set(&present, run);
            run = 0;
        }
        if out != u32::MAX {
            in_window[out as usize] -= 1;
            if leaves {
                let pos = present.iter().position(|&t| t == out).expect("present term");
                present.swap_remove(pos);
            }
        }
        if inc != u32::MAX {
            in_window[inc as usize] += 1;
            if enters {
                present.push(inc);
            }
        }
        run += 1;
    }
    counts.add_window_set(&present, run);
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowStats {
    pub window_size: usize,
    pub n_windows: u64,
    pub epsilon: f64,
    terms: Vec<String>,
    occurrence: Vec<u64>,
    pairs: Vec<u64>,
}

impl WindowStats {
    fn from_counts(terms: Vec<String>, counts: Counts, window_size: usize) -> Self {
        Self {
            window_size,
            n_windows: counts.n_windows,
            epsilon: DEFAULT_EPSILON,
            terms,
            occurrence: counts.occurrence,
            pairs: counts.pairs,
        }
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    fn slot(&self, term: &str) -> Option<usize> {
        self.terms.binary_search_by(|t| t.as_str().cmp(term)).ok()
    }

    pub fn occurrence(&self, term: &str) -> u64 {
        self.slot(term).map_or(0, |i| self.occurrence[i])
    }

    /// Number of windows containing both terms; for `a == b` this is the
    /// occurrence count.
    pub fn cooccurrence(&self, a: &str, b: &str) -> u64 {
        match (self.slot(a), self.slot(b)) {
            (Some(i), Some(j)) if i == j => self.occurrence[i],
            (Some(i), Some(j)) => {
                let (i, j) = (i.min(j), i.max(j));
                self.pairs[Counts::pair_slot(self.terms.len(), i, j)]
            }
            _ => 0,
        }
    }

    pub fn pair(&self, a: &str, b: &str) -> PairStats {
        PairStats {
            n_windows: self.n_windows,
            a: self.occurrence(a),
            b: self.occurrence(b),
            ab: self.cooccurrence(a, b),
        }
    }

    pub fn npmi(&self, a: &str, b: &str) -> f64 {
        npmi(&self.pair(a, b), self.epsilon)
    }
}

/// Window counts for one term pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairStats {
    pub n_windows: u64,
    pub a: u64,
    pub b: u64,
    pub ab: u64,
}

impl PairStats {
    pub fn probabilities(&self) -> (f64, f64, f64) {
        let n = self.n_windows as f64;
        (self.a as f64 / n, self.b as f64 / n, self.ab as f64 / n)
    }
}

pub fn npmi(pair: &PairStats, epsilon: f64) -> f64 {
    let (pa, pb, pab) = pair.probabilities();
    npmi_from_probabilities(pa, pb, pab, epsilon)
}

/// `ln((p_ab + eps) / (p_a p_b)) / -ln(p_ab + eps)`. A never-occurring term
/// gives -1. Terms present in every window give 1, where the formula itself
/// would divide by ~0.
pub fn npmi_from_probabilities(pa: f64, pb: f64, pab: f64, epsilon: f64) -> f64 {
    if pa <= 0.0 || pb <= 0.0 {
        return -1.0;
    }
    if pab >= 1.0 {
        return 1.0;
    }
    let joint = pab + epsilon;
    (joint / (pa * pb)).ln() / -joint.ln()
}

pub fn build_window_stats(reference: &Corpus, window_size: usize) -> Result<WindowStats, EvalError> {
    let index = ReferenceIndex::new(reference)?;
    let terms = index.all_terms().to_vec();
    index.window_stats(&terms, window_size)
}

fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        dot / (nu * nv)
    }
}

/// Coherence of one keyword set.
pub fn topic_cv<S: AsRef<str>>(words: &[S], stats: &WindowStats) -> f64 {
    if words.is_empty() {
        return 0.0;
    }
    let vectors: Vec<Vec<f64>> = words
        .iter()
        .map(|w| words.iter().map(|v| stats.npmi(w.as_ref(), v.as_ref())).collect())
        .collect();
    let mut set = vec![0.0; words.len()];
    for v in &vectors {
        for (s, x) in set.iter_mut().zip(v) {
            *s += x;
        }
    }
    vectors.iter().map(|v| cosine(v, &set)).sum::<f64>() / words.len() as f64
}

pub fn cv_coherence<S: AsRef<str>>(keyword_lists: &[Vec<S>], stats: &WindowStats) -> Result<f64, EvalError> {
    if keyword_lists.is_empty() {
        return Err(EvalError::NoTopics);
    }
    let total: f64 = keyword_lists.iter().map(|l| topic_cv(l, stats)).sum();
    Ok(total / keyword_lists.len() as f64)
}

/// One evaluated run. Serializes to the fixed nine-column CSV layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub dataset: String,
    pub input_type: InputType,
    pub diversity_param: f64,
    pub min_topic_size: usize,
    pub seed: u64,
    pub n_topics: usize,
    pub diversity: Option<f64>,
    pub coherence_cv: Option<f64>,
    pub degenerate: bool,
    #[serde(skip)]
    pub unknown_terms: usize,
    #[serde(skip)]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta {
    pub dataset: String,
    pub input_type: InputType,
    pub diversity_param: f64,
    pub min_topic_size: usize,
    pub seed: u64,
}

impl MetricsRecord {
    pub fn degenerate(meta: &RunMeta, note: Option<String>) -> Self {
        Self {
            dataset: meta.dataset.clone(),
            input_type: meta.input_type,
            diversity_param: meta.diversity_param,
            min_topic_size: meta.min_topic_size,
            seed: meta.seed,
            n_topics: 0,
            diversity: None,
            coherence_cv: None,
            degenerate: true,
            unknown_terms: 0,
            note,
        }
    }
}

/// Scores a model from stats that cover its keywords.
pub fn evaluate(
    model: &TopicModel,
    reference: &ReferenceIndex,
    stats: &WindowStats,
    meta: &RunMeta,
) -> MetricsRecord {
    if model.is_degenerate() {
        return MetricsRecord::degenerate(meta, None);
    }
    let lists = model.keyword_lists();
    let unknown = lists
        .iter()
        .flatten()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|t| !reference.contains(t))
        .count();
    MetricsRecord {
        dataset: meta.dataset.clone(),
        input_type: meta.input_type,
        diversity_param: meta.diversity_param,
        min_topic_size: meta.min_topic_size,
        seed: meta.seed,
        n_topics: model.n_topics,
        diversity: Some(topic_diversity(&lists).expect("non-degenerate model has keywords")),
        coherence_cv: Some(cv_coherence(&lists, stats).expect("non-degenerate model has topics")),
        degenerate: false,
        unknown_terms: unknown,
        note: None,
    }
}

/// Reference index plus window parameters, reused across runs.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub reference: ReferenceIndex,
    pub window_size: usize,
}

impl Evaluator {
    pub fn new(reference: &Corpus) -> Result<Self, EvalError> {
        Self::with_window(reference, DEFAULT_WINDOW)
    }

    pub fn with_window(reference: &Corpus, window_size: usize) -> Result<Self, EvalError> {
        if window_size == 0 {
            return Err(EvalError::WindowSize);
        }
        Ok(Self {
            reference: ReferenceIndex::new(reference)?,
            window_size,
        })
    }

    pub fn stats_for(&self, model: &TopicModel) -> WindowStats {
        let terms: Vec<String> = model.keyword_lists().into_iter().flatten().collect();
        self.reference
            .window_stats(&terms, self.window_size)
            .expect("window size validated")
    }

    pub fn evaluate(&self, model: &TopicModel, meta: &RunMeta) -> MetricsRecord {
        let stats = self.stats_for(model);
        evaluate(model, &self.reference, &stats, meta)
    }
}
