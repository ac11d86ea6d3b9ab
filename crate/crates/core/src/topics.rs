//! Topic representations: class-based TF-IDF over clusters, then MMR
//! re-ranking of the strongest candidates.
//!
//! `W(t, c) = tf(t, c) * ln(1 + A / f(t))` where `A` is the mean number of
//! tokens per class and `f(t)` the frequency of `t` across all classes.
//! Noise documents never contribute.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cluster::{hdbscan_fit, ClusterError, ClusterLabels, HdbscanParams};
use crate::corpus::{build_vocabulary, tokenize, Corpus, CorpusError, Vocabulary};
use crate::embed::{cosine_unchecked, EmbedError, EmbeddingMatrix, EmbeddingProvider};
use crate::matrix::Matrix;
use crate::provider::RetryPolicy;
use crate::reduce::{build_graph, layout_graph, Metric, ReduceError, UmapGraph, UmapParams};

pub const DEFAULT_TOP_N: usize = 10;
pub const DEFAULT_CANDIDATES: usize = 30;

#[derive(Debug, Error)]
pub enum TopicError {
    #[error("no non-noise clusters to represent")]
    NoClusters,
    #[error("embeddings are not row-aligned with the corpus ({0})")]
    Misaligned(String),
    #[error(transparent)]
    Reduce(#[from] ReduceError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Sparse c-TF-IDF matrix: one row per cluster, entries sorted by term index.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTfidf {
    pub avg_class_words: f64,
    pub tf: Vec<Vec<(usize, u64)>>,
    pub weights: Vec<Vec<(usize, f64)>>,
}

impl ClassTfidf {
    pub fn n_classes(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, class: usize, term: usize) -> f64 {
        let row = &self.weights[class];
        row.binary_search_by_key(&term, |e| e.0).map_or(0.0, |p| row[p].1)
    }

    pub fn term_frequency(&self, class: usize, term: usize) -> u64 {
        let row = &self.tf[class];
        row.binary_search_by_key(&term, |e| e.0).map_or(0, |p| row[p].1)
    }
}

pub fn class_tfidf(
    corpus: &Corpus,
    labels: &ClusterLabels,
    vocab: &Vocabulary,
) -> Result<ClassTfidf, TopicError> {
    if labels.n_clusters == 0 {
        return Err(TopicError::NoClusters);
    }
    if labels.labels.len() != corpus.len() {
        return Err(TopicError::Misaligned(format!(
            "{} labels for {} documents",
            labels.labels.len(),
            corpus.len()
        )));
    }
    let c = labels.n_clusters;
    let mut counts: Vec<HashMap<usize, u64>> = vec![HashMap::new(); c];
    let mut total_tokens = 0u64;
    for (doc, &label) in corpus.documents.iter().zip(&labels.labels) {
        if label < 0 {
            continue;
        }
        for tok in tokenize(&doc.text) {
            if let Some(t) = vocab.index_of(&tok) {
                *counts[label as usize].entry(t).or_insert(0) += 1;
                total_tokens += 1;
            }
        }
    }
    let mut corpus_freq = vec![0u64; vocab.len()];
    for class in &counts {
        for (&t, &n) in class {
            corpus_freq[t] += n;
        }
    }
    let avg = total_tokens as f64 / c as f64;
    let mut tf = Vec::with_capacity(c);
    let mut weights = Vec::with_capacity(c);
    for class in counts {
        let mut row: Vec<(usize, u64)> = class.into_iter().collect();
        row.sort_unstable();
        weights.push(
            row.iter()
                .map(|&(t, n)| (t, n as f64 * (1.0 + avg / corpus_freq[t] as f64).ln()))
                .collect(),
        );
        tf.push(row);
    }
    Ok(ClassTfidf {
        avg_class_words: avg,
        tf,
        weights,
    })
}

/// Highest-weight terms of a c-TF-IDF row; ties go to the lexicographically
/// smaller term.
pub fn top_candidates(row: &[(usize, f64)], vocab: &Vocabulary, n: usize) -> Vec<(String, f64)> {
    let mut cand: Vec<(&str, f64)> = row
        .iter()
        .filter(|e| e.1 > 0.0)
        .map(|&(t, w)| (vocab.term(t), w))
        .collect();
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    cand.truncate(n);
    cand.into_iter().map(|(t, w)| (t.to_string(), w)).collect()
}

/// Greedy MMR over precomputed relevance and pairwise similarity:
/// `score = (1 - diversity) * rel - diversity * max_sim_to_selected`.
/// Returns candidate indices in selection order; ties keep candidate order.
pub fn mmr_select(
    relevance: &[f64],
    similarity: impl Fn(usize, usize) -> f64,
    diversity: f64,
    top_k: usize,
) -> Vec<usize> {
    let n = relevance.len();
    let k = top_k.min(n);
    let mut selected: Vec<usize> = Vec::with_capacity(k);
    let mut chosen = vec![false; n];
    let mut max_sim = vec![f64::NEG_INFINITY; n];
    while selected.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|&i| !chosen[i]) {
            let redundancy = if selected.is_empty() { 0.0 } else { max_sim[i] };
            let score = (1.0 - diversity) * relevance[i] - diversity * redundancy;
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((i, score));
            }
        }
        let (pick, _) = best.expect("unchosen candidate remains");
        chosen[pick] = true;
        selected.push(pick);
        for i in (0..n).filter(|&i| !chosen[i]) {
            max_sim[i] = max_sim[i].max(similarity(i, pick));
        }
    }
    selected
}

/// MMR with cosine relevance to `topic_vector` and cosine redundancy between
/// term vectors.
pub fn mmr_rerank(
    candidates: &[(String, f64)],
    term_vectors: &[Vec<f32>],
    topic_vector: &[f32],
    diversity: f64,
    top_k: usize,
) -> Vec<String> {
    assert_eq!(candidates.len(), term_vectors.len(), "one vector per candidate");
    let relevance: Vec<f64> = term_vectors
        .iter()
        .map(|v| cosine_unchecked(v, topic_vector))
        .collect();
    mmr_select(
        &relevance,
        |i, j| cosine_unchecked(&term_vectors[i], &term_vectors[j]),
        diversity,
        top_k,
    )
    .into_iter()
    .map(|i| candidates[i].0.clone())
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyword {
    pub term: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topic {
    pub id: i32,
    pub size: usize,
    pub keywords: Vec<Keyword>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub doc_id: String,
    pub topic: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopicConfig {
    pub umap: UmapParams,
    pub hdbscan: HdbscanParams,
    /// MMR diversity weight; relevance is weighted by `1 - diversity`.
    pub diversity: f64,
    pub top_n: usize,
    pub n_candidates: usize,
}

impl TopicConfig {
    pub fn new(min_cluster_size: usize, diversity: f64, seed: u64) -> Self {
        Self {
            umap: UmapParams {
                seed,
                ..UmapParams::default()
            },
            hdbscan: HdbscanParams::new(min_cluster_size),
            diversity,
            top_n: DEFAULT_TOP_N,
            n_candidates: DEFAULT_CANDIDATES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicModel {
    pub corpus: String,
    pub n_topics: usize,
    pub n_outliers: usize,
    pub topics: Vec<Topic>,
    pub assignments: Vec<Assignment>,
    pub config: TopicConfig,
    pub embedding_provider: String,
    pub params_fingerprint: String,
    #[serde(skip)]
    pub ctfidf: Option<ClassTfidf>,
}

impl TopicModel {
    pub fn is_degenerate(&self) -> bool {
        self.n_topics == 0
    }

    pub fn keyword_lists(&self) -> Vec<Vec<String>> {
        self.topics
            .iter()
            .map(|t| t.keywords.iter().map(|k| k.term.clone()).collect())
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("topic model serializes")
    }
}

/// Fingerprint over the configuration, corpus content and embedding source.
pub fn fingerprint(config: &TopicConfig, corpus_hash: &[u8; 32], provider_id: &str) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    h.update(corpus_hash);
    h.update(provider_id.as_bytes());
    hex::encode(h.finalize())
}

/// Model input bound to its embeddings; caches the seed-independent UMAP
/// graph and term vectors across fits.
pub struct TopicPipeline<'a> {
    corpus: &'a Corpus,
    embeddings: &'a EmbeddingMatrix,
    term_provider: &'a dyn EmbeddingProvider,
    points: Matrix,
    vocab: Vocabulary,
    graphs: Mutex<HashMap<(usize, Metric), Arc<UmapGraph>>>,
    term_vectors: Mutex<HashMap<String, Vec<f32>>>,
}

impl<'a> TopicPipeline<'a> {
    pub fn new(
        corpus: &'a Corpus,
        embeddings: &'a EmbeddingMatrix,
        term_provider: &'a dyn EmbeddingProvider,
    ) -> Result<Self, TopicError> {
        let aligned = embeddings.len() == corpus.len()
            && corpus
                .documents
                .iter()
                .zip(&embeddings.doc_ids)
                .all(|(d, id)| &d.id == id);
        if !aligned {
            return Err(TopicError::Misaligned("document ids differ".into()));
        }
        Ok(Self {
            corpus,
            embeddings,
            term_provider,
            points: embeddings.to_matrix(),
            vocab: build_vocabulary(corpus)?,
            graphs: Mutex::new(HashMap::new()),
            term_vectors: Mutex::new(HashMap::new()),
        })
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn graph(&self, params: &UmapParams) -> Result<Arc<UmapGraph>, TopicError> {
        let key = (params.n_neighbors, params.metric);
        if let Some(g) = self.graphs.lock().expect("graph cache").get(&key) {
            return Ok(g.clone());
        }
        let g = Arc::new(build_graph(&self.points, params)?);
        self.graphs
            .lock()
            .expect("graph cache")
            .entry(key)
            .or_insert(g.clone());
        Ok(g)
    }

    fn vectors_for(&self, terms: &[&str]) -> Result<Vec<Vec<f32>>, TopicError> {
        let missing: Vec<&str> = {
            let cache = self.term_vectors.lock().expect("term cache");
            terms.iter().copied().filter(|t| !cache.contains_key(*t)).collect()
        };
        if !missing.is_empty() {
            let vecs = RetryPolicy::default()
                .run(|| self.term_provider.embed_batch(&missing))
                .map_err(|(attempts, source)| EmbedError::Provider { attempts, source })?;
            if vecs.len() != missing.len() {
                return Err(EmbedError::BatchLength {
                    expected: missing.len(),
                    found: vecs.len(),
                }
                .into());
            }
            let mut cache = self.term_vectors.lock().expect("term cache");
            for (t, v) in missing.into_iter().zip(vecs) {
                cache.insert(t.to_string(), v);
            }
        }
        let cache = self.term_vectors.lock().expect("term cache");
        Ok(terms.iter().map(|t| cache[*t].clone()).collect())
    }

    pub fn reduce(&self, params: &UmapParams) -> Result<Matrix, TopicError> {
        let graph = self.graph(params)?;
        Ok(layout_graph(&graph, params)?)
    }

    pub fn fit(&self, config: &TopicConfig) -> Result<TopicModel, TopicError> {
        let reduced = self.reduce(&config.umap)?;
        let fit = hdbscan_fit(&reduced, &config.hdbscan)?;
        self.represent(config, fit.labels)
    }

    /// c-TF-IDF, candidate pool and MMR for fixed cluster labels.
    pub fn represent(
        &self,
        config: &TopicConfig,
        labels: ClusterLabels,
    ) -> Result<TopicModel, TopicError> {
        let assignments = self
            .corpus
            .documents
            .iter()
            .zip(&labels.labels)
            .map(|(d, &topic)| Assignment {
                doc_id: d.id.clone(),
                topic,
            })
            .collect();
        let mut model = TopicModel {
            corpus: self.corpus.name.clone(),
            n_topics: labels.n_clusters,
            n_outliers: labels.noise_count(),
            topics: Vec::new(),
            assignments,
            config: config.clone(),
            embedding_provider: self.embeddings.provider_id.clone(),
            params_fingerprint: fingerprint(
                config,
                &self.corpus.content_hash(),
                &self.embeddings.provider_id,
            ),
            ctfidf: None,
        };
        if labels.n_clusters == 0 {
            return Ok(model);
        }
        let ctfidf = class_tfidf(self.corpus, &labels, &self.vocab)?;
        let sizes = labels.cluster_sizes();
        for (c, size) in sizes.into_iter().enumerate() {
            let candidates = top_candidates(&ctfidf.weights[c], &self.vocab, config.n_candidates);
            let terms: Vec<&str> = candidates.iter().map(|(t, _)| t.as_str()).collect();
            let vectors = self.vectors_for(&terms)?;
            let centroid = self.centroid(&labels.labels, c as i32);
            let relevance: Vec<f64> =
                vectors.iter().map(|v| cosine_unchecked(v, &centroid)).collect();
            let picked = mmr_select(
                &relevance,
                |i, j| cosine_unchecked(&vectors[i], &vectors[j]),
                config.diversity,
                config.top_n,
            );
            model.topics.push(Topic {
                id: c as i32,
                size,
                keywords: picked
                    .into_iter()
                    .map(|i| Keyword {
                        term: candidates[i].0.clone(),
                        weight: candidates[i].1,
                    })
                    .collect(),
            });
        }
        model.ctfidf = Some(ctfidf);
        Ok(model)
    }

    fn centroid(&self, labels: &[i32], topic: i32) -> Vec<f32> {
        let mut acc = vec![0.0f64; self.embeddings.dim];
        let mut n = 0usize;
        for (i, &l) in labels.iter().enumerate() {
            if l == topic {
                n += 1;
                for (a, &x) in acc.iter_mut().zip(self.embeddings.row(i)) {
                    *a += f64::from(x);
                }
            }
        }
        acc.into_iter().map(|a| (a / n.max(1) as f64) as f32).collect()
    }
}

pub fn fit_topic_model(
    model_input: &Corpus,
    embeddings: &EmbeddingMatrix,
    term_provider: &dyn EmbeddingProvider,
    config: &TopicConfig,
) -> Result<TopicModel, TopicError> {
    TopicPipeline::new(model_input, embeddings, term_provider)?.fit(config)
}
