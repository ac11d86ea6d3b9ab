//! Seeded synthetic data: planted-topic corpora and Gaussian blobs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{Corpus, Document, SourceFormat};
use crate::matrix::Matrix;

const SYLLABLES: [&str; 20] = [
    "ka", "lo", "mi", "ru", "ven", "dor", "sel", "tri", "pa", "zu", "gon", "fai", "bes", "qui",
    "nor", "lam", "hex", "wik", "jot", "yar",
];

/// Deterministic alphabetic pseudo-word for `index`; distinct indices give
/// distinct words.
pub fn pseudo_word(index: usize) -> String {
    let mut n = index;
    let mut w = String::new();
    for _ in 0..3 {
        w.push_str(SYLLABLES[n % SYLLABLES.len()]);
        n /= SYLLABLES.len();
    }
    while n > 0 {
        w.push_str(SYLLABLES[n % SYLLABLES.len()]);
        n /= SYLLABLES.len();
    }
    w
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedConfig {
    pub n_docs: usize,
    pub n_pools: usize,
    pub pool_size: usize,
    pub background_size: usize,
    pub doc_words: usize,
    /// Probability that a token comes from the shared background vocabulary.
    pub background_rate: f64,
    pub sentence_words: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            n_docs: 300,
            n_pools: 3,
            pool_size: 30,
            background_size: 200,
            doc_words: 80,
            background_rate: 0.3,
            sentence_words: 12,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    pub corpus: Corpus,
    pub pools: Vec<Vec<String>>,
    pub background: Vec<String>,
    pub doc_pool: Vec<usize>,
}

impl PlantedCorpus {
    /// Pool containing `term`, if any.
    pub fn pool_of(&self, term: &str) -> Option<usize> {
        self.pools.iter().position(|p| p.iter().any(|w| w == term))
    }
}

/// Documents drawn round-robin from disjoint keyword pools plus a shared
/// background vocabulary, split into sentences.
pub fn planted_corpus(cfg: &PlantedConfig) -> PlantedCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pools: Vec<Vec<String>> = (0..cfg.n_pools)
        .map(|p| (0..cfg.pool_size).map(|i| pseudo_word(p * cfg.pool_size + i)).collect())
        .collect();
    let offset = cfg.n_pools * cfg.pool_size;
    let background: Vec<String> = (0..cfg.background_size).map(|i| pseudo_word(offset + i)).collect();
    let mut docs = Vec::with_capacity(cfg.n_docs);
    let mut doc_pool = Vec::with_capacity(cfg.n_docs);
    for d in 0..cfg.n_docs {
        let p = d % cfg.n_pools;
        let mut text = String::new();
        for w in 0..cfg.doc_words {
            let word = if !background.is_empty() && rng.random::<f64>() < cfg.background_rate {
                &background[rng.random_range(0..background.len())]
            } else {
                &pools[p][rng.random_range(0..cfg.pool_size)]
            };
            if w > 0 {
                text.push(' ');
            }
            text.push_str(word);
            if (w + 1) % cfg.sentence_words.max(1) == 0 {
                text.push('.');
            }
        }
        docs.push(Document::new(format!("doc-{d:05}"), text, Some(format!("pool-{p}"))));
        doc_pool.push(p);
    }
    PlantedCorpus {
        corpus: Corpus::new("planted", docs, SourceFormat::Jsonl).expect("unique ids"),
        pools,
        background,
        doc_pool,
    }
}

/// `per_center` points around each of `centers.len()` centers with isotropic
/// noise `sigma`; labels give the generating center.
pub fn gaussian_blobs(centers: &[Vec<f64>], per_center: usize, sigma: f64, seed: u64) -> (Matrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    let dim = centers.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(centers.len() * per_center * dim);
    let mut labels = Vec::with_capacity(centers.len() * per_center);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_center {
            data.extend(center.iter().map(|&x| x + noise.sample(&mut rng)));
            labels.push(c);
        }
    }
    (Matrix::from_vec(labels.len(), dim, data), labels)
}

/// Centers on the coordinate axes at distance `separation` from the origin.
pub fn axis_centers(n: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let mut c = vec![0.0; dim];
            c[i % dim] = separation * (1 + i / dim) as f64;
            c
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{stopwords, tokenize};
    use std::collections::HashSet;

    #[test]
    fn pseudo_words_distinct_and_clean() {
        let words: HashSet<String> = (0..5000).map(pseudo_word).collect();
        assert_eq!(words.len(), 5000);
        for w in &words {
            assert_eq!(tokenize(w), vec![w.clone()]);
            assert!(!stopwords().contains(w.as_str()));
        }
    }

    #[test]
    fn planted_pools_disjoint_and_deterministic() {
        let a = planted_corpus(&PlantedConfig::default());
        let b = planted_corpus(&PlantedConfig::default());
        assert_eq!(a.corpus, b.corpus);
        let all: HashSet<&String> = a.pools.iter().flatten().chain(&a.background).collect();
        assert_eq!(all.len(), 3 * 30 + 200);
        assert_eq!(a.corpus.len(), 300);
        assert_eq!(a.corpus.documents[0].word_count, 80);
    }

    #[test]
    fn blobs_shape() {
        let (m, labels) = gaussian_blobs(&axis_centers(3, 4, 10.0), 5, 1.0, 1);
        assert_eq!((m.rows(), m.cols()), (15, 4));
        assert_eq!(labels[14], 2);
    }
}
