//! Document embeddings behind a pluggable provider, plus the binary
//! persistence format shared with reduced matrices.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic "STEM" | version u16 | stage u8 | reserved u8 | n u64 | dim u32
//! | provider_id_len u32 | provider_id bytes | corpus_hash [u8; 32]
//! | n * dim f32, row-major
//! ```
//!
//! Document ids live in a sidecar `<file>.ids.json`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{tokenize, Corpus};
use crate::matrix::Matrix;
use crate::provider::{path_safe, HttpEndpoint, ProviderError, RetryPolicy};

const MAGIC: &[u8; 4] = b"STEM";
const FORMAT_VERSION: u16 = 1;
/// Size of the hashed bag-of-words space used by [`HashingEmbedder`].
pub const HASH_BUCKETS: usize = 1 << 16;
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding provider failed after {attempts} attempts: {source}")]
    Provider {
        attempts: u32,
        #[source]
        source: ProviderError,
    },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("provider returned {found} vectors for a batch of {expected}")]
    BatchLength { expected: usize, found: usize },
    #[error("cannot embed an empty corpus")]
    EmptyCorpus,
    #[error("embedding file i/o at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid embedding file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, ProviderError>;
}

/// Deterministic offline embedder: hashed term counts projected through a
/// seeded Gaussian matrix.
///
/// Projection rows are generated lazily per bucket from a ChaCha stream keyed
/// by `(seed, bucket)`, so the implied `HASH_BUCKETS x dim` matrix is fixed
/// by `(dim, seed)` without being materialized.
pub struct HashingEmbedder {
    dim: usize,
    seed: u64,
    id: String,
    rows: Vec<OnceLock<Box<[f32]>>>,
}

impl std::fmt::Debug for HashingEmbedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HashingEmbedder")
            .field("dim", &self.dim)
            .field("seed", &self.seed)
            .finish()
    }
}

impl HashingEmbedder {
    /// # Panics
    /// If `dim < 8`.
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim >= 8, "fallback embedding dimension must be at least 8");
        Self {
            dim,
            seed,
            id: format!("hashing-d{dim}-s{seed}"),
            rows: (0..HASH_BUCKETS).map(|_| OnceLock::new()).collect(),
        }
    }

    /// Process-wide shared instance per `(dim, seed)`.
    pub fn shared(dim: usize, seed: u64) -> Arc<Self> {
        static CACHE: OnceLock<Mutex<HashMap<(usize, u64), Arc<HashingEmbedder>>>> =
            OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        let mut guard = cache.lock().expect("embedder cache poisoned");
        guard
            .entry((dim, seed))
            .or_insert_with(|| Arc::new(Self::new(dim, seed)))
            .clone()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn projection_row(&self, bucket: usize) -> &[f32] {
        self.rows[bucket].get_or_init(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(bucket as u64);
            (0..self.dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        })
    }

    pub fn embed(&self, text: &str) -> Vec<f32> {
        let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
        for term in tokenize(text) {
            *counts.entry(bucket_of(&term)).or_insert(0) += 1;
        }
        let mut acc = vec![0.0f64; self.dim];
        for (&bucket, &count) in &counts {
            let row = self.projection_row(bucket);
            for (a, &r) in acc.iter_mut().zip(row) {
                *a += f64::from(count) * f64::from(r);
            }
        }
        normalize_to_f32(&acc)
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, ProviderError> {
        Ok(texts.iter().map(|t| self.embed(t)).collect())
    }
}

/// FNV-1a, folded into the bucket range.
fn bucket_of(term: &str) -> usize {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in term.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (hash % HASH_BUCKETS as u64) as usize
}

fn normalize_to_f32(v: &[f64]) -> Vec<f32> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x / norm) as f32).collect()
}

pub fn fallback_embed(text: &str, dim: usize, seed: u64) -> Vec<f32> {
    HashingEmbedder::shared(dim, seed).embed(text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "EmbeddingConfigInput")]
pub struct HttpEmbeddingConfig {
    #[serde(flatten)]
    pub endpoint: HttpEndpoint,
    /// JSON pointer to the array of result objects.
    pub response_pointer: String,
    /// Field of each result object holding the vector.
    pub vector_field: String,
}

impl Default for HttpEmbeddingConfig {
    fn default() -> Self {
        Self {
            endpoint: HttpEndpoint {
                path: "/v1/embeddings".into(),
                model: "text-embedding-3-small".into(),
                ..HttpEndpoint::default()
            },
            response_pointer: "/data".into(),
            vector_field: "embedding".into(),
        }
    }
}

crate::provider::endpoint_config_input!(EmbeddingConfigInput {
    response_pointer: String,
    vector_field: String,
});

impl From<EmbeddingConfigInput> for HttpEmbeddingConfig {
    fn from(mut raw: EmbeddingConfigInput) -> Self {
        let d = Self::default();
        Self {
            endpoint: raw.endpoint_over(d.endpoint),
            response_pointer: raw.response_pointer.unwrap_or(d.response_pointer),
            vector_field: raw.vector_field.unwrap_or(d.vector_field),
        }
    }
}

/// Batched embedding client: posts `{model, input: [texts]}`.
pub struct HttpEmbeddingProvider {
    config: HttpEmbeddingConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
    id: String,
}

impl HttpEmbeddingProvider {
    pub fn new(config: HttpEmbeddingConfig) -> Result<Self, ProviderError> {
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

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, ProviderError> {
        let body = serde_json::json!({ "model": self.config.endpoint.model, "input": texts });
        let resp = self
            .config
            .endpoint
            .post_json(&self.agent, self.api_key.as_deref(), body)?;
        let items = resp
            .pointer(&self.config.response_pointer)
            .and_then(|v| v.as_array())
            .ok_or_else(|| {
                ProviderError::BadResponse(format!("no array at `{}`", self.config.response_pointer))
            })?;
        items
            .iter()
            .map(|item| {
                item.get(&self.config.vector_field)
                    .and_then(|v| v.as_array())
                    .ok_or_else(|| {
                        ProviderError::BadResponse(format!("missing `{}`", self.config.vector_field))
                    })?
                    .iter()
                    .map(|x| {
                        x.as_f64()
                            .map(|f| f as f32)
                            .ok_or_else(|| ProviderError::BadResponse("non-numeric component".into()))
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Stage {
    Embedding = 0,
    Reduced = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub doc_ids: Vec<String>,
    pub dim: usize,
    data: Vec<f32>,
    pub provider_id: String,
    pub corpus_hash: [u8; 32],
    pub stage: Stage,
}

impl EmbeddingMatrix {
    pub fn new(
        doc_ids: Vec<String>,
        dim: usize,
        data: Vec<f32>,
        provider_id: impl Into<String>,
        corpus_hash: [u8; 32],
    ) -> Result<Self, EmbedError> {
        if data.len() != doc_ids.len() * dim {
            return Err(EmbedError::DimensionMismatch {
                expected: doc_ids.len() * dim,
                found: data.len(),
            });
        }
        Ok(Self {
            doc_ids,
            dim,
            data,
            provider_id: provider_id.into(),
            corpus_hash,
            stage: Stage::Embedding,
        })
    }

    /// Wraps reduced coordinates for persistence; values are narrowed to f32.
    pub fn from_reduced(
        reduced: &Matrix,
        doc_ids: Vec<String>,
        provider_id: impl Into<String>,
        corpus_hash: [u8; 32],
    ) -> Result<Self, EmbedError> {
        let data = reduced.as_slice().iter().map(|&x| x as f32).collect();
        let mut m = Self::new(doc_ids, reduced.cols(), data, provider_id, corpus_hash)?;
        m.stage = Stage::Reduced;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    /// Indices of all-zero rows (documents without any term).
    pub fn zero_rows(&self) -> Vec<usize> {
        self.rows()
            .enumerate()
            .filter(|(_, r)| r.iter().all(|&x| x == 0.0))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.len(),
            self.dim,
            self.data.iter().map(|&x| f64::from(x)).collect(),
        )
    }

    pub fn ids_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".ids.json");
        PathBuf::from(s)
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        let io_err = |p: &Path| {
            let p = p.to_path_buf();
            move |source| EmbedError::Io { path: p, source }
        };
        let mut buf = Vec::with_capacity(64 + self.data.len() * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.push(self.stage as u8);
        buf.push(0);
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.provider_id.len() as u32).to_le_bytes());
        buf.extend_from_slice(self.provider_id.as_bytes());
        buf.extend_from_slice(&self.corpus_hash);
        for x in &self.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        std::fs::write(path, buf).map_err(io_err(path))?;
        let ids = serde_json::to_vec(&self.doc_ids).expect("ids serialize");
        let ids_path = Self::ids_path(path);
        std::fs::write(&ids_path, ids).map_err(io_err(&ids_path))
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        let bytes = std::fs::read(path).map_err(|source| EmbedError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let bad = |reason: &str| EmbedError::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| bad("truncated header"))? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes(cur.array().ok_or_else(|| bad("truncated header"))?);
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let [stage, _reserved]: [u8; 2] = cur.array().ok_or_else(|| bad("truncated header"))?;
        let stage = match stage {
            0 => Stage::Embedding,
            1 => Stage::Reduced,
            _ => return Err(bad("unknown stage tag")),
        };
        let n = u64::from_le_bytes(cur.array().ok_or_else(|| bad("truncated header"))?) as usize;
        let dim = u32::from_le_bytes(cur.array().ok_or_else(|| bad("truncated header"))?) as usize;
        let id_len = u32::from_le_bytes(cur.array().ok_or_else(|| bad("truncated header"))?) as usize;
        let provider_id = String::from_utf8(
            cur.take(id_len).ok_or_else(|| bad("truncated provider id"))?.to_vec(),
        )
        .map_err(|_| bad("provider id is not utf-8"))?;
        let corpus_hash: [u8; 32] = cur.array().ok_or_else(|| bad("truncated corpus hash"))?;
        let body = cur.take(n * dim * 4).ok_or_else(|| bad("truncated body"))?;
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();

        let ids_path = Self::ids_path(path);
        let ids_raw = std::fs::read(&ids_path).map_err(|source| EmbedError::Io {
            path: ids_path.clone(),
            source,
        })?;
        let doc_ids: Vec<String> = serde_json::from_slice(&ids_raw).map_err(|e| EmbedError::Format {
            path: ids_path,
            reason: e.to_string(),
        })?;
        if doc_ids.len() != n {
            return Err(bad("sidecar id count does not match header"));
        }
        let mut m = Self::new(doc_ids, dim, data, provider_id, corpus_hash)?;
        m.stage = stage;
        Ok(m)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(out)
    }

    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N).map(|s| s.try_into().expect("exact length"))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EmbedOptions {
    pub batch_size: usize,
    pub concurrency_limit: usize,
    pub retry: RetryPolicy,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self {
            batch_size: 64,
            concurrency_limit: 2,
            retry: RetryPolicy::default(),
        }
    }
}

/// Embeds every document in order and L2-normalizes each row.
pub fn embed_corpus(
    corpus: &Corpus,
    provider: &dyn EmbeddingProvider,
    opts: &EmbedOptions,
) -> Result<EmbeddingMatrix, EmbedError> {
    if corpus.is_empty() {
        return Err(EmbedError::EmptyCorpus);
    }
    let texts: Vec<&str> = corpus.texts().collect();
    let batches: Vec<&[&str]> = texts.chunks(opts.batch_size.max(1)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.concurrency_limit.max(1))
        .build()
        .expect("thread pool");
    let results: Vec<Result<Vec<Vec<f32>>, EmbedError>> = pool.install(|| {
        batches
            .par_iter()
            .map(|batch| {
                let vecs = opts
                    .retry
                    .run(|| provider.embed_batch(batch))
                    .map_err(|(attempts, source)| EmbedError::Provider { attempts, source })?;
                if vecs.len() != batch.len() {
                    return Err(EmbedError::BatchLength {
                        expected: batch.len(),
                        found: vecs.len(),
                    });
                }
                Ok(vecs)
            })
            .collect()
    });

    let mut dim = None;
    let mut data = Vec::new();
    for batch in results {
        for v in batch? {
            let expected = *dim.get_or_insert(v.len());
            if v.len() != expected {
                return Err(EmbedError::DimensionMismatch {
                    expected,
                    found: v.len(),
                });
            }
            let wide: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
            data.extend(normalize_to_f32(&wide));
        }
    }
    EmbeddingMatrix::new(
        corpus.documents.iter().map(|d| d.id.clone()).collect(),
        dim.unwrap_or(0),
        data,
        provider.id(),
        corpus.content_hash(),
    )
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine<T: Copy + Into<f64>>(u: &[T], v: &[T]) -> Result<f64, EmbedError> {
    if u.len() != v.len() {
        return Err(EmbedError::DimensionMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    Ok(cosine_unchecked(u, v))
}

pub(crate) fn cosine_unchecked<T: Copy + Into<f64>>(u: &[T], v: &[T]) -> f64 {
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a.into(), b.into());
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    (dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0)
}
