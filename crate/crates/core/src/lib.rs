//! Summarization-augmented topic modeling: summarize documents with a
//! few-shot prompted provider, fit embed/UMAP/HDBSCAN/c-TF-IDF/MMR topic
//! models on full texts and summaries, and score them with topic diversity
//! and C_V coherence over an experiment grid.

pub mod cluster;
pub mod corpus;
pub mod embed;
pub mod eval;
pub mod matrix;
pub mod provider;
pub mod reduce;
pub mod runner;
pub mod summarize;
pub mod synthetic;
pub mod topics;

pub use cluster::{hdbscan_fit, ClusterLabels, HdbscanParams};
pub use corpus::{build_vocabulary, load_corpus, tokenize, Corpus, Document, LoadOptions, SourceFormat, Vocabulary};
pub use embed::{embed_corpus, EmbeddingMatrix, EmbeddingProvider, HashingEmbedder};
pub use eval::{cv_coherence, topic_diversity, Evaluator, InputType, MetricsRecord, WindowStats};
pub use matrix::Matrix;
pub use reduce::{umap_fit_transform, UmapParams};
pub use runner::{aggregate, emit_report, run_experiment, run_grid, GridConfig, GridResult, GridSpec};
pub use summarize::{summarize_corpus, CompletionProvider, ExtractiveProvider, SummaryKind, SummaryVariant};
pub use topics::{fit_topic_model, TopicConfig, TopicModel, TopicPipeline};
