//! Shared fixtures for the criterion benches.

use sumtopic::synthetic::{planted_corpus, PlantedConfig, PlantedCorpus};

pub fn bench_corpus(n_docs: usize) -> PlantedCorpus {
    planted_corpus(&PlantedConfig {
        n_docs,
        ..PlantedConfig::default()
    })
}
