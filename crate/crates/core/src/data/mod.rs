//! Preference pairs, embedding storage and synthetic data.

mod batch;
mod manifest;
mod store;
pub mod synthetic;

pub use batch::{batch_for_step, batch_iter};
pub use manifest::{load_pairs, parse_pairs, resolve, write_pairs, PreferencePair};
pub(crate) use store::Reader;
pub use store::{EmbeddingStore, EMBEDDING_MAGIC, EMBEDDING_VERSION};
pub use synthetic::{
    benchmark_signal, benchmark_specs, domain_direction, generate_suite, generate_synthetic, quality_direction, Regime,
    SyntheticSpec, BENCHMARK_DOMAIN_SIGNAL,
};

use std::sync::Arc;

use crate::error::Result;

/// Pairs together with the store their references resolve against.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub store: Arc<EmbeddingStore>,
    pub pairs: Vec<PreferencePair>,
}

impl Dataset {
    pub fn new(store: EmbeddingStore, pairs: Vec<PreferencePair>) -> Result<Self> {
        resolve(&pairs, &store)?;
        Ok(Dataset {
            store: Arc::new(store),
            pairs,
        })
    }

    /// Subset with the given pair indices, sharing the store.
    pub fn select(&self, idx: impl IntoIterator<Item = usize>) -> Dataset {
        Dataset {
            store: Arc::clone(&self.store),
            pairs: idx.into_iter().map(|i| self.pairs[i].clone()).collect(),
        }
    }

    pub fn domains(&self) -> Vec<String> {
        let mut d: Vec<String> = self.pairs.iter().map(|p| p.domain.clone()).collect();
        d.sort();
        d.dedup();
        d
    }
}
