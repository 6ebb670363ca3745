//! Passage-embedding search.
//!
//! * [`FlatIndex`]: exact top-k by dot product.
//! * [`PqCodebook`] / [`PqIndex`]: product quantization with asymmetric
//!   distance computation.
//! * [`persist`]: the `IIDX` on-disk format.
//! * [`server`] / [`client`]: a length-prefixed JSON-over-TCP search service
//!   and its blocking client, plus an in-process transport with the same
//!   interface.

pub mod client;
mod compress;
mod error;
mod flat;
pub mod persist;
mod pq;
pub mod server;
pub mod wire;

pub use client::{Client, ClientError, ClientOptions, InProcessClient, IndexClient, SearchBackend, Transport};
pub use compress::{heavy_hitter_keep, pq_compression_ratio};
pub use error::{IndexError, Result};
pub use flat::{FlatIndex, Hit, PassageId};
pub use pq::{PqCodebook, PqIndex, PqTrainLog, PqTrainOptions};

/// A built index of either kind.
#[derive(Clone, Debug, PartialEq)]
pub enum AnnIndex {
    Flat(FlatIndex),
    Pq(PqIndex),
}

impl AnnIndex {
    pub fn dim(&self) -> usize {
        match self {
            AnnIndex::Flat(f) => f.dim(),
            AnnIndex::Pq(p) => p.codebook().dim(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            AnnIndex::Flat(f) => f.len(),
            AnnIndex::Pq(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AnnIndex::Flat(_) => "flat",
            AnnIndex::Pq(_) => "pq",
        }
    }

    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<Hit>> {
        match self {
            AnnIndex::Flat(f) => f.search(query, k),
            AnnIndex::Pq(p) => p.search(query, k),
        }
    }

    pub fn add(&mut self, id: PassageId, vector: &[f32]) -> Result<()> {
        match self {
            AnnIndex::Flat(f) => f.add(id, vector),
            AnnIndex::Pq(p) => p.add(id, vector),
        }
    }
}
