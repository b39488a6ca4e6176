//! Retrieval-based malware detection over canonicalized assembly.
//!
//! Functions from a disassembled sample are canonicalized, filtered
//! against known library code, embedded, and compared with a knowledge
//! base of labeled function embeddings. Neighborhood votes flag functions,
//! the fraction of flagged functions decides the sample verdict, and the
//! densest flagged function within the attributed family becomes the
//! anchor that is explained and, once an analyst confirms it, promoted
//! into the knowledge base.

pub mod calibrate;
pub mod corpus;
pub mod detector;
pub mod embedding;
pub mod eval;
pub mod explain;
pub mod ingest;
pub mod kb;
pub mod libfilter;
pub mod pipeline;
pub mod synth;

use thiserror::Error;

pub use detector::{SampleVerdict, Thresholds, Verdict};
pub use embedding::{EmbeddingVector, Provider, ProviderConfig};
pub use ingest::{AddrRange, CanonFunction, ContentHash, ListingFormat, RawFunction};
pub use kb::{KnowledgeBase, Label, Neighborhood};
pub use libfilter::{Blocklist, LibFilter, LibIndex};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ingest(#[from] ingest::IngestError),
    #[error(transparent)]
    Embed(#[from] embedding::EmbedError),
    #[error(transparent)]
    Kb(#[from] kb::KbError),
    #[error(transparent)]
    Filter(#[from] libfilter::FilterError),
    #[error(transparent)]
    Detect(#[from] detector::DetectError),
    #[error(transparent)]
    Calibrate(#[from] calibrate::CalibrateError),
    #[error(transparent)]
    Explain(#[from] explain::ExplainError),
    #[error(transparent)]
    Split(#[from] eval::SplitError),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
