//! A training-free engine that evolves a pool of task-solving agents at
//! test time: per-agent experience and competence tracking, niche-conditioned
//! team selection, online collaboration-structure choice, post-failure
//! knowledge distillation with asymmetric routing, and periodic roster edits.
//!
//! Everything is driven by a single seeded RNG owned by the pool, so runs are
//! reproducible end to end and can be snapshotted and replayed.

pub mod analysis;
pub mod backends;
pub mod codream;
pub mod collab;
pub mod evolve;
pub mod lifecycle;
pub mod select;
pub mod state;
pub mod stream;
pub mod templates;

#[cfg(test)]
pub(crate) mod testutil;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("load error at line {line}: {msg}")]
    Load { line: usize, msg: String },
    #[error("backend error: {0}")]
    Backend(String),
    #[error("grading error: {0}")]
    Grading(String),
    #[error("schema version mismatch: log has {found}, reader supports {supported}")]
    SchemaMismatch { found: u32, supported: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
