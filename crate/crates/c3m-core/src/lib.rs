//! Desk-scale laboratory for cross-modal (text/image) person retrieval on a
//! learned common manifold.
//!
//! The pipeline encodes per-sample feature matrices into modality sub-manifolds,
//! pools locals into a unified feature, projects each unified feature toward the
//! opposite modality after a per-vector statistic transfer ("look"), and fuses
//! the original and projected features through a learned sigmoid gate ("leap").
//! Retrieval ranks a visual gallery against textual queries by a sum of common,
//! global, and fine-grained cosine similarities.
//!
//! Everything runs on synthetic stand-in backbone features so the mapping
//! machinery itself can be tested end to end: exact algebraic invariants,
//! finite-difference gradient checks, and paradigm ablations.

pub mod error;
pub mod manifold;
pub mod objectives;
pub mod param;
pub mod prng;
pub mod repr;
pub mod similarity;
pub mod synthgen;
pub mod tensor;

pub use error::C3mError;

/// Crate result alias.
pub type Result<T> = std::result::Result<T, C3mError>;
