//! HGFormer: a vision backbone that builds a hypergraph over image tokens and
//! passes messages node → hyperedge → node with topology-aware attention.
//!
//! - [`tensor`]: dense tensors, reverse-mode tape, parameter store, `HGFW` checkpoints.
//! - [`hypergraph`]: CS-KNN construction and the clustering baselines.
//! - [`messaging`]: hypergraph convolution and topology-aware attention.
//! - [`model`]: blocks, stages, and the four-stage pyramid classifier.
//! - [`harness`]: toy data, training, ablations, gradient checks, benchmarks.

pub mod error;
pub mod harness;
pub mod hypergraph;
pub mod messaging;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
