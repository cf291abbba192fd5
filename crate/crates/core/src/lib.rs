//! Conversion of multi-head attention into grouped-query attention.
//!
//! The crate bundles a small trainable transformer, head-similarity metrics,
//! grouping search (neighbour, symmetric, asymmetric, brute force), weight
//! merging, recovery fine-tuning and an analytic cost model.

pub mod error;
pub mod cli;
pub mod costmodel;
pub mod grouping;
pub mod merge;
pub mod model;
pub mod numerics;
pub mod similarity;
pub mod tasks;

pub use error::{GqaError, Result};
pub use grouping::{HeadGrouping, SearchConfig, SearchResult};
pub use numerics::{Rng, Scalar};
pub use similarity::SimilarityMetric;

/// Double-precision matrix used throughout the model code.
pub type Matrix = numerics::Matrix<f64>;
pub type MatrixF32 = numerics::Matrix<f32>;
pub type SimilarityMatrix = similarity::SimilarityMatrix<f64>;
pub type SimilarityMatrixF32 = similarity::SimilarityMatrix<f32>;
