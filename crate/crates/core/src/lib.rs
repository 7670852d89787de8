//! Implicit-feedback recommendation with a learned item-item metric.
//!
//! The crate learns a symmetric, nonnegative, hollow item-item weight matrix
//! whose preference residuals coincide with residuals of a generalized
//! Mahalanobis distance between users and items, blends it with a
//! truncated-SVD graph filter, and evaluates top-K recommendations.
//!
//! Module map:
//! - [`sparse`]: compressed-row and dense primitives, degree scaling.
//! - [`dataio`]: interaction parsing, train/valid/test splitting, model files.
//! - [`geometry`]: Mahalanobis distances over signal features, PSD completion.
//! - [`signal`]: EASE, truncated SVD graph filter, filter weights.
//! - [`solver`]: ranking weights, loss, hybrid scores and the ADMM solver.
//! - [`eval`]: top-K ranking, NDCG/MRR/novelty and reports.
//! - [`synth`]: seeded synthetic interaction logs.
//! - [`cli`]: the `corml` command-line surface.

pub mod cli;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod par;
pub mod signal;
pub mod solver;
pub mod sparse;
pub mod synth;

pub use error::{Error, Result};
