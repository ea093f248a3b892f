//! Generative slate recommendation toolkit.
//!
//! A slate is a fixed-size ordered list of items recommended as a unit. This
//! crate trains conditional-VAE slate generators (List-CVAE and the two-phase
//! Pivot-CVAE), discriminative baselines (biased MF, NeuMF, MF-MMR), and
//! evaluates them against parameterized user-response environments with both
//! accuracy (expected number of clicks) and variation metrics (item variance
//! decomposition, coverage, intra-list diversity).
//!
//! Modules:
//! - [`numkit`]: dense tensors, reverse-mode gradients for a closed set of
//!   layer primitives, Adam, gradient checking, parameter checkpoints
//! - [`dataio`]: slates, responses, constraint vectors, balancing, splits,
//!   and the on-disk dataset format
//! - [`simenv`]: ground-truth user-response environments (URM, URM_P,
//!   URM_P_MR) and a learned response model for real logs
//! - [`models`]: embedding pretraining, pointwise rankers, MMR reranking,
//!   List-CVAE, Pivot-CVAE variants, and perturbation wrappers
//! - [`evalkit`]: ENC, variance decomposition, coverage, ILD, hit/recall,
//!   and the item-perturbation study

pub mod dataio;
pub mod evalkit;
pub mod models;
pub mod numkit;
pub mod simenv;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation contract (dimension mismatch etc).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Training diverged or produced non-finite values.
    #[error("training error: {0}")]
    Training(String),
    /// A malformed input line.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    /// An id fell outside the known universe.
    #[error("lookup error: {0}")]
    Lookup(String),
    /// A file did not match the expected container/dataset format.
    #[error("format error: {0}")]
    Format(String),
    /// An operation that needs data received none.
    #[error("empty input: {0}")]
    Empty(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
