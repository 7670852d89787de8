use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not symmetric (max |a_ij - a_ji| = {max_asymmetry:e})")]
    NotSymmetric { max_asymmetry: f64 },

    #[error("matrix is not hollow (diagonal entry {index} = {value:e})")]
    NotHollow { index: usize, value: f64 },

    #[error("non-positive entry {value:e} at index {index}")]
    NonPositive { index: usize, value: f64 },

    #[error("input contains no interactions")]
    EmptyInput,

    #[error("no users left after filtering (min user degree {min_user_degree})")]
    AllUsersFiltered { min_user_degree: usize },

    #[error("all user degrees are zero")]
    AllDegreesZero,

    #[error("ranking weights need at least one interacted and one uninteracted item")]
    DegenerateRankingSet,

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("model file version mismatch: {0}")]
    VersionMismatch(String),

    #[error("model file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("model file checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    ChecksumMismatch { stored: u64, computed: u64 },

    #[error("malformed data in {path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            message: message.into(),
        }
    }
}
