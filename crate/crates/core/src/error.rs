use std::path::PathBuf;

use thiserror::Error;

use crate::field::GridShape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch {
        expected: GridShape,
        found: GridShape,
    },

    #[error("invalid grid shape: {0}")]
    InvalidShape(String),

    #[error("invalid field data: {0}")]
    InvalidField(String),

    #[error("invalid query point {0:?}")]
    InvalidPoint(Vec<f64>),

    #[error("divergent field: {0}")]
    Divergent(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("overlap {overlap} too large for axis of {dim} voxels (need dim >= 2*overlap + 4)")]
    OverlapTooLarge { overlap: usize, dim: usize },

    #[error("expected {expected} chunks, found {found}")]
    ChunkCount { expected: usize, found: usize },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("stale tape: recorded at parameter version {recorded}, parameters are at {current}")]
    StaleTape { recorded: u64, current: u64 },

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error(
        "registration diverged at iteration {iteration} (last finite loss {last_finite_loss})"
    )]
    RegistrationDiverged {
        iteration: usize,
        last_finite_loss: f64,
        last_state: Box<crate::optimizer::PosteriorSet>,
    },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn check_shape(expected: GridShape, found: GridShape) -> Result<()> {
        if expected == found {
            Ok(())
        } else {
            Err(Error::ShapeMismatch { expected, found })
        }
    }
}

/// Decoding failures for the on-disk formats. Each variant carries a stable
/// numeric code, reported by the CLI.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("unsupported dtype code {0}")]
    BadDtype(u32),
    #[error("truncated header")]
    TruncatedHeader,
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("trailing data after payload: {0} extra bytes")]
    TrailingData(usize),
    #[error("dimension overflow or invalid dims {0:?}")]
    DimOverflow(Vec<u32>),
    #[error("invalid channel count {channels} for ndim {ndim}")]
    BadChannels { channels: u32, ndim: u32 },
    #[error("non-finite value in payload at element {0}")]
    NonFinitePayload(usize),
    #[error("not a binary PGM (P5) file")]
    NotP5,
    #[error("unsupported PGM maxval {0}")]
    BadMaxval(u32),
    #[error("malformed PGM header: {0}")]
    BadPgmHeader(String),
}

impl FormatError {
    pub fn code(&self) -> u32 {
        match self {
            FormatError::BadMagic(_) => 10,
            FormatError::BadVersion(_) => 11,
            FormatError::BadDtype(_) => 12,
            FormatError::TruncatedHeader => 13,
            FormatError::TruncatedPayload { .. } => 14,
            FormatError::TrailingData(_) => 15,
            FormatError::DimOverflow(_) => 16,
            FormatError::BadChannels { .. } => 17,
            FormatError::NonFinitePayload(_) => 18,
            FormatError::NotP5 => 20,
            FormatError::BadMaxval(_) => 21,
            FormatError::BadPgmHeader(_) => 22,
        }
    }
}
