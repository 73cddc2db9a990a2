use std::io;

use thiserror::Error;

/// Errors raised by the library.
///
/// Scientific outcomes such as an AMP run diverging are not errors; they are
/// reported through [`crate::metrics::Status`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("rank-deficient {0}")]
    RankDeficient(&'static str),

    #[error("degenerate batch: residual norm is zero at layer {layer}, column {column}")]
    DegenerateBatch { layer: usize, column: usize },

    #[error("AMP diverged on {diverged} of {total} columns")]
    Diverged { diverged: usize, total: usize },

    #[error("training diverged (non-finite loss) in layer {layer}")]
    TrainingDiverged {
        layer: usize,
        log: Box<crate::train::TrainLog>,
    },

    #[error("malformed container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}
