use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("empty sequence: mask has no valid position")]
    EmptySequence,
    #[error("mask is not a contiguous prefix of valid positions")]
    NonContiguousMask,
    #[error("{op}: dimension mismatch ({left} vs {right})")]
    DimensionMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },
    #[error("invalid shape: {0}")]
    Shape(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("value out of range: {0}")]
    OutOfRange(&'static str),
    #[error("causal limits must be non-decreasing (row {row})")]
    DecreasingLimits { row: usize },
    #[error("normalized clocks need the full sequence and cannot be used causally")]
    CausalNormalized,
    #[error("backward requires a scalar (1x1) loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
}
