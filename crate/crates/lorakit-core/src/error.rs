//! Error types shared across the crate.

use alloc::string::String;

/// Errors produced by the numeric core, the model, and the adapters.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoreError {
    /// Two operands have incompatible shapes. Carries both shapes so the
    /// message names the offending dimensions.
    #[error("{op}: dimension mismatch, left is {lhs_rows}x{lhs_cols}, right is {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    /// A matrix constructor was handed data whose length does not match
    /// `rows * cols`, or a zero dimension where one is not allowed.
    #[error("invalid matrix dimensions: {0}")]
    InvalidDimensions(String),

    /// An iterative routine failed to converge within its iteration cap.
    #[error("{op}: no convergence after {iterations} iterations")]
    NoConvergence { op: &'static str, iterations: usize },

    /// A value-level contract was violated (non-scalar loss node, merge on
    /// an already-merged module, and so on).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Configuration rejected before any numeric work started.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Training failed midway (divergence, empty data).
    #[error("training failed at step {step}: {reason}")]
    Training { step: usize, reason: String },
}

impl CoreError {
    pub(crate) fn shape(
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    ) -> Self {
        CoreError::ShapeMismatch {
            op,
            lhs_rows: lhs.0,
            lhs_cols: lhs.1,
            rhs_rows: rhs.0,
            rhs_cols: rhs.1,
        }
    }
}
