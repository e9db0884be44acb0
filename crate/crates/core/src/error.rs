use thiserror::Error;

/// Errors raised by the simulation, oracle and I/O layers.
#[derive(Debug, Error)]
pub enum SpideError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in layer {layer} at step {step}")]
    NonFinite { layer: usize, step: usize },

    #[error("fixed-point solve did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("implicit system is singular or non-contractive (masked contraction bound {contraction:.4})")]
    SingularSystem { contraction: f64 },

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("checkpoint format version mismatch: found {found:?}, expected {expected:?}")]
    VersionMismatch { found: String, expected: String },

    #[error("shape conflict for tensor `{name}`: checkpoint has {found:?}, network expects {expected:?}")]
    ShapeConflict {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SpideError>;

pub(crate) fn check_dim(context: &str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(SpideError::DimensionMismatch {
            context: context.to_string(),
            expected,
            actual,
        })
    }
}
