use thiserror::Error;

/// Errors shared across the crate. Numerical failures carry enough context
/// to locate the offending coordinate, pivot or trajectory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite result in {context}{}", fmt_index(.index))]
    NonFinite {
        context: &'static str,
        index: Option<usize>,
    },

    #[error("singular matrix: pivot {pivot_index} has magnitude below 1e-12")]
    SingularMatrix { pivot_index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("sampler for '{system}' exhausted its rejection budget ({attempts} attempts)")]
    SamplingExhausted { system: String, attempts: usize },

    #[error("trajectory {index} failed to generate: {source}")]
    Generation {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("step size underflow at t = {t_reached}: system too stiff for the requested tolerance")]
    StepSizeUnderflow { t_reached: f64 },

    #[error("training diverged at epoch {epoch} after {skips} consecutive non-finite steps")]
    TrainingDiverged { epoch: usize, skips: usize },

    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("reverse-mode tape is already active on this thread; nested parameter gradients are not supported")]
    TapeInUse,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn fmt_index(index: &Option<usize>) -> String {
    match index {
        Some(i) => format!(" (coordinate {i})"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;
