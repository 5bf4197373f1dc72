//! Crate-wide error type.

use thiserror::Error;

/// Final state of a training run that failed to meet its convergence gate.
///
/// Returned inside [`Error::Training`] so callers can inspect the loss
/// curve instead of silently accepting a bad model.
#[derive(Debug, Clone)]
pub struct TrainingFailure {
    pub stage: String,
    pub epochs_run: usize,
    pub final_loss: f64,
    pub threshold: f64,
    pub loss_curve: Vec<f64>,
}

impl std::fmt::Display for TrainingFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: loss {:.6} still above threshold {:.6} after {} epochs",
            self.stage, self.final_loss, self.threshold, self.epochs_run
        )
    }
}

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on operation inputs was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Tensor/vector dimensions do not match what the model expects.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: usize,
        actual: usize,
    },

    /// Configuration failed schema or range validation.
    #[error("config error: {0}")]
    Config(String),

    /// Training did not converge below its failure threshold.
    #[error("training failure: {0}")]
    Training(TrainingFailure),

    /// The quasi-static solver could not resolve a deep penetration.
    #[error("trajectory aborted at step {step}: residual penetration {depth_m:.4} m")]
    TrajectoryAbort { step: usize, depth_m: f64 },

    /// Checkpoint or trajectory file does not conform to its format.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Process exit code for the CLI: 2 config/input, 3 training, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::Config(_) | Error::Dimension { .. } => 2,
            Error::Training(_) | Error::TrajectoryAbort { .. } => 3,
            Error::Io(_) | Error::Format(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
