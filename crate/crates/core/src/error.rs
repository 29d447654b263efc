use thiserror::Error;

/// Errors produced by the solvers, the simulator and the problem-file reader.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("not found: {0}")]
    NotFound(String),

    /// The perturbed inner matrix `R + εI + DᵀPD` is numerically singular.
    #[error("degenerate perturbation at s = {s}: condition number {condition:.3e} exceeds 1e14")]
    DegeneratePerturbation { s: f64, condition: f64 },

    /// Backward integration left the finite range. `s` is the first bad node.
    #[error("Riccati solution blew up at s = {s}")]
    BlowUp { s: f64 },

    /// The problem is outside the input class an operation supports.
    #[error("unsupported problem class: {0}")]
    WrongClass(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Too many simulated paths left the finite range.
    #[error("{flagged} of {paths} simulated paths blew up")]
    EnsembleBlowUp { flagged: usize, paths: usize },

    /// A ladder member failed; wraps the underlying error with its ε.
    #[error("ε = {epsilon}: {source}")]
    Ladder {
        epsilon: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
