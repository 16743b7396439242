use std::path::PathBuf;

/// Errors raised across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("AP {ap} has {available} candidate beams but {needed} users need distinct beams")]
    InfeasibleCandidates {
        ap: usize,
        available: usize,
        needed: usize,
    },

    #[error("numerical rank deficiency: {0}")]
    NumericalRank(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error(
        "non-finite loss (component {component}, diag range [{diag_min:.3e}, {diag_max:.3e}]): {detail}"
    )]
    NumericalInstability {
        component: usize,
        diag_min: f64,
        diag_max: f64,
        detail: String,
    },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("fitness undefined for combination {combo}: no sampled or augmented rates")]
    UndefinedFitness { combo: usize },

    #[error("combinations without any rates: {0:?}")]
    EmptyCombinations(Vec<usize>),

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("missing input {0}")]
    Missing(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape { .. } => "shape",
            Error::InfeasibleCandidates { .. } => "infeasible_candidates",
            Error::NumericalRank(_) => "numerical_rank",
            Error::ContractViolation(_) => "contract_violation",
            Error::NumericalInstability { .. } => "numerical_instability",
            Error::Divergence { .. } => "divergence",
            Error::UndefinedFitness { .. } => "undefined_fitness",
            Error::EmptyCombinations(_) => "empty_combinations",
            Error::Format { .. } => "format",
            Error::Missing(_) => "missing_input",
            Error::Io(_) => "io",
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape {
            context,
            expected,
            got,
        })
    }
}
