use thiserror::Error;

/// Errors raised by the solver stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("malformed input: {0}")]
    Input(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("matrix {0} is not symmetric positive-definite")]
    NotSpd(String),
    #[error("singular system matrix at time index {level}{}", node.map(|n| format!(", node {n}")).unwrap_or_default())]
    Singular { level: usize, node: Option<usize> },
    #[error("coercivity fails: best alpha {alpha:.3e} is not positive")]
    Coercivity { alpha: f64 },
    #[error("lattice error: {0}")]
    Lattice(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error(
        "Picard iteration did not converge at rho={rho} after {iterations} iterations \
         (last increment {last_increment:.3e}, measured ratio {ratio:.3})"
    )]
    NonConvergence {
        rho: f64,
        iterations: usize,
        last_increment: f64,
        ratio: f64,
    },
    #[error("oracle: {0}")]
    Oracle(String),
    #[error("post-solve verification failed: {0}")]
    Verification(String),
    #[error("config error at {field}: {message}")]
    Config { field: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Dimension {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
