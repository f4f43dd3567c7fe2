use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// Variants fall into two families that the CLI maps to distinct exit codes:
/// validation problems (bad input, bad shapes, bad files) and numerical
/// failures (poles, non-finite losses, failed gradient checks).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("pole: {0}")]
    Pole(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Shape {
            op,
            lhs: format!("{}x{}", lhs.0, lhs.1),
            rhs: format!("{}x{}", rhs.0, rhs.1),
        }
    }

    /// True for errors that indicate a numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Pole(_) | Error::Numerical(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
