use thiserror::Error;

/// Errors raised by the estimators, generators and file readers.
#[derive(Debug, Error)]
pub enum CdcdError {
    /// Malformed or inconsistent user input (shapes, ranges, non-finite cells).
    #[error("invalid input: {0}")]
    Input(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    /// A numerical routine failed where it structurally should not.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CdcdError {
    pub fn input(msg: impl Into<String>) -> Self {
        CdcdError::Input(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        CdcdError::Numerical(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CdcdError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by the caller's data or arguments.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            CdcdError::Input(_) | CdcdError::Dimension { .. } | CdcdError::Csv(_) | CdcdError::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, CdcdError>;

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(CdcdError::Dimension {
            context,
            expected,
            found,
        })
    }
}
