use thiserror::Error;

#[derive(Debug, Error)]
pub enum OqwError {
    /// Shapes or ids are inconsistent.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("numerical error: {message}")]
    Numerical {
        message: String,
        residual: Option<f64>,
        spectral_radius: Option<f64>,
    },
}

impl OqwError {
    pub fn numerical(message: impl Into<String>) -> Self {
        OqwError::Numerical {
            message: message.into(),
            residual: None,
            spectral_radius: None,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            OqwError::Numerical { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, OqwError>;
