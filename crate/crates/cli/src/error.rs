use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config {}: {message}", path.display())]
    Config { path: PathBuf, message: String },

    #[error(transparent)]
    Core(#[from] sled_core::Error),

    /// Outputs were written but the run missed its target.
    #[error("budget exhausted: {0}")]
    BudgetExhausted(String),
}

impl CliError {
    /// 0 success, 1 usage or I/O, 2 budget exhausted, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::BudgetExhausted(_) => 2,
            CliError::Core(sled_core::Error::Diverged { .. } | sled_core::Error::NonFinite { .. }) => 3,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::BudgetExhausted("x".into()).exit_code(), 2);
        let diverged = sled_core::Error::Diverged { step: 4, last_good: Some(3) };
        assert_eq!(CliError::from(diverged).exit_code(), 3);
        assert_eq!(CliError::from(sled_core::Error::UnknownInstruction(9)).exit_code(), 1);
    }
}
