use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{0}")]
    Core(#[from] genhmm::Error),

    /// An earlier failure repeated with its original exit status.
    #[error("{message}")]
    Reported { code: i32, message: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn reported(&self) -> CliError {
        CliError::Reported {
            code: self.exit_code(),
            message: self.to_string(),
        }
    }

    /// Process exit status: 2 configuration, 3 data (including
    /// unreadable checkpoints), 4 numerical, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Reported { code, .. } => *code,
            CliError::Core(e) if e.is_data() => 3,
            CliError::Core(genhmm::Error::Checkpoint(_)) => 3,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(genhmm::Error::Invalid(_)) => 2,
            _ => 1,
        }
    }
}
