use std::fmt;

/// Command failure, grouped by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, missing prerequisites, unreadable artifacts.
    Config(String),
    /// Integration, divergence or non-finite values.
    Numeric(String),
    /// `verify` found at least one failing check.
    Verify(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Verify(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Verify(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<reconbench::Error> for CliError {
    fn from(e: reconbench::Error) -> Self {
        use reconbench::Error as E;
        match e {
            E::Integration { .. } | E::NonFinite { .. } | E::Divergence { .. } | E::TimeDomain(_) => CliError::Numeric(e.to_string()),
            E::Config(_) | E::EmptyDataset | E::Checkpoint(_) | E::Io(_) | E::Json(_) | E::Dimension { .. } => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(format!("i/o: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Config(format!("csv: {e}"))
    }
}
