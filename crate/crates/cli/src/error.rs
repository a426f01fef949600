use std::fmt;

/// CLI failure, mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config file or input control.
    Config(String),
    /// The solver failed numerically (blow-up, singular regression, ...).
    Numerical(rsmp::Error),
    /// Other solver rejections of the requested run.
    Solver(rsmp::Error),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Solver(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numerical(e) => write!(f, "numerical failure: {e}"),
            CliError::Solver(e) => write!(f, "{e}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<rsmp::Error> for CliError {
    fn from(e: rsmp::Error) -> Self {
        match e {
            rsmp::Error::Io(m) => CliError::Io(m),
            e if e.is_numerical() => CliError::Numerical(e),
            e => CliError::Solver(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
