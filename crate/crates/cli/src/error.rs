use std::fmt;

/// Failure of a command, split by exit code: 2 for configuration, 3 for data.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
        }
    }
}

impl From<patchscore::Error> for CliError {
    fn from(e: patchscore::Error) -> Self {
        if e.is_config_error() {
            CliError::Config(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

/// Attaches a path to I/O and parse failures.
pub fn at<T, E: Into<CliError>>(path: &std::path::Path, r: Result<T, E>) -> CliResult<T> {
    r.map_err(|e| match e.into() {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
    })
}
