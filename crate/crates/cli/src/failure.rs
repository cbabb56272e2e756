use std::fmt;

/// Outcome of a command that did not fully succeed, mapped to an exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config, paths or inputs.
    Config(String),
    /// Training diverged; the last good state was saved where possible.
    Numerical(String),
    /// The stage ran but produced nothing usable.
    Empty(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numerical(_) => 3,
            Failure::Empty(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "error: {m}"),
            Failure::Numerical(m) => write!(f, "numerical abort: {m}"),
            Failure::Empty(m) => write!(f, "warning: {m}"),
        }
    }
}

impl From<hybrid_core::Error> for Failure {
    fn from(e: hybrid_core::Error) -> Self {
        match e {
            hybrid_core::Error::Numerical(m) => Failure::Numerical(m),
            other => Failure::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Config(e.to_string())
    }
}
