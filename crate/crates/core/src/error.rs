use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Algorithm phase an engine or oracle error originated in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    V,
    Z,
    U,
    Dual,
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Step::V => "V-update",
            Step::Z => "Z-update",
            Step::U => "U-update",
            Step::Dual => "dual update",
        };
        f.write_str(name)
    }
}

/// Where a numerical failure happened. `agent` is `None` for the centralized oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Site {
    pub agent: Option<usize>,
    pub step: Step,
    pub iteration: usize,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.agent {
            Some(a) => write!(f, "agent {a}, {} at iteration {}", self.step, self.iteration),
            None => write!(f, "centralized {} at iteration {}", self.step, self.iteration),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("graph generation failed: {0}")]
    Generation(String),

    /// The symmetric system was not positive definite, even after the ridge retry.
    #[error("singular system ({site}): {detail}")]
    Singular { site: Site, detail: String },

    #[error("non-finite values produced ({site})")]
    NonFinite { site: Site },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: msg.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Singular { .. } | Error::NonFinite { .. })
    }
}
