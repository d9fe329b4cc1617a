use std::fmt;
use std::io;
use std::path::Path;

/// Error category, printed as the `error[kind]` prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Config,
    Io,
    Format,
    Data,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Config => "config",
            Kind::Io => "io",
            Kind::Format => "format",
            Kind::Data => "data",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("error[{}]: {message}", kind.name())]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn new(kind: Kind, message: impl fmt::Display) -> Self {
        Self {
            kind,
            message: message.to_string().replace('\n', " "),
        }
    }

    pub fn config(message: impl fmt::Display) -> Self {
        Self::new(Kind::Config, message)
    }

    pub fn format(path: &Path, message: impl fmt::Display) -> Self {
        Self::new(Kind::Format, format!("{}: {message}", path.display()))
    }

    pub fn io(path: &Path, err: io::Error) -> Self {
        Self::new(Kind::Io, format!("{}: {err}", path.display()))
    }
}

impl From<tinylm_core::Error> for CliError {
    fn from(e: tinylm_core::Error) -> Self {
        let kind = match e {
            tinylm_core::Error::Config { .. } => Kind::Config,
            _ => Kind::Data,
        };
        Self::new(kind, e)
    }
}

/// Attaches a path to IO errors.
pub trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|e| CliError::io(path, e))
    }
}
