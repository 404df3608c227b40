use std::fmt;
use std::path::Path;

/// Failure class, mapped one-to-one onto the process exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { kind: Kind::Usage, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError { kind: Kind::Data, message: message.into() }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        CliError { kind: Kind::Numeric, message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            Kind::Usage => 2,
            Kind::Data => 3,
            Kind::Numeric => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<avcap::Error> for CliError {
    fn from(e: avcap::Error) -> Self {
        let kind = match &e {
            avcap::Error::NonFinite(_) => Kind::Numeric,
            avcap::Error::InvalidArgument(_) => Kind::Usage,
            _ => Kind::Data,
        };
        CliError { kind, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::data(e.to_string())
    }
}

/// Prefixes an error with the path it concerns, keeping its class.
pub trait WithPath<T> {
    fn at(self, path: &Path) -> CliResult<T>;
}

impl<T, E: Into<CliError>> WithPath<T> for Result<T, E> {
    fn at(self, path: &Path) -> CliResult<T> {
        self.map_err(|e| {
            let e = e.into();
            CliError { kind: e.kind, message: format!("{}: {}", path.display(), e.message) }
        })
    }
}
