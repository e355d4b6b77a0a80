use std::fmt;
use std::path::Path;

/// Errors of the std layer. Every variant maps onto a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration, reported before any compute starts.
    #[error("config error{}: {message}", Location { path: source_path, line: *line, field })]
    Config { source_path: Option<String>, line: Option<usize>, field: Option<String>, message: String },

    /// A data or archive file could not be parsed.
    #[error("{path}{}: {message}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Format { path: String, line: Option<usize>, message: String },

    /// A file the run needs does not exist.
    #[error("{what} not found: {path}")]
    Missing { what: &'static str, path: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] plotfuse_core::Error),
}

struct Location<'a> {
    path: &'a Option<String>,
    line: Option<usize>,
    field: &'a Option<String>,
}

impl fmt::Display for Location<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(p) = self.path {
            write!(f, " in {p}")?;
        }
        if let Some(l) = self.line {
            write!(f, " at line {l}")?;
        }
        if let Some(k) = self.field {
            write!(f, " (field `{k}`)")?;
        }
        Ok(())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { source_path: None, line: None, field: Some(field.into()), message: message.into() }
    }

    pub fn format(path: &Path, line: Option<usize>, message: impl Into<String>) -> Self {
        Error::Format { path: path.display().to_string(), line, message: message.into() }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Missing { .. } | Error::Core(plotfuse_core::Error::Config { .. }) => {
                EXIT_CONFIG
            }
            _ => EXIT_RUNTIME,
        }
    }
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing { what: "file", path: path.display().to_string() },
        _ => Error::io(path, e),
    })
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
