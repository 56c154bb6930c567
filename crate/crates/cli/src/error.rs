use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

use demand_dml_core::{Error as CoreError, ErrorClass};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {message}", path.display())]
    Input { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("stage `{stage}`{}: {source}", Location(path))]
    Stage {
        stage: &'static str,
        path: Option<PathBuf>,
        #[source]
        source: Box<CliError>,
    },
    #[error("{}: {source}", path.display())]
    At {
        path: PathBuf,
        #[source]
        source: Box<CliError>,
    },
}

struct Location<'a>(&'a Option<PathBuf>);

impl fmt::Display for Location<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(p) => write!(f, " ({})", p.display()),
            None => Ok(()),
        }
    }
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn input(path: &Path, message: impl Into<String>) -> Self {
        CliError::Input {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    pub fn at(self, path: &Path) -> Self {
        CliError::At {
            path: path.to_path_buf(),
            source: Box::new(self),
        }
    }

    pub fn in_stage(self, stage: &'static str, path: Option<&Path>) -> Self {
        CliError::Stage {
            stage,
            path: path.map(Path::to_path_buf),
            source: Box::new(self),
        }
    }

    /// 2 for configuration errors, 3 for data errors, 4 for numerical ones.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::Input { .. } => 3,
            CliError::Core(e) => match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numerical => 4,
            },
            CliError::Stage { source, .. } | CliError::At { source, .. } => source.exit_code(),
        }
    }
}

pub trait StageContext<T> {
    fn stage(self, stage: &'static str, path: Option<&Path>) -> Result<T, CliError>;
}

impl<T, E: Into<CliError>> StageContext<T> for Result<T, E> {
    fn stage(self, stage: &'static str, path: Option<&Path>) -> Result<T, CliError> {
        self.map_err(|e| e.into().in_stage(stage, path))
    }
}
