use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("panel structure error: {0}")]
    Structure(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("rank deficient design; dependent columns: {columns:?}")]
    Rank { columns: Vec<String> },
    #[error("embedding geometry error: {0}")]
    Geometry(String),
    #[error("unstable state recursion: {0}")]
    Stability(String),
    #[error("fold {fold} leaves {rows} training rows, learner needs at least {needed}")]
    FoldSize {
        fold: usize,
        rows: usize,
        needed: usize,
    },
}

/// Coarse grouping used by front ends to choose exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Stability(_) | Error::Geometry(_) => ErrorClass::Config,
            Error::Domain(_)
            | Error::Length(_)
            | Error::Structure(_)
            | Error::Dimension { .. }
            | Error::FoldSize { .. } => ErrorClass::Data,
            Error::Degenerate(_) | Error::Rank { .. } => ErrorClass::Numerical,
        }
    }

    pub(crate) fn dim(context: &'static str, expected: usize, found: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            found,
        }
    }
}
