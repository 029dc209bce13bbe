use std::path::PathBuf;

use thiserror::Error;

use crate::data::ClassId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("class {0} is not part of the episode class set")]
    ClassNotInEpisode(ClassId),

    #[error("class {0} has no annotated pixels in any support slice")]
    EmptyClass(ClassId),

    #[error("prototype bank has no prototype for class {0}")]
    BankConstruction(ClassId),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("kernel of extent {kernel} does not fit a {height}x{width} slice")]
    KernelTooLarge {
        kernel: usize,
        height: usize,
        width: usize,
    },

    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),

    #[error("invalid phantom spec: {0}")]
    PhantomSpec(String),

    #[error("format error in {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error("{}: {cause}", path.display())]
    Io { path: PathBuf, cause: std::io::Error },

    #[error("usage: {0}")]
    Usage(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::InvalidShape(msg.into())
    }

    /// True for errors caused by bad inputs (files, arguments, shapes) rather
    /// than internal failures. The CLI maps these to exit code 2.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::BankConstruction(_))
    }
}
