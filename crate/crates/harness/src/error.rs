use std::path::PathBuf;

use sadag_core::SadagError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { key: String, line: usize },

    #[error("line {line}: invalid value for {key:?}: {detail}")]
    Invalid { key: String, line: usize, detail: String },

    #[error("line {line}: {detail}")]
    Syntax { line: usize, detail: String },
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty output path")]
    EmptyPath,

    #[error("truncated at offset {offset}: need {need} more bytes")]
    Truncated { offset: usize, need: usize },

    #[error("bad magic at offset {offset}: expected {expected:?}, found {found:?}")]
    BadMagic { offset: usize, expected: &'static str, found: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("dimensions overflow at offset {offset}")]
    DimOverflow { offset: usize },

    #[error("tensor name at offset {offset} is not UTF-8")]
    Utf8 { offset: usize },

    #[error("{extra} unexpected trailing bytes at offset {offset}")]
    Trailing { offset: usize, extra: usize },

    #[error("invalid contents: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Core(#[from] SadagError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path} was produced by config {found:016x}, expected {expected:016x} (pass --force to use it anyway)")]
    Mismatch { path: PathBuf, expected: u64, found: u64 },

    #[error("{0}")]
    Invalid(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<HarnessError>,
    },
}

impl HarnessError {
    /// Stage tag of a failed run, if any.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            HarnessError::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
