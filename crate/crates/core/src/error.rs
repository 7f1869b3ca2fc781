use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::model::{CellId, GeoPoint};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point ({}, {}) lies outside the grid region", .0.lon, .0.lat)]
    OutOfRegion(GeoPoint),

    #[error("invalid coordinates ({lon}, {lat})")]
    InvalidPoint { lon: f64, lat: f64 },

    #[error("invalid region: {0}")]
    InvalidRegion(String),

    #[error("invalid grid configuration: {0}")]
    InvalidGrid(String),

    #[error("level {level} out of range 1..={levels}")]
    LevelOutOfRange { level: u32, levels: u32 },

    #[error("cell index {} out of range at level {}", .0.index, .0.level)]
    CellOutOfRange(CellId),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{malformed} of {total} input lines are malformed (limit {limit:.1}%); first bad line {first_line}: {first_reason}")]
    TooManyMalformed {
        malformed: u64,
        total: u64,
        limit: f64,
        first_line: u64,
        first_reason: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("unknown {kind} strategy `{name}` (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("no bloom filter for level {0}")]
    MissingFilter(u32),

    #[error("malformed record in {context}: {reason}")]
    Parse { context: String, reason: String },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("referential integrity violation: {0}")]
    Integrity(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("worker failed: {0}")]
    WorkerPanic(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Codec(#[from] bincode::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn parse(context: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            reason: reason.into(),
        }
    }

    /// True when the error stems from bad input data rather than an
    /// environment or internal failure.
    pub fn is_data_error(&self) -> bool {
        match self {
            // a missing input is the caller's mistake, not an internal fault
            Error::Io { source, .. } => source.kind() == io::ErrorKind::NotFound,
            Error::WorkerPanic(_) => false,
            _ => true,
        }
    }
}

pub(crate) trait IoContext<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| Error::io(context(), e))
    }
}
