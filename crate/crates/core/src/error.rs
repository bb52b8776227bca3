use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("event scheduled at {at}s but clock is already at {now}s")]
    ScheduleInPast { at: f64, now: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerfError {
    #[error("input length {len} outside prefill grid (max {max})")]
    PrefillOutOfGrid { len: u32, max: u32 },
    #[error("decode query (batch {batch}, len {len}) outside grid (max batch {max_batch}, max len {max_len})")]
    DecodeOutOfGrid {
        batch: u32,
        len: u32,
        max_batch: u32,
        max_len: u32,
    },
    #[error("malformed perf table: {0}")]
    Malformed(String),
    #[error("scale operation with identical sizes ({0} bytes) must not be issued")]
    NoOpScale(u64),
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },
    #[error("requested {requested} functions but trace only has {available}")]
    NotEnoughFunctions { requested: usize, available: usize },
    #[error("length dataset is empty")]
    EmptyDataset,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid value for `{field}`: {msg}")]
    Invalid { field: String, msg: String },
    #[error("file for `{field}` not found: {path}")]
    MissingFile { field: String, path: PathBuf },
    #[error("model `{model}` has no perf table for {class} nodes")]
    MissingTable { model: String, class: String },
    #[error("bad override `{0}`: expected key=value")]
    BadOverride(String),
}

/// Top-level error for experiment runs.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Perf(#[from] PerfError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Config-class errors map to exit code 2, everything else to 3.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Workload(_))
            || matches!(self, Error::Perf(PerfError::Malformed(_)))
    }
}
