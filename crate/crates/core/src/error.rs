use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by memory devices and the kernels that drive them.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DeviceError {
    #[error("access out of range: word {address} (+{count}) exceeds region of {word_count} words")]
    OutOfRange {
        address: usize,
        count: usize,
        word_count: usize,
    },
    #[error("scratchpad access out of range: slot {slot} exceeds {scratchpad_words} words")]
    ScratchpadOutOfRange { slot: usize, scratchpad_words: usize },
    #[error("invalid device configuration: {0}")]
    Config(String),
    #[error("failed to allocate a {bytes}-byte test region")]
    Allocation { bytes: usize },
}

/// Errors from the generator constructors.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PatternError {
    #[error("Park-Miller seed {0} is not in [1, 2^31 - 2]")]
    InvalidSeed(u64),
    #[error("LCG period {0} must be a power of two in [4, 65536]")]
    InvalidPeriod(u32),
    #[error("LCG constants a={a:#x} c={c:#x} do not give period {k}")]
    PeriodMismatch { a: u32, c: u32, k: u32 },
    #[error("unknown walking-pattern code `{0}`")]
    UnknownCode(String),
}

/// Errors from the coalescing model.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CoalesceError {
    #[error("access at byte {address} by lane {lane} is not 4-byte aligned")]
    Misaligned { lane: u8, address: u64 },
    #[error("lane {0} is outside a half-warp")]
    LaneOutOfRange(u8),
    #[error("lane {0} appears twice in one half-warp")]
    DuplicateLane(u8),
    #[error("unknown lane-to-address mapping `{0}`")]
    UnknownMapping(String),
    #[error("round {0} is not in [0, 20)")]
    InvalidRound(u32),
    #[error("traffic report needs at least 320 words, got {0}")]
    RegionTooSmall(usize),
}

/// Errors from record files, configuration files and analysis.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: field `{field}`: {message}")]
    Field {
        line: usize,
        field: String,
        message: String,
    },
    #[error("line {line}: unsupported schema_version {version}")]
    Schema { line: usize, version: u64 },
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("no cards pass cutoff {0}")]
    NoCards(u64),
    #[error("{0}")]
    Empty(String),
    #[error(transparent)]
    Device(#[from] DeviceError),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
