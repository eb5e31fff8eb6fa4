//! CLI error taxonomy. Each variant owns one process exit code so scripts
//! can tell config mistakes, missing artifacts, broken chains, and corrupt
//! files apart.

use geoplace_core::classify::ClassifyError;
use geoplace_core::data::DataError;
use geoplace_core::evaluate::EvaluateError;
use geoplace_core::index::IndexError;
use geoplace_core::numerics::{CheckpointError, NumericsError};
use geoplace_core::partition::PartitionError;
use geoplace_core::retrieve::RetrieveError;
use geoplace_core::swc::SwcError;
use std::fmt;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_HASH_MISMATCH: i32 = 4;
pub const EXIT_FORMAT: i32 = 5;

#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or usage (exit 2).
    Config(String),
    /// A prerequisite artifact or input file does not exist (exit 3).
    Missing(String),
    /// Artifact chain hashes disagree (exit 4).
    HashMismatch(String),
    /// Corrupt or unrecognized file contents (exit 5).
    Format(String),
    /// Anything else (exit 1).
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Missing(_) => EXIT_MISSING,
            CliError::HashMismatch(_) => EXIT_HASH_MISMATCH,
            CliError::Format(_) => EXIT_FORMAT,
            CliError::Other(_) => EXIT_OTHER,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, msg) = match self {
            CliError::Config(m) => ("config", m),
            CliError::Missing(m) => ("missing prerequisite", m),
            CliError::HashMismatch(m) => ("hash mismatch", m),
            CliError::Format(m) => ("format", m),
            CliError::Other(m) => ("error", m),
        };
        write!(f, "{kind}: {msg}")
    }
}

impl std::error::Error for CliError {}

fn io_error(e: &std::io::Error, context: &str) -> CliError {
    if e.kind() == std::io::ErrorKind::NotFound {
        CliError::Missing(format!("{context}: {e}"))
    } else {
        CliError::Other(format!("{context}: {e}"))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        io_error(&e, "io")
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(ref io) => io_error(io, "dataset"),
            DataError::Format(m) => CliError::Format(m),
            DataError::Join(m) => CliError::Format(m),
            DataError::Range { .. } => CliError::Format(e.to_string()),
            DataError::InvalidSpec(m) => CliError::Config(m),
        }
    }
}

impl From<PartitionError> for CliError {
    fn from(e: PartitionError) -> Self {
        match e {
            PartitionError::InvalidConfig(m) => CliError::Config(m),
            PartitionError::Io(ref io) => io_error(io, "partition"),
            PartitionError::BadMagic | PartitionError::BadVersion(_) | PartitionError::Malformed => {
                CliError::Format(e.to_string())
            }
            PartitionError::NotNested(_) => CliError::Other(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(ref io) => io_error(io, "checkpoint"),
            CheckpointError::BadMagic
            | CheckpointError::BadVersion(_)
            | CheckpointError::Malformed
            | CheckpointError::NonFinite => CliError::Format(e.to_string()),
            CheckpointError::MissingMeta(_) => CliError::Format(e.to_string()),
            CheckpointError::HashMismatch { .. } => CliError::HashMismatch(e.to_string()),
        }
    }
}

impl From<ClassifyError> for CliError {
    fn from(e: ClassifyError) -> Self {
        match e {
            ClassifyError::PartitionMismatch { .. } => CliError::HashMismatch(e.to_string()),
            ClassifyError::InvalidConfig(m) => CliError::Config(m),
            ClassifyError::Checkpoint(c) => c.into(),
            ClassifyError::Partition(p) => p.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<RetrieveError> for CliError {
    fn from(e: RetrieveError) -> Self {
        match e {
            RetrieveError::PartitionMismatch { .. } => CliError::HashMismatch(e.to_string()),
            RetrieveError::InvalidConfig(m) => CliError::Config(m),
            RetrieveError::Checkpoint(c) => c.into(),
            RetrieveError::Classify(c) => c.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<IndexError> for CliError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::HashMismatch { .. } => CliError::HashMismatch(e.to_string()),
            IndexError::Io(ref io) => io_error(io, "index"),
            IndexError::BadMagic | IndexError::BadVersion(_) | IndexError::Malformed => {
                CliError::Format(e.to_string())
            }
            IndexError::ZeroK => CliError::Config(e.to_string()),
            IndexError::UnknownCell(_) => CliError::Other(e.to_string()),
            IndexError::Classify(c) => c.into(),
            IndexError::Retrieve(r) => r.into(),
        }
    }
}

impl From<SwcError> for CliError {
    fn from(e: SwcError) -> Self {
        match e {
            SwcError::HashMismatch(m) => CliError::HashMismatch(m),
            SwcError::InvalidConfig(m) => CliError::Config(m),
            SwcError::MalformedRecord(_) => CliError::Format(e.to_string()),
            SwcError::Io(ref io) => io_error(io, "predictions"),
            SwcError::Classify(c) => c.into(),
            SwcError::Index(i) => i.into(),
            SwcError::Retrieve(r) => r.into(),
        }
    }
}

impl From<EvaluateError> for CliError {
    fn from(e: EvaluateError) -> Self {
        match e {
            EvaluateError::QueryMismatch => CliError::HashMismatch(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        CliError::Other(e.to_string())
    }
}
