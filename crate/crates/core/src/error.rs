use thiserror::Error;

pub type Result<T, E = DspError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("scenario has no target track")]
    NoTarget,
    #[error("scenario has {0} target tracks, expected exactly one")]
    MultipleTargets(usize),
    #[error("target heading is degenerate (zero-length tangent)")]
    DegenerateHeading,
    #[error("target state at t=0 is padded")]
    PaddedTarget,
    #[error("infeasible synthesis spec: {0}")]
    InfeasibleSpec(String),
    #[error("parse error{}: {field}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse {
        line: Option<usize>,
        field: String,
        message: String,
    },
    #[error("schema version mismatch: found {found}, expected {expected}")]
    SchemaVersionMismatch { found: u64, expected: u64 },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("no grid point lies in freespace")]
    EmptyGraph,
    #[error("scenario map has no lanes")]
    EmptyMap,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFiniteValue(String),
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("target track has no ground-truth future")]
    MissingGtFuture,
    #[error("checkpoint checksum mismatch (stored {stored}, computed {computed})")]
    ChecksumMismatch { stored: String, computed: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DspError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        DspError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DspError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn parse(field: impl Into<String>, message: impl Into<String>) -> Self {
        DspError::Parse {
            line: None,
            field: field.into(),
            message: message.into(),
        }
    }
}
