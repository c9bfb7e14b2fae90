use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid size: {0}")]
    InvalidSize(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("schema error in `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("unknown agent id {0}")]
    UnknownAgent(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("embedding service error: {0}")]
    EmbedService(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("negative graph must differ from the anchor graph (index {0})")]
    InvalidNegative(usize),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Stable short name used in machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidSize(_) => "invalid_size",
            Error::InvalidParam(_) => "invalid_param",
            Error::Parse { .. } => "parse_error",
            Error::Schema { .. } => "schema_error",
            Error::UnknownAgent(_) => "unknown_agent",
            Error::Shape(_) => "shape_error",
            Error::EmbedService(_) => "embed_service_error",
            Error::InvalidGraph(_) => "invalid_graph",
            Error::InvalidNegative(_) => "invalid_negative",
            Error::InsufficientData(_) => "insufficient_data",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::DimMismatch { .. } => "dim_mismatch",
            Error::Io { .. } => "io_error",
        }
    }

    /// Process exit status used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::Parse { .. } | Error::Schema { .. } => 4,
            Error::DimMismatch { .. } => 5,
            Error::EmbedService(_) => 6,
            _ => 7,
        }
    }
}
