use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects rank {expected}, got shape {got:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("reduction over empty axis {axis} of shape {shape:?}")]
    EmptyReduction { axis: usize, shape: Vec<usize> },
    #[error("invalid state: {0}")]
    State(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("input too short: {0}")]
    TooShort(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },
    #[error("unsupported version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Corruption { stored: u64, computed: u64 },
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {step} (last good checkpoint: {last_good})")]
    NonFiniteLoss { step: usize, last_good: String },
    #[error("loss mask selects no positions")]
    DegenerateLoss,
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// True for problems with the caller's inputs (bad files, configs or
    /// names) as opposed to numerical or internal failures.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Io { .. }
                | Error::Json(_)
                | Error::Csv(_)
                | Error::Format { .. }
                | Error::UnsupportedVersion { .. }
                | Error::Corruption { .. }
                | Error::TooShort(_)
                | Error::UnknownParameter(_)
                | Error::UndefinedMetric(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
