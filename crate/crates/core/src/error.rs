use thiserror::Error;

/// Every failure the library can report.
///
/// Variants are grouped loosely by the subsystem that raises them; the CLI
/// maps them onto process exit codes through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: degenerate mask (row {row} has no valid position)")]
    DegenerateMask { op: &'static str, row: usize },
    #[error("{op}: non-finite input")]
    NonFiniteInput { op: &'static str },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor does not belong to this tape")]
    ForeignTensor,
    #[error("parameter '{0}' has no gradient")]
    MissingGrad(String),
    #[error("function is not deterministic: two evaluations differ ({0} vs {1})")]
    NonDeterministic(f64, f64),

    #[error("non-causal pair: negative elapsed time {0}")]
    NonCausal(f64),
    #[error("empty candidate set")]
    EmptyCandidates,
    #[error("unknown modality '{0}'")]
    UnknownModality(String),
    #[error("modality degenerate: every {0} feature was dropped")]
    ModalityDegenerate(String),
    #[error("no training events for modality {0}")]
    NoEvents(String),
    #[error("cutoff-post-mortem: cutoff {cutoff} is after death at {death}")]
    CutoffPostMortem { cutoff: f64, death: f64 },
    #[error("no present modality")]
    NoPresentModality,

    #[error("NaN score for sample '{0}'")]
    NanScore(String),
    #[error("unpaired inputs: {0}")]
    Unpaired(String),
    #[error("p-value must lie in (0, 1], got {0}")]
    InvalidPValue(f64),
    #[error("k = {k} folds requested for {n} items")]
    TooManyFolds { k: usize, n: usize },

    #[error("line {line}: {msg}")]
    Schema { line: usize, msg: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-comparable runs: {0}")]
    NonComparable(String),
    #[error("{0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn json(path: impl AsRef<std::path::Path>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::NonFiniteLoss { .. }
            | Error::NonFiniteInput { .. }
            | Error::NonDeterministic(..) => 3,
            _ => 2,
        }
    }
}
