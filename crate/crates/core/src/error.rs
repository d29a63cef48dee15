use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate bounds on dimension {dim}: lower {lower} >= upper {upper}")]
    DegenerateBounds { dim: usize, lower: f64, upper: f64 },
    #[error("continuous action space needs at least one dimension")]
    EmptySpace,
    #[error("duplicate action name {0:?}")]
    DuplicateAction(String),
    #[error("action {short:?} is a word-wise prefix of {long:?} and no end marker disambiguates")]
    PrefixCollision { short: String, long: String },
    #[error("action name must contain at least one word")]
    EmptyActionName,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("expected {expected} tokens, got {got}")]
    WrongTokenCount { expected: usize, got: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("operation requires a discrete action space")]
    NotDiscrete,
    #[error("operation requires a continuous action space")]
    NotContinuous,
    #[error("prefix {0:?} is not reachable in the token filter")]
    UnreachablePrefix(Vec<usize>),
    #[error("context of {got} timesteps exceeds capacity {capacity}")]
    ContextOverflow { got: usize, capacity: usize },
    #[error("adapter cannot encode action: {0}")]
    EncodeFailure(String),
    #[error("episode already finished")]
    EpisodeFinished,
    #[error("no path from agent to target")]
    NoPathFound,
    #[error("expert failed {failures} of {attempts} attempts")]
    ExpertFailureRate { failures: usize, attempts: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("adapter artifact missing or mismatched: {0}")]
    AdapterArtifactMissing(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
