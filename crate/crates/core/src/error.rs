use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {actual})")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("CAR undefined for {0} channel(s)")]
    CarUndefined(usize),

    #[error("band {band}: edge + transition/2 = {limit} Hz reaches Nyquist {nyquist} Hz")]
    AboveNyquist {
        band: String,
        limit: f64,
        nyquist: f64,
    },

    #[error("signal of {len} samples is shorter than filter order {order}")]
    SignalTooShort { len: usize, order: usize },

    #[error("ICA did not converge after {iterations} iterations (last change {last_change:.3e}, tol {tol:.1e})")]
    NoConvergence {
        iterations: usize,
        last_change: f64,
        tol: f64,
    },

    #[error("rank-deficient data: numerical rank {rank} < requested {requested} components")]
    RankDeficient { rank: usize, requested: usize },

    #[error("nothing retained: all {0} components flagged")]
    NothingRetained(usize),

    #[error("harmonic order {order} exceeds sqrt({channels}) - 1 = {max_order}")]
    OrderTooLarge {
        order: usize,
        channels: usize,
        max_order: usize,
    },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("empty atlas region(s): {0:?}")]
    EmptyRegion(Vec<String>),

    #[error("layer {index} ({kind}): {msg}")]
    Layer {
        index: usize,
        kind: String,
        msg: String,
    },

    #[error("training aborted at epoch {epoch}: {msg}")]
    TrainingAborted { epoch: usize, msg: String },

    #[error("class {class} has {count} trials, not divisible by {k} folds (remainder {remainder})")]
    FoldImbalance {
        class: usize,
        count: usize,
        k: usize,
        remainder: usize,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("config error at {path}: {msg}")]
    Config { path: String, msg: String },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code, printed by the CLI and mapped to its exit status.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Invalid(_) => "E_INVALID",
            Error::Dimension { .. } => "E_DIMENSION",
            Error::CarUndefined(_) => "E_CAR",
            Error::AboveNyquist { .. } => "E_NYQUIST",
            Error::SignalTooShort { .. } => "E_SHORT_SIGNAL",
            Error::NoConvergence { .. } => "E_NO_CONVERGENCE",
            Error::RankDeficient { .. } => "E_RANK",
            Error::NothingRetained(_) => "E_NOTHING_RETAINED",
            Error::OrderTooLarge { .. } => "E_ORDER",
            Error::Singular(_) => "E_SINGULAR",
            Error::EmptyRegion(_) => "E_EMPTY_REGION",
            Error::Layer { .. } => "E_LAYER",
            Error::TrainingAborted { .. } => "E_TRAINING",
            Error::FoldImbalance { .. } => "E_FOLDS",
            Error::Format(_) => "E_FORMAT",
            Error::Truncated { .. } => "E_TRUNCATED",
            Error::Config { .. } => "E_CONFIG",
            Error::Stage { source, .. } => source.code(),
            Error::Io(_) => "E_IO",
            Error::Json(_) => "E_JSON",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 3,
            Error::Json(_) | Error::Format(_) | Error::Truncated { .. } => 4,
            Error::Config { .. } => 5,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 2,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
