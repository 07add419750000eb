use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("row {row} has norm {norm:e}, too small to normalize")]
    DegenerateRow { row: usize, norm: f64 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("row {row} is not a probability distribution (sum {sum})")]
    Distribution { row: usize, sum: f64 },

    #[error("expected a scalar, got shape {0:?}")]
    Rank(Vec<usize>),

    #[error("non-finite function value {value} during evaluation at coordinate {coord}")]
    Evaluation { coord: usize, value: f64 },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("batch of {batch} keys exceeds queue capacity {capacity}")]
    Capacity { batch: usize, capacity: usize },

    #[error("key row {row} has norm {norm}, expected unit norm")]
    Normalization { row: usize, norm: f64 },

    #[error("queue is empty")]
    EmptyQueue,

    #[error("index {index} out of range for {len} rows")]
    Index { index: usize, len: usize },

    #[error("unknown sample id {0}")]
    UnknownId(u64),

    #[error("invalid batch plan: {0}")]
    Plan(String),

    #[error("queue holds {fill} keys, need at least {needed}")]
    Warmup { fill: usize, needed: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("schedule step {step} exceeds total {total}")]
    Schedule { step: usize, total: usize },

    #[error("labels contain a single class")]
    DegenerateLabels,

    #[error("batch of {0} is too small for in-batch contrast")]
    DegenerateBatch(usize),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format { offset, msg: msg.into() }
    }
}
