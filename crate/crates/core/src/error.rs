use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum MdmaError {
    #[error("non-finite input")]
    NonFiniteInput,

    #[error("inversion bracket overflow")]
    InversionBracketOverflow,

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid query: {0}")]
    InvalidQuery(String),

    #[error("conditioning on zero-density event")]
    ZeroDensityCondition,

    #[error("empty observation")]
    EmptyObservation,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("insufficient data for coupling")]
    InsufficientCouplingData,

    #[error("non-finite loss at row {row}")]
    NonFiniteLoss { row: usize },

    #[error("subsets must be disjoint and non-empty: {0}")]
    InvalidSubsets(String),

    #[error("unstable conditioning: {dropped} of {total} rows dropped")]
    UnstableConditioning { dropped: usize, total: usize },

    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },

    #[error("row {0} fully missing")]
    FullyMissingRow(usize),

    #[error("ragged row {row}: expected {expected} fields, found {found}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("archive error: {0}")]
    Archive(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for MdmaError {
    fn from(e: std::io::Error) -> Self {
        MdmaError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, MdmaError>;
