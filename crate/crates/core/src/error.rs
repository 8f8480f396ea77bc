use thiserror::Error;

/// Errors produced by the engine.
///
/// The CLI maps these onto exit codes: configuration / input problems
/// exit 2, verification failures exit 1, numeric faults exit 3.
#[derive(Debug, Error)]
pub enum Error {
    /// A primitive was given inputs whose shapes violate its shape rule.
    #[error("{primitive}: dimension error: {detail}")]
    Dimension { primitive: &'static str, detail: String },

    /// An operation name outside the closed catalog.
    #[error("unknown primitive or operation {name:?}; catalog: {catalog}")]
    Catalog { name: String, catalog: &'static str },

    /// A caller violated an API contract (non-scalar loss, frozen tape, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN or infinity showed up where it must not (gradients, updates).
    #[error("numeric fault in {what}")]
    NumericFault { what: String },

    /// Two forward passes of a supposedly deterministic function disagreed.
    #[error("determinism error: {0}")]
    Determinism(String),

    /// Invalid run or network configuration; `field` is the offending path.
    #[error("configuration error at {field}: {detail}")]
    Config { field: String, detail: String },

    /// Text failed to parse; positions are 1-based.
    #[error("parse error at line {line}, column {col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },

    /// Parsed text is well-formed but violates a structural invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Binary file with a bad magic number or inconsistent counts.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn dimension(primitive: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { primitive, detail: detail.into() }
    }

    pub fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config { field: field.into(), detail: detail.into() }
    }
}
