use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{name} must be positive and finite, got {value}")]
    NotPositive { name: &'static str, value: f64 },

    #[error("{name} must be finite, got {value}")]
    NotFinite { name: &'static str, value: f64 },

    #[error("{name}: expected dimension {expected}, got {actual}")]
    DimensionMismatch {
        name: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{name} must not be empty")]
    Empty { name: &'static str },

    #[error("{name} needs at least {min} components, got {actual}")]
    TooShort {
        name: &'static str,
        min: usize,
        actual: usize,
    },

    #[error("cannot smooth an all-zero vector")]
    AllZero,

    #[error("component {index} of {name} is zero; smooth the distribution first")]
    ZeroComponent { name: &'static str, index: usize },

    #[error("{name} sums to {sum}, expected 1")]
    NotNormalized { name: &'static str, sum: f64 },

    #[error("invalid configuration: {field}: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("split fractions must each be positive and sum to 1, got sum {sum}")]
    BadFractions { sum: f64 },

    #[error("backbone must be frozen before head training; run pretraining first")]
    BackboneNotFrozen,

    #[error("backbone is already frozen")]
    BackboneFrozen,

    #[error("id {id} not found in reference database")]
    UnknownId { id: u64 },

    #[error("duplicate record id {id}")]
    DuplicateId { id: u64 },

    #[error("label index {index} out of range for head with {len} labels")]
    LabelIndex { index: usize, len: usize },

    #[error("k = {k} exceeds database size {len}")]
    KTooLarge { k: usize, len: usize },

    #[error("{path}:{line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Validate that `value` is finite and strictly positive.
pub(crate) fn ensure_positive(name: &'static str, value: f64) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::NotFinite { name, value });
    }
    if value <= 0.0 {
        return Err(Error::NotPositive { name, value });
    }
    Ok(())
}

pub(crate) fn ensure_dims(name: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            name,
            expected,
            actual,
        });
    }
    Ok(())
}
