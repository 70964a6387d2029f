use num_bigint::BigUint;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("key generation failed: {0}")]
    KeyGeneration(String),

    /// An operand turned out to share a factor with the modulus. The gcd is
    /// surfaced because it factors N.
    #[error("{context}: operand shares factor {gcd} with the modulus")]
    NotCoprime { context: &'static str, gcd: BigUint },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("fault model violation: {0}")]
    FaultModel(String),

    #[error("insufficient known digits: {0}")]
    InsufficientKnowledge(String),

    #[error("unsupported key size: {0}")]
    UnsupportedSize(String),

    #[error("undetermined: {0}")]
    Undetermined(String),
}

pub type Result<T> = std::result::Result<T, Error>;
