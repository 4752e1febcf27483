use num_complex::Complex64;
use thiserror::Error;

/// Which side of the no-arbitrage price band a quote violated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriceBound {
    /// Price at or below discounted intrinsic value.
    Lower,
    /// Price at or above the discounted forward (calls) or strike (puts).
    Upper,
}

impl std::fmt::Display for PriceBound {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PriceBound::Lower => write!(f, "lower (intrinsic)"),
            PriceBound::Upper => write!(f, "upper (maximum)"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite {what} at u = {u}, tau = {tau}")]
    NumericDomain {
        what: &'static str,
        u: Complex64,
        tau: f64,
    },

    #[error("price {price} violates the {bound} bound {limit}")]
    PriceOutOfBounds {
        bound: PriceBound,
        price: f64,
        limit: f64,
    },

    #[error("accuracy target not reached: {0}")]
    Accuracy(String),

    #[error("at grid point (maturity {maturity}, moneyness {moneyness}): {source}")]
    GridPoint {
        maturity: usize,
        moneyness: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("sampling bounds rejected: {0}")]
    Bounds(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: String, expected: String },

    #[error("at simulation step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    /// True for errors that come from the numerics (bad domain, accuracy,
    /// price band) as opposed to I/O or configuration.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NumericDomain { .. }
            | Error::PriceOutOfBounds { .. }
            | Error::Accuracy(_)
            | Error::Divergence { .. } => true,
            Error::GridPoint { source, .. } | Error::Step { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
