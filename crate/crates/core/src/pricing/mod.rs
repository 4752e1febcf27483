//! European option pricing: Fourier inversion of the Bates characteristic
//! function, Black-Scholes reference prices and implied volatilities.

mod black;
mod fourier;
pub mod quadrature;

pub use black::{bs_price, erfcx, implied_vol, norm_black, norm_black_ln, norm_cdf, norm_vega};
pub use fourier::{call_price, call_prices, otm_prices, put_price};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptionKind {
    Call,
    Put,
}

impl std::str::FromStr for OptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "call" | "c" => Ok(OptionKind::Call),
            "put" | "p" => Ok(OptionKind::Put),
            other => Err(Error::InvalidParameter(format!("unknown option kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptionQuote {
    pub strike: f64,
    pub maturity: f64,
    pub price: f64,
    pub kind: OptionKind,
}

impl OptionQuote {
    pub fn validate(&self) -> Result<()> {
        if !(self.strike > 0.0 && self.maturity > 0.0 && self.price >= 0.0) {
            return Err(Error::InvalidParameter(format!("invalid quote {self:?}")));
        }
        Ok(())
    }
}

/// Settings of the damped Fourier inversion.
///
/// `trunc` is the frequency up to which the base panels are laid out; the
/// range is extended panel by panel while the integrand envelope is still
/// above tolerance. `tol` is an absolute tolerance on the price per unit of
/// spot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DampingConfig {
    pub alpha: f64,
    pub trunc: f64,
    pub n_nodes: usize,
    pub tol: f64,
}

impl Default for DampingConfig {
    fn default() -> Self {
        DampingConfig {
            alpha: 0.75,
            trunc: 200.0,
            n_nodes: 256,
            tol: 1e-10,
        }
    }
}

impl DampingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.trunc > 0.0 && self.n_nodes >= 64 && self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "damping config needs alpha > 0, trunc > 0, n_nodes >= 64, tol > 0: {self:?}"
            )));
        }
        Ok(())
    }
}
