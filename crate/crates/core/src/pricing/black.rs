//! Black-Scholes prices and implied-volatility inversion.
//!
//! Both directions go through the normalised out-of-the-money price
//! `b(x, s) = e^{x/2} Φ(x/s + s/2) - e^{-x/2} Φ(x/s - s/2)` with
//! `x = ln(F/K) ≤ 0` and `s = σ√τ`. Deep out of the money `b` is evaluated
//! through the scaled complementary error function, so `ln b` stays accurate
//! long after `b` itself would underflow, and the inversion iterates on
//! `ln b`.

use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::{erf, erfc};

use super::{OptionKind, OptionQuote};
use crate::error::{Error, PriceBound, Result};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const MAX_ITERATIONS: usize = 100;

/// `e^{x²}` with the rounding error of `x²` folded back in.
fn exp_sq(x: f64) -> f64 {
    let hi = x * x;
    let lo = x.mul_add(x, -hi);
    hi.exp() * lo.exp()
}

/// Scaled complementary error function `e^{x²} erfc(x)`.
pub fn erfcx(x: f64) -> f64 {
    if x < 0.0 {
        2.0 * exp_sq(x) - erfcx(-x)
    } else if x < 26.0 {
        exp_sq(x) * erfc(x)
    } else {
        let y = 1.0 / (x * x);
        let series = 1.0 - y * (0.5 - y * (0.75 - y * (1.875 - y * 6.5625)));
        series / (x * std::f64::consts::PI.sqrt())
    }
}

pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * std::f64::consts::FRAC_1_SQRT_2)
}

/// `ln b(x, s)` for `x ≤ 0`, `s > 0`.
pub fn norm_black_ln(x: f64, s: f64) -> f64 {
    debug_assert!(x <= 0.0 && s > 0.0);
    let h = x / s;
    let t = 0.5 * s;
    if x == 0.0 {
        erf(t * std::f64::consts::FRAC_1_SQRT_2).ln()
    } else if h + t >= 0.0 {
        let half = 0.5 * x;
        (half.exp() * norm_cdf(h + t) - (-half).exp() * norm_cdf(h - t)).ln()
    } else {
        let a = -(h + t) * std::f64::consts::FRAC_1_SQRT_2;
        let b = (t - h) * std::f64::consts::FRAC_1_SQRT_2;
        -0.5 * (h * h + t * t) + (0.5 * (erfcx(a) - erfcx(b))).ln()
    }
}

/// Normalised out-of-the-money price `b(x, s)` for `x ≤ 0`.
pub fn norm_black(x: f64, s: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    norm_black_ln(x, s).exp()
}

/// Black-Scholes price with continuous rate `r` and dividend yield `q`.
/// Zero volatility or maturity gives the discounted intrinsic value.
pub fn bs_price(spot: f64, strike: f64, tau: f64, vol: f64, r: f64, q: f64, kind: OptionKind) -> f64 {
    let df = (-r * tau).exp();
    let fwd = spot * ((r - q) * tau).exp();
    let intrinsic = match kind {
        OptionKind::Call => (fwd - strike).max(0.0),
        OptionKind::Put => (strike - fwd).max(0.0),
    };
    if vol <= 0.0 || tau <= 0.0 {
        return df * intrinsic;
    }
    let x = (fwd / strike).ln();
    let otm = (fwd * strike).sqrt() * norm_black(-x.abs(), vol * tau.sqrt());
    df * (otm + intrinsic)
}

/// Black-Scholes implied volatility of a quote.
///
/// The quote is reduced to its normalised time value `β` and
/// `ln b(x, s) = ln β` is solved by Householder(3) steps on `ln b`, started
/// from the inflection point `s = √(2|x|)` of `b` (or the exact at-the-money
/// inverse) and safeguarded by a shrinking bracket with bisection fallback.
pub fn implied_vol(quote: &OptionQuote, spot: f64, r: f64, q: f64) -> Result<f64> {
    let OptionQuote {
        strike,
        maturity: tau,
        price,
        kind,
    } = *quote;
    if !(strike > 0.0 && tau > 0.0 && spot > 0.0 && price.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "implied_vol needs positive strike, maturity and spot: {quote:?}, spot {spot}"
        )));
    }
    let df = (-r * tau).exp();
    let fwd = spot * ((r - q) * tau).exp();
    let (intrinsic, upper) = match kind {
        OptionKind::Call => ((fwd - strike).max(0.0), fwd),
        OptionKind::Put => ((strike - fwd).max(0.0), strike),
    };
    if price <= df * intrinsic {
        return Err(Error::PriceOutOfBounds {
            bound: PriceBound::Lower,
            price,
            limit: df * intrinsic,
        });
    }
    if price >= df * upper {
        return Err(Error::PriceOutOfBounds {
            bound: PriceBound::Upper,
            price,
            limit: df * upper,
        });
    }
    let time_value = price / df - intrinsic;
    if time_value <= 0.0 {
        return Err(Error::PriceOutOfBounds {
            bound: PriceBound::Lower,
            price,
            limit: df * intrinsic,
        });
    }
    let x = -(fwd / strike).ln().abs();
    let beta = time_value / (fwd * strike).sqrt();
    let s = solve_normalised(x, beta)?;
    Ok(s / tau.sqrt())
}

fn solve_normalised(x: f64, beta: f64) -> Result<f64> {
    let cap = (0.5 * x).exp();
    if !(beta > 0.0) || beta >= cap {
        return Err(Error::PriceOutOfBounds {
            bound: if beta >= cap { PriceBound::Upper } else { PriceBound::Lower },
            price: beta,
            limit: if beta >= cap { cap } else { 0.0 },
        });
    }
    let target = beta.ln();
    let mut s = if x == 0.0 {
        let std_normal = Normal::standard();
        2.0 * std_normal.inverse_cdf(0.5 * (1.0 + beta))
    } else {
        (2.0 * x.abs()).sqrt()
    };
    if !(s > 0.0 && s.is_finite()) {
        s = 1.0;
    }
    let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
    for _ in 0..MAX_ITERATIONS {
        let ln_b = norm_black_ln(x, s);
        let g = ln_b - target;
        if g == 0.0 {
            return Ok(s);
        }
        if g < 0.0 {
            lo = lo.max(s);
        } else {
            hi = hi.min(s);
        }
        let h = x / s;
        let t = 0.5 * s;
        // d ln b / ds and the higher log-derivatives from b'/b, b''/b', b'''/b'.
        let g1 = (-0.5 * (h * h + t * t) - ln_b).exp() * FRAC_1_SQRT_2PI;
        let r2 = h * h / s - 0.25 * s;
        let r3 = r2 * r2 - 3.0 * h * h / (s * s) - 0.25;
        let g2 = g1 * r2 - g1 * g1;
        let g3 = g1 * r3 - 3.0 * g1 * r2 * g1 + 2.0 * g1 * g1 * g1;
        let nu = -g / g1;
        let h2 = g2 / g1;
        let h3 = g3 / g1;
        let step = nu * (1.0 + 0.5 * h2 * nu) / (1.0 + nu * (h2 + h3 * nu / 6.0));
        let mut next = s + step;
        if !(next.is_finite() && next > lo && next < hi) {
            next = if hi.is_infinite() {
                2.0 * s.max(lo)
            } else if lo == 0.0 {
                0.5 * hi
            } else {
                (lo * hi).sqrt()
            };
        }
        if (next - s).abs() <= 4.0 * f64::EPSILON * s || (hi.is_finite() && hi - lo <= 4.0 * f64::EPSILON * hi) {
            return Ok(next);
        }
        s = next;
    }
    Err(Error::Accuracy(format!(
        "implied volatility did not converge for x = {x}, beta = {beta}"
    )))
}

/// Normalised vega `∂b/∂s = e^{-(x²/s² + s²/4)/2} / √(2π)`.
pub fn norm_vega(x: f64, s: f64) -> f64 {
    let h = x / s;
    let t = 0.5 * s;
    (-0.5 * (h * h + t * t)).exp() * FRAC_1_SQRT_2PI
}
