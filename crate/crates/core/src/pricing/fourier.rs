//! Damped Fourier inversion of the call payoff.
//!
//! For unit spot and log-strike `k`,
//!
//! ```text
//! C(k) = e^{-αk}/π ∫_0^∞ Re[e^{-iwk} ψ(w)] dw,
//! ψ(w) = e^{-rτ} E[e^{(α+1+iw) X_τ}] / (α² + α - w² + i(2α+1) w).
//! ```
//!
//! With `α < -1` the same integral returns the put price; strikes far below
//! the forward take that route so the `e^{-αk}` prefactor never amplifies
//! quadrature error. All strikes of one maturity share the characteristic
//! function evaluations.

use num_complex::Complex64;

use super::quadrature::GaussLegendre;
use super::DampingConfig;
use crate::affine::{log_mgf, HestonParams, JumpSpec, MarketState};
use crate::error::{Error, Result};

/// Log-forward-moneyness below which a strike is priced through the put.
const PUT_ROUTE_BELOW: f64 = -1.0;
const MAX_DEPTH: usize = 14;
const MAX_FREQUENCY: f64 = 1e5;

struct Strip<'a> {
    ks: &'a [f64],
    scales: Vec<f64>,
    tol_density: f64,
}

impl Strip<'_> {
    /// GL16 integral of the unscaled strike integrands over `[a, b]`, plus the
    /// largest `|ψ|` seen at the nodes.
    fn panel<F>(&self, f: &F, a: f64, b: f64) -> Result<(Vec<f64>, f64)>
    where
        F: Fn(f64) -> Result<Complex64>,
    {
        let mut out = vec![0.0; self.ks.len()];
        let mut env = 0.0_f64;
        for (w, wt) in GaussLegendre::sixteen().on(a, b) {
            let psi = f(w)?;
            env = env.max(psi.norm());
            for (o, &k) in out.iter_mut().zip(self.ks) {
                let (sin, cos) = (w * k).sin_cos();
                *o += wt * (psi.re * cos + psi.im * sin);
            }
        }
        Ok((out, env))
    }

    fn adapt<F>(&self, f: &F, a: f64, b: f64, coarse: Vec<f64>, depth: usize) -> Result<Vec<f64>>
    where
        F: Fn(f64) -> Result<Complex64>,
    {
        let mid = 0.5 * (a + b);
        let (left, _) = self.panel(f, a, mid)?;
        let (right, _) = self.panel(f, mid, b)?;
        let fine: Vec<f64> = left.iter().zip(&right).map(|(l, r)| l + r).collect();
        let err = fine
            .iter()
            .zip(&coarse)
            .zip(&self.scales)
            .map(|((f, c), s)| (f - c).abs() * s)
            .fold(0.0, f64::max);
        if err <= self.tol_density * (b - a) {
            return Ok(fine);
        }
        if depth >= MAX_DEPTH {
            return Err(Error::Accuracy(format!(
                "Fourier quadrature on [{a}, {b}] still changes by {err:e} after {MAX_DEPTH} refinements"
            )));
        }
        let mut l = self.adapt(f, a, mid, left, depth + 1)?;
        let r = self.adapt(f, mid, b, right, depth + 1)?;
        l.iter_mut().zip(r).for_each(|(x, y)| *x += y);
        Ok(l)
    }

    fn integrate<F>(&self, f: &F, cfg: &DampingConfig) -> Result<Vec<f64>>
    where
        F: Fn(f64) -> Result<Complex64>,
    {
        let n_panels = cfg.n_nodes.div_ceil(16);
        let width = cfg.trunc / n_panels as f64;
        let max_scale = self.scales.iter().cloned().fold(0.0, f64::max);
        let mut acc = vec![0.0; self.ks.len()];
        let mut lo = 0.0;
        let mut quiet = 0;
        loop {
            let hi = lo + width;
            let (coarse, env) = self.panel(f, lo, hi)?;
            let fine = self.adapt(f, lo, hi, coarse, 0)?;
            acc.iter_mut().zip(fine).for_each(|(a, v)| *a += v);
            if hi >= cfg.trunc * (1.0 - 1e-12) {
                // Tail bound: envelope times the distance already covered.
                if env * hi * max_scale < 1e-2 * cfg.tol {
                    quiet += 1;
                } else {
                    quiet = 0;
                }
                if quiet >= 2 {
                    break;
                }
                if hi > MAX_FREQUENCY {
                    return Err(Error::Accuracy(format!(
                        "Fourier integrand still at {env:e} at frequency {hi}"
                    )));
                }
            }
            lo = hi;
        }
        Ok(acc.iter().zip(&self.scales).map(|(a, s)| a * s).collect())
    }
}

/// Normalised price below which an out-of-the-money strike is repriced with
/// its own damping exponent.
const RESOLVE_BELOW: f64 = 1e-5;

/// Time at which `E[e^{uX_τ}]` becomes infinite under the Heston block, for
/// real `u` (`∞` when the moment exists at every maturity).
pub(crate) fn explosion_time(u: f64, p: &HestonParams) -> f64 {
    let c = u * u - u;
    if c <= 0.0 {
        return f64::INFINITY;
    }
    let beta = p.kappa - p.sigma * p.rho * u;
    let disc = beta * beta - p.sigma * p.sigma * c;
    if disc >= 0.0 {
        if beta > 0.0 {
            return f64::INFINITY;
        }
        let sq = disc.sqrt();
        if sq == 0.0 {
            return 2.0 / -beta;
        }
        return ((beta - sq) / (beta + sq)).ln() / sq;
    }
    let g = (-disc).sqrt();
    2.0 / g * (std::f64::consts::FRAC_PI_2 + (beta / g).atan())
}

/// Largest `|u|` on the side `sign` of zero whose moment is still finite at
/// `τ` (with some room, so the integrand stays well inside the strip) and
/// representable in floating point.
fn moment_limit(sign: f64, tau: f64, v: f64, p: &HestonParams, j: &JumpSpec) -> f64 {
    const CAP: f64 = 2000.0;
    let ok = |u: f64| {
        explosion_time(sign * u, p) > 1.25 * tau
            && log_mgf(Complex64::new(sign * u, 0.0), tau, v, p, j)
                .map(|c| c.re < 600.0)
                .unwrap_or(false)
    };
    let mut hi = 2.0;
    while ok(hi) {
        if hi >= CAP {
            return CAP;
        }
        hi *= 2.0;
    }
    let mut lo = 1.0;
    if !ok(lo) {
        lo = 0.0;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Out-of-the-money price of a single strike per unit spot, with the damping
/// exponent chosen to minimise the integrand at zero frequency. The tolerance
/// is relative to that minimum, so prices far below the fixed-damping
/// resolution keep their relative accuracy.
fn resolve_tiny(
    k: f64,
    put: bool,
    tau: f64,
    v: f64,
    p: &HestonParams,
    j: &JumpSpec,
    cfg: &DampingConfig,
) -> Result<f64> {
    // z = α + 1: z > 1 prices the call, z < 0 the put.
    let (lo, hi) = if put {
        (-moment_limit(-1.0, tau, v, p, j), 0.0)
    } else {
        (1.0, moment_limit(1.0, tau, v, p, j))
    };
    let objective = |z: f64| -> f64 {
        let lm = log_mgf(Complex64::new(z, 0.0), tau, v, p, j)
            .map(|c| c.re)
            .unwrap_or(f64::INFINITY);
        let val = -(z - 1.0) * k + lm - ((z - 1.0) * z).ln();
        if val.is_nan() {
            f64::INFINITY
        } else {
            val
        }
    };
    // Golden-section search; the objective is convex in z.
    let inv_phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo + 1e-9 * (1.0 + lo.abs()), hi - 1e-9 * (1.0 + hi.abs()));
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let (mut f1, mut f2) = (objective(x1), objective(x2));
    for _ in 0..80 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = objective(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = objective(x2);
        }
    }
    let (z, fz) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    if !fz.is_finite() {
        return Err(Error::Accuracy(format!(
            "no finite damping for log-moneyness {k} at tau {tau}"
        )));
    }
    let alpha = z - 1.0;
    let df = (-p.r * tau).exp();
    let ks = [k];
    let level = df * fz.exp();
    let strip = Strip {
        ks: &ks,
        scales: vec![(-alpha * k).exp() / std::f64::consts::PI],
        tol_density: cfg.tol * level / cfg.trunc,
    };
    let tail_cfg = DampingConfig {
        tol: cfg.tol * level,
        ..*cfg
    };
    let denom_re = alpha * alpha + alpha;
    let denom_im = 2.0 * alpha + 1.0;
    let integrand = |w: f64| -> Result<Complex64> {
        let lm = log_mgf(Complex64::new(z, w), tau, v, p, j)?;
        Ok(df * lm.exp() / Complex64::new(denom_re - w * w, denom_im * w))
    };
    let price = strip.integrate(&integrand, &tail_cfg)?[0];
    if !(price > 0.0 && price.is_finite()) {
        return Err(Error::Accuracy(format!(
            "out-of-the-money price {price:e} not resolved (log-moneyness {k}, tau {tau})"
        )));
    }
    Ok(price)
}

/// Out-of-the-money prices (puts below the forward, calls at or above it)
/// for several strikes of one maturity.
///
/// These keep their relative accuracy far into the wings, which is what the
/// implied-volatility inversion needs.
pub fn otm_prices(
    state: &MarketState,
    p: &HestonParams,
    j: &JumpSpec,
    strikes: &[f64],
    tau: f64,
    cfg: &DampingConfig,
) -> Result<Vec<f64>> {
    let spot = state.spot();
    let carry = (p.r - p.q) * tau;
    let calls = normalised_calls(state, p, j, strikes, tau, cfg)?;
    let df = (-p.r * tau).exp();
    let dq = (-p.q * tau).exp();
    let slack = 10.0 * cfg.tol;
    strikes
        .iter()
        .zip(calls)
        .map(|(&strike, (call, direct_put))| {
            let k = (strike / spot).ln();
            let m = k.exp();
            let put = k < carry;
            let mut otm = if put {
                direct_put.unwrap_or(call - dq + m * df)
            } else {
                call
            };
            let cap = if put { m * df } else { dq };
            if !otm.is_finite() || otm < -slack || otm > cap + slack {
                return Err(Error::Accuracy(format!(
                    "Fourier price {otm} per unit spot outside [0, {cap}] (log-moneyness {k}, tau {tau})"
                )));
            }
            if otm < RESOLVE_BELOW {
                otm = resolve_tiny(k, put, tau, state.v, p, j, cfg)?;
            }
            Ok(spot * otm.min(cap))
        })
        .collect()
}

/// Normalised call prices, plus the put where the strike went through the
/// put route.
fn normalised_calls(
    state: &MarketState,
    p: &HestonParams,
    j: &JumpSpec,
    strikes: &[f64],
    tau: f64,
    cfg: &DampingConfig,
) -> Result<Vec<(f64, Option<f64>)>> {
    cfg.validate()?;
    j.validate()?;
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("maturity {tau} must be > 0")));
    }
    if let Some(k) = strikes.iter().find(|k| !(**k > 0.0 && k.is_finite())) {
        return Err(Error::InvalidParameter(format!("strike {k} must be > 0")));
    }
    let spot = state.spot();
    let df = (-p.r * tau).exp();
    let dq = (-p.q * tau).exp();
    let carry = (p.r - p.q) * tau;
    let ks: Vec<f64> = strikes.iter().map(|k| (k / spot).ln()).collect();
    let mut out = vec![(0.0, None); strikes.len()];

    for put_route in [false, true] {
        let idx: Vec<usize> = (0..ks.len())
            .filter(|&i| (ks[i] - carry < PUT_ROUTE_BELOW) == put_route)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let alpha = if put_route { -1.0 - cfg.alpha } else { cfg.alpha };
        let sel: Vec<f64> = idx.iter().map(|&i| ks[i]).collect();
        let strip = Strip {
            ks: &sel,
            scales: sel.iter().map(|k| (-alpha * k).exp() / std::f64::consts::PI).collect(),
            tol_density: cfg.tol / cfg.trunc,
        };
        let denom_re = alpha * alpha + alpha;
        let denom_im = 2.0 * alpha + 1.0;
        let integrand = |w: f64| -> Result<Complex64> {
            let z = Complex64::new(alpha + 1.0, w);
            let lm = log_mgf(z, tau, state.v, p, j)?;
            Ok(df * lm.exp() / Complex64::new(denom_re - w * w, denom_im * w))
        };
        let vals = strip.integrate(&integrand, cfg)?;
        for (&i, v) in idx.iter().zip(vals) {
            let m = ks[i].exp();
            out[i] = if put_route {
                (v + dq - m * df, Some(v))
            } else {
                (v, None)
            };
        }
    }
    Ok(out)
}

/// Call prices for several strikes of one maturity, discounted with
/// `e^{-rτ}`. Strikes far below the forward are priced through the put and
/// parity.
pub fn call_prices(
    state: &MarketState,
    p: &HestonParams,
    j: &JumpSpec,
    strikes: &[f64],
    tau: f64,
    cfg: &DampingConfig,
) -> Result<Vec<f64>> {
    let spot = state.spot();
    let df = (-p.r * tau).exp();
    let dq = (-p.q * tau).exp();
    let slack = 10.0 * cfg.tol;
    normalised_calls(state, p, j, strikes, tau, cfg)?
        .into_iter()
        .zip(strikes)
        .map(|((c, _), &strike)| {
            let m = strike / spot;
            let lower = (dq - m * df).max(0.0);
            let upper = dq;
            if !c.is_finite() || c < lower - slack || c > upper + slack {
                return Err(Error::Accuracy(format!(
                    "Fourier call price {c} per unit spot outside [{lower}, {upper}] (moneyness {m}, tau {tau})"
                )));
            }
            Ok(spot * c.clamp(lower, upper))
        })
        .collect()
}

/// Bates call price by damped Fourier inversion.
pub fn call_price(
    state: &MarketState,
    p: &HestonParams,
    j: &JumpSpec,
    strike: f64,
    tau: f64,
    cfg: &DampingConfig,
) -> Result<f64> {
    Ok(call_prices(state, p, j, &[strike], tau, cfg)?[0])
}

/// Put by parity: `P = C - S e^{-qτ} + K e^{-rτ}`.
pub fn put_price(
    state: &MarketState,
    p: &HestonParams,
    j: &JumpSpec,
    strike: f64,
    tau: f64,
    cfg: &DampingConfig,
) -> Result<f64> {
    let c = call_price(state, p, j, strike, tau, cfg)?;
    Ok(c - state.spot() * (-p.q * tau).exp() + strike * (-p.r * tau).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pricing::{bs_price, OptionKind};

    fn flat() -> (MarketState, HestonParams, JumpSpec) {
        (
            MarketState::from_spot(100.0, 0.04),
            HestonParams::new(0.0, 0.0, 2.0, 0.04, 1e-6, 0.0).unwrap(),
            JumpSpec::none(),
        )
    }

    #[test]
    fn degenerate_model_is_black_scholes() {
        let (st, p, j) = flat();
        let c = call_price(&st, &p, &j, 100.0, 1.0, &DampingConfig::default()).unwrap();
        let bs = bs_price(100.0, 100.0, 1.0, 0.2, 0.0, 0.0, OptionKind::Call);
        assert!((c - bs).abs() < 1e-4, "{c} vs {bs}");
    }

    #[test]
    fn vanishing_strike_prices_the_spot() {
        let (st, p, j) = flat();
        let c = call_price(&st, &p, &j, 1e-6, 1.0, &DampingConfig::default()).unwrap();
        assert!((c - 100.0).abs() < 1e-6, "{c}");
        let put = put_price(&st, &p, &j, 1e-6, 1.0, &DampingConfig::default()).unwrap();
        assert!(put.abs() < 1e-6, "{put}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let (st, p, j) = flat();
        let cfg = DampingConfig::default();
        assert!(call_price(&st, &p, &j, -1.0, 1.0, &cfg).is_err());
        assert!(call_price(&st, &p, &j, 100.0, 0.0, &cfg).is_err());
        let bad = DampingConfig { n_nodes: 16, ..cfg };
        assert!(call_price(&st, &p, &j, 100.0, 1.0, &bad).is_err());
    }
}
