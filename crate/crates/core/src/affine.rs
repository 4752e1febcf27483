//! Affine characteristics of the Hull-White extended Bates model.
//!
//! The Heston block contributes the functional characteristics
//!
//! ```text
//! F(u, w)   = k θ w + (r - q) u
//! R_C(u, w) = ½ u (u - 1) + ½ σ² w² + σ ρ u w - k w
//! ```
//!
//! and the Riccati pair `∂φ/∂τ = F(u, ψ)`, `∂ψ/∂τ = R_C(u, ψ)` started from
//! `φ = ψ = 0`. The jump extension adds the cumulant of a compensated compound
//! Poisson process whose normal jump law is piecewise constant in maturity.
//!
//! Two argument conventions coexist: [`riccati_solve`], [`jump_cumulant`] and
//! [`forward_characteristic`] take the exponent argument `u` of `E[e^{uX}]`;
//! [`char_fn`] takes the Fourier variable of `E[e^{iuX}]` and converts.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time-homogeneous Heston parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HestonParams {
    /// Risk-free rate, per year.
    pub r: f64,
    /// Dividend yield, per year.
    pub q: f64,
    /// Mean-reversion speed of the variance.
    pub kappa: f64,
    /// Long-run variance.
    pub theta: f64,
    /// Volatility of variance.
    pub sigma: f64,
    /// Spot/variance correlation.
    pub rho: f64,
}

impl HestonParams {
    pub fn new(r: f64, q: f64, kappa: f64, theta: f64, sigma: f64, rho: f64) -> Result<Self> {
        let p = HestonParams {
            r,
            q,
            kappa,
            theta,
            sigma,
            rho,
        };
        p.validate()?;
        Ok(p)
    }

    /// `2 k θ > σ²`.
    pub fn feller(&self) -> bool {
        2.0 * self.kappa * self.theta > self.sigma * self.sigma
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.r, self.q, self.kappa, self.theta, self.sigma, self.rho];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite Heston parameter in {self:?}")));
        }
        if self.kappa <= 0.0 || self.theta <= 0.0 || self.sigma <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "kappa, theta and sigma must be positive: {self:?}"
            )));
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidParameter(format!("rho = {} outside [-1, 1]", self.rho)));
        }
        if !self.feller() {
            return Err(Error::InvalidParameter(format!(
                "Feller condition 2 k theta > sigma^2 fails: {self:?}"
            )));
        }
        Ok(())
    }

    /// Heston part of the `F` characteristic.
    pub fn f_char(&self, u: Complex64, w: Complex64) -> Complex64 {
        self.kappa * self.theta * w + (self.r - self.q) * u
    }

    /// Heston `R_C` characteristic.
    pub fn r_char(&self, u: Complex64, w: Complex64) -> Complex64 {
        0.5 * u * (u - 1.0) + 0.5 * self.sigma * self.sigma * w * w + self.sigma * self.rho * u * w
            - self.kappa * w
    }
}

/// State variables: log-price and instantaneous variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketState {
    pub x: f64,
    pub v: f64,
    /// Reference spot used when reporting (the spot at the start of a run).
    pub s0_ref: f64,
}

impl MarketState {
    pub fn from_spot(spot: f64, v: f64) -> Self {
        MarketState {
            x: spot.ln(),
            v,
            s0_ref: spot,
        }
    }

    pub fn spot(&self) -> f64 {
        self.x.exp()
    }
}

/// Normal jump law of one maturity bucket.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpBucket {
    /// Mean log jump.
    pub nu: f64,
    /// Standard deviation of the log jump.
    pub delta: f64,
}

impl JumpBucket {
    /// Compensated cumulant of one unit-intensity jump:
    /// `e^{uν + u²δ²/2} - 1 - u (e^{ν + δ²/2} - 1)`.
    pub fn cumulant(&self, u: Complex64) -> Complex64 {
        let var = self.delta * self.delta;
        let mean_jump = (self.nu + 0.5 * var).exp() - 1.0;
        (u * self.nu + u * u * (0.5 * var)).exp() - 1.0 - u * mean_jump
    }

    /// `E[e^J] - 1`.
    pub fn mean_relative_jump(&self) -> f64 {
        (self.nu + 0.5 * self.delta * self.delta).exp() - 1.0
    }
}

pub const N_BUCKETS: usize = 5;

/// Hull-White extension: compound Poisson jumps with maturity-bucketed normal
/// jump laws. Bucket `b` applies on `[edges[b], edges[b+1])`; the last bucket
/// also covers every time beyond `edges[5]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpSpec {
    pub lambda: f64,
    pub buckets: [JumpBucket; N_BUCKETS],
    pub edges: [f64; N_BUCKETS + 1],
}

impl JumpSpec {
    pub fn new(lambda: f64, buckets: [JumpBucket; N_BUCKETS], edges: [f64; N_BUCKETS + 1]) -> Result<Self> {
        let j = JumpSpec { lambda, buckets, edges };
        j.validate()?;
        Ok(j)
    }

    /// Same jump law in every bucket, default bucket edges.
    pub fn uniform(lambda: f64, nu: f64, delta: f64) -> Result<Self> {
        Self::new(lambda, [JumpBucket { nu, delta }; N_BUCKETS], default_bucket_edges())
    }

    /// No jumps at all.
    pub fn none() -> Self {
        JumpSpec {
            lambda: 0.0,
            buckets: [JumpBucket { nu: 0.0, delta: 0.0 }; N_BUCKETS],
            edges: default_bucket_edges(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("lambda = {} must be >= 0", self.lambda)));
        }
        for (i, b) in self.buckets.iter().enumerate() {
            if !b.nu.is_finite() || !(b.delta >= 0.0 && b.delta.is_finite()) {
                return Err(Error::InvalidParameter(format!("bucket {i}: {b:?}")));
            }
        }
        if self.edges[0] != 0.0 {
            return Err(Error::InvalidParameter("first bucket edge must be 0".into()));
        }
        if self.edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter(format!(
                "bucket edges must increase strictly: {:?}",
                self.edges
            )));
        }
        Ok(())
    }

    /// Bucket index in force at Lévy time `t`.
    pub fn bucket_at(&self, t: f64) -> usize {
        (1..N_BUCKETS).rev().find(|&b| t >= self.edges[b]).unwrap_or(0)
    }

    /// Time bucket `b` spends inside `[0, tau]`.
    pub fn overlap(&self, b: usize, tau: f64) -> f64 {
        let lo = self.edges[b];
        let span = if b + 1 == N_BUCKETS {
            f64::INFINITY
        } else {
            self.edges[b + 1] - lo
        };
        (tau - lo).clamp(0.0, span)
    }

    pub fn nus(&self) -> [f64; N_BUCKETS] {
        self.buckets.map(|b| b.nu)
    }

    pub fn deltas(&self) -> [f64; N_BUCKETS] {
        self.buckets.map(|b| b.delta)
    }
}

/// Bucket edges `{0, τ_2, τ_4, τ_6, τ_8, τ_10}` of the standard grid: every
/// bucket spans two adjacent grid maturities.
pub fn default_bucket_edges() -> [f64; N_BUCKETS + 1] {
    let m = crate::surface::Grid::default_grid().maturities;
    [0.0, m[1], m[3], m[5], m[7], m[9]]
}

/// `φ(u, τ)` and `ψ_C(u, τ)` of the Heston Riccati system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiccatiSolution {
    pub phi: Complex64,
    pub psi: Complex64,
}

fn finite(z: Complex64) -> bool {
    z.re.is_finite() && z.im.is_finite()
}

fn check(z: Complex64, what: &'static str, u: Complex64, tau: f64) -> Result<Complex64> {
    if finite(z) {
        Ok(z)
    } else {
        Err(Error::NumericDomain { what, u, tau })
    }
}

/// `(1 - e^{-w}) / w`, continuous through `w = 0`.
fn one_minus_exp_over(w: Complex64) -> Complex64 {
    if w.norm() < 1e-4 {
        1.0 - w / 2.0 + w * w / 6.0 - w * w * w / 24.0
    } else {
        (1.0 - (-w).exp()) / w
    }
}

/// `ln(1 + z) / z`, continuous through `z = 0`.
fn log1p_over(z: Complex64) -> Complex64 {
    if z.norm() < 1e-4 {
        1.0 - z / 2.0 + z * z / 3.0 - z * z * z / 4.0
    } else {
        let w = 1.0 + z;
        if w == Complex64::new(1.0, 0.0) {
            Complex64::new(1.0, 0.0)
        } else {
            // ln(w) / (w - 1) is accurate even when 1 + z rounds.
            w.ln() / (w - 1.0)
        }
    }
}

/// Solves the Heston Riccati equations in closed form.
///
/// The formulation keeps `e^{-dτ}` bounded (`Re d ≥ 0`) so the logarithm never
/// crosses its branch cut, and is rearranged so that neither `σ²` nor `d`
/// appears as a divisor: with `β = k - σρu`, `c = u² - u`,
/// `A = c / (β + d)` and `E = (1 - e^{-dτ}) / d`,
///
/// ```text
/// ψ = A E (β + d) / ((β + d) E + 2 e^{-dτ})
/// φ = (r - q) u τ + k θ (A τ - A E · ln(1 + z) / z),   z = σ² A E / 2
/// ```
pub fn riccati_solve(u: Complex64, tau: f64, p: &HestonParams) -> Result<RiccatiSolution> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidParameter(format!("tau = {tau} must be >= 0")));
    }
    let zero = Complex64::new(0.0, 0.0);
    if tau == 0.0 {
        return Ok(RiccatiSolution { phi: zero, psi: zero });
    }
    let sig2 = p.sigma * p.sigma;
    let beta = p.kappa - p.sigma * p.rho * u;
    let c = u * u - u;
    let mut d = (beta * beta - sig2 * c).sqrt();
    let mut s = beta + d;
    if s.norm() < 1e-12 * (1.0 + beta.norm()) {
        // Both roots give the same solution; switch to the one away from -β.
        d = -d;
        s = beta + d;
    }
    let a = c / s;
    let e1 = tau * one_minus_exp_over(d * tau);
    let decay = (-d * tau).exp();
    let psi = a * e1 * s / (s * e1 + 2.0 * decay);
    let z = 0.5 * sig2 * a * e1;
    let phi = (p.r - p.q) * u * tau + p.kappa * p.theta * (a * tau - a * e1 * log1p_over(z));
    Ok(RiccatiSolution {
        phi: check(phi, "Riccati phi", u, tau)?,
        psi: check(psi, "Riccati psi", u, tau)?,
    })
}

/// Cumulant `μ_L(u, τ)` of the compensated jump process over `[0, τ]`.
pub fn jump_cumulant(u: Complex64, tau: f64, j: &JumpSpec) -> Result<Complex64> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidParameter(format!("tau = {tau} must be >= 0")));
    }
    let mut acc = Complex64::new(0.0, 0.0);
    if j.lambda == 0.0 {
        return Ok(acc);
    }
    for (b, bucket) in j.buckets.iter().enumerate() {
        let dt = j.overlap(b, tau);
        if dt > 0.0 {
            acc += j.lambda * dt * bucket.cumulant(u);
        }
    }
    check(acc, "jump cumulant", u, tau)
}

/// `log E[e^{uX_τ}] - u X_0` for exponent argument `u`.
pub(crate) fn log_mgf(
    u: Complex64,
    tau: f64,
    v: f64,
    p: &HestonParams,
    j: &JumpSpec,
) -> Result<Complex64> {
    let sol = riccati_solve(u, tau, p)?;
    let mu = jump_cumulant(u, tau, j)?;
    check(sol.phi + sol.psi * v + mu, "log characteristic function", u, tau)
}

/// Characteristic function `Ψ(u) = E[e^{iuX_τ}]` in the Fourier variable `u`.
///
/// Assembled as `exp(iu·x + φ(iu, τ) + ψ_C(iu, τ)·v + μ_L(iu, τ))`; the
/// `(r - q)` drift is already inside `φ` through `F`, so it is not added
/// again.
pub fn char_fn(
    u: Complex64,
    tau: f64,
    state: &MarketState,
    p: &HestonParams,
    j: &JumpSpec,
) -> Result<Complex64> {
    let z = Complex64::i() * u;
    let expo = z * state.x + log_mgf(z, tau, state.v, p, j)?;
    check(expo.exp(), "characteristic function", u, tau)
}

/// Forward characteristic `θ_t(-iu, x) = F_{t+x}(u, ψ_C(u, 0; x)) + R_C(u, ψ_C(u, 0; x)) V_t`.
///
/// `u` is the exponent argument, `x_ttm` the time to maturity and `t_cal` the
/// time elapsed since the jump extension was last calibrated, so the jump law
/// in force is the bucket containing `t_cal + x_ttm`. Integrating over
/// `x_ttm ∈ [0, τ]` at `t_cal = 0` gives `log E[e^{uX_τ}] - u X_0`.
pub fn forward_characteristic(
    u: f64,
    x_ttm: f64,
    t_cal: f64,
    v: f64,
    p: &HestonParams,
    j: &JumpSpec,
) -> Result<Complex64> {
    if !(x_ttm >= 0.0) || !(t_cal >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "x_ttm = {x_ttm} and t_cal = {t_cal} must be >= 0"
        )));
    }
    let uc = Complex64::new(u, 0.0);
    let psi = riccati_solve(uc, x_ttm, p)?.psi;
    let bucket = &j.buckets[j.bucket_at(t_cal + x_ttm)];
    let f = p.f_char(uc, psi) + j.lambda * bucket.cumulant(uc);
    check(f + p.r_char(uc, psi) * v, "forward characteristic", uc, x_ttm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> HestonParams {
        HestonParams::new(0.0, 0.0, 7.797, 0.247, 0.280, 0.042).unwrap()
    }

    #[test]
    fn riccati_vanishes_at_zero_argument_and_zero_maturity() {
        let p = params();
        let s = riccati_solve(Complex64::new(0.0, 0.0), 2.0, &p).unwrap();
        assert_eq!(s.phi, Complex64::new(0.0, 0.0));
        assert_eq!(s.psi, Complex64::new(0.0, 0.0));
        let s = riccati_solve(Complex64::new(3.0, -1.5), 0.0, &p).unwrap();
        assert_eq!(s.phi, Complex64::new(0.0, 0.0));
        assert_eq!(s.psi, Complex64::new(0.0, 0.0));
    }

    #[test]
    fn riccati_martingale_fixed_point() {
        let p = HestonParams::new(0.03, 0.03, 2.0, 0.04, 0.3, -0.7).unwrap();
        let s = riccati_solve(Complex64::new(1.0, 0.0), 1.0, &p).unwrap();
        assert!(s.phi.norm() < 1e-15 && s.psi.norm() < 1e-15, "{s:?}");
    }

    #[test]
    fn riccati_small_vol_of_vol_has_no_cancellation() {
        // σ → 0 collapses V to a deterministic path; ψ solves the linear ODE
        // ψ' = c/2 - kψ exactly.
        let p = HestonParams::new(0.0, 0.0, 1.5, 0.04, 1e-11, 0.3).unwrap();
        let u = Complex64::new(0.3, 2.0);
        let tau = 0.8;
        let s = riccati_solve(u, tau, &p).unwrap();
        let c = u * u - u;
        let expect = c / (2.0 * p.kappa) * (1.0 - (-p.kappa * tau).exp());
        assert!((s.psi - expect).norm() < 1e-9 * expect.norm());
    }

    #[test]
    fn cumulant_normalisation_and_compensation() {
        let j = JumpSpec::uniform(0.5, -0.1, 0.2).unwrap();
        assert_eq!(jump_cumulant(Complex64::new(0.0, 0.0), 1.3, &j).unwrap(), Complex64::new(0.0, 0.0));
        assert!(jump_cumulant(Complex64::new(1.0, 0.0), 1.3, &j).unwrap().norm() < 1e-15);
    }

    #[test]
    fn bucket_lookup_and_overlap() {
        let j = JumpSpec::uniform(0.5, -0.1, 0.2).unwrap();
        assert_eq!(j.bucket_at(0.0), 0);
        assert_eq!(j.bucket_at(j.edges[2]), 2);
        assert_eq!(j.bucket_at(100.0), 4);
        let tau = 10.0;
        let total: f64 = (0..N_BUCKETS).map(|b| j.overlap(b, tau)).sum();
        assert!((total - tau).abs() < 1e-12);
    }

    #[test]
    fn char_fn_normalisation() {
        let p = params();
        let j = JumpSpec::uniform(0.081, 0.159, 0.205).unwrap();
        let st = MarketState::from_spot(100.0, 0.0001);
        let one = char_fn(Complex64::new(0.0, 0.0), 0.5, &st, &p, &j).unwrap();
        assert_eq!(one, Complex64::new(1.0, 0.0));
        let fwd = char_fn(Complex64::new(0.0, -1.0), 1.0, &st, &p, &j).unwrap();
        assert!((fwd.re - 100.0).abs() < 1e-9 * 100.0 && fwd.im.abs() < 1e-9);
    }

    #[test]
    fn forward_characteristic_short_end() {
        let p = HestonParams::new(0.0111, 0.0021, 8.698, 0.106, 0.391, -0.12).unwrap();
        let j = JumpSpec::uniform(0.491, -0.202, 0.287).unwrap();
        let v = 0.09;
        let u = 2.0;
        let got = forward_characteristic(u, 0.0, 0.0, v, &p, &j).unwrap();
        let uc = Complex64::new(u, 0.0);
        let zero = Complex64::new(0.0, 0.0);
        let expect = p.f_char(uc, zero) + p.r_char(uc, zero) * v + j.lambda * j.buckets[0].cumulant(uc);
        assert!((got - expect).norm() < 1e-14);
        assert_eq!(forward_characteristic(0.0, 0.3, 0.0, v, &p, &j).unwrap(), zero);
    }

    #[test]
    fn validation_rejects_bad_inputs() {
        assert!(HestonParams::new(0.0, 0.0, 1.0, 0.01, 0.5, 0.0).is_err()); // Feller
        assert!(HestonParams::new(0.0, 0.0, 1.0, 0.04, 0.2, 1.2).is_err());
        let mut j = JumpSpec::uniform(0.1, 0.0, 0.1).unwrap();
        j.edges[3] = j.edges[2];
        assert!(j.validate().is_err());
        assert!(JumpSpec::uniform(-0.1, 0.0, 0.1).is_err());
        assert!(riccati_solve(Complex64::new(1.0, 0.0), -1.0, &params()).is_err());
    }
}
