//! The maturity × moneyness grid, implied-volatility surfaces on it, the
//! price-discrepancy functional and static-arbitrage audits.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affine::{HestonParams, JumpSpec, MarketState};
use crate::error::{Error, Result};
use crate::pricing::{bs_price, implied_vol, otm_prices, DampingConfig, OptionKind, OptionQuote};

pub const N_MATURITIES: usize = 10;
pub const N_MONEYNESS: usize = 13;
pub const N_POINTS: usize = N_MATURITIES * N_MONEYNESS;

pub const DAYS_PER_YEAR: f64 = 365.0;
pub const MIN_DAYS: f64 = 7.0;
pub const MAX_DAYS: f64 = 440.0;
pub const MIN_MONEYNESS: f64 = 0.8;
pub const MAX_MONEYNESS: f64 = 1.2;

/// Tolerance of the static-arbitrage audit.
pub const ARB_TOL: f64 = 1e-7;

/// Maturities (years) and moneyness `K/S` of the surface grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub maturities: Vec<f64>,
    pub moneyness: Vec<f64>,
}

impl Grid {
    /// Ten maturities log-spaced between 7 and 440 days and snapped to whole
    /// days, thirteen moneyness levels from 0.8 to 1.2 in steps of 1/30.
    pub fn default_grid() -> Grid {
        let ratio = MAX_DAYS / MIN_DAYS;
        let maturities = (0..N_MATURITIES)
            .map(|i| {
                let days = (MIN_DAYS * ratio.powf(i as f64 / (N_MATURITIES - 1) as f64)).round();
                days / DAYS_PER_YEAR
            })
            .collect();
        let moneyness = (0..N_MONEYNESS)
            // whole thirtieths, so both ends land exactly on the box edges
            .map(|j| (24.0 + j as f64) / 30.0)
            .collect();
        Grid {
            maturities,
            moneyness,
        }
    }

    pub fn new(maturities: Vec<f64>, moneyness: Vec<f64>) -> Result<Grid> {
        let g = Grid {
            maturities,
            moneyness,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.maturities.len() != N_MATURITIES {
            return Err(Error::Shape {
                expected: N_MATURITIES,
                got: self.maturities.len(),
            });
        }
        if self.moneyness.len() != N_MONEYNESS {
            return Err(Error::Shape {
                expected: N_MONEYNESS,
                got: self.moneyness.len(),
            });
        }
        for (name, axis) in [("maturities", &self.maturities), ("moneyness", &self.moneyness)] {
            if axis.iter().any(|v| !(*v > 0.0 && v.is_finite())) || axis.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::InvalidParameter(format!(
                    "grid {name} must be positive and strictly increasing: {axis:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.maturities.len() * self.moneyness.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major (maturity-major) index of grid point `(i, j)`.
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.moneyness.len() + j
    }

    fn same_as(&self, other: &Grid) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!("{self:?} vs {other:?}")));
        }
        Ok(())
    }
}

/// Implied volatilities on a grid, maturity-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolSurface {
    pub grid: Grid,
    pub vols: Vec<f64>,
    pub spot: f64,
}

impl VolSurface {
    pub fn new(grid: Grid, vols: Vec<f64>, spot: f64) -> Result<VolSurface> {
        let s = VolSurface { grid, vols, spot };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.vols.len() != self.grid.len() {
            return Err(Error::Shape {
                expected: self.grid.len(),
                got: self.vols.len(),
            });
        }
        if let Some(v) = self.vols.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter(format!("implied vol {v} must be positive and finite")));
        }
        if !(self.spot > 0.0 && self.spot.is_finite()) {
            return Err(Error::InvalidParameter(format!("spot {} must be positive", self.spot)));
        }
        Ok(())
    }

    pub fn vol(&self, i: usize, j: usize) -> f64 {
        self.vols[self.grid.index(i, j)]
    }

    /// Black-Scholes call prices at every grid point.
    pub fn call_prices(&self, r: f64, q: f64) -> Vec<f64> {
        let g = &self.grid;
        let mut out = Vec::with_capacity(g.len());
        for (i, &tau) in g.maturities.iter().enumerate() {
            for (j, &m) in g.moneyness.iter().enumerate() {
                let vol = self.vol(i, j);
                out.push(bs_price(self.spot, m * self.spot, tau, vol, r, q, OptionKind::Call));
            }
        }
        out
    }

    /// Writes `tau_days,moneyness,iv` rows in grid order.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["tau_days", "moneyness", "iv"])?;
        for (i, &tau) in self.grid.maturities.iter().enumerate() {
            for (j, &m) in self.grid.moneyness.iter().enumerate() {
                wtr.write_record([
                    format!("{:.16e}", tau * DAYS_PER_YEAR),
                    format!("{m:.16e}"),
                    format!("{:.16e}", self.vol(i, j)),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Reads a surface written by [`VolSurface::write_csv`]; the file does not
    /// carry the spot, so it is supplied.
    pub fn read_csv<R: Read>(r: R, spot: f64) -> Result<VolSurface> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["tau_days", "moneyness", "iv"] {
            return Err(Error::Corrupt(format!("unexpected surface header {header:?}")));
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |k: usize| -> Result<f64> {
                rec.get(k)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::Corrupt(format!("bad surface row {rec:?}")))
            };
            rows.push((parse(0)?, parse(1)?, parse(2)?));
        }
        if rows.len() != N_POINTS {
            return Err(Error::Shape {
                expected: N_POINTS,
                got: rows.len(),
            });
        }
        let moneyness: Vec<f64> = rows[..N_MONEYNESS].iter().map(|r| r.1).collect();
        let maturities: Vec<f64> = rows.iter().step_by(N_MONEYNESS).map(|r| days_to_years(r.0)).collect();
        let grid = Grid::new(maturities, moneyness)?;
        for (n, row) in rows.iter().enumerate() {
            let (i, j) = (n / N_MONEYNESS, n % N_MONEYNESS);
            if days_to_years(row.0) != grid.maturities[i] || row.1 != grid.moneyness[j] {
                return Err(Error::Corrupt(format!("row {n} is off the grid: {row:?}")));
            }
        }
        VolSurface::new(grid, rows.iter().map(|r| r.2).collect(), spot)
    }

    pub fn load_csv(path: &Path, spot: f64) -> Result<VolSurface> {
        Self::read_csv(std::fs::File::open(path)?, spot)
    }
}

/// Whole days are snapped so that grids built from day counts survive the
/// text round trip bit for bit.
fn days_to_years(days: f64) -> f64 {
    let whole = days.round();
    if (days - whole).abs() < 1e-9 {
        whole / DAYS_PER_YEAR
    } else {
        days / DAYS_PER_YEAR
    }
}

/// Model surface: Fourier prices of the out-of-the-money option at each grid
/// point, inverted to Black-Scholes volatilities. Maturities are evaluated in
/// parallel; the result does not depend on the number of workers.
pub fn build_surface(
    state: &MarketState,
    p: &HestonParams,
    j: &JumpSpec,
    grid: &Grid,
    cfg: &DampingConfig,
) -> Result<VolSurface> {
    grid.validate()?;
    let spot = state.spot();
    let rows: Vec<Vec<f64>> = grid
        .maturities
        .par_iter()
        .enumerate()
        .map(|(i, &tau)| surface_row(state, p, j, grid, cfg, i, tau, spot))
        .collect::<Result<_>>()?;
    VolSurface::new(grid.clone(), rows.concat(), spot)
}

#[allow(clippy::too_many_arguments)]
fn surface_row(
    state: &MarketState,
    p: &HestonParams,
    j: &JumpSpec,
    grid: &Grid,
    cfg: &DampingConfig,
    i: usize,
    tau: f64,
    spot: f64,
) -> Result<Vec<f64>> {
    let at = |col: usize, e: Error| Error::GridPoint {
        maturity: i,
        moneyness: col,
        source: Box::new(e),
    };
    let strikes: Vec<f64> = grid.moneyness.iter().map(|m| m * spot).collect();
    let prices = otm_prices(state, p, j, &strikes, tau, cfg).map_err(|e| at(0, e))?;
    let fwd = spot * ((p.r - p.q) * tau).exp();
    strikes
        .iter()
        .zip(prices)
        .enumerate()
        .map(|(col, (&strike, price))| {
            let kind = if strike < fwd { OptionKind::Put } else { OptionKind::Call };
            let quote = OptionQuote {
                strike,
                maturity: tau,
                price,
                kind,
            };
            implied_vol(&quote, spot, p.r, p.q).map_err(|e| at(col, e))
        })
        .collect()
}

/// Sum of squared call-price differences between two sets of prices.
pub fn delta_c_prices(model: &[f64], observed: &[f64]) -> Result<f64> {
    if model.len() != observed.len() {
        return Err(Error::Shape {
            expected: model.len(),
            got: observed.len(),
        });
    }
    Ok(model.iter().zip(observed).map(|(a, b)| (a - b).powi(2)).sum())
}

/// `Δ_C = Σ |C_model - C_observed|²` over the grid, with both surfaces turned
/// into call prices at `spot` first.
pub fn delta_c(model: &VolSurface, observed: &VolSurface, spot: f64, r: f64, q: f64) -> Result<f64> {
    model.grid.same_as(&observed.grid)?;
    let with_spot = |s: &VolSurface| VolSurface { spot, ..s.clone() }.call_prices(r, q);
    delta_c_prices(&with_spot(model), &with_spot(observed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub maturity: usize,
    pub moneyness: usize,
    pub magnitude: f64,
}

/// Result of a static-arbitrage audit.
///
/// Butterfly magnitudes are prices of the unit-middle-weight butterfly
/// (currency); calendar magnitudes are drops of total implied variance
/// `σ²τ` between consecutive maturities at fixed `K/S`. The calendar test is
/// a proxy: exact calendar arbitrage is defined at fixed strike.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArbReport {
    pub butterfly_violations: Vec<Violation>,
    pub calendar_violations: Vec<Violation>,
    pub max_violation: f64,
}

impl ArbReport {
    pub fn is_clean(&self) -> bool {
        self.butterfly_violations.is_empty() && self.calendar_violations.is_empty()
    }
}

/// Audits discrete convexity of call prices in strike and monotonicity of
/// total variance in maturity, each against `tol`.
pub fn check_static_arbitrage_tol(surface: &VolSurface, r: f64, q: f64, tol: f64) -> ArbReport {
    let g = &surface.grid;
    let calls = surface.call_prices(r, q);
    let strikes: Vec<f64> = g.moneyness.iter().map(|m| m * surface.spot).collect();
    let mut report = ArbReport::default();
    for i in 0..g.maturities.len() {
        for j in 1..g.moneyness.len() - 1 {
            let (k0, k1, k2) = (strikes[j - 1], strikes[j], strikes[j + 1]);
            let w0 = (k2 - k1) / (k2 - k0);
            let w2 = (k1 - k0) / (k2 - k0);
            let fly = w0 * calls[g.index(i, j - 1)] - calls[g.index(i, j)] + w2 * calls[g.index(i, j + 1)];
            if fly < -tol {
                report.butterfly_violations.push(Violation {
                    maturity: i,
                    moneyness: j,
                    magnitude: -fly,
                });
            }
        }
    }
    for i in 1..g.maturities.len() {
        for j in 0..g.moneyness.len() {
            let w = |ii: usize| surface.vol(ii, j).powi(2) * g.maturities[ii];
            let drop = w(i - 1) - w(i);
            if drop > tol {
                report.calendar_violations.push(Violation {
                    maturity: i,
                    moneyness: j,
                    magnitude: drop,
                });
            }
        }
    }
    report.max_violation = report
        .butterfly_violations
        .iter()
        .chain(&report.calendar_violations)
        .map(|v| v.magnitude)
        .fold(0.0, f64::max);
    report
}

/// [`check_static_arbitrage_tol`] at the default tolerance.
pub fn check_static_arbitrage(surface: &VolSurface, r: f64, q: f64) -> ArbReport {
    check_static_arbitrage_tol(surface, r, q, ARB_TOL)
}
