//! The consistent-recalibration loop: Bates steps for the state, an
//! exogenous random walk for `(θ, σ, ρ)`, and a jump law re-fitted by NN2 so
//! that the model keeps reproducing the surface NN1 computed for the new
//! state.

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::affine::{HestonParams, JumpSpec, MarketState, N_BUCKETS};
use crate::datagen::{model_inputs, ModelPoint};
use crate::error::{Error, Result};
use crate::neural::{as_row, invert, Network};
use crate::surface::{check_static_arbitrage, delta_c, Grid, VolSurface};

/// Admissible intervals for the parameters that move.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamBox {
    pub theta: [f64; 2],
    pub sigma: [f64; 2],
    pub rho: [f64; 2],
}

impl Default for ParamBox {
    fn default() -> Self {
        ParamBox {
            theta: [0.01, 0.5],
            sigma: [0.01, 0.5],
            rho: [-1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Step length in years.
    pub dt: f64,
    pub n_steps: usize,
    /// Recalibration threshold on Δ_C. Zero recalibrates at every step.
    pub eps: f64,
    /// Standard deviation of the per-step Gaussian noise on `(θ, σ, ρ)`,
    /// relative to each parameter's magnitude.
    pub noise_scale: [f64; 3],
    /// Largest relative change of a parameter in one step.
    pub rel_cap: f64,
    pub param_box: ParamBox,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 1.0 / 365.0,
            n_steps: 250,
            eps: 0.0,
            noise_scale: [0.01; 3],
            rel_cap: 0.05,
            param_box: ParamBox::default(),
            seed: 0,
        }
    }
}

/// Magnitude used for relative noise and the relative cap. A floor on `ρ`
/// keeps a correlation at zero from freezing there.
const RHO_FLOOR: f64 = 0.1;

fn magnitude(k: usize, v: f64) -> f64 {
    if k == 2 {
        v.abs().max(RHO_FLOOR)
    } else {
        v.abs()
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.param_box;
        let box_ok = [b.theta, b.sigma, b.rho].iter().all(|[lo, hi]| lo <= hi)
            && b.theta[0] > 0.0
            && b.sigma[0] > 0.0
            && b.rho[0] >= -1.0
            && b.rho[1] <= 1.0;
        if !(self.dt > 0.0 && self.dt.is_finite())
            || !(self.rel_cap > 0.0 && self.rel_cap < 1.0)
            || !(self.eps >= 0.0)
            || self.noise_scale.iter().any(|s| !(*s >= 0.0 && s.is_finite()))
            || !box_ok
        {
            return Err(Error::InvalidParameter(format!("invalid simulation config {self:?}")));
        }
        Ok(())
    }

    /// Allowed `|Δ|` for parameter `k` (θ, σ, ρ) moving away from `old`.
    pub fn cap(&self, k: usize, old: f64) -> f64 {
        self.rel_cap * magnitude(k, old)
    }
}

/// One Euler step of the Bates dynamics with full truncation of the
/// variance. The path uses the jump law of the first bucket.
pub fn bates_step<R: Rng + ?Sized>(state: &MarketState, p: &HestonParams, j: &JumpSpec, dt: f64, rng: &mut R) -> MarketState {
    let vp = state.v.max(0.0);
    let z1: f64 = StandardNormal.sample(rng);
    let z2: f64 = StandardNormal.sample(rng);
    let zv = p.rho * z1 + (1.0 - p.rho * p.rho).max(0.0).sqrt() * z2;
    let sd = (vp * dt).sqrt();
    let v = state.v + p.kappa * (p.theta - vp) * dt + p.sigma * sd * zv;

    let b = j.buckets[0];
    let rate = j.lambda * dt;
    let mut jump = 0.0;
    if rate > 0.0 {
        let n: f64 = Poisson::new(rate).map(|d| d.sample(rng)).unwrap_or(0.0);
        if n > 0.0 {
            let z3: f64 = StandardNormal.sample(rng);
            jump = n * b.nu + b.delta * n.sqrt() * z3;
        }
    }
    let compensator = j.lambda * b.mean_relative_jump();
    let x = state.x + (p.r - p.q - 0.5 * vp - compensator) * dt + sd * z1 + jump;
    MarketState { x, v, s0_ref: state.s0_ref }
}

/// Random walk of `(θ, σ, ρ)`: relative Gaussian noise, each move capped at
/// `rel_cap`, values clipped to the box, and `σ` lowered when needed to keep
/// the Feller condition.
pub fn param_step<R: Rng + ?Sized>(p: &HestonParams, cfg: &SimConfig, rng: &mut R) -> HestonParams {
    let old = [p.theta, p.sigma, p.rho];
    let boxes = [cfg.param_box.theta, cfg.param_box.sigma, cfg.param_box.rho];
    let mut new = old;
    for k in 0..3 {
        let z: f64 = StandardNormal.sample(rng);
        let step = cfg.noise_scale[k] * magnitude(k, old[k]) * z;
        let cap = cfg.cap(k, old[k]);
        let step = if step.abs() > cap { step.signum() * cap } else { step };
        let mut v = (old[k] + step).clamp(boxes[k][0], boxes[k][1]);
        // rounding of old + cap can overshoot the cap by an ulp
        while (v - old[k]).abs() > cap {
            v = if v > old[k] { v.next_down() } else { v.next_up() };
        }
        new[k] = v;
    }
    let mut out = HestonParams {
        theta: new[0],
        sigma: new[1],
        rho: new[2],
        ..*p
    };
    let limit = (2.0 * out.kappa * out.theta).sqrt();
    while !out.feller() {
        out.sigma = out.sigma.min(limit).next_down();
    }
    out
}

/// NN1 surface of a model point on the NN1 grid.
pub fn nn1_surface(nn1: &Network, grid: &Grid, state: &MarketState, p: &HestonParams, j: &JumpSpec) -> Result<VolSurface> {
    let point = ModelPoint {
        params: *p,
        v0: state.v.max(0.0),
        jumps: *j,
    };
    let out = nn1.predict(as_row(&model_inputs(&point, grid)).view())?;
    VolSurface::new(grid.clone(), out.row(0).to_vec(), state.spot())
}

/// New jump law for `p_new` fitted by NN2 to the target surface. The jump
/// rate and the bucket edges carry over.
pub fn recalibrate(p_new: &HestonParams, target: &VolSurface, nn2: &Network, j: &JumpSpec) -> Result<JumpSpec> {
    let (nu, delta) = invert(nn2, target, p_new.theta, p_new.sigma, p_new.rho)?;
    let mut buckets = j.buckets;
    for b in 0..N_BUCKETS {
        buckets[b].nu = nu[b];
        buckets[b].delta = delta[b];
    }
    JumpSpec::new(j.lambda, buckets, j.edges)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub t: f64,
    pub market: MarketState,
    pub p: HestonParams,
    pub j: JumpSpec,
    /// Time of the latest recalibration.
    pub last_recal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub step: usize,
    pub t: f64,
    pub x: f64,
    pub v: f64,
    pub p: HestonParams,
    pub j: JumpSpec,
    /// The surface of the step (NN1 at the new state, before the parameter
    /// move).
    pub vols: Vec<f64>,
    pub spot: f64,
    /// Δ_C of the moved parameters with the old jump law.
    pub delta_c_before: f64,
    /// Δ_C once the jump law is refitted (equal to `delta_c_before` when the
    /// step did not recalibrate).
    pub delta_c_after: f64,
    pub recalibrated: bool,
    /// Recalibration left Δ_C above a positive threshold.
    pub recal_failed: bool,
    pub butterfly_violations: usize,
    pub calendar_violations: usize,
    pub max_violation: f64,
}

fn check_net(nn: &Network, input_dim: usize, output_dim: usize) -> Result<()> {
    if nn.spec.input_dim != input_dim || nn.spec.output_dim != output_dim {
        return Err(Error::Shape {
            expected: input_dim,
            got: nn.spec.input_dim,
        });
    }
    Ok(())
}

fn record(step: usize, s: &SimState, surface: &VolSurface, before: f64, after: f64, recal: (bool, bool)) -> SimRecord {
    let arb = check_static_arbitrage(surface, s.p.r, s.p.q);
    SimRecord {
        step,
        t: s.t,
        x: s.market.x,
        v: s.market.v,
        p: s.p,
        j: s.j,
        vols: surface.vols.clone(),
        spot: surface.spot,
        delta_c_before: before,
        delta_c_after: after,
        recalibrated: recal.0,
        recal_failed: recal.1,
        butterfly_violations: arb.butterfly_violations.len(),
        calendar_violations: arb.calendar_violations.len(),
        max_violation: arb.max_violation,
    }
}

/// Runs the loop for `cfg.n_steps` steps and returns `n_steps + 1` records,
/// the first one describing the initial surface. Errors carry the step at
/// which they occurred.
pub fn run(
    cfg: &SimConfig,
    grid: &Grid,
    p0: &HestonParams,
    j0: &JumpSpec,
    state0: &MarketState,
    nn1: &Network,
    nn2: &Network,
) -> Result<Vec<SimRecord>> {
    cfg.validate()?;
    grid.validate()?;
    p0.validate()?;
    j0.validate()?;
    check_net(nn1, crate::datagen::col::N_INPUTS, grid.len())?;
    check_net(nn2, 3 + grid.len(), 2 * N_BUCKETS)?;
    let at = |step: usize| move |e: Error| Error::Step { step, source: Box::new(e) };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut s = SimState {
        t: 0.0,
        market: *state0,
        p: *p0,
        j: *j0,
        last_recal: 0.0,
    };
    let first = nn1_surface(nn1, grid, &s.market, &s.p, &s.j).map_err(at(0))?;
    let mut records = vec![record(0, &s, &first, 0.0, 0.0, (false, false))];
    for step in 1..=cfg.n_steps {
        s.market = bates_step(&s.market, &s.p, &s.j, cfg.dt, &mut rng);
        s.t = step as f64 * cfg.dt;
        let target = nn1_surface(nn1, grid, &s.market, &s.p, &s.j).map_err(at(step))?;
        let p_new = param_step(&s.p, cfg, &mut rng);
        let (r, q, spot) = (p_new.r, p_new.q, s.market.spot());
        let naive = nn1_surface(nn1, grid, &s.market, &p_new, &s.j).map_err(at(step))?;
        let before = delta_c(&naive, &target, spot, r, q).map_err(at(step))?;
        let mut after = before;
        let mut flags = (false, false);
        if cfg.eps == 0.0 || before > cfg.eps {
            let j_new = recalibrate(&p_new, &target, nn2, &s.j).map_err(at(step))?;
            let refit = nn1_surface(nn1, grid, &s.market, &p_new, &j_new).map_err(at(step))?;
            after = delta_c(&refit, &target, spot, r, q).map_err(at(step))?;
            s.j = j_new;
            s.last_recal = s.t;
            flags = (true, cfg.eps > 0.0 && after > cfg.eps);
        }
        s.p = p_new;
        records.push(record(step, &s, &target, before, after, flags));
    }
    Ok(records)
}

/// Per-step summary kept in the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub t: f64,
    pub spot: f64,
    pub v: f64,
    pub theta: f64,
    pub sigma: f64,
    pub rho: f64,
    pub nu: [f64; N_BUCKETS],
    pub delta: [f64; N_BUCKETS],
    pub delta_c_before: f64,
    pub delta_c_after: f64,
    pub recalibrated: bool,
    pub recal_failed: bool,
    pub max_violation: f64,
    pub surface: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: SimConfig,
    pub grid: Grid,
    pub initial_params: HestonParams,
    pub initial_jumps: JumpSpec,
    pub initial_state: MarketState,
    pub worst_violation: f64,
    pub steps: Vec<StepSummary>,
}

pub const RUN_MANIFEST: &str = "run.toml";

/// Writes `surface_NNNNN.csv` per step and `run.toml` into `dir`.
#[allow(clippy::too_many_arguments)]
pub fn write_run(
    dir: &Path,
    cfg: &SimConfig,
    grid: &Grid,
    p0: &HestonParams,
    j0: &JumpSpec,
    state0: &MarketState,
    records: &[SimRecord],
) -> Result<RunManifest> {
    std::fs::create_dir_all(dir)?;
    let mut steps = Vec::with_capacity(records.len());
    for rec in records {
        let name = format!("surface_{:05}.csv", rec.step);
        let surface = VolSurface::new(grid.clone(), rec.vols.clone(), rec.spot)?;
        surface.save_csv(&dir.join(&name))?;
        steps.push(StepSummary {
            step: rec.step,
            t: rec.t,
            spot: rec.spot,
            v: rec.v,
            theta: rec.p.theta,
            sigma: rec.p.sigma,
            rho: rec.p.rho,
            nu: rec.j.nus(),
            delta: rec.j.deltas(),
            delta_c_before: rec.delta_c_before,
            delta_c_after: rec.delta_c_after,
            recalibrated: rec.recalibrated,
            recal_failed: rec.recal_failed,
            max_violation: rec.max_violation,
            surface: name,
        });
    }
    let manifest = RunManifest {
        config: *cfg,
        grid: grid.clone(),
        initial_params: *p0,
        initial_jumps: *j0,
        initial_state: *state0,
        worst_violation: records.iter().map(|r| r.max_violation).fold(0.0, f64::max),
        steps,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    let mut f = std::fs::File::create(dir.join(RUN_MANIFEST))?;
    f.write_all(text.as_bytes())?;
    Ok(manifest)
}
