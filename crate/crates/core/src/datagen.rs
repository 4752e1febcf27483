//! Synthetic training data: uniform parameter draws, their model surfaces,
//! the feature scaling used by the networks, and the dataset files.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affine::{default_bucket_edges, HestonParams, JumpBucket, JumpSpec, MarketState, N_BUCKETS};
use crate::error::{Error, Result};
use crate::pricing::DampingConfig;
use crate::surface::{
    build_surface, check_static_arbitrage_tol, Grid, DAYS_PER_YEAR, MAX_DAYS, MAX_MONEYNESS, MIN_DAYS,
    MIN_MONEYNESS, N_MATURITIES, N_MONEYNESS, N_POINTS,
};

pub const FORMAT_VERSION: u32 = 1;

/// Column layout of the 41 network inputs.
pub mod col {
    pub const R: usize = 0;
    pub const Q: usize = 1;
    pub const TAU: usize = 2;
    pub const MONEYNESS: usize = 12;
    pub const V0: usize = 25;
    pub const KAPPA: usize = 26;
    pub const THETA: usize = 27;
    pub const SIGMA: usize = 28;
    pub const RHO: usize = 29;
    pub const LAMBDA: usize = 30;
    pub const NU: usize = 31;
    pub const DELTA: usize = 36;
    /// Inputs before the jump-law block.
    pub const N_PASS_THROUGH: usize = 31;
    pub const N_INPUTS: usize = 41;
}

/// Largest tolerated static-arbitrage violation of a stored surface.
pub const MAX_STORED_VIOLATION: f64 = 1e-5;
const WARN_DROP_RATE: f64 = 0.05;
const FAIL_DROP_RATE: f64 = 0.5;
const MAX_REJECTIONS: usize = 10_000;
/// Spot of every generated surface; implied vols do not depend on it.
const SPOT: f64 = 100.0;

/// Per-parameter sampling intervals `[lo, hi]`. The jump laws of all five
/// buckets share the `nu` and `delta` intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingBounds {
    pub r: [f64; 2],
    pub q: [f64; 2],
    pub v0: [f64; 2],
    pub kappa: [f64; 2],
    pub theta: [f64; 2],
    pub sigma: [f64; 2],
    pub rho: [f64; 2],
    pub lambda: [f64; 2],
    pub nu: [f64; 2],
    pub delta: [f64; 2],
}

impl Default for SamplingBounds {
    fn default() -> Self {
        SamplingBounds {
            r: [0.0, 0.06],
            q: [0.0, 0.06],
            v0: [1e-4, 0.25],
            kappa: [1.0, 10.0],
            theta: [0.01, 0.5],
            sigma: [0.01, 0.5],
            rho: [-0.95, 0.95],
            lambda: [0.0, 1.0],
            nu: [-0.3, 0.3],
            delta: [0.01, 0.3],
        }
    }
}

impl SamplingBounds {
    fn named(&self) -> [(&'static str, [f64; 2]); 10] {
        [
            ("r", self.r),
            ("q", self.q),
            ("v0", self.v0),
            ("kappa", self.kappa),
            ("theta", self.theta),
            ("sigma", self.sigma),
            ("rho", self.rho),
            ("lambda", self.lambda),
            ("nu", self.nu),
            ("delta", self.delta),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in self.named() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Bounds(format!("{name}: [{lo}, {hi}] is not an interval")));
            }
        }
        let positive = [("v0", self.v0), ("kappa", self.kappa), ("theta", self.theta), ("sigma", self.sigma)];
        for (name, [lo, _]) in positive {
            if lo <= 0.0 {
                return Err(Error::Bounds(format!("{name} must stay positive, lower bound {lo}")));
            }
        }
        if self.rho[0] < -1.0 || self.rho[1] > 1.0 || self.lambda[0] < 0.0 || self.delta[0] < 0.0 {
            return Err(Error::Bounds(format!("rho, lambda or delta outside its domain: {self:?}")));
        }
        Ok(())
    }

    /// Per-input `[lo, hi]` box in input-column order; the grid columns get
    /// the fixed grid ranges.
    pub fn input_box(&self) -> Vec<[f64; 2]> {
        let mut b = vec![self.r, self.q];
        b.extend([[MIN_DAYS / DAYS_PER_YEAR, MAX_DAYS / DAYS_PER_YEAR]; N_MATURITIES]);
        b.extend([[MIN_MONEYNESS, MAX_MONEYNESS]; N_MONEYNESS]);
        b.extend([self.v0, self.kappa, self.theta, self.sigma, self.rho, self.lambda]);
        b.extend([self.nu; N_BUCKETS]);
        b.extend([self.delta; N_BUCKETS]);
        b
    }
}

/// One model point: Heston block, initial variance and jump extension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelPoint {
    pub params: HestonParams,
    pub v0: f64,
    pub jumps: JumpSpec,
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    let u: f64 = rng.random();
    if hi > lo {
        lo + (hi - lo) * u
    } else {
        lo
    }
}

/// Uniform draw from the box, redrawn until the Feller condition holds.
pub fn sample_params(seed: u64, bounds: &SamplingBounds) -> Result<ModelPoint> {
    bounds.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_REJECTIONS {
        let r = uniform(&mut rng, bounds.r);
        let q = uniform(&mut rng, bounds.q);
        let v0 = uniform(&mut rng, bounds.v0);
        let kappa = uniform(&mut rng, bounds.kappa);
        let theta = uniform(&mut rng, bounds.theta);
        let sigma = uniform(&mut rng, bounds.sigma);
        let rho = uniform(&mut rng, bounds.rho);
        let lambda = uniform(&mut rng, bounds.lambda);
        let mut buckets = [JumpBucket { nu: 0.0, delta: 0.0 }; N_BUCKETS];
        for b in buckets.iter_mut() {
            b.nu = uniform(&mut rng, bounds.nu);
        }
        for b in buckets.iter_mut() {
            b.delta = uniform(&mut rng, bounds.delta);
        }
        let params = HestonParams {
            r,
            q,
            kappa,
            theta,
            sigma,
            rho,
        };
        if params.feller() {
            params.validate()?;
            let jumps = JumpSpec::new(lambda, buckets, default_bucket_edges())?;
            return Ok(ModelPoint { params, v0, jumps });
        }
    }
    Err(Error::Bounds(format!(
        "no draw satisfied the Feller condition in {MAX_REJECTIONS} attempts (rejection rate above 99%)"
    )))
}

/// Seed of sample `index` in a dataset with master seed `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(index))
}

/// A network training pair: 41 inputs and 130 implied vols.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
}

impl Sample {
    pub fn new(point: &ModelPoint, grid: &Grid, targets: Vec<f64>) -> Sample {
        Sample {
            inputs: model_inputs(point, grid),
            targets,
        }
    }

    /// The model point encoded in the inputs.
    pub fn point(&self) -> Result<ModelPoint> {
        point_from_inputs(&self.inputs)
    }
}

/// The 41 inputs of a model point on a grid.
pub fn model_inputs(point: &ModelPoint, grid: &Grid) -> Vec<f64> {
    let p = &point.params;
    let mut x = Vec::with_capacity(col::N_INPUTS);
    x.extend([p.r, p.q]);
    x.extend(&grid.maturities);
    x.extend(&grid.moneyness);
    x.extend([point.v0, p.kappa, p.theta, p.sigma, p.rho, point.jumps.lambda]);
    x.extend(point.jumps.nus());
    x.extend(point.jumps.deltas());
    x
}

pub fn point_from_inputs(x: &[f64]) -> Result<ModelPoint> {
    if x.len() != col::N_INPUTS {
        return Err(Error::Shape {
            expected: col::N_INPUTS,
            got: x.len(),
        });
    }
    let params = HestonParams {
        r: x[col::R],
        q: x[col::Q],
        kappa: x[col::KAPPA],
        theta: x[col::THETA],
        sigma: x[col::SIGMA],
        rho: x[col::RHO],
    };
    let mut buckets = [JumpBucket { nu: 0.0, delta: 0.0 }; N_BUCKETS];
    for (b, bucket) in buckets.iter_mut().enumerate() {
        bucket.nu = x[col::NU + b];
        bucket.delta = x[col::DELTA + b];
    }
    Ok(ModelPoint {
        params,
        v0: x[col::V0],
        jumps: JumpSpec::new(x[col::LAMBDA], buckets, default_bucket_edges())?,
    })
}

pub fn grid_from_inputs(x: &[f64]) -> Result<Grid> {
    Grid::new(
        x[col::TAU..col::TAU + N_MATURITIES].to_vec(),
        x[col::MONEYNESS..col::MONEYNESS + N_MONEYNESS].to_vec(),
    )
}

pub fn column_names() -> Vec<String> {
    let mut names = vec!["r".to_string(), "q".to_string()];
    names.extend((1..=N_MATURITIES).map(|i| format!("tau_{i}")));
    names.extend((1..=N_MONEYNESS).map(|i| format!("m_{i}")));
    names.extend(["v0", "kappa", "theta", "sigma", "rho", "lambda"].map(String::from));
    names.extend((1..=N_BUCKETS).map(|i| format!("nu_{i}")));
    names.extend((1..=N_BUCKETS).map(|i| format!("delta_{i}")));
    names.extend((1..=N_POINTS).map(|i| format!("iv_{i}")));
    names
}

/// Affine maps sending each feature's box to `[0, 1]`. A degenerate box maps
/// to the constant 0.5. Implied vols are never scaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSpec {
    pub boxes: Vec<[f64; 2]>,
}

impl ScalingSpec {
    pub fn from_bounds(bounds: &SamplingBounds) -> ScalingSpec {
        ScalingSpec {
            boxes: bounds.input_box(),
        }
    }

    /// Restriction to a subset of features, in the given order.
    pub fn select(&self, features: &[usize]) -> ScalingSpec {
        ScalingSpec {
            boxes: features.iter().map(|&k| self.boxes[k]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Scales one feature; values outside the box are clamped and flagged.
    pub fn scale_one(&self, k: usize, x: f64) -> (f64, bool) {
        let [lo, hi] = self.boxes[k];
        if hi > lo {
            let y = (x - lo) / (hi - lo);
            if (0.0..=1.0).contains(&y) {
                (y, false)
            } else {
                (y.clamp(0.0, 1.0), true)
            }
        } else {
            (0.5, x != lo)
        }
    }

    pub fn unscale_one(&self, k: usize, y: f64) -> f64 {
        let [lo, hi] = self.boxes[k];
        if hi > lo {
            lo + y * (hi - lo)
        } else {
            lo
        }
    }

    /// Scales a feature vector; the flag reports whether anything was clamped.
    pub fn scale(&self, x: &[f64]) -> Result<(Vec<f64>, bool)> {
        self.check_len(x.len())?;
        let mut clamped = false;
        let y = x
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let (s, c) = self.scale_one(k, v);
                clamped |= c;
                s
            })
            .collect();
        Ok((y, clamped))
    }

    pub fn unscale(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_len(y.len())?;
        Ok(y.iter().enumerate().map(|(k, &v)| self.unscale_one(k, v)).collect())
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.boxes.len() {
            return Err(Error::Shape {
                expected: self.boxes.len(),
                got: n,
            });
        }
        Ok(())
    }
}

/// Scales the inputs of a sample; targets pass through.
pub fn scale(sample: &Sample, spec: &ScalingSpec) -> Result<(Sample, bool)> {
    let (inputs, clamped) = spec.scale(&sample.inputs)?;
    Ok((
        Sample {
            inputs,
            targets: sample.targets.clone(),
        },
        clamped,
    ))
}

pub fn unscale(sample: &Sample, spec: &ScalingSpec) -> Result<Sample> {
    Ok(Sample {
        inputs: spec.unscale(&sample.inputs)?,
        targets: sample.targets.clone(),
    })
}

/// Why a draw did not make it into the dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum DropReason {
    Pricing(String),
    Arbitrage(f64),
}

/// Draws and prices the samples with the given indices.
pub fn generate_samples(
    indices: &[u64],
    seed: u64,
    bounds: &SamplingBounds,
    grid: &Grid,
    cfg: &DampingConfig,
) -> Result<Vec<std::result::Result<Sample, DropReason>>> {
    bounds.validate()?;
    grid.validate()?;
    cfg.validate()?;
    indices
        .par_iter()
        .map(|&i| {
            let point = sample_params(sample_seed(seed, i), bounds)?;
            let state = MarketState::from_spot(SPOT, point.v0);
            let out = match build_surface(&state, &point.params, &point.jumps, grid, cfg) {
                Err(e) if e.is_numeric() => Err(DropReason::Pricing(e.to_string())),
                Err(e) => return Err(e),
                Ok(s) => {
                    let rep = check_static_arbitrage_tol(&s, point.params.r, point.params.q, MAX_STORED_VIOLATION);
                    if rep.is_clean() {
                        Ok(Sample::new(&point, grid, s.vols))
                    } else {
                        Err(DropReason::Arbitrage(rep.max_violation))
                    }
                }
            };
            Ok(out)
        })
        .collect()
}

/// Structured summary written next to a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub requested: u64,
    pub written: u64,
    pub dropped_pricing: u64,
    pub dropped_arbitrage: u64,
    pub drop_rate: f64,
    pub warning: Option<String>,
    pub wall_time_s: f64,
    pub bounds: SamplingBounds,
    pub grid: Grid,
    pub damping: DampingConfig,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)?;
        let m: Manifest = toml::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                found: m.format_version.to_string(),
                expected: FORMAT_VERSION.to_string(),
            });
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// `data.csv` → `data.manifest.toml`.
pub fn manifest_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("manifest.toml")
}

/// Generates `n` samples, drops the ones that cannot be priced or fail the
/// arbitrage audit, and writes the CSV and its manifest.
pub fn generate_dataset(
    n: u64,
    seed: u64,
    bounds: &SamplingBounds,
    grid: &Grid,
    cfg: &DampingConfig,
    out: &Path,
) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::InvalidParameter("dataset size must be at least 1".into()));
    }
    let start = Instant::now();
    let indices: Vec<u64> = (0..n).collect();
    let results = generate_samples(&indices, seed, bounds, grid, cfg)?;
    let (mut dropped_pricing, mut dropped_arbitrage) = (0, 0);
    let mut samples = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(s) => samples.push(s),
            Err(DropReason::Pricing(_)) => dropped_pricing += 1,
            Err(DropReason::Arbitrage(_)) => dropped_arbitrage += 1,
        }
    }
    let drop_rate = (dropped_pricing + dropped_arbitrage) as f64 / n as f64;
    if drop_rate > FAIL_DROP_RATE {
        return Err(Error::Bounds(format!(
            "{:.1}% of the draws could not be priced or failed the arbitrage audit",
            100.0 * drop_rate
        )));
    }
    write_samples(out, &samples)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed,
        requested: n,
        written: samples.len() as u64,
        dropped_pricing,
        dropped_arbitrage,
        drop_rate,
        warning: (drop_rate > WARN_DROP_RATE)
            .then(|| format!("drop rate {:.2}% exceeds {:.0}%", 100.0 * drop_rate, 100.0 * WARN_DROP_RATE)),
        wall_time_s: start.elapsed().as_secs_f64(),
        bounds: *bounds,
        grid: grid.clone(),
        damping: *cfg,
    };
    manifest.save(&manifest_path(out))?;
    Ok(manifest)
}

pub fn write_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{}", column_names().join(","))?;
    for s in samples {
        let row: Vec<String> = s.inputs.iter().chain(&s.targets).map(|v| format!("{v:e}")).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>> {
    let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
    let header = lines.next().ok_or_else(|| Error::Corrupt(format!("{} is empty", path.display())))??;
    if header.split(',').map(str::trim).ne(column_names().iter().map(String::as_str)) {
        return Err(Error::Corrupt(format!("{}: unexpected header", path.display())));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Corrupt(format!("{} row {}: {e}", path.display(), n + 1)))?;
        if vals.len() != col::N_INPUTS + N_POINTS {
            return Err(Error::Corrupt(format!(
                "{} row {}: {} columns instead of {}",
                path.display(),
                n + 1,
                vals.len(),
                col::N_INPUTS + N_POINTS
            )));
        }
        let (inputs, targets) = vals.split_at(col::N_INPUTS);
        out.push(Sample {
            inputs: inputs.to_vec(),
            targets: targets.to_vec(),
        });
    }
    Ok(out)
}
