use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{layers, Mode, Network, OutputActivation};
use crate::error::{Error, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anneal {
    /// Multiply by `factor` whenever the held-out loss has not improved for
    /// `patience` epochs.
    Plateau,
    /// Half-cosine from `initial` down to `min_lr` over the run.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub anneal: Anneal,
}

impl LrSchedule {
    fn cosine(&self, epoch: usize, epochs: usize) -> f64 {
        let frac = epoch as f64 / epochs.max(1) as f64;
        self.min_lr + 0.5 * (self.initial - self.min_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 1e-3,
            factor: 0.5,
            patience: 10,
            min_lr: 1e-6,
            anneal: Anneal::Plateau,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    /// Share of the data held out to drive the schedule and pick the best
    /// epoch.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 1000,
            epochs: 200,
            lr: LrSchedule::default(),
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr = &self.lr;
        if self.batch_size == 0
            || !(0.0..1.0).contains(&self.val_fraction)
            || !(lr.initial > 0.0 && lr.factor > 0.0 && lr.factor <= 1.0 && lr.min_lr > 0.0)
        {
            return Err(Error::InvalidParameter(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    /// Held-out loss per epoch (equal to the training loss when nothing is
    /// held out).
    pub val_loss: Vec<f64>,
    pub lr: Vec<f64>,
    /// Epoch whose weights were kept.
    pub best_epoch: Option<usize>,
}

impl TrainReport {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.train_loss.last().copied()
    }

    /// Running minimum of the held-out loss, for monotone plots and checks.
    pub fn smoothed_val_loss(&self) -> Vec<f64> {
        self.val_loss
            .iter()
            .scan(f64::INFINITY, |m, &v| {
                *m = m.min(v);
                Some(*m)
            })
            .collect()
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Adam {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Generic mini-batch loop. `step` returns the batch loss and the gradient of
/// the trainable network's parameters for a set of sample indices (and may
/// update running statistics); `held_out` returns the loss on a set of
/// indices in eval mode.
pub(crate) fn fit<S, H>(net: &mut Network, n: usize, cfg: &TrainConfig, mut step: S, mut held_out: H) -> Result<TrainReport>
where
    S: FnMut(&mut Network, &[usize]) -> Result<(f64, Vec<f64>)>,
    H: FnMut(&Network, &[usize]) -> Result<f64>,
{
    cfg.validate()?;
    if n == 0 {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((n as f64) * cfg.val_fraction).floor() as usize;
    let n_val = if n_val == n { 0 } else { n_val };
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let mut val_idx = val_idx.to_vec();
    val_idx.sort_unstable();

    let mut adam = Adam::new(net.n_params());
    let mut lr = cfg.lr.initial;
    let mut report = TrainReport::default();
    let mut best = f64::INFINITY;
    let mut best_net: Option<Network> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        if cfg.lr.anneal == Anneal::Cosine {
            lr = cfg.lr.cosine(epoch, cfg.epochs);
        }
        train_idx.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            let (loss, grads) = step(net, batch)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
            adam.step(net.params_mut(), &grads, lr);
            total += loss * batch.len() as f64;
        }
        let train_loss = total / train_idx.len() as f64;
        let val = if val_idx.is_empty() {
            train_loss
        } else {
            held_out(net, &val_idx)?
        };
        if !val.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        report.train_loss.push(train_loss);
        report.val_loss.push(val);
        report.lr.push(lr);
        if val < best * (1.0 - 1e-4) {
            best = val;
            since_best = 0;
            report.best_epoch = Some(epoch);
            if !val_idx.is_empty() {
                best_net = Some(net.clone());
            }
        } else {
            since_best += 1;
            if cfg.lr.anneal == Anneal::Plateau && since_best >= cfg.lr.patience {
                lr = (lr * cfg.lr.factor).max(cfg.lr.min_lr);
                since_best = 0;
            }
        }
    }
    if let Some(b) = best_net {
        *net = b;
    }
    Ok(report)
}

/// Trains on raw inputs (scaled through the network's input boxes) against
/// targets with the mean-squared-error loss.
pub fn train(net: &mut Network, inputs: ArrayView2<f64>, targets: ArrayView2<f64>, cfg: &TrainConfig) -> Result<TrainReport> {
    if targets.nrows() != inputs.nrows() {
        return Err(Error::Shape {
            expected: inputs.nrows(),
            got: targets.nrows(),
        });
    }
    if targets.ncols() != net.spec.output_dim {
        return Err(Error::Shape {
            expected: net.spec.output_dim,
            got: targets.ncols(),
        });
    }
    if targets.nrows() == 0 {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    let x = net.scale_inputs(inputs)?;
    // a linear head learns standardised targets; the affine map is folded
    // back into its weights afterwards
    let (shift, scale) = match net.spec.output {
        OutputActivation::Linear => column_moments(targets),
        OutputActivation::StretchedSigmoid { .. } => (Array1::zeros(targets.ncols()), Array1::ones(targets.ncols())),
    };
    let y: Array2<f64> = (&targets - &shift) / &scale;
    let raw_mse = |pred: &Array2<f64>, y: &Array2<f64>| ((pred - y) * &scale).mapv(|d| d * d).mean().unwrap_or(0.0);
    let report = fit(
        net,
        x.nrows(),
        cfg,
        |net, idx| {
            let xb = Network::rows(&x, idx);
            let yb = Network::rows(&y, idx);
            let (pred, cache) = net.forward_cached(xb.view(), Mode::Train)?;
            let dy = layers::mse_backward(pred.view(), yb.view());
            let (_, grads) = net.backward(&cache, dy.view(), true);
            net.update_running_stats(&cache);
            Ok((raw_mse(&pred, &yb), grads.expect("requested")))
        },
        |net, idx| {
            let pred = net.forward(Network::rows(&x, idx).view(), Mode::Eval)?;
            Ok(raw_mse(&pred, &Network::rows(&y, idx)))
        },
    )?;
    if report.train_loss.is_empty() {
        // nothing trained, so the weights stay exactly at their initial values
        return Ok(report);
    }
    net.fold_output_affine(scale.as_slice().expect("contiguous"), shift.as_slice().expect("contiguous"));
    Ok(report)
}

/// Per-column mean and standard deviation (1 for constant columns).
fn column_moments(y: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = y.mean_axis(Axis(0)).expect("non-empty");
    let sd = y.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    (mean, sd)
}
