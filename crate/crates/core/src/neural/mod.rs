//! Residual ELU feed-forward networks with batch normalisation, written out
//! by hand: forward and backward passes, Adam training, the frozen-forward
//! composition used to learn the inverse map, and a checksummed weight file.
//!
//! All parameters of a network live in one flat vector; the layout is a pure
//! function of the [`NetworkSpec`], so the file only needs the spec and the
//! numbers.

pub mod layers;
mod io;
mod nn3;
mod train;

pub use io::{load, save, FORMAT_TAG, FORMAT_VERSION};
pub use nn3::{compose_nn3, invert, nn2_spec, train_nn3, Nn3, Nn3Data};
pub use train::{train, Anneal, LrSchedule, TrainConfig, TrainReport};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use layers::BnCache;

const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputActivation {
    Linear,
    /// `lo_k + (hi_k - lo_k) σ(z_k)` per output.
    StretchedSigmoid { lo: Vec<f64>, hi: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub n_main_layers: usize,
    pub width: usize,
    /// Two dense layers per main layer with a skip connection.
    pub residual: bool,
    pub batch_norm: bool,
    pub output: OutputActivation,
    /// Boxes mapped to `[0, 1]` for the leading inputs by [`Network::predict`];
    /// the remaining inputs are fed unchanged.
    pub input_box: Vec<[f64; 2]>,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || (self.n_main_layers > 0 && self.width == 0) {
            return Err(Error::InvalidParameter(format!("network dimensions must be positive: {self:?}")));
        }
        if let OutputActivation::StretchedSigmoid { lo, hi } = &self.output {
            if lo.len() != self.output_dim || hi.len() != self.output_dim {
                return Err(Error::Shape {
                    expected: self.output_dim,
                    got: lo.len().min(hi.len()),
                });
            }
            if lo.iter().zip(hi).any(|(l, h)| !(l < h)) {
                return Err(Error::InvalidParameter("stretched sigmoid needs lo < hi".into()));
            }
        }
        if self.input_box.len() > self.input_dim || self.input_box.iter().any(|[l, h]| !(l <= h)) {
            return Err(Error::InvalidParameter("input box does not fit the input".into()));
        }
        Ok(())
    }
}

/// Whether batch normalisation uses batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
struct Mat {
    off: usize,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: Mat,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Bn {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
    n: usize,
}

#[derive(Debug, Clone, Copy)]
struct Unit {
    dense: Dense,
    bn: Option<Bn>,
}

#[derive(Debug, Clone, Copy)]
enum Main {
    Plain(Unit),
    Residual { a: Unit, b: Unit, proj: Option<Mat> },
}

#[derive(Debug, Clone)]
struct Arch {
    main: Vec<Main>,
    out: Dense,
    n_params: usize,
    n_buffers: usize,
}

struct Alloc {
    params: usize,
    buffers: usize,
}

impl Alloc {
    fn mat(&mut self, rows: usize, cols: usize) -> Mat {
        let m = Mat {
            off: self.params,
            rows,
            cols,
        };
        self.params += rows * cols;
        m
    }

    fn vec(&mut self, n: usize) -> usize {
        let off = self.params;
        self.params += n;
        off
    }

    fn dense(&mut self, rows: usize, cols: usize) -> Dense {
        Dense {
            w: self.mat(rows, cols),
            b: self.vec(cols),
        }
    }

    fn unit(&mut self, n_in: usize, n_out: usize, bn: bool) -> Unit {
        let dense = self.dense(n_in, n_out);
        let bn = bn.then(|| {
            let gamma = self.vec(n_out);
            let beta = self.vec(n_out);
            let mean = self.buffers;
            let var = self.buffers + n_out;
            self.buffers += 2 * n_out;
            Bn {
                gamma,
                beta,
                mean,
                var,
                n: n_out,
            }
        });
        Unit { dense, bn }
    }
}

impl Arch {
    fn new(spec: &NetworkSpec) -> Arch {
        let mut a = Alloc { params: 0, buffers: 0 };
        let mut main = Vec::with_capacity(spec.n_main_layers);
        let mut n_in = spec.input_dim;
        for _ in 0..spec.n_main_layers {
            let layer = if spec.residual {
                let ua = a.unit(n_in, spec.width, spec.batch_norm);
                let ub = a.unit(spec.width, spec.width, spec.batch_norm);
                let proj = (n_in != spec.width).then(|| a.mat(n_in, spec.width));
                Main::Residual { a: ua, b: ub, proj }
            } else {
                Main::Plain(a.unit(n_in, spec.width, spec.batch_norm))
            };
            main.push(layer);
            n_in = spec.width;
        }
        let out = a.dense(n_in, spec.output_dim);
        Arch {
            main,
            out,
            n_params: a.params,
            n_buffers: a.buffers,
        }
    }
}

struct UnitCache {
    x: Array2<f64>,
    bn: Option<BnCache>,
    z: Array2<f64>,
}

enum MainCache {
    Plain(UnitCache),
    Residual { a: UnitCache, b: UnitCache },
}

/// Intermediate values of one forward pass, consumed by the backward pass.
pub struct Cache {
    mode: Mode,
    main: Vec<MainCache>,
    out_x: Array2<f64>,
    out_z: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    arch: Arch,
    params: Vec<f64>,
    buffers: Vec<f64>,
}

fn view<'a>(v: &'a [f64], m: Mat) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((m.rows, m.cols), &v[m.off..m.off + m.rows * m.cols]).expect("layout")
}

fn view1(v: &[f64], off: usize, n: usize) -> ArrayView1<'_, f64> {
    ArrayView1::from(&v[off..off + n])
}

fn add_into(g: &mut [f64], off: usize, src: impl IntoIterator<Item = f64>) {
    for (d, s) in g[off..].iter_mut().zip(src) {
        *d += s;
    }
}

impl Network {
    /// Fresh network: He-normal hidden weights, smaller projection and output
    /// weights, zero biases, unit batch-norm scales and running variances.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Network> {
        spec.validate()?;
        let arch = Arch::new(&spec);
        let mut params = vec![0.0; arch.n_params];
        let mut buffers = vec![0.0; arch.n_buffers];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fn fill(m: Mat, gain: f64, params: &mut [f64], rng: &mut ChaCha8Rng) {
            let normal = Normal::new(0.0, (gain / m.rows as f64).sqrt()).expect("positive std");
            for v in &mut params[m.off..m.off + m.rows * m.cols] {
                *v = normal.sample(rng);
            }
        }
        fn init_unit(u: &Unit, gain: f64, params: &mut [f64], buffers: &mut [f64], rng: &mut ChaCha8Rng) {
            fill(u.dense.w, gain, params, rng);
            if let Some(bn) = u.bn {
                params[bn.gamma..bn.gamma + bn.n].fill(1.0);
                buffers[bn.var..bn.var + bn.n].fill(1.0);
            }
        }
        for layer in &arch.main {
            match layer {
                Main::Plain(u) => init_unit(u, 2.0, &mut params, &mut buffers, &mut rng),
                Main::Residual { a, b, proj } => {
                    init_unit(a, 2.0, &mut params, &mut buffers, &mut rng);
                    init_unit(b, 1.0, &mut params, &mut buffers, &mut rng);
                    if let Some(p) = proj {
                        fill(*p, 1.0, &mut params, &mut rng);
                    }
                }
            }
        }
        fill(arch.out.w, 1.0, &mut params, &mut rng);
        Ok(Network {
            spec,
            arch,
            params,
            buffers,
        })
    }

    /// Rebuilds a network from stored values.
    pub fn from_parts(spec: NetworkSpec, params: Vec<f64>, buffers: Vec<f64>) -> Result<Network> {
        spec.validate()?;
        let arch = Arch::new(&spec);
        if params.len() != arch.n_params {
            return Err(Error::Shape {
                expected: arch.n_params,
                got: params.len(),
            });
        }
        if buffers.len() != arch.n_buffers {
            return Err(Error::Shape {
                expected: arch.n_buffers,
                got: buffers.len(),
            });
        }
        if params.iter().chain(&buffers).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite network parameter".into()));
        }
        Ok(Network {
            spec,
            arch,
            params,
            buffers,
        })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Batch-norm running means and variances.
    pub fn buffers(&self) -> &[f64] {
        &self.buffers
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.spec.input_dim {
            return Err(Error::Shape {
                expected: self.spec.input_dim,
                got: x.ncols(),
            });
        }
        Ok(())
    }

    /// Maps raw inputs through the input boxes (no clamping, so inputs
    /// outside the box extrapolate).
    pub fn scale_inputs(&self, raw: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&raw)?;
        let mut x = raw.to_owned();
        for (k, &[lo, hi]) in self.spec.input_box.iter().enumerate() {
            x.column_mut(k)
                .mapv_inplace(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 });
        }
        Ok(x)
    }

    /// Eval-mode forward pass on raw (unscaled) inputs.
    pub fn predict(&self, raw: ArrayView2<f64>) -> Result<Array2<f64>> {
        let x = self.scale_inputs(raw)?;
        self.forward(x.view(), Mode::Eval)
    }

    /// Forward pass on scaled inputs. Train mode normalises with batch
    /// statistics but leaves the running statistics alone.
    pub fn forward(&self, x: ArrayView2<f64>, mode: Mode) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x, mode)?.0)
    }

    fn unit_forward(&self, u: &Unit, x: Array2<f64>, mode: Mode) -> UnitCache {
        let p = &self.params;
        let d = u.dense;
        let lin = layers::dense_forward(x.view(), view(p, d.w), Some(view1(p, d.b, d.w.cols)));
        let (z, bn) = match u.bn {
            None => (lin, None),
            Some(bn) => {
                let gamma = view1(p, bn.gamma, bn.n);
                let beta = view1(p, bn.beta, bn.n);
                match mode {
                    Mode::Train => {
                        let (z, c) = layers::batchnorm_forward_train(lin.view(), gamma, beta);
                        (z, Some(c))
                    }
                    Mode::Eval => {
                        let b = &self.buffers;
                        let z = layers::batchnorm_forward_eval(
                            lin.view(),
                            gamma,
                            beta,
                            view1(b, bn.mean, bn.n),
                            view1(b, bn.var, bn.n),
                        );
                        (z, None)
                    }
                }
            }
        };
        UnitCache { x, bn, z }
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>, mode: Mode) -> Result<(Array2<f64>, Cache)> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        let mut main = Vec::with_capacity(self.arch.main.len());
        for layer in &self.arch.main {
            match layer {
                Main::Plain(u) => {
                    let c = self.unit_forward(u, h, mode);
                    h = layers::elu_forward(c.z.view());
                    main.push(MainCache::Plain(c));
                }
                Main::Residual { a, b, proj } => {
                    let skip = match proj {
                        Some(m) => h.dot(&view(&self.params, *m)),
                        None => h.clone(),
                    };
                    let ca = self.unit_forward(a, h, mode);
                    let ha = layers::elu_forward(ca.z.view());
                    let cb = self.unit_forward(b, ha, mode);
                    h = layers::elu_forward(cb.z.view()) + skip;
                    main.push(MainCache::Residual { a: ca, b: cb });
                }
            }
        }
        let o = self.arch.out;
        let z = layers::dense_forward(h.view(), view(&self.params, o.w), Some(view1(&self.params, o.b, o.w.cols)));
        let y = match &self.spec.output {
            OutputActivation::Linear => z.clone(),
            OutputActivation::StretchedSigmoid { lo, hi } => layers::stretched_sigmoid_forward(z.view(), lo, hi),
        };
        Ok((
            y,
            Cache {
                mode,
                main,
                out_x: h,
                out_z: z,
            },
        ))
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// statistics.
    pub fn update_running_stats(&mut self, cache: &Cache) {
        let mut update = |u: &Unit, c: &UnitCache| {
            if let (Some(bn), Some(bc)) = (u.bn, &c.bn) {
                for k in 0..bn.n {
                    let m = &mut self.buffers[bn.mean + k];
                    *m = BN_MOMENTUM * *m + (1.0 - BN_MOMENTUM) * bc.mean[k];
                    let v = &mut self.buffers[bn.var + k];
                    *v = BN_MOMENTUM * *v + (1.0 - BN_MOMENTUM) * bc.var[k];
                }
            }
        };
        for (layer, c) in self.arch.main.iter().zip(&cache.main) {
            match (layer, c) {
                (Main::Plain(u), MainCache::Plain(c)) => update(u, c),
                (Main::Residual { a, b, .. }, MainCache::Residual { a: ca, b: cb }) => {
                    update(a, ca);
                    update(b, cb);
                }
                _ => unreachable!("cache built by this network"),
            }
        }
    }

    fn unit_backward(&self, u: &Unit, c: &UnitCache, dout: Array2<f64>, mode: Mode, grads: &mut Option<Vec<f64>>) -> Array2<f64> {
        let p = &self.params;
        let want = grads.is_some();
        let dz = layers::elu_backward(c.z.view(), dout.view());
        let dlin = match u.bn {
            None => dz,
            Some(bn) => {
                let gamma = view1(p, bn.gamma, bn.n);
                match mode {
                    Mode::Train => {
                        let bc = c.bn.as_ref().expect("train cache");
                        let (dx, g) = layers::batchnorm_backward_train(bc, gamma, dz.view(), want);
                        if let (Some(gr), Some((dg, db))) = (grads.as_mut(), g) {
                            add_into(gr, bn.gamma, dg);
                            add_into(gr, bn.beta, db);
                        }
                        dx
                    }
                    Mode::Eval => {
                        let lin = layers::dense_forward(c.x.view(), view(p, u.dense.w), Some(view1(p, u.dense.b, bn.n)));
                        let mean = view1(&self.buffers, bn.mean, bn.n);
                        let var = view1(&self.buffers, bn.var, bn.n);
                        let (dx, g) = layers::batchnorm_backward_eval(lin.view(), gamma, mean, var, dz.view(), want);
                        if let (Some(gr), Some((dg, db))) = (grads.as_mut(), g) {
                            add_into(gr, bn.gamma, dg);
                            add_into(gr, bn.beta, db);
                        }
                        dx
                    }
                }
            }
        };
        let (dx, g) = layers::dense_backward(c.x.view(), view(p, u.dense.w), dlin.view(), want);
        if let (Some(gr), Some((dw, db))) = (grads.as_mut(), g) {
            add_into(gr, u.dense.w.off, dw.iter().copied());
            add_into(gr, u.dense.b, db);
        }
        dx
    }

    /// Backward pass from `dy = ∂L/∂y`. Returns `∂L/∂x` and, if requested,
    /// the flat parameter gradient.
    pub fn backward(&self, cache: &Cache, dy: ArrayView2<f64>, param_grads: bool) -> (Array2<f64>, Option<Vec<f64>>) {
        let mut grads = param_grads.then(|| vec![0.0; self.params.len()]);
        let dz = match &self.spec.output {
            OutputActivation::Linear => dy.to_owned(),
            OutputActivation::StretchedSigmoid { lo, hi } => {
                layers::stretched_sigmoid_backward(cache.out_z.view(), lo, hi, dy)
            }
        };
        let o = self.arch.out;
        let (mut dh, g) = layers::dense_backward(cache.out_x.view(), view(&self.params, o.w), dz.view(), param_grads);
        if let (Some(gr), Some((dw, db))) = (grads.as_mut(), g) {
            add_into(gr, o.w.off, dw.iter().copied());
            add_into(gr, o.b, db);
        }
        for (layer, c) in self.arch.main.iter().zip(&cache.main).rev() {
            dh = match (layer, c) {
                (Main::Plain(u), MainCache::Plain(c)) => self.unit_backward(u, c, dh, cache.mode, &mut grads),
                (Main::Residual { a, b, proj }, MainCache::Residual { a: ca, b: cb }) => {
                    let skip = match proj {
                        Some(m) => {
                            if let Some(gr) = grads.as_mut() {
                                add_into(gr, m.off, ca.x.t().dot(&dh).iter().copied());
                            }
                            dh.dot(&view(&self.params, *m).t())
                        }
                        None => dh.clone(),
                    };
                    let da = self.unit_backward(b, cb, dh, cache.mode, &mut grads);
                    self.unit_backward(a, ca, da, cache.mode, &mut grads) + skip
                }
                _ => unreachable!("cache built by this network"),
            };
        }
        (dh, grads)
    }

    /// Mean-squared-error loss and its parameter gradient on scaled inputs.
    pub fn loss_and_grad(&self, x: ArrayView2<f64>, y: ArrayView2<f64>, mode: Mode) -> Result<(f64, Vec<f64>)> {
        if y.ncols() != self.spec.output_dim || y.nrows() != x.nrows() {
            return Err(Error::Shape {
                expected: self.spec.output_dim,
                got: y.ncols(),
            });
        }
        let (pred, cache) = self.forward_cached(x, mode)?;
        let loss = layers::mse(pred.view(), y);
        let dy = layers::mse_backward(pred.view(), y);
        let (_, g) = self.backward(&cache, dy.view(), true);
        Ok((loss, g.expect("requested")))
    }

    /// `Σ_k w_k ∂y_k/∂x` for each row, i.e. the input gradient of `⟨w, y⟩`.
    pub fn input_gradient(&self, x: ArrayView2<f64>, w: ArrayView2<f64>, mode: Mode) -> Result<Array2<f64>> {
        let (_, cache) = self.forward_cached(x, mode)?;
        Ok(self.backward(&cache, w, false).0)
    }

    /// Replaces the linear output `z` by `z * scale + shift`, column by column.
    pub(crate) fn fold_output_affine(&mut self, scale: &[f64], shift: &[f64]) {
        let o = self.arch.out;
        let cols = o.w.cols;
        for row in self.params[o.w.off..o.w.off + o.w.rows * cols].chunks_mut(cols) {
            for (w, s) in row.iter_mut().zip(scale) {
                *w *= s;
            }
        }
        for ((b, s), m) in self.params[o.b..o.b + cols].iter_mut().zip(scale).zip(shift) {
            *b = *b * s + m;
        }
    }

    /// Row-wise gather of a batch.
    pub(crate) fn rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
        x.select(Axis(0), idx)
    }
}

/// Column vector helper for single-sample evaluation.
pub fn as_row(x: &[f64]) -> Array2<f64> {
    Array1::from(x.to_vec()).insert_axis(Axis(0))
}
