//! Forward and backward passes of the individual layer types on row-major
//! batches (one sample per row).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

pub const BN_EPS: f64 = 1e-5;

/// `x W + b`.
pub fn dense_forward(x: ArrayView2<f64>, w: ArrayView2<f64>, b: Option<ArrayView1<f64>>) -> Array2<f64> {
    let mut y = x.dot(&w);
    if let Some(b) = b {
        y += &b;
    }
    y
}

/// Returns `dx` and, when asked for, `(dW, db)`.
pub fn dense_backward(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    dy: ArrayView2<f64>,
    param_grads: bool,
) -> (Array2<f64>, Option<(Array2<f64>, Array1<f64>)>) {
    let dx = dy.dot(&w.t());
    let grads = param_grads.then(|| (x.t().dot(&dy), dy.sum_axis(Axis(0))));
    (dx, grads)
}

pub fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        z.exp_m1()
    }
}

pub fn elu_forward(z: ArrayView2<f64>) -> Array2<f64> {
    z.mapv(elu)
}

pub fn elu_backward(z: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
    let mut dz = dy.to_owned();
    Zip::from(&mut dz).and(&z).for_each(|d, &z| {
        if z <= 0.0 {
            *d *= z.exp();
        }
    });
    dz
}

/// Batch statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub x_hat: Array2<f64>,
    pub inv_std: Array1<f64>,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// Batch normalisation with the statistics of the batch itself.
pub fn batchnorm_forward_train(
    x: ArrayView2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
) -> (Array2<f64>, BnCache) {
    let n = x.nrows() as f64;
    let mean = x.sum_axis(Axis(0)) / n;
    let centred = &x - &mean;
    let var = centred.mapv(|c| c * c).sum_axis(Axis(0)) / n;
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let x_hat = centred * &inv_std;
    let y = &x_hat * &gamma + &beta;
    (
        y,
        BnCache {
            x_hat,
            inv_std,
            mean,
            var,
        },
    )
}

/// Batch normalisation with frozen running statistics.
pub fn batchnorm_forward_eval(
    x: ArrayView2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
    mean: ArrayView1<f64>,
    var: ArrayView1<f64>,
) -> Array2<f64> {
    let scale = Zip::from(&gamma).and(&var).map_collect(|g, v| g / (v + BN_EPS).sqrt());
    (&x - &mean) * &scale + &beta
}

/// Returns `dx` and, when asked for, `(dγ, dβ)`.
pub fn batchnorm_backward_train(
    cache: &BnCache,
    gamma: ArrayView1<f64>,
    dy: ArrayView2<f64>,
    param_grads: bool,
) -> (Array2<f64>, Option<(Array1<f64>, Array1<f64>)>) {
    let n = dy.nrows() as f64;
    let dx_hat = &dy * &gamma;
    let sum_dxh = dx_hat.sum_axis(Axis(0));
    let sum_dxh_xh = (&dx_hat * &cache.x_hat).sum_axis(Axis(0));
    let mut dx = dx_hat * n - &sum_dxh - &cache.x_hat * &sum_dxh_xh;
    dx *= &(&cache.inv_std / n);
    let grads = param_grads.then(|| ((&dy * &cache.x_hat).sum_axis(Axis(0)), dy.sum_axis(Axis(0))));
    (dx, grads)
}

/// Returns `dx` and, when asked for, `(dγ, dβ)`; `x` is the layer input.
pub fn batchnorm_backward_eval(
    x: ArrayView2<f64>,
    gamma: ArrayView1<f64>,
    mean: ArrayView1<f64>,
    var: ArrayView1<f64>,
    dy: ArrayView2<f64>,
    param_grads: bool,
) -> (Array2<f64>, Option<(Array1<f64>, Array1<f64>)>) {
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let dx = &dy * &(&gamma * &inv_std);
    let grads = param_grads.then(|| {
        let x_hat = (&x - &mean) * &inv_std;
        ((&dy * &x_hat).sum_axis(Axis(0)), dy.sum_axis(Axis(0)))
    });
    (dx, grads)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `lo + (hi - lo) σ(z)`, kept strictly inside `(lo, hi)`.
pub fn stretched_sigmoid(z: f64, lo: f64, hi: f64) -> f64 {
    (lo + (hi - lo) * sigmoid(z)).clamp(lo.next_up(), hi.next_down())
}

pub fn stretched_sigmoid_forward(z: ArrayView2<f64>, lo: &[f64], hi: &[f64]) -> Array2<f64> {
    let mut y = z.to_owned();
    for mut row in y.rows_mut() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = stretched_sigmoid(*v, lo[k], hi[k]);
        }
    }
    y
}

pub fn stretched_sigmoid_backward(z: ArrayView2<f64>, lo: &[f64], hi: &[f64], dy: ArrayView2<f64>) -> Array2<f64> {
    let mut dz = dy.to_owned();
    for (mut drow, zrow) in dz.rows_mut().into_iter().zip(z.rows()) {
        for (k, (d, &z)) in drow.iter_mut().zip(zrow).enumerate() {
            let s = sigmoid(z);
            *d *= (hi[k] - lo[k]) * s * (1.0 - s);
        }
    }
    dz
}

/// Mean over all entries of the squared error.
pub fn mse(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> f64 {
    let n = pred.len() as f64;
    Zip::from(&pred).and(&target).fold(0.0, |acc, p, t| acc + (p - t) * (p - t)) / n
}

pub fn mse_backward(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Array2<f64> {
    let n = pred.len() as f64;
    (&pred - &target) * (2.0 / n)
}
