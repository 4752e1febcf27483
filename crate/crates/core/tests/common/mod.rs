#![allow(dead_code)]

use crc_core::affine::{HestonParams, JumpSpec, MarketState};
use crc_core::neural::layers;
use crc_core::neural::{Mode, Network, NetworkSpec, OutputActivation};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Parameter sets of the three reference cases: spot, state, Heston block
/// and a jump law shared by every bucket.
pub struct FigureCase {
    pub name: &'static str,
    pub spot: f64,
    pub v0: f64,
    pub p: HestonParams,
    pub lambda: f64,
    pub nu: f64,
    pub delta: f64,
}

impl FigureCase {
    pub fn jumps(&self) -> JumpSpec {
        JumpSpec::uniform(self.lambda, self.nu, self.delta).unwrap()
    }

    pub fn state(&self) -> MarketState {
        MarketState::from_spot(self.spot, self.v0)
    }
}

pub fn figure_cases() -> Vec<FigureCase> {
    vec![
        FigureCase {
            name: "fig1",
            spot: 100.0,
            v0: 0.0001,
            p: HestonParams::new(0.0205, 0.03, 7.797, 0.247, 0.280, 0.042).unwrap(),
            lambda: 0.081,
            nu: 0.159,
            delta: 0.205,
        },
        FigureCase {
            name: "fig2",
            spot: 100.0,
            v0: 0.0951,
            p: HestonParams::new(0.0068, 0.0161, 5.421, 0.370, 0.224, 0.242).unwrap(),
            lambda: 0.289,
            nu: 0.087,
            delta: 0.249,
        },
        FigureCase {
            name: "fig3",
            spot: 100.0,
            v0: 0.0552,
            p: HestonParams::new(0.0111, 0.0021, 8.698, 0.106, 0.391, -0.12).unwrap(),
            lambda: 0.491,
            nu: -0.202,
            delta: 0.287,
        },
    ]
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| StandardNormal.sample(rng))
}

const FD_STEP: f64 = 1e-5;
/// Gradients below this size are compared in absolute terms.
const FD_FLOOR: f64 = 1e-5;

/// Largest relative disagreement between `analytic` and central differences
/// of `f` at `x`.
pub fn fd_max_rel_err(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut y = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let h = FD_STEP * x[i].abs().max(1.0);
        y[i] = x[i] + h;
        let up = f(&y);
        y[i] = x[i] - h;
        let down = f(&y);
        y[i] = x[i];
        let fd = (up - down) / (2.0 * h);
        let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(FD_FLOOR);
        worst = worst.max(err);
    }
    worst
}

fn weighted(y: &Array2<f64>, c: &Array2<f64>) -> f64 {
    (y * c).sum()
}

fn to_arr(v: &[f64], rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), v.to_vec()).unwrap()
}

fn check_dense(rng: &mut ChaCha8Rng) -> f64 {
    let (n, i, o) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
    let x = normal_matrix(rng, n, i);
    let w = normal_matrix(rng, i, o);
    let b = normal_vec(rng, o);
    let c = normal_matrix(rng, n, o);
    let (dx, g) = layers::dense_backward(x.view(), w.view(), c.view(), true);
    let (dw, db) = g.unwrap();
    let ex = fd_max_rel_err(
        &mut |v| weighted(&layers::dense_forward(to_arr(v, n, i).view(), w.view(), Some(b.view())), &c),
        &flat(&x),
        &flat(&dx),
    );
    let ew = fd_max_rel_err(
        &mut |v| weighted(&layers::dense_forward(x.view(), to_arr(v, i, o).view(), Some(b.view())), &c),
        &flat(&w),
        &flat(&dw),
    );
    let eb = fd_max_rel_err(
        &mut |v| weighted(&layers::dense_forward(x.view(), w.view(), Some(Array1::from(v.to_vec()).view())), &c),
        &flat(&b),
        &flat(&db),
    );
    ex.max(ew).max(eb)
}

fn check_elu(rng: &mut ChaCha8Rng) -> f64 {
    let (n, m) = (rng.random_range(1..6), rng.random_range(1..6));
    // keep clear of the kink at zero, where the second derivative jumps
    let z = normal_matrix(rng, n, m).mapv(|v: f64| if v.abs() < 0.01 { v + 0.02 } else { v });
    let c = normal_matrix(rng, n, m);
    let dz = layers::elu_backward(z.view(), c.view());
    fd_max_rel_err(
        &mut |v| weighted(&layers::elu_forward(to_arr(v, n, m).view()), &c),
        &flat(&z),
        &flat(&dz),
    )
}

fn check_batchnorm_train(rng: &mut ChaCha8Rng) -> f64 {
    let (n, m) = (rng.random_range(2..8), rng.random_range(1..5));
    let x = normal_matrix(rng, n, m);
    let gamma = normal_vec(rng, m);
    let beta = normal_vec(rng, m);
    let c = normal_matrix(rng, n, m);
    let (_, cache) = layers::batchnorm_forward_train(x.view(), gamma.view(), beta.view());
    let (dx, g) = layers::batchnorm_backward_train(&cache, gamma.view(), c.view(), true);
    let (dg, db) = g.unwrap();
    let ex = fd_max_rel_err(
        &mut |v| weighted(&layers::batchnorm_forward_train(to_arr(v, n, m).view(), gamma.view(), beta.view()).0, &c),
        &flat(&x),
        &flat(&dx),
    );
    let eg = fd_max_rel_err(
        &mut |v| {
            let g = Array1::from(v.to_vec());
            weighted(&layers::batchnorm_forward_train(x.view(), g.view(), beta.view()).0, &c)
        },
        &flat(&gamma),
        &flat(&dg),
    );
    let eb = fd_max_rel_err(
        &mut |v| {
            let b = Array1::from(v.to_vec());
            weighted(&layers::batchnorm_forward_train(x.view(), gamma.view(), b.view()).0, &c)
        },
        &flat(&beta),
        &flat(&db),
    );
    ex.max(eg).max(eb)
}

fn check_batchnorm_eval(rng: &mut ChaCha8Rng) -> f64 {
    let (n, m) = (rng.random_range(1..6), rng.random_range(1..5));
    let x = normal_matrix(rng, n, m);
    let gamma = normal_vec(rng, m);
    let beta = normal_vec(rng, m);
    let mean = normal_vec(rng, m);
    let var = normal_vec(rng, m).mapv(|v| 0.1 + v * v);
    let c = normal_matrix(rng, n, m);
    let (dx, g) = layers::batchnorm_backward_eval(x.view(), gamma.view(), mean.view(), var.view(), c.view(), true);
    let (dg, db) = g.unwrap();
    let eval = |x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>| {
        weighted(&layers::batchnorm_forward_eval(x.view(), g.view(), b.view(), mean.view(), var.view()), &c)
    };
    let eg = fd_max_rel_err(&mut |v| eval(&x, &Array1::from(v.to_vec()), &beta), &flat(&gamma), &flat(&dg));
    let eb = fd_max_rel_err(&mut |v| eval(&x, &gamma, &Array1::from(v.to_vec())), &flat(&beta), &flat(&db));
    eg.max(eb).max(fd_max_rel_err(
        &mut |v| {
            let y = layers::batchnorm_forward_eval(to_arr(v, n, m).view(), gamma.view(), beta.view(), mean.view(), var.view());
            weighted(&y, &c)
        },
        &flat(&x),
        &flat(&dx),
    ))
}

fn check_stretched_sigmoid(rng: &mut ChaCha8Rng) -> f64 {
    let (n, m) = (rng.random_range(1..6), rng.random_range(1..5));
    let z = normal_matrix(rng, n, m) * 2.0;
    let lo: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..0.5)).collect();
    let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.01..2.0)).collect();
    let c = normal_matrix(rng, n, m);
    let dz = layers::stretched_sigmoid_backward(z.view(), &lo, &hi, c.view());
    fd_max_rel_err(
        &mut |v| weighted(&layers::stretched_sigmoid_forward(to_arr(v, n, m).view(), &lo, &hi), &c),
        &flat(&z),
        &flat(&dz),
    )
}

fn check_mse(rng: &mut ChaCha8Rng) -> f64 {
    let (n, m) = (rng.random_range(1..6), rng.random_range(1..5));
    let p = normal_matrix(rng, n, m);
    let t = normal_matrix(rng, n, m);
    let d = layers::mse_backward(p.view(), t.view());
    fd_max_rel_err(
        &mut |v| layers::mse(to_arr(v, n, m).view(), t.view()),
        &flat(&p),
        &flat(&d),
    )
}

/// Parameter and input gradients of a whole network against differences of
/// `Σ c ⊙ y`.
fn check_network(rng: &mut ChaCha8Rng, spec: NetworkSpec, mode: Mode) -> f64 {
    let n = rng.random_range(3..7);
    let mut net = Network::new(spec.clone(), rng.random()).unwrap();
    // move the parameters off their initial values (unit scales, zero biases)
    for v in net.params_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v += 0.3 * z;
    }
    let x = normal_matrix(rng, n, spec.input_dim);
    let c = normal_matrix(rng, n, spec.output_dim);
    if mode == Mode::Eval && spec.batch_norm {
        let warm = normal_matrix(rng, 8, spec.input_dim) * 1.5;
        let (_, cache) = net.forward_cached(warm.view(), Mode::Train).unwrap();
        for _ in 0..50 {
            net.update_running_stats(&cache);
        }
    }
    let (_, cache) = net.forward_cached(x.view(), mode).unwrap();
    let (dx, g) = net.backward(&cache, c.view(), true);
    let g = g.unwrap();
    let base = net.clone();
    let ep = fd_max_rel_err(
        &mut |v| {
            let mut m = base.clone();
            m.params_mut().copy_from_slice(v);
            weighted(&m.forward(x.view(), mode).unwrap(), &c)
        },
        base.params(),
        &g,
    );
    let ex = fd_max_rel_err(
        &mut |v| weighted(&base.forward(to_arr(v, n, spec.input_dim).view(), mode).unwrap(), &c),
        &flat(&x),
        &flat(&dx),
    );
    ep.max(ex)
}

fn random_output(rng: &mut ChaCha8Rng, m: usize) -> OutputActivation {
    if rng.random_bool(0.5) {
        OutputActivation::Linear
    } else {
        let lo: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..0.0)).collect();
        let hi = lo.iter().map(|l| l + rng.random_range(0.1..2.0)).collect();
        OutputActivation::StretchedSigmoid { lo, hi }
    }
}

fn check_residual_cell(rng: &mut ChaCha8Rng) -> f64 {
    let input_dim = rng.random_range(2..5);
    let width = rng.random_range(2..6);
    let spec = NetworkSpec {
        input_dim,
        output_dim: rng.random_range(1..3),
        n_main_layers: 1,
        width,
        residual: true,
        batch_norm: true,
        output: OutputActivation::Linear,
        input_box: vec![],
    };
    check_network(rng, spec, Mode::Train)
}

fn check_full_network(rng: &mut ChaCha8Rng) -> f64 {
    let output_dim = rng.random_range(1..4);
    let spec = NetworkSpec {
        input_dim: rng.random_range(1..5),
        output_dim,
        n_main_layers: rng.random_range(0..3),
        width: rng.random_range(2..6),
        residual: rng.random_bool(0.5),
        batch_norm: rng.random_bool(0.7),
        output: random_output(rng, output_dim),
        input_box: vec![],
    };
    let mode = if rng.random_bool(0.5) { Mode::Train } else { Mode::Eval };
    check_network(rng, spec, mode)
}

/// Worst relative gradient error per layer type over `instances` random
/// instances each.
pub fn gradient_suite(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    type Check = fn(&mut ChaCha8Rng) -> f64;
    let checks: [(&str, Check); 8] = [
        ("dense", check_dense),
        ("elu", check_elu),
        ("batchnorm_train", check_batchnorm_train),
        ("batchnorm_eval", check_batchnorm_eval),
        ("stretched_sigmoid", check_stretched_sigmoid),
        ("mse", check_mse),
        ("residual_cell", check_residual_cell),
        ("network", check_full_network),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    checks
        .iter()
        .map(|&(name, f)| (name, (0..instances).map(|_| f(&mut rng)).fold(0.0, f64::max)))
        .collect()
}

/// Logical (row-major) order regardless of memory layout.
fn flat<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> Vec<f64> {
    a.iter().copied().collect()
}

use num_complex::Complex64;

/// RK4 integration of the Heston Riccati system in the exponent argument `u`:
/// `ψ' = c/2 - βψ + σ²ψ²/2`, `φ' = (r - q)u + kθψ`, both zero at `τ = 0`.
pub fn rk4_riccati(u: Complex64, tau: f64, p: &HestonParams, steps: usize) -> (Complex64, Complex64) {
    let c = u * u - u;
    let beta = p.kappa - p.sigma * p.rho * u;
    let s2 = p.sigma * p.sigma;
    let f = |psi: Complex64| 0.5 * c - beta * psi + 0.5 * s2 * psi * psi;
    let drift = (p.r - p.q) * u;
    let h = tau / steps as f64;
    let (mut phi, mut psi) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
    for _ in 0..steps {
        let k1 = f(psi);
        let k2 = f(psi + 0.5 * h * k1);
        let k3 = f(psi + 0.5 * h * k2);
        let k4 = f(psi + h * k3);
        // φ' only depends on ψ, so it takes the matching stage values
        let p1 = psi;
        let p2 = psi + 0.5 * h * k1;
        let p3 = psi + 0.5 * h * k2;
        let p4 = psi + h * k3;
        phi += h / 6.0 * (6.0 * drift + p.kappa * p.theta * (p1 + 2.0 * p2 + 2.0 * p3 + p4));
        psi += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    (phi, psi)
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + simpson(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

/// Adaptive Simpson on `[a, b]`, split into `pieces` starting panels.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, pieces: usize, tol: f64) -> f64 {
    let w = (b - a) / pieces as f64;
    (0..pieces)
        .map(|k| {
            let (lo, hi) = (a + k as f64 * w, a + (k + 1) as f64 * w);
            let (fa, fm, fb) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
            simpson(f, lo, hi, fa, fm, fb, whole, tol / pieces as f64, 40)
        })
        .sum()
}

/// Call price by the single-integral formula on the contour `Im = -1/2`:
/// `C = S e^{-qτ} - √(SK) e^{-rτ}/π ∫_0^∞ Re[e^{iu ln(S/K)} Ψ(u - i/2)] / (u² + 1/4) du`
/// with `Ψ` the characteristic function of `ln(S_T/S)`.
pub fn contour_call(spot: f64, v0: f64, p: &HestonParams, j: &JumpSpec, strike: f64, tau: f64) -> f64 {
    let state = MarketState { x: 0.0, v: v0, s0_ref: 1.0 };
    let a = (spot / strike).ln();
    let integrand = |u: f64| {
        let cf = crc_core::affine::char_fn(Complex64::new(u, -0.5), tau, &state, p, j).unwrap();
        (Complex64::new(0.0, u * a).exp() * cf).re / (u * u + 0.25)
    };
    // find where the integrand has died out
    let mut hi = 50.0;
    while integrand(hi).abs() > 1e-18 && hi < 1e5 {
        hi *= 2.0;
    }
    let integral = adaptive_simpson(&integrand, 0.0, hi, 256, 1e-13);
    spot * (-p.q * tau).exp() - (spot * strike).sqrt() * (-p.r * tau).exp() / std::f64::consts::PI * integral
}

/// Discounted call payoff mean and its standard error from antithetic pairs
/// of a full-truncation Euler scheme (variance and log-price), with the
/// compound-Poisson jump total over `[0, τ]` drawn exactly. Every bucket is
/// assumed to carry the same jump law.
pub fn bates_mc_call(case: &FigureCase, strike: f64, tau: f64, pairs: usize, steps: usize, seed: u64) -> (f64, f64) {
    let p = &case.p;
    let j = case.jumps();
    let b = j.buckets[0];
    let dt = tau / steps as f64;
    let sq = (1.0 - p.rho * p.rho).sqrt();
    let comp = j.lambda * b.mean_relative_jump() * tau;
    let poisson = rand_distr::Poisson::new(j.lambda * tau).ok();
    let df = (-p.r * tau).exp();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..pairs {
        let mut x = [0.0f64; 2];
        let mut v = [case.v0; 2];
        for _ in 0..steps {
            let z1: f64 = StandardNormal.sample(&mut rng);
            let z2: f64 = StandardNormal.sample(&mut rng);
            for (k, sign) in [1.0, -1.0].into_iter().enumerate() {
                let vp = v[k].max(0.0);
                let sd = (vp * dt).sqrt();
                let zv = p.rho * z1 + sq * z2;
                x[k] += (p.r - p.q - 0.5 * vp) * dt + sign * sd * z1;
                v[k] += p.kappa * (p.theta - vp) * dt + sign * p.sigma * sd * zv;
            }
        }
        let n: f64 = poisson.map(|d| d.sample(&mut rng)).unwrap_or(0.0);
        let z3: f64 = StandardNormal.sample(&mut rng);
        let jump = n * b.nu + b.delta * n.sqrt() * z3;
        let jump_anti = n * b.nu - b.delta * n.sqrt() * z3;
        let pay = |xk: f64, jk: f64| df * (case.spot * (xk + jk - comp).exp() - strike).max(0.0);
        let y = 0.5 * (pay(x[0], jump) + pay(x[1], jump_anti));
        sum += y;
        sum2 += y * y;
    }
    let n = pairs as f64;
    let mean = sum / n;
    let var = (sum2 / n - mean * mean) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}
