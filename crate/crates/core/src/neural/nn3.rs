//! The inverse map. NN2 reads `(θ, σ, ρ)` and a surface and proposes the ten
//! jump parameters; these are appended to the other inputs and fed through
//! the frozen forward network NN1, and the composite is trained to
//! reproduce its input surface.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use super::{layers, train::fit, Mode, Network, NetworkSpec, OutputActivation, TrainConfig, TrainReport};
use crate::affine::N_BUCKETS;
use crate::datagen::col;
use crate::error::{Error, Result};
use crate::surface::{VolSurface, N_POINTS};

const N_JUMP: usize = 2 * N_BUCKETS;
const NN2_PARAMS: [usize; 3] = [col::THETA, col::SIGMA, col::RHO];

/// NN2 architecture matching a trained NN1: inputs `(θ, σ, ρ)` plus the
/// surface, outputs the jump parameters through a sigmoid stretched over
/// NN1's jump-parameter boxes.
pub fn nn2_spec(nn1: &Network, n_main_layers: usize, width: usize) -> Result<NetworkSpec> {
    check_nn1(nn1)?;
    let jump_box = &nn1.spec.input_box[col::NU..col::NU + N_JUMP];
    Ok(NetworkSpec {
        input_dim: NN2_PARAMS.len() + N_POINTS,
        output_dim: N_JUMP,
        n_main_layers,
        width,
        residual: true,
        batch_norm: true,
        output: OutputActivation::StretchedSigmoid {
            lo: jump_box.iter().map(|b| b[0]).collect(),
            hi: jump_box.iter().map(|b| b[1]).collect(),
        },
        input_box: NN2_PARAMS.iter().map(|&k| nn1.spec.input_box[k]).collect(),
    })
}

fn check_nn1(nn1: &Network) -> Result<()> {
    let s = &nn1.spec;
    if s.input_dim != col::N_INPUTS || s.output_dim != N_POINTS || s.input_box.len() != col::N_INPUTS {
        return Err(Error::Shape {
            expected: col::N_INPUTS,
            got: s.input_dim,
        });
    }
    let jump_box = &s.input_box[col::NU..col::NU + N_JUMP];
    if jump_box.iter().any(|[lo, hi]| !(hi > lo)) {
        return Err(Error::InvalidParameter("NN1 jump-parameter boxes must be non-degenerate".into()));
    }
    Ok(())
}

/// NN3 = NN2 ∘ NN1 with NN1 frozen.
#[derive(Debug, Clone)]
pub struct Nn3 {
    pub nn1: Network,
    pub nn2: Network,
}

pub fn compose_nn3(nn1: Network, nn2_spec: NetworkSpec, seed: u64) -> Result<Nn3> {
    check_nn1(&nn1)?;
    if nn2_spec.output_dim + col::N_PASS_THROUGH != nn1.spec.input_dim {
        return Err(Error::Shape {
            expected: nn1.spec.input_dim - col::N_PASS_THROUGH,
            got: nn2_spec.output_dim,
        });
    }
    if nn2_spec.input_dim != NN2_PARAMS.len() + nn1.spec.output_dim {
        return Err(Error::Shape {
            expected: NN2_PARAMS.len() + nn1.spec.output_dim,
            got: nn2_spec.input_dim,
        });
    }
    let nn2 = Network::new(nn2_spec, seed)?;
    Ok(Nn3 { nn1, nn2 })
}

/// Scaled network inputs for composite training.
pub struct Nn3Data {
    /// NN1's scaled pass-through inputs.
    pub pass: Array2<f64>,
    /// NN2's scaled inputs.
    pub nn2_in: Array2<f64>,
    pub ivs: Array2<f64>,
}

impl Nn3Data {
    /// `inputs` holds at least the 31 pass-through columns of the raw input
    /// layout (jump columns, if present, are ignored).
    pub fn new(nn3: &Nn3, inputs: ArrayView2<f64>, ivs: ArrayView2<f64>) -> Result<Nn3Data> {
        if inputs.ncols() < col::N_PASS_THROUGH || ivs.ncols() != N_POINTS || inputs.nrows() != ivs.nrows() {
            return Err(Error::Shape {
                expected: col::N_PASS_THROUGH,
                got: inputs.ncols(),
            });
        }
        let mut raw = Array2::zeros((inputs.nrows(), col::N_INPUTS));
        raw.slice_mut(s![.., ..col::N_PASS_THROUGH])
            .assign(&inputs.slice(s![.., ..col::N_PASS_THROUGH]));
        let pass = nn3.nn1.scale_inputs(raw.view())?.slice(s![.., ..col::N_PASS_THROUGH]).to_owned();
        let picked = inputs.select(Axis(1), &NN2_PARAMS);
        let nn2_raw = concatenate![Axis(1), picked, ivs];
        Ok(Nn3Data {
            pass,
            nn2_in: nn3.nn2.scale_inputs(nn2_raw.view())?,
            ivs: ivs.to_owned(),
        })
    }

    pub fn len(&self) -> usize {
        self.ivs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct Pass {
    jumps: Array2<f64>,
    pred: Array2<f64>,
    c1: super::Cache,
    c2: super::Cache,
}

fn jump_box(nn1: &Network) -> &[[f64; 2]] {
    &nn1.spec.input_box[col::NU..col::NU + N_JUMP]
}

fn composite_forward(nn1: &Network, nn2: &Network, data: &Nn3Data, idx: &[usize], mode: Mode) -> Result<Pass> {
    let (jumps, c2) = nn2.forward_cached(Network::rows(&data.nn2_in, idx).view(), mode)?;
    let mut scaled = jumps.clone();
    for (k, &[lo, hi]) in jump_box(nn1).iter().enumerate() {
        scaled.column_mut(k).mapv_inplace(|v| (v - lo) / (hi - lo));
    }
    let x1 = concatenate![Axis(1), Network::rows(&data.pass, idx), scaled];
    let (pred, c1) = nn1.forward_cached(x1.view(), Mode::Eval)?;
    Ok(Pass { jumps, pred, c1, c2 })
}

impl Nn3 {
    /// Surface reconstruction and the jump parameters NN2 proposed, per row.
    pub fn reconstruct(&self, data: &Nn3Data) -> Result<(Array2<f64>, Array2<f64>)> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let p = composite_forward(&self.nn1, &self.nn2, data, &idx, Mode::Eval)?;
        Ok((p.pred, p.jumps))
    }
}

/// Trains NN2 through the frozen NN1 so that the composite reproduces its
/// input surfaces. Only NN2's parameters and running statistics change.
pub fn train_nn3(nn3: &mut Nn3, data: &Nn3Data, cfg: &TrainConfig) -> Result<TrainReport> {
    let Nn3 { nn1, nn2 } = nn3;
    let nn1: &Network = nn1;
    fit(
        nn2,
        data.len(),
        cfg,
        |nn2, idx| {
            let p = composite_forward(nn1, nn2, data, idx, Mode::Train)?;
            let target = Network::rows(&data.ivs, idx);
            let loss = layers::mse(p.pred.view(), target.view());
            let dy = layers::mse_backward(p.pred.view(), target.view());
            let (dx1, _) = nn1.backward(&p.c1, dy.view(), false);
            let mut dj = dx1.slice(s![.., col::NU..col::NU + N_JUMP]).to_owned();
            for (k, &[lo, hi]) in jump_box(nn1).iter().enumerate() {
                dj.column_mut(k).mapv_inplace(|v| v / (hi - lo));
            }
            let (_, grads) = nn2.backward(&p.c2, dj.view(), true);
            nn2.update_running_stats(&p.c2);
            Ok((loss, grads.expect("requested")))
        },
        |nn2, idx| {
            let p = composite_forward(nn1, nn2, data, idx, Mode::Eval)?;
            Ok(layers::mse(p.pred.view(), Network::rows(&data.ivs, idx).view()))
        },
    )
}

/// Jump means `ν_1..5` and standard deviations `δ_1..5` that NN2 assigns to
/// a surface at the given `(θ, σ, ρ)`. The Poisson rate is not part of the
/// output.
pub fn invert(nn2: &Network, surface: &VolSurface, theta: f64, sigma: f64, rho: f64) -> Result<([f64; N_BUCKETS], [f64; N_BUCKETS])> {
    if nn2.spec.input_dim != NN2_PARAMS.len() + surface.vols.len() || nn2.spec.output_dim != N_JUMP {
        return Err(Error::Shape {
            expected: nn2.spec.input_dim,
            got: NN2_PARAMS.len() + surface.vols.len(),
        });
    }
    let mut row = vec![theta, sigma, rho];
    row.extend(&surface.vols);
    let out = nn2.predict(super::as_row(&row).view())?;
    let mut nu = [0.0; N_BUCKETS];
    let mut delta = [0.0; N_BUCKETS];
    for b in 0..N_BUCKETS {
        nu[b] = out[[0, b]];
        delta[b] = out[[0, N_BUCKETS + b]];
    }
    Ok((nu, delta))
}
