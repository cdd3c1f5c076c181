//! A small multimodal trajectory predictor with hand-derived gradients.
//!
//! Architecture: `x → tanh(W1·x + b1) → E = tanh(W2·h + b2)`, then a linear
//! decoder produces per-step offsets for `M` modes (`W_traj·E + b_traj`) and
//! `M` mode logits (`W_logit·E + b_logit`). Predicted positions are the
//! cumulative sum of offsets, anchored at the focal agent's last observed
//! position.
//!
//! The loss is winner-takes-all: the regression term is the mean per-step L2
//! distance of the best mode (lowest average displacement), and the
//! classification term is the cross-entropy of the mode logits against that
//! best mode.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::scene::{Dataset, Point, Scene};

/// Density is divided by this before entering the network.
pub const DENSITY_CAP: f64 = 100.0;

/// Guards the L2-norm gradient at zero residual.
pub const EPS_GRAD: f64 = 1e-8;

const PARAMS_MAGIC: &[u8; 5] = b"TPRD1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictorConfig {
    pub t_obs: usize,
    pub t_pred: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub modes: usize,
}

impl PredictorConfig {
    pub fn new(t_obs: usize, t_pred: usize) -> Self {
        Self {
            t_obs,
            t_pred,
            hidden_dim: 64,
            latent_dim: 32,
            modes: 6,
        }
    }

    pub fn for_dataset(ds: &Dataset) -> Self {
        Self::new(ds.t_obs, ds.t_pred)
    }

    pub fn input_dim(&self) -> usize {
        input_dim(self.t_obs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_obs < 2 || self.t_pred < 1 {
            return Err(Error::InvalidConfig(format!(
                "need t_obs >= 2 and t_pred >= 1, got {}/{}",
                self.t_obs, self.t_pred
            )));
        }
        if self.hidden_dim == 0 || self.latent_dim == 0 {
            return Err(Error::InvalidConfig("hidden and latent dims must be positive".into()));
        }
        if self.modes < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 modes, got {}", self.modes)));
        }
        Ok(())
    }
}

pub fn input_dim(t_obs: usize) -> usize {
    (t_obs - 1) * 2 + 2
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyPredictorParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w_traj: Array2<f64>,
    pub b_traj: Array1<f64>,
    pub w_logit: Array2<f64>,
    pub b_logit: Array1<f64>,
    t_pred: usize,
}

impl ToyPredictorParams {
    pub fn zeros(cfg: &PredictorConfig) -> Result<Self> {
        cfg.validate()?;
        let (i, h, l, m) = (cfg.input_dim(), cfg.hidden_dim, cfg.latent_dim, cfg.modes);
        let out = m * cfg.t_pred * 2;
        Ok(Self {
            w1: Array2::zeros((h, i)),
            b1: Array1::zeros(h),
            w2: Array2::zeros((l, h)),
            b2: Array1::zeros(l),
            w_traj: Array2::zeros((out, l)),
            b_traj: Array1::zeros(out),
            w_logit: Array2::zeros((m, l)),
            b_logit: Array1::zeros(m),
            t_pred: cfg.t_pred,
        })
    }

    /// Every weight and bias uniform in `±1/sqrt(fan_in)` of its layer.
    pub fn init(cfg: &PredictorConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        let mut rng = rng::substream(seed, rng::streams::INIT);
        let mut fill = |w: &mut Array2<f64>, b: &mut Array1<f64>| {
            let bound = 1.0 / (w.ncols() as f64).sqrt();
            w.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
            b.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
        };
        fill(&mut p.w1, &mut p.b1);
        fill(&mut p.w2, &mut p.b2);
        fill(&mut p.w_traj, &mut p.b_traj);
        fill(&mut p.w_logit, &mut p.b_logit);
        Ok(p)
    }

    pub fn config(&self) -> PredictorConfig {
        PredictorConfig {
            t_obs: self.input_dim() / 2,
            t_pred: self.t_pred,
            hidden_dim: self.hidden_dim(),
            latent_dim: self.latent_dim(),
            modes: self.modes(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn modes(&self) -> usize {
        self.w_logit.nrows()
    }

    pub fn t_obs(&self) -> usize {
        self.input_dim() / 2
    }

    pub fn t_pred(&self) -> usize {
        self.t_pred
    }

    /// Parameter arrays in file order, row-major.
    pub fn arrays(&self) -> [&[f64]; 8] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.w_traj.as_slice().expect("standard layout"),
            self.b_traj.as_slice().expect("standard layout"),
            self.w_logit.as_slice().expect("standard layout"),
            self.b_logit.as_slice().expect("standard layout"),
        ]
    }

    pub fn arrays_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.w_traj.as_slice_mut().expect("standard layout"),
            self.b_traj.as_slice_mut().expect("standard layout"),
            self.w_logit.as_slice_mut().expect("standard layout"),
            self.b_logit.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// Checks that a scene or dataset has the horizons these params decode.
    pub fn check_horizons(&self, t_obs: usize, t_pred: usize) -> Result<()> {
        if t_obs != self.t_obs() || t_pred != self.t_pred {
            return Err(Error::HorizonMismatch {
                expected_obs: self.t_obs(),
                expected_pred: self.t_pred,
                obs: t_obs,
                pred: t_pred,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + 24 + 8 * self.arrays().iter().map(|a| a.len()).sum::<usize>());
        out.extend_from_slice(PARAMS_MAGIC);
        for d in [self.input_dim(), self.hidden_dim(), self.latent_dim(), self.modes(), self.t_pred, 0] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for a in self.arrays() {
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("params file truncated in magic".into()))?;
        if &magic != PARAMS_MAGIC {
            return Err(Error::Format("params file has wrong magic".into()));
        }
        let mut dims = [0usize; 6];
        for d in dims.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| Error::Format("params file truncated in dims".into()))?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let [input, hidden, latent, modes, t_pred, reserved] = dims;
        if reserved != 0 || input < 4 || input % 2 != 0 {
            return Err(Error::Format(format!("params file has invalid dims {dims:?}")));
        }
        let cfg = PredictorConfig {
            t_obs: input / 2,
            t_pred,
            hidden_dim: hidden,
            latent_dim: latent,
            modes,
        };
        let mut p = Self::zeros(&cfg).map_err(|e| Error::Format(e.to_string()))?;
        let expected: usize = p.arrays().iter().map(|a| a.len() * 8).sum();
        if r.len() != expected {
            return Err(Error::Format(format!(
                "params payload is {} bytes, dims imply {expected}",
                r.len()
            )));
        }
        for a in p.arrays_mut() {
            for v in a.iter_mut() {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).expect("length checked");
                *v = f64::from_le_bytes(b);
            }
        }
        if !p.is_finite() {
            return Err(Error::NonFinite("params file".into()));
        }
        Ok(p)
    }
}

pub fn write_params(params: &ToyPredictorParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&params.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_params(path: impl AsRef<Path>) -> Result<ToyPredictorParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ToyPredictorParams::from_bytes(&bytes)
}

/// Network input for a scene: the focal agent's observed per-step
/// displacements, then the mean distance from the focal agent to every other
/// agent at the last observed step, then density over [`DENSITY_CAP`].
pub fn encode_input(scene: &Scene, t_obs: usize) -> Result<Array1<f64>> {
    if scene.t_obs() != t_obs {
        return Err(Error::HorizonMismatch {
            expected_obs: t_obs,
            expected_pred: scene.t_pred(),
            obs: scene.t_obs(),
            pred: scene.t_pred(),
        });
    }
    let focal = scene.focal();
    let mut x = Array1::zeros(input_dim(t_obs));
    for (k, w) in focal.observed.windows(2).enumerate() {
        x[2 * k] = w[1][0] - w[0][0];
        x[2 * k + 1] = w[1][1] - w[0][1];
    }
    let anchor = focal.last_observed();
    let neighbors = scene.density() - 1;
    if neighbors > 0 {
        let total: f64 = scene
            .agents
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != scene.focal_index)
            .map(|(_, a)| distance(a.last_observed(), anchor))
            .sum();
        x[2 * (t_obs - 1)] = total / neighbors as f64;
    }
    x[2 * (t_obs - 1) + 1] = scene.density() as f64 / DENSITY_CAP;
    Ok(x)
}

fn distance(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutput {
    /// `(M, T_pred, 2)` predicted positions.
    pub trajectories: Array3<f64>,
    pub logits: Array1<f64>,
    /// Decoder input `E`.
    pub latent: Array1<f64>,
}

impl PredictionOutput {
    pub fn modes(&self) -> usize {
        self.trajectories.len_of(Axis(0))
    }

    pub fn t_pred(&self) -> usize {
        self.trajectories.len_of(Axis(1))
    }
}

/// Intermediate activations kept for backprop.
struct Activations {
    hidden: Array1<f64>,
    output: PredictionOutput,
}

pub fn forward(params: &ToyPredictorParams, input: &Array1<f64>, anchor: Point) -> Result<PredictionOutput> {
    Ok(forward_cached(params, input, anchor)?.output)
}

fn forward_cached(params: &ToyPredictorParams, input: &Array1<f64>, anchor: Point) -> Result<Activations> {
    if input.len() != params.input_dim() {
        return Err(Error::Dimension {
            what: "predictor input",
            expected: params.input_dim(),
            actual: input.len(),
        });
    }
    let hidden = (params.w1.dot(input) + &params.b1).mapv(f64::tanh);
    let latent = (params.w2.dot(&hidden) + &params.b2).mapv(f64::tanh);
    Ok(Activations {
        hidden,
        output: decode(params, latent, anchor),
    })
}

/// Runs the linear decoder on a given latent.
pub fn decode(params: &ToyPredictorParams, latent: Array1<f64>, anchor: Point) -> PredictionOutput {
    let (m, t) = (params.modes(), params.t_pred);
    let offsets = params.w_traj.dot(&latent) + &params.b_traj;
    let mut trajectories = offsets
        .into_shape_with_order((m, t, 2))
        .expect("decoder output length is M*T_pred*2");
    for mut mode in trajectories.outer_iter_mut() {
        let mut pos = anchor;
        for mut step in mode.outer_iter_mut() {
            pos[0] += step[0];
            pos[1] += step[1];
            step[0] = pos[0];
            step[1] = pos[1];
        }
    }
    let logits = params.w_logit.dot(&latent) + &params.b_logit;
    PredictionOutput {
        trajectories,
        logits,
        latent,
    }
}

/// Encodes the scene and predicts its focal agent's future.
pub fn predict(params: &ToyPredictorParams, scene: &Scene) -> Result<PredictionOutput> {
    params.check_horizons(scene.t_obs(), scene.t_pred())?;
    let x = encode_input(scene, params.t_obs())?;
    forward(params, &x, scene.focal().last_observed())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub reg: f64,
    pub cls: f64,
    pub best_mode: usize,
}

fn check_gt(output: &PredictionOutput, gt: &[Point]) -> Result<()> {
    if gt.len() != output.t_pred() {
        return Err(Error::Dimension {
            what: "ground-truth horizon",
            expected: output.t_pred(),
            actual: gt.len(),
        });
    }
    if output.logits.len() != output.modes() {
        return Err(Error::Dimension {
            what: "mode logits",
            expected: output.modes(),
            actual: output.logits.len(),
        });
    }
    Ok(())
}

/// Mean per-step L2 distance of every mode to `gt`.
pub fn mode_ade(trajectories: &Array3<f64>, gt: &[Point]) -> Vec<f64> {
    trajectories
        .outer_iter()
        .map(|mode| {
            let sum: f64 = mode
                .outer_iter()
                .zip(gt)
                .map(|(p, y)| (p[0] - y[0]).hypot(p[1] - y[1]))
                .sum();
            sum / gt.len() as f64
        })
        .collect()
}

/// Index of the smallest value; the first one wins ties.
pub(crate) fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

pub fn loss(output: &PredictionOutput, gt: &[Point]) -> Result<LossBreakdown> {
    check_gt(output, gt)?;
    let ade = mode_ade(&output.trajectories, gt);
    let best_mode = argmin(&ade);
    let reg = ade[best_mode];
    let max = output.logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let log_norm = output.logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let cls = (max - output.logits[best_mode]) + log_norm;
    Ok(LossBreakdown {
        total: reg + cls,
        reg,
        cls,
        best_mode,
    })
}

pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = logits.mapv(|l| (l - max).exp());
    let z = e.sum();
    e / z
}

/// Gradient of the total loss with respect to the predicted positions and
/// logits. The best mode is treated as a constant.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGradient {
    pub d_traj: Array3<f64>,
    pub d_logits: Array1<f64>,
    pub best_mode: usize,
}

pub fn grad_wrt_output(output: &PredictionOutput, gt: &[Point]) -> Result<OutputGradient> {
    let best_mode = loss(output, gt)?.best_mode;
    let t_pred = output.t_pred();
    let mut d_traj = Array3::zeros(output.trajectories.raw_dim());
    let best = output.trajectories.index_axis(Axis(0), best_mode);
    for (t, p) in best.outer_iter().enumerate() {
        let r = [p[0] - gt[t][0], p[1] - gt[t][1]];
        let denom = t_pred as f64 * r[0].hypot(r[1]).max(EPS_GRAD);
        d_traj[[best_mode, t, 0]] = r[0] / denom;
        d_traj[[best_mode, t, 1]] = r[1] / denom;
    }
    let mut d_logits = softmax(&output.logits);
    d_logits[best_mode] -= 1.0;
    Ok(OutputGradient {
        d_traj,
        d_logits,
        best_mode,
    })
}

/// Gradient with respect to the raw decoder offsets, i.e. before the
/// cumulative sum: each offset moves every later position.
fn offsets_gradient(d_traj: &Array3<f64>) -> Array1<f64> {
    let mut d = d_traj.clone();
    for mut mode in d.outer_iter_mut() {
        let mut acc = [0.0, 0.0];
        for mut step in mode.outer_iter_mut().rev() {
            acc[0] += step[0];
            acc[1] += step[1];
            step[0] = acc[0];
            step[1] = acc[1];
        }
    }
    let n = d.len();
    d.into_shape_with_order(n).expect("contiguous")
}

/// Pulls an output gradient back through the linear decoder to its input `E`.
pub fn decoder_pullback(params: &ToyPredictorParams, grad: &OutputGradient) -> Array1<f64> {
    let d_offsets = offsets_gradient(&grad.d_traj);
    params.w_traj.t().dot(&d_offsets) + params.w_logit.t().dot(&grad.d_logits)
}

/// Loss and parameter gradient for one scene.
pub fn scene_gradient(params: &ToyPredictorParams, scene: &Scene) -> Result<(LossBreakdown, ToyPredictorParams)> {
    params.check_horizons(scene.t_obs(), scene.t_pred())?;
    let x = encode_input(scene, params.t_obs())?;
    let acts = forward_cached(params, &x, scene.focal().last_observed())?;
    let gt = &scene.focal().future;
    let breakdown = loss(&acts.output, gt)?;
    let og = grad_wrt_output(&acts.output, gt)?;

    let d_offsets = offsets_gradient(&og.d_traj);
    let latent = &acts.output.latent;
    let d_latent = params.w_traj.t().dot(&d_offsets) + params.w_logit.t().dot(&og.d_logits);
    let d_z2 = &d_latent * &latent.mapv(|e| 1.0 - e * e);
    let d_hidden = params.w2.t().dot(&d_z2);
    let d_z1 = &d_hidden * &acts.hidden.mapv(|h| 1.0 - h * h);

    let grads = ToyPredictorParams {
        w1: outer(&d_z1, &x),
        b1: d_z1,
        w2: outer(&d_z2, &acts.hidden),
        b2: d_z2,
        w_traj: outer(&d_offsets, latent),
        b_traj: d_offsets,
        w_logit: outer(&og.d_logits, latent),
        b_logit: og.d_logits,
        t_pred: params.t_pred,
    };
    Ok((breakdown, grads))
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut m = Array2::zeros((a.len(), b.len()));
    Zip::from(m.rows_mut()).and(a).for_each(|mut row, &ai| row.scaled_add(ai, b));
    m
}

/// Mean total loss over a dataset.
pub fn mean_loss(params: &ToyPredictorParams, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut sum = 0.0;
    for s in &ds.scenes {
        sum += loss(&predict(params, s)?, &s.focal().future)?.total;
    }
    Ok(sum / ds.len() as f64)
}

/// Plain SGD over the dataset, one scene per step, in a seeded shuffled order
/// each epoch. Returns a new parameter set; `params` is left untouched.
pub fn pretrain(
    params: &ToyPredictorParams,
    dataset: &Dataset,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ToyPredictorParams> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::InvalidConfig(format!("learning rate must be positive, got {lr}")));
    }
    params.check_horizons(dataset.t_obs, dataset.t_pred)?;
    let mut p = params.clone();
    if epochs == 0 || dataset.is_empty() {
        return Ok(p);
    }
    let mut rng = rng::substream(seed, rng::streams::SHUFFLE);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let scene = &dataset.scenes[i];
            let (l, g) = scene_gradient(&p, scene)?;
            if !l.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at scene `{}` in epoch {epoch} (learning rate {lr} is likely too high)",
                    scene.scene_id
                )));
            }
            for (w, gw) in p.arrays_mut().into_iter().zip(g.arrays()) {
                for (v, d) in w.iter_mut().zip(gw) {
                    *v -= lr * d;
                }
            }
        }
    }
    if !p.is_finite() {
        return Err(Error::NonFinite(format!(
            "parameters after training (learning rate {lr} is likely too high)"
        )));
    }
    Ok(p)
}
