//! Energy-based 1-D regression. A network `E(y | x)` scores candidate
//! outputs; predictions minimize it with either unrolled gradient descent
//! or differentiable CEM, and training shapes the energy through that inner
//! solve so the minimizer lands on the target.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, column, Tape, Tensor, Var};
use crate::derive_seed;
use crate::nn::{Activation, Adam, AdamConfig, BoundMlp, Mlp};
use crate::optimizers::{self, dcem, unrolled_gd, DcemConfig, GaussianDistribution, OptimError};

#[derive(Debug, Error)]
pub enum EbmError {
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
}

pub type Result<T> = std::result::Result<T, EbmError>;

/// Batched energy: `x` and `y` are `m x 1`, the result is `m x 1`.
pub trait Energy<'t> {
    fn energy(&self, x: Var<'t>, y: Var<'t>) -> autodiff::Result<Var<'t>>;
}

impl<'t, F> Energy<'t> for F
where
    F: Fn(Var<'t>, Var<'t>) -> autodiff::Result<Var<'t>>,
{
    fn energy(&self, x: Var<'t>, y: Var<'t>) -> autodiff::Result<Var<'t>> {
        self(x, y)
    }
}

impl<'t> Energy<'t> for BoundMlp<'t> {
    fn energy(&self, x: Var<'t>, y: Var<'t>) -> autodiff::Result<Var<'t>> {
        let tape = x.tape();
        self.forward(tape.concat_cols(&[x, y])?)
    }
}

/// MLP on `(x, y)` with softplus hidden units and a linear scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyNetwork {
    pub mlp: Mlp,
}

impl EnergyNetwork {
    pub fn new(hidden: &[usize], seed: u64) -> Self {
        let mut sizes = vec![2];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            mlp: Mlp::new(&sizes, Activation::Softplus, Activation::Identity, &mut rng),
        }
    }

    /// Energies of the pairs `(xs[i], ys[i])` without a tape.
    pub fn energy_plain(&self, xs: &[f64], ys: &[f64]) -> Vec<f64> {
        assert_eq!(xs.len(), ys.len());
        let input = Array2::from_shape_fn((xs.len(), 2), |(i, j)| if j == 0 { xs[i] } else { ys[i] });
        self.mlp.forward(&input).into_iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerMethod {
    UnrolledGd,
    Dcem,
}

impl InnerMethod {
    pub fn name(self) -> &'static str {
        match self {
            InnerMethod::UnrolledGd => "unrolled_gd",
            InnerMethod::Dcem => "dcem",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub method: InnerMethod,
    /// Gradient steps or CEM iterations.
    pub iterations: usize,
    /// Inner learning rate (unrolled GD).
    pub lr: f64,
    /// Starting iterate; also the initial DCEM mean.
    pub y0: f64,
    pub n_samples: usize,
    pub n_elite: usize,
    pub tau: f64,
    pub sigma0: f64,
    pub normalize: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            method: InnerMethod::Dcem,
            iterations: 10,
            lr: 0.1,
            y0: 0.0,
            n_samples: 100,
            n_elite: 10,
            tau: 1.0,
            sigma0: 3.0,
            normalize: true,
        }
    }
}

impl InferenceConfig {
    pub fn with_method(method: InnerMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn dcem_config(&self, seed: u64) -> DcemConfig {
        DcemConfig {
            n_samples: self.n_samples,
            n_elite: self.n_elite,
            n_iter: self.iterations,
            tau: self.tau,
            normalize: self.normalize,
            seed,
            ..DcemConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.method {
            InnerMethod::Dcem => {
                self.dcem_config(0).validate()?;
                if self.tau <= 0.0 {
                    return Err(EbmError::Config("dcem inference needs tau > 0".into()));
                }
                if !(self.sigma0 > 0.0) {
                    return Err(EbmError::Config("sigma0 must be positive".into()));
                }
            }
            InnerMethod::UnrolledGd => {
                if !self.lr.is_finite() || self.lr < 0.0 {
                    return Err(EbmError::Config(format!("invalid inner lr {}", self.lr)));
                }
            }
        }
        Ok(())
    }
}

/// `argmin_y E(y | x)` for a column of inputs, differentiable through the
/// inner solver. `seed` fixes the DCEM noise.
pub fn predict<'t>(
    energy: &dyn Energy<'t>,
    x: Var<'t>,
    cfg: &InferenceConfig,
    seed: u64,
) -> Result<Var<'t>> {
    let tape = x.tape();
    let batch = x.shape().0;
    match cfg.method {
        InnerMethod::UnrolledGd => {
            let y0 = tape.constant(Array2::from_elem((batch, 1), cfg.y0));
            let obj = optimizers::objective(|y| energy.energy(x, y));
            Ok(unrolled_gd(&obj, y0, cfg.iterations, cfg.lr)?)
        }
        InnerMethod::Dcem => {
            let x_rep = x.repeat_rows(cfg.n_samples);
            let obj = optimizers::objective(|y| energy.energy(x_rep, y));
            let init = GaussianDistribution::isotropic(batch, 1, cfg.y0, cfg.sigma0);
            Ok(dcem(&obj, tape, &init, &cfg.dcem_config(seed))?.x)
        }
    }
}

/// Samples of `y = x sin x` with `x` uniform on `[0, 2 pi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTask {
    pub train_x: Vec<f64>,
    pub train_y: Vec<f64>,
    pub val_x: Vec<f64>,
    pub val_y: Vec<f64>,
}

pub fn target(x: f64) -> f64 {
    x * x.sin()
}

impl RegressionTask {
    pub fn generate(n_train: usize, n_val: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(0.0..=2.0 * PI)).collect() };
        let train_x = draw(n_train);
        let val_x = draw(n_val);
        Self {
            train_y: train_x.iter().map(|&x| target(x)).collect(),
            val_y: val_x.iter().map(|&x| target(x)).collect(),
            train_x,
            val_x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub outer_steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub n_train: usize,
    pub n_val: usize,
    /// Curve points are recorded every `eval_every` steps and at the end.
    pub eval_every: usize,
    /// Points of the training set used for the recorded train MSE.
    pub train_probe: usize,
    /// Chunk size for evaluation passes.
    pub eval_batch: usize,
    pub divergence_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            outer_steps: 2000,
            batch_size: 16,
            adam: AdamConfig::default(),
            n_train: 1000,
            n_val: 200,
            eval_every: 250,
            train_probe: 200,
            eval_batch: 64,
            divergence_threshold: 1e6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 || self.eval_batch == 0 {
            return Err(EbmError::Config(
                "batch_size, eval_every and eval_batch must be positive".into(),
            ));
        }
        if self.n_train == 0 || self.n_val == 0 {
            return Err(EbmError::Config("dataset sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn task(&self) -> RegressionTask {
        RegressionTask::generate(self.n_train, self.n_val, derive_seed(self.seed, streams::DATA))
    }
}

/// Seed streams derived from the run seed.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const BATCHES: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const STEP_BASE: u64 = 1 << 32;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossPoint {
    pub step: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub net: EnergyNetwork,
    pub curve: Vec<LossPoint>,
}

impl TrainOutput {
    pub fn final_point(&self) -> LossPoint {
        *self.curve.last().expect("curve always has the step-0 point")
    }
}

/// Predictions for every input, in chunks of `chunk`, each on a fresh tape.
/// Chunk `c` uses a DCEM seed derived from `seed` and `c`.
pub fn predict_all(
    net: &EnergyNetwork,
    xs: &[f64],
    cfg: &InferenceConfig,
    seed: u64,
    chunk: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(xs.len());
    for (c, part) in xs.chunks(chunk).enumerate() {
        let tape = Tape::new();
        let bound = net.mlp.bind_frozen(&tape);
        let x = tape.constant(column(part));
        let y = predict(&bound, x, cfg, derive_seed(seed, c as u64))?;
        out.extend(y.value().iter().copied());
    }
    Ok(out)
}

pub fn mse(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64
}

/// Validation MSE with the fixed evaluation seed used during training.
pub fn validation_mse(
    net: &EnergyNetwork,
    task: &RegressionTask,
    inference: &InferenceConfig,
    train: &TrainConfig,
) -> Result<f64> {
    let seed = derive_seed(train.seed, streams::EVAL);
    let pred = predict_all(net, &task.val_x, inference, seed, train.eval_batch)?;
    Ok(mse(&pred, &task.val_y))
}

fn curve_point(
    step: usize,
    net: &EnergyNetwork,
    task: &RegressionTask,
    inference: &InferenceConfig,
    train: &TrainConfig,
) -> Result<LossPoint> {
    let n = train.train_probe.min(task.train_x.len());
    let seed = derive_seed(train.seed, streams::EVAL);
    let pred = predict_all(net, &task.train_x[..n], inference, seed, train.eval_batch)?;
    Ok(LossPoint {
        step,
        train_mse: mse(&pred, &task.train_y[..n]),
        val_mse: validation_mse(net, task, inference, train)?,
    })
}

/// One outer step's loss and parameter gradients on a minibatch.
pub fn loss_and_grads(
    net: &EnergyNetwork,
    xs: &[f64],
    ys: &[f64],
    inference: &InferenceConfig,
    seed: u64,
) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let bound = net.mlp.bind(&tape);
    let x = tape.constant(column(xs));
    let y = tape.constant(column(ys));
    let pred = predict(&bound, x, inference, seed)?;
    let loss = pred.sub(y)?.square().mean();
    let grads = tape.backward(loss)?;
    Ok((loss.item(), bound.params().into_iter().map(|p| grads.wrt(p)).collect()))
}

/// Trains the energy network with Adam on the squared prediction loss.
pub fn train(task: &RegressionTask, inference: &InferenceConfig, cfg: &TrainConfig) -> Result<TrainOutput> {
    inference.validate()?;
    cfg.validate()?;
    let mut net = EnergyNetwork::new(&cfg.hidden, derive_seed(cfg.seed, streams::INIT));
    let mut adam = Adam::new(cfg.adam, &net.mlp.params());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::BATCHES));
    let mut curve = vec![];
    let n = task.train_x.len();
    let mut xs = vec![0.0; cfg.batch_size];
    let mut ys = vec![0.0; cfg.batch_size];

    for step in 0..cfg.outer_steps {
        if step % cfg.eval_every == 0 {
            curve.push(curve_point(step, &net, task, inference, cfg)?);
        }
        for j in 0..cfg.batch_size {
            let i = rng.random_range(0..n);
            xs[j] = task.train_x[i];
            ys[j] = task.train_y[i];
        }
        let seed = derive_seed(cfg.seed, streams::STEP_BASE + step as u64);
        let (loss, grads) = loss_and_grads(&net, &xs, &ys, inference, seed)?;
        if !loss.is_finite() || loss > cfg.divergence_threshold {
            return Err(EbmError::Diverged { step, loss });
        }
        adam.step(net.mlp.params_mut(), &grads);
    }
    curve.push(curve_point(cfg.outer_steps, &net, task, inference, cfg)?);
    Ok(TrainOutput { net, curve })
}

/// Whether `E(y_hat +- delta | x) >= E(y_hat | x)` holds at each point.
pub fn local_minimum_probe(net: &EnergyNetwork, xs: &[f64], preds: &[f64], delta: f64) -> Vec<bool> {
    let e0 = net.energy_plain(xs, preds);
    let lo: Vec<f64> = preds.iter().map(|p| p - delta).collect();
    let hi: Vec<f64> = preds.iter().map(|p| p + delta).collect();
    let e_lo = net.energy_plain(xs, &lo);
    let e_hi = net.energy_plain(xs, &hi);
    (0..xs.len()).map(|i| e_lo[i] >= e0[i] && e_hi[i] >= e0[i]).collect()
}

pub fn pass_rate(flags: &[bool]) -> f64 {
    flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub x: f64,
    pub y: f64,
    pub energy: f64,
    /// `ln(1 + E - min_y E)` within the slice at this `x`.
    pub normalized: f64,
}

/// Energy on the grid `x_grid x y_grid`, row order x-major.
pub fn export_energy_surface(
    energy: impl Fn(&[f64], &[f64]) -> Vec<f64>,
    x_grid: &[f64],
    y_grid: &[f64],
) -> Vec<SurfacePoint> {
    assert!(is_increasing(x_grid) && is_increasing(y_grid), "grids must be increasing");
    let mut out = Vec::with_capacity(x_grid.len() * y_grid.len());
    for &x in x_grid {
        let xs = vec![x; y_grid.len()];
        let e = energy(&xs, y_grid);
        let min = e.iter().copied().fold(f64::INFINITY, f64::min);
        out.extend(y_grid.iter().zip(&e).map(|(&y, &e)| SurfacePoint {
            x,
            y,
            energy: e,
            normalized: (e - min).ln_1p(),
        }));
    }
    out
}

fn is_increasing(g: &[f64]) -> bool {
    g.windows(2).all(|w| w[0] < w[1])
}

/// `(x, argmin_y E)` for each x-slice of a surface.
pub fn slice_argmins(surface: &[SurfacePoint]) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64, f64)> = vec![];
    for p in surface {
        match out.last_mut() {
            Some(last) if last.0 == p.x => {
                if p.energy < last.2 {
                    last.1 = p.y;
                    last.2 = p.energy;
                }
            }
            _ => out.push((p.x, p.y, p.energy)),
        }
    }
    out.into_iter().map(|(x, y, _)| (x, y)).collect()
}

/// Evenly spaced grid with `n >= 2` points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationPoint {
    pub iterations: usize,
    pub val_mse: f64,
}

/// Validation MSE when the trained model is solved with a different number
/// of inner iterations at test time.
pub fn ablate_inner_iterations(
    net: &EnergyNetwork,
    task: &RegressionTask,
    inference: &InferenceConfig,
    train: &TrainConfig,
    iterations: &[usize],
) -> Result<Vec<AblationPoint>> {
    iterations
        .iter()
        .map(|&t| {
            let cfg = InferenceConfig {
                iterations: t,
                ..inference.clone()
            };
            Ok(AblationPoint {
                iterations: t,
                val_mse: validation_mse(net, task, &cfg, train)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
