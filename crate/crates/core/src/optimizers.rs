//! Cross-entropy method (hard top-k), its differentiable relaxation, and
//! unrolled gradient descent.
//!
//! All three optimize a batch of `B` independent problems at once. A batch
//! of candidates is an `(B*N) x n` matrix whose rows `b*N .. (b+1)*N` belong
//! to problem `b`; objectives map it to a `(B*N) x 1` column of values.
//! Lower values are better.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, AutodiffError, Tape, Tensor, Var};
use crate::lml::{lml_primitive_with, LmlOptions};

/// Lower bound applied to every refit variance.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Added to the per-iteration value spread before dividing.
pub const NORMALIZE_EPS: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("objective returned non-finite values at iteration {iteration} for samples {indices:?}")]
    NonFiniteValues { iteration: usize, indices: Vec<usize> },
    #[error("objective returned shape {got:?}, expected {expected:?}")]
    ValueShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("soft weights sum to {got} in row {row}, expected {expected}")]
    WeightSum { row: usize, got: f64, expected: f64 },
    #[error("soft weight {value} at index {index} outside [0, 1]")]
    WeightRange { index: usize, value: f64 },
    #[error("non-finite iterate after gradient step {step}")]
    NonFiniteIterate { step: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, OptimError>;

/// A batched objective recorded onto the tape of its input.
pub trait Objective<'t> {
    fn eval(&self, x: Var<'t>) -> autodiff::Result<Var<'t>>;
}

impl<'t, F> Objective<'t> for F
where
    F: Fn(Var<'t>) -> autodiff::Result<Var<'t>>,
{
    fn eval(&self, x: Var<'t>) -> autodiff::Result<Var<'t>> {
        self(x)
    }
}

/// Pins a closure to the objective signature so its lifetimes infer.
pub fn objective<'t, F>(f: F) -> F
where
    F: Fn(Var<'t>) -> autodiff::Result<Var<'t>>,
{
    f
}

/// Coordinate-wise box applied to every sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

/// Diagonal Gaussian for each of `B` problems: `mu` and `sigma2` are `B x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDistribution {
    pub mu: Tensor,
    pub sigma2: Tensor,
    pub bounds: Option<Bounds>,
}

impl GaussianDistribution {
    /// Same isotropic start for every problem in the batch.
    pub fn isotropic(batch: usize, dim: usize, mu: f64, sigma: f64) -> Self {
        Self {
            mu: Array2::from_elem((batch, dim), mu),
            sigma2: Array2::from_elem((batch, dim), sigma * sigma),
            bounds: None,
        }
    }

    pub fn with_bounds(mut self, lower: f64, upper: f64) -> Self {
        self.bounds = Some(Bounds { lower, upper });
        self
    }

    pub fn batch(&self) -> usize {
        self.mu.nrows()
    }

    pub fn dim(&self) -> usize {
        self.mu.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReturnMode {
    /// Mean of the final sampling distribution.
    #[default]
    Mean,
    /// Lowest-valued sample seen over all iterations.
    BestSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DcemConfig {
    /// Samples per iteration (`N`).
    pub n_samples: usize,
    /// Elite count (`k`).
    pub n_elite: usize,
    /// Iterations (`T`).
    pub n_iter: usize,
    /// Temperature; `0` selects the hard, non-differentiable path.
    pub tau: f64,
    pub normalize: bool,
    pub return_mode: ReturnMode,
    pub seed: u64,
    #[serde(skip)]
    pub lml: LmlOptions,
}

impl Default for DcemConfig {
    fn default() -> Self {
        Self {
            n_samples: 100,
            n_elite: 10,
            n_iter: 10,
            tau: 1.0,
            normalize: true,
            return_mode: ReturnMode::Mean,
            seed: 0,
            lml: LmlOptions::default(),
        }
    }
}

impl DcemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(OptimError::Config(format!(
                "n_samples must be at least 2, got {}",
                self.n_samples
            )));
        }
        if self.n_elite == 0 || self.n_elite > self.n_samples {
            return Err(OptimError::Config(format!(
                "n_elite must be in 1..={}, got {}",
                self.n_samples, self.n_elite
            )));
        }
        if self.n_iter == 0 {
            return Err(OptimError::Config("n_iter must be at least 1".into()));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(OptimError::Config(format!(
                "tau must be finite and non-negative, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// State of one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// Sampling distribution the samples were drawn from.
    pub mu: Tensor,
    pub sigma2: Tensor,
    /// `(B*N) x n`.
    pub samples: Tensor,
    /// `B x N`, raw objective values.
    pub values: Tensor,
    /// `B x N` elite weights (indicator or soft).
    pub weights: Tensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IterationTrace {
    pub iterations: Vec<IterationRecord>,
}

impl IterationTrace {
    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }
}

/// Indicator of the `k` smallest entries; ties go to the lowest index.
pub fn hard_topk_indicator(values: &[f64], k: usize) -> Vec<f64> {
    assert!(k <= values.len(), "k={k} exceeds {} values", values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    // stable sort keeps lower indices first among equal values
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    for &i in &order[..k] {
        out[i] = 1.0;
    }
    out
}

/// Closed-form Gaussian refit to the `k` lowest-valued samples of each
/// problem. `samples` is `(B*N) x n`, `values` is `B x N`.
pub fn gaussian_fit_hard(samples: &Tensor, values: &Tensor, k: usize) -> GaussianDistribution {
    let (batch, n_samples) = values.dim();
    let weights_rows: Vec<Vec<f64>> = values
        .rows()
        .into_iter()
        .map(|row| hard_topk_indicator(&row.to_vec(), k))
        .collect();
    let weights =
        Array2::from_shape_vec((batch, n_samples), weights_rows.concat()).expect("weights shape");
    weighted_fit(samples, &weights, k)
}

/// Weighted refit on plain values, with the same operation order as
/// [`gaussian_fit_soft`].
fn weighted_fit(samples: &Tensor, weights: &Tensor, k: usize) -> GaussianDistribution {
    let (batch, n_samples) = weights.dim();
    let dim = samples.ncols();
    let inv_k = 1.0 / k as f64;
    let w = weights
        .to_shape((batch * n_samples, 1))
        .expect("contiguous")
        .to_owned();
    let w = w.broadcast((batch * n_samples, dim)).unwrap().to_owned();
    let mu = group_sum(&(&w * samples), n_samples) * inv_k;
    let diff = samples - &repeat(&mu, n_samples);
    let sigma2 = (group_sum(&(&w * &diff.mapv(|d| d * d)), n_samples) * inv_k)
        .mapv(|s| s.clamp(VARIANCE_FLOOR, f64::INFINITY));
    GaussianDistribution {
        mu,
        sigma2,
        bounds: None,
    }
}

fn group_sum(t: &Tensor, group: usize) -> Tensor {
    let (r, c) = t.dim();
    let mut out = Array2::zeros((r / group, c));
    for (i, row) in t.rows().into_iter().enumerate() {
        let mut dst = out.row_mut(i / group);
        dst += &row;
    }
    out
}

fn repeat(t: &Tensor, times: usize) -> Tensor {
    let (r, c) = t.dim();
    let mut out = Array2::zeros((r * times, c));
    for (b, row) in t.rows().into_iter().enumerate() {
        for i in 0..times {
            out.row_mut(b * times + i).assign(&row);
        }
    }
    out
}

/// Soft refit recorded on the tape:
/// `mu = (1/k) sum_i I_i X_i`, `sigma2 = max((1/k) sum_i I_i (X_i - mu)^2, floor)`.
///
/// `samples` is `(B*N) x n` and `weights` is `B x N`; each weight row must
/// sum to `k` within `1e-3`.
pub fn gaussian_fit_soft<'t>(
    samples: Var<'t>,
    weights: Var<'t>,
    k: usize,
) -> Result<(Var<'t>, Var<'t>)> {
    let (batch, n_samples) = weights.shape();
    let (rows, dim) = samples.shape();
    if rows != batch * n_samples {
        return Err(AutodiffError::ShapeMismatch {
            op: "gaussian_fit_soft",
            left: (rows, dim),
            right: (batch, n_samples),
        }
        .into());
    }
    {
        let w = weights.value_ref();
        for (row, r) in w.rows().into_iter().enumerate() {
            let sum = r.sum();
            if (sum - k as f64).abs() > 1e-3 {
                return Err(OptimError::WeightSum {
                    row,
                    got: sum,
                    expected: k as f64,
                });
            }
        }
        if let Some((index, &value)) = w
            .iter()
            .enumerate()
            .find(|(_, v)| !(-1e-12..=1.0 + 1e-12).contains(*v))
        {
            return Err(OptimError::WeightRange { index, value });
        }
    }
    let inv_k = 1.0 / k as f64;
    let w = weights
        .reshape((batch * n_samples, 1))?
        .broadcast_to((batch * n_samples, dim))?;
    let mu = w.mul(samples)?.group_sum_rows(n_samples)?.scale(inv_k);
    let diff = samples.sub(mu.repeat_rows(n_samples))?;
    let sigma2 = w
        .mul(diff.square())?
        .group_sum_rows(n_samples)?
        .scale(inv_k)
        .clamp(VARIANCE_FLOOR, f64::INFINITY);
    Ok((mu, sigma2))
}

fn standard_normal(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Tensor {
    Array2::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

fn nonfinite_indices(values: &Tensor) -> Vec<usize> {
    values
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_finite())
        .map(|(i, _)| i)
        .collect()
}

fn check_values(values: &Tensor, expected: (usize, usize), iteration: usize) -> Result<()> {
    if values.dim() != expected {
        return Err(OptimError::ValueShape {
            expected,
            got: values.dim(),
        });
    }
    let bad = nonfinite_indices(values);
    if !bad.is_empty() {
        return Err(OptimError::NonFiniteValues {
            iteration,
            indices: bad,
        });
    }
    Ok(())
}

/// Tracks the lowest-valued sample of each problem.
struct BestSamples {
    values: Vec<f64>,
}

impl BestSamples {
    fn new(batch: usize) -> Self {
        Self {
            values: vec![f64::INFINITY; batch],
        }
    }

    /// For each problem, the index of the new best sample if it improved.
    fn update(&mut self, values: &Tensor) -> Vec<Option<usize>> {
        let mut improved = vec![None; values.nrows()];
        for (b, row) in values.rows().into_iter().enumerate() {
            for (i, &v) in row.iter().enumerate() {
                if v < self.values[b] {
                    self.values[b] = v;
                    improved[b] = Some(i);
                }
            }
        }
        improved
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CemOutput {
    /// `B x n` solution.
    pub x: Tensor,
    pub trace: IterationTrace,
}

/// Vanilla CEM. Objective evaluations are recorded on `tape` and removed
/// again, so the tape is left as it was found.
pub fn cem<'t>(
    obj: &dyn Objective<'t>,
    tape: &'t Tape,
    init: &GaussianDistribution,
    cfg: &DcemConfig,
) -> Result<CemOutput> {
    cem_with(
        |samples| {
            let mark = tape.len();
            let values = obj.eval(tape.constant(samples.clone())).map(|v| v.value());
            tape.truncate(mark);
            Ok(values?)
        },
        init,
        cfg,
    )
}

/// [`cem`] over a plain value function mapping `(B*N) x n` samples to a
/// `(B*N) x 1` column.
pub fn cem_with(
    mut values_of: impl FnMut(&Tensor) -> Result<Tensor>,
    init: &GaussianDistribution,
    cfg: &DcemConfig,
) -> Result<CemOutput> {
    cfg.validate()?;
    if cfg.tau != 0.0 {
        return Err(OptimError::Config(format!(
            "cem runs the hard path and needs tau = 0, got {}",
            cfg.tau
        )));
    }
    let (batch, dim) = init.mu.dim();
    let n = cfg.n_samples;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mu = init.mu.clone();
    let mut sigma2 = init.sigma2.clone();
    let mut trace = IterationTrace::default();
    let mut best = BestSamples::new(batch);
    let mut best_x = Array2::zeros((batch, dim));

    for t in 0..cfg.n_iter {
        let eps = standard_normal(&mut rng, (batch * n, dim));
        let sd = repeat(&sigma2.mapv(f64::sqrt), n);
        let mut samples = &repeat(&mu, n) + &(&sd * &eps);
        if let Some(b) = init.bounds {
            samples.mapv_inplace(|x| x.clamp(b.lower, b.upper));
        }

        let values = values_of(&samples)?;
        check_values(&values, (batch * n, 1), t)?;
        let values = values.into_shape_with_order((batch, n)).expect("value reshape");

        for (b, i) in best.update(&values).into_iter().enumerate() {
            if let Some(i) = i {
                best_x.row_mut(b).assign(&samples.row(b * n + i));
            }
        }

        let weights_rows: Vec<Vec<f64>> = values
            .rows()
            .into_iter()
            .map(|row| hard_topk_indicator(&row.to_vec(), cfg.n_elite))
            .collect();
        let weights = Array2::from_shape_vec((batch, n), weights_rows.concat()).unwrap();
        let next = weighted_fit(&samples, &weights, cfg.n_elite);
        trace.iterations.push(IterationRecord {
            mu: mu.clone(),
            sigma2: sigma2.clone(),
            samples,
            values,
            weights,
        });
        mu = next.mu;
        sigma2 = next.sigma2;
    }

    let x = match cfg.return_mode {
        ReturnMode::Mean => mu,
        ReturnMode::BestSample => best_x,
    };
    Ok(CemOutput { x, trace })
}

#[derive(Debug)]
pub struct DcemOutput<'t> {
    /// `B x n` solution, differentiable through every iteration.
    pub x: Var<'t>,
    /// Final sampling distribution.
    pub mu: Var<'t>,
    pub sigma2: Var<'t>,
    pub trace: IterationTrace,
}

/// Differentiable CEM starting from constants.
pub fn dcem<'t>(
    obj: &dyn Objective<'t>,
    tape: &'t Tape,
    init: &GaussianDistribution,
    cfg: &DcemConfig,
) -> Result<DcemOutput<'t>> {
    let mu = tape.constant(init.mu.clone());
    let sigma2 = tape.constant(init.sigma2.clone());
    dcem_from(obj, mu, sigma2, init.bounds, cfg)
}

/// Differentiable CEM from a recorded initial distribution, so gradients
/// also reach `mu0` and `sigma2_0`.
///
/// Each iteration draws `X = mu + sqrt(sigma2) * eps` with `eps` a recorded
/// constant, evaluates the objective, optionally standardizes the values per
/// problem, and weighs samples with the row-wise LML projection of the
/// negated values. With `k == N` every weight is exactly one.
pub fn dcem_from<'t>(
    obj: &dyn Objective<'t>,
    mu0: Var<'t>,
    sigma2_0: Var<'t>,
    bounds: Option<Bounds>,
    cfg: &DcemConfig,
) -> Result<DcemOutput<'t>> {
    cfg.validate()?;
    if cfg.tau <= 0.0 {
        return Err(OptimError::Config(
            "dcem needs tau > 0; use cem for the hard path".into(),
        ));
    }
    let tape = mu0.tape();
    let (batch, dim) = mu0.shape();
    if sigma2_0.shape() != (batch, dim) {
        return Err(AutodiffError::ShapeMismatch {
            op: "dcem init",
            left: (batch, dim),
            right: sigma2_0.shape(),
        }
        .into());
    }
    let n = cfg.n_samples;
    let k = cfg.n_elite;
    let lml = lml_primitive_with(k, cfg.tau, cfg.lml);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mu = mu0;
    let mut sigma2 = sigma2_0;
    let mut trace = IterationTrace::default();
    let mut best = BestSamples::new(batch);
    let mut best_rows: Vec<Option<Var<'t>>> = vec![None; batch];

    for t in 0..cfg.n_iter {
        let eps = tape.constant(standard_normal(&mut rng, (batch * n, dim)));
        let sd = sigma2.sqrt().repeat_rows(n);
        let mut samples = mu.repeat_rows(n).add(sd.mul(eps)?)?;
        if let Some(b) = bounds {
            samples = samples.clamp(b.lower, b.upper);
        }

        let values = obj.eval(samples)?;
        check_values(&values.value_ref(), (batch * n, 1), t)?;
        let values = values.reshape((batch, n))?;
        let values_now = values.value();

        if cfg.return_mode == ReturnMode::BestSample {
            for (b, i) in best.update(&values_now).into_iter().enumerate() {
                if let Some(i) = i {
                    best_rows[b] = Some(samples.index_select_rows(&[b * n + i])?);
                }
            }
        }

        let weights = if k == n {
            tape.constant(Array2::ones((batch, n)))
        } else {
            let scores = if cfg.normalize {
                standardize(values)?
            } else {
                values
            };
            tape.custom(lml.clone(), &[scores.neg()])?
        };

        let (next_mu, next_sigma2) = gaussian_fit_soft(samples, weights, k)?;
        trace.iterations.push(IterationRecord {
            mu: mu.value(),
            sigma2: sigma2.value(),
            samples: samples.value(),
            values: values_now,
            weights: weights.value(),
        });
        mu = next_mu;
        sigma2 = next_sigma2;
    }

    let x = match cfg.return_mode {
        ReturnMode::Mean => mu,
        ReturnMode::BestSample => {
            let rows: Vec<Var<'t>> = best_rows.into_iter().map(|r| r.expect("sampled")).collect();
            tape.concat_rows(&rows)?
        }
    };
    Ok(DcemOutput {
        x,
        mu,
        sigma2,
        trace,
    })
}

/// Per-row `(v - mean) / (std + eps)` with the population standard
/// deviation, recorded on the tape.
pub fn standardize(values: Var<'_>) -> autodiff::Result<Var<'_>> {
    let (rows, cols) = values.shape();
    let inv_n = 1.0 / cols as f64;
    let mean = values.sum_cols().scale(inv_n).broadcast_to((rows, cols))?;
    let centered = values.sub(mean)?;
    // the tiny shift keeps the sqrt differentiable when a row is constant
    let std = centered
        .square()
        .sum_cols()
        .scale(inv_n)
        .add_scalar(1e-20)
        .sqrt()
        .add_scalar(NORMALIZE_EPS);
    centered.div(std.broadcast_to((rows, cols))?)
}

/// `T` explicit steps `y <- y - lr * grad_y sum(obj(y))`, with the inner
/// gradients recorded so the result stays differentiable in anything the
/// objective captures.
pub fn unrolled_gd<'t>(
    obj: &dyn Objective<'t>,
    y0: Var<'t>,
    steps: usize,
    lr: f64,
) -> Result<Var<'t>> {
    let tape = y0.tape();
    let mut y = if y0.requires_grad() {
        y0
    } else {
        tape.var(y0.value())
    };
    for step in 0..steps {
        let energy = obj.eval(y)?.sum();
        let grad = tape.grad_recorded(energy, &[y])?[0];
        y = y.sub(grad.scale(lr))?;
        if y.value_ref().iter().any(|v| !v.is_finite()) {
            return Err(OptimError::NonFiniteIterate { step });
        }
    }
    Ok(y)
}
