//! Cartpole control in a learned latent action space.
//!
//! A decoder maps a low-dimensional latent `z` to a full open-loop control
//! sequence `u_{1:H}`. Planning runs (differentiable) CEM over `z` instead
//! of `u`, and the decoder is trained end to end so that the latent solve
//! reaches low rollout cost.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, Tape, Tensor, Var};
use crate::derive_seed;
use crate::nn::{Activation, Adam, AdamConfig, BoundMlp, Mlp};
use crate::optimizers::{
    self, cem_with, dcem_from, DcemConfig, GaussianDistribution, OptimError,
};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("training diverged at step {step}: cost {cost}")]
    Diverged { step: usize, cost: f64 },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
}

pub type Result<T> = std::result::Result<T, ControlError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CartpoleParams {
    pub gravity: f64,
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Distance from the pivot to the pole's center of mass.
    pub half_length: f64,
    pub force_max: f64,
    pub dt: f64,
}

impl Default for CartpoleParams {
    fn default() -> Self {
        Self {
            gravity: 9.8,
            cart_mass: 1.0,
            pole_mass: 0.1,
            half_length: 0.5,
            force_max: 10.0,
            dt: 0.05,
        }
    }
}

impl CartpoleParams {
    fn total_mass(&self) -> f64 {
        self.cart_mass + self.pole_mass
    }

    /// `F = (2u - 1) F_max`.
    pub fn force(&self, u: f64) -> f64 {
        (2.0 * u - 1.0) * self.force_max
    }
}

/// Cart position and velocity, pole angle (0 = upright, unwrapped) and
/// angular velocity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CartpoleState {
    pub p: f64,
    pub p_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl CartpoleState {
    pub fn new(p: f64, p_dot: f64, theta: f64, theta_dot: f64) -> Self {
        Self {
            p,
            p_dot,
            theta,
            theta_dot,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.p, self.p_dot, self.theta, self.theta_dot]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// Kinetic plus potential energy of cart and pole (pole as a uniform rod).
    pub fn mechanical_energy(&self, params: &CartpoleParams) -> f64 {
        let l = params.half_length;
        let mp = params.pole_mass;
        let (s, c) = self.theta.sin_cos();
        let vx = self.p_dot + l * self.theta_dot * c;
        let vy = -l * self.theta_dot * s;
        let inertia = mp * l * l / 3.0;
        0.5 * params.cart_mass * self.p_dot * self.p_dot
            + 0.5 * mp * (vx * vx + vy * vy)
            + 0.5 * inertia * self.theta_dot * self.theta_dot
            + mp * params.gravity * l * c
    }
}

/// Time derivative of the state under force `force`.
pub fn cartpole_derivative(params: &CartpoleParams, s: [f64; 4], force: f64) -> [f64; 4] {
    let [_, p_dot, theta, theta_dot] = s;
    let (sin, cos) = theta.sin_cos();
    let m = params.total_mass();
    let pml = params.pole_mass * params.half_length;
    let temp = (force + pml * theta_dot * theta_dot * sin) / m;
    let theta_acc = (params.gravity * sin - cos * temp)
        / (params.half_length * (4.0 / 3.0 - params.pole_mass * cos * cos / m));
    let p_acc = temp - pml * theta_acc * cos / m;
    [p_dot, p_acc, theta_dot, theta_acc]
}

/// Classic fourth-order Runge-Kutta step of length `dt` with constant force.
pub fn rk4_step(params: &CartpoleParams, s: [f64; 4], force: f64, dt: f64) -> [f64; 4] {
    let add = |a: [f64; 4], b: [f64; 4], h: f64| -> [f64; 4] {
        [a[0] + h * b[0], a[1] + h * b[1], a[2] + h * b[2], a[3] + h * b[3]]
    };
    let k1 = cartpole_derivative(params, s, force);
    let k2 = cartpole_derivative(params, add(s, k1, dt / 2.0), force);
    let k3 = cartpole_derivative(params, add(s, k2, dt / 2.0), force);
    let k4 = cartpole_derivative(params, add(s, k3, dt), force);
    let mut out = s;
    for i in 0..4 {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// One control interval: an RK4 step of length `dt` with the force held.
pub fn cartpole_step(params: &CartpoleParams, s: CartpoleState, u: f64) -> CartpoleState {
    CartpoleState::from_array(rk4_step(params, s.to_array(), params.force(u), params.dt))
}

/// `C(x, u) = w_p p^2 + w_theta (cos theta - 1)^2 + w_pd p_dot^2
/// + w_td theta_dot^2 + w_u (2 (u - u_offset))^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    pub position: f64,
    pub angle: f64,
    pub velocity: f64,
    pub angular_velocity: f64,
    pub control: f64,
    pub control_offset: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            position: 0.1,
            angle: 1.0,
            velocity: 0.01,
            angular_velocity: 0.01,
            control: 0.001,
            control_offset: 0.5,
        }
    }
}

impl CostWeights {
    pub fn cost(&self, s: &CartpoleState, u: f64) -> f64 {
        let a = s.theta.cos() - 1.0;
        let e = 2.0 * (u - self.control_offset);
        self.position * s.p * s.p
            + self.angle * a * a
            + self.velocity * s.p_dot * s.p_dot
            + self.angular_velocity * s.theta_dot * s.theta_dot
            + self.control * e * e
    }
}

/// Box distribution of initial states, symmetric around zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitDistribution {
    pub p: f64,
    pub p_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl Default for InitDistribution {
    fn default() -> Self {
        Self {
            p: 0.5,
            p_dot: 0.5,
            theta: 1.0,
            theta_dot: 0.5,
        }
    }
}

impl InitDistribution {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> CartpoleState {
        let mut u = |h: f64| if h > 0.0 { rng.random_range(-h..=h) } else { 0.0 };
        CartpoleState::new(u(self.p), u(self.p_dot), u(self.theta), u(self.theta_dot))
    }

    pub fn sample_n(&self, n: usize, seed: u64) -> Vec<CartpoleState> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample(&mut rng)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlProblem {
    pub horizon: usize,
    pub params: CartpoleParams,
    pub cost: CostWeights,
    pub init: InitDistribution,
}

impl Default for ControlProblem {
    fn default() -> Self {
        Self {
            horizon: 20,
            params: CartpoleParams::default(),
            cost: CostWeights::default(),
            init: InitDistribution::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub t: usize,
    pub state: CartpoleState,
    /// Control applied at `t`; `None` for the terminal state.
    pub u: Option<f64>,
}

impl ControlProblem {
    /// `sum_t C(x_t, u_t)` with `x_1 = x_init` and `x_{t+1} = f(x_t, u_t)`.
    pub fn rollout_cost_plain(&self, x_init: &CartpoleState, u: &[f64]) -> f64 {
        let mut s = *x_init;
        let mut total = 0.0;
        for &ut in u {
            total += self.cost.cost(&s, ut);
            s = cartpole_step(&self.params, s, ut);
        }
        total
    }

    /// States visited by a plan, including the terminal one.
    pub fn trajectory(&self, x_init: &CartpoleState, u: &[f64]) -> Vec<TrajectoryPoint> {
        let mut s = *x_init;
        let mut out = Vec::with_capacity(u.len() + 1);
        for (t, &ut) in u.iter().enumerate() {
            out.push(TrajectoryPoint {
                t,
                state: s,
                u: Some(ut),
            });
            s = cartpole_step(&self.params, s, ut);
        }
        out.push(TrajectoryPoint {
            t: u.len(),
            state: s,
            u: None,
        });
        out
    }

    /// Rollout costs for every row of `u` (`M x H`), row `r` starting from
    /// `inits[r / group]`.
    pub fn batch_cost_plain(&self, inits: &[CartpoleState], group: usize, u: &Tensor) -> Tensor {
        let mut out = Array2::zeros((u.nrows(), 1));
        for (r, row) in u.rows().into_iter().enumerate() {
            let plan: Vec<f64> = row.to_vec();
            out[[r, 0]] = self.rollout_cost_plain(&inits[r / group], &plan);
        }
        out
    }

    /// Differentiable rollout cost. `u` is `M x H`; row `r` starts from
    /// `inits[r / group]`. Returns `M x 1`.
    pub fn rollout_cost<'t>(
        &self,
        inits: &[CartpoleState],
        group: usize,
        u: Var<'t>,
    ) -> autodiff::Result<Var<'t>> {
        let tape = u.tape();
        let (m, h) = u.shape();
        let column = |f: fn(&CartpoleState) -> f64| {
            tape.constant(Array2::from_shape_fn((m, 1), |(r, _)| f(&inits[r / group])))
        };
        let mut s = TapeState {
            p: column(|s| s.p),
            p_dot: column(|s| s.p_dot),
            theta: column(|s| s.theta),
            theta_dot: column(|s| s.theta_dot),
        };
        let w = &self.cost;
        let mut total: Option<Var<'t>> = None;
        for t in 0..h {
            let ut = u.col(t)?;
            let angle = s.theta.cos().add_scalar(-1.0).square();
            let effort = ut.add_scalar(-w.control_offset).scale(2.0).square();
            let c = s
                .p
                .square()
                .scale(w.position)
                .add(angle.scale(w.angle))?
                .add(s.p_dot.square().scale(w.velocity))?
                .add(s.theta_dot.square().scale(w.angular_velocity))?
                .add(effort.scale(w.control))?;
            total = Some(match total {
                Some(acc) => acc.add(c)?,
                None => c,
            });
            let force = ut.scale(2.0 * self.params.force_max).add_scalar(-self.params.force_max);
            s = s.rk4(&self.params, force)?;
        }
        Ok(total.unwrap_or_else(|| tape.constant(Array2::zeros((m, 1)))))
    }
}

#[derive(Clone, Copy)]
struct TapeState<'t> {
    p: Var<'t>,
    p_dot: Var<'t>,
    theta: Var<'t>,
    theta_dot: Var<'t>,
}

impl<'t> TapeState<'t> {
    fn derivative(&self, params: &CartpoleParams, force: Var<'t>) -> autodiff::Result<TapeState<'t>> {
        let m = params.total_mass();
        let pml = params.pole_mass * params.half_length;
        let sin = self.theta.sin();
        let cos = self.theta.cos();
        let temp = force
            .add(self.theta_dot.square().mul(sin)?.scale(pml))?
            .scale(1.0 / m);
        let denom = cos
            .square()
            .scale(-params.pole_mass / m)
            .add_scalar(4.0 / 3.0)
            .scale(params.half_length);
        let theta_acc = sin.scale(params.gravity).sub(cos.mul(temp)?)?.div(denom)?;
        let p_acc = temp.sub(theta_acc.mul(cos)?.scale(pml / m))?;
        Ok(TapeState {
            p: self.p_dot,
            p_dot: p_acc,
            theta: self.theta_dot,
            theta_dot: theta_acc,
        })
    }

    fn axpy(&self, k: &TapeState<'t>, h: f64) -> autodiff::Result<TapeState<'t>> {
        Ok(TapeState {
            p: self.p.add(k.p.scale(h))?,
            p_dot: self.p_dot.add(k.p_dot.scale(h))?,
            theta: self.theta.add(k.theta.scale(h))?,
            theta_dot: self.theta_dot.add(k.theta_dot.scale(h))?,
        })
    }

    fn rk4(&self, params: &CartpoleParams, force: Var<'t>) -> autodiff::Result<TapeState<'t>> {
        let dt = params.dt;
        let k1 = self.derivative(params, force)?;
        let k2 = self.axpy(&k1, dt / 2.0)?.derivative(params, force)?;
        let k3 = self.axpy(&k2, dt / 2.0)?.derivative(params, force)?;
        let k4 = self.axpy(&k3, dt)?.derivative(params, force)?;
        let combine = |a: Var<'t>, b: Var<'t>, c: Var<'t>, d: Var<'t>| -> autodiff::Result<Var<'t>> {
            a.add(b.scale(2.0))?.add(c.scale(2.0))?.add(d)
        };
        let step = TapeState {
            p: combine(k1.p, k2.p, k3.p, k4.p)?,
            p_dot: combine(k1.p_dot, k2.p_dot, k3.p_dot, k4.p_dot)?,
            theta: combine(k1.theta, k2.theta, k3.theta, k4.theta)?,
            theta_dot: combine(k1.theta_dot, k2.theta_dot, k3.theta_dot, k4.theta_dot)?,
        };
        self.axpy(&step, dt / 6.0)
    }
}

/// Maps latents `M x n_z` to control sequences `M x H` on the tape.
pub trait Decode<'t> {
    fn decode(&self, z: Var<'t>) -> autodiff::Result<Var<'t>>;
}

impl<'t> Decode<'t> for BoundMlp<'t> {
    fn decode(&self, z: Var<'t>) -> autodiff::Result<Var<'t>> {
        self.forward(z)
    }
}

impl<'t, F> Decode<'t> for F
where
    F: Fn(Var<'t>) -> autodiff::Result<Var<'t>>,
{
    fn decode(&self, z: Var<'t>) -> autodiff::Result<Var<'t>> {
        self(z)
    }
}

/// `n_z -> hidden.. -> H` with ELU hidden units and a sigmoid output, so
/// every decoded control lies in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub mlp: Mlp,
}

impl Decoder {
    pub fn new(n_z: usize, hidden: &[usize], horizon: usize, seed: u64) -> Self {
        let mut sizes = vec![n_z];
        sizes.extend_from_slice(hidden);
        sizes.push(horizon);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            mlp: Mlp::new(&sizes, Activation::Elu, Activation::Sigmoid, &mut rng),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn decode_plain(&self, z: &Tensor) -> Tensor {
        self.mlp.forward(z)
    }
}

/// `C_theta(z; x_init)`: cost of the decoded plan, batched over problems.
/// Latent row `r` belongs to `inits[r / group]`.
pub fn latent_cost<'t>(
    prob: &ControlProblem,
    decoder: &dyn Decode<'t>,
    inits: &[CartpoleState],
    group: usize,
    z: Var<'t>,
) -> autodiff::Result<Var<'t>> {
    prob.rollout_cost(inits, group, decoder.decode(z)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatentSolverConfig {
    pub n_samples: usize,
    pub n_elite: usize,
    pub n_iter: usize,
    /// `0` solves with plain CEM and no gradient through the solve.
    pub tau: f64,
    pub normalize: bool,
    pub mu0: f64,
    pub sigma0: f64,
}

impl Default for LatentSolverConfig {
    fn default() -> Self {
        Self {
            n_samples: 100,
            n_elite: 10,
            n_iter: 10,
            tau: 1.0,
            normalize: true,
            mu0: 0.5,
            sigma0: 0.5,
        }
    }
}

impl LatentSolverConfig {
    pub fn dcem_config(&self, seed: u64) -> DcemConfig {
        DcemConfig {
            n_samples: self.n_samples,
            n_elite: self.n_elite,
            n_iter: self.n_iter,
            tau: self.tau,
            normalize: self.normalize,
            seed,
            ..DcemConfig::default()
        }
    }

    fn init(&self, batch: usize, n_z: usize) -> GaussianDistribution {
        GaussianDistribution::isotropic(batch, n_z, self.mu0, self.sigma0).with_bounds(0.0, 1.0)
    }
}

/// Latent solutions (`B x n_z`) for a batch of initial states with a frozen
/// decoder, using DCEM for `tau > 0` and CEM for `tau = 0`.
pub fn solve_latent(
    prob: &ControlProblem,
    decoder: &Decoder,
    inits: &[CartpoleState],
    cfg: &LatentSolverConfig,
    seed: u64,
) -> Result<Tensor> {
    let n_z = decoder.latent_dim();
    let init = cfg.init(inits.len(), n_z);
    let dcfg = cfg.dcem_config(seed);
    let n = cfg.n_samples;
    if cfg.tau == 0.0 {
        let out = cem_with(
            |z| Ok(prob.batch_cost_plain(inits, n, &decoder.decode_plain(z))),
            &init,
            &dcfg,
        )?;
        Ok(out.x)
    } else {
        let tape = Tape::new();
        let bound = decoder.mlp.bind_frozen(&tape);
        let obj = optimizers::objective(|z| latent_cost(prob, &bound, inits, n, z));
        let mu0 = tape.constant(init.mu.clone());
        let s0 = tape.constant(init.sigma2.clone());
        Ok(dcem_from(&obj, mu0, s0, init.bounds, &dcfg)?.x.value())
    }
}

/// Cost of the decoded plan at the latent solution, per initial state.
pub fn embedded_costs(
    prob: &ControlProblem,
    decoder: &Decoder,
    inits: &[CartpoleState],
    cfg: &LatentSolverConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let z = solve_latent(prob, decoder, inits, cfg, seed)?;
    let plans = decoder.decode_plain(&z);
    Ok(inits
        .iter()
        .zip(plans.rows())
        .map(|(s, row)| prob.rollout_cost_plain(s, &row.to_vec()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    pub n_samples: usize,
    pub n_elite: usize,
    pub n_iter: usize,
    pub mu0: f64,
    pub sigma0: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            n_elite: 100,
            n_iter: 10,
            mu0: 0.5,
            sigma0: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPlan {
    pub u: Vec<f64>,
    pub cost: f64,
}

/// Full-space CEM over `[0, 1]^H` for each initial state (batched).
pub fn expert_cem(
    prob: &ControlProblem,
    inits: &[CartpoleState],
    cfg: &ExpertConfig,
    seed: u64,
) -> Result<Vec<ExpertPlan>> {
    let init = GaussianDistribution::isotropic(inits.len(), prob.horizon, cfg.mu0, cfg.sigma0)
        .with_bounds(0.0, 1.0);
    let dcfg = DcemConfig {
        n_samples: cfg.n_samples,
        n_elite: cfg.n_elite,
        n_iter: cfg.n_iter,
        tau: 0.0,
        seed,
        ..DcemConfig::default()
    };
    let out = cem_with(|u| Ok(prob.batch_cost_plain(inits, cfg.n_samples, u)), &init, &dcfg)?;
    Ok(inits
        .iter()
        .zip(out.x.rows())
        .map(|(s, row)| {
            let u = row.to_vec();
            ExpertPlan {
                cost: prob.rollout_cost_plain(s, &u),
                u,
            }
        })
        .collect())
}

/// Best of `n` i.i.d. uniform control sequences.
pub fn random_shooting(prob: &ControlProblem, x_init: &CartpoleState, n: usize, seed: u64) -> ExpertPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = ExpertPlan {
        u: vec![],
        cost: f64::INFINITY,
    };
    for _ in 0..n {
        let u: Vec<f64> = (0..prob.horizon).map(|_| rng.random_range(0.0..=1.0)).collect();
        let cost = prob.rollout_cost_plain(x_init, &u);
        if cost < best.cost {
            best = ExpertPlan { u, cost };
        }
    }
    best
}

/// Floor applied to embedded costs before dividing.
pub const COST_FLOOR: f64 = 1e-8;

/// Mean over states of `expert_cost / max(embedded_cost, 1e-8)`.
pub fn improvement_factor(expert: &[f64], embedded: &[f64]) -> f64 {
    assert_eq!(expert.len(), embedded.len());
    expert
        .iter()
        .zip(embedded)
        .map(|(e, d)| e / d.max(COST_FLOOR))
        .sum::<f64>()
        / expert.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderTrainConfig {
    pub n_z: usize,
    pub hidden: Vec<usize>,
    pub outer_steps: usize,
    pub adam: AdamConfig,
    pub solver: LatentSolverConfig,
    pub n_val: usize,
    pub eval_every: usize,
    pub divergence_threshold: f64,
    pub seed: u64,
}

impl Default for DecoderTrainConfig {
    fn default() -> Self {
        Self {
            n_z: 2,
            hidden: vec![200, 200],
            outer_steps: 2000,
            adam: AdamConfig::default(),
            solver: LatentSolverConfig::default(),
            n_val: 32,
            eval_every: 100,
            divergence_threshold: 1e6,
            seed: 0,
        }
    }
}

/// Seed streams derived from the run seed (or, for validation states, from
/// the fixed validation seed).
pub mod streams {
    pub const INIT: u64 = 1;
    pub const STATES: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const TRAIN_PROBE: u64 = 4;
    pub const STEP_BASE: u64 = 1 << 32;
}

/// Seed of the shared validation set; independent of the run seed so all
/// runs are compared on the same states.
pub const VALIDATION_SEED: u64 = 0x5EED_0001;

pub fn validation_states(prob: &ControlProblem, n: usize) -> Vec<CartpoleState> {
    prob.init.sample_n(n, VALIDATION_SEED)
}

impl DecoderTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_z == 0 || self.n_val == 0 || self.eval_every == 0 {
            return Err(ControlError::Config(
                "n_z, n_val and eval_every must be positive".into(),
            ));
        }
        if !(self.solver.tau >= 0.0) {
            return Err(ControlError::Config(format!("invalid tau {}", self.solver.tau)));
        }
        self.solver.dcem_config(0).validate()?;
        Ok(())
    }

    pub fn initial_decoder(&self, horizon: usize) -> Decoder {
        Decoder::new(self.n_z, &self.hidden, horizon, derive_seed(self.seed, streams::INIT))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostPoint {
    pub step: usize,
    pub train_cost: f64,
    pub val_cost: f64,
}

#[derive(Debug, Clone)]
pub struct DecoderTrainOutput {
    pub decoder: Decoder,
    pub curve: Vec<CostPoint>,
}

impl DecoderTrainOutput {
    pub fn best_val_cost(&self) -> f64 {
        self.curve.iter().map(|p| p.val_cost).fold(f64::INFINITY, f64::min)
    }

    pub fn final_point(&self) -> CostPoint {
        *self.curve.last().expect("curve always has the step-0 point")
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Decoder cost and parameter gradients for one initial state. With
/// `tau > 0` the gradient runs through the whole DCEM unroll; with
/// `tau = 0` the latent solution is treated as a constant.
pub fn decoder_step(
    prob: &ControlProblem,
    decoder: &Decoder,
    x_init: &CartpoleState,
    solver: &LatentSolverConfig,
    seed: u64,
) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let bound = decoder.mlp.bind(&tape);
    let inits = std::slice::from_ref(x_init);
    let z = if solver.tau == 0.0 {
        tape.constant(solve_latent(prob, decoder, inits, solver, seed)?)
    } else {
        let init = solver.init(1, decoder.latent_dim());
        let obj = optimizers::objective(|z| latent_cost(prob, &bound, inits, solver.n_samples, z));
        let mu0 = tape.constant(init.mu.clone());
        let s0 = tape.constant(init.sigma2.clone());
        dcem_from(&obj, mu0, s0, init.bounds, &solver.dcem_config(seed))?.x
    };
    let cost = latent_cost(prob, &bound, inits, 1, z)?.sum();
    let grads = tape.backward(cost)?;
    Ok((cost.item(), bound.params().into_iter().map(|p| grads.wrt(p)).collect()))
}

/// Trains the decoder so the latent solve reaches low cost (one sampled
/// initial state per step).
pub fn train_decoder(prob: &ControlProblem, cfg: &DecoderTrainConfig) -> Result<DecoderTrainOutput> {
    cfg.validate()?;
    let mut decoder = cfg.initial_decoder(prob.horizon);
    let mut adam = Adam::new(cfg.adam, &decoder.mlp.params());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::STATES));
    let val_states = validation_states(prob, cfg.n_val);
    let probe_states = prob.init.sample_n(cfg.n_val, derive_seed(cfg.seed, streams::TRAIN_PROBE));
    let eval_seed = derive_seed(cfg.seed, streams::EVAL);
    let point = |step: usize, decoder: &Decoder| -> Result<CostPoint> {
        Ok(CostPoint {
            step,
            train_cost: mean(&embedded_costs(prob, decoder, &probe_states, &cfg.solver, eval_seed)?),
            val_cost: mean(&embedded_costs(prob, decoder, &val_states, &cfg.solver, eval_seed)?),
        })
    };
    let mut curve = vec![];
    for step in 0..cfg.outer_steps {
        if step % cfg.eval_every == 0 {
            curve.push(point(step, &decoder)?);
        }
        let x_init = prob.init.sample(&mut rng);
        let seed = derive_seed(cfg.seed, streams::STEP_BASE + step as u64);
        let (cost, grads) = decoder_step(prob, &decoder, &x_init, &cfg.solver, seed)?;
        if !cost.is_finite() || cost > cfg.divergence_threshold {
            return Err(ControlError::Diverged { step, cost });
        }
        adam.step(decoder.mlp.params_mut(), &grads);
    }
    curve.push(point(cfg.outer_steps, &decoder)?);
    Ok(DecoderTrainOutput { decoder, curve })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentSurfacePoint {
    pub z1: f64,
    pub z2: f64,
    pub cost: f64,
}

/// `C_theta(z; x_init)` on a uniform `resolution x resolution` grid over
/// `[0, 1]^2`.
pub fn latent_surface(
    prob: &ControlProblem,
    decoder: &Decoder,
    x_init: &CartpoleState,
    resolution: usize,
) -> Result<Vec<LatentSurfacePoint>> {
    if decoder.latent_dim() != 2 {
        return Err(ControlError::Config(format!(
            "latent surface needs n_z = 2, got {}",
            decoder.latent_dim()
        )));
    }
    if resolution < 2 {
        return Err(ControlError::Config("resolution must be at least 2".into()));
    }
    let axis: Vec<f64> = (0..resolution).map(|i| i as f64 / (resolution - 1) as f64).collect();
    let z = Array2::from_shape_fn((resolution * resolution, 2), |(r, c)| {
        if c == 0 {
            axis[r / resolution]
        } else {
            axis[r % resolution]
        }
    });
    let costs = prob.batch_cost_plain(std::slice::from_ref(x_init), usize::MAX, &decoder.decode_plain(&z));
    Ok(z.rows()
        .into_iter()
        .zip(costs.iter())
        .map(|(row, &cost)| LatentSurfacePoint {
            z1: row[0],
            z2: row[1],
            cost,
        })
        .collect())
}

/// Fraction of grid cells whose cost is within `rel` of the minimum.
pub fn low_cost_area(surface: &[LatentSurfacePoint], rel: f64) -> f64 {
    let min = surface.iter().map(|p| p.cost).fold(f64::INFINITY, f64::min);
    let cutoff = min + rel * min.abs();
    surface.iter().filter(|p| p.cost <= cutoff).count() as f64 / surface.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationCell {
    pub n_z: usize,
    pub tau: f64,
    pub seed: u64,
    pub improvement_factor: f64,
    pub best_val_cost: f64,
    pub final_val_cost: f64,
}

/// Every `(n_z, tau, seed)` combination, in that nesting order.
pub fn ablation_grid(n_zs: &[usize], taus: &[f64], seeds: &[u64]) -> Vec<(usize, f64, u64)> {
    let mut out = vec![];
    for &n_z in n_zs {
        for &tau in taus {
            for &seed in seeds {
                out.push((n_z, tau, seed));
            }
        }
    }
    out
}
