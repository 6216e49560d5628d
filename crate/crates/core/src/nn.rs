//! Fully-connected networks and an Adam optimizer on top of the tape.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, elu, sigmoid, softplus, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Softplus,
    Elu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Identity => x,
            Activation::Softplus => x.softplus(),
            Activation::Elu => x.elu(),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => x.sigmoid(),
        }
    }

    fn apply_plain(self, x: &mut Tensor) {
        match self {
            Activation::Identity => {}
            Activation::Softplus => x.mapv_inplace(softplus),
            Activation::Elu => x.mapv_inplace(elu),
            Activation::Tanh => x.mapv_inplace(f64::tanh),
            Activation::Sigmoid => x.mapv_inplace(sigmoid),
        }
    }
}

/// `y = x W + b` with `W` of shape `in x out` and `b` of shape `1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform init on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for both weight
    /// and bias.
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..bound));
        let bias = Array2::from_shape_simple_fn((1, fan_out), || rng.random_range(-bound..bound));
        Self { weight, bias }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    /// `sizes` lists every layer width, input first.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an mlp needs at least input and output sizes");
        let layers = sizes.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Self {
            layers,
            hidden,
            output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Weights and biases, layer by layer.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Records the parameters as differentiable leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundMlp<'t> {
        self.bind_with(tape, |t, v| t.var(v))
    }

    /// Records the parameters as constants.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> BoundMlp<'t> {
        self.bind_with(tape, |t, v| t.constant(v))
    }

    fn bind_with<'t>(&self, tape: &'t Tape, leaf: impl Fn(&'t Tape, Tensor) -> Var<'t>) -> BoundMlp<'t> {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (leaf(tape, l.weight.clone()), leaf(tape, l.bias.clone())))
                .collect(),
            hidden: self.hidden,
            output: self.output,
        }
    }

    /// Forward pass without a tape; matches [`BoundMlp::forward`] exactly.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = h.dot(&l.weight);
            z += &l.bias;
            let act = if i == last { self.output } else { self.hidden };
            act.apply_plain(&mut z);
            h = z;
        }
        h
    }
}

/// An [`Mlp`] whose parameters live on a tape.
#[derive(Debug, Clone)]
pub struct BoundMlp<'t> {
    pub layers: Vec<(Var<'t>, Var<'t>)>,
    pub hidden: Activation,
    pub output: Activation,
}

impl<'t> BoundMlp<'t> {
    /// `x` is `m x input_dim`; returns `m x output_dim`.
    pub fn forward(&self, x: Var<'t>) -> autodiff::Result<Var<'t>> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = h.matmul(w)?;
            let z = z.add(b.broadcast_to(z.shape())?)?;
            let act = if i == last { self.output } else { self.hidden };
            h = act.apply(z);
        }
        Ok(h)
    }

    /// Parameters in the same order as [`Mlp::params`].
    pub fn params(&self) -> Vec<Var<'t>> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        let zeros = |p: &&Tensor| Array2::zeros(p.dim());
        Self {
            config,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            m.zip_mut_with(g, |m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::{central_diff, rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn plain_and_taped_forward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for act in [Activation::Softplus, Activation::Elu, Activation::Tanh] {
            let net = Mlp::new(&[3, 7, 5, 2], act, Activation::Sigmoid, &mut rng);
            let x = Array2::from_shape_simple_fn((4, 3), || rng.random_range(-2.0..2.0));
            let tape = Tape::new();
            let out = net.bind(&tape).forward(tape.constant(x.clone())).unwrap();
            assert_eq!(out.value(), net.forward(&x));
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&[2, 4, 1], Activation::Softplus, Activation::Identity, &mut rng);
        let x = Array2::from_shape_simple_fn((3, 2), || rng.random_range(-1.0..1.0));
        let tape = Tape::new();
        let bound = net.bind(&tape);
        let root = bound.forward(tape.constant(x.clone())).unwrap().square().sum();
        let grads = tape.backward(root).unwrap();
        for (idx, p) in bound.params().into_iter().enumerate() {
            let numeric = central_diff(&p.value(), 1e-6, |probe| {
                let mut n = net.clone();
                *n.params_mut()[idx] = probe.clone();
                n.forward(&x).mapv(|v| v * v).sum()
            });
            assert!(rel_err(&grads.wrt(p), &numeric) <= 1e-6);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Array2::from_elem((1, 2), 1.0);
        let mut adam = Adam::new(AdamConfig::default(), &[&p]);
        adam.step(vec![&mut p], &[ndarray::array![[3.0, -0.5]]]);
        assert!((p[[0, 0]] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[[0, 1]] - (1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = Array2::from_elem((1, 1), 5.0);
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, &[&p]);
        for _ in 0..500 {
            let g = p.mapv(|x| 2.0 * (x - 1.0));
            adam.step(vec![&mut p], &[g]);
        }
        assert!((p[[0, 0]] - 1.0).abs() < 1e-2);
    }
}
