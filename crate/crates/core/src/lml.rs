//! Temperature-scaled projection onto the interior of the LML polytope
//! `{ y : 0 <= y <= 1, 1'y = k }`:
//!
//! ```text
//! y*(x) = argmin_{0<y<1} -x'y - tau * H_b(y)   s.t.  1'y = k
//! ```
//!
//! with `H_b` the binary entropy. Stationarity gives
//! `y_i = sigmoid((x_i + nu) / tau)` for a scalar dual `nu`, and
//! `nu -> sum_i sigmoid((x_i + nu) / tau)` is strictly increasing, so the
//! forward pass is a bisection on `nu`. The backward pass differentiates the
//! KKT system implicitly: with `d_i = y_i (1 - y_i)`,
//!
//! ```text
//! dy/dx = (1/tau) * (diag(d) - d d' / 1'd)
//! ```
//!
//! which is symmetric, so the VJP and the JVP coincide.
//!
//! Mass goes to the *largest* scores. Callers minimizing a cost negate first.

use std::any::Any;
use std::rc::Rc;

use ndarray::Array2;
use thiserror::Error;

use crate::autodiff::{AutodiffError, CustomPrimitive, SavedContext, Tensor};

/// Largest double strictly below one.
const ONE_MINUS_ULP: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmlError {
    #[error("k must satisfy 0 < k < n, got k={k}, n={n}")]
    InvalidK { k: usize, n: usize },
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
    #[error("could not bracket the dual root; final bracket [{lo}, {hi}]")]
    Bracket { lo: f64, hi: f64 },
    #[error("projection saturated; decrease |x|/tau")]
    Saturated,
    #[error("gradient has length {got}, expected {expected}")]
    GradLength { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmlProblem {
    pub x: Vec<f64>,
    pub k: usize,
    pub tau: f64,
}

impl LmlProblem {
    pub fn new(x: Vec<f64>, k: usize, tau: f64) -> Result<Self, LmlError> {
        let p = Self { x, k, tau };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), LmlError> {
        let n = self.x.len();
        if self.k == 0 || self.k >= n {
            return Err(LmlError::InvalidK { k: self.k, n });
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LmlError::InvalidTemperature(self.tau));
        }
        if let Some(i) = self.x.iter().position(|v| !v.is_finite()) {
            return Err(LmlError::NonFinite(i));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmlSolution {
    pub y: Vec<f64>,
    pub nu: f64,
    /// Bisection steps taken.
    pub iterations: usize,
    /// `|1'y - k|` at the returned point.
    pub residual: f64,
}

/// Solver knobs. The defaults stop as soon as `|1'y - k| <= 1e-9`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmlOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Bracket doublings allowed before giving up.
    pub max_expansions: usize,
    /// Finish with safeguarded Newton steps on the dual.
    pub newton_polish: bool,
}

impl Default for LmlOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 200,
            max_expansions: 64,
            newton_polish: false,
        }
    }
}

impl LmlOptions {
    /// Bisect until the bracket collapses to adjacent doubles. Used where
    /// the projection is differenced numerically.
    pub fn exact() -> Self {
        Self {
            tol: 0.0,
            ..Self::default()
        }
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `sigmoid` kept strictly inside the open unit interval.
fn interior_sigmoid(z: f64) -> f64 {
    sigmoid(z).clamp(f64::MIN_POSITIVE, ONE_MINUS_ULP)
}

struct Dual<'a> {
    x: &'a [f64],
    k: f64,
    tau: f64,
}

impl Dual<'_> {
    fn residual(&self, nu: f64) -> f64 {
        self.x
            .iter()
            .map(|&xi| interior_sigmoid((xi + nu) / self.tau))
            .sum::<f64>()
            - self.k
    }

    fn slope(&self, nu: f64) -> f64 {
        self.x
            .iter()
            .map(|&xi| {
                let y = interior_sigmoid((xi + nu) / self.tau);
                y * (1.0 - y)
            })
            .sum::<f64>()
            / self.tau
    }
}

pub fn lml_project(p: &LmlProblem) -> Result<LmlSolution, LmlError> {
    lml_project_with(p, &LmlOptions::default())
}

pub fn lml_project_with(p: &LmlProblem, opts: &LmlOptions) -> Result<LmlSolution, LmlError> {
    p.validate()?;
    let n = p.x.len();
    let dual = Dual {
        x: &p.x,
        k: p.k as f64,
        tau: p.tau,
    };
    let (xmin, xmax) = p
        .x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let c = 10.0 + (((n - p.k) as f64) / p.k as f64).ln().abs();
    let mut lo = -xmax - p.tau * c;
    let mut hi = -xmin + p.tau * c;

    let mut width = hi - lo;
    let mut expansions = 0;
    while dual.residual(lo) > 0.0 {
        if expansions == opts.max_expansions {
            return Err(LmlError::Bracket { lo, hi });
        }
        lo -= width;
        width *= 2.0;
        expansions += 1;
    }
    while dual.residual(hi) < 0.0 {
        if expansions == opts.max_expansions {
            return Err(LmlError::Bracket { lo, hi });
        }
        hi += width;
        width *= 2.0;
        expansions += 1;
    }

    let mut best = (f64::INFINITY, 0.5 * (lo + hi));
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        iterations += 1;
        let r = dual.residual(mid);
        if r.abs() < best.0 {
            best = (r.abs(), mid);
        }
        if r.abs() <= opts.tol {
            break;
        }
        if r < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut nu = best.1;

    if opts.newton_polish {
        for _ in 0..8 {
            let r = dual.residual(nu);
            let s = dual.slope(nu);
            if r == 0.0 || s <= 0.0 {
                break;
            }
            let step = nu - r / s;
            if !(step > lo && step < hi) {
                break;
            }
            if dual.residual(step).abs() >= r.abs() {
                break;
            }
            nu = step;
        }
    }

    let y: Vec<f64> = p
        .x
        .iter()
        .map(|&xi| interior_sigmoid((xi + nu) / p.tau))
        .collect();
    let residual = (y.iter().sum::<f64>() - dual.k).abs();
    Ok(LmlSolution {
        y,
        nu,
        iterations,
        residual,
    })
}

/// `J' g` for the projection that produced `sol` (`J` is symmetric).
pub fn lml_vjp(sol: &LmlSolution, tau: f64, grad_out: &[f64]) -> Result<Vec<f64>, LmlError> {
    if grad_out.len() != sol.y.len() {
        return Err(LmlError::GradLength {
            expected: sol.y.len(),
            got: grad_out.len(),
        });
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(LmlError::InvalidTemperature(tau));
    }
    let d: Vec<f64> = sol.y.iter().map(|&y| y * (1.0 - y)).collect();
    let d_sum: f64 = d.iter().sum();
    if d_sum < 1e-300 {
        return Err(LmlError::Saturated);
    }
    let dg: f64 = d.iter().zip(grad_out).map(|(a, b)| a * b).sum();
    let shift = dg / d_sum;
    Ok(d
        .iter()
        .zip(grad_out)
        .map(|(&di, &gi)| di * (gi - shift) / tau)
        .collect())
}

/// Row-wise projection as a tape primitive: every row of the input is an
/// independent score vector.
#[derive(Debug, Clone)]
pub struct LmlLayer {
    pub k: usize,
    pub tau: f64,
    pub options: LmlOptions,
}

struct Saved {
    solutions: Vec<LmlSolution>,
}

impl CustomPrimitive for LmlLayer {
    fn name(&self) -> &str {
        "lml"
    }

    fn forward(&self, inputs: &[&Tensor]) -> crate::autodiff::Result<(Tensor, SavedContext)> {
        let x = inputs[0];
        let (rows, cols) = x.dim();
        let mut out = Array2::zeros((rows, cols));
        let mut solutions = Vec::with_capacity(rows);
        for (r, row) in x.rows().into_iter().enumerate() {
            let problem = LmlProblem {
                x: row.to_vec(),
                k: self.k,
                tau: self.tau,
            };
            let sol = lml_project_with(&problem, &self.options).map_err(primitive_err)?;
            for (c, &y) in sol.y.iter().enumerate() {
                out[[r, c]] = y;
            }
            solutions.push(sol);
        }
        Ok((out, Box::new(Saved { solutions })))
    }

    fn backward(
        &self,
        saved: &dyn Any,
        _inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &Tensor,
    ) -> crate::autodiff::Result<Vec<Tensor>> {
        let saved = saved
            .downcast_ref::<Saved>()
            .ok_or_else(|| AutodiffError::Primitive("lml: unexpected saved context".into()))?;
        let mut grad = Array2::zeros(output.dim());
        for (r, sol) in saved.solutions.iter().enumerate() {
            let g = grad_output.row(r).to_vec();
            let v = lml_vjp(sol, self.tau, &g).map_err(primitive_err)?;
            for (c, gi) in v.into_iter().enumerate() {
                grad[[r, c]] = gi;
            }
        }
        Ok(vec![grad])
    }
}

fn primitive_err(e: LmlError) -> AutodiffError {
    AutodiffError::Primitive(format!("lml: {e}"))
}

/// The projection packaged for [`crate::autodiff::Tape::custom`].
pub fn lml_as_primitive(k: usize, tau: f64) -> Rc<dyn CustomPrimitive> {
    Rc::new(LmlLayer {
        k,
        tau,
        options: LmlOptions::default(),
    })
}

/// Same as [`lml_as_primitive`] with explicit solver options.
pub fn lml_primitive_with(k: usize, tau: f64, options: LmlOptions) -> Rc<dyn CustomPrimitive> {
    Rc::new(LmlLayer { k, tau, options })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::test_util::{central_diff, rel_err};
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Indicator of the k largest entries (ties to the lower index).
    fn top_k_largest(x: &[f64], k: usize) -> Vec<f64> {
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
        let mut out = vec![0.0; x.len()];
        for &i in &order[..k] {
            out[i] = 1.0;
        }
        out
    }

    fn project(x: &[f64], k: usize, tau: f64) -> LmlSolution {
        lml_project(&LmlProblem::new(x.to_vec(), k, tau).unwrap()).unwrap()
    }

    #[test]
    fn constant_scores_split_evenly() {
        for c in [-3.0, 0.0, 7.5] {
            let sol = project(&[c; 4], 2, 1.0);
            for y in &sol.y {
                assert!((y - 0.5).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn two_point_closed_form() {
        // symmetry of the sigmoid puts nu at -(x1 + x2)/2
        let sol = project(&[2.0, 0.0], 1, 1.0);
        assert!((sol.nu + 1.0).abs() < 1e-9, "nu = {}", sol.nu);
        assert!((sol.y[0] - sigmoid(1.0)).abs() < 1e-9);
        assert!((sol.y[1] - sigmoid(-1.0)).abs() < 1e-9);
        assert!((sol.y[0] - 0.73106).abs() < 1e-5);
        assert!((sol.y[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn small_temperature_approaches_top_k() {
        let x = [3.0, 1.0, 2.0];
        let sol = project(&x, 2, 1e-5);
        let hard = top_k_largest(&x, 2);
        assert_eq!(hard, vec![1.0, 0.0, 1.0]);
        for (y, h) in sol.y.iter().zip(&hard) {
            assert!((y - h).abs() <= 1e-3);
        }
    }

    #[test]
    fn invalid_problems_are_rejected() {
        assert_eq!(
            LmlProblem::new(vec![1.0, 2.0], 2, 1.0).unwrap_err(),
            LmlError::InvalidK { k: 2, n: 2 }
        );
        assert_eq!(
            LmlProblem::new(vec![1.0, 2.0], 0, 1.0).unwrap_err(),
            LmlError::InvalidK { k: 0, n: 2 }
        );
        assert_eq!(
            LmlProblem::new(vec![1.0, 2.0], 1, 0.0).unwrap_err(),
            LmlError::InvalidTemperature(0.0)
        );
        assert_eq!(
            LmlProblem::new(vec![1.0, f64::NAN], 1, 1.0).unwrap_err(),
            LmlError::NonFinite(1)
        );
    }

    #[test]
    fn initial_bracket_needs_no_expansion() {
        let p = LmlProblem::new(vec![0.0, 1.0, 2.0], 1, 1.0).unwrap();
        let opts = LmlOptions {
            max_expansions: 0,
            ..LmlOptions::default()
        };
        assert!(lml_project_with(&p, &opts).is_ok());
    }

    #[test]
    fn vjp_of_zero_is_zero() {
        let sol = project(&[0.3, -1.0, 2.0], 1, 0.7);
        assert_eq!(lml_vjp(&sol, 0.7, &[0.0; 3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn vjp_closed_form_at_uniform_point() {
        // y = (0.5, 0.5), d = (0.25, 0.25): J = diag(d) - d d'/0.5
        let sol = project(&[4.0, 4.0], 1, 1.0);
        let v = lml_vjp(&sol, 1.0, &[1.0, 0.0]).unwrap();
        assert!((v[0] - 0.125).abs() < 1e-12);
        assert!((v[1] + 0.125).abs() < 1e-12);
    }

    #[test]
    fn vjp_length_and_saturation_errors() {
        let sol = project(&[1.0, 0.0], 1, 1.0);
        assert!(matches!(
            lml_vjp(&sol, 1.0, &[1.0]),
            Err(LmlError::GradLength { expected: 2, got: 1 })
        ));
        let saturated = LmlSolution {
            y: vec![1.0, 0.0],
            nu: 0.0,
            iterations: 0,
            residual: 0.0,
        };
        let err = lml_vjp(&saturated, 1.0, &[1.0, 0.0]).unwrap_err();
        assert_eq!(err, LmlError::Saturated);
        assert_eq!(err.to_string(), "projection saturated; decrease |x|/tau");
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.37 + rng.random_range(0.0..0.2)).collect();
        let g: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = LmlProblem::new(x.clone(), 3, 1.0).unwrap();
        let sol = lml_project_with(&p, &LmlOptions::exact()).unwrap();
        let analytic = lml_vjp(&sol, 1.0, &g).unwrap();
        let x0 = Array2::from_shape_vec((8, 1), x).unwrap();
        let numeric = central_diff(&x0, 1e-5, |probe| {
            let p = LmlProblem::new(probe.iter().copied().collect(), 3, 1.0).unwrap();
            let y = lml_project_with(&p, &LmlOptions::exact()).unwrap().y;
            y.iter().zip(&g).map(|(a, b)| a * b).sum()
        });
        let analytic = Array2::from_shape_vec((8, 1), analytic).unwrap();
        assert!(rel_err(&analytic, &numeric) <= 1e-4);
    }

    #[test]
    fn primitive_composes_with_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = Array2::from_shape_fn((1, 6), |_| rng.random_range(-2.0..2.0));
        let w = Array2::from_shape_fn((1, 6), |_| rng.random_range(-1.0..1.0));
        let prim = lml_primitive_with(2, 0.5, LmlOptions::exact());
        let f = |x: &Tensor| -> (f64, Tensor) {
            let tape = Tape::new();
            let xv = tape.var(x.clone());
            let y = tape.custom(prim.clone(), &[xv.neg()]).unwrap();
            let wv = tape.constant(w.clone());
            let root = y.mul(wv).unwrap().sum();
            let g = tape.backward(root).unwrap();
            (root.item(), g.wrt(xv))
        };
        let (_, analytic) = f(&x0);
        let numeric = central_diff(&x0, 1e-5, |p| f(p).0);
        assert!(rel_err(&analytic, &numeric) <= 1e-4);
    }

    #[test]
    fn constant_input_gives_zero_gradient_to_leaf() {
        let tape = Tape::new();
        let leaf = tape.var(Array2::from_elem((1, 4), 0.3));
        let c = tape.constant(Array2::from_shape_vec((1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.custom(lml_as_primitive(2, 1.0), &[c]).unwrap();
        let root = y.sum().add(leaf.sum().scale(0.0)).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.wrt(leaf), Array2::zeros((1, 4)));
        assert_eq!(g.wrt(c), Array2::zeros((1, 4)));
    }

    #[test]
    fn rows_are_independent_instances() {
        let tape = Tape::new();
        let x = tape.constant(ndarray::array![[2.0, 0.0], [5.0, 5.0]]);
        let y = tape.custom(lml_as_primitive(1, 1.0), &[x]).unwrap().value();
        assert!((y[[0, 0]] - sigmoid(1.0)).abs() < 1e-9);
        assert!((y[[1, 0]] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn higher_temperature_is_closer_to_uniform() {
        let x = [1.3, -0.2, 0.8, 2.5, -1.1];
        let k = 2;
        let uniform = k as f64 / x.len() as f64;
        let dist = |tau: f64| {
            project(&x, k, tau)
                .y
                .iter()
                .map(|y| (y - uniform).abs())
                .fold(0.0, f64::max)
        };
        assert!(dist(10.0) < dist(0.1));
    }

    #[test]
    fn newton_polish_keeps_invariants() {
        let p = LmlProblem::new(vec![0.1, 0.4, -0.3, 1.2], 2, 0.3).unwrap();
        let opts = LmlOptions {
            newton_polish: true,
            ..LmlOptions::default()
        };
        let sol = lml_project_with(&p, &opts).unwrap();
        assert!(sol.residual <= 1e-9);
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, usize, f64)> {
        (2usize..=64)
            .prop_flat_map(|n| {
                (
                    proptest::collection::vec(-5.0f64..5.0, n),
                    1..n,
                    1e-2f64..10.0,
                )
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn feasible_interior_stationary((x, k, tau) in instance()) {
            let sol = project(&x, k, tau);
            prop_assert!(sol.residual <= 1e-9);
            for (&yi, &xi) in sol.y.iter().zip(&x) {
                prop_assert!(yi > 0.0 && yi < 1.0);
                prop_assert!((yi - sigmoid((xi + sol.nu) / tau)).abs() <= 1e-9);
            }
        }

        #[test]
        fn shift_invariant((x, k, tau) in instance(), c in -10.0f64..10.0) {
            let a = project(&x, k, tau);
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let b = project(&shifted, k, tau);
            for (ya, yb) in a.y.iter().zip(&b.y) {
                prop_assert!((ya - yb).abs() <= 1e-9);
            }
        }

        #[test]
        fn dual_is_increasing((x, k, tau) in instance(), a in -20.0f64..20.0, b in -20.0f64..20.0) {
            prop_assume!((a - b).abs() > 1e-6);
            let dual = Dual { x: &x, k: k as f64, tau };
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(dual.residual(lo) <= dual.residual(hi));
        }

        #[test]
        fn ones_direction_is_tangent((x, k, tau) in instance()) {
            // J 1 = 0 since the constraint fixes 1'y
            let sol = project(&x, k, tau);
            let ones = vec![1.0; x.len()];
            let v = lml_vjp(&sol, tau, &ones).unwrap();
            let scale = 1.0 / tau;
            for vi in v {
                prop_assert!(vi.abs() <= 1e-12 * scale.max(1.0));
            }
        }
    }
}
