//! Finite-difference helpers shared by unit tests.

use crate::autodiff::Tensor;

/// Central differences of a scalar function at `x`.
pub fn central_diff(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut grad = Tensor::zeros(x.dim());
    let mut probe = x.clone();
    for (idx, g) in grad.indexed_iter_mut() {
        let orig = probe[idx];
        probe[idx] = orig + h;
        let up = f(&probe);
        probe[idx] = orig - h;
        let down = f(&probe);
        probe[idx] = orig;
        *g = (up - down) / (2.0 * h);
    }
    grad
}

/// Norm-wise relative error, zero when both sides vanish.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = a
        .mapv(|v| v * v)
        .sum()
        .sqrt()
        .max(b.mapv(|v| v * v).sum().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
