//! Built-in test functions for the `optimize` subcommand.

use std::f64::consts::PI;

use dcem::autodiff::{self, Tensor, Var};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// `sum (x - 3)^2`
    Quadratic,
    /// `sum (x - theta)^2`
    Shifted,
    /// Rastrigin: `sum x^2 - 10 cos(2 pi x) + 10`, global minimum at 0.
    Multimodal,
}

impl ObjectiveKind {
    fn center(self, theta: f64) -> f64 {
        match self {
            ObjectiveKind::Quadratic => 3.0,
            ObjectiveKind::Shifted => theta,
            ObjectiveKind::Multimodal => 0.0,
        }
    }

    /// Row values of a batch of points.
    pub fn values(self, x: &Tensor, theta: f64) -> Tensor {
        let c = self.center(theta);
        let per_coord = match self {
            ObjectiveKind::Multimodal => x.mapv(|v| v * v - 10.0 * (2.0 * PI * v).cos() + 10.0),
            _ => x.mapv(|v| (v - c) * (v - c)),
        };
        per_coord.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1))
    }

    pub fn eval<'t>(self, x: Var<'t>, theta: f64) -> autodiff::Result<Var<'t>> {
        let c = self.center(theta);
        let per_coord = match self {
            ObjectiveKind::Multimodal => x
                .square()
                .sub(x.scale(2.0 * PI).cos().scale(10.0))?
                .add_scalar(10.0),
            _ => x.add_scalar(-c).square(),
        };
        Ok(per_coord.sum_cols())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dcem::autodiff::Tape;
    use ndarray::array;

    #[test]
    fn taped_and_plain_values_agree() {
        let x = array![[0.3, -1.2], [2.9, 4.0]];
        for kind in [ObjectiveKind::Quadratic, ObjectiveKind::Shifted, ObjectiveKind::Multimodal] {
            let tape = Tape::new();
            let v = kind.eval(tape.constant(x.clone()), 1.5).unwrap().value();
            let plain = kind.values(&x, 1.5);
            for (a, b) in v.iter().zip(plain.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn minimizers_have_zero_value() {
        assert_eq!(ObjectiveKind::Quadratic.values(&array![[3.0]], 0.0)[[0, 0]], 0.0);
        assert_eq!(ObjectiveKind::Shifted.values(&array![[-2.0]], -2.0)[[0, 0]], 0.0);
        assert_eq!(ObjectiveKind::Multimodal.values(&array![[0.0]], 0.0)[[0, 0]], 0.0);
    }
}
