//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar root walks the records in reverse and
//! returns a [`Gradients`] map. [`Tape::grad_recorded`] runs the same sweep
//! but records the adjoint computation back onto the tape, so an inner
//! gradient (e.g. an unrolled gradient step) can itself be differentiated.
//!
//! Every value is a 2-D array. Vectors are columns (`n x 1`) unless an op
//! says otherwise and scalars are `1 x 1`. Binary elementwise ops require
//! equal shapes, except that either side may be a `1 x 1` scalar.
//!
//! Operations that cannot be expressed on the tape (new primitives whose
//! gradient is known in closed form) plug in through [`CustomPrimitive`].

mod grad;
mod ops;
mod tape;

pub use grad::Gradients;
pub(crate) use ops::{elu, sigmoid, softplus};
pub use tape::{CustomPrimitive, SavedContext, Tape, Var};

use ndarray::Array2;
use thiserror::Error;

/// Dense row-major matrix used for every value on the tape.
pub type Tensor = Array2<f64>;

/// Shape as `(rows, cols)`.
pub type Shape = (usize, usize);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("backward root must be 1x1, got {0:?}")]
    NonScalarRoot(Shape),
    #[error("custom primitive `{name}` returned gradient of shape {got:?} for input {input} of shape {expected:?}")]
    CustomGradShape {
        name: String,
        input: usize,
        expected: Shape,
        got: Shape,
    },
    #[error("custom primitive `{name}` returned {got} gradients for {expected} inputs")]
    CustomGradCount {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("operation `{0}` cannot be differentiated on the tape")]
    NotRecordable(&'static str),
    #[error("index {index} out of bounds for axis of length {len}")]
    IndexOutOfBounds { index: usize, len: usize },
    #[error("{0}")]
    Primitive(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

pub(crate) fn shape_of(t: &Tensor) -> Shape {
    t.dim()
}

/// Builds an `n x 1` column from a slice.
pub fn column(values: &[f64]) -> Tensor {
    Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column shape")
}

/// Builds a `1 x 1` tensor.
pub fn scalar(value: f64) -> Tensor {
    Array2::from_elem((1, 1), value)
}

#[cfg(test)]
mod tests;
