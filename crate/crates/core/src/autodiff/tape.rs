use std::any::Any;
use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use super::{shape_of, AutodiffError, Result, Shape, Tensor};

/// Opaque state a [`CustomPrimitive`] saves during its forward pass.
pub type SavedContext = Box<dyn Any>;

/// A user-defined operation with a hand-written vector-Jacobian product.
///
/// `backward` receives the context saved by `forward`, the input and output
/// values, and the upstream gradient, and must return one gradient per input
/// with the input's shape.
pub trait CustomPrimitive {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<(Tensor, SavedContext)>;

    fn backward(
        &self,
        saved: &dyn Any,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &Tensor,
    ) -> Result<Vec<Tensor>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Axis {
    Rows,
    Cols,
}

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    /// Column sums (`1 x c`) or row sums (`r x 1`); the adjoint broadcasts back.
    SumAxis(usize),
    BroadcastTo(usize),
    Square(usize),
    Sqrt(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Elu(usize),
    Sin(usize),
    Cos(usize),
    Neg(usize),
    Concat(Vec<usize>, Axis),
    IndexSelect(usize, Axis, Rc<[usize]>),
    /// Adjoint of `IndexSelect`: scatters rows/cols into a zero tensor of the
    /// given extent along the axis, summing duplicates.
    ScatterAdd(usize, Axis, Rc<[usize]>),
    Reshape(usize),
    RepeatRows(usize, usize),
    GroupSumRows(usize, usize),
    Clamp(usize, f64, f64),
    Custom(Rc<dyn CustomPrimitive>, Vec<usize>, Rc<SavedContext>),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Elu(..) => "elu",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Neg(..) => "neg",
            Op::Concat(..) => "concat",
            Op::IndexSelect(..) => "index_select",
            Op::ScatterAdd(..) => "scatter_add",
            Op::Reshape(..) => "reshape",
            Op::RepeatRows(..) => "repeat_rows",
            Op::GroupSumRows(..) => "group_sum_rows",
            Op::Clamp(..) => "clamp",
            Op::Custom(..) => "custom",
        }
    }

    pub(crate) fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a)
            | Op::BroadcastTo(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Elu(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Neg(a)
            | Op::IndexSelect(a, ..)
            | Op::ScatterAdd(a, ..)
            | Op::Reshape(a)
            | Op::RepeatRows(a, _)
            | Op::GroupSumRows(a, _)
            | Op::Clamp(a, ..) => vec![*a],
            Op::Concat(parts, _) => parts.clone(),
            Op::Custom(_, inputs, _) => inputs.clone(),
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Rc<Tensor>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Append-only record of a computation. Single-threaded; build one per
/// forward pass.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every node recorded at or after `len`. Vars pointing past the
    /// new end must not be used afterwards.
    pub fn truncate(&self, len: usize) {
        self.nodes.borrow_mut().truncate(len);
    }

    /// A differentiable leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_var(&self, value: f64) -> Var<'_> {
        self.var(super::scalar(value))
    }

    pub fn column_var(&self, values: &[f64]) -> Var<'_> {
        self.var(super::column(values))
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var { tape: self, index }
    }

    /// Records `op` with a precomputed value. Gradient tracking follows the
    /// parents.
    pub(crate) fn record(&self, op: Op, value: Tensor) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|&p| nodes[p].requires_grad)
        };
        self.push(value, op, requires_grad)
    }

    pub(crate) fn value_rc(&self, index: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[index].value)
    }

    /// Applies a custom primitive to `inputs`.
    pub fn custom<'t>(
        &'t self,
        prim: Rc<dyn CustomPrimitive>,
        inputs: &[Var<'t>],
    ) -> Result<Var<'t>> {
        let values: Vec<Rc<Tensor>> = inputs.iter().map(|v| self.value_rc(v.index)).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let (out, saved) = prim.forward(&refs)?;
        let indices = inputs.iter().map(|v| v.index).collect();
        Ok(self.record(Op::Custom(prim, indices, Rc::new(saved)), out))
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) index: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("index", &self.index)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn index(&self) -> usize {
        self.index
    }

    /// Borrow of the recorded value. Do not record new ops while holding it.
    pub fn value_ref(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |nodes| nodes[self.index].value.as_ref())
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_rc(self.index).as_ref().clone()
    }

    pub fn shape(&self) -> Shape {
        shape_of(&self.tape.nodes.borrow()[self.index].value)
    }

    /// The single entry of a `1 x 1` value.
    pub fn item(&self) -> f64 {
        let v = self.value_ref();
        debug_assert_eq!(v.dim(), (1, 1), "item() on non-scalar");
        v[[0, 0]]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.index].requires_grad
    }

    pub(crate) fn same_tape(&self, other: &Var<'_>) -> bool {
        std::ptr::eq(self.tape, other.tape)
    }
}

pub(crate) fn check_same_tape(a: &Var<'_>, b: &Var<'_>) {
    assert!(a.same_tape(b), "vars recorded on different tapes");
}

pub(crate) fn mismatch(op: &'static str, a: Shape, b: Shape) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: a,
        right: b,
    }
}
