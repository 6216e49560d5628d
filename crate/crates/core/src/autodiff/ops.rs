use std::rc::Rc;

use ndarray::{concatenate, Array2, Axis as NdAxis};

use super::tape::{check_same_tape, mismatch, Axis, Op, Tape, Var};
use super::{AutodiffError, Result, Shape, Tensor};

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn is_scalar(s: Shape) -> bool {
    s == (1, 1)
}

/// Elementwise combination with scalar broadcasting on either side.
fn zip_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let (sa, sb) = (a.dim(), b.dim());
    if sa == sb {
        let mut out = a.clone();
        out.zip_mut_with(b, |x, &y| *x = f(*x, y));
        Ok(out)
    } else if is_scalar(sb) {
        let y = b[[0, 0]];
        Ok(a.mapv(|x| f(x, y)))
    } else if is_scalar(sa) {
        let x = a[[0, 0]];
        Ok(b.mapv(|y| f(x, y)))
    } else {
        Err(mismatch(op, sa, sb))
    }
}

pub(crate) fn nd_axis(axis: Axis) -> NdAxis {
    match axis {
        Axis::Rows => NdAxis(0),
        Axis::Cols => NdAxis(1),
    }
}

pub(crate) fn select(t: &Tensor, axis: Axis, indices: &[usize]) -> Tensor {
    t.select(nd_axis(axis), indices)
}

pub(crate) fn scatter_add(t: &Tensor, axis: Axis, indices: &[usize], extent: usize) -> Tensor {
    let (r, c) = t.dim();
    match axis {
        Axis::Rows => {
            let mut out = Array2::zeros((extent, c));
            for (src, &dst) in indices.iter().enumerate() {
                let mut row = out.row_mut(dst);
                row += &t.row(src);
            }
            out
        }
        Axis::Cols => {
            let mut out = Array2::zeros((r, extent));
            for (src, &dst) in indices.iter().enumerate() {
                let mut col = out.column_mut(dst);
                col += &t.column(src);
            }
            out
        }
    }
}

pub(crate) fn repeat_rows(t: &Tensor, times: usize) -> Tensor {
    let (r, c) = t.dim();
    let mut out = Array2::zeros((r * times, c));
    for (b, row) in t.rows().into_iter().enumerate() {
        for i in 0..times {
            out.row_mut(b * times + i).assign(&row);
        }
    }
    out
}

pub(crate) fn group_sum_rows(t: &Tensor, group: usize) -> Tensor {
    let (r, c) = t.dim();
    let mut out = Array2::zeros((r / group, c));
    for (i, row) in t.rows().into_iter().enumerate() {
        let mut dst = out.row_mut(i / group);
        dst += &row;
    }
    out
}

pub(crate) fn broadcast(t: &Tensor, shape: Shape) -> Tensor {
    t.broadcast(shape)
        .expect("broadcast shape validated at record time")
        .to_owned()
}

pub(crate) fn reshape(t: &Tensor, shape: Shape) -> Tensor {
    let flat: Vec<f64> = t.iter().copied().collect();
    Array2::from_shape_vec(shape, flat).expect("reshape size validated at record time")
}

impl<'t> Var<'t> {
    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = self.value_ref().mapv(f);
        self.tape.record(op, value)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        op: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        check_same_tape(&self, &other);
        let value = {
            let a = self.value_ref();
            let b = other.value_ref();
            zip_broadcast(name, &a, &b, f)?
        };
        Ok(self.tape.record(op(self.index, other.index), value))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div, |a, b| a / b)
    }

    /// Multiplication by a constant.
    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.index, c), |x| c * x)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.index), |x| x + c)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.index), |x| -x)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        check_same_tape(&self, &other);
        let value = {
            let a = self.value_ref();
            let b = other.value_ref();
            if a.ncols() != b.nrows() {
                return Err(mismatch("matmul", a.dim(), b.dim()));
            }
            a.dot(&*b)
        };
        Ok(self.tape.record(Op::MatMul(self.index, other.index), value))
    }

    pub fn t(self) -> Var<'t> {
        let value = self.value_ref().t().to_owned();
        self.tape.record(Op::Transpose(self.index), value)
    }

    pub fn sum(self) -> Var<'t> {
        let value = super::scalar(self.value_ref().sum());
        self.tape.record(Op::Sum(self.index), value)
    }

    pub fn mean(self) -> Var<'t> {
        let value = {
            let v = self.value_ref();
            super::scalar(v.sum() / v.len() as f64)
        };
        self.tape.record(Op::Mean(self.index), value)
    }

    /// Sums each column: `r x c -> 1 x c`.
    pub fn sum_rows(self) -> Var<'t> {
        let value = self.value_ref().sum_axis(NdAxis(0)).insert_axis(NdAxis(0));
        self.tape.record(Op::SumAxis(self.index), value)
    }

    /// Sums each row: `r x c -> r x 1`.
    pub fn sum_cols(self) -> Var<'t> {
        let value = self.value_ref().sum_axis(NdAxis(1)).insert_axis(NdAxis(1));
        self.tape.record(Op::SumAxis(self.index), value)
    }

    /// Explicit broadcast of a `1 x 1`, `r x 1` or `1 x c` value.
    pub fn broadcast_to(self, shape: Shape) -> Result<Var<'t>> {
        let (r, c) = self.shape();
        let ok = (r == 1 || r == shape.0) && (c == 1 || c == shape.1);
        if !ok {
            return Err(mismatch("broadcast_to", (r, c), shape));
        }
        let value = broadcast(&self.value_ref(), shape);
        Ok(self.tape.record(Op::BroadcastTo(self.index), value))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.index), |x| x * x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt(self.index), f64::sqrt)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.index), f64::exp)
    }

    pub fn log(self) -> Var<'t> {
        self.unary(Op::Log(self.index), f64::ln)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.index), f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.index), sigmoid)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.index), softplus)
    }

    pub fn elu(self) -> Var<'t> {
        self.unary(Op::Elu(self.index), elu)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(Op::Sin(self.index), f64::sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(Op::Cos(self.index), f64::cos)
    }

    /// Clamps into `[lo, hi]`. The gradient is zero wherever the input lies
    /// outside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp(self.index, lo, hi), |x| x.clamp(lo, hi))
    }

    fn select_axis(self, axis: Axis, indices: &[usize]) -> Result<Var<'t>> {
        let len = match axis {
            Axis::Rows => self.shape().0,
            Axis::Cols => self.shape().1,
        };
        if let Some(&index) = indices.iter().find(|&&i| i >= len) {
            return Err(AutodiffError::IndexOutOfBounds { index, len });
        }
        let value = select(&self.value_ref(), axis, indices);
        Ok(self
            .tape
            .record(Op::IndexSelect(self.index, axis, Rc::from(indices)), value))
    }

    /// Gathers rows by index; repeated indices are allowed.
    pub fn index_select_rows(self, indices: &[usize]) -> Result<Var<'t>> {
        self.select_axis(Axis::Rows, indices)
    }

    pub fn index_select_cols(self, indices: &[usize]) -> Result<Var<'t>> {
        self.select_axis(Axis::Cols, indices)
    }

    /// Column `j` as an `r x 1` value.
    pub fn col(self, j: usize) -> Result<Var<'t>> {
        self.index_select_cols(&[j])
    }

    pub(crate) fn scatter_add(self, axis: Axis, indices: Rc<[usize]>, extent: usize) -> Var<'t> {
        let value = scatter_add(&self.value_ref(), axis, &indices, extent);
        self.tape
            .record(Op::ScatterAdd(self.index, axis, indices), value)
    }

    pub fn reshape(self, shape: Shape) -> Result<Var<'t>> {
        let from = self.shape();
        if from.0 * from.1 != shape.0 * shape.1 {
            return Err(mismatch("reshape", from, shape));
        }
        let value = reshape(&self.value_ref(), shape);
        Ok(self.tape.record(Op::Reshape(self.index), value))
    }

    /// Repeats each row `times` times in place: row `b` becomes rows
    /// `b*times .. (b+1)*times`.
    pub fn repeat_rows(self, times: usize) -> Var<'t> {
        let value = repeat_rows(&self.value_ref(), times);
        self.tape.record(Op::RepeatRows(self.index, times), value)
    }

    /// Sums consecutive groups of `group` rows. Adjoint of `repeat_rows`.
    pub fn group_sum_rows(self, group: usize) -> Result<Var<'t>> {
        let (r, c) = self.shape();
        if group == 0 || r % group != 0 {
            return Err(mismatch("group_sum_rows", (r, c), (group, c)));
        }
        let value = group_sum_rows(&self.value_ref(), group);
        Ok(self.tape.record(Op::GroupSumRows(self.index, group), value))
    }
}

impl Tape {
    fn concat<'t>(&'t self, parts: &[Var<'t>], axis: Axis) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or(AutodiffError::Primitive("concat of zero parts".into()))?;
        for p in parts {
            check_same_tape(first, p);
            let (a, b) = (first.shape(), p.shape());
            let ok = match axis {
                Axis::Rows => a.1 == b.1,
                Axis::Cols => a.0 == b.0,
            };
            if !ok {
                return Err(mismatch("concat", a, b));
            }
        }
        let value = {
            let refs: Vec<_> = parts.iter().map(|p| p.value_ref()).collect();
            let views: Vec<_> = refs.iter().map(|r| r.view()).collect();
            concatenate(nd_axis(axis), &views).expect("concat shapes validated")
        };
        let indices = parts.iter().map(|p| p.index).collect();
        Ok(self.record(Op::Concat(indices, axis), value))
    }

    /// Stacks parts side by side (equal row counts).
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        self.concat(parts, Axis::Cols)
    }

    /// Stacks parts vertically (equal column counts).
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        self.concat(parts, Axis::Rows)
    }
}
