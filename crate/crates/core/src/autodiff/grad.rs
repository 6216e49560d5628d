use std::rc::Rc;

use ndarray::{s, Array2, Axis as NdAxis};

use super::ops::{self, broadcast, group_sum_rows, repeat_rows, reshape, scatter_add, select};
use super::tape::{Axis, Op, Tape, Var};
use super::{AutodiffError, Result, Shape, Tensor};

/// Gradients produced by [`Tape::backward`], indexed by tape position.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`; zeros when `var` does not
    /// reach the root.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.grads.get(var.index).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Array2::zeros(var.shape()),
        }
    }

    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.index).and_then(|g| g.as_ref())
    }
}

/// Sums `g` down to `shape` when the forward op broadcast a smaller operand.
fn reduce_to(g: Tensor, shape: Shape) -> Tensor {
    let (gr, gc) = g.dim();
    if (gr, gc) == shape {
        return g;
    }
    let mut out = g;
    if shape.0 == 1 && gr != 1 {
        out = out.sum_axis(NdAxis(0)).insert_axis(NdAxis(0));
    }
    if shape.1 == 1 && gc != 1 {
        out = out.sum_axis(NdAxis(1)).insert_axis(NdAxis(1));
    }
    out
}

fn mul_b(g: &Tensor, other: &Tensor) -> Tensor {
    if other.dim() == (1, 1) {
        g * other[[0, 0]]
    } else {
        g * other
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Tape {
    /// Reverse sweep from a scalar root. Every node is visited at most once,
    /// in reverse recording order.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let shape = root.shape();
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarRoot(shape));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; root.index + 1];
        grads[root.index] = Some(Array2::ones((1, 1)));

        for i in (0..=root.index).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let value = |j: usize| -> &Tensor { nodes[j].value.as_ref() };
            let out = node.value.as_ref();
            let mut push = |j: usize, gj: Tensor| {
                if nodes[j].requires_grad {
                    accumulate(&mut grads[j], gj);
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    push(*a, reduce_to(g.clone(), value(*a).dim()));
                    push(*b, reduce_to(g, value(*b).dim()));
                }
                Op::Sub(a, b) => {
                    push(*a, reduce_to(g.clone(), value(*a).dim()));
                    push(*b, reduce_to(-g, value(*b).dim()));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (value(*a), value(*b));
                    push(*a, reduce_to(mul_b(&g, vb), va.dim()));
                    push(*b, reduce_to(mul_b(&g, va), vb.dim()));
                }
                Op::Div(a, b) => {
                    let (va, vb) = (value(*a), value(*b));
                    let inv = vb.mapv(|x| 1.0 / x);
                    push(*a, reduce_to(mul_b(&g, &inv), va.dim()));
                    // d(a/b)/db = -out / b
                    let gb = mul_b(&(&g * out), &inv.mapv(|x| -x));
                    push(*b, reduce_to(gb, vb.dim()));
                }
                Op::Scale(a, c) => push(*a, g * *c),
                Op::AddScalar(a) => push(*a, g),
                Op::MatMul(a, b) => {
                    let (va, vb) = (value(*a), value(*b));
                    push(*a, g.dot(&vb.t()));
                    push(*b, va.t().dot(&g));
                }
                Op::Transpose(a) => push(*a, g.t().to_owned()),
                Op::Sum(a) => push(*a, Array2::from_elem(value(*a).dim(), g[[0, 0]])),
                Op::Mean(a) => {
                    let shape = value(*a).dim();
                    let n = (shape.0 * shape.1) as f64;
                    push(*a, Array2::from_elem(shape, g[[0, 0]] / n));
                }
                Op::SumAxis(a) => push(*a, broadcast(&g, value(*a).dim())),
                Op::BroadcastTo(a) => push(*a, reduce_to(g, value(*a).dim())),
                Op::Square(a) => push(*a, &g * &value(*a).mapv(|x| 2.0 * x)),
                Op::Sqrt(a) => push(*a, &g / &out.mapv(|y| 2.0 * y)),
                Op::Exp(a) => push(*a, &g * out),
                Op::Log(a) => push(*a, &g / value(*a)),
                Op::Tanh(a) => push(*a, &g * &out.mapv(|y| 1.0 - y * y)),
                Op::Sigmoid(a) => push(*a, &g * &out.mapv(|y| y * (1.0 - y))),
                Op::Softplus(a) => push(*a, &g * &value(*a).mapv(ops::sigmoid)),
                Op::Elu(a) => {
                    let mut d = value(*a).clone();
                    d.zip_mut_with(out, |x, &y| *x = if *x > 0.0 { 1.0 } else { y + 1.0 });
                    push(*a, &g * &d);
                }
                Op::Sin(a) => push(*a, &g * &value(*a).mapv(f64::cos)),
                Op::Cos(a) => push(*a, &g * &value(*a).mapv(|x| -x.sin())),
                Op::Neg(a) => push(*a, -g),
                Op::Concat(parts, axis) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = value(p).dim();
                        let piece = match axis {
                            Axis::Rows => g.slice(s![offset..offset + r, ..]).to_owned(),
                            Axis::Cols => g.slice(s![.., offset..offset + c]).to_owned(),
                        };
                        offset += if *axis == Axis::Rows { r } else { c };
                        push(p, piece);
                    }
                }
                Op::IndexSelect(a, axis, idx) => {
                    let (r, c) = value(*a).dim();
                    let extent = if *axis == Axis::Rows { r } else { c };
                    push(*a, scatter_add(&g, *axis, idx, extent));
                }
                Op::ScatterAdd(a, axis, idx) => push(*a, select(&g, *axis, idx)),
                Op::Reshape(a) => push(*a, reshape(&g, value(*a).dim())),
                Op::RepeatRows(a, times) => push(*a, group_sum_rows(&g, *times)),
                Op::GroupSumRows(a, group) => push(*a, repeat_rows(&g, *group)),
                Op::Clamp(a, lo, hi) => {
                    let mut d = g;
                    d.zip_mut_with(value(*a), |gi, &x| {
                        if x < *lo || x > *hi {
                            *gi = 0.0;
                        }
                    });
                    push(*a, d);
                }
                Op::Custom(prim, inputs, saved) => {
                    let input_values: Vec<&Tensor> = inputs.iter().map(|&j| value(j)).collect();
                    let gs = prim.backward(saved.as_ref().as_ref(), &input_values, out, &g)?;
                    if gs.len() != inputs.len() {
                        return Err(AutodiffError::CustomGradCount {
                            name: prim.name().to_string(),
                            expected: inputs.len(),
                            got: gs.len(),
                        });
                    }
                    for (pos, (gj, &j)) in gs.into_iter().zip(inputs.iter()).enumerate() {
                        let expected = value(j).dim();
                        if gj.dim() != expected {
                            return Err(AutodiffError::CustomGradShape {
                                name: prim.name().to_string(),
                                input: pos,
                                expected,
                                got: gj.dim(),
                            });
                        }
                        push(j, gj);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradients of a scalar root with respect to `wrt`, recorded onto this
    /// tape as new nodes so they can be differentiated again.
    ///
    /// Custom primitives are not supported on this path.
    pub fn grad_recorded<'t>(&'t self, root: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let shape = root.shape();
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarRoot(shape));
        }
        // Only nodes downstream of some `wrt` var carry adjoints worth
        // recording; everything else would just grow the tape.
        let mut relevant = vec![false; root.index + 1];
        for v in wrt {
            if v.index <= root.index {
                relevant[v.index] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            let start = wrt.iter().map(|v| v.index).min().unwrap_or(root.index + 1);
            for i in start..=root.index {
                if !relevant[i] && nodes[i].requires_grad {
                    relevant[i] = nodes[i].op.parents().iter().any(|&p| relevant[p]);
                }
            }
        }

        let mut is_wrt = vec![false; root.index + 1];
        for v in wrt {
            if v.index <= root.index {
                is_wrt[v.index] = true;
            }
        }

        let mut adj: Vec<Option<Var<'t>>> = vec![None; root.index + 1];
        adj[root.index] = Some(self.constant(Array2::ones((1, 1))));

        for i in (0..=root.index).rev() {
            if !relevant[i] {
                continue;
            }
            // `wrt` vars are treated as independent inputs even when they
            // were computed from other nodes
            let is_leaf = matches!(self.nodes.borrow()[i].op, Op::Leaf);
            if is_leaf || is_wrt[i] {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            for (j, gj) in self.vjp_recorded(i, g, &relevant)? {
                if !relevant[j] {
                    continue;
                }
                adj[j] = Some(match adj[j] {
                    Some(acc) => acc.add(gj)?,
                    None => gj,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|v| match adj.get(v.index).copied().flatten() {
                Some(g) => g,
                None => self.constant(Array2::zeros(v.shape())),
            })
            .collect())
    }

    /// Parent adjoints of node `i` given its adjoint `g`, as tape ops.
    /// Parents with `need[j] == false` are skipped.
    fn vjp_recorded<'t>(
        &'t self,
        i: usize,
        g: Var<'t>,
        need: &[bool],
    ) -> Result<Vec<(usize, Var<'t>)>> {
        let var = |j: usize| Var {
            tape: self,
            index: j,
        };
        let reduce = |gj: Var<'t>, j: usize| -> Result<Var<'t>> {
            let target = var(j).shape();
            let (gr, gc) = gj.shape();
            if (gr, gc) == target {
                return Ok(gj);
            }
            let mut out = gj;
            if target.0 == 1 && gr != 1 {
                out = out.sum_rows();
            }
            if target.1 == 1 && gc != 1 {
                out = out.sum_cols();
            }
            Ok(out)
        };
        // Each arm copies what it needs out of the op, then releases the
        // borrow before recording.
        let nodes = self.nodes.borrow();
        let op = &nodes[i].op;
        let out = var(i);
        let result: Vec<(usize, Var<'t>)> = match op {
            Op::Leaf => vec![],
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                drop(nodes);
                let mut res = vec![];
                if need[a] {
                    res.push((a, reduce(g, a)?));
                }
                if need[b] {
                    res.push((b, reduce(g, b)?));
                }
                res
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                drop(nodes);
                let mut res = vec![];
                if need[a] {
                    res.push((a, reduce(g, a)?));
                }
                if need[b] {
                    res.push((b, reduce(g.neg(), b)?));
                }
                res
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                drop(nodes);
                let mut res = vec![];
                if need[a] {
                    res.push((a, reduce(g.mul(var(b))?, a)?));
                }
                if need[b] {
                    res.push((b, reduce(g.mul(var(a))?, b)?));
                }
                res
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                drop(nodes);
                let mut res = vec![];
                if need[a] {
                    res.push((a, reduce(g.div(var(b))?, a)?));
                }
                if need[b] {
                    let gb = g.mul(out)?.div(var(b))?.neg();
                    res.push((b, reduce(gb, b)?));
                }
                res
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                drop(nodes);
                vec![(a, g.scale(c))]
            }
            Op::AddScalar(a) => {
                let a = *a;
                drop(nodes);
                vec![(a, g)]
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                drop(nodes);
                let mut res = vec![];
                if need[a] {
                    res.push((a, g.matmul(var(b).t())?));
                }
                if need[b] {
                    res.push((b, var(a).t().matmul(g)?));
                }
                res
            }
            Op::Transpose(a) => {
                let a = *a;
                drop(nodes);
                vec![(a, g.t())]
            }
            Op::Sum(a) => {
                let a = *a;
                drop(nodes);
                let shape = var(a).shape();
                vec![(a, g.broadcast_to(shape)?)]
            }
            Op::Mean(a) => {
                let a = *a;
                drop(nodes);
                let shape = var(a).shape();
                let n = (shape.0 * shape.1) as f64;
                vec![(a, g.scale(1.0 / n).broadcast_to(shape)?)]
            }
            Op::SumAxis(a) => {
                let a = *a;
                drop(nodes);
                let shape = var(a).shape();
                vec![(a, g.broadcast_to(shape)?)]
            }
            Op::BroadcastTo(a) => {
                let a = *a;
                drop(nodes);
                vec![(a, reduce(g, a)?)]
            }
            Op::Square(a) => {
                let a = *a;
                drop(nodes);
                vec![(a, g.mul(var(a))?.scale(2.0))]
            }
            Op::Sqrt(a) => {
                let a = *a;
                drop(nodes);
                vec![(a, g.div(out)?.scale(0.5))]
            }
            Op::Exp(a) => {
                let a = *a;
                drop(nodes);
                vec![(a, g.mul(out)?)]
            }
            Op::Log(a) => {
                let a = *a;
                drop(nodes);
                vec![(a, g.div(var(a))?)]
            }
            Op::Tanh(a) => {
                let a = *a;
                drop(nodes);
                let d = out.square().neg().add_scalar(1.0);
                vec![(a, g.mul(d)?)]
            }
            Op::Sigmoid(a) => {
                let a = *a;
                drop(nodes);
                let d = out.mul(out.neg().add_scalar(1.0))?;
                vec![(a, g.mul(d)?)]
            }
            Op::Softplus(a) => {
                let a = *a;
                drop(nodes);
                vec![(a, g.mul(var(a).sigmoid())?)]
            }
            Op::Elu(a) => {
                let a = *a;
                let mask = nodes[a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                drop(nodes);
                let inv = self.constant(mask.mapv(|m| 1.0 - m));
                let mask = self.constant(mask);
                let d = out.add_scalar(1.0).mul(inv)?.add(mask)?;
                vec![(a, g.mul(d)?)]
            }
            Op::Sin(a) => {
                let a = *a;
                drop(nodes);
                vec![(a, g.mul(var(a).cos())?)]
            }
            Op::Cos(a) => {
                let a = *a;
                drop(nodes);
                vec![(a, g.mul(var(a).sin())?.neg())]
            }
            Op::Neg(a) => {
                let a = *a;
                drop(nodes);
                vec![(a, g.neg())]
            }
            Op::Concat(parts, axis) => {
                let parts = parts.clone();
                let axis = *axis;
                let extents: Vec<usize> = parts
                    .iter()
                    .map(|&p| {
                        let (r, c) = nodes[p].value.dim();
                        if axis == Axis::Rows {
                            r
                        } else {
                            c
                        }
                    })
                    .collect();
                drop(nodes);
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for (p, e) in parts.into_iter().zip(extents) {
                    let idx: Vec<usize> = (offset..offset + e).collect();
                    offset += e;
                    if !need[p] {
                        continue;
                    }
                    let piece = match axis {
                        Axis::Rows => g.index_select_rows(&idx)?,
                        Axis::Cols => g.index_select_cols(&idx)?,
                    };
                    res.push((p, piece));
                }
                res
            }
            Op::IndexSelect(a, axis, idx) => {
                let (a, axis, idx) = (*a, *axis, Rc::clone(idx));
                let (r, c) = nodes[a].value.dim();
                drop(nodes);
                let extent = if axis == Axis::Rows { r } else { c };
                vec![(a, g.scatter_add(axis, idx, extent))]
            }
            Op::ScatterAdd(a, axis, idx) => {
                let (a, axis, idx) = (*a, *axis, Rc::clone(idx));
                drop(nodes);
                let piece = match axis {
                    Axis::Rows => g.index_select_rows(&idx)?,
                    Axis::Cols => g.index_select_cols(&idx)?,
                };
                vec![(a, piece)]
            }
            Op::Reshape(a) => {
                let a = *a;
                drop(nodes);
                let shape = var(a).shape();
                vec![(a, g.reshape(shape)?)]
            }
            Op::RepeatRows(a, times) => {
                let (a, times) = (*a, *times);
                drop(nodes);
                vec![(a, g.group_sum_rows(times)?)]
            }
            Op::GroupSumRows(a, group) => {
                let (a, group) = (*a, *group);
                drop(nodes);
                vec![(a, g.repeat_rows(group))]
            }
            Op::Clamp(a, lo, hi) => {
                let (a, lo, hi) = (*a, *lo, *hi);
                let mask = nodes[a]
                    .value
                    .mapv(|x| if x < lo || x > hi { 0.0 } else { 1.0 });
                drop(nodes);
                let mask = self.constant(mask);
                vec![(a, g.mul(mask)?)]
            }
            Op::Custom(..) => return Err(AutodiffError::NotRecordable(op.name())),
        };
        Ok(result)
    }
}
