use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use super::nn::{gelu, gelu_grad};
use super::{matmul_into, ParamId, Parameter, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    /// `a[m, n] + b[n]` broadcast over rows.
    AddRow(usize, usize),
    /// `a[m, n] + b[m]` broadcast over columns.
    AddCol(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Gelu(usize),
    Exp(usize),
    Ln(usize),
    SoftmaxRows(usize),
    Sum(usize),
    SumCols(usize),
    Reshape(usize),
    SliceRows(usize, usize),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    /// `[B, D] -> [B, B]` with entries `||x_i - x_j||^2`.
    PairwiseSqDist(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
///
/// Not `Sync`: a tape belongs to the thread that builds it. Models are plain
/// data and can be shared across threads, each thread using its own tape.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
    forward_evals: Cell<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            forward_evals: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Input that gradients are tracked for.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that gradients are not tracked for.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf for a model parameter. Repeated calls with the same parameter
    /// return the same node.
    pub fn param(&self, p: &Parameter) -> Var<'_> {
        if let Some(&id) = self.params.borrow().get(&p.id()) {
            return Var { tape: self, id };
        }
        let v = self.var(p.value.clone());
        self.params.borrow_mut().insert(p.id(), v.id);
        v
    }

    /// Models call this once per forward evaluation.
    pub fn count_forward(&self) {
        self.forward_evals.set(self.forward_evals.get() + 1);
    }

    pub fn forward_evals(&self) -> usize {
        self.forward_evals.get()
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    let mut out = x.clone();
    for r in 0..m {
        let row = &mut out.data_mut()[r * n..(r + 1) * n];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::domain("softmax row is entirely masked"));
        }
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

impl<'t> Var<'t> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn value(self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(self) -> Result<f64> {
        self.value().item()
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Var<'t>> {
        let value = f(&self.value())?;
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(value, op, rg))
    }

    fn binary(
        self,
        other: Var<'t>,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            let b = other.value();
            f(&a, &b)?
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(value, op, rg))
    }

    fn zip(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(a, b, what)?;
        Tensor::new(
            a.shape().to_vec(),
            a.data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| {
            Self::zip(a, b, "add", |x, y| x + y)
        })
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| {
            Self::zip(a, b, "sub", |x, y| x - y)
        })
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| {
            Self::zip(a, b, "mul", |x, y| x * y)
        })
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, s), |a| Ok(a.map(|v| v * s)))
            .expect("scale is shape-preserving")
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |a| Ok(a.map(|v| v + s)))
            .expect("add_scalar is shape-preserving")
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self).expect("same shape")
    }

    /// `self[m, n] + row[n]` for every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.binary(row, Op::AddRow(self.id, row.id), |a, b| {
            let (m, n) = a.dims2()?;
            if b.numel() != n {
                return Err(Error::shape(format!(
                    "add_row: {:?} + {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let mut out = a.clone();
            for r in 0..m {
                for (o, &bv) in out.data_mut()[r * n..(r + 1) * n].iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            Ok(out)
        })
    }

    /// `self[m, n] + col[m]` for every column.
    pub fn add_col(self, col: Var<'t>) -> Result<Var<'t>> {
        self.binary(col, Op::AddCol(self.id, col.id), |a, b| {
            let (m, n) = a.dims2()?;
            if b.numel() != m {
                return Err(Error::shape(format!(
                    "add_col: {:?} + {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let mut out = a.clone();
            for r in 0..m {
                let bv = b.data()[r];
                for o in &mut out.data_mut()[r * n..(r + 1) * n] {
                    *o += bv;
                }
            }
            Ok(out)
        })
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| {
            let (m, k) = a.dims2()?;
            let (k2, n) = b.dims2()?;
            if k != k2 {
                return Err(Error::shape(format!(
                    "matmul: {:?} x {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let mut out = vec![0.0; m * n];
            matmul_into(a.data(), (m, k), false, b.data(), (k, n), false, &mut out);
            Tensor::new(vec![m, n], out)
        })
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        self.unary(Op::Transpose(self.id), |a| {
            let (m, n) = a.dims2()?;
            let mut out = vec![0.0; m * n];
            for r in 0..m {
                for c in 0..n {
                    out[c * m + r] = a.data()[r * n + c];
                }
            }
            Tensor::new(vec![n, m], out)
        })
    }

    pub fn gelu(self) -> Var<'t> {
        self.unary(Op::Gelu(self.id), |a| Ok(a.map(gelu)))
            .expect("shape-preserving")
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |a| Ok(a.map(f64::exp)))
            .expect("shape-preserving")
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.unary(Op::Ln(self.id), |a| {
            if a.data().iter().any(|&v| v <= 0.0) {
                return Err(Error::domain("ln of a non-positive value"));
            }
            Ok(a.map(f64::ln))
        })
    }

    pub fn softmax_rows(self) -> Result<Var<'t>> {
        self.unary(Op::SoftmaxRows(self.id), softmax_rows)
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |a| Ok(Tensor::scalar(a.sum())))
            .expect("sum always succeeds")
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Row sums of a matrix, shape `[m, 1]`.
    pub fn sum_cols(self) -> Result<Var<'t>> {
        self.unary(Op::SumCols(self.id), |a| {
            let (m, n) = a.dims2()?;
            let data = (0..m)
                .map(|r| a.data()[r * n..(r + 1) * n].iter().sum())
                .collect();
            Tensor::new(vec![m, 1], data)
        })
    }

    /// Squared Euclidean distances between all row pairs, `[B, B]`. The
    /// diagonal is exactly zero.
    pub fn pairwise_sq_dist(self) -> Result<Var<'t>> {
        self.unary(Op::PairwiseSqDist(self.id), |a| {
            let (b, _) = a.dims2()?;
            let mut out = vec![0.0; b * b];
            for i in 0..b {
                for j in i + 1..b {
                    let dist: f64 = a
                        .row(i)
                        .iter()
                        .zip(a.row(j))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    out[i * b + j] = dist;
                    out[j * b + i] = dist;
                }
            }
            Tensor::new(vec![b, b], out)
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary(Op::Reshape(self.id), |a| a.reshaped(shape))
    }

    /// Rows `start..end` along the first axis (any rank).
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>> {
        self.unary(Op::SliceRows(self.id, start), |a| {
            let rows = a.shape()[0];
            if start >= end || end > rows {
                return Err(Error::shape(format!("slice_rows {start}..{end} of {rows}")));
            }
            let inner: usize = a.shape()[1..].iter().product();
            let mut shape = a.shape().to_vec();
            shape[0] = end - start;
            Tensor::new(shape, a.data()[start * inner..end * inner].to_vec())
        })
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of nothing"))?;
        let tape = first.tape;
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        let value = {
            let nodes = tape.nodes.borrow();
            let inner = nodes[ids[0]].value.shape()[1..].to_vec();
            let mut rows = 0;
            let mut data = Vec::new();
            for &i in &ids {
                let t = &nodes[i].value;
                if t.shape()[1..] != inner[..] {
                    return Err(Error::shape(format!(
                        "concat_rows: {:?} vs {:?}",
                        t.shape(),
                        inner
                    )));
                }
                rows += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![rows];
            shape.extend(inner);
            Tensor::new(shape, data)?
        };
        let rg = tape.rg(&ids);
        Ok(tape.push(value, Op::ConcatRows(ids), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        self.unary(Op::SliceCols(self.id, start), |a| {
            let (m, n) = a.dims2()?;
            if start >= end || end > n {
                return Err(Error::shape(format!("slice_cols {start}..{end} of {n}")));
            }
            let w = end - start;
            let mut data = Vec::with_capacity(m * w);
            for r in 0..m {
                data.extend_from_slice(&a.data()[r * n + start..r * n + end]);
            }
            Tensor::new(vec![m, w], data)
        })
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of nothing"))?;
        let tape = first.tape;
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        let value = {
            let nodes = tape.nodes.borrow();
            let (m, _) = nodes[ids[0]].value.dims2()?;
            let mut widths = Vec::new();
            for &i in &ids {
                let (r, c) = nodes[i].value.dims2()?;
                if r != m {
                    return Err(Error::shape(format!("concat_cols: {r} rows vs {m}")));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(m * total);
            for r in 0..m {
                for (&i, &w) in ids.iter().zip(&widths) {
                    data.extend_from_slice(&nodes[i].value.data()[r * w..(r + 1) * w]);
                }
            }
            Tensor::new(vec![m, total], data)?
        };
        let rg = tape.rg(&ids);
        Ok(tape.push(value, Op::ConcatCols(ids), rg))
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(self) -> Result<Gradients> {
        let nodes = self.tape.nodes.borrow();
        if nodes[self.id].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[self.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.id + 1];
        grads[self.id] = Some(Tensor::ones(nodes[self.id].value.shape()));
        let mut visited = 0;

        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            visited += 1;
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let mut acc = |target: usize, delta: Tensor| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => {
                        for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                            *e += d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!("leaves handled above"),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let da = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
                    )?;
                    let db = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect(),
                    )?;
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
                Op::AddScalar(a) => acc(*a, g.clone()),
                Op::AddRow(a, b) => {
                    let (m, n) = g.dims2()?;
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for (d, &gv) in db.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                            *d += gv;
                        }
                    }
                    acc(*b, Tensor::new(nodes[*b].value.shape().to_vec(), db)?);
                    acc(*a, g.clone());
                }
                Op::AddCol(a, b) => {
                    let (m, n) = g.dims2()?;
                    let db = (0..m)
                        .map(|r| g.data()[r * n..(r + 1) * n].iter().sum())
                        .collect();
                    acc(*b, Tensor::new(nodes[*b].value.shape().to_vec(), db)?);
                    acc(*a, g.clone());
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k) = av.dims2()?;
                    let (_, n) = bv.dims2()?;
                    if nodes[*a].requires_grad {
                        let mut da = vec![0.0; m * k];
                        matmul_into(g.data(), (m, n), false, bv.data(), (k, n), true, &mut da);
                        acc(*a, Tensor::new(vec![m, k], da)?);
                    }
                    if nodes[*b].requires_grad {
                        let mut db = vec![0.0; k * n];
                        matmul_into(av.data(), (m, k), true, g.data(), (m, n), false, &mut db);
                        acc(*b, Tensor::new(vec![k, n], db)?);
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = g.dims2()?;
                    let mut out = vec![0.0; m * n];
                    for r in 0..m {
                        for c in 0..n {
                            out[c * m + r] = g.data()[r * n + c];
                        }
                    }
                    acc(*a, Tensor::new(vec![n, m], out)?);
                }
                Op::Gelu(a) => {
                    let x = &nodes[*a].value;
                    let d = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, &xv)| gv * gelu_grad(xv))
                        .collect();
                    acc(*a, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::Exp(a) => {
                    let d = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(gv, y)| gv * y)
                        .collect();
                    acc(*a, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::Ln(a) => {
                    let x = &nodes[*a].value;
                    let d = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, xv)| gv / xv)
                        .collect();
                    acc(*a, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (m, n) = y.dims2()?;
                    let mut d = vec![0.0; m * n];
                    for r in 0..m {
                        let yr = &y.data()[r * n..(r + 1) * n];
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            d[r * n + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(*a, Tensor::new(vec![m, n], d)?);
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    acc(*a, Tensor::full(nodes[*a].value.shape(), gv));
                }
                Op::SumCols(a) => {
                    let (m, n) = nodes[*a].value.dims2()?;
                    let mut d = vec![0.0; m * n];
                    for r in 0..m {
                        d[r * n..(r + 1) * n].fill(g.data()[r]);
                    }
                    acc(*a, Tensor::new(vec![m, n], d)?);
                }
                Op::Reshape(a) => {
                    acc(*a, g.reshaped(nodes[*a].value.shape())?);
                }
                Op::SliceRows(a, start) => {
                    let src = &nodes[*a].value;
                    let inner: usize = src.shape()[1..].iter().product();
                    let mut d = vec![0.0; src.numel()];
                    d[start * inner..start * inner + g.numel()].copy_from_slice(g.data());
                    acc(*a, Tensor::new(src.shape().to_vec(), d)?);
                }
                Op::ConcatRows(ids) => {
                    let mut offset = 0;
                    for &i in ids {
                        let shape = nodes[i].value.shape().to_vec();
                        let len = nodes[i].value.numel();
                        acc(
                            i,
                            Tensor::new(shape, g.data()[offset..offset + len].to_vec())?,
                        );
                        offset += len;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (m, n) = nodes[*a].value.dims2()?;
                    let (_, w) = g.dims2()?;
                    let mut d = vec![0.0; m * n];
                    for r in 0..m {
                        d[r * n + start..r * n + start + w]
                            .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                    acc(*a, Tensor::new(vec![m, n], d)?);
                }
                Op::PairwiseSqDist(a) => {
                    let x = &nodes[*a].value;
                    let (b, d) = x.dims2()?;
                    let mut dx = vec![0.0; b * d];
                    for i in 0..b {
                        for j in 0..b {
                            let w = 2.0 * (g.data()[i * b + j] + g.data()[j * b + i]);
                            if i == j || w == 0.0 {
                                continue;
                            }
                            for k in 0..d {
                                dx[i * d + k] += w * (x.data()[i * d + k] - x.data()[j * d + k]);
                            }
                        }
                    }
                    acc(*a, Tensor::new(vec![b, d], dx)?);
                }
                Op::ConcatCols(ids) => {
                    let (m, total) = g.dims2()?;
                    let mut offset = 0;
                    for &i in ids {
                        let (_, w) = nodes[i].value.dims2()?;
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(
                                &g.data()[r * total + offset..r * total + offset + w],
                            );
                        }
                        acc(i, Tensor::new(vec![m, w], d)?);
                        offset += w;
                    }
                }
            }
        }

        Ok(Gradients {
            grads,
            params: self.tape.params.borrow().clone(),
            visited,
        })
    }
}

/// Gradients of one scalar with respect to every tracked leaf it reaches.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, usize>,
    visited: usize,
}

impl Gradients {
    /// `None` when `var` is not a tracked leaf or does not reach the output.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn param(&self, p: &Parameter) -> Option<&Tensor> {
        self.params
            .get(&p.id())
            .and_then(|&id| self.grads.get(id))
            .and_then(Option::as_ref)
    }

    /// Number of nodes the reverse sweep processed.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::new();
        let w = tape.var(Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap());
        let g = w.sum().backward().unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn squared_norm_gives_twice_w() {
        let tape = Tape::new();
        let w = tape.var(Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap());
        let g = w.square().sum().backward().unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[2.0, -4.0, 10.0]);
    }

    #[test]
    fn diamond_visits_each_node_once() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(3.0));
        let a = x.scale(2.0);
        let b = x.exp();
        let c = a.mul(b).unwrap();
        let loss = c.add(a).unwrap();
        let g = loss.backward().unwrap();
        assert_eq!(g.visited(), tape.len());
        // d/dx (2x e^x + 2x) = 2e^x + 2x e^x + 2
        let expected = 2.0 * 3f64.exp() + 6.0 * 3f64.exp() + 2.0;
        assert!((g.get(x).unwrap().data()[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let w = tape.var(Tensor::zeros(&[2]));
        assert!(matches!(w.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::ones(&[2]));
        let w = tape.var(Tensor::ones(&[2]));
        let g = c.mul(w).unwrap().sum().backward().unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(w).is_some());
    }

    #[test]
    fn param_nodes_are_shared() {
        let tape = Tape::new();
        let p = Parameter::new(Tensor::scalar(2.0));
        let a = tape.param(&p);
        let b = tape.param(&p);
        assert_eq!(a.id(), b.id());
        let g = a.mul(b).unwrap().backward().unwrap();
        assert_eq!(g.param(&p).unwrap().data(), &[4.0]);
    }

    #[test]
    fn shape_errors() {
        let tape = Tape::new();
        let a = tape.var(Tensor::zeros(&[2, 3]));
        let b = tape.var(Tensor::zeros(&[2, 3]));
        assert!(matches!(a.matmul(b), Err(Error::Shape(_))));
        assert!(a.slice_cols(2, 4).is_err());
        assert!(a.add_row(tape.var(Tensor::zeros(&[2]))).is_err());
    }

    #[test]
    fn masked_softmax_row_is_zero_outside() {
        let tape = Tape::new();
        let x = tape.var(Tensor::new(vec![1, 3], vec![0.5, f64::NEG_INFINITY, 1.0]).unwrap());
        let y = x.softmax_rows().unwrap();
        assert_eq!(y.value().data()[1], 0.0);
        let g = y.slice_cols(0, 1).unwrap().sum().backward().unwrap();
        assert_eq!(g.get(x).unwrap().data()[1], 0.0);
    }
}
