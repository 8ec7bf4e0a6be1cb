//! Reverse-mode differentiation over an explicit operation tape.
//!
//! Every operation appends a node holding its forward value and the indices of
//! its inputs. Nodes are only ever appended, so inputs always precede their
//! consumers and a reverse sweep over the node list is a valid topological
//! order for the backward pass.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{broadcast, sigmoid, Expand, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// For each ordered pair `(p, q)` of an `n × n` output, the list of factor
/// indices whose product forms entry `[p, q]`. An empty list yields 1.
#[derive(Clone, Debug, PartialEq)]
pub struct PathTable {
    pub n: usize,
    pub factors: usize,
    pub paths: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Expand, Expand),
    Sub(Var, Var, Expand, Expand),
    Mul(Var, Var, Expand, Expand),
    Div(Var, Var, Expand, Expand),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Softplus(Var),
    MatMul(Var, Var),
    Transpose(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Reshape(Var),
    GatherRows(Var, Rc<[usize]>),
    ScatterAddRows(Var, Rc<[usize]>),
    SegmentSoftmax(Var, Rc<[usize]>),
    SegmentLogSoftmax(Var, Rc<[usize]>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    PathProduct(Var, Rc<PathTable>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation. One tape belongs to one forward/backward pass.
#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v`; zeros of the matching shape when unreachable.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn reduce_to(g: &Tensor, how: Expand, target: &[usize]) -> Tensor {
    match how {
        Expand::Same => g.clone(),
        Expand::Scalar => Tensor::from_parts(target.to_vec(), vec![g.sum()]),
        Expand::Col => {
            let s = g.sum_rows().expect("col reduction on rank-2 grad");
            Tensor::from_parts(target.to_vec(), s.into_data())
        }
        Expand::Row => {
            let s = g.sum_cols().expect("row reduction on rank-2 grad");
            Tensor::from_parts(target.to_vec(), s.into_data())
        }
    }
}

/// Values of `t` expanded to `shape` according to `how`.
fn expand(t: &Tensor, how: Expand, shape: &[usize]) -> Tensor {
    if how == Expand::Same {
        return t.clone();
    }
    Tensor::zeros(shape)
        .binary(t, "expand", |_, b| b)
        .expect("expansion shapes were validated at record time")
}

fn validate_index(op: &'static str, idx: &[usize], bound: usize) -> Result<()> {
    if let Some(&bad) = idx.iter().find(|&&i| i >= bound) {
        return Err(Error::shape(op, &[bad], &[bound]));
    }
    Ok(())
}

fn segment_count(segments: &[usize]) -> usize {
    segments.iter().map(|&s| s + 1).max().unwrap_or(0)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(Var, Var, Expand, Expand) -> Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (_, ea, eb) = broadcast(name, va.shape(), vb.shape())?;
        let out = va.binary(vb, name, f)?;
        Ok(self.push(out, op(a, b, ea, eb)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::Offset(a))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.offset(n, 1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).exp();
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).ln()?;
        Ok(self.push(out, Op::Log(a)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).sqrt()?;
        Ok(self.push(out, Op::Sqrt(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).sigmoid();
        self.push(out, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).softplus();
        self.push(out, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `[m, n] -> [m, 1]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).sum_rows()?;
        Ok(self.push(out, Op::SumRows(a)))
    }

    /// `[m, n] -> [1, n]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).sum_cols()?;
        Ok(self.push(out, Op::SumCols(a)))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).cols() as f64;
        let s = self.sum_rows(a)?;
        Ok(self.scale(s, 1.0 / n))
    }

    pub fn mean_cols(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a).rows() as f64;
        let s = self.sum_cols(a)?;
        Ok(self.scale(s, 1.0 / m))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows()?;
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).log_softmax_rows()?;
        Ok(self.push(out, Op::LogSoftmaxRows(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Rows of `a` selected by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Result<Var> {
        let src = self.value(a);
        let (m, n) = src.dims2("gather_rows")?;
        validate_index("gather_rows", &idx, m)?;
        if idx.is_empty() {
            return Err(Error::contract("gather_rows with an empty index"));
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            data.extend_from_slice(src.row_slice(i));
        }
        let out = Tensor::from_parts(vec![idx.len(), n], data);
        Ok(self.push(out, Op::GatherRows(a, idx)))
    }

    /// Row `e` of `a` is added into output row `idx[e]`; output has `rows` rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Rc<[usize]>, rows: usize) -> Result<Var> {
        let src = self.value(a);
        let (m, n) = src.dims2("scatter_add_rows")?;
        if idx.len() != m {
            return Err(Error::shape("scatter_add_rows", &[m, n], &[idx.len()]));
        }
        validate_index("scatter_add_rows", &idx, rows)?;
        let mut data = vec![0.0; rows * n];
        for (e, &r) in idx.iter().enumerate() {
            for (o, v) in data[r * n..(r + 1) * n].iter_mut().zip(src.row_slice(e)) {
                *o += v;
            }
        }
        let out = Tensor::from_parts(vec![rows, n], data);
        Ok(self.push(out, Op::ScatterAddRows(a, idx)))
    }

    fn segment_forward(&self, a: Var, segments: &[usize], log: bool) -> Result<Tensor> {
        let x = self.value(a);
        let (m, n) = x.dims2("segment_softmax")?;
        if n != 1 || segments.len() != m {
            return Err(Error::shape("segment_softmax", &[m, n], &[segments.len(), 1]));
        }
        let k = segment_count(segments);
        let mut max = vec![f64::NEG_INFINITY; k];
        for (&s, &v) in segments.iter().zip(x.data()) {
            max[s] = max[s].max(v);
        }
        let mut total = vec![0.0; k];
        for (&s, &v) in segments.iter().zip(x.data()) {
            total[s] += (v - max[s]).exp();
        }
        let data = segments
            .iter()
            .zip(x.data())
            .map(|(&s, &v)| {
                if log {
                    v - max[s] - total[s].ln()
                } else {
                    (v - max[s]).exp() / total[s]
                }
            })
            .collect();
        Ok(Tensor::from_parts(vec![m, 1], data))
    }

    /// Softmax of a `[m, 1]` column within groups given by `segments[e]`.
    pub fn segment_softmax(&mut self, a: Var, segments: Rc<[usize]>) -> Result<Var> {
        let out = self.segment_forward(a, &segments, false)?;
        Ok(self.push(out, Op::SegmentSoftmax(a, segments)))
    }

    pub fn segment_log_softmax(&mut self, a: Var, segments: Rc<[usize]>) -> Result<Var> {
        let out = self.segment_forward(a, &segments, true)?;
        Ok(self.push(out, Op::SegmentLogSoftmax(a, segments)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(a);
        let (m, n) = src.dims2("slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", &[m, n], &[start, len]));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src.row_slice(i)[start..start + len]);
        }
        let out = Tensor::from_parts(vec![m, len], data);
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let m = self.value(*first).dims2("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2("concat_cols")?;
            if pm != m {
                return Err(Error::shape("concat_cols", &[m], &[pm]));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let out = Tensor::from_parts(vec![m, n], data);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let n = self.value(*first).dims2("concat_rows")?.1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.value(p).dims2("concat_rows")?;
            if pn != n {
                return Err(Error::shape("concat_rows", &[n], &[pn]));
            }
            data.extend_from_slice(self.value(p).data());
            m += pm;
        }
        let out = Tensor::from_parts(vec![m, n], data);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// `out[p, q] = Π_{k ∈ paths[p·n + q]} a[k]` over the flattened factors of `a`.
    pub fn path_product(&mut self, a: Var, table: Rc<PathTable>) -> Result<Var> {
        let src = self.value(a);
        if src.numel() != table.factors {
            return Err(Error::shape("path_product", src.shape(), &[table.factors]));
        }
        let f = src.data();
        let data = table
            .paths
            .iter()
            .map(|path| path.iter().map(|&k| f[k]).product())
            .collect();
        let out = Tensor::from_parts(vec![table.n, table.n], data);
        Ok(self.push(out, Op::PathProduct(a, table)))
    }

    /// Reverse sweep from a scalar `loss`. The tape is not modified, so
    /// repeated calls give identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => {
                *existing = existing.add(&t).expect("gradient shapes agree");
            }
            slot @ None => *slot = Some(t),
        };
        let val = |v: Var| &self.nodes[v.0].value;

        match op {
            Op::Leaf => {}
            Op::Add(a, b, ea, eb) => {
                acc(*a, reduce_to(g, *ea, val(*a).shape()));
                acc(*b, reduce_to(g, *eb, val(*b).shape()));
            }
            Op::Sub(a, b, ea, eb) => {
                acc(*a, reduce_to(g, *ea, val(*a).shape()));
                acc(*b, reduce_to(&g.scale(-1.0), *eb, val(*b).shape()));
            }
            Op::Mul(a, b, ea, eb) => {
                let xa = expand(val(*a), *ea, g.shape());
                let xb = expand(val(*b), *eb, g.shape());
                acc(*a, reduce_to(&g.mul(&xb).unwrap(), *ea, val(*a).shape()));
                acc(*b, reduce_to(&g.mul(&xa).unwrap(), *eb, val(*b).shape()));
            }
            Op::Div(a, b, ea, eb) => {
                let xb = expand(val(*b), *eb, g.shape());
                let ga = g.binary(&xb, "div", |gv, bv| gv / bv).unwrap();
                // d(a/b)/db = -(a/b)/b = -out/b
                let gb = g
                    .mul(out)
                    .unwrap()
                    .binary(&xb, "div", |v, bv| -v / bv)
                    .unwrap();
                acc(*a, reduce_to(&ga, *ea, val(*a).shape()));
                acc(*b, reduce_to(&gb, *eb, val(*b).shape()));
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::Offset(a) => acc(*a, g.clone()),
            Op::Exp(a) => acc(*a, g.mul(out).unwrap()),
            Op::Log(a) => acc(*a, g.binary(val(*a), "log", |gv, x| gv / x).unwrap()),
            Op::Sqrt(a) => acc(*a, g.binary(out, "sqrt", |gv, y| 0.5 * gv / y).unwrap()),
            Op::Sigmoid(a) => acc(*a, g.binary(out, "sigmoid", |gv, y| gv * y * (1.0 - y)).unwrap()),
            Op::Softplus(a) => {
                acc(*a, g.binary(val(*a), "softplus", |gv, x| gv * sigmoid(x)).unwrap())
            }
            Op::MatMul(a, b) => {
                let ga = g.matmul(&val(*b).transpose().unwrap()).unwrap();
                let gb = val(*a).transpose().unwrap().matmul(g).unwrap();
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Transpose(a) => acc(*a, g.transpose().unwrap()),
            Op::SumAll(a) => {
                let gv = g.data()[0];
                acc(*a, Tensor::full(val(*a).shape(), gv));
            }
            Op::SumRows(a) | Op::SumCols(a) => {
                let shape = val(*a).shape().to_vec();
                acc(*a, Tensor::zeros(&shape).add(g).unwrap());
            }
            Op::SoftmaxRows(a) => {
                let gy = g.mul(out).unwrap();
                let s = gy.sum_rows().unwrap();
                acc(*a, out.mul(&g.sub(&s).unwrap()).unwrap());
            }
            Op::LogSoftmaxRows(a) => {
                let s = g.sum_rows().unwrap();
                let sm = out.exp();
                acc(*a, g.sub(&sm.mul(&s).unwrap()).unwrap());
            }
            Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape()).unwrap()),
            Op::GatherRows(a, idx) => {
                let (m, n) = (val(*a).rows(), val(*a).cols());
                let mut data = vec![0.0; m * n];
                for (e, &r) in idx.iter().enumerate() {
                    for (o, v) in data[r * n..(r + 1) * n].iter_mut().zip(g.row_slice(e)) {
                        *o += v;
                    }
                }
                acc(*a, Tensor::from_parts(vec![m, n], data));
            }
            Op::ScatterAddRows(a, idx) => {
                let n = g.cols();
                let mut data = Vec::with_capacity(idx.len() * n);
                for &r in idx.iter() {
                    data.extend_from_slice(g.row_slice(r));
                }
                acc(*a, Tensor::from_parts(vec![idx.len(), n], data));
            }
            Op::SegmentSoftmax(a, seg) => {
                let k = segment_count(seg);
                let mut dot = vec![0.0; k];
                for ((&s, gv), y) in seg.iter().zip(g.data()).zip(out.data()) {
                    dot[s] += gv * y;
                }
                let data = seg
                    .iter()
                    .zip(g.data())
                    .zip(out.data())
                    .map(|((&s, gv), y)| y * (gv - dot[s]))
                    .collect();
                acc(*a, Tensor::from_parts(out.shape().to_vec(), data));
            }
            Op::SegmentLogSoftmax(a, seg) => {
                let k = segment_count(seg);
                let mut total = vec![0.0; k];
                for (&s, gv) in seg.iter().zip(g.data()) {
                    total[s] += gv;
                }
                let data = seg
                    .iter()
                    .zip(g.data())
                    .zip(out.data())
                    .map(|((&s, gv), y)| gv - y.exp() * total[s])
                    .collect();
                acc(*a, Tensor::from_parts(out.shape().to_vec(), data));
            }
            Op::SliceCols(a, start) => {
                let (m, n) = (val(*a).rows(), val(*a).cols());
                let len = g.cols();
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    data[i * n + start..i * n + start + len].copy_from_slice(g.row_slice(i));
                }
                acc(*a, Tensor::from_parts(vec![m, n], data));
            }
            Op::ConcatCols(parts) => {
                let m = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut data = Vec::with_capacity(m * w);
                    for i in 0..m {
                        data.extend_from_slice(&g.row_slice(i)[offset..offset + w]);
                    }
                    acc(p, Tensor::from_parts(vec![m, w], data));
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    let part = g.data()[offset..offset + len].to_vec();
                    acc(p, Tensor::from_parts(val(p).shape().to_vec(), part));
                    offset += len;
                }
            }
            Op::PathProduct(a, table) => {
                let f = val(*a).data();
                let mut data = vec![0.0; f.len()];
                let mut prefix = Vec::new();
                for (path, &gv) in table.paths.iter().zip(g.data()) {
                    if path.is_empty() || gv == 0.0 {
                        continue;
                    }
                    // prefix[t] = product of factors before position t
                    prefix.clear();
                    let mut p = 1.0;
                    for &k in path {
                        prefix.push(p);
                        p *= f[k];
                    }
                    let mut suffix = 1.0;
                    for (t, &k) in path.iter().enumerate().rev() {
                        data[k] += gv * prefix[t] * suffix;
                        suffix *= f[k];
                    }
                }
                acc(*a, Tensor::from_parts(val(*a).shape().to_vec(), data));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[[1.0, -2.0], [3.0, 0.5]]).unwrap());
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x), Tensor::ones(&[2, 2]));
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3, 2]));
        let s = tape.sigmoid(x);
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(x).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_is_repeatable() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[[0.3, -0.7, 1.1]]).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        let w = tape.leaf(Tensor::row(vec![1.0, 2.0, -1.0]));
        let z = tape.mul(y, w).unwrap();
        let loss = tape.sum(z);
        let g1 = tape.backward(loss).unwrap().wrt(x);
        let g2 = tape.backward(loss).unwrap().wrt(x);
        assert_eq!(g1, g2);
    }

    #[test]
    fn unreachable_leaf_gets_zero_adjoint() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2, 1]));
        let unused = tape.leaf(Tensor::ones(&[1, 3]));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused), Tensor::zeros(&[1, 3]));
    }

    #[test]
    fn segment_softmax_groups_independently() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::column(vec![0.0, 0.0, 5.0, 1.0, 1.0]));
        let seg: Rc<[usize]> = vec![0, 0, 1, 2, 2].into();
        let y = tape.segment_softmax(x, seg).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 1.0, 0.5, 0.5]);
    }

    #[test]
    fn path_product_with_empty_path_is_one() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::column(vec![0.5, 0.8]));
        let table = Rc::new(PathTable {
            n: 2,
            factors: 2,
            paths: vec![vec![], vec![0, 1], vec![0, 1], vec![]],
        });
        let c = tape.path_product(a, table).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 0.4, 0.4, 1.0]);
    }
}
