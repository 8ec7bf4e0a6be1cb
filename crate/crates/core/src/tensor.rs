//! Dense row-major `f64` tensors.
//!
//! Most operations here are rank-2. Vectors that take part in matrix
//! arithmetic are carried as `[n, 1]` columns or `[1, n]` rows; scalars have
//! the empty shape `[]`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

/// How one operand of a binary op is expanded to the output shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Expand {
    Same,
    Scalar,
    /// `[m, 1]` against `[m, n]`.
    Col,
    /// `[1, n]` against `[m, n]`.
    Row,
}

impl Expand {
    #[inline]
    fn index(self, i: usize, j: usize, flat: usize) -> usize {
        match self {
            Expand::Same => flat,
            Expand::Scalar => 0,
            Expand::Col => i,
            Expand::Row => j,
        }
    }
}

pub(crate) fn broadcast(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<(Vec<usize>, Expand, Expand)> {
    if a == b {
        return Ok((a.to_vec(), Expand::Same, Expand::Same));
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if nb == 1 {
        return Ok((a.to_vec(), Expand::Same, Expand::Scalar));
    }
    if na == 1 {
        return Ok((b.to_vec(), Expand::Scalar, Expand::Same));
    }
    if a.len() == 2 && b.len() == 2 {
        if b[0] == a[0] && b[1] == 1 {
            return Ok((a.to_vec(), Expand::Same, Expand::Col));
        }
        if b[0] == 1 && b[1] == a[1] {
            return Ok((a.to_vec(), Expand::Same, Expand::Row));
        }
        if a[0] == b[0] && a[1] == 1 {
            return Ok((b.to_vec(), Expand::Col, Expand::Same));
        }
        if a[0] == 1 && a[1] == b[1] {
            return Ok((b.to_vec(), Expand::Row, Expand::Same));
        }
    }
    Err(Error::shape(op, a, b))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for shapes that are known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Rank-1 tensor.
    pub fn vector(values: Vec<f64>) -> Self {
        Self::from_parts(vec![values.len()], values)
    }

    /// `[n, 1]` column.
    pub fn column(values: Vec<f64>) -> Self {
        Self::from_parts(vec![values.len(), 1], values)
    }

    /// `[1, n]` row.
    pub fn row(values: Vec<f64>) -> Self {
        Self::from_parts(vec![1, values.len()], values)
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let m = rows.len();
        if m == 0 {
            return Err(Error::contract("from_rows needs at least one row"));
        }
        let n = rows[0].as_ref().len();
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            let r = r.as_ref();
            if r.len() != n {
                return Err(Error::shape("from_rows", &[n], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![m, n], data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_parts(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", &self.shape, &[]));
        }
        Ok(self.data[0])
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            other => Err(Error::shape(op, other, &[0, 0])),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|i| self.row_slice(i).to_vec()).collect()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn binary(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (shape, ea, eb) = broadcast(op, &self.shape, &other.shape)?;
        if ea == Expand::Same && eb == Expand::Same {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Self::from_parts(shape, data));
        }
        let cols = if shape.len() == 2 { shape[1] } else { 1 };
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for flat in 0..n {
            let (i, j) = (flat / cols, flat % cols);
            data.push(f(
                self.data[ea.index(i, j, flat)],
                other.data[eb.index(i, j, flat)],
            ));
        }
        Ok(Self::from_parts(shape, data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        if other.data.iter().any(|&v| v == 0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        self.binary(other, "div", |a, b| a / b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn exp(&self) -> Tensor {
        self.map(f64::exp)
    }

    pub fn ln(&self) -> Result<Tensor> {
        if let Some(v) = self.data.iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::domain("log", format!("non-positive input {v}")));
        }
        Ok(self.map(f64::ln))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(v) = self.data.iter().find(|&&v| v < 0.0 || v.is_nan()) {
            return Err(Error::domain("sqrt", format!("negative input {v}")));
        }
        Ok(self.map(f64::sqrt))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    pub fn softplus(&self) -> Tensor {
        self.map(softplus)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sum across columns: `[m, n] -> [m, 1]`.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("sum_rows")?;
        let data = (0..m).map(|i| self.data[i * n..(i + 1) * n].iter().sum()).collect();
        Ok(Self::from_parts(vec![m, 1], data))
    }

    /// Sum down rows: `[m, n] -> [1, n]`.
    pub fn sum_cols(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("sum_cols")?;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(&self.data[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        Ok(Self::from_parts(vec![1, n], out))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self::from_parts(vec![n, m], out))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b = &other.data[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(Self::from_parts(vec![m, n], out))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("softmax_rows")?;
        let mut out = self.data.clone();
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(Self::from_parts(vec![m, n], out))
    }

    pub fn log_softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("log_softmax_rows")?;
        let mut out = self.data.clone();
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        Ok(Self::from_parts(vec![m, n], out))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
