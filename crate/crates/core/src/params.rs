//! Named parameter storage and the small layers shared by the encoders.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Rng = rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    /// Replaces a parameter; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let old = &self.tensors[id.0];
        if old.shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", old.shape(), value.shape()));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t.clone())).collect())
    }
}

/// Tape leaves for a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps leaves already on a tape, one per store entry in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Gaussian tensor with the given standard deviation.
pub fn normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// `x W + b` with `W: [in, out]` and an optional `[1, out]` bias.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            normal(rng, &[input, output], 1.0 / (input as f64).sqrt()),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[1, output])));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => tape.add(y, p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[1, width])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[1, width])),
            eps: 1e-5,
        }
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// learned affine map.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mean = tape.mean_rows(x)?;
        let centered = tape.sub(x, mean)?;
        let sq = tape.square(centered)?;
        let var = tape.mean_rows(sq)?;
        let var = tape.offset(var, self.eps);
        let std = tape.sqrt(var)?;
        let normed = tape.div(centered, std)?;
        let scaled = tape.mul(normed, p.var(self.gamma))?;
        tape.add(scaled, p.var(self.beta))
    }
}

/// Two-layer MLP with a SiLU (`x · sigmoid(x)`) activation.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn init(store: &mut ParamStore, rng: &mut Rng, name: &str, width: usize, hidden: usize) -> Self {
        Self {
            up: Linear::init(store, rng, &format!("{name}.up"), width, hidden, true),
            down: Linear::init(store, rng, &format!("{name}.down"), hidden, width, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, p, x)?;
        let gate = tape.sigmoid(h);
        let act = tape.mul(h, gate)?;
        self.down.forward(tape, p, act)
    }
}
