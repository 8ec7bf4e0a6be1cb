//! Hierarchy-aware attention and the pre-norm encoder stack built on it.
//!
//! Each layer derives fresh merge affinities from its (normalized) input,
//! folds them into the running affinities so merged constituents are never
//! split, rebuilds the mask `C`, and runs
//! `(C ⊙ softmax(QKᵀ/√d_h)) V` for every head with the same `C`. Masked rows
//! are not renormalized.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::hierarchy::{self, HierarchyMask, HierarchyState, Lattice};
use crate::params::{normal, Bound, FeedForward, LayerNorm, ParamId, ParamStore, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Mask induced from learned affinities.
    #[default]
    Hierarchy,
    /// `C ≡ 1`: plain multi-head attention.
    AllOnes,
}

#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub head_dim: usize,
    pub ln_attn: LayerNorm,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
    /// Neighbor projections `W'_Q`, `W'_K`.
    pub neighbor_q: ParamId,
    pub neighbor_k: ParamId,
    pub sigma_t: f64,
}

impl EncoderLayerParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        width: usize,
        heads: usize,
        ffn_hidden: usize,
        sigma_t: f64,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::contract(format!(
                "width {width} is not divisible into {heads} heads"
            )));
        }
        if !(sigma_t > 0.0) {
            return Err(Error::contract("sigma_t must be positive"));
        }
        let std = 1.0 / (width as f64).sqrt();
        let mut mat = |store: &mut ParamStore, suffix: &str| {
            store.add(format!("{name}.{suffix}"), normal(rng, &[width, width], std))
        };
        let wq = mat(store, "wq");
        let wk = mat(store, "wk");
        let wv = mat(store, "wv");
        let wo = mat(store, "wo");
        let neighbor_q = mat(store, "neighbor_q");
        let neighbor_k = mat(store, "neighbor_k");
        let ln_attn = LayerNorm::init(store, &format!("{name}.ln_attn"), width);
        let ln_ffn = LayerNorm::init(store, &format!("{name}.ln_ffn"), width);
        let ffn = FeedForward::init(store, rng, &format!("{name}.ffn"), width, ffn_hidden);
        Ok(Self {
            wq,
            wk,
            wv,
            wo,
            heads,
            head_dim: width / heads,
            ln_attn,
            ln_ffn,
            ffn,
            neighbor_q,
            neighbor_k,
            sigma_t,
        })
    }
}

/// Single-head `(C ⊙ softmax(QKᵀ/√d_h)) V` on the tape.
pub fn hierarchy_attention_var(tape: &mut Tape, q: Var, k: Var, v: Var, mask: Var) -> Result<Var> {
    let (len, d_h) = tape.value(q).dims2("hierarchy_attention")?;
    let (mlen, mlen2) = tape.value(mask).dims2("hierarchy_attention")?;
    let klen = tape.value(k).rows();
    if mlen != len || mlen2 != klen {
        return Err(Error::shape(
            "hierarchy_attention",
            tape.value(mask).shape(),
            &[len, klen],
        ));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d_h as f64).sqrt());
    let attn = tape.softmax_rows(scores)?;
    let masked = tape.mul(attn, mask)?;
    tape.matmul(masked, v)
}

pub fn hierarchy_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &HierarchyMask) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (qv, kv, vv, cv) = (
        tape.leaf(q.clone()),
        tape.leaf(k.clone()),
        tape.leaf(v.clone()),
        tape.leaf(mask.c.clone()),
    );
    let out = hierarchy_attention_var(&mut tape, qv, kv, vv, cv)?;
    Ok(tape.value(out).clone())
}

/// Tape handles produced by one encoder layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub output: Var,
    /// `[E, 1]`; `None` when the lattice has no edges.
    pub affinities: Option<Var>,
    pub mask: Var,
}

pub fn encoder_layer_var(
    tape: &mut Tape,
    p: &Bound,
    layer: &EncoderLayerParams,
    x: Var,
    lattice: &Lattice,
    prev: Option<Var>,
    mode: MaskMode,
) -> Result<LayerVars> {
    let (len, width) = tape.value(x).dims2("encoder_layer")?;
    if len != lattice.len() {
        return Err(Error::shape("encoder_layer", &[len, width], &[lattice.rows, lattice.cols]));
    }
    let z = layer.ln_attn.forward(tape, p, x)?;

    let (affinities, mask) = if lattice.num_edges() == 0 {
        (None, tape.leaf(Tensor::ones(&[len, len])))
    } else {
        let hat = hierarchy::affinity_var(
            tape,
            z,
            p.var(layer.neighbor_q),
            p.var(layer.neighbor_k),
            layer.sigma_t,
            lattice,
        )?;
        let a = match prev {
            Some(prev) => hierarchy::affinity_update_var(tape, prev, hat)?,
            None => hat,
        };
        let mask = match mode {
            MaskMode::Hierarchy => hierarchy::mask_var(tape, a, lattice)?,
            MaskMode::AllOnes => tape.leaf(Tensor::ones(&[len, len])),
        };
        (Some(a), mask)
    };

    let q = tape.matmul(z, p.var(layer.wq))?;
    let k = tape.matmul(z, p.var(layer.wk))?;
    let v = tape.matmul(z, p.var(layer.wv))?;
    let mut heads = Vec::with_capacity(layer.heads);
    for h in 0..layer.heads {
        let start = h * layer.head_dim;
        let qh = tape.slice_cols(q, start, layer.head_dim)?;
        let kh = tape.slice_cols(k, start, layer.head_dim)?;
        let vh = tape.slice_cols(v, start, layer.head_dim)?;
        heads.push(hierarchy_attention_var(tape, qh, kh, vh, mask)?);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let attn_out = tape.matmul(joined, p.var(layer.wo))?;
    let x1 = tape.add(x, attn_out)?;

    let z2 = layer.ln_ffn.forward(tape, p, x1)?;
    let ff = layer.ffn.forward(tape, p, z2)?;
    let output = tape.add(x1, ff)?;
    Ok(LayerVars {
        output,
        affinities,
        mask,
    })
}

#[derive(Clone, Debug)]
pub struct EncoderTrace {
    pub output: Var,
    pub layers: Vec<LayerVars>,
}

/// Runs the layer stack, starting from all-zero affinities.
pub fn encoder_forward_var(
    tape: &mut Tape,
    p: &Bound,
    layers: &[EncoderLayerParams],
    x: Var,
    lattice: &Lattice,
    mode: MaskMode,
) -> Result<EncoderTrace> {
    let mut h = x;
    let mut prev = None;
    let mut trace = Vec::with_capacity(layers.len());
    for layer in layers {
        let out = encoder_layer_var(tape, p, layer, h, lattice, prev, mode)?;
        h = out.output;
        prev = out.affinities;
        trace.push(out);
    }
    Ok(EncoderTrace { output: h, layers: trace })
}

/// Plain-tensor result of [`encoder_forward`].
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub y: Tensor,
    /// Affinities after the last layer (empty with zero layers).
    pub state: HierarchyState,
    /// Affinities after each layer.
    pub layer_affinities: Vec<Vec<f64>>,
    pub masks: Vec<HierarchyMask>,
}

pub fn encoder_forward(
    store: &ParamStore,
    layers: &[EncoderLayerParams],
    x: &Tensor,
    lattice: &Lattice,
    mode: MaskMode,
) -> Result<EncoderOutput> {
    if x.rows() == 0 {
        return Err(Error::contract("encoder input must have at least one row"));
    }
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let trace = encoder_forward_var(&mut tape, &p, layers, xv, lattice, mode)?;
    let layer_affinities: Vec<Vec<f64>> = trace
        .layers
        .iter()
        .map(|l| l.affinities.map(|a| tape.value(a).data().to_vec()).unwrap_or_default())
        .collect();
    let masks = trace
        .layers
        .iter()
        .map(|l| HierarchyMask {
            c: tape.value(l.mask).clone(),
        })
        .collect();
    let state = HierarchyState {
        affinities: layer_affinities.last().cloned().unwrap_or_default(),
        layer_index: layers.len(),
        sigma_t: layers.last().map(|l| l.sigma_t).unwrap_or(1.0),
    };
    Ok(EncoderOutput {
        y: tape.value(trace.output).clone(),
        state,
        layer_affinities,
        masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rand_tensor(rng: &mut Rng, r: usize, c: usize) -> Tensor {
        normal(rng, &[r, c], 1.0)
    }

    #[test]
    fn all_ones_mask_is_plain_attention() {
        let mut rng = Rng::seed_from_u64(1);
        let (q, k, v) = (
            rand_tensor(&mut rng, 5, 3),
            rand_tensor(&mut rng, 5, 3),
            rand_tensor(&mut rng, 5, 2),
        );
        let mask = HierarchyMask { c: Tensor::ones(&[5, 5]) };
        let got = hierarchy_attention(&q, &k, &v, &mask).unwrap();
        let plain = crate::flow::softmax_attention(&q, &k, &v).unwrap();
        assert!(got.max_abs_diff(&plain) < 1e-12);
    }

    #[test]
    fn identity_mask_keeps_diagonal_weight() {
        let mut rng = Rng::seed_from_u64(2);
        let (q, k, v) = (
            rand_tensor(&mut rng, 4, 3),
            rand_tensor(&mut rng, 4, 3),
            rand_tensor(&mut rng, 4, 2),
        );
        let mask = HierarchyMask { c: Tensor::eye(4) };
        let got = hierarchy_attention(&q, &k, &v, &mask).unwrap();
        let weights = q.matmul(&k.transpose().unwrap()).unwrap().scale(1.0 / 3f64.sqrt()).softmax_rows().unwrap();
        for i in 0..4 {
            for j in 0..2 {
                assert!((got.at(i, j) - weights.at(i, i) * v.at(i, j)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_token_returns_value() {
        let q = Tensor::from_rows(&[[0.3, -2.0]]).unwrap();
        let v = Tensor::from_rows(&[[4.0, 5.0, 6.0]]).unwrap();
        let mask = HierarchyMask { c: Tensor::ones(&[1, 1]) };
        assert_eq!(hierarchy_attention(&q, &q, &v, &mask).unwrap(), v);
    }

    #[test]
    fn mask_length_mismatch() {
        let q = Tensor::zeros(&[3, 2]);
        let mask = HierarchyMask { c: Tensor::ones(&[2, 2]) };
        assert!(matches!(hierarchy_attention(&q, &q, &q, &mask), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_layers_is_identity() {
        let store = ParamStore::new();
        let x = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let out = encoder_forward(&store, &[], &x, &Lattice::sequence(2), MaskMode::Hierarchy).unwrap();
        assert_eq!(out.y, x);
        assert!(out.state.affinities.is_empty());
    }

    #[test]
    fn affinities_never_decrease() {
        let mut rng = Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let layers: Vec<_> = (0..4)
            .map(|l| EncoderLayerParams::init(&mut store, &mut rng, &format!("l{l}"), 8, 2, 16, 1.0).unwrap())
            .collect();
        let x = rand_tensor(&mut rng, 9, 8);
        let out = encoder_forward(&store, &layers, &x, &Lattice::sequence(9), MaskMode::Hierarchy).unwrap();
        for pair in out.layer_affinities.windows(2) {
            for (a, b) in pair[0].iter().zip(&pair[1]) {
                assert!(b >= a && *b <= 1.0);
            }
        }
        assert_eq!(out.state.layer_index, 4);
    }

    #[test]
    fn identical_tokens_split_evenly() {
        let mut rng = Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let layer = EncoderLayerParams::init(&mut store, &mut rng, "l", 4, 1, 8, 1.0).unwrap();
        let x = Tensor::from_fn(5, 4, |_, j| j as f64 * 0.3 - 0.2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.leaf(x);
        let lat = Lattice::sequence(5);
        let z = layer.ln_attn.forward(&mut tape, &p, xv).unwrap();
        let hat = hierarchy::affinity_var(&mut tape, z, p.var(layer.neighbor_q), p.var(layer.neighbor_k), 1.0, &lat).unwrap();
        // interior edges: both endpoints split 0.5/0.5 -> â = 0.5; boundary edges: √(1 · 0.5)
        let a = tape.value(hat).data();
        assert!((a[1] - 0.5).abs() < 1e-12 && (a[2] - 0.5).abs() < 1e-12);
        assert!((a[0] - 0.5f64.sqrt()).abs() < 1e-12);
    }
}
