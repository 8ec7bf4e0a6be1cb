//! Graph inputs: feature embedding with positional encodings, Laplacian
//! eigenvector encodings, and the graph-transformer layer that runs before
//! each branch's hierarchy encoder.
//!
//! The graph-transformer layer is a reconstruction. For an edge `s → t`
//!
//! ```text
//! w_st  = (q_t ⊙ k_s) / √d            (⊙ ê_st when edge features are present)
//! α_st  = softmax over the in-edges of t of Σ w_st
//! h'_t  = h_t + (Σ_s α_st v_s) W_o
//! e'_st = e_st + w_st W_eo
//! ```
//!
//! with pre-norm on every input and a feed-forward residual on both `h'`
//! and `e'`.

use std::rc::Rc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{normal, Bound, FeedForward, LayerNorm, Linear, ParamId, ParamStore, Rng};
use crate::tensor::Tensor;

/// One input graph for a branch.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch {
    /// `α`: `[N, d_n]`.
    pub node_feats: Tensor,
    /// `β`: `[E, d_e]`, one row per entry of `edges`.
    pub edge_feats: Option<Tensor>,
    /// Directed `(source, target)` pairs.
    pub edges: Vec<(usize, usize)>,
    /// `λ`: `[N, k]`.
    pub pe: Tensor,
    /// Patch layout for vision graphs; `None` means a 1D token sequence.
    pub grid: Option<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct GraphRecord {
    nodes: Vec<Vec<f64>>,
    edges: Vec<(usize, usize)>,
    edge_feats: Option<Vec<Vec<f64>>>,
    pe: Vec<Vec<f64>>,
    grid: Option<(usize, usize)>,
}

impl GraphBatch {
    pub fn num_nodes(&self) -> usize {
        self.node_feats.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, _) = self.node_feats.dims2("GraphBatch.nodes")?;
        if self.pe.rank() != 2 || self.pe.rows() != n {
            return Err(Error::shape("GraphBatch.pe", self.pe.shape(), &[n]));
        }
        if let Some(&(s, t)) = self.edges.iter().find(|&&(s, t)| s >= n || t >= n) {
            return Err(Error::contract(format!(
                "edge ({s}, {t}) out of range for {n} nodes"
            )));
        }
        if let Some(ef) = &self.edge_feats {
            if ef.rank() != 2 || ef.rows() != self.edges.len() {
                return Err(Error::shape(
                    "GraphBatch.edge_feats",
                    ef.shape(),
                    &[self.edges.len()],
                ));
            }
        }
        if let Some((r, c)) = self.grid {
            if r * c != n {
                return Err(Error::shape("GraphBatch.grid", &[r, c], &[n]));
            }
        }
        Ok(())
    }

    /// Source and target index arrays for gathers and scatters.
    pub fn edge_index(&self) -> EdgeIndex {
        EdgeIndex {
            src: self.edges.iter().map(|e| e.0).collect(),
            dst: self.edges.iter().map(|e| e.1).collect(),
            nodes: self.num_nodes(),
        }
    }

    pub fn to_json_line(&self) -> Result<String> {
        let rec = GraphRecord {
            nodes: self.node_feats.to_rows(),
            edges: self.edges.clone(),
            edge_feats: self.edge_feats.as_ref().map(Tensor::to_rows),
            pe: self.pe.to_rows(),
            grid: self.grid,
        };
        Ok(serde_json::to_string(&rec)?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let rec: GraphRecord = serde_json::from_str(line)?;
        let rows = |name: &str, r: &[Vec<f64>]| {
            Tensor::from_rows(r).map_err(|e| Error::Format(format!("{name}: {e}")))
        };
        let g = Self {
            node_feats: rows("nodes", &rec.nodes)?,
            edge_feats: rec.edge_feats.as_deref().map(|r| rows("edge_feats", r)).transpose()?,
            edges: rec.edges,
            pe: rows("pe", &rec.pe)?,
            grid: rec.grid,
        };
        g.validate()?;
        Ok(g)
    }
}

#[derive(Clone, Debug)]
pub struct EdgeIndex {
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
    pub nodes: usize,
}

impl EdgeIndex {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Edges of a `rows × cols` grid under 4-connectivity, both directions.
pub fn grid_edges(rows: usize, cols: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if c + 1 < cols {
                edges.push((i, i + 1));
                edges.push((i + 1, i));
            }
            if r + 1 < rows {
                edges.push((i, i + cols));
                edges.push((i + cols, i));
            }
        }
    }
    edges
}

/// All ordered pairs `(i, j)`, `i ≠ j`.
pub fn complete_edges(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect()
}

/// `k` eigenvectors of the symmetric-normalized Laplacian
/// `L = I − D^{-1/2} A D^{-1/2}` with the smallest nonzero eigenvalues. The
/// graph is treated as undirected; isolated nodes get `L_ii = 0`. When fewer
/// than `k` nonzero eigenvalues exist the remaining columns come from the null
/// space. Each column is flipped so its first nonzero entry is positive.
pub fn laplacian_pe(edges: &[(usize, usize)], n: usize, k: usize) -> Result<Tensor> {
    if k == 0 || k >= n {
        return Err(Error::contract(format!(
            "positional encoding size k={k} must satisfy 1 <= k < N={n}"
        )));
    }
    let mut adj = DMatrix::<f64>::zeros(n, n);
    for &(s, t) in edges {
        if s >= n || t >= n {
            return Err(Error::contract(format!("edge ({s}, {t}) out of range for {n} nodes")));
        }
        if s != t {
            adj[(s, t)] = 1.0;
            adj[(t, s)] = 1.0;
        }
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| {
            let d = adj.row(i).sum();
            if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }
        })
        .collect();
    let lap = DMatrix::from_fn(n, n, |i, j| {
        let diag = if i == j && inv_sqrt_deg[i] > 0.0 { 1.0 } else { 0.0 };
        diag - inv_sqrt_deg[i] * adj[(i, j)] * inv_sqrt_deg[j]
    });
    let eig = SymmetricEigen::new(lap);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (nonzero, zero): (Vec<usize>, Vec<usize>) =
        order.into_iter().partition(|&i| eig.eigenvalues[i] > 1e-9);
    let chosen: Vec<usize> = nonzero.into_iter().chain(zero).take(k).collect();

    let mut data = vec![0.0; n * k];
    for (col, &which) in chosen.iter().enumerate() {
        let v = eig.eigenvectors.column(which);
        let sign = v
            .iter()
            .find(|x| x.abs() > 1e-12)
            .map_or(1.0, |x| x.signum());
        for row in 0..n {
            data[row * k + col] = sign * v[row];
        }
    }
    Ok(Tensor::from_parts(vec![n, k], data))
}

/// Input projections `A⁰, a⁰` (nodes), `B⁰, b⁰` (edges) and `C⁰, c⁰`
/// (positional encodings), stored as `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct EmbedParams {
    pub node: Linear,
    pub edge: Option<Linear>,
    pub pe: Linear,
    pub node_in: usize,
    pub edge_in: Option<usize>,
    pub pe_in: usize,
}

impl EmbedParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        width: usize,
        node_in: usize,
        edge_in: Option<usize>,
        pe_in: usize,
    ) -> Self {
        Self {
            node: Linear::init(store, rng, &format!("{name}.node"), node_in, width, true),
            edge: edge_in.map(|d| Linear::init(store, rng, &format!("{name}.edge"), d, width, true)),
            pe: Linear::init(store, rng, &format!("{name}.pe"), pe_in, width, true),
            node_in,
            edge_in,
            pe_in,
        }
    }

    fn check(&self, g: &GraphBatch) -> Result<()> {
        g.validate()?;
        if g.node_feats.cols() != self.node_in {
            return Err(Error::shape("embed A0", g.node_feats.shape(), &[self.node_in]));
        }
        if g.pe.cols() != self.pe_in {
            return Err(Error::shape("embed C0", g.pe.shape(), &[self.pe_in]));
        }
        match (&g.edge_feats, self.edge_in) {
            (Some(ef), Some(d)) if ef.cols() != d => Err(Error::shape("embed B0", ef.shape(), &[d])),
            (Some(ef), None) => Err(Error::shape("embed B0", ef.shape(), &[0])),
            _ => Ok(()),
        }
    }
}

/// `h⁰ = (α A⁰ + a⁰) + (λ C⁰ + c⁰)` and `e⁰ = β B⁰ + b⁰`.
pub fn embed_inputs_var(
    tape: &mut Tape,
    p: &Bound,
    params: &EmbedParams,
    g: &GraphBatch,
) -> Result<(Var, Option<Var>)> {
    params.check(g)?;
    let alpha = tape.leaf(g.node_feats.clone());
    let lambda = tape.leaf(g.pe.clone());
    let h_hat = params.node.forward(tape, p, alpha)?;
    let pe = params.pe.forward(tape, p, lambda)?;
    let h0 = tape.add(h_hat, pe)?;
    let e0 = match (&g.edge_feats, params.edge) {
        (Some(beta), Some(lin)) if !g.edges.is_empty() => {
            let beta = tape.leaf(beta.clone());
            Some(lin.forward(tape, p, beta)?)
        }
        _ => None,
    };
    Ok((h0, e0))
}

pub fn embed_inputs(
    store: &ParamStore,
    params: &EmbedParams,
    g: &GraphBatch,
) -> Result<(Tensor, Option<Tensor>)> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let (h, e) = embed_inputs_var(&mut tape, &p, params, g)?;
    Ok((tape.value(h).clone(), e.map(|e| tape.value(e).clone())))
}

#[derive(Clone, Copy, Debug)]
pub struct EdgeBlock {
    pub ln: LayerNorm,
    pub we: ParamId,
    pub weo: ParamId,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Copy, Debug)]
pub struct GtLayerParams {
    pub ln: LayerNorm,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
    pub edge: Option<EdgeBlock>,
    pub width: usize,
}

impl GtLayerParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        width: usize,
        ffn_hidden: usize,
        with_edges: bool,
    ) -> Self {
        let std = 1.0 / (width as f64).sqrt();
        let mat = |store: &mut ParamStore, rng: &mut Rng, suffix: &str| {
            store.add(format!("{name}.{suffix}"), normal(rng, &[width, width], std))
        };
        let wq = mat(store, rng, "wq");
        let wk = mat(store, rng, "wk");
        let wv = mat(store, rng, "wv");
        let wo = mat(store, rng, "wo");
        let edge = if with_edges {
            Some(EdgeBlock {
                we: mat(store, rng, "edge.we"),
                weo: mat(store, rng, "edge.weo"),
                ln: LayerNorm::init(store, &format!("{name}.edge.ln"), width),
                ln_ffn: LayerNorm::init(store, &format!("{name}.edge.ln_ffn"), width),
                ffn: FeedForward::init(store, rng, &format!("{name}.edge.ffn"), width, ffn_hidden),
            })
        } else {
            None
        };
        Self {
            ln: LayerNorm::init(store, &format!("{name}.ln"), width),
            wq,
            wk,
            wv,
            wo,
            ln_ffn: LayerNorm::init(store, &format!("{name}.ln_ffn"), width),
            ffn: FeedForward::init(store, rng, &format!("{name}.ffn"), width, ffn_hidden),
            edge,
            width,
        }
    }
}

pub fn gt_layer_var(
    tape: &mut Tape,
    p: &Bound,
    layer: &GtLayerParams,
    h: Var,
    e: Option<Var>,
    edges: &EdgeIndex,
) -> Result<(Var, Option<Var>)> {
    let (n, width) = tape.value(h).dims2("gt_layer")?;
    if n != edges.nodes || width != layer.width {
        return Err(Error::shape("gt_layer", &[n, width], &[edges.nodes, layer.width]));
    }
    let mut e_out = e;
    let h1 = if edges.is_empty() {
        h
    } else {
        let z = layer.ln.forward(tape, p, h)?;
        let q = tape.matmul(z, p.var(layer.wq))?;
        let k = tape.matmul(z, p.var(layer.wk))?;
        let v = tape.matmul(z, p.var(layer.wv))?;
        let q_dst = tape.gather_rows(q, edges.dst.clone())?;
        let k_src = tape.gather_rows(k, edges.src.clone())?;
        let v_src = tape.gather_rows(v, edges.src.clone())?;
        let prod = tape.mul(q_dst, k_src)?;
        let mut prod = tape.scale(prod, 1.0 / (width as f64).sqrt());
        if let (Some(e), Some(blk)) = (e, layer.edge) {
            let ze = blk.ln.forward(tape, p, e)?;
            let ee = tape.matmul(ze, p.var(blk.we))?;
            prod = tape.mul(prod, ee)?;
            let upd = tape.matmul(prod, p.var(blk.weo))?;
            let e1 = tape.add(e, upd)?;
            let ze1 = blk.ln_ffn.forward(tape, p, e1)?;
            let ff = blk.ffn.forward(tape, p, ze1)?;
            e_out = Some(tape.add(e1, ff)?);
        }
        let logits = tape.sum_rows(prod)?;
        let alpha = tape.segment_softmax(logits, edges.dst.clone())?;
        let msg = tape.mul(v_src, alpha)?;
        let agg = tape.scatter_add_rows(msg, edges.dst.clone(), n)?;
        let out = tape.matmul(agg, p.var(layer.wo))?;
        tape.add(h, out)?
    };
    let z2 = layer.ln_ffn.forward(tape, p, h1)?;
    let ff = layer.ffn.forward(tape, p, z2)?;
    Ok((tape.add(h1, ff)?, e_out))
}

pub fn gt_layer_forward(
    store: &ParamStore,
    layer: &GtLayerParams,
    h: &Tensor,
    e: Option<&Tensor>,
    edges: &EdgeIndex,
) -> Result<(Tensor, Option<Tensor>)> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let hv = tape.leaf(h.clone());
    let ev = e.map(|e| tape.leaf(e.clone()));
    let (h1, e1) = gt_layer_var(&mut tape, &p, layer, hv, ev, edges)?;
    Ok((tape.value(h1).clone(), e1.map(|e| tape.value(e).clone())))
}
