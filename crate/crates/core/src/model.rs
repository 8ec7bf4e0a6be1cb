//! Dual-branch model: per-branch graph transformer and hierarchy encoder,
//! directional flow attention between the branches, pooled unit-norm
//! embeddings and the symmetric contrastive objective.
//!
//! With a flow direction the receiving branch's embedding depends on the
//! sending input, so a batch similarity is computed cross-conditioned: for
//! text → vision, `S_ij = u_i · v_{j|i}` where `v_{j|i}` is vision item `j`
//! after receiving flow from text item `i`. Pairing only matched items would
//! let the vision embedding copy the text and solve the objective without
//! looking at the image.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{encoder_forward_var, EncoderLayerParams, MaskMode};
use crate::error::{Error, Result};
use crate::flow::{flow_attention_var, FlowConfig};
use crate::graph::{embed_inputs_var, EmbedParams, GraphBatch, GtLayerParams};
use crate::hierarchy::Lattice;
use crate::params::{normal, Bound, FeedForward, LayerNorm, Linear, ParamId, ParamStore, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowDirection {
    #[default]
    TextToVision,
    VisionToText,
    None,
}

impl FlowDirection {
    pub const ALL: [FlowDirection; 3] = [Self::TextToVision, Self::VisionToText, Self::None];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::TextToVision => "text_to_vision",
            Self::VisionToText => "vision_to_text",
            Self::None => "none",
        }
    }
}

impl std::str::FromStr for FlowDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::contract(format!("unknown flow direction {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden width `d`.
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Positional-encoding size `k`.
    pub pe_dim: usize,
    pub gt_layers: usize,
    pub encoder_layers: usize,
    pub text_node_dim: usize,
    pub text_edge_dim: usize,
    pub vision_node_dim: usize,
    pub sigma_t: f64,
    pub mask: MaskMode,
    pub flow_direction: FlowDirection,
    pub flow: FlowConfig,
    /// Initial contrastive temperature; learned as `log τ`.
    pub tau_init: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 16,
            heads: 2,
            ffn_hidden: 32,
            pe_dim: 2,
            gt_layers: 1,
            encoder_layers: 4,
            text_node_dim: 8,
            text_edge_dim: 8,
            vision_node_dim: 8,
            sigma_t: 1.0,
            mask: MaskMode::Hierarchy,
            flow_direction: FlowDirection::TextToVision,
            flow: FlowConfig::default(),
            tau_init: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("width", self.width),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("pe_dim", self.pe_dim),
            ("text_node_dim", self.text_node_dim),
            ("text_edge_dim", self.text_edge_dim),
            ("vision_node_dim", self.vision_node_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("model.{name} must be positive")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::contract(format!(
                "model.width {} is not divisible by model.heads {}",
                self.width, self.heads
            )));
        }
        if !(self.sigma_t > 0.0) || !(self.tau_init > 0.0) {
            return Err(Error::contract("model.sigma_t and model.tau_init must be positive"));
        }
        self.flow.validate()
    }
}

#[derive(Clone, Debug)]
pub struct BranchParams {
    pub embed: EmbedParams,
    pub gt: Vec<GtLayerParams>,
    pub encoder: Vec<EncoderLayerParams>,
    pub final_ln: LayerNorm,
    pub proj: Linear,
}

impl BranchParams {
    fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cfg: &ModelConfig,
        node_dim: usize,
        edge_dim: Option<usize>,
    ) -> Result<Self> {
        let d = cfg.width;
        let embed = EmbedParams::init(store, rng, &format!("{name}.embed"), d, node_dim, edge_dim, cfg.pe_dim);
        let gt = (0..cfg.gt_layers)
            .map(|l| GtLayerParams::init(store, rng, &format!("{name}.gt{l}"), d, cfg.ffn_hidden, edge_dim.is_some()))
            .collect();
        let encoder = (0..cfg.encoder_layers)
            .map(|l| {
                EncoderLayerParams::init(store, rng, &format!("{name}.enc{l}"), d, cfg.heads, cfg.ffn_hidden, cfg.sigma_t)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            embed,
            gt,
            encoder,
            final_ln: LayerNorm::init(store, &format!("{name}.final_ln"), d),
            proj: Linear::init(store, rng, &format!("{name}.proj"), d, d, true),
        })
    }
}

/// Flow attention from one branch into the other, followed by a
/// feed-forward residual on the receiving side.
#[derive(Clone, Copy, Debug)]
pub struct CrossFlowParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl CrossFlowParams {
    fn init(store: &mut ParamStore, rng: &mut Rng, name: &str, d: usize, hidden: usize) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let mat = |store: &mut ParamStore, rng: &mut Rng, suffix: &str| {
            store.add(format!("{name}.{suffix}"), normal(rng, &[d, d], std))
        };
        Self {
            wq: mat(store, rng, "wq"),
            wk: mat(store, rng, "wk"),
            wv: mat(store, rng, "wv"),
            // Zero output projection: the receiving branch starts out unconditioned.
            wo: store.add(format!("{name}.wo"), Tensor::zeros(&[d, d])),
            ln_ffn: LayerNorm::init(store, &format!("{name}.ln_ffn"), d),
            ffn: FeedForward::init(store, rng, &format!("{name}.ffn"), d, hidden),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HattFlowModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub text: BranchParams,
    pub vision: BranchParams,
    pub cross: Option<CrossFlowParams>,
    pub log_tau: ParamId,
}

/// Encoder output of one branch item plus its projected flow operands.
#[derive(Clone, Copy, Debug)]
struct Encoded {
    feats: Var,
    /// `feats W_q` when this item receives flow.
    q: Option<Var>,
    /// `(feats W_k, feats W_v)` when this item sends flow.
    kv: Option<(Var, Var)>,
}

/// Branch outputs for a single (text, vision) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutput {
    /// Enriched features after the cross-branch step.
    pub text_feats: Tensor,
    pub vision_feats: Tensor,
    /// `[d]` unit vectors.
    pub u: Tensor,
    pub v: Tensor,
}

impl HattFlowModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        use rand::SeedableRng;
        config.validate()?;
        let mut rng = Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let text = BranchParams::init(&mut store, &mut rng, "text", &config, config.text_node_dim, Some(config.text_edge_dim))?;
        let vision = BranchParams::init(&mut store, &mut rng, "vision", &config, config.vision_node_dim, None)?;
        let cross = match config.flow_direction {
            FlowDirection::None => None,
            dir => Some(CrossFlowParams::init(
                &mut store,
                &mut rng,
                &format!("flow.{}", dir.as_str()),
                config.width,
                config.ffn_hidden,
            )),
        };
        let log_tau = store.add("log_tau", Tensor::scalar(config.tau_init.ln()));
        Ok(Self {
            config,
            store,
            text,
            vision,
            cross,
            log_tau,
        })
    }

    pub fn tau(&self) -> f64 {
        self.store.get(self.log_tau).data()[0].exp()
    }

    fn encode(&self, tape: &mut Tape, p: &Bound, branch: &BranchParams, g: &GraphBatch, role: Role) -> Result<Encoded> {
        let (h, mut e) = embed_inputs_var(tape, p, &branch.embed, g)?;
        let edges = g.edge_index();
        let mut h = h;
        for layer in &branch.gt {
            (h, e) = crate::graph::gt_layer_var(tape, p, layer, h, e, &edges)?;
        }
        let lattice = match g.grid {
            Some((r, c)) => Lattice::grid(r, c),
            None => Lattice::sequence(g.num_nodes()),
        };
        let trace = encoder_forward_var(tape, p, &branch.encoder, h, &lattice, self.config.mask)?;
        let feats = branch.final_ln.forward(tape, p, trace.output)?;
        let mut out = Encoded { feats, q: None, kv: None };
        if let Some(c) = self.cross {
            match role {
                Role::Receiver => out.q = Some(tape.matmul(feats, p.var(c.wq))?),
                Role::Sender => {
                    let k = tape.matmul(feats, p.var(c.wk))?;
                    let v = tape.matmul(feats, p.var(c.wv))?;
                    out.kv = Some((k, v));
                }
                Role::Isolated => {}
            }
        }
        Ok(out)
    }

    /// `x = recv + flow(recv W_q, send W_k, send W_v) W_o`, then
    /// `x + FFN(LN(x))`.
    fn receive(&self, tape: &mut Tape, p: &Bound, recv: &Encoded, send: &Encoded) -> Result<Var> {
        let c = self.cross.expect("receive requires cross-flow parameters");
        let q = recv.q.expect("receiver has a query projection");
        let (k, v) = send.kv.expect("sender has key/value projections");
        let flow = flow_attention_var(tape, q, k, v, &self.config.flow)?;
        let out = tape.matmul(flow.result, p.var(c.wo))?;
        let x = tape.add(recv.feats, out)?;
        let z = c.ln_ffn.forward(tape, p, x)?;
        let ff = c.ffn.forward(tape, p, z)?;
        tape.add(x, ff)
    }

    fn pool(&self, tape: &mut Tape, p: &Bound, branch: &BranchParams, feats: Var) -> Result<Var> {
        let pooled = tape.mean_cols(feats)?;
        let proj = branch.proj.forward(tape, p, pooled)?;
        let sq = tape.square(proj)?;
        let norm = tape.sum(sq);
        let norm = tape.sqrt(norm)?;
        tape.div(proj, norm)
    }

    fn roles(&self) -> (Role, Role) {
        match self.config.flow_direction {
            FlowDirection::TextToVision => (Role::Sender, Role::Receiver),
            FlowDirection::VisionToText => (Role::Receiver, Role::Sender),
            FlowDirection::None => (Role::Isolated, Role::Isolated),
        }
    }

    /// Cross-conditioned `[M, M]` similarity for `M` (text, vision) pairs.
    pub fn similarity_var(
        &self,
        tape: &mut Tape,
        p: &Bound,
        texts: &[&GraphBatch],
        visions: &[&GraphBatch],
    ) -> Result<Var> {
        if texts.is_empty() || visions.is_empty() {
            return Err(Error::contract("similarity needs at least one text and one vision item"));
        }
        let (t_role, v_role) = self.roles();
        let t_enc = texts
            .iter()
            .map(|g| self.encode(tape, p, &self.text, g, t_role))
            .collect::<Result<Vec<_>>>()?;
        let v_enc = visions
            .iter()
            .map(|g| self.encode(tape, p, &self.vision, g, v_role))
            .collect::<Result<Vec<_>>>()?;

        match self.config.flow_direction {
            FlowDirection::None => {
                let u = self.pool_all(tape, p, &self.text, t_enc.iter().map(|e| e.feats))?;
                let v = self.pool_all(tape, p, &self.vision, v_enc.iter().map(|e| e.feats))?;
                let vt = tape.transpose(v)?;
                tape.matmul(u, vt)
            }
            FlowDirection::TextToVision => {
                let mut rows = Vec::with_capacity(t_enc.len());
                for t in &t_enc {
                    let u = self.pool(tape, p, &self.text, t.feats)?;
                    let mut conditioned = Vec::with_capacity(v_enc.len());
                    for v in &v_enc {
                        let recv = self.receive(tape, p, v, t)?;
                        conditioned.push(self.pool(tape, p, &self.vision, recv)?);
                    }
                    let vs = tape.concat_rows(&conditioned)?;
                    let vst = tape.transpose(vs)?;
                    rows.push(tape.matmul(u, vst)?);
                }
                tape.concat_rows(&rows)
            }
            FlowDirection::VisionToText => {
                let mut cols = Vec::with_capacity(v_enc.len());
                for v in &v_enc {
                    let vp = self.pool(tape, p, &self.vision, v.feats)?;
                    let mut conditioned = Vec::with_capacity(t_enc.len());
                    for t in &t_enc {
                        let recv = self.receive(tape, p, t, v)?;
                        conditioned.push(self.pool(tape, p, &self.text, recv)?);
                    }
                    let us = tape.concat_rows(&conditioned)?;
                    let vpt = tape.transpose(vp)?;
                    cols.push(tape.matmul(us, vpt)?);
                }
                tape.concat_cols(&cols)
            }
        }
    }

    fn pool_all(
        &self,
        tape: &mut Tape,
        p: &Bound,
        branch: &BranchParams,
        feats: impl Iterator<Item = Var>,
    ) -> Result<Var> {
        let pooled = feats.map(|f| self.pool(tape, p, branch, f)).collect::<Result<Vec<_>>>()?;
        tape.concat_rows(&pooled)
    }

    /// Contrastive loss of a batch of matched pairs on an existing tape.
    pub fn loss_var(&self, tape: &mut Tape, p: &Bound, batch: &[(GraphBatch, GraphBatch)]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::contract("batch size must be at least 1"));
        }
        let texts: Vec<&GraphBatch> = batch.iter().map(|b| &b.0).collect();
        let visions: Vec<&GraphBatch> = batch.iter().map(|b| &b.1).collect();
        let s = self.similarity_var(tape, p, &texts, &visions)?;
        let log_tau = p.var(self.log_tau);
        let tau = tape.exp(log_tau);
        clip_loss_var(tape, s, tau)
    }

    pub fn loss(&self, batch: &[(GraphBatch, GraphBatch)]) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let l = self.loss_var(&mut tape, &p, batch)?;
        tape.value(l).item()
    }

    /// Branch features and unit embeddings for one pair.
    pub fn forward(&self, text: &GraphBatch, vision: &GraphBatch) -> Result<BranchOutput> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let (t_role, v_role) = self.roles();
        let t = self.encode(&mut tape, &p, &self.text, text, t_role)?;
        let v = self.encode(&mut tape, &p, &self.vision, vision, v_role)?;
        let (tf, vf) = match self.config.flow_direction {
            FlowDirection::None => (t.feats, v.feats),
            FlowDirection::TextToVision => (t.feats, self.receive(&mut tape, &p, &v, &t)?),
            FlowDirection::VisionToText => (self.receive(&mut tape, &p, &t, &v)?, v.feats),
        };
        let u = self.pool(&mut tape, &p, &self.text, tf)?;
        let vv = self.pool(&mut tape, &p, &self.vision, vf)?;
        let flat = |t: &Tensor| Tensor::vector(t.data().to_vec());
        Ok(BranchOutput {
            text_feats: tape.value(tf).clone(),
            vision_feats: tape.value(vf).clone(),
            u: flat(tape.value(u)),
            v: flat(tape.value(vv)),
        })
    }

    /// Similarity of every candidate text to one vision graph.
    pub fn score_texts(&self, vision: &GraphBatch, candidates: &[GraphBatch]) -> Result<Vec<f64>> {
        if candidates.is_empty() {
            return Err(Error::contract("candidate text set is empty"));
        }
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let texts: Vec<&GraphBatch> = candidates.iter().collect();
        let s = self.similarity_var(&mut tape, &p, &texts, &[vision])?;
        Ok(tape.value(s).data().to_vec())
    }

    /// Candidate indices ranked by descending similarity (ties keep the lower
    /// index first), with their scores.
    pub fn predict_predicates(&self, vision: &GraphBatch, prototypes: &[GraphBatch]) -> Result<Vec<(usize, f64)>> {
        Ok(rank_desc(&self.score_texts(vision, prototypes)?))
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Sender,
    Receiver,
    Isolated,
}

/// `(index, score)` sorted by descending score, stable on ties.
pub fn rank_desc(scores: &[f64]) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    ranked
}

/// Symmetric InfoNCE on a square similarity matrix:
/// `-(Σ_i log softmax_j(S/τ)_ii + Σ_j log softmax_i(S/τ)_jj) / M`.
pub fn clip_loss_var(tape: &mut Tape, similarity: Var, tau: Var) -> Result<Var> {
    let (m, n) = tape.value(similarity).dims2("clip_loss")?;
    if m != n {
        return Err(Error::shape("clip_loss", &[m, n], &[m, m]));
    }
    let logits = tape.div(similarity, tau)?;
    let eye = tape.leaf(Tensor::eye(m));
    let rows = tape.log_softmax_rows(logits)?;
    let lt = tape.transpose(logits)?;
    let cols = tape.log_softmax_rows(lt)?;
    let d1 = tape.mul(rows, eye)?;
    let d2 = tape.mul(cols, eye)?;
    let s1 = tape.sum(d1);
    let s2 = tape.sum(d2);
    let total = tape.add(s1, s2)?;
    Ok(tape.scale(total, -1.0 / m as f64))
}

/// [`clip_loss_var`] on `S = U Vᵀ` for row-matched embeddings.
pub fn clip_loss(u: &Tensor, v: &Tensor, tau: f64) -> Result<f64> {
    if u.rank() != 2 || u.shape() != v.shape() {
        return Err(Error::shape("clip_loss", u.shape(), v.shape()));
    }
    if !(tau > 0.0) {
        return Err(Error::contract("temperature must be positive"));
    }
    let mut tape = Tape::new();
    let s = tape.leaf(u.matmul(&v.transpose()?)?);
    let t = tape.leaf(Tensor::scalar(tau));
    let l = clip_loss_var(&mut tape, s, t)?;
    tape.value(l).item()
}

/// Row-list form that reports an empty batch as a contract violation.
pub fn clip_loss_rows(u: &[Vec<f64>], v: &[Vec<f64>], tau: f64) -> Result<f64> {
    if u.is_empty() || v.is_empty() {
        return Err(Error::contract("clip_loss needs at least one pair (M >= 1)"));
    }
    clip_loss(&Tensor::from_rows(u)?, &Tensor::from_rows(v)?, tau)
}
