//! Flow-conservation attention.
//!
//! Queries act as sinks and keys/values as sources. With a strictly positive
//! feature map `phi`:
//!
//! * incoming capacity `I_i = phi(Q_i) · Σ_j phi(K_j)`, outgoing capacity
//!   `O_j = phi(K_j) · Σ_i phi(Q_i)`;
//! * conserved flows `Î = phi(Q) · Σ_j phi(K_j)/O_j` and
//!   `Ô = phi(K) · Σ_i phi(Q_i)/I_i`;
//! * competition `V̂ = softmax_j(Ô) ⊙ V`, aggregation
//!   `A = (phi(Q)/I) (phi(K)ᵀ V̂)`, allocation `R = sigmoid(Î) ⊙ A`.
//!
//! Every reduction over sinks or sources is pre-summed, so the cost is
//! `O((n + m) · d · d_v)` and no `n × m` matrix is ever formed.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Added to the sigmoid so that it stays positive where `exp` underflows
/// (inputs below about -745). Squares of it are still normal floats.
pub const SIGMOID_FLOOR: f64 = 1e-150;

/// Strictly positive feature map applied to queries and keys.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phi {
    #[default]
    Sigmoid,
    /// `softplus(x) + eps`.
    SoftplusEps,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub phi: Phi,
    pub eps: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            phi: Phi::Sigmoid,
            eps: 1e-6,
        }
    }
}

impl FlowConfig {
    pub fn softplus(eps: f64) -> Self {
        Self {
            phi: Phi::SoftplusEps,
            eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::contract(format!(
                "flow eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }

    fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        match self.phi {
            Phi::Sigmoid => {
                let s = tape.sigmoid(x);
                tape.offset(s, SIGMOID_FLOOR)
            }
            Phi::SoftplusEps => {
                let s = tape.softplus(x);
                tape.offset(s, self.eps)
            }
        }
    }

    /// Applies the feature map to a plain tensor.
    pub fn phi(&self, x: &Tensor) -> Tensor {
        match self.phi {
            Phi::Sigmoid => x.sigmoid().map(|v| v + SIGMOID_FLOOR),
            Phi::SoftplusEps => x.softplus().map(|v| v + self.eps),
        }
    }
}

/// Capacities and conserved flows for one attention call.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    /// `I`, length n.
    pub incoming: Tensor,
    /// `O`, length m.
    pub outgoing: Tensor,
    /// `Î`, length n.
    pub conserved_incoming: Tensor,
    /// `Ô`, length m.
    pub conserved_outgoing: Tensor,
}

/// Tape handles for every intermediate of [`flow_attention_var`].
#[derive(Clone, Copy, Debug)]
pub struct FlowVars {
    pub incoming: Var,
    pub outgoing: Var,
    pub conserved_incoming: Var,
    pub conserved_outgoing: Var,
    pub result: Var,
}

fn check_qk(q: &Tensor, k: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, d) = q.dims2("flow_attention")?;
    let (m, dk) = k.dims2("flow_attention")?;
    if d != dk {
        return Err(Error::shape("flow_attention", q.shape(), k.shape()));
    }
    Ok((n, m, d))
}

struct Capacities {
    phi_q: Var,
    phi_k: Var,
    incoming: Var,
    outgoing: Var,
}

fn capacities_var(tape: &mut Tape, q: Var, k: Var, cfg: &FlowConfig) -> Result<Capacities> {
    cfg.validate()?;
    check_qk(tape.value(q), tape.value(k))?;
    let phi_q = cfg.apply(tape, q);
    let phi_k = cfg.apply(tape, k);
    let sum_k = tape.sum_cols(phi_k)?;
    let sum_k = tape.transpose(sum_k)?;
    let sum_q = tape.sum_cols(phi_q)?;
    let sum_q = tape.transpose(sum_q)?;
    let incoming = tape.matmul(phi_q, sum_k)?;
    let outgoing = tape.matmul(phi_k, sum_q)?;
    Ok(Capacities {
        phi_q,
        phi_k,
        incoming,
        outgoing,
    })
}

/// Records the full competition/aggregation/allocation pipeline.
///
/// `q: [n, d]`, `k: [m, d]`, `v: [m, d_v]`; the result is `[n, d_v]`.
pub fn flow_attention_var(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    cfg: &FlowConfig,
) -> Result<FlowVars> {
    let (m, _) = tape.value(k).dims2("flow_attention")?;
    let (mv, _) = tape.value(v).dims2("flow_attention")?;
    if m != mv {
        return Err(Error::shape("flow_attention", tape.value(k).shape(), tape.value(v).shape()));
    }
    let Capacities {
        phi_q,
        phi_k,
        incoming,
        outgoing,
    } = capacities_var(tape, q, k, cfg)?;

    // conservation
    let k_norm = tape.div(phi_k, outgoing)?;
    let q_norm = tape.div(phi_q, incoming)?;
    let k_norm_sum = tape.sum_cols(k_norm)?;
    let k_norm_sum = tape.transpose(k_norm_sum)?;
    let q_norm_sum = tape.sum_cols(q_norm)?;
    let q_norm_sum = tape.transpose(q_norm_sum)?;
    let conserved_incoming = tape.matmul(phi_q, k_norm_sum)?;
    let conserved_outgoing = tape.matmul(phi_k, q_norm_sum)?;

    // competition over the m sources
    let o_row = tape.transpose(conserved_outgoing)?;
    let weights = tape.softmax_rows(o_row)?;
    let weights = tape.transpose(weights)?;
    let v_hat = tape.mul(v, weights)?;

    // aggregation
    let phi_k_t = tape.transpose(phi_k)?;
    let kv = tape.matmul(phi_k_t, v_hat)?;
    let aggregated = tape.matmul(q_norm, kv)?;

    // allocation
    let gate = tape.sigmoid(conserved_incoming);
    let result = tape.mul(aggregated, gate)?;

    Ok(FlowVars {
        incoming,
        outgoing,
        conserved_incoming,
        conserved_outgoing,
        result,
    })
}

fn flatten(t: &Tensor) -> Tensor {
    Tensor::vector(t.data().to_vec())
}

/// Incoming (`I`, length n) and outgoing (`O`, length m) capacities.
pub fn flow_capacities(q: &Tensor, k: &Tensor, cfg: &FlowConfig) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let (qv, kv) = (tape.leaf(q.clone()), tape.leaf(k.clone()));
    let caps = capacities_var(&mut tape, qv, kv, cfg)?;
    Ok((
        flatten(tape.value(caps.incoming)),
        flatten(tape.value(caps.outgoing)),
    ))
}

/// Conserved flows from previously computed capacities.
pub fn conserve(
    q: &Tensor,
    k: &Tensor,
    incoming: &Tensor,
    outgoing: &Tensor,
    cfg: &FlowConfig,
) -> Result<FlowState> {
    cfg.validate()?;
    let (n, m, _) = check_qk(q, k)?;
    if incoming.numel() != n || outgoing.numel() != m {
        return Err(Error::shape("conserve", &[n, m], &[incoming.numel(), outgoing.numel()]));
    }
    for (name, t) in [("incoming", incoming), ("outgoing", outgoing)] {
        if let Some(v) = t.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::domain(
                "conserve",
                format!("{name} capacity {v} is not strictly positive"),
            ));
        }
    }
    let phi_q = cfg.phi(q);
    let phi_k = cfg.phi(k);
    let i_col = Tensor::column(incoming.data().to_vec());
    let o_col = Tensor::column(outgoing.data().to_vec());
    let k_norm_sum = phi_k.div(&o_col)?.sum_cols()?.transpose()?;
    let q_norm_sum = phi_q.div(&i_col)?.sum_cols()?.transpose()?;
    Ok(FlowState {
        incoming: flatten(incoming),
        outgoing: flatten(outgoing),
        conserved_incoming: flatten(&phi_q.matmul(&k_norm_sum)?),
        conserved_outgoing: flatten(&phi_k.matmul(&q_norm_sum)?),
    })
}

/// Flow attention output together with its capacities and conserved flows.
pub fn flow_attention_with_state(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &FlowConfig,
) -> Result<(Tensor, FlowState)> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
    let out = flow_attention_var(&mut tape, qv, kv, vv, cfg)?;
    let state = FlowState {
        incoming: flatten(tape.value(out.incoming)),
        outgoing: flatten(tape.value(out.outgoing)),
        conserved_incoming: flatten(tape.value(out.conserved_incoming)),
        conserved_outgoing: flatten(tape.value(out.conserved_outgoing)),
    };
    Ok((tape.value(out.result).clone(), state))
}

pub fn flow_attention(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &FlowConfig) -> Result<Tensor> {
    flow_attention_with_state(q, k, v, cfg).map(|(r, _)| r)
}

/// The two families of conservation sums, which should all equal 1:
/// per source `(phi(K_j)/O_j) · Σ_i phi(Q_i)` and per sink
/// `(phi(Q_i)/I_i) · Σ_j phi(K_j)`.
pub fn conservation_sums(
    q: &Tensor,
    k: &Tensor,
    cfg: &FlowConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (incoming, outgoing) = flow_capacities(q, k, cfg)?;
    let phi_q = cfg.phi(q);
    let phi_k = cfg.phi(k);
    let sum_q = phi_q.sum_cols()?;
    let sum_k = phi_k.sum_cols()?;
    let dot = |row: &[f64], s: &Tensor| row.iter().zip(s.data()).map(|(a, b)| a * b).sum::<f64>();
    let sources = (0..phi_k.rows())
        .map(|j| dot(phi_k.row_slice(j), &sum_q) / outgoing.data()[j])
        .collect();
    let sinks = (0..phi_q.rows())
        .map(|i| dot(phi_q.row_slice(i), &sum_k) / incoming.data()[i])
        .collect();
    Ok((sources, sinks))
}

/// Standard scaled dot-product attention `softmax(QKᵀ/√d) V`, materializing
/// the full `n × m` score matrix. Used as the quadratic baseline.
pub fn softmax_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (_, _, d) = check_qk(q, k)?;
    let scores = q.matmul(&k.transpose()?)?.scale(1.0 / (d as f64).sqrt());
    scores.softmax_rows()?.matmul(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid;

    #[test]
    fn single_token_capacities() {
        let z = Tensor::from_rows(&[[0.0]]).unwrap();
        let (i, o) = flow_capacities(&z, &z, &FlowConfig::default()).unwrap();
        assert_eq!(i.data(), &[0.25]);
        assert_eq!(o.data(), &[0.25]);
    }

    #[test]
    fn single_token_conserved_flows_are_one() {
        let q = Tensor::from_rows(&[[0.3, -1.2]]).unwrap();
        let k = Tensor::from_rows(&[[2.0, 0.1]]).unwrap();
        let cfg = FlowConfig::default();
        let (i, o) = flow_capacities(&q, &k, &cfg).unwrap();
        let state = conserve(&q, &k, &i, &o, &cfg).unwrap();
        assert!((state.conserved_incoming.data()[0] - 1.0).abs() < 1e-15);
        assert!((state.conserved_outgoing.data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_token_result_is_gated_value() {
        let q = Tensor::from_rows(&[[0.7, -0.4, 1.5]]).unwrap();
        let k = Tensor::from_rows(&[[-2.0, 0.3, 0.9]]).unwrap();
        let v = Tensor::from_rows(&[[1.0, -3.0]]).unwrap();
        let r = flow_attention(&q, &k, &v, &FlowConfig::default()).unwrap();
        let expect = v.scale(sigmoid(1.0));
        assert!(r.max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn identical_query_rows_get_identical_capacity() {
        let q = Tensor::from_rows(&[[0.5, 1.0], [0.5, 1.0], [-1.0, 0.2]]).unwrap();
        let k = Tensor::from_rows(&[[0.1, 0.2], [0.3, -0.4]]).unwrap();
        let (i, _) = flow_capacities(&q, &k, &FlowConfig::default()).unwrap();
        assert_eq!(i.data()[0], i.data()[1]);
    }

    #[test]
    fn duplicated_key_duplicates_conserved_outgoing() {
        let q = Tensor::from_rows(&[[0.5, 1.0], [-1.0, 0.2]]).unwrap();
        let k = Tensor::from_rows(&[[0.1, 0.2], [0.3, -0.4], [0.1, 0.2]]).unwrap();
        let cfg = FlowConfig::default();
        let (i, o) = flow_capacities(&q, &k, &cfg).unwrap();
        let s = conserve(&q, &k, &i, &o, &cfg).unwrap();
        assert_eq!(s.conserved_outgoing.data()[0], s.conserved_outgoing.data()[2]);
    }

    #[test]
    fn conserve_rejects_non_positive_capacity() {
        let q = Tensor::from_rows(&[[0.5]]).unwrap();
        let bad = Tensor::vector(vec![0.0]);
        let ok = Tensor::vector(vec![1.0]);
        let err = conserve(&q, &q, &bad, &ok, &FlowConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Domain { .. }));
    }

    #[test]
    fn shape_errors() {
        let cfg = FlowConfig::default();
        let q = Tensor::zeros(&[2, 3]);
        let k = Tensor::zeros(&[4, 2]);
        assert!(matches!(flow_capacities(&q, &k, &cfg), Err(Error::Shape { .. })));
        let k = Tensor::zeros(&[4, 3]);
        let v = Tensor::zeros(&[5, 2]);
        assert!(matches!(flow_attention(&q, &k, &v, &cfg), Err(Error::Shape { .. })));
    }

    #[test]
    fn invalid_eps_is_rejected() {
        let q = Tensor::zeros(&[1, 1]);
        assert!(flow_capacities(&q, &q, &FlowConfig::softplus(0.0)).is_err());
    }

    #[test]
    fn softplus_variant_conserves() {
        let q = Tensor::from_rows(&[[-30.0, 2.0], [0.5, -0.5]]).unwrap();
        let k = Tensor::from_rows(&[[1.0, -40.0], [0.0, 0.0], [3.0, 1.0]]).unwrap();
        let (src, snk) = conservation_sums(&q, &k, &FlowConfig::softplus(1e-6)).unwrap();
        for s in src.iter().chain(&snk) {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_baseline_single_key_returns_value() {
        let q = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let k = Tensor::from_rows(&[[0.5, 0.5]]).unwrap();
        let v = Tensor::from_rows(&[[7.0, -1.0, 2.0]]).unwrap();
        let out = softmax_attention(&q, &k, &v).unwrap();
        assert_eq!(out.to_rows(), vec![vec![7.0, -1.0, 2.0]; 2]);
    }
}
