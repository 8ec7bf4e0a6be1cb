//! Per-component gradient checks, shared by the test suite and the CLI.

use std::rc::Rc;

use rand::SeedableRng;
use serde::Serialize;

use crate::autodiff::{PathTable, Tape, Var};
use crate::encoder::{encoder_layer_var, EncoderLayerParams, MaskMode};
use crate::error::Result;
use crate::flow::{flow_attention_var, FlowConfig};
use crate::gradcheck::gradcheck_many;
use crate::graph::{complete_edges, grid_edges, laplacian_pe, GraphBatch, GtLayerParams};
use crate::hierarchy::Lattice;
use crate::model::{FlowDirection, HattFlowModel, ModelConfig};
use crate::params::{normal, uniform, Bound, ParamStore, Rng};
use crate::tensor::Tensor;

/// Finite-difference step used by every check.
pub const EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub component: String,
    pub max_rel_error: f64,
}

type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    name: String,
    inputs: Vec<Tensor>,
    f: Objective,
}

/// Scalarizes `op` as `Σ op(x) ⊙ W` with a fixed random `W` of shape
/// `out`, so every output entry gets its own upstream weight.
fn case(
    name: &str,
    inputs: Vec<Tensor>,
    out: &[usize],
    rng: &mut Rng,
    op: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> Case {
    let w = normal(rng, out, 1.0);
    Case {
        name: name.to_string(),
        inputs,
        f: Box::new(move |tape, xs| {
            let y = op(tape, xs)?;
            let w = tape.leaf(w.clone());
            let prod = tape.mul(y, w)?;
            Ok(tape.sum(prod))
        }),
    }
}

fn primitive_cases(rng: &mut Rng) -> Vec<Case> {
    let g = |rng: &mut Rng, shape: &[usize]| normal(rng, shape, 1.0);
    let a = g(rng, &[3, 4]);
    let b = g(rng, &[3, 4]);
    let c = g(rng, &[4, 2]);
    let col = g(rng, &[3, 1]);
    let row = g(rng, &[1, 4]);
    let s = g(rng, &[1]);
    let edges_x = g(rng, &[4, 2]);
    let seg = g(rng, &[5, 1]);
    let left = g(rng, &[3, 2]);
    let right = g(rng, &[3, 1]);
    let top = g(rng, &[2, 3]);
    let bottom = g(rng, &[1, 3]);
    let factors = uniform(rng, &[3, 1], 0.2, 1.0);
    let pa = uniform(rng, &[3, 4], 0.5, 2.0);
    let pb = uniform(rng, &[3, 4], 0.5, 2.0);
    let pcol = uniform(rng, &[3, 1], 0.5, 2.0);
    let idx: Rc<[usize]> = vec![2, 0, 2, 1].into();
    let segments: Rc<[usize]> = vec![0, 1, 0, 2, 1].into();
    let table = Rc::new(PathTable {
        n: 2,
        factors: 3,
        paths: vec![vec![], vec![0, 1], vec![1, 2, 2], vec![2]],
    });

    let (i1, i2, s1, s2) = (idx.clone(), idx, segments.clone(), segments);
    vec![
        case("add", vec![a.clone(), b.clone()], &[3, 4], rng, |t, x| t.add(x[0], x[1])),
        case("add (column broadcast)", vec![a.clone(), col.clone()], &[3, 4], rng, |t, x| t.add(x[0], x[1])),
        case("add (row broadcast)", vec![a.clone(), row.clone()], &[3, 4], rng, |t, x| t.add(x[0], x[1])),
        case("add (scalar broadcast)", vec![a.clone(), s], &[3, 4], rng, |t, x| t.add(x[0], x[1])),
        case("sub", vec![a.clone(), b.clone()], &[3, 4], rng, |t, x| t.sub(x[0], x[1])),
        case("sub (row broadcast)", vec![row, a.clone()], &[3, 4], rng, |t, x| t.sub(x[0], x[1])),
        case("mul", vec![a.clone(), b.clone()], &[3, 4], rng, |t, x| t.mul(x[0], x[1])),
        case("mul (column broadcast)", vec![col, a.clone()], &[3, 4], rng, |t, x| t.mul(x[0], x[1])),
        case("div", vec![a.clone(), pb], &[3, 4], rng, |t, x| t.div(x[0], x[1])),
        case("div (column broadcast)", vec![a.clone(), pcol], &[3, 4], rng, |t, x| t.div(x[0], x[1])),
        case("scale", vec![a.clone()], &[3, 4], rng, |t, x| Ok(t.scale(x[0], -1.7))),
        case("neg", vec![a.clone()], &[3, 4], rng, |t, x| Ok(t.neg(x[0]))),
        case("offset", vec![a.clone()], &[3, 4], rng, |t, x| Ok(t.offset(x[0], 0.3))),
        case("one_minus", vec![a.clone()], &[3, 4], rng, |t, x| Ok(t.one_minus(x[0]))),
        case("exp", vec![a.clone()], &[3, 4], rng, |t, x| Ok(t.exp(x[0]))),
        case("log", vec![pa.clone()], &[3, 4], rng, |t, x| t.log(x[0])),
        case("sqrt", vec![pa], &[3, 4], rng, |t, x| t.sqrt(x[0])),
        case("sigmoid", vec![a.clone()], &[3, 4], rng, |t, x| Ok(t.sigmoid(x[0]))),
        case("softplus", vec![a.clone()], &[3, 4], rng, |t, x| Ok(t.softplus(x[0]))),
        case("square", vec![a.clone()], &[3, 4], rng, |t, x| t.square(x[0])),
        case("matmul", vec![a.clone(), c], &[3, 2], rng, |t, x| t.matmul(x[0], x[1])),
        case("transpose", vec![a.clone()], &[4, 3], rng, |t, x| t.transpose(x[0])),
        case("sum", vec![a.clone()], &[1], rng, |t, x| Ok(t.sum(x[0]))),
        case("mean", vec![a.clone()], &[1], rng, |t, x| Ok(t.mean(x[0]))),
        case("sum_rows", vec![a.clone()], &[3, 1], rng, |t, x| t.sum_rows(x[0])),
        case("sum_cols", vec![a.clone()], &[1, 4], rng, |t, x| t.sum_cols(x[0])),
        case("mean_rows", vec![a.clone()], &[3, 1], rng, |t, x| t.mean_rows(x[0])),
        case("mean_cols", vec![a.clone()], &[1, 4], rng, |t, x| t.mean_cols(x[0])),
        case("softmax_rows", vec![a.clone()], &[3, 4], rng, |t, x| t.softmax_rows(x[0])),
        case("log_softmax_rows", vec![a.clone()], &[3, 4], rng, |t, x| t.log_softmax_rows(x[0])),
        case("reshape", vec![a.clone()], &[2, 6], rng, |t, x| t.reshape(x[0], &[2, 6])),
        case("gather_rows", vec![a.clone()], &[4, 4], rng, move |t, x| t.gather_rows(x[0], i1.clone())),
        case("scatter_add_rows", vec![edges_x], &[3, 2], rng, move |t, x| {
            t.scatter_add_rows(x[0], i2.clone(), 3)
        }),
        case("segment_softmax", vec![seg.clone()], &[5, 1], rng, move |t, x| {
            t.segment_softmax(x[0], s1.clone())
        }),
        case("segment_log_softmax", vec![seg], &[5, 1], rng, move |t, x| {
            t.segment_log_softmax(x[0], s2.clone())
        }),
        case("slice_cols", vec![a], &[3, 2], rng, |t, x| t.slice_cols(x[0], 1, 2)),
        case("concat_cols", vec![left, right], &[3, 3], rng, |t, x| t.concat_cols(&[x[0], x[1]])),
        case("concat_rows", vec![top, bottom], &[3, 3], rng, |t, x| t.concat_rows(&[x[0], x[1]])),
        case("path_product", vec![factors], &[2, 2], rng, move |t, x| t.path_product(x[0], table.clone())),
    ]
}

fn flow_case(rng: &mut Rng) -> Case {
    let q = normal(rng, &[3, 2], 1.0);
    let k = normal(rng, &[4, 2], 1.0);
    let v = normal(rng, &[4, 3], 1.0);
    case("flow_attention", vec![q, k, v], &[3, 3], rng, |t, x| {
        Ok(flow_attention_var(t, x[0], x[1], x[2], &FlowConfig::default())?.result)
    })
}

/// Checks with respect to every parameter in `store` plus `extra` inputs;
/// `op` gets the bound parameters and the extra variables.
fn param_case(
    name: &str,
    store: &ParamStore,
    extra: Vec<Tensor>,
    out: &[usize],
    rng: &mut Rng,
    op: impl Fn(&mut Tape, &Bound, &[Var]) -> Result<Var> + 'static,
) -> Case {
    let n = store.len();
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    inputs.extend(extra);
    case(name, inputs, out, rng, move |t, x| {
        let p = Bound::from_vars(x[..n].to_vec());
        op(t, &p, &x[n..])
    })
}

fn encoder_layer_case(rng: &mut Rng) -> Result<Case> {
    let mut store = ParamStore::new();
    let layer = EncoderLayerParams::init(&mut store, rng, "enc", 4, 2, 6, 1.0)?;
    let x = normal(rng, &[2 * 3, 4], 1.0);
    let prev = uniform(rng, &[Lattice::grid(2, 3).num_edges(), 1], 0.0, 0.6);
    Ok(param_case("hierarchy encoder layer", &store, vec![x, prev], &[6, 4], rng, move |t, p, x| {
        let lattice = Lattice::grid(2, 3);
        Ok(encoder_layer_var(t, p, &layer, x[0], &lattice, Some(x[1]), MaskMode::Hierarchy)?.output)
    }))
}

fn gt_layer_case(rng: &mut Rng) -> Case {
    let mut store = ParamStore::new();
    let layer = GtLayerParams::init(&mut store, rng, "gt", 3, 4, true);
    let edges = GraphBatch {
        node_feats: Tensor::zeros(&[3, 1]),
        edge_feats: None,
        edges: complete_edges(3),
        pe: Tensor::zeros(&[3, 1]),
        grid: None,
    }
    .edge_index();
    let h = normal(rng, &[3, 3], 1.0);
    let e = normal(rng, &[6, 3], 1.0);
    let w_h = normal(rng, &[3, 3], 1.0);
    let w_e = normal(rng, &[6, 3], 1.0);
    let n = store.len();
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    inputs.extend([h, e]);
    Case {
        name: "graph-transformer layer".into(),
        inputs,
        f: Box::new(move |t, x| {
            let p = Bound::from_vars(x[..n].to_vec());
            let (h, e) = crate::graph::gt_layer_var(t, &p, &layer, x[n], Some(x[n + 1]), &edges)?;
            let e = e.expect("layer has an edge block");
            let mut total = Vec::new();
            for (y, w) in [(h, &w_h), (e, &w_e)] {
                let w = t.leaf(w.clone());
                let prod = t.mul(y, w)?;
                total.push(t.sum(prod));
            }
            t.add(total[0], total[1])
        }),
    }
}

/// The smallest useful model: every width 2, two (text, vision) pairs.
pub fn minimal_model(direction: FlowDirection, seed: u64) -> Result<(HattFlowModel, Vec<(GraphBatch, GraphBatch)>)> {
    let cfg = ModelConfig {
        width: 2,
        heads: 1,
        ffn_hidden: 2,
        pe_dim: 2,
        gt_layers: 1,
        encoder_layers: 2,
        text_node_dim: 2,
        text_edge_dim: 2,
        vision_node_dim: 2,
        flow_direction: direction,
        tau_init: 0.5,
        seed,
        ..ModelConfig::default()
    };
    let mut model = HattFlowModel::new(cfg)?;
    let mut rng = Rng::seed_from_u64(seed ^ 0x5eed);
    // Perturb every parameter so zero-initialized ones (biases, output
    // projections) are exercised away from their special starting point.
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let t = model.store.get(id);
        let noise = normal(&mut rng, t.shape(), 0.3);
        let next = t.add(&noise)?;
        model.store.set(id, next)?;
    }
    let text_pe = laplacian_pe(&complete_edges(3), 3, 2)?;
    let vision_pe = laplacian_pe(&grid_edges(2, 2), 4, 2)?;
    let mut pairs = Vec::new();
    for _ in 0..2 {
        let text = GraphBatch {
            node_feats: normal(&mut rng, &[3, 2], 1.0),
            edge_feats: Some(normal(&mut rng, &[6, 2], 1.0)),
            edges: complete_edges(3),
            pe: text_pe.clone(),
            grid: None,
        };
        let vision = GraphBatch {
            node_feats: normal(&mut rng, &[4, 2], 1.0),
            edge_feats: None,
            edges: grid_edges(2, 2),
            pe: vision_pe.clone(),
            grid: Some((2, 2)),
        };
        pairs.push((text, vision));
    }
    Ok((model, pairs))
}

fn model_case(direction: FlowDirection) -> Result<Case> {
    let (model, batch) = minimal_model(direction, 11)?;
    let name = format!("end-to-end model ({})", direction.as_str());
    let n = model.store.len();
    let inputs = model.store.iter().map(|(_, t)| t.clone()).collect();
    Ok(Case {
        name,
        inputs,
        f: Box::new(move |t, x| {
            let p = Bound::from_vars(x[..n].to_vec());
            model.loss_var(t, &p, &batch)
        }),
    })
}

/// Runs every check. Rows come out in a fixed order: primitives, then
/// flow attention, the encoder layer, the graph-transformer layer and the
/// minimal model in each flow direction.
pub fn gradcheck_report(seed: u64) -> Result<Vec<GradcheckRow>> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut cases = primitive_cases(&mut rng);
    cases.push(flow_case(&mut rng));
    cases.push(encoder_layer_case(&mut rng)?);
    cases.push(gt_layer_case(&mut rng));
    for d in FlowDirection::ALL {
        cases.push(model_case(d)?);
    }
    cases
        .into_iter()
        .map(|c| {
            Ok(GradcheckRow {
                max_rel_error: gradcheck_many(&c.f, &c.inputs, EPS)?,
                component: c.name,
            })
        })
        .collect()
}
