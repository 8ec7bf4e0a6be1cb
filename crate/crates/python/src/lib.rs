//! Python bindings. Matrices cross the boundary as lists of rows, triplets as
//! JSONL strings.

use hattflow::diagnostics::gradcheck_report;
use hattflow::flow::{conservation_sums as conservation, softmax_attention as softmax};
use hattflow::hierarchy::{build_mask_1d, build_mask_2d};
use hattflow::metrics::{evaluate, read_triplets_jsonl, write_triplets_jsonl, TripletSet};
use hattflow::model::clip_loss_rows;
use hattflow::{FlowConfig, Phi, SynthSpec, SynthWorld, Tensor};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: hattflow::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> PyResult<Tensor> {
    if rows.is_empty() {
        return Err(PyValueError::new_err(format!("{name} has no rows")));
    }
    Tensor::from_rows(rows).map_err(|e| PyValueError::new_err(format!("{name}: {e}")))
}

fn flow_config(phi: &str) -> PyResult<FlowConfig> {
    match phi {
        "sigmoid" => Ok(FlowConfig::default()),
        "softplus" => Ok(FlowConfig {
            phi: Phi::SoftplusEps,
            ..FlowConfig::default()
        }),
        other => Err(PyValueError::new_err(format!("unknown feature map {other:?}"))),
    }
}

/// Flow attention of `q` ([n, d]) over `k` ([m, d]) and `v` ([m, d_v]).
#[pyfunction]
#[pyo3(signature = (q, k, v, phi = "sigmoid"))]
pub fn flow_attention(q: Vec<Vec<f64>>, k: Vec<Vec<f64>>, v: Vec<Vec<f64>>, phi: &str) -> PyResult<Vec<Vec<f64>>> {
    let out = hattflow::flow_attention(&matrix("q", &q)?, &matrix("k", &k)?, &matrix("v", &v)?, &flow_config(phi)?)
        .map_err(err)?;
    Ok(out.to_rows())
}

/// Per-source and per-sink conservation sums; each should be 1.
#[pyfunction]
#[pyo3(signature = (q, k, phi = "sigmoid"))]
pub fn conservation_sums(q: Vec<Vec<f64>>, k: Vec<Vec<f64>>, phi: &str) -> PyResult<(Vec<f64>, Vec<f64>)> {
    conservation(&matrix("q", &q)?, &matrix("k", &k)?, &flow_config(phi)?).map_err(err)
}

#[pyfunction]
pub fn softmax_attention(q: Vec<Vec<f64>>, k: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let out = softmax(&matrix("q", &q)?, &matrix("k", &k)?, &matrix("v", &v)?).map_err(err)?;
    Ok(out.to_rows())
}

/// Hierarchy mask of a token sequence from its `len - 1` neighbour affinities.
#[pyfunction]
pub fn hierarchy_mask(affinities: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    Ok(build_mask_1d(&Tensor::vector(affinities)).map_err(err)?.c.to_rows())
}

/// Hierarchy mask of a patch grid from horizontal and vertical affinities.
#[pyfunction]
pub fn hierarchy_mask_2d(rows: usize, cols: usize, a_h: Vec<f64>, a_v: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    Ok(build_mask_2d(rows, cols, &a_h, &a_v).map_err(err)?.c.to_rows())
}

/// Symmetric contrastive loss between paired unit embeddings.
#[pyfunction]
pub fn clip_loss(u: Vec<Vec<f64>>, v: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    clip_loss_rows(&u, &v, tau).map_err(err)
}

/// `[(k, R@K, mR@K)]` over videos matched by name; videos without
/// predictions count as empty.
#[pyfunction]
pub fn evaluate_jsonl(pred: &str, gt: &str, ks: Vec<usize>) -> PyResult<Vec<(usize, f64, f64)>> {
    let preds = read_triplets_jsonl(pred).map_err(err)?;
    let gts = read_triplets_jsonl(gt).map_err(err)?;
    let pairs = gts
        .into_iter()
        .map(|g| {
            let p = match preds.iter().find(|p| p.video == g.video) {
                Some(p) => p.clone(),
                None => TripletSet::new(g.video.clone(), g.frames, Vec::new())?,
            };
            Ok((p, g))
        })
        .collect::<hattflow::Result<Vec<_>>>()
        .map_err(err)?;
    let rows = evaluate(&pairs, &ks).map_err(err)?;
    Ok(rows.into_iter().map(|r| (r.k, r.recall, r.mean_recall)).collect())
}

/// Ground-truth triplets of the first `scenes` synthetic scenes as JSONL.
#[pyfunction]
#[pyo3(signature = (scenes, seed = 0))]
pub fn synthetic_triplets(scenes: usize, seed: u64) -> PyResult<String> {
    let world = SynthWorld::new(SynthSpec {
        seed,
        ..SynthSpec::default()
    })
    .map_err(err)?;
    let sets: Vec<TripletSet> = (0..scenes).map(|i| world.scene(i).gt).collect();
    write_triplets_jsonl(&sets).map_err(err)
}

/// `[(component, max relative error)]` for every gradient-checked component.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
pub fn gradcheck(seed: u64) -> PyResult<Vec<(String, f64)>> {
    let rows = gradcheck_report(seed).map_err(err)?;
    Ok(rows.into_iter().map(|r| (r.component, r.max_rel_error)).collect())
}

#[pymodule]
fn hattflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(flow_attention, m)?)?;
    m.add_function(wrap_pyfunction!(conservation_sums, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_attention, m)?)?;
    m.add_function(wrap_pyfunction!(hierarchy_mask, m)?)?;
    m.add_function(wrap_pyfunction!(hierarchy_mask_2d, m)?)?;
    m.add_function(wrap_pyfunction!(clip_loss, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_jsonl, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_triplets, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
