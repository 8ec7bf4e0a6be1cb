//! Independent reference implementations used as test oracles. They are
//! written with plain loops and share no code with the library beyond data
//! types.

#![allow(dead_code)]

use hattflow::encoder::EncoderLayerParams;
use hattflow::metrics::{time_iou, tube_iou, Triplet, TripletSet, Tube};
use hattflow::params::{FeedForward, LayerNorm, Linear, ParamStore};
use hattflow::Tensor;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Flow attention with sigmoid feature map, transcribed line by line.
pub fn flow_attention_loops(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<Vec<f64>> {
    let (n, m, dv) = (q.rows(), k.rows(), v.cols());
    let phi_q: Vec<Vec<f64>> = (0..n).map(|i| q.row_slice(i).iter().map(|&x| sigmoid(x)).collect()).collect();
    let phi_k: Vec<Vec<f64>> = (0..m).map(|j| k.row_slice(j).iter().map(|&x| sigmoid(x)).collect()).collect();

    // capacities
    let mut incoming = vec![0.0; n];
    for i in 0..n {
        for j in 0..m {
            incoming[i] += dot(&phi_q[i], &phi_k[j]);
        }
    }
    let mut outgoing = vec![0.0; m];
    for j in 0..m {
        for i in 0..n {
            outgoing[j] += dot(&phi_k[j], &phi_q[i]);
        }
    }
    // conserved flows
    let mut conserved_in = vec![0.0; n];
    for i in 0..n {
        for j in 0..m {
            conserved_in[i] += dot(&phi_q[i], &phi_k[j]) / outgoing[j];
        }
    }
    let mut conserved_out = vec![0.0; m];
    for j in 0..m {
        for i in 0..n {
            conserved_out[j] += dot(&phi_k[j], &phi_q[i]) / incoming[i];
        }
    }
    // competition
    let max = conserved_out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = conserved_out.iter().map(|o| (o - max).exp()).sum();
    let mut v_hat = vec![vec![0.0; dv]; m];
    for j in 0..m {
        let w = (conserved_out[j] - max).exp() / z;
        for c in 0..dv {
            v_hat[j][c] = w * v.at(j, c);
        }
    }
    // aggregation and allocation
    let mut out = vec![vec![0.0; dv]; n];
    for i in 0..n {
        for j in 0..m {
            let weight = dot(&phi_q[i], &phi_k[j]) / incoming[i];
            for c in 0..dv {
                out[i][c] += weight * v_hat[j][c];
            }
        }
        let gate = sigmoid(conserved_in[i]);
        for c in 0..dv {
            out[i][c] *= gate;
        }
    }
    out
}

fn mat(store: &ParamStore, id: hattflow::params::ParamId) -> &Tensor {
    store.get(id)
}

fn matmul(a: &[Vec<f64>], b: &Tensor) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| (0..b.cols()).map(|c| (0..b.rows()).map(|r| row[r] * b.at(r, c)).sum()).collect())
        .collect()
}

fn linear(store: &ParamStore, l: &Linear, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut y = matmul(x, mat(store, l.weight));
    if let Some(b) = l.bias {
        let b = mat(store, b);
        for row in &mut y {
            for (c, v) in row.iter_mut().enumerate() {
                *v += b.data()[c];
            }
        }
    }
    y
}

fn layer_norm(store: &ParamStore, ln: &LayerNorm, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (g, b) = (mat(store, ln.gamma), mat(store, ln.beta));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + ln.eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mean) / sd * g.data()[c] + b.data()[c])
                .collect()
        })
        .collect()
}

fn feed_forward(store: &ParamStore, f: &FeedForward, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let h = linear(store, &f.up, x);
    let act: Vec<Vec<f64>> = h.iter().map(|r| r.iter().map(|&v| v * sigmoid(v)).collect()).collect();
    linear(store, &f.down, &act)
}

fn add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// A standard pre-norm multi-head transformer encoder reading the same
/// parameters as the hierarchy encoder (neighbor projections unused).
pub fn plain_transformer(store: &ParamStore, layers: &[EncoderLayerParams], x: &Tensor) -> Vec<Vec<f64>> {
    let mut h = x.to_rows();
    for layer in layers {
        let z = layer_norm(store, &layer.ln_attn, &h);
        let q = matmul(&z, mat(store, layer.wq));
        let k = matmul(&z, mat(store, layer.wk));
        let v = matmul(&z, mat(store, layer.wv));
        let len = h.len();
        let dh = layer.head_dim;
        let mut joined = vec![vec![0.0; dh * layer.heads]; len];
        for head in 0..layer.heads {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..len {
                let scores: Vec<f64> = (0..len)
                    .map(|j| dot(&q[i][cols.clone()], &k[j][cols.clone()]) / (dh as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                for j in 0..len {
                    let w = (scores[j] - max).exp() / z;
                    for c in cols.clone() {
                        joined[i][c] += w * v[j][c];
                    }
                }
            }
        }
        let attn = matmul(&joined, mat(store, layer.wo));
        let x1 = add(&h, &attn);
        let z2 = layer_norm(store, &layer.ln_ffn, &x1);
        h = add(&x1, &feed_forward(store, &layer.ffn, &z2));
    }
    h
}

fn recallable(p: &Triplet, g: &Triplet) -> bool {
    p.r == g.r
        && p.s_cat == g.s_cat
        && p.o_cat == g.o_cat
        && tube_iou(&p.s_tube, &g.s_tube) > 0.5
        && tube_iou(&p.o_tube, &g.o_tube) > 0.5
}

/// Best one-to-one assignment of the top-`k` predictions by exhaustive
/// search over every partial injective assignment, maximizing total time
/// IOU. Returns the per-ground-truth credit (0 when unmatched) of the first
/// optimum found.
pub fn exhaustive_credit(pred: &TripletSet, gt: &TripletSet, k: usize) -> Vec<f64> {
    let top: Vec<&Triplet> = pred.ranking().into_iter().take(k).map(|i| &pred.triplets[i]).collect();
    let g = gt.triplets.len();
    let mut best = (f64::NEG_INFINITY, vec![0.0; g]);
    let mut used = vec![false; g];
    let mut credit = vec![0.0; g];

    #[allow(clippy::too_many_arguments)]
    fn search(
        p: usize,
        top: &[&Triplet],
        gt: &[Triplet],
        used: &mut [bool],
        credit: &mut [f64],
        total: f64,
        best: &mut (f64, Vec<f64>),
    ) {
        if p == top.len() {
            if total > best.0 + 1e-12 {
                *best = (total, credit.to_vec());
            }
            return;
        }
        search(p + 1, top, gt, used, credit, total, best);
        for (j, g) in gt.iter().enumerate() {
            if !used[j] && recallable(top[p], g) {
                let w = time_iou(top[p].interval(), g.interval());
                used[j] = true;
                credit[j] = w;
                search(p + 1, top, gt, used, credit, total + w, best);
                used[j] = false;
                credit[j] = 0.0;
            }
        }
    }
    search(0, &top, &gt.triplets, &mut used, &mut credit, 0.0, &mut best);
    best.1
}

pub fn best_total(pred: &TripletSet, gt: &TripletSet, k: usize) -> f64 {
    exhaustive_credit(pred, gt, k).iter().sum()
}

/// Every match uses a top-`k` prediction that can recall its ground truth,
/// with the right weight, and no prediction or ground truth is used twice.
pub fn is_valid_matching(pred: &TripletSet, gt: &TripletSet, k: usize, m: &[hattflow::metrics::Match]) -> bool {
    let top: Vec<usize> = pred.ranking().into_iter().take(k).collect();
    let mut preds: Vec<usize> = m.iter().map(|x| x.pred).collect();
    let mut gts: Vec<usize> = m.iter().map(|x| x.gt).collect();
    preds.sort_unstable();
    preds.dedup();
    gts.sort_unstable();
    gts.dedup();
    preds.len() == m.len()
        && gts.len() == m.len()
        && m.iter().all(|x| {
            let (p, g) = (&pred.triplets[x.pred], &gt.triplets[x.gt]);
            top.contains(&x.pred) && recallable(p, g) && x.weight == time_iou(p.interval(), g.interval())
        })
}

pub fn recall_oracle(pred: &TripletSet, gt: &TripletSet, k: usize) -> f64 {
    exhaustive_credit(pred, gt, k).iter().sum::<f64>() / gt.triplets.len() as f64
}

pub fn mean_recall_oracle(pred: &TripletSet, gt: &TripletSet, k: usize) -> f64 {
    let credit = exhaustive_credit(pred, gt, k);
    let mut cats: Vec<usize> = gt.triplets.iter().map(|t| t.r).collect();
    cats.sort_unstable();
    cats.dedup();
    let per: f64 = cats
        .iter()
        .map(|&c| {
            let idx: Vec<usize> = (0..gt.triplets.len()).filter(|&j| gt.triplets[j].r == c).collect();
            idx.iter().map(|&j| credit[j]).sum::<f64>() / idx.len() as f64
        })
        .sum();
    per / cats.len() as f64
}

/// Random instance with few categories and heavily overlapping tubes so
/// that many prediction/ground-truth pairs are matchable.
pub fn random_instance(rng: &mut impl rand::Rng, max_pred: usize, max_gt: usize) -> (TripletSet, TripletSet) {
    let frames = 8;
    let triplet = |rng: &mut dyn rand::RngCore, score: f64| {
        use rand::Rng as _;
        let t1 = rng.random_range(0..4);
        let t2 = rng.random_range(t1..frames);
        let shift = |rng: &mut dyn rand::RngCore| {
            let x: f64 = rng.random_range(0.0..0.6);
            [x, 0.0, x + 1.0, 1.0]
        };
        Triplet {
            r: rng.random_range(0..2),
            t1,
            t2,
            s_cat: 0,
            o_cat: rng.random_range(0..2),
            s_tube: Tube::constant(t1, t2, shift(rng)).unwrap(),
            o_tube: Tube::constant(t1, t2, shift(rng)).unwrap(),
            score,
        }
    };
    let np = rng.random_range(0..=max_pred);
    let ng = rng.random_range(1..=max_gt);
    let preds = (0..np)
        .map(|_| {
            let s = rng.random_range(0..4) as f64 / 4.0;
            triplet(rng, s)
        })
        .collect();
    let gts = (0..ng).map(|_| triplet(rng, 1.0)).collect();
    (
        TripletSet::new("v", frames, preds).unwrap(),
        TripletSet::new("v", frames, gts).unwrap(),
    )
}
