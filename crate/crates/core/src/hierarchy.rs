//! Hierarchy induction: neighbor merge scores, layer-wise affinities and the
//! constituent mask `C` consumed by hierarchy-aware attention.
//!
//! A 1D token sequence is handled as a `1 × len` lattice, a patch grid as a
//! `rows × cols` lattice. Lattice edges connect 4-neighbors; each edge carries
//! one affinity in `[0, 1]`. Mask entries are products of edge affinities
//! along a path between two positions:
//!
//! * 1D: the contiguous span between the two tokens;
//! * 2D: starting from the patch that comes first in row-major order, along
//!   its row to the other patch's column, then down that column.
//!
//! Both constructions are symmetric, have a unit diagonal, and the 2D rule
//! reduces to the 1D rule on a single-row grid.

use std::rc::Rc;

use crate::autodiff::{PathTable, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Neighbor structure of a `rows × cols` lattice.
#[derive(Clone, Debug)]
pub struct Lattice {
    pub rows: usize,
    pub cols: usize,
    /// Undirected edges `(a, b)` with `a < b`: horizontal edges in row-major
    /// order first, then vertical edges in row-major order.
    pub edges: Vec<(usize, usize)>,
    /// Directed arcs `(from, to)`, grouped by `from`.
    pub arcs: Vec<(usize, usize)>,
    /// For edge `e = (a, b)`, the index of arc `a → b`.
    pub forward_arc: Vec<usize>,
    /// For edge `e = (a, b)`, the index of arc `b → a`.
    pub backward_arc: Vec<usize>,
    pub arc_from: Rc<[usize]>,
    pub arc_to: Rc<[usize]>,
    pub paths: Rc<PathTable>,
}

impl Lattice {
    pub fn sequence(len: usize) -> Self {
        Self::grid(1, len)
    }

    pub fn grid(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "lattice must be non-empty");
        let id = |r: usize, c: usize| r * cols + c;
        let horizontal = rows * (cols - 1);
        let h_edge = |r: usize, c: usize| r * (cols - 1) + c;
        let v_edge = |r: usize, c: usize| horizontal + r * cols + c;

        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols - 1 {
                edges.push((id(r, c), id(r, c + 1)));
            }
        }
        for r in 0..rows - 1 {
            for c in 0..cols {
                edges.push((id(r, c), id(r + 1, c)));
            }
        }

        // arcs grouped by origin: left, right, up, down
        let mut arcs = Vec::new();
        let mut arc_edge = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let me = id(r, c);
                if c > 0 {
                    arcs.push((me, id(r, c - 1)));
                    arc_edge.push(h_edge(r, c - 1));
                }
                if c + 1 < cols {
                    arcs.push((me, id(r, c + 1)));
                    arc_edge.push(h_edge(r, c));
                }
                if r > 0 {
                    arcs.push((me, id(r - 1, c)));
                    arc_edge.push(v_edge(r - 1, c));
                }
                if r + 1 < rows {
                    arcs.push((me, id(r + 1, c)));
                    arc_edge.push(v_edge(r, c));
                }
            }
        }
        let mut forward_arc = vec![0; edges.len()];
        let mut backward_arc = vec![0; edges.len()];
        for (k, (&(from, _), &e)) in arcs.iter().zip(&arc_edge).enumerate() {
            if from == edges[e].0 {
                forward_arc[e] = k;
            } else {
                backward_arc[e] = k;
            }
        }

        let n = rows * cols;
        let mut paths = Vec::with_capacity(n * n);
        for p in 0..n {
            for q in 0..n {
                let (first, second) = if p <= q { (p, q) } else { (q, p) };
                let (r1, c1) = (first / cols, first % cols);
                let (r2, c2) = (second / cols, second % cols);
                let mut path = Vec::new();
                for c in c1.min(c2)..c1.max(c2) {
                    path.push(h_edge(r1, c));
                }
                for r in r1..r2 {
                    path.push(v_edge(r, c2));
                }
                paths.push(path);
            }
        }

        Self {
            rows,
            cols,
            arc_from: arcs.iter().map(|a| a.0).collect(),
            arc_to: arcs.iter().map(|a| a.1).collect(),
            edges,
            arcs,
            forward_arc,
            backward_arc,
            paths: Rc::new(PathTable {
                n,
                factors: horizontal + (rows - 1) * cols,
                paths,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }
}

/// Affinities produced by one encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyState {
    /// One value per lattice edge (`len - 1` values for a sequence).
    pub affinities: Vec<f64>,
    pub layer_index: usize,
    pub sigma_t: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyMask {
    pub c: Tensor,
}

impl HierarchyMask {
    pub fn len(&self) -> usize {
        self.c.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.len();
        (0..n).all(|i| (0..n).all(|j| self.c.at(i, j) == self.c.at(j, i)))
    }
}

/// Scores between adjacent tokens, in both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborScores {
    /// `s_{i,i+1} = (t_i W'_Q) · (t_{i+1} W'_K) / σ_t`, length `len - 1`.
    pub next: Tensor,
    /// `s_{i+1,i} = (t_{i+1} W'_Q) · (t_i W'_K) / σ_t`, length `len - 1`.
    pub prev: Tensor,
}

pub fn neighbor_scores(
    tokens: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    sigma_t: f64,
) -> Result<NeighborScores> {
    let (len, _) = tokens.dims2("neighbor_scores")?;
    if len < 2 {
        return Err(Error::contract("neighbor scores need at least two tokens"));
    }
    if !(sigma_t > 0.0) {
        return Err(Error::contract(format!("sigma_t must be positive, got {sigma_t}")));
    }
    let q = tokens.matmul(wq)?;
    let k = tokens.matmul(wk)?;
    if q.cols() != k.cols() {
        return Err(Error::shape("neighbor_scores", wq.shape(), wk.shape()));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / sigma_t;
    let next = (0..len - 1).map(|i| dot(q.row_slice(i), k.row_slice(i + 1))).collect();
    let prev = (0..len - 1).map(|i| dot(q.row_slice(i + 1), k.row_slice(i))).collect();
    Ok(NeighborScores {
        next: Tensor::vector(next),
        prev: Tensor::vector(prev),
    })
}

/// Merge probabilities per token: column 0 toward the next token, column 1
/// toward the previous one. Boundary tokens put all mass on their only
/// neighbor.
pub fn neighbor_probs(s: &NeighborScores) -> Result<Tensor> {
    let pairs = s.next.numel();
    if s.prev.numel() != pairs {
        return Err(Error::shape("neighbor_probs", s.next.shape(), s.prev.shape()));
    }
    let len = pairs + 1;
    let mut p = vec![0.0; len * 2];
    p[0] = 1.0;
    p[(len - 1) * 2 + 1] = 1.0;
    for i in 1..len - 1 {
        let right = s.next.data()[i];
        let left = s.prev.data()[i - 1];
        let max = right.max(left);
        let (er, el) = ((right - max).exp(), (left - max).exp());
        p[i * 2] = er / (er + el);
        p[i * 2 + 1] = el / (er + el);
    }
    Tensor::new(vec![len, 2], p)
}

/// Geometric mean `â_i = √(p_{i,i+1} · p_{i+1,i})`.
pub fn affinity(p: &Tensor) -> Result<Tensor> {
    let (len, two) = p.dims2("affinity")?;
    if two != 2 || len < 2 {
        return Err(Error::shape("affinity", p.shape(), &[len.max(2), 2]));
    }
    Ok(Tensor::vector(
        (0..len - 1).map(|i| (p.at(i, 0) * p.at(i + 1, 1)).sqrt()).collect(),
    ))
}

fn check_unit_interval(op: &'static str, t: &Tensor) -> Result<()> {
    if let Some(v) = t.data().iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::domain(op, format!("value {v} outside [0, 1]")));
    }
    Ok(())
}

/// `a^l = a^{l-1} + (1 - a^{l-1}) · â^l`.
pub fn affinity_update(prev: &Tensor, new_hat: &Tensor) -> Result<Tensor> {
    check_unit_interval("affinity_update", prev)?;
    check_unit_interval("affinity_update", new_hat)?;
    if prev.numel() != new_hat.numel() {
        return Err(Error::shape("affinity_update", prev.shape(), new_hat.shape()));
    }
    let data = prev
        .data()
        .iter()
        .zip(new_hat.data())
        .map(|(a, h)| (a + (1.0 - a) * h).min(1.0))
        .collect();
    Ok(Tensor::from_parts(prev.shape().to_vec(), data))
}

fn mask_from_lattice(lattice: &Lattice, affinities: &[f64]) -> Result<HierarchyMask> {
    let table = &lattice.paths;
    if affinities.len() != table.factors {
        return Err(Error::shape("build_mask", &[affinities.len()], &[table.factors]));
    }
    check_unit_interval("build_mask", &Tensor::vector(affinities.to_vec()))?;
    let data = table
        .paths
        .iter()
        .map(|path| path.iter().map(|&k| affinities[k]).product())
        .collect();
    Ok(HierarchyMask {
        c: Tensor::from_parts(vec![table.n, table.n], data),
    })
}

/// `C[i, j] = Π_{k = min(i,j)}^{max(i,j) - 1} a[k]`, `C[i, i] = 1`.
pub fn build_mask_1d(a: &Tensor) -> Result<HierarchyMask> {
    mask_from_lattice(&Lattice::sequence(a.numel() + 1), a.data())
}

/// Mask over the `rows · cols` patches of a grid (row-major patch order).
///
/// `a_h` holds `rows × (cols - 1)` horizontal affinities in row-major order
/// (entry `(r, c)` joins patches `(r, c)` and `(r, c + 1)`); `a_v` holds
/// `(rows - 1) × cols` vertical affinities (entry `(r, c)` joins `(r, c)` and
/// `(r + 1, c)`).
pub fn build_mask_2d(rows: usize, cols: usize, a_h: &[f64], a_v: &[f64]) -> Result<HierarchyMask> {
    if rows == 0 || cols == 0 {
        return Err(Error::contract("grid must be non-empty"));
    }
    if a_h.len() != rows * (cols - 1) {
        return Err(Error::shape("build_mask_2d", &[a_h.len()], &[rows, cols - 1]));
    }
    if a_v.len() != (rows - 1) * cols {
        return Err(Error::shape("build_mask_2d", &[a_v.len()], &[rows - 1, cols]));
    }
    let mut all = a_h.to_vec();
    all.extend_from_slice(a_v);
    mask_from_lattice(&Lattice::grid(rows, cols), &all)
}

/// Records `â` for every lattice edge from layer input `z: [P, d]`.
///
/// Merge probabilities are kept in log space; the geometric mean becomes
/// `exp((log p_fwd + log p_bwd) / 2)`, which stays finite and differentiable
/// when a probability underflows.
pub fn affinity_var(
    tape: &mut Tape,
    z: Var,
    wq: Var,
    wk: Var,
    sigma_t: f64,
    lattice: &Lattice,
) -> Result<Var> {
    if lattice.num_edges() == 0 {
        return Err(Error::contract("affinities need at least two positions"));
    }
    if tape.value(z).rows() != lattice.len() {
        return Err(Error::shape("affinity", tape.value(z).shape(), &[lattice.len()]));
    }
    let q = tape.matmul(z, wq)?;
    let k = tape.matmul(z, wk)?;
    let q_arc = tape.gather_rows(q, lattice.arc_from.clone())?;
    let k_arc = tape.gather_rows(k, lattice.arc_to.clone())?;
    let prod = tape.mul(q_arc, k_arc)?;
    let scores = tape.sum_rows(prod)?;
    let scores = tape.scale(scores, 1.0 / sigma_t);
    let log_p = tape.segment_log_softmax(scores, lattice.arc_from.clone())?;
    let fwd = tape.gather_rows(log_p, lattice.forward_arc.clone().into())?;
    let bwd = tape.gather_rows(log_p, lattice.backward_arc.clone().into())?;
    let both = tape.add(fwd, bwd)?;
    let half = tape.scale(both, 0.5);
    Ok(tape.exp(half))
}

/// Records `prev + (1 - prev) ⊙ â`.
pub fn affinity_update_var(tape: &mut Tape, prev: Var, new_hat: Var) -> Result<Var> {
    let room = tape.one_minus(prev);
    let gain = tape.mul(room, new_hat)?;
    tape.add(prev, gain)
}

/// Records the path-product mask for `affinities: [E, 1]`.
pub fn mask_var(tape: &mut Tape, affinities: Var, lattice: &Lattice) -> Result<Var> {
    tape.path_product(affinities, lattice.paths.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    #[test]
    fn unit_inner_product_score() {
        let t = Tensor::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
        let s = neighbor_scores(&t, &Tensor::eye(2), &Tensor::eye(2), 1.0).unwrap();
        assert_eq!(s.next.data(), &[1.0]);
        assert_eq!(s.prev.data(), &[1.0]);
    }

    #[test]
    fn orthogonal_neighbors_score_zero() {
        let t = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let s = neighbor_scores(&t, &Tensor::eye(2), &Tensor::eye(2), 1.0).unwrap();
        assert_eq!(s.next.data(), &[0.0]);
    }

    #[test]
    fn scores_need_two_tokens() {
        let t = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let e = neighbor_scores(&t, &Tensor::eye(2), &Tensor::eye(2), 1.0).unwrap_err();
        assert!(matches!(e, Error::Contract(_)));
        let t2 = Tensor::zeros(&[3, 2]);
        assert!(neighbor_scores(&t2, &Tensor::eye(2), &Tensor::eye(2), 0.0).is_err());
    }

    #[test]
    fn two_token_probabilities_are_one() {
        let s = NeighborScores {
            next: Tensor::vector(vec![3.7]),
            prev: Tensor::vector(vec![-1.0]),
        };
        let p = neighbor_probs(&s).unwrap();
        assert_eq!(p.at(0, 0), 1.0);
        assert_eq!(p.at(1, 1), 1.0);
        assert_eq!(affinity(&p).unwrap().data(), &[1.0]);
    }

    #[test]
    fn interior_softmax_values() {
        // token 1 scores 2 toward token 2 and 0 toward token 0
        let s = NeighborScores {
            next: Tensor::vector(vec![0.0, 2.0]),
            prev: Tensor::vector(vec![0.0, 0.0]),
        };
        let p = neighbor_probs(&s).unwrap();
        assert!(close(p.at(1, 0), 0.880_797_077_977_882_3, 1e-12));
        assert!(close(p.at(1, 1), 0.119_202_922_022_117_6, 1e-12));

        let equal = NeighborScores {
            next: Tensor::vector(vec![1.5, 1.5]),
            prev: Tensor::vector(vec![1.5, 1.5]),
        };
        let p = neighbor_probs(&equal).unwrap();
        assert_eq!((p.at(1, 0), p.at(1, 1)), (0.5, 0.5));
    }

    #[test]
    fn geometric_mean_affinity() {
        let p = Tensor::from_rows(&[[0.880_797_077_977_882_3, 0.119_2], [0.5, 0.5]]).unwrap();
        let a = affinity(&p).unwrap();
        let expected = (0.880_797_077_977_882_3f64 * 0.5).sqrt();
        assert!(close(a.data()[0], expected, 1e-15));
        assert!(close(a.data()[0], 0.6636, 1e-4));

        let zero = Tensor::from_rows(&[[0.0, 1.0], [0.3, 0.7]]).unwrap();
        assert_eq!(affinity(&zero).unwrap().data(), &[0.0]);
    }

    #[test]
    fn update_rule() {
        let z = Tensor::vector(vec![0.0, 0.5, 0.3]);
        let h = Tensor::vector(vec![0.6, 0.5, 1.0]);
        let a = affinity_update(&z, &h).unwrap();
        assert!(close(a.data()[0], 0.6, 1e-15));
        assert_eq!(a.data()[1], 0.75);
        assert_eq!(a.data()[2], 1.0);
        // absorbing
        let again = affinity_update(&a, &Tensor::vector(vec![0.1, 0.0, 0.0])).unwrap();
        assert_eq!(again.data()[2], 1.0);
        assert!(affinity_update(&Tensor::vector(vec![1.2]), &Tensor::vector(vec![0.1])).is_err());
    }

    #[test]
    fn mask_1d_cases() {
        let ones = build_mask_1d(&Tensor::vector(vec![1.0; 4])).unwrap();
        assert_eq!(ones.c, Tensor::ones(&[5, 5]));
        let zeros = build_mask_1d(&Tensor::vector(vec![0.0; 4])).unwrap();
        assert_eq!(zeros.c, Tensor::eye(5));
        let m = build_mask_1d(&Tensor::vector(vec![0.5, 0.8])).unwrap();
        assert!(close(m.c.at(0, 2), 0.4, 1e-15));
        assert_eq!(m.c.at(0, 1), 0.5);
        assert_eq!(m.c.at(1, 2), 0.8);
        assert!(m.is_symmetric());
    }

    #[test]
    fn mask_2d_cases() {
        let ones = build_mask_2d(3, 3, &[1.0; 6], &[1.0; 6]).unwrap();
        assert_eq!(ones.c, Tensor::ones(&[9, 9]));
        let zeros = build_mask_2d(2, 3, &[0.0; 4], &[0.0; 3]).unwrap();
        assert_eq!(zeros.c, Tensor::eye(6));
        let half = build_mask_2d(2, 2, &[0.5; 2], &[0.5; 2]).unwrap();
        // patches 0 = (0,0) and 3 = (1,1)
        assert_eq!(half.c.at(0, 3), 0.25);
        assert_eq!(half.c.at(1, 2), 0.25);
        assert!(half.is_symmetric());
        assert!(build_mask_2d(2, 2, &[0.5; 3], &[0.5; 2]).is_err());
    }

    #[test]
    fn single_row_grid_reduces_to_sequence() {
        let a = [0.9, 0.2, 0.7];
        let grid = build_mask_2d(1, 4, &a, &[]).unwrap();
        let seq = build_mask_1d(&Tensor::vector(a.to_vec())).unwrap();
        assert_eq!(grid, seq);
    }

    #[test]
    fn lattice_arcs_pair_up() {
        let lat = Lattice::grid(3, 4);
        assert_eq!(lat.num_edges(), 3 * 3 + 2 * 4);
        for (e, &(a, b)) in lat.edges.iter().enumerate() {
            assert_eq!(lat.arcs[lat.forward_arc[e]], (a, b));
            assert_eq!(lat.arcs[lat.backward_arc[e]], (b, a));
        }
    }

    #[test]
    fn var_affinity_matches_pure_pipeline() {
        let tokens = Tensor::from_fn(5, 3, |i, j| ((i * 3 + j) as f64 * 0.37).sin());
        let wq = Tensor::from_fn(3, 2, |i, j| ((i + 2 * j) as f64 * 0.61).cos());
        let wk = Tensor::from_fn(3, 2, |i, j| ((3 * i + j) as f64 * 0.23).sin());
        let sigma = 0.7;
        let s = neighbor_scores(&tokens, &wq, &wk, sigma).unwrap();
        let expected = affinity(&neighbor_probs(&s).unwrap()).unwrap();

        let mut tape = Tape::new();
        let (z, q, k) = (tape.leaf(tokens), tape.leaf(wq), tape.leaf(wk));
        let a = affinity_var(&mut tape, z, q, k, sigma, &Lattice::sequence(5)).unwrap();
        let got = tape.value(a);
        for (x, y) in got.data().iter().zip(expected.data()) {
            assert!(close(*x, *y, 1e-14), "{x} vs {y}");
        }
    }
}
