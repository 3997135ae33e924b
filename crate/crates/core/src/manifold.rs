//! Geodesic distance estimation on a k-nearest-neighbor graph, and
//! Riemannian diagnostics of a decoder: the pull-back metric, condition
//! number, magnification factor, and discretized curve energy.

use crate::diffcore::{jacobian, DiffError, DiffFn, DiffResult, Tensor};
use crate::linalg;
use rayon::prelude::*;
use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// Symmetric neighbor graph over a stored point set. Edge weights are the
/// Euclidean distances between the connected points.
#[derive(Debug, Clone)]
pub struct NeighborGraph {
    points: Tensor,
    dim: usize,
    k: usize,
    adj: Vec<Vec<(usize, f64)>>,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

impl NeighborGraph {
    /// Union-symmetrized k-nearest-neighbor graph over the rows of
    /// `points` (`[N,D]`). Distance ties break toward the smaller index,
    /// so construction is fully deterministic.
    pub fn build(points: &Tensor, k: usize) -> DiffResult<Self> {
        let (n, dim) = match *points.shape() {
            [n, d] => (n, d),
            _ => {
                return Err(DiffError::InvalidShape {
                    op: "knn_graph",
                    shape: points.shape().to_vec(),
                    detail: "expected [N,D] points".into(),
                })
            }
        };
        if k == 0 || n < k + 1 {
            return Err(DiffError::Domain {
                op: "knn_graph",
                detail: format!("need at least k+1 = {} points, got {n}", k + 1),
            });
        }
        let row = |i: usize| &points.data()[i * dim..(i + 1) * dim];

        // Per-node nearest lists in parallel; the point set is read-only.
        let nearest: Vec<Vec<(usize, f64)>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut cands: Vec<(usize, f64)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| (j, euclid(row(i), row(j))))
                    .collect();
                cands.sort_by(|a, b| {
                    a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0))
                });
                cands.truncate(k);
                cands
            })
            .collect();

        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (i, list) in nearest.iter().enumerate() {
            for &(j, w) in list {
                adj[i].push((j, w));
                adj[j].push((i, w));
            }
        }
        for list in adj.iter_mut() {
            list.sort_by_key(|&(j, _)| j);
            list.dedup_by_key(|&mut (j, _)| j);
        }
        Ok(Self {
            points: points.clone(),
            dim,
            k,
            adj,
        })
    }

    #[cfg(test)]
    fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Self {
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(i, j, w) in edges {
            adj[i].push((j, w));
            adj[j].push((i, w));
        }
        for list in adj.iter_mut() {
            list.sort_by_key(|&(j, _)| j);
        }
        Self {
            points: Tensor::zeros(&[n, 1]),
            dim: 1,
            k: 1,
            adj,
        }
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adj[i]
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points.data()[i * self.dim..(i + 1) * self.dim]
    }

    /// Shortest-path distance from `src` to every node; `None` marks
    /// unreachable nodes.
    pub fn distances_from(&self, src: usize) -> Vec<Option<f64>> {
        let n = self.adj.len();
        let mut dist: Vec<f64> = vec![f64::INFINITY; n];
        let mut done = vec![false; n];
        dist[src] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(HeapEntry {
            dist: 0.0,
            node: src,
        });
        while let Some(HeapEntry { dist: d, node }) = heap.pop() {
            if done[node] {
                continue;
            }
            done[node] = true;
            for &(j, w) in &self.adj[node] {
                let cand = d + w;
                if cand < dist[j] {
                    dist[j] = cand;
                    heap.push(HeapEntry {
                        dist: cand,
                        node: j,
                    });
                }
            }
        }
        dist.into_iter()
            .map(|d| if d.is_finite() { Some(d) } else { None })
            .collect()
    }

    /// Graph geodesic between two nodes, `None` when disconnected.
    pub fn geodesic_distance(&self, i: usize, j: usize) -> Option<f64> {
        if i == j {
            return Some(0.0);
        }
        self.distances_from(i)[j]
    }

    /// Geodesic between two nodes with the Euclidean fallback for
    /// disconnected pairs: straight-line distance times `penalty`. The flag
    /// reports whether the fallback fired.
    pub fn geodesic_or_penalized(&self, i: usize, j: usize, penalty: f64) -> (f64, bool) {
        match self.geodesic_distance(i, j) {
            Some(d) => (d, false),
            None => (euclid(self.point(i), self.point(j)) * penalty, true),
        }
    }

    /// Pairwise geodesics between the listed nodes as an `[m,m]` matrix.
    /// Unreachable pairs take the penalized Euclidean fallback; the count
    /// of such pairs comes back alongside. The matrix is exactly symmetric:
    /// each unordered pair is computed once, from its smaller node.
    pub fn geodesic_matrix(&self, nodes: &[usize], penalty: f64) -> (Tensor, usize) {
        let m = nodes.len();
        let rows: Vec<Vec<Option<f64>>> = nodes
            .par_iter()
            .map(|&src| self.distances_from(src))
            .collect();
        let mut out = vec![0.0; m * m];
        let mut fallbacks = 0;
        for a in 0..m {
            for b in a + 1..m {
                // When several listed entries alias one node, pick the row
                // whose source node index is smaller for determinism.
                let (ra, ta) = if nodes[a] <= nodes[b] { (a, b) } else { (b, a) };
                let d = match rows[ra][nodes[ta]] {
                    Some(d) => d,
                    None => {
                        fallbacks += 1;
                        euclid(self.point(nodes[a]), self.point(nodes[b])) * penalty
                    }
                };
                out[a * m + b] = d;
                out[b * m + a] = d;
            }
        }
        (Tensor::new(vec![m, m], out).unwrap(), fallbacks)
    }
}

#[derive(PartialEq)]
struct HeapEntry {
    dist: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on distance, index as the deterministic tiebreak.
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Pull-back Riemannian metric of a decoder at one latent point.
#[derive(Debug, Clone)]
pub struct MetricTensor {
    metric: Tensor,
    latent: Tensor,
}

impl MetricTensor {
    pub fn matrix(&self) -> &Tensor {
        &self.metric
    }

    pub fn latent(&self) -> &Tensor {
        &self.latent
    }

    pub fn dim(&self) -> usize {
        self.metric.shape()[0]
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let n = self.dim();
        linalg::sym_eig(self.metric.data(), n).0
    }

    /// Ratio of the longest to shortest principal axis of the decoder's
    /// local linearization: sqrt of the metric's eigenvalue ratio.
    /// Infinite when the metric is singular.
    pub fn condition_number(&self) -> f64 {
        let eigs = self.eigenvalues();
        let max = *eigs.last().unwrap();
        let min = eigs[0].max(0.0);
        if min <= f64::MIN_POSITIVE * max.max(1.0) {
            f64::INFINITY
        } else {
            (max / min).sqrt()
        }
    }

    /// Magnification factor sqrt(det M): the local volume scaling from
    /// latent to output space. Degenerate (rank-deficient) metrics are an
    /// error rather than a silent zero.
    pub fn magnification_factor(&self) -> DiffResult<f64> {
        let det: f64 = self.eigenvalues().iter().map(|l| l.max(0.0)).product();
        if det <= 0.0 {
            return Err(DiffError::Domain {
                op: "magnification_factor",
                detail: "metric is singular; the Jacobian lost rank".into(),
            });
        }
        Ok(det.sqrt())
    }
}

/// M = J^T J with J the decoder Jacobian at `z`, symmetrized to wash out
/// roundoff in the product.
pub fn pullback_metric(decoder: &dyn DiffFn, z: &Tensor) -> DiffResult<MetricTensor> {
    let jac = jacobian(decoder, z)?;
    let (rows, cols) = (jac.shape()[0], jac.shape()[1]);
    let mut m = vec![0.0; cols * cols];
    for a in 0..cols {
        for b in a..cols {
            let mut acc = 0.0;
            for r in 0..rows {
                acc += jac.data()[r * cols + a] * jac.data()[r * cols + b];
            }
            m[a * cols + b] = acc;
            m[b * cols + a] = acc;
        }
    }
    Ok(MetricTensor {
        metric: Tensor::new(vec![cols, cols], m)?,
        latent: z.clone(),
    })
}

/// Condition number straight from a rectangular Jacobian `[N,J]`: the ratio
/// of its extreme singular values.
pub fn condition_number(jac: &Tensor) -> DiffResult<f64> {
    let (rows, cols) = match *jac.shape() {
        [r, c] => (r, c),
        _ => {
            return Err(DiffError::InvalidShape {
                op: "condition_number",
                shape: jac.shape().to_vec(),
                detail: "expected a rank-2 Jacobian".into(),
            })
        }
    };
    let sv = linalg::singular_values(jac.data(), rows, cols);
    let max = sv[0];
    let min = sv[sv.len() - 1];
    Ok(if min <= f64::MIN_POSITIVE * max.max(1.0) {
        f64::INFINITY
    } else {
        max / min
    })
}

/// Magnification factor of a decoder at `z`.
pub fn magnification_factor(decoder: &dyn DiffFn, z: &Tensor) -> DiffResult<f64> {
    pullback_metric(decoder, z)?.magnification_factor()
}

/// Batch statistic behind magnification-factor plots: each factor divided
/// by the batch mean, so a batch of equal factors maps to all ones.
pub fn normalized_mfs(mfs: &[f64]) -> DiffResult<Vec<f64>> {
    if mfs.is_empty() {
        return Err(DiffError::Domain {
            op: "normalized_mfs",
            detail: "empty batch".into(),
        });
    }
    let mean = mfs.iter().sum::<f64>() / mfs.len() as f64;
    if mean <= 0.0 {
        return Err(DiffError::Domain {
            op: "normalized_mfs",
            detail: format!("non-positive mean magnification {mean}"),
        });
    }
    Ok(mfs.iter().map(|m| m / mean).collect())
}

/// Discretized curve energy of a latent curve under the pull-back metric:
/// the integral of velocity^T M velocity along the curve.
///
/// `curve` holds P >= 3 samples `[P,J]` at uniform parameter spacing.
/// Velocities use central differences inside and one-sided differences at
/// the endpoints, with trapezoidal quadrature weights, so a straight line
/// through a flat metric integrates exactly.
pub fn curve_energy(decoder: &dyn DiffFn, curve: &Tensor) -> DiffResult<f64> {
    let (p, j) = match *curve.shape() {
        [p, j] if p >= 3 => (p, j),
        _ => {
            return Err(DiffError::InvalidShape {
                op: "curve_energy",
                shape: curve.shape().to_vec(),
                detail: "expected [P,J] with P >= 3".into(),
            })
        }
    };
    let ds = 1.0 / (p - 1) as f64;
    let sample = |i: usize| &curve.data()[i * j..(i + 1) * j];
    let mut total = 0.0;
    for i in 0..p {
        let vel: Vec<f64> = if i == 0 {
            sample(1)
                .iter()
                .zip(sample(0))
                .map(|(a, b)| (a - b) / ds)
                .collect()
        } else if i == p - 1 {
            sample(p - 1)
                .iter()
                .zip(sample(p - 2))
                .map(|(a, b)| (a - b) / ds)
                .collect()
        } else {
            sample(i + 1)
                .iter()
                .zip(sample(i - 1))
                .map(|(a, b)| (a - b) / (2.0 * ds))
                .collect()
        };
        let metric = pullback_metric(decoder, &Tensor::new(vec![j], sample(i).to_vec())?)?;
        let mut quad = 0.0;
        for a in 0..j {
            for b in 0..j {
                quad += vel[a] * metric.matrix().data()[a * j + b] * vel[b];
            }
        }
        let weight = if i == 0 || i == p - 1 { ds / 2.0 } else { ds };
        total += weight * quad;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Tape, Var};
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_points(seed: u64, n: usize, d: usize) -> Tensor {
        let mut rng = rng::seeded(seed);
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn test_collinear_points_link_neighbors() {
        let pts = Tensor::new(vec![3, 1], vec![0.0, 1.0, 2.0]).unwrap();
        let g = NeighborGraph::build(&pts, 1).unwrap();
        assert_eq!(g.neighbors(0), &[(1, 1.0)]);
        assert_eq!(g.neighbors(1), &[(0, 1.0), (2, 1.0)]);
        assert_eq!(g.neighbors(2), &[(1, 1.0)]);
    }

    #[test]
    fn test_union_symmetrization_keeps_one_sided_edges() {
        // Nearest of 2 is 1, but nearest of 1 is 0; the union keeps (1,2).
        let pts = Tensor::new(vec![3, 1], vec![0.0, 1.0, 2.5]).unwrap();
        let g = NeighborGraph::build(&pts, 1).unwrap();
        assert_eq!(g.neighbors(1).len(), 2);
        assert_eq!(g.neighbors(2), &[(1, 1.5)]);
    }

    #[test]
    fn test_identical_points_zero_weights() {
        let pts = Tensor::new(vec![4, 2], vec![0.3; 8]).unwrap();
        let g = NeighborGraph::build(&pts, 2).unwrap();
        for i in 0..4 {
            assert!(!g.neighbors(i).is_empty());
            for &(_, w) in g.neighbors(i) {
                assert_eq!(w, 0.0);
            }
        }
    }

    #[test]
    fn test_degree_at_least_k_against_brute_force() {
        let pts = random_points(1, 50, 2);
        let g = NeighborGraph::build(&pts, 4).unwrap();
        for i in 0..50 {
            assert!(g.neighbors(i).len() >= 4, "node {i} degree too small");
            // The k nearest by brute force must all be present.
            let mut dists: Vec<(usize, f64)> = (0..50)
                .filter(|&j| j != i)
                .map(|j| (j, euclid(g.point(i), g.point(j))))
                .collect();
            dists.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
            for &(j, _) in &dists[..4] {
                assert!(
                    g.neighbors(i).iter().any(|&(n, _)| n == j),
                    "node {i} missing neighbor {j}"
                );
            }
        }
    }

    #[test]
    fn test_build_rejects_too_few_points() {
        let pts = Tensor::new(vec![3, 1], vec![0.0, 1.0, 2.0]).unwrap();
        assert!(NeighborGraph::build(&pts, 3).is_err());
        assert!(NeighborGraph::build(&pts, 0).is_err());
    }

    #[test]
    fn test_geodesic_self_distance_zero() {
        let pts = random_points(2, 10, 3);
        let g = NeighborGraph::build(&pts, 3).unwrap();
        assert_eq!(g.geodesic_distance(4, 4), Some(0.0));
    }

    #[test]
    fn test_triangle_shortcut_beats_direct_edge() {
        // Direct edge i-j weighs 3; the two-hop path through k weighs 2.
        // Enumerating all simple paths: {i-j: 3, i-k-j: 2}, so 2 wins.
        let g = NeighborGraph::from_edges(3, &[(0, 2, 1.0), (2, 1, 1.0), (0, 1, 3.0)]);
        assert_eq!(g.geodesic_distance(0, 1), Some(2.0));
    }

    #[test]
    fn test_disconnected_pair_reports_none_and_fallback() {
        let g = NeighborGraph::from_edges(4, &[(0, 1, 1.0), (2, 3, 1.0)]);
        assert_eq!(g.geodesic_distance(0, 3), None);
        let (d, fell_back) = g.geodesic_or_penalized(0, 3, 1.5);
        assert!(fell_back);
        // Placeholder points are all zero, so the fallback distance is 0.
        assert_eq!(d, 0.0);
    }

    #[test]
    fn test_geodesic_dominates_euclidean() {
        let pts = random_points(3, 40, 2);
        let g = NeighborGraph::build(&pts, 4).unwrap();
        for i in 0..40 {
            for j in 0..40 {
                if let Some(d) = g.geodesic_distance(i, j) {
                    let e = euclid(g.point(i), g.point(j));
                    assert!(d >= e - 1e-12, "({i},{j}): geodesic {d} < euclid {e}");
                }
            }
        }
    }

    #[test]
    fn test_geodesic_is_a_metric_on_samples() {
        let pts = random_points(4, 30, 3);
        let g = NeighborGraph::build(&pts, 4).unwrap();
        let nodes: Vec<usize> = (0..30).collect();
        let (m, fallbacks) = g.geodesic_matrix(&nodes, 1.5);
        assert_eq!(fallbacks, 0, "random blob should be connected");
        for i in 0..30 {
            assert_eq!(m.data()[i * 30 + i], 0.0);
            for j in 0..30 {
                assert_eq!(m.data()[i * 30 + j], m.data()[j * 30 + i]);
                for l in 0..30 {
                    let lhs = m.data()[i * 30 + j];
                    let rhs = m.data()[i * 30 + l] + m.data()[l * 30 + j];
                    assert!(lhs <= rhs + 1e-9, "triangle violated at ({i},{j},{l})");
                }
            }
        }
    }

    #[test]
    fn test_geodesic_matrix_agrees_with_pairwise_calls() {
        let pts = random_points(5, 20, 2);
        let g = NeighborGraph::build(&pts, 3).unwrap();
        let nodes = [17, 2, 9, 4];
        let (m, _) = g.geodesic_matrix(&nodes, 1.5);
        for (a, &i) in nodes.iter().enumerate() {
            for (b, &j) in nodes.iter().enumerate() {
                let want = if i == j {
                    0.0
                } else {
                    g.geodesic_or_penalized(i.min(j), i.max(j), 1.5).0
                };
                assert_eq!(m.data()[a * 4 + b], want);
            }
        }
    }

    fn linear_decoder(a: Tensor) -> impl Fn(&Tape, &Var) -> DiffResult<Var> {
        move |tape: &Tape, z: &Var| {
            let av = tape.constant(a.clone())?;
            let cols = z.shape()[0];
            av.matmul(&z.reshape(&[cols, 1])?)?
                .reshape(&[a.shape()[0]])
        }
    }

    #[test]
    fn test_pullback_metric_of_linear_decoder_is_gram_matrix() {
        let a = Tensor::new(
            vec![4, 2],
            vec![1.0, 0.5, -0.3, 2.0, 0.0, 1.0, 1.5, -0.5],
        )
        .unwrap();
        let dec = linear_decoder(a.clone());
        for z in [[0.0, 0.0], [1.0, -2.0], [0.3, 0.7]] {
            let m = pullback_metric(&dec, &Tensor::vector(z.to_vec())).unwrap();
            // A^T A by hand.
            let mut want = [0.0; 4];
            for r in 0..4 {
                for i in 0..2 {
                    for j in 0..2 {
                        want[i * 2 + j] += a.data()[r * 2 + i] * a.data()[r * 2 + j];
                    }
                }
            }
            for (got, want) in m.matrix().data().iter().zip(want.iter()) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn test_identity_decoder_metric_is_identity() {
        let ident = |_tape: &Tape, z: &Var| -> DiffResult<Var> { z.mul_scalar(1.0) };
        let m = pullback_metric(&ident, &Tensor::vector(vec![0.4, -0.9])).unwrap();
        assert!((m.matrix().data()[0] - 1.0).abs() < 1e-14);
        assert!((m.matrix().data()[3] - 1.0).abs() < 1e-14);
        assert!(m.matrix().data()[1].abs() < 1e-14);
        assert_eq!(m.condition_number(), 1.0);
        assert_eq!(m.magnification_factor().unwrap(), 1.0);
    }

    #[test]
    fn test_metric_quadratic_form_matches_jacobian_norm() {
        let mut rng = rng::seeded(6);
        let w1 = Tensor::new(vec![8, 2], rng::gaussian_vec(&mut rng, 16)).unwrap();
        let w2 = Tensor::new(vec![5, 8], rng::gaussian_vec(&mut rng, 40)).unwrap();
        let dec = move |tape: &Tape, z: &Var| -> DiffResult<Var> {
            let w1v = tape.constant(w1.clone())?;
            let w2v = tape.constant(w2.clone())?;
            w2v.matmul(&w1v.matmul(&z.reshape(&[2, 1])?)?.tanh()?)?
                .reshape(&[5])
        };
        let z = Tensor::vector(vec![0.3, -0.5]);
        let m = pullback_metric(&dec, &z).unwrap();
        let jac = jacobian(&dec, &z).unwrap();
        for _ in 0..20 {
            let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let mut quad = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    quad += v[a] * m.matrix().data()[a * 2 + b] * v[b];
                }
            }
            let mut jv_norm = 0.0;
            for r in 0..5 {
                let jv = jac.data()[r * 2] * v[0] + jac.data()[r * 2 + 1] * v[1];
                jv_norm += jv * jv;
            }
            assert!((quad - jv_norm).abs() < 1e-8, "{quad} vs {jv_norm}");
        }
    }

    #[test]
    fn test_condition_number_oracle_values() {
        // Orthonormal columns: condition 1.
        let q = Tensor::new(vec![2, 2], vec![0.6, -0.8, 0.8, 0.6]).unwrap();
        assert!((condition_number(&q).unwrap() - 1.0).abs() < 1e-12);
        // diag(3,1) embedded in a taller matrix: condition 3.
        let d = Tensor::new(vec![3, 2], vec![3.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((condition_number(&d).unwrap() - 3.0).abs() < 1e-10);
        // Rank-deficient: infinity.
        let r = Tensor::new(vec![2, 2], vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(condition_number(&r).unwrap().is_infinite());
    }

    #[test]
    fn test_condition_number_matches_metric_eigens() {
        let mut rng = rng::seeded(7);
        for _ in 0..50 {
            let jac = Tensor::new(vec![6, 3], rng::gaussian_vec(&mut rng, 18)).unwrap();
            let direct = condition_number(&jac).unwrap();
            let mut m = vec![0.0; 9];
            for a in 0..3 {
                for b in 0..3 {
                    for r in 0..6 {
                        m[a * 3 + b] += jac.data()[r * 3 + a] * jac.data()[r * 3 + b];
                    }
                }
            }
            let eigs = linalg::sym_eig(&m, 3).0;
            let via_metric = (eigs[2] / eigs[0]).sqrt();
            assert!(
                (direct - via_metric).abs() / via_metric < 1e-8,
                "{direct} vs {via_metric}"
            );
        }
    }

    #[test]
    fn test_magnification_factor_oracle_values() {
        let dec = linear_decoder(
            Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 3.0]).unwrap(),
        );
        let mf = magnification_factor(&dec, &Tensor::vector(vec![0.1, 0.2])).unwrap();
        assert!((mf - 6.0).abs() < 1e-10);

        let degenerate = linear_decoder(
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 2.0, 4.0]).unwrap(),
        );
        assert!(magnification_factor(&degenerate, &Tensor::vector(vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn test_normalized_mfs_mean_one() {
        let norm = normalized_mfs(&[2.0, 2.0, 2.0]).unwrap();
        assert_eq!(norm, vec![1.0, 1.0, 1.0]);
        let norm2 = normalized_mfs(&[1.0, 3.0]).unwrap();
        assert_eq!(norm2, vec![0.5, 1.5]);
        assert!(normalized_mfs(&[]).is_err());
    }

    #[test]
    fn test_diagnostics_invariant_under_orthogonal_output_rotation() {
        // J -> QJ leaves both the condition number and the magnification
        // factor unchanged since Q^T Q = I.
        let a = Tensor::new(vec![2, 2], vec![1.2, 0.4, -0.3, 0.9]).unwrap();
        let q = Tensor::new(vec![2, 2], vec![0.6, -0.8, 0.8, 0.6]).unwrap();
        let qa = {
            let mut out = vec![0.0; 4];
            for i in 0..2 {
                for j in 0..2 {
                    for k in 0..2 {
                        out[i * 2 + j] += q.data()[i * 2 + k] * a.data()[k * 2 + j];
                    }
                }
            }
            Tensor::new(vec![2, 2], out).unwrap()
        };
        let z = Tensor::vector(vec![0.5, -0.1]);
        let d1 = linear_decoder(a);
        let d2 = linear_decoder(qa);
        let m1 = pullback_metric(&d1, &z).unwrap();
        let m2 = pullback_metric(&d2, &z).unwrap();
        assert!((m1.condition_number() - m2.condition_number()).abs() < 1e-8);
        assert!(
            (m1.magnification_factor().unwrap() - m2.magnification_factor().unwrap()).abs() < 1e-8
        );
    }

    #[test]
    fn test_curve_energy_constant_curve_is_zero() {
        let ident = |_tape: &Tape, z: &Var| -> DiffResult<Var> { z.mul_scalar(1.0) };
        let curve = Tensor::new(vec![5, 2], vec![0.3, -0.7].repeat(5)).unwrap();
        assert_eq!(curve_energy(&ident, &curve).unwrap(), 0.0);
    }

    #[test]
    fn test_curve_energy_straight_line_flat_metric() {
        // Identity decoder, z(s) = s*u: energy is exactly |u|^2.
        let ident = |_tape: &Tape, z: &Var| -> DiffResult<Var> { z.mul_scalar(1.0) };
        let u = [1.5, -2.0];
        let p = 9;
        let mut data = Vec::new();
        for i in 0..p {
            let s = i as f64 / (p - 1) as f64;
            data.push(s * u[0]);
            data.push(s * u[1]);
        }
        let curve = Tensor::new(vec![p, 2], data).unwrap();
        let want = u[0] * u[0] + u[1] * u[1];
        let got = curve_energy(&ident, &curve).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn test_curve_energy_penalizes_detours() {
        let ident = |_tape: &Tape, z: &Var| -> DiffResult<Var> { z.mul_scalar(1.0) };
        let p = 21;
        let line: Vec<f64> = (0..p)
            .flat_map(|i| {
                let s = i as f64 / (p - 1) as f64;
                [s, 0.0]
            })
            .collect();
        let detour: Vec<f64> = (0..p)
            .flat_map(|i| {
                let s = i as f64 / (p - 1) as f64;
                [s, 0.5 * (std::f64::consts::PI * s).sin()]
            })
            .collect();
        let e_line = curve_energy(&ident, &Tensor::new(vec![p, 2], line).unwrap()).unwrap();
        let e_detour = curve_energy(&ident, &Tensor::new(vec![p, 2], detour).unwrap()).unwrap();
        assert!(e_detour > e_line);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn prop_metric_psd_for_random_mlp_decoders(seed in 0u64..500) {
            let mut rng = rng::seeded(seed);
            let w1 = Tensor::new(vec![6, 2], rng::gaussian_vec(&mut rng, 12)).unwrap();
            let w2 = Tensor::new(vec![4, 6], rng::gaussian_vec(&mut rng, 24)).unwrap();
            let dec = move |tape: &Tape, z: &Var| -> DiffResult<Var> {
                let w1v = tape.constant(w1.clone())?;
                let w2v = tape.constant(w2.clone())?;
                w2v.matmul(&w1v.matmul(&z.reshape(&[2, 1])?)?.tanh()?)?.reshape(&[4])
            };
            let z = Tensor::vector(vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
            let m = pullback_metric(&dec, &z).unwrap();
            let d = m.matrix().data();
            prop_assert!((d[1] - d[2]).abs() < 1e-10, "asymmetric metric");
            for eig in m.eigenvalues() {
                prop_assert!(eig >= -1e-10, "negative eigenvalue {eig}");
            }
        }

        #[test]
        fn prop_geodesic_symmetric_from_either_end(seed in 0u64..200) {
            let pts = random_points(seed, 15, 2);
            let g = NeighborGraph::build(&pts, 3).unwrap();
            let a = (seed % 15) as usize;
            let b = ((seed / 15) % 15) as usize;
            match (g.geodesic_distance(a, b), g.geodesic_distance(b, a)) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                (None, None) => {}
                _ => prop_assert!(false, "reachability must be symmetric"),
            }
        }
    }
}
