//! Isomap: k-NN graph geodesics followed by classical MDS.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::symbolic::SubgoalObservation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub points: Vec<Vec<f64>>,
    pub source_ids: Vec<usize>,
    /// Top eigenvalues of the double-centred Gram matrix, descending.
    pub eigenvalues: Vec<f64>,
    pub warnings: Vec<String>,
}

impl Embedding {
    pub fn dims(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }
}

/// `(x, y, w cos ψ, w sin ψ)` of each representative state.
pub fn subgoal_features(obs: &[SubgoalObservation], heading_weight: f64) -> Vec<Vec<f64>> {
    obs.iter()
        .map(|o| {
            let s = &o.rep_state;
            vec![s.x, s.y, heading_weight * s.psi.cos(), heading_weight * s.psi.sin()]
        })
        .collect()
}

pub fn isomap_embed(
    obs: &[SubgoalObservation],
    k_nn: usize,
    d: usize,
    heading_weight: f64,
) -> Result<Embedding> {
    isomap_points(&subgoal_features(obs, heading_weight), k_nn, d)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Symmetric k-NN adjacency lists; neighbour ties broken by index.
pub fn knn_graph(points: &[Vec<f64>], k_nn: usize) -> Vec<Vec<(usize, f64)>> {
    let n = points.len();
    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        let mut others: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (j, euclid(&points[i], &points[j])))
            .collect();
        others.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        for &(j, w) in others.iter().take(k_nn) {
            adj[i].push((j, w));
            adj[j].push((i, w));
        }
    }
    for list in &mut adj {
        list.sort_by(|a, b| a.0.cmp(&b.0));
        list.dedup_by_key(|e| e.0);
    }
    adj
}

pub fn connected_components(adj: &[Vec<(usize, f64)>]) -> usize {
    let mut seen = vec![false; adj.len()];
    let mut count = 0;
    for s in 0..adj.len() {
        if seen[s] {
            continue;
        }
        count += 1;
        let mut stack = vec![s];
        seen[s] = true;
        while let Some(u) = stack.pop() {
            for &(v, _) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
    }
    count
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dijkstra(adj: &[Vec<(usize, f64)>], src: usize) -> Vec<f64> {
    let mut d = vec![f64::INFINITY; adj.len()];
    d[src] = 0.0;
    let mut heap = BinaryHeap::from([Entry(0.0, src)]);
    while let Some(Entry(du, u)) = heap.pop() {
        if du > d[u] {
            continue;
        }
        for &(v, w) in &adj[u] {
            let c = du + w;
            if c < d[v] {
                d[v] = c;
                heap.push(Entry(c, v));
            }
        }
    }
    d
}

/// All-pairs geodesic distances over the k-NN graph.
pub fn geodesic_distances(points: &[Vec<f64>], k_nn: usize) -> Result<DMatrix<f64>> {
    let adj = knn_graph(points, k_nn);
    let components = connected_components(&adj);
    if components > 1 {
        return Err(Error::DisconnectedGraph { components });
    }
    let n = points.len();
    let rows: Vec<Vec<f64>> = (0..n).into_par_iter().map(|s| dijkstra(&adj, s)).collect();
    let mut g = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    // Symmetrise away round-off between the two directions.
    for i in 0..n {
        for j in i + 1..n {
            let m = 0.5 * (g[(i, j)] + g[(j, i)]);
            g[(i, j)] = m;
            g[(j, i)] = m;
        }
    }
    Ok(g)
}

/// Double-centred Gram matrix `B = -½ J D² J`.
pub fn centred_gram(dist: &DMatrix<f64>) -> DMatrix<f64> {
    let n = dist.nrows();
    let d2 = dist.map(|x| x * x);
    let row_means: Vec<f64> = (0..n).map(|i| d2.row(i).mean()).collect();
    let total = d2.mean();
    DMatrix::from_fn(n, n, |i, j| -0.5 * (d2[(i, j)] - row_means[i] - row_means[j] + total))
}

/// Classical MDS of a distance matrix into `d` dimensions.
pub fn classical_mds(dist: &DMatrix<f64>, d: usize) -> Result<Embedding> {
    let n = dist.nrows();
    if n == 0 || dist.ncols() != n {
        return Err(Error::invalid("distance matrix must be square and non-empty"));
    }
    if d == 0 {
        return Err(Error::invalid("embedding dimension must be positive"));
    }
    let b = centred_gram(dist);
    let eig = SymmetricEigen::new(b.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let trace: f64 = b.trace().abs();
    let cutoff = 1e-10 * trace.max(f64::MIN_POSITIVE);
    let positive = order.iter().filter(|&&i| eig.eigenvalues[i] > cutoff).count();
    let mut warnings = Vec::new();
    if d > positive {
        warnings.push(format!(
            "reduced rank: {positive} positive eigenvalues for {d} dimensions, padding zeros"
        ));
    }
    let mut points = vec![vec![0.0; d]; n];
    let mut eigenvalues = Vec::with_capacity(d);
    for (k, &idx) in order.iter().take(d).enumerate() {
        let lambda = eig.eigenvalues[idx];
        if lambda <= cutoff {
            eigenvalues.push(0.0);
            continue;
        }
        eigenvalues.push(lambda);
        let col = eig.eigenvectors.column(idx);
        // Fix the sign so the largest-magnitude entry is positive.
        let pivot = col.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let s = if pivot < 0.0 { -lambda.sqrt() } else { lambda.sqrt() };
        for i in 0..n {
            points[i][k] = col[i] * s;
        }
    }
    Ok(Embedding {
        points,
        source_ids: (0..n).collect(),
        eigenvalues,
        warnings,
    })
}

pub fn isomap_points(points: &[Vec<f64>], k_nn: usize, d: usize) -> Result<Embedding> {
    if k_nn == 0 {
        return Err(Error::invalid("k_nn must be positive"));
    }
    if points.len() < k_nn + 1 {
        return Err(Error::InsufficientData(format!(
            "{} observations for k_nn = {k_nn}",
            points.len()
        )));
    }
    if points.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::invalid("non-finite feature"));
    }
    classical_mds(&geodesic_distances(points, k_nn)?, d)
}
