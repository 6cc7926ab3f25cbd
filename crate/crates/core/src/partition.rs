//! Time-to-go fitting, grid wavefronts, and the predicted partition of the
//! workspace into regions that share their first subgoal.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{angle_diff, dist, norm, sub, Bounds, Dataset, Environment, Polygon};
use crate::segment::Segment;

/// Learned time-to-go: `t = theta0 + theta1 * d_geo + theta2 * (1 - cos dpsi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtgModel {
    pub theta0: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub rms: f64,
}

impl TtgModel {
    /// A pure travel-time metric at speed `v`.
    pub fn constant_speed(v: f64) -> Self {
        Self {
            theta0: 0.0,
            theta1: 1.0 / v,
            theta2: 0.0,
            rms: 0.0,
        }
    }

    pub fn predict(&self, d_geo: f64, misalignment: f64) -> f64 {
        self.theta0 + self.theta1 * d_geo + self.theta2 * (1.0 - misalignment.cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: [f64; 2],
    pub spacing: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn covering(bounds: &Bounds, spacing: f64) -> Result<Self> {
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::invalid(format!("grid spacing {spacing}")));
        }
        // Round before ceil so exact multiples do not gain a sliver column.
        let count = |len: f64| ((len / spacing * 1e9).round() / 1e9).ceil().max(1.0) as usize;
        Ok(Self {
            origin: [bounds.xmin, bounds.ymin],
            spacing,
            nx: count(bounds.width()),
            ny: count(bounds.height()),
        })
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn ij(&self, idx: usize) -> (usize, usize) {
        (idx % self.nx, idx / self.nx)
    }

    pub fn center(&self, idx: usize) -> [f64; 2] {
        let (i, j) = self.ij(idx);
        [
            self.origin[0] + (i as f64 + 0.5) * self.spacing,
            self.origin[1] + (j as f64 + 0.5) * self.spacing,
        ]
    }

    pub fn cell_of(&self, p: [f64; 2]) -> Option<usize> {
        let fx = ((p[0] - self.origin[0]) / self.spacing).floor();
        let fy = ((p[1] - self.origin[1]) / self.spacing).floor();
        // Points on the far boundary belong to the last cell.
        let i = if fx == self.nx as f64 { fx - 1.0 } else { fx };
        let j = if fy == self.ny as f64 { fy - 1.0 } else { fy };
        (i >= 0.0 && j >= 0.0 && i < self.nx as f64 && j < self.ny as f64).then(|| self.index(i as usize, j as usize))
    }

    fn offset(&self, idx: usize, di: i64, dj: i64) -> Option<usize> {
        let (i, j) = self.ij(idx);
        let (ni, nj) = (i as i64 + di, j as i64 + dj);
        (ni >= 0 && nj >= 0 && ni < self.nx as i64 && nj < self.ny as i64).then(|| self.index(ni as usize, nj as usize))
    }
}

/// The 16 moves with the cells each one sweeps through besides its endpoints.
fn moves() -> Vec<((i64, i64), Vec<(i64, i64)>)> {
    let mut out = Vec::with_capacity(16);
    for (dx, dy) in [(1, 0), (0, 1), (1, 1), (2, 1), (1, 2)] {
        for (sx, sy) in [(1, 1), (-1, 1), (1, -1), (-1, -1)] {
            let (mx, my) = (dx * sx, dy * sy);
            if out.iter().any(|(m, _)| *m == (mx, my)) {
                continue;
            }
            let swept = match (dx, dy) {
                (1, 1) => vec![(sx, 0), (0, sy)],
                (2, 1) => vec![(sx, 0), (sx, sy)],
                (1, 2) => vec![(0, sy), (sx, sy)],
                _ => vec![],
            };
            out.push(((mx, my), swept));
        }
    }
    out
}

/// Cells whose centres lie outside every inflated obstacle.
pub fn free_cells(grid: &GridSpec, obstacles: &[Polygon]) -> Vec<bool> {
    (0..grid.len())
        .into_par_iter()
        .map(|c| {
            let p = grid.center(c);
            !obstacles.iter().any(|o| o.contains(p))
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct Source {
    pub pos: [f64; 2],
    pub start_time: f64,
}

#[derive(Debug, Clone)]
pub struct ArrivalField {
    pub grid: GridSpec,
    pub free: Vec<bool>,
    /// Infinite on blocked or unreachable cells.
    pub arrival: Vec<f64>,
    pub parent: Vec<Option<usize>>,
    /// Index of the source each cell's chain ends at.
    pub source: Vec<Option<usize>>,
}

impl ArrivalField {
    /// Cell indices from `c` back to its source, inclusive.
    pub fn chain(&self, c: usize) -> impl Iterator<Item = usize> + '_ {
        std::iter::successors(Some(c), move |&k| self.parent[k])
    }

    pub fn reached(&self, c: usize) -> bool {
        self.arrival[c].is_finite()
    }

    pub fn at(&self, p: [f64; 2]) -> Option<f64> {
        self.grid.cell_of(p).map(|c| self.arrival[c]).filter(|t| t.is_finite())
    }

    /// Direction of travel towards the source, averaged over `ahead` metres of chain.
    pub fn descent_direction(&self, c: usize, ahead: f64) -> Option<[f64; 2]> {
        let p = self.grid.center(c);
        let mut q = p;
        for k in self.chain(c).skip(1) {
            q = self.grid.center(k);
            if dist(p, q) >= ahead {
                break;
            }
        }
        let d = sub(q, p);
        let l = norm(d);
        (l > 0.0).then(|| [d[0] / l, d[1] / l])
    }

    /// Negative central-difference gradient of the arrival time at `c`.
    pub fn descent_gradient(&self, c: usize) -> Option<[f64; 2]> {
        let h = self.grid.spacing;
        let t0 = self.arrival[c];
        if !t0.is_finite() {
            return None;
        }
        let axis = |di: i64, dj: i64| -> Option<f64> {
            let f = self.grid.offset(c, di, dj).map(|k| self.arrival[k]).filter(|t| t.is_finite());
            let b = self.grid.offset(c, -di, -dj).map(|k| self.arrival[k]).filter(|t| t.is_finite());
            match (f, b) {
                (Some(f), Some(b)) => Some((f - b) / (2.0 * h)),
                (Some(f), None) => Some((f - t0) / h),
                (None, Some(b)) => Some((t0 - b) / h),
                (None, None) => None,
            }
        };
        let (gx, gy) = (axis(1, 0)?, axis(0, 1)?);
        let l = gx.hypot(gy);
        (l > 0.0).then(|| [-gx / l, -gy / l])
    }
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    // Reversed so the max-heap pops the earliest time, then the lowest index.
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Multi-source Dijkstra over the 16-connected free-cell graph with edge
/// cost `theta1` times the Euclidean step.
pub fn propagate_wavefront(
    env: &Environment,
    inflate: f64,
    sources: &[Source],
    ttg: &TtgModel,
    spacing: f64,
) -> Result<ArrivalField> {
    let grid = GridSpec::covering(&env.bounds, spacing)?;
    let free = free_cells(&grid, &env.inflated(inflate));
    wavefront_on(grid, free, sources, ttg.theta1)
}

pub fn wavefront_on(grid: GridSpec, free: Vec<bool>, sources: &[Source], rate: f64) -> Result<ArrivalField> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::invalid(format!("wavefront rate {rate}")));
    }
    let n = grid.len();
    let mut arrival = vec![f64::INFINITY; n];
    let mut parent = vec![None; n];
    let mut source = vec![None; n];
    let mut heap = BinaryHeap::new();
    for (s, src) in sources.iter().enumerate() {
        if let Some(c) = grid.cell_of(src.pos).filter(|&c| free[c]) {
            if src.start_time < arrival[c] {
                arrival[c] = src.start_time;
                source[c] = Some(s);
                heap.push(Entry(src.start_time, c));
            }
        }
    }
    if heap.is_empty() {
        return Err(Error::NoFreeSource);
    }
    let moves = moves();
    let h = grid.spacing;
    let mut done = vec![false; n];
    while let Some(Entry(t, c)) = heap.pop() {
        if done[c] {
            continue;
        }
        done[c] = true;
        for ((di, dj), swept) in &moves {
            let Some(k) = grid.offset(c, *di, *dj) else { continue };
            if !free[k] || done[k] {
                continue;
            }
            if swept.iter().any(|&(si, sj)| grid.offset(c, si, sj).is_none_or(|m| !free[m])) {
                continue;
            }
            let cand = t + rate * h * ((di * di + dj * dj) as f64).sqrt();
            if cand < arrival[k] {
                arrival[k] = cand;
                parent[k] = Some(c);
                source[k] = source[c];
                heap.push(Entry(cand, k));
            }
        }
    }
    Ok(ArrivalField {
        grid,
        free,
        arrival,
        parent,
        source,
    })
}

/// Default grid spacing: workspace extent / 200.
pub fn default_spacing(env: &Environment) -> f64 {
    env.bounds.extent() / 200.0
}

/// Distance ahead along a chain used to estimate the geodesic direction.
const DIRECTION_LOOKAHEAD: f64 = 3.0;

/// Per-sample features `(d_geo, misalignment)` and the remaining time.
pub fn ttg_samples(ds: &Dataset, field: &ArrivalField) -> Vec<(f64, f64, f64)> {
    let mut out = Vec::new();
    for traj in &ds.trajectories {
        let n = traj.len();
        for (i, s) in traj.samples.iter().enumerate() {
            let Some(c) = field.grid.cell_of(s.state.pos()).filter(|&c| field.reached(c)) else {
                continue;
            };
            let dir = field.descent_gradient(c).or_else(|| field.descent_direction(c, DIRECTION_LOOKAHEAD));
            let mis = match dir {
                Some(d) => angle_diff(s.state.psi, d[1].atan2(d[0])),
                None => 0.0,
            };
            out.push((field.arrival[c], mis, (n - 1 - i) as f64 * traj.dt));
        }
    }
    out
}

/// Ordinary least squares of remaining time on `(1, d_geo, 1 - cos dpsi)`.
/// A heading column with no variation gets the minimum-norm coefficient.
pub fn fit_ttg(ds: &Dataset, spacing: f64) -> Result<TtgModel> {
    if ds.trajectories.len() < 10 {
        return Err(Error::InsufficientData(format!("{} trajectories, need 10", ds.trajectories.len())));
    }
    let goal = Source {
        pos: ds.env.goal.pos(),
        start_time: 0.0,
    };
    let field = propagate_wavefront(&ds.env, 0.0, &[goal], &TtgModel::constant_speed(1.0), spacing)?;
    let rows = ttg_samples(ds, &field);
    fit_ttg_rows(&rows)
}

pub fn fit_ttg_rows(rows: &[(f64, f64, f64)]) -> Result<TtgModel> {
    if rows.len() < 3 {
        return Err(Error::DegenerateFeatures);
    }
    let x = DMatrix::from_fn(rows.len(), 3, |i, j| match j {
        0 => 1.0,
        1 => rows[i].0,
        _ => 1.0 - rows[i].1.cos(),
    });
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.2));
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * rows.len() as f64;
    // Offset and distance must be identifiable; the heading term may not be.
    let base = DMatrix::from_fn(rows.len(), 2, |i, j| x[(i, j)]);
    let bs = base.svd(false, false).singular_values;
    if smax <= 0.0 || bs.min() <= tol {
        return Err(Error::DegenerateFeatures);
    }
    let theta = svd.solve(&y, tol).map_err(|_| Error::DegenerateFeatures)?;
    let resid = &x * &theta - &y;
    let rms = (resid.norm_squared() / rows.len() as f64).sqrt();
    if !(theta[1] > 0.0) {
        return Err(Error::DegenerateFeatures);
    }
    Ok(TtgModel {
        theta0: theta[0],
        theta1: theta[1],
        theta2: theta[2],
        rms,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionParams {
    /// Grid spacing (m); `None` uses the workspace extent / 200.
    pub spacing: Option<f64>,
    /// Obstacle inflation for the free space (m).
    pub inflate: f64,
    /// Cells whose routes must wrap a vertex before it counts as a subgoal.
    pub n_min: usize,
    /// Smallest angle (rad) between the two sides' travel directions for a
    /// label boundary to count as repelling.
    pub diverge_min: f64,
    /// Repelling components with fewer cell edges are discarded.
    pub min_edges: usize,
    /// Length of the drawn attracting segments (m).
    pub attract_len: f64,
}

impl Default for PartitionParams {
    fn default() -> Self {
        Self {
            spacing: None,
            inflate: 0.0,
            n_min: 5,
            diverge_min: 0.2,
            min_edges: 5,
            attract_len: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgoalPose {
    pub obstacle: usize,
    pub vertex: usize,
    pub pos: [f64; 2],
    /// Attracting direction: the wavefront descent one cell outside the vertex.
    pub heading: f64,
    /// Number of cells whose route wraps this vertex first.
    pub passes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPrediction {
    pub grid: GridSpec,
    pub subgoals: Vec<SubgoalPose>,
    pub repelling: Vec<Vec<[f64; 2]>>,
    pub attracting: Vec<[[f64; 2]; 2]>,
    /// Per cell: index into `subgoals`, `goal_label` for direct routes, `None` on obstacles.
    pub labels: Vec<Option<usize>>,
    pub goal_label: usize,
}

impl PartitionPrediction {
    pub fn label_at(&self, p: [f64; 2]) -> Option<usize> {
        self.grid.cell_of(p).and_then(|c| self.labels[c])
    }

    /// Label of the cell at `p`, or of the nearest labelled cell.
    pub fn nearest_label(&self, p: [f64; 2]) -> Option<usize> {
        if let Some(l) = self.label_at(p) {
            return Some(l);
        }
        (0..self.grid.len())
            .filter(|&c| self.labels[c].is_some())
            .min_by(|&a, &b| dist(self.grid.center(a), p).total_cmp(&dist(self.grid.center(b), p)).then(a.cmp(&b)))
            .and_then(|c| self.labels[c])
    }

    /// Position each label routes to first.
    pub fn target(&self, label: usize, goal: [f64; 2]) -> [f64; 2] {
        self.subgoals.get(label).map_or(goal, |s| s.pos)
    }
}

fn turn(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (la, lb) = (norm(a), norm(b));
    if la == 0.0 || lb == 0.0 {
        return 0.0;
    }
    ((a[0] * b[0] + a[1] * b[1]) / (la * lb)).clamp(-1.0, 1.0).acos()
}

/// Route labels by inheritance in arrival order: a cell takes its parent's
/// label, except where its parent lies within one cell of a vertex that
/// the cell cannot see past, i.e. where the wavefront wraps that vertex.
/// Labels index `vertices`; `vertices.len()` marks the direct route.
fn route_labels(field: &ArrivalField, obstacles: &[Polygon], vertices: &[[f64; 2]], goal: [f64; 2]) -> Vec<Option<usize>> {
    let g = &field.grid;
    let near = 1.5 * g.spacing;
    let mut close: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (v, &q) in vertices.iter().enumerate() {
        let Some(cv) = g.cell_of(q) else { continue };
        for di in -2..=2 {
            for dj in -2..=2 {
                if let Some(c) = g.offset(cv, di, dj).filter(|&c| dist(g.center(c), q) <= near) {
                    close.entry(c).or_default().push(v);
                }
            }
        }
    }
    let target = |l: usize| vertices.get(l).copied().unwrap_or(goal);
    let blocked = |a: [f64; 2], b: [f64; 2]| obstacles.iter().any(|o| o.segment_hits_interior(a, b));
    let mut order: Vec<usize> = (0..g.len()).filter(|&c| field.reached(c)).collect();
    order.sort_by(|&a, &b| field.arrival[a].total_cmp(&field.arrival[b]).then(a.cmp(&b)));
    let mut labels: Vec<Option<usize>> = vec![None; g.len()];
    for c in order {
        let label = match field.parent[c] {
            None => vertices.len(),
            Some(p) => {
                let inherited = labels[p].expect("parents are labelled first");
                let here = close.get(&c);
                close
                    .get(&p)
                    .into_iter()
                    .flatten()
                    .copied()
                    .find(|v| !here.is_some_and(|h| h.contains(v)) && blocked(g.center(c), target(inherited)))
                    .unwrap_or(inherited)
            }
        };
        labels[c] = Some(label);
    }
    labels
}

/// Propagates from the goal, keeps the obstacle vertices that the wavefront
/// wraps, labels every free cell by the first such vertex on its chain, and
/// traces repelling boundaries where neighbouring chains diverge.
pub fn derive_subgoals_manifolds(env: &Environment, ttg: &TtgModel, p: &PartitionParams) -> Result<PartitionPrediction> {
    let spacing = p.spacing.unwrap_or_else(|| default_spacing(env));
    let goal = env.goal.pos();
    let field = propagate_wavefront(
        env,
        p.inflate,
        &[Source {
            pos: goal,
            start_time: ttg.theta0,
        }],
        ttg,
        spacing,
    )?;
    let grid = field.grid;
    let mut candidates: Vec<(usize, usize, [f64; 2], [f64; 2])> = Vec::new();
    for (o, poly) in env.inflated(p.inflate).iter().enumerate() {
        let centre = poly.centroid();
        for (v, &q) in poly.vertices.iter().enumerate() {
            if env.bounds.contains(q) {
                let out = sub(q, centre);
                let l = norm(out);
                candidates.push((o, v, q, [out[0] / l, out[1] / l]));
            }
        }
    }
    let positions: Vec<[f64; 2]> = candidates.iter().map(|c| c.2).collect();
    let polys = env.inflated(p.inflate);
    let all = route_labels(&field, &polys, &positions, goal);
    let mut passes = vec![0usize; candidates.len()];
    for l in all.iter().flatten() {
        if *l < candidates.len() {
            passes[*l] += 1;
        }
    }
    let kept: Vec<usize> = (0..candidates.len()).filter(|&v| passes[v] >= p.n_min).collect();
    let subgoals: Vec<SubgoalPose> = kept
        .iter()
        .map(|&v| {
            let (obstacle, vertex, pos, out) = candidates[v];
            let probe = [pos[0] + out[0] * spacing, pos[1] + out[1] * spacing];
            let dir = grid
                .cell_of(probe)
                .and_then(|c| field.descent_gradient(c))
                .unwrap_or_else(|| {
                    let d = sub(goal, pos);
                    let l = norm(d).max(f64::MIN_POSITIVE);
                    [d[0] / l, d[1] / l]
                });
            SubgoalPose {
                obstacle,
                vertex,
                pos,
                heading: dir[1].atan2(dir[0]),
                passes: passes[v],
            }
        })
        .collect();
    let goal_label = subgoals.len();
    let kept_pos: Vec<[f64; 2]> = subgoals.iter().map(|s| s.pos).collect();
    let labels = route_labels(&field, &polys, &kept_pos, goal);
    let pred = PartitionPrediction {
        grid,
        attracting: subgoals
            .iter()
            .map(|s| [s.pos, [s.pos[0] + p.attract_len * s.heading.cos(), s.pos[1] + p.attract_len * s.heading.sin()]])
            .collect(),
        subgoals,
        repelling: Vec::new(),
        labels,
        goal_label,
    };
    let repelling = repelling_polylines(&pred, goal, p.diverge_min, p.min_edges);
    Ok(PartitionPrediction { repelling, ..pred })
}

/// Cell edges between differently labelled free cells whose travel
/// directions diverge, chained into polylines.
pub fn repelling_polylines(pred: &PartitionPrediction, goal: [f64; 2], diverge_min: f64, min_edges: usize) -> Vec<Vec<[f64; 2]>> {
    let g = &pred.grid;
    let mut edges: Vec<((usize, usize), (usize, usize))> = Vec::new();
    for c in 0..g.len() {
        let Some(la) = pred.labels[c] else { continue };
        let (i, j) = g.ij(c);
        for (di, dj) in [(1i64, 0i64), (0, 1)] {
            let Some(k) = g.offset(c, di, dj) else { continue };
            let Some(lb) = pred.labels[k] else { continue };
            if la == lb {
                continue;
            }
            let da = sub(pred.target(la, goal), g.center(c));
            let db = sub(pred.target(lb, goal), g.center(k));
            if turn(da, db) < diverge_min {
                continue;
            }
            // Shared edge in corner coordinates.
            edges.push(if di == 1 { ((i + 1, j), (i + 1, j + 1)) } else { ((i, j + 1), (i + 1, j + 1)) });
        }
    }
    let mut adj: BTreeMap<(usize, usize), Vec<(usize, usize)>> = BTreeMap::new();
    for &(a, b) in &edges {
        adj.entry(a).or_default().push(b);
        adj.entry(b).or_default().push(a);
    }
    let corner = |(i, j): (usize, usize)| [g.origin[0] + i as f64 * g.spacing, g.origin[1] + j as f64 * g.spacing];
    let mut used: std::collections::BTreeSet<((usize, usize), (usize, usize))> = Default::default();
    let key = |a: (usize, usize), b: (usize, usize)| if a < b { (a, b) } else { (b, a) };
    let mut out = Vec::new();
    // Start walks at endpoints first so open chains come out whole.
    let mut starts: Vec<(usize, usize)> = adj.iter().filter(|(_, n)| n.len() != 2).map(|(k, _)| *k).collect();
    starts.extend(adj.keys().copied());
    for s in starts {
        while let Some(&next) = adj[&s].iter().find(|&&n| !used.contains(&key(s, n))) {
            let mut line = vec![corner(s)];
            let (mut prev, mut cur) = (s, next);
            used.insert(key(prev, cur));
            line.push(corner(cur));
            while adj[&cur].len() == 2 {
                let Some(&n) = adj[&cur].iter().find(|&&n| n != prev && !used.contains(&key(cur, n))) else { break };
                used.insert(key(cur, n));
                prev = cur;
                cur = n;
                line.push(corner(cur));
            }
            if line.len() > min_edges.max(1) {
                out.push(line);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub fraction: f64,
    pub matched: usize,
    pub total: usize,
    /// (predicted label, empirical membership) pairs of the best matching.
    pub mapping: Vec<(usize, usize)>,
    pub predicted_labels: usize,
    pub empirical_labels: usize,
}

impl Agreement {
    pub fn label_count_mismatch(&self) -> bool {
        self.predicted_labels != self.empirical_labels
    }
}

/// One-to-one label matching that maximises the matched count.
pub fn best_matching(table: &BTreeMap<(usize, usize), usize>) -> (usize, Vec<(usize, usize)>) {
    let rows: Vec<usize> = table.keys().map(|k| k.0).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let cols: Vec<usize> = table.keys().map(|k| k.1).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    assert!(cols.len() <= 20, "too many labels for exact matching");
    // dp over rows with a bitmask of used columns.
    let mut best: BTreeMap<u32, (usize, Vec<(usize, usize)>)> = BTreeMap::new();
    best.insert(0, (0, Vec::new()));
    for &r in &rows {
        let mut next = best.clone();
        for (mask, (score, pairs)) in &best {
            for (ci, &c) in cols.iter().enumerate() {
                if mask & (1 << ci) != 0 {
                    continue;
                }
                let w = table.get(&(r, c)).copied().unwrap_or(0);
                if w == 0 {
                    continue;
                }
                let m = mask | (1 << ci);
                let cand = score + w;
                if next.get(&m).is_none_or(|(s, _)| cand > *s) {
                    let mut p = pairs.clone();
                    p.push((r, c));
                    next.insert(m, (cand, p));
                }
            }
        }
        best = next;
    }
    best.into_values().max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1))).unwrap()
}

/// Compares each trajectory's predicted start label with the membership of
/// its first empirical segment.
pub fn predict_partition_agreement(pred: &PartitionPrediction, ds: &Dataset, segments: &[Segment]) -> Agreement {
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut total = 0;
    for (t, traj) in ds.trajectories.iter().enumerate() {
        let Some(first) = segments.iter().find(|s| s.traj == t && s.start == 0) else { continue };
        let Some(label) = pred.nearest_label(traj.first().pos()) else { continue };
        *table.entry((label, first.membership)).or_default() += 1;
        total += 1;
    }
    let predicted_labels = table.keys().map(|k| k.0).collect::<std::collections::BTreeSet<_>>().len();
    let empirical_labels = table.keys().map(|k| k.1).collect::<std::collections::BTreeSet<_>>().len();
    let (matched, mapping) = if table.is_empty() { (0, Vec::new()) } else { best_matching(&table) };
    Agreement {
        fraction: if total == 0 { 0.0 } else { matched as f64 / total as f64 },
        matched,
        total,
        mapping,
        predicted_labels,
        empirical_labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AgentState, ControlInput, Provenance, Sample, Trajectory};
    use proptest::prelude::*;

    fn open_world() -> Environment {
        let b = Bounds {
            xmin: 0.0,
            ymin: -20.0,
            xmax: 40.0,
            ymax: 20.0,
        };
        Environment::empty(b, AgentState::new(35.0, 0.0, 0.0, 0.0), 1.0)
    }

    fn diamond_world() -> Environment {
        Environment::from_json(include_str!("../scenarios/single_obstacle.json")).unwrap()
    }

    // Worst ratio of 16-connected path length to Euclidean length, from the
    // two bracketing moves (1,0) and (2,1).
    fn metrication_bound() -> f64 {
        (0..=10_000)
            .map(|k| {
                let t = 0.5 * k as f64 / 10_000.0;
                (1.0 + (5f64.sqrt() - 2.0) * t) / (1.0 + t * t).sqrt()
            })
            .fold(1.0, f64::max)
            - 1.0
    }

    fn field(env: &Environment, sources: &[Source], rate: f64, h: f64) -> ArrivalField {
        propagate_wavefront(env, 0.0, sources, &TtgModel::constant_speed(1.0 / rate), h).unwrap()
    }

    #[test]
    fn empty_world_matches_scaled_distance() {
        let env = open_world();
        let (h, rate) = (0.25, 0.5);
        let src = [20.125, 0.125];
        let f = field(&env, &[Source { pos: src, start_time: 0.0 }], rate, h);
        let bound = metrication_bound();
        assert!(bound > 0.02 && bound < 0.03);
        let mut rel = Vec::new();
        for c in 0..f.grid.len() {
            let d = dist(f.grid.center(c), src);
            let t = f.arrival[c];
            assert!(t >= rate * d - 1e-9, "shorter than straight line");
            assert!(t <= rate * d * (1.0 + bound) + 1e-9);
            if d > 5.0 {
                rel.push(t / (rate * d) - 1.0);
            }
        }
        let mean = rel.iter().sum::<f64>() / rel.len() as f64;
        assert!(mean < 0.02, "mean metrication {mean}");
    }

    #[test]
    fn source_cell_keeps_start_time() {
        let env = open_world();
        let f = field(&env, &[Source { pos: [5.1, 3.3], start_time: 7.5 }], 1.0, 0.5);
        assert_eq!(f.at([5.1, 3.3]), Some(7.5));
    }

    #[test]
    fn blocked_sources_error() {
        let env = diamond_world();
        let r = propagate_wavefront(&env, 0.0, &[Source { pos: [50.0, 0.0], start_time: 0.0 }], &TtgModel::constant_speed(1.0), 0.5);
        assert!(matches!(r, Err(Error::NoFreeSource)));
    }

    #[test]
    fn mirrored_sources_give_mirrored_field() {
        let env = diamond_world();
        let s = [Source { pos: [70.2, 10.3], start_time: 0.0 }, Source { pos: [70.2, -10.3], start_time: 0.0 }];
        let f = propagate_wavefront(&env, 4.8, &s, &TtgModel::constant_speed(2.0), 0.5).unwrap();
        let g = f.grid;
        for c in 0..g.len() {
            let (i, j) = g.ij(c);
            let m = g.index(i, g.ny - 1 - j);
            let (a, b) = (f.arrival[c], f.arrival[m]);
            assert!(a == b || (a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn halving_spacing_stays_within_metrication() {
        let env = open_world();
        let src = [10.0, 0.0];
        let coarse = field(&env, &[Source { pos: src, start_time: 0.0 }], 1.0, 0.5);
        let fine = field(&env, &[Source { pos: src, start_time: 0.0 }], 1.0, 0.25);
        let bound = metrication_bound();
        for c in 0..coarse.grid.len() {
            let p = coarse.grid.center(c);
            let d = dist(p, src);
            if d < 3.0 {
                continue;
            }
            let (a, b) = (coarse.arrival[c], fine.at(p).unwrap());
            assert!((a - b).abs() <= bound * d + 1.0, "at {p:?}: {a} vs {b}");
        }
    }

    // Shortest paths over the visibility graph of the inflated vertices.
    fn vertices_on_geodesics(env: &Environment, inflate: f64, starts: &[[f64; 2]]) -> Vec<[f64; 2]> {
        let polys = env.inflated(inflate);
        let verts: Vec<[f64; 2]> = polys.iter().flat_map(|p| p.vertices.clone()).collect();
        let visible = |a: [f64; 2], b: [f64; 2]| !polys.iter().any(|p| p.segment_hits_interior(a, b));
        let mut used: Vec<[f64; 2]> = Vec::new();
        for &s in starts {
            let mut nodes = vec![s];
            nodes.extend(&verts);
            nodes.push(env.goal.pos());
            let n = nodes.len();
            let mut d = vec![f64::INFINITY; n];
            let mut prev = vec![usize::MAX; n];
            let mut done = vec![false; n];
            d[0] = 0.0;
            for _ in 0..n {
                let u = (0..n).filter(|&i| !done[i]).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
                done[u] = true;
                for v in 0..n {
                    if !done[v] && visible(nodes[u], nodes[v]) && d[u] + dist(nodes[u], nodes[v]) < d[v] {
                        d[v] = d[u] + dist(nodes[u], nodes[v]);
                        prev[v] = u;
                    }
                }
            }
            let mut k = prev[n - 1];
            while k != 0 {
                if !used.contains(&nodes[k]) {
                    used.push(nodes[k]);
                }
                k = prev[k];
            }
        }
        used
    }

    #[test]
    fn diamond_world_has_two_subgoals_and_one_axis_boundary() {
        let env = diamond_world();
        let p = PartitionParams {
            inflate: 4.8,
            ..PartitionParams::default()
        };
        let pred = derive_subgoals_manifolds(&env, &TtgModel::constant_speed(2.0), &p).unwrap();
        let starts: Vec<[f64; 2]> = (0..40).map(|k| [5.0 + (k % 5) as f64 * 5.0, -30.0 + (k / 5) as f64 * 8.0 + 1.0]).collect();
        let mut truth = vertices_on_geodesics(&env, 4.8, &starts);
        truth.sort_by(|a, b| a[1].total_cmp(&b[1]));
        let mut found: Vec<[f64; 2]> = pred.subgoals.iter().map(|s| s.pos).collect();
        found.sort_by(|a, b| a[1].total_cmp(&b[1]));
        assert_eq!(found.len(), 2);
        assert_eq!(truth.len(), 2);
        for (a, b) in found.iter().zip(&truth) {
            assert!(dist(*a, *b) < 1e-9);
        }
        // Attracting directions point around the obstacle towards the goal.
        for s in &pred.subgoals {
            assert!(s.heading.cos() > 0.5);
            assert!(s.heading.sin() * s.pos[1] < 0.0);
        }
        assert_eq!(pred.repelling.len(), 1);
        let h = pred.grid.spacing;
        assert!(pred.repelling[0].iter().all(|q| q[1].abs() <= 2.0 * h && q[0] < 50.0));
        assert_eq!(pred.attracting.len(), 2);
    }

    #[test]
    fn empty_world_single_label() {
        let env = open_world();
        let pred = derive_subgoals_manifolds(&env, &TtgModel::constant_speed(1.0), &PartitionParams::default()).unwrap();
        assert!(pred.subgoals.is_empty());
        assert!(pred.repelling.is_empty());
        assert!(pred.labels.iter().all(|l| *l == Some(0)));
    }

    #[test]
    fn labels_hold_along_chains_until_the_subgoal() {
        let env = diamond_world();
        let p = PartitionParams {
            inflate: 4.8,
            ..PartitionParams::default()
        };
        let ttg = TtgModel::constant_speed(2.0);
        let pred = derive_subgoals_manifolds(&env, &ttg, &p).unwrap();
        let f = propagate_wavefront(&env, 4.8, &[Source { pos: env.goal.pos(), start_time: 0.0 }], &ttg, default_spacing(&env)).unwrap();
        let h = f.grid.spacing;
        for c in (0..f.grid.len()).step_by(7) {
            let Some(l) = pred.labels[c] else { continue };
            if l == pred.goal_label {
                continue;
            }
            let v = pred.subgoals[l].pos;
            for k in f.chain(c) {
                if dist(f.grid.center(k), v) <= 3.0 * h {
                    break;
                }
                assert_eq!(pred.labels[k], Some(l));
            }
        }
    }

    fn brute_force(table: &BTreeMap<(usize, usize), usize>) -> usize {
        let rows: Vec<usize> = table.keys().map(|k| k.0).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let cols: Vec<usize> = table.keys().map(|k| k.1).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        fn go(r: usize, rows: &[usize], cols: &[usize], used: &mut Vec<bool>, t: &BTreeMap<(usize, usize), usize>) -> usize {
            if r == rows.len() {
                return 0;
            }
            let mut best = go(r + 1, rows, cols, used, t);
            for c in 0..cols.len() {
                if !used[c] {
                    used[c] = true;
                    best = best.max(t.get(&(rows[r], cols[c])).copied().unwrap_or(0) + go(r + 1, rows, cols, used, t));
                    used[c] = false;
                }
            }
            best
        }
        go(0, &rows, &cols, &mut vec![false; cols.len()], table)
    }

    fn labelled_dataset(starts: &[[f64; 2]]) -> Dataset {
        let env = diamond_world();
        Dataset {
            env,
            trajectories: starts
                .iter()
                .map(|s| Trajectory {
                    dt: 0.1,
                    samples: vec![
                        Sample {
                            state: AgentState::new(s[0], s[1], 0.0, 0.0),
                            control: ControlInput::default(),
                        };
                        2
                    ],
                })
                .collect(),
            provenance: Provenance::default(),
        }
    }

    #[test]
    fn agreement_is_permutation_invariant_and_self_consistent() {
        let env = diamond_world();
        let pred = derive_subgoals_manifolds(
            &env,
            &TtgModel::constant_speed(2.0),
            &PartitionParams {
                inflate: 4.8,
                ..PartitionParams::default()
            },
        )
        .unwrap();
        let starts: Vec<[f64; 2]> = (0..12).map(|k| [10.0, -16.5 + 3.0 * k as f64]).collect();
        let ds = labelled_dataset(&starts);
        let truth: Vec<[f64; 2]> = starts.iter().map(|s| vertices_on_geodesics(&env, 4.8, &[*s])[0]).collect();
        let segs = |perm: &dyn Fn(usize) -> usize| -> Vec<Segment> {
            truth
                .iter()
                .enumerate()
                .map(|(t, v)| Segment {
                    traj: t,
                    start: 0,
                    end: 1,
                    membership: perm(if v[1] > 0.0 { 1 } else { 2 }),
                    terminal: None,
                })
                .collect()
        };
        let a = predict_partition_agreement(&pred, &ds, &segs(&|m| m));
        assert_eq!(a.fraction, 1.0);
        let b = predict_partition_agreement(&pred, &ds, &segs(&|m| 3 - m + 5));
        assert_eq!(b.fraction, 1.0);
        assert!(!a.label_count_mismatch());
        // A third empirical label is reported and matched on the intersection.
        let mut s = segs(&|m| m);
        s[0].membership = 9;
        let c = predict_partition_agreement(&pred, &ds, &s);
        assert!(c.label_count_mismatch());
        assert_eq!(c.matched, 11);
    }

    proptest! {
        #[test]
        fn matching_is_optimal(cells in proptest::collection::vec((0usize..4, 0usize..4, 1usize..20), 1..12)) {
            let mut t = BTreeMap::new();
            for (r, c, w) in cells {
                *t.entry((r, c)).or_insert(0) += w;
            }
            let (score, pairs) = best_matching(&t);
            prop_assert_eq!(score, brute_force(&t));
            prop_assert_eq!(pairs.iter().map(|p| t[p]).sum::<usize>(), score);
        }

        #[test]
        fn arrival_satisfies_triangle_property(ox in 13.0f64..30.0, oy in -8.0f64..8.0, half in 1.0f64..5.0, sx in 1.0f64..6.0, sy in -15.0f64..15.0) {
            let mut env = open_world();
            env.obstacles.push(Polygon::square([ox, oy], half));
            let f = field(&env, &[Source { pos: [sx, sy], start_time: 0.0 }], 0.7, 0.5);
            let g = f.grid;
            for c in 0..g.len() {
                if !f.reached(c) {
                    continue;
                }
                if let Some(p) = f.parent[c] {
                    let d = dist(g.center(c), g.center(p));
                    prop_assert!((f.arrival[c] - f.arrival[p] - 0.7 * d).abs() <= 1e-9);
                }
                for ((di, dj), swept) in moves() {
                    let Some(k) = g.offset(c, di, dj) else { continue };
                    if !f.reached(k) || swept.iter().any(|&(a, b)| g.offset(c, a, b).is_none_or(|m| !f.free[m])) {
                        continue;
                    }
                    let d = dist(g.center(c), g.center(k));
                    prop_assert!(f.arrival[c] <= f.arrival[k] + 0.7 * d + 1e-9);
                }
            }
        }
    }

    fn straight_runs(v: f64) -> Dataset {
        let env = Environment::empty(
            Bounds {
                xmin: 0.0,
                ymin: -50.0,
                xmax: 100.0,
                ymax: 50.0,
            },
            AgentState::new(90.25, 0.25, 0.0, 0.0),
            0.5,
        );
        // Directions the 16-connected grid represents exactly.
        let dirs: [(f64, f64); 5] = [(1.0, 0.0), (2.0, 1.0), (2.0, -1.0), (1.0, 1.0), (1.0, -1.0)];
        let mut trajectories = Vec::new();
        for (k, &(dx, dy)) in dirs.iter().cycle().take(12).enumerate() {
            let len = 20.0 + 3.0 * k as f64;
            let l: f64 = (dx * dx + dy * dy).sqrt();
            let u = [dx / l, dy / l];
            let start = [90.25 - u[0] * len, 0.25 - u[1] * len];
            let dt = 0.1;
            let n = (len / (v * dt)).round() as usize;
            let samples = (0..=n)
                .map(|i| {
                    let s = len * i as f64 / n as f64;
                    Sample {
                        state: AgentState::new(start[0] + u[0] * s, start[1] + u[1] * s, v, u[1].atan2(u[0])),
                        control: ControlInput::default(),
                    }
                })
                .collect();
            trajectories.push(Trajectory { dt: len / (v * n as f64), samples });
        }
        Dataset {
            env,
            trajectories,
            provenance: Provenance::default(),
        }
    }

    #[test]
    fn ttg_recovers_inverse_speed() {
        let v = 1.6;
        let m = fit_ttg(&straight_runs(v), 0.5).unwrap();
        assert!((m.theta1 * v - 1.0).abs() < 0.02, "{m:?}");
        let ds = straight_runs(v);
        let f = propagate_wavefront(&ds.env, 0.0, &[Source { pos: ds.env.goal.pos(), start_time: 0.0 }], &TtgModel::constant_speed(1.0), 0.5).unwrap();
        // Straight runs carry no heading cost; what remains is grid noise
        // in the sampled misalignment, bounded relative to the times fitted.
        let rows = ttg_samples(&ds, &f);
        let longest = rows.iter().map(|r| r.2).fold(0.0, f64::max);
        let worst = rows.iter().map(|r| (m.theta2 * (1.0 - r.1.cos())).abs()).fold(0.0, f64::max);
        assert!(worst < 0.005 * longest, "heading term up to {worst} s of {longest} s ({m:?})");
        assert!(m.predict(0.0, 0.0) <= m.theta0 + 1e-12);
    }

    #[test]
    fn ttg_needs_ten_trajectories() {
        let mut ds = straight_runs(1.0);
        ds.trajectories.truncate(9);
        assert!(matches!(fit_ttg(&ds, 0.5), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn ttg_degenerate_distance_column() {
        let rows = vec![(3.0, 0.1, 2.0); 20];
        assert!(matches!(fit_ttg_rows(&rows), Err(Error::DegenerateFeatures)));
    }
}
