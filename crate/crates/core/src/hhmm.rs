//! Two-layer hierarchical hidden Markov model: a subgoal layer over a mode
//! layer over the identified piecewise-affine dynamics.
//!
//! Node indices run over the hidden subgoals with one extra index for the
//! goal. The goal node is absorbing.

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::argmax;
use crate::group::GroupElement;
use crate::matching::PatternLibrary;
use crate::model::{angle_diff, wrap_angle_unchecked, AgentState, ControlInput, Dataset, Polygon, Sample, Trajectory};
use crate::partition::{GridSpec, PartitionPrediction};
use crate::pwa::{PwaModel, Regions, Transition, NX, NZ};
use crate::segment::{HiddenSubgoal, Segment};
use crate::sim::rk4_step;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgoalNode {
    pub id: usize,
    pub pose: AgentState,
    /// Arrival radius (m) at which the goal switch fires.
    pub tolerance: f64,
    /// Successor probabilities over all nodes, goal last.
    pub next: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeLayer {
    pub transition: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
}

/// Acceleration law of one mode: `a = c·(1, v, d_goal)`, clamped to the
/// range seen in the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModePolicy {
    pub coef: [f64; 3],
    pub range: [f64; 2],
}

impl ModePolicy {
    pub fn accel(&self, v: f64, d_goal: f64) -> f64 {
        (self.coef[0] + self.coef[1] * v + self.coef[2] * d_goal).clamp(self.range[0], self.range[1])
    }
}

/// Proportional pursuit of the active node: `ω = k·(bearing − ψ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Steering {
    pub gain: f64,
    pub omega_max: f64,
}

/// Pattern membership of a node's incoming segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternLink {
    pub pattern: Option<usize>,
    pub alignment: GroupElement,
}

/// First node to steer for, per grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteMap {
    pub grid: GridSpec,
    pub labels: Vec<Option<usize>>,
}

impl RouteMap {
    pub fn at(&self, p: [f64; 2]) -> Option<usize> {
        self.labels[self.grid.cell_of(p)?]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hhmm {
    pub subgoals: Vec<SubgoalNode>,
    /// First-node distribution, goal last.
    pub initial: Vec<f64>,
    /// Mode layer per node, goal last.
    pub modes: Vec<ModeLayer>,
    pub links: Vec<PatternLink>,
    pub pwa: PwaModel,
    /// One-step residual covariance per mode.
    pub emission: Vec<[[f64; NX]; NX]>,
    /// Mode regions over `(v, d_goal)`; a change of winner fires the mode switch.
    pub guard: Regions,
    pub policy: Vec<ModePolicy>,
    pub steering: Steering,
    pub route: Option<RouteMap>,
    pub goal: AgentState,
    pub goal_tolerance: f64,
    pub obstacles: Vec<Polygon>,
    pub dt: f64,
    /// Likelihood factor for a mode whose PWA region does not contain the step.
    pub region_leak: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HhmmParams {
    /// Subgoal arrival radius (m).
    pub tolerance: f64,
    /// Added to the diagonal of each emission covariance.
    pub cov_floor: f64,
    pub region_leak: f64,
}

impl Default for HhmmParams {
    fn default() -> Self {
        Self {
            tolerance: 4.0,
            cov_floor: 1e-6,
            region_leak: 1e-3,
        }
    }
}

pub(crate) fn guard_features(x: &[f64; NX], goal: [f64; 2]) -> [f64; NZ] {
    let v = x[2];
    let d = (x[0] - goal[0]).hypot(x[1] - goal[1]);
    [v, d, v * d, v * v, d * d, 0.0]
}

fn normalize(row: &mut [f64]) {
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= s);
}

/// Add-one smoothed frequencies; `allowed` masks impossible entries.
fn smoothed(counts: &[usize], allowed: impl Fn(usize) -> bool) -> Vec<f64> {
    let mut row: Vec<f64> = counts.iter().enumerate().map(|(i, &c)| if allowed(i) { c as f64 + 1.0 } else { 0.0 }).collect();
    normalize(&mut row);
    row
}

fn segment_transitions(ds: &Dataset, s: &Segment) -> Vec<Transition> {
    let t = &ds.trajectories[s.traj];
    (s.start..s.end.min(t.len().saturating_sub(1)))
        .map(|i| Transition::new(&t.samples[i].state, &t.samples[i].control, &t.samples[i + 1].state))
        .collect()
}

fn least_squares(rows: &[[f64; 3]], y: &[f64]) -> Option<[f64; 3]> {
    let x = DMatrix::from_fn(rows.len(), 3, |i, j| rows[i][j]);
    let svd = x.svd(true, true);
    let tol = svd.singular_values.max() * 1e-10 * rows.len() as f64;
    let th = svd.solve(&DVector::from_column_slice(y), tol).ok()?;
    let c = [th[0], th[1], th[2]];
    c.iter().all(|v| v.is_finite()).then_some(c)
}

/// Builds the model from one pipeline run. Segment memberships are 1-based
/// cluster ids with `hidden.len() + 1` for the goal-reaching segment.
#[allow(clippy::too_many_arguments)]
pub fn assemble_hhmm(
    ds: &Dataset,
    hidden: &[HiddenSubgoal],
    segments: &[Segment],
    patterns: &PatternLibrary,
    pwa: &PwaModel,
    partition: Option<&PartitionPrediction>,
    p: &HhmmParams,
) -> Result<Hhmm> {
    if segments.is_empty() {
        return Err(Error::InsufficientData("no segments".into()));
    }
    let n = hidden.len();
    let goal = ds.env.goal.pos();
    let node = |s: &Segment| (s.membership - 1).min(n);

    // Subgoal layer.
    let mut first = vec![0usize; n + 1];
    let mut succ = vec![vec![0usize; n + 1]; n + 1];
    let mut by_traj: Vec<Vec<&Segment>> = vec![Vec::new(); ds.trajectories.len()];
    for s in segments {
        by_traj[s.traj].push(s);
    }
    for segs in by_traj.iter_mut().filter(|s| !s.is_empty()) {
        segs.sort_by_key(|s| s.start);
        first[node(segs[0])] += 1;
        for w in segs.windows(2) {
            succ[node(w[0])][node(w[1])] += 1;
        }
    }
    let subgoals = hidden
        .iter()
        .enumerate()
        .map(|(j, h)| SubgoalNode {
            id: j,
            pose: h.state,
            tolerance: p.tolerance,
            next: smoothed(&succ[j], |k| k != j),
        })
        .collect();
    let initial = smoothed(&first, |_| true);

    // Mode layer and continuous data.
    let m = pwa.n_modes;
    let mut bigrams = vec![vec![vec![0usize; m]; m]; n + 1];
    let mut starts = vec![vec![0usize; m]; n + 1];
    let mut data: Vec<(Transition, usize, [f64; 2])> = Vec::new();
    for s in segments {
        let j = node(s);
        let target = if j < n { hidden[j].state.pos() } else { goal };
        let tr = segment_transitions(ds, s);
        let labels = pwa.labels(&tr);
        if let Some(&l) = labels.first() {
            starts[j][l] += 1;
        }
        for w in labels.windows(2) {
            bigrams[j][w[0]][w[1]] += 1;
        }
        data.extend(tr.into_iter().zip(labels).map(|(t, l)| (t, l, target)));
    }
    if data.is_empty() {
        return Err(Error::InsufficientData("segments hold no transitions".into()));
    }
    let modes = (0..=n)
        .map(|j| ModeLayer {
            transition: bigrams[j].iter().map(|r| smoothed(r, |_| true)).collect(),
            initial: smoothed(&starts[j], |_| true),
        })
        .collect();

    let mut emission = vec![[[0.0; NX]; NX]; m];
    let mut policy = Vec::with_capacity(m);
    for k in 0..m {
        let own: Vec<&Transition> = data.iter().filter(|d| d.1 == k).map(|d| &d.0).collect();
        let cnt = own.len().max(1) as f64;
        for t in &own {
            let pred = pwa.modes[k].step(&t.x, &t.u);
            let r: Vec<f64> = (0..NX).map(|i| t.next[i] - pred[i]).collect();
            for a in 0..NX {
                for b in 0..NX {
                    emission[k][a][b] += r[a] * r[b] / cnt;
                }
            }
        }
        for (a, row) in emission[k].iter_mut().enumerate() {
            row[a] += p.cov_floor;
        }
        let rows: Vec<[f64; 3]> = own.iter().map(|t| [1.0, t.x[2], (t.x[0] - goal[0]).hypot(t.x[1] - goal[1])]).collect();
        let acc: Vec<f64> = own.iter().map(|t| t.u[1]).collect();
        let lo = acc.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let coef = match acc.len() {
            0 => [0.0; 3],
            1..=3 => [acc.iter().sum::<f64>() / cnt, 0.0, 0.0],
            _ => least_squares(&rows, &acc).ok_or_else(|| Error::SingularLocalFit(k))?,
        };
        let range = if acc.is_empty() { [0.0, 0.0] } else { [lo, hi] };
        policy.push(ModePolicy { coef, range });
    }

    let zs: Vec<[f64; NZ]> = data.iter().map(|d| guard_features(&d.0.x, goal)).collect();
    let labels: Vec<usize> = data.iter().map(|d| d.1).collect();
    let guard = Regions::fit(&zs, &labels, m, 1e-6);

    let (mut se, mut ee, mut omega_max) = (0.0, 0.0, 0.0f64);
    for (t, _, target) in &data {
        let e = angle_diff((target[1] - t.x[1]).atan2(target[0] - t.x[0]), t.x[3]);
        se += e * t.u[0];
        ee += e * e;
        omega_max = omega_max.max(t.u[0].abs());
    }
    // No heading error at all leaves nothing to correct.
    let gain = if ee > 0.0 { se / ee } else { 0.0 };
    if !(gain.is_finite() && gain >= 0.0) {
        return Err(Error::DegenerateFeatures);
    }

    let links = (0..=n)
        .map(|j| match patterns.pattern_of(j) {
            Some(pi) => {
                let pat = &patterns.patterns[pi];
                let at = pat.clusters.iter().position(|&c| c == j).expect("pattern lists its clusters");
                PatternLink {
                    pattern: Some(pi),
                    alignment: pat.alignments[at],
                }
            }
            None => PatternLink {
                pattern: None,
                alignment: GroupElement::identity(),
            },
        })
        .collect();

    let route = partition.map(|pp| {
        let map: Vec<usize> = pp
            .subgoals
            .iter()
            .map(|s| {
                (0..n)
                    .min_by(|&a, &b| dist2(hidden[a].state.pos(), s.pos).total_cmp(&dist2(hidden[b].state.pos(), s.pos)))
                    .unwrap_or(n)
            })
            .collect();
        RouteMap {
            grid: pp.grid,
            labels: pp.labels.iter().map(|l| l.map(|l| map.get(l).copied().unwrap_or(n))).collect(),
        }
    });

    Ok(Hhmm {
        subgoals,
        initial,
        modes,
        links,
        pwa: pwa.clone(),
        emission,
        guard,
        policy,
        steering: Steering { gain, omega_max },
        route,
        goal: ds.env.goal,
        goal_tolerance: ds.env.goal_tolerance,
        obstacles: ds.env.obstacles.clone(),
        dt: ds.trajectories[0].dt,
        region_leak: p.region_leak,
    })
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterPosterior {
    /// Per step, probabilities indexed `[node][mode]`.
    pub tables: Vec<Vec<Vec<f64>>>,
    pub log_likelihood: f64,
}

impl FilterPosterior {
    pub fn mode_marginal(&self, t: usize) -> Vec<f64> {
        let tab = &self.tables[t];
        (0..tab[0].len()).map(|m| tab.iter().map(|r| r[m]).sum()).collect()
    }

    pub fn map_modes(&self) -> Vec<usize> {
        (0..self.tables.len()).map(|t| argmax(&self.mode_marginal(t))).collect()
    }

    pub fn node_marginal(&self, t: usize) -> Vec<f64> {
        self.tables[t].iter().map(|r| r.iter().sum()).collect()
    }
}

/// Gaussian log-density pieces for one covariance.
struct LogGauss {
    inv: Matrix4<f64>,
    log_norm: f64,
}

impl LogGauss {
    fn new(c: &[[f64; NX]; NX]) -> Result<Self> {
        let m = Matrix4::from_fn(|i, j| c[i][j]);
        let chol = m.cholesky().ok_or_else(|| Error::invalid("emission covariance is not positive definite"))?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self {
            inv: chol.inverse(),
            log_norm: -0.5 * (log_det + NX as f64 * (2.0 * std::f64::consts::PI).ln()),
        })
    }

    fn eval(&self, r: &Vector4<f64>) -> f64 {
        self.log_norm - 0.5 * (r.transpose() * self.inv * r)[(0, 0)]
    }
}

impl Hhmm {
    pub fn n_nodes(&self) -> usize {
        self.subgoals.len() + 1
    }

    pub fn n_modes(&self) -> usize {
        self.pwa.n_modes
    }

    pub fn node_target(&self, j: usize) -> [f64; 2] {
        self.subgoals.get(j).map_or(self.goal.pos(), |s| s.pose.pos())
    }

    /// Goal switch: the node whose arrival tolerance contains `p`.
    pub fn arrived(&self, j: usize, p: [f64; 2]) -> bool {
        self.subgoals.get(j).is_some_and(|s| dist2(s.pose.pos(), p) <= s.tolerance * s.tolerance)
    }

    pub fn at_goal(&self, p: [f64; 2]) -> bool {
        dist2(self.goal.pos(), p) <= self.goal_tolerance * self.goal_tolerance
    }

    pub fn guard_mode(&self, s: &AgentState) -> usize {
        self.guard.winner(&guard_features(&s.to_array(), self.goal.pos()))
    }

    /// Controls that take `a` to `b` in one step, read off speed and heading.
    pub fn implied_control(&self, a: &AgentState, b: &AgentState) -> ControlInput {
        ControlInput::new(angle_diff(b.psi, a.psi) / self.dt, (b.v - a.v) / self.dt)
    }

    /// Forward filter over joint `(node, mode)`.
    pub fn filter(&self, xs: &[AgentState]) -> Result<FilterPosterior> {
        if xs.len() < 2 {
            return Err(Error::InsufficientData(format!("{} measurements", xs.len())));
        }
        if let Some(i) = xs.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidMeasurement(i));
        }
        let (nn, nm) = (self.n_nodes(), self.n_modes());
        let dens = self.emission.iter().map(LogGauss::new).collect::<Result<Vec<_>>>()?;
        let mut tables = Vec::with_capacity(xs.len() - 1);
        let mut ll = 0.0;
        let mut prev: Vec<Vec<f64>> = Vec::new();
        for (t, w) in xs.windows(2).enumerate() {
            let prior: Vec<Vec<f64>> = if t == 0 {
                (0..nn).map(|j| (0..nm).map(|m| self.initial[j] * self.modes[j].initial[m]).collect()).collect()
            } else {
                let p = w[0].pos();
                let mut nodes = vec![vec![0.0; nm]; nn];
                for (j, row) in prev.iter().enumerate() {
                    if self.arrived(j, p) {
                        for (k, pk) in self.subgoals[j].next.iter().enumerate() {
                            nodes[k].iter_mut().zip(row).for_each(|(a, b)| *a += pk * b);
                        }
                    } else {
                        nodes[j].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
                nodes
                    .iter()
                    .enumerate()
                    .map(|(j, row)| {
                        (0..nm)
                            .map(|m2| (0..nm).map(|m1| row[m1] * self.modes[j].transition[m1][m2]).sum())
                            .collect()
                    })
                    .collect()
            };
            let u = self.implied_control(&w[0], &w[1]);
            let tr = Transition::new(&w[0], &u, &w[1]);
            let region = self.pwa.regions.winner(&tr.z());
            let logs: Vec<f64> = (0..nm)
                .map(|m| {
                    let pred = self.pwa.modes[m].step(&tr.x, &tr.u);
                    let r = Vector4::from_fn(|i, _| tr.next[i] - pred[i]);
                    dens[m].eval(&r) + if m == region { 0.0 } else { self.region_leak.ln() }
                })
                .collect();
            let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut post: Vec<Vec<f64>> = prior
                .iter()
                .map(|row| row.iter().zip(&logs).map(|(p, l)| p * (l - top).exp()).collect())
                .collect();
            let total: f64 = post.iter().flatten().sum();
            if !(total > 0.0 && total.is_finite()) {
                return Err(Error::InvalidMeasurement(t + 1));
            }
            post.iter_mut().flatten().for_each(|p| *p /= total);
            ll += total.ln() + top;
            prev = post.clone();
            tables.push(post);
        }
        Ok(FilterPosterior { tables, log_likelihood: ll })
    }

    fn first_node(&self, x0: &AgentState) -> Option<usize> {
        self.route.as_ref().and_then(|r| r.at(x0.pos()))
    }

    /// One closed-loop step under mode `m` toward node `j`.
    pub fn step(&self, s: &AgentState, m: usize, j: usize) -> (ControlInput, AgentState) {
        let target = self.node_target(j);
        let bearing = (target[1] - s.y).atan2(target[0] - s.x);
        let omega = (self.steering.gain * angle_diff(bearing, s.psi)).clamp(-self.steering.omega_max, self.steering.omega_max);
        let d_goal = dist2(s.pos(), self.goal.pos()).sqrt();
        let u = ControlInput::new(omega, self.policy[m].accel(s.v, d_goal));
        let pred = self.pwa.modes[m].step(&s.to_array(), &u.to_array());
        let kin = rk4_step(s, &u, self.dt);
        (u, AgentState::new(kin.x, kin.y, pred[2].max(0.0), wrap_angle_unchecked(pred[3])))
    }

    fn diverged(&self, s: &AgentState) -> bool {
        let far = 10.0 * (self.pwa.bounds.extent().max(1.0));
        !s.is_finite() || dist2(s.pos(), self.goal.pos()).sqrt() > far
    }

    fn rollout(&self, x0: &AgentState, steps: usize, mut rng: Option<&mut ChaCha8Rng>) -> Rollout {
        let mut out = Rollout {
            states: Vec::new(),
            controls: Vec::new(),
            path: Vec::new(),
            reached_goal: self.at_goal(x0.pos()),
            truncated: false,
        };
        if out.reached_goal || steps == 0 {
            return out;
        }
        let pick = |row: &[f64], rng: &mut Option<&mut ChaCha8Rng>| match rng {
            Some(r) => {
                let u: f64 = r.random();
                let mut acc = 0.0;
                row.iter().position(|p| {
                    acc += p;
                    u < acc
                })
                .unwrap_or(row.len() - 1)
            }
            None => argmax(row),
        };
        let mut j = match self.first_node(x0) {
            Some(j) => j,
            None => pick(&self.initial, &mut rng),
        };
        let noise: Vec<Option<Matrix4<f64>>> =
            self.emission.iter().map(|c| Matrix4::from_fn(|i, k| c[i][k]).cholesky().map(|ch| ch.l())).collect();
        let mut s = *x0;
        let mut m = self.guard_mode(&s);
        for _ in 0..steps {
            if self.arrived(j, s.pos()) {
                j = pick(&self.subgoals[j].next, &mut rng);
            }
            let (u, mut next) = self.step(&s, m, j);
            if let (Some(r), Some(l)) = (rng.as_deref_mut(), &noise[m]) {
                let e = l * Vector4::from_fn(|_, _| r.sample::<f64, _>(StandardNormal));
                next = AgentState::new(next.x + e[0], next.y + e[1], (next.v + e[2]).max(0.0), wrap_angle_unchecked(next.psi + e[3]));
            }
            if self.diverged(&next) {
                out.truncated = true;
                break;
            }
            out.path.push((j, m));
            out.controls.push(u);
            out.states.push(next);
            s = next;
            m = self.guard_mode(&s);
            if self.at_goal(s.pos()) {
                out.reached_goal = true;
                break;
            }
        }
        out
    }

    /// Greedy MAP rollout: most likely successors, deterministic dynamics.
    pub fn predict(&self, x0: &AgentState, horizon: usize) -> Result<Rollout> {
        if !x0.is_finite() {
            return Err(Error::invalid("non-finite initial state"));
        }
        Ok(self.rollout(x0, horizon, None))
    }

    /// Ancestral sample of the node chain and the perturbed dynamics.
    pub fn generate(&self, x0: &AgentState, seed: u64, step_cap: usize) -> Result<Generated> {
        if !x0.is_finite() || self.obstacles.iter().any(|o| o.contains(x0.pos())) {
            return Err(Error::InfeasibleStart);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = self.rollout(x0, step_cap, Some(&mut rng));
        let timed_out = !r.reached_goal && !r.truncated;
        let mut samples: Vec<Sample> = std::iter::once(*x0)
            .chain(r.states.iter().copied())
            .zip(r.controls.iter().copied().chain(std::iter::once(ControlInput::default())))
            .map(|(state, control)| Sample { state, control })
            .collect();
        if samples.is_empty() {
            samples.push(Sample {
                state: *x0,
                control: ControlInput::default(),
            });
        }
        Ok(Generated {
            trajectory: Trajectory { dt: self.dt, samples },
            path: r.path,
            reached_goal: r.reached_goal,
            timed_out,
            diverged: r.truncated,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    /// States after each step; the initial state is not repeated.
    pub states: Vec<AgentState>,
    pub controls: Vec<ControlInput>,
    /// `(node, mode)` active during each step.
    pub path: Vec<(usize, usize)>,
    pub reached_goal: bool,
    /// Stopped early because the state left the plausible workspace.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generated {
    pub trajectory: Trajectory,
    pub path: Vec<(usize, usize)>,
    pub reached_goal: bool,
    pub timed_out: bool,
    pub diverged: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::InteractionPattern;
    use crate::model::{Bounds, Environment, Provenance};
    use crate::pwa::AffineMode;
    use proptest::prelude::*;

    const DT: f64 = 0.1;
    const GOAL: [f64; 2] = [60.0, 0.0];

    fn truth(a: f64) -> usize {
        if a > 0.1 {
            0
        } else if a < -0.1 {
            2
        } else {
            1
        }
    }

    /// Straight run at height `y`: accelerate, cruise, brake to a stop.
    fn run(y: f64) -> Trajectory {
        let mut s = AgentState::new(0.0, y, 0.0, 0.0);
        let mut samples = Vec::new();
        loop {
            let a = if s.x >= 52.0 {
                -0.25
            } else if s.v < 2.0 - 1e-9 {
                0.5
            } else {
                0.0
            };
            let u = ControlInput::new(0.0, a);
            samples.push(Sample { state: s, control: u });
            if a < 0.0 && s.v <= 0.025 + 1e-9 {
                break;
            }
            s = rk4_step(&s, &u, DT);
        }
        Trajectory { dt: DT, samples }
    }

    /// `n_a` runs along y = 5 and `n_b` along y = -5, each cut where it
    /// crosses x = 30.
    fn corridor(n_a: usize, n_b: usize) -> (Dataset, Vec<HiddenSubgoal>, Vec<Segment>) {
        let bounds = Bounds {
            xmin: 0.0,
            ymin: -20.0,
            xmax: 70.0,
            ymax: 20.0,
        };
        let env = Environment::empty(bounds, AgentState::new(GOAL[0], GOAL[1], 0.0, 0.0), 6.0);
        let trajectories: Vec<Trajectory> = (0..n_a + n_b).map(|i| run(if i < n_a { 5.0 } else { -5.0 })).collect();
        let hidden = [5.0, -5.0]
            .iter()
            .enumerate()
            .map(|(id, &y)| HiddenSubgoal {
                id,
                state: AgentState::new(30.0, y, 2.0, 0.0),
                cell: [15, 0],
                members: 1,
            })
            .collect();
        let mut segments = Vec::new();
        for (ti, t) in trajectories.iter().enumerate() {
            let cut = t.states().position(|s| s.x >= 30.0).unwrap();
            let node = usize::from(ti >= n_a);
            segments.push(Segment {
                traj: ti,
                start: 0,
                end: cut,
                membership: node + 1,
                terminal: Some(node),
            });
            segments.push(Segment {
                traj: ti,
                start: cut,
                end: t.len(),
                membership: 3,
                terminal: None,
            });
        }
        let ds = Dataset {
            env,
            trajectories,
            provenance: Provenance::default(),
        };
        (ds, hidden, segments)
    }

    /// The exact one-step map of a straight run along ψ = 0, shared by all
    /// three modes. Regions split on the acceleration input at 0.2 and -0.1;
    /// a single linear input cannot isolate the middle class by least
    /// squares, so the weights are set by hand.
    fn exact_pwa(ds: &Dataset) -> PwaModel {
        let mut mode = AffineMode {
            a: [[0.0; NX]; NX],
            b: [[0.0; 2]; NX],
            d: [0.0; NX],
        };
        for i in 0..NX {
            mode.a[i][i] = 1.0;
        }
        mode.a[0][2] = DT;
        mode.b[0][1] = 0.5 * DT * DT;
        mode.b[2][1] = DT;
        mode.b[3][0] = DT;
        let row = |wa: f64, bias: f64| vec![0.0, 0.0, 0.0, 0.0, 0.0, wa, bias];
        let regions = Regions {
            scaler: crate::pwa::Scaler {
                mean: vec![0.0; NZ],
                scale: vec![1.0; NZ],
            },
            weights: vec![row(10.0, -2.0), row(0.0, 0.0), row(-10.0, -1.0)],
        };
        PwaModel {
            modes: vec![mode; 3],
            regions,
            n_modes: 3,
            bounds: ds.env.bounds,
            warnings: Vec::new(),
            rounds: 0,
            residual_history: Vec::new(),
        }
    }

    fn no_patterns() -> PatternLibrary {
        PatternLibrary {
            patterns: Vec::new(),
            medoids: Vec::new(),
            pairs: Vec::new(),
            eps_match: 0.1,
            allow_reflect: true,
        }
    }

    fn model(n_a: usize, n_b: usize) -> (Hhmm, Dataset) {
        let (ds, hidden, segs) = corridor(n_a, n_b);
        let pwa = exact_pwa(&ds);
        let h = assemble_hhmm(&ds, &hidden, &segs, &no_patterns(), &pwa, None, &HhmmParams::default()).unwrap();
        (h, ds)
    }

    fn rows_sum_to_one(h: &Hhmm) {
        let check = |r: &[f64]| assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{r:?}");
        check(&h.initial);
        h.subgoals.iter().for_each(|s| check(&s.next));
        for l in &h.modes {
            check(&l.initial);
            l.transition.iter().for_each(|r| check(r));
        }
    }

    #[test]
    fn route_split_sets_initial_distribution() {
        let (h, _) = model(70, 30);
        rows_sum_to_one(&h);
        assert!((h.initial[0] - 0.7).abs() < 0.05 && (h.initial[1] - 0.3).abs() < 0.05, "{:?}", h.initial);
        // Observed successor of each subgoal is the goal.
        for s in &h.subgoals {
            assert!(s.next[2] > s.next[1 - s.id]);
            assert_eq!(s.next[s.id], 0.0);
        }
    }

    #[test]
    fn exact_dynamics_sit_at_the_floor() {
        let (h, _) = model(3, 2);
        for c in &h.emission {
            for (i, row) in c.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    let want = if i == j { 1e-6 } else { 0.0 };
                    assert!((v - want).abs() < 1e-12, "{c:?}");
                }
            }
        }
    }

    #[test]
    fn policy_recovers_the_speed_profile() {
        let (h, _) = model(3, 2);
        assert!((h.policy[0].accel(1.0, 40.0) - 0.5).abs() < 1e-9);
        assert!(h.policy[1].accel(2.0, 30.0).abs() < 1e-9);
        assert!((h.policy[2].accel(1.0, 4.0) + 0.25).abs() < 1e-9);
    }

    #[test]
    fn empty_segments_rejected() {
        let (ds, hidden, _) = corridor(1, 1);
        let pwa = exact_pwa(&ds);
        let r = assemble_hhmm(&ds, &hidden, &[], &no_patterns(), &pwa, None, &HhmmParams::default());
        assert!(matches!(r, Err(Error::InsufficientData(_))));
    }

    #[test]
    fn pattern_alignment_attached_to_nodes() {
        let (ds, hidden, segs) = corridor(2, 2);
        let pwa = exact_pwa(&ds);
        let mut lib = no_patterns();
        let m = GroupElement::new(0.0, [0.0, 0.0], true);
        lib.patterns.push(InteractionPattern {
            clusters: vec![0, 1],
            representative: (0, 0),
            alignments: vec![GroupElement::identity(), m],
        });
        let h = assemble_hhmm(&ds, &hidden, &segs, &lib, &pwa, None, &HhmmParams::default()).unwrap();
        assert_eq!(h.links[1].alignment, m);
        assert_eq!(h.links[2].pattern, None);
    }

    /// Deterministic chains and no region leak: the posterior is a point
    /// mass on the true route and mode.
    #[test]
    fn deterministic_chain_gives_point_mass() {
        let (mut h, ds) = model(4, 4);
        h.initial = vec![1.0, 0.0, 0.0];
        h.subgoals[0].next = vec![0.0, 0.0, 1.0];
        h.region_leak = 0.0;
        for l in h.modes.iter_mut() {
            l.transition = (0..3).map(|i| (0..3).map(|j| f64::from(u8::from(i == j || j == i + 1))).collect()).collect();
            for r in l.transition.iter_mut() {
                normalize(r);
            }
        }
        let t = &ds.trajectories[0];
        let xs: Vec<AgentState> = t.states().copied().collect();
        let post = h.filter(&xs).unwrap();
        let mut node = 0;
        for (k, tab) in post.tables.iter().enumerate() {
            if k > 0 && h.arrived(node, xs[k].pos()) {
                node = 2;
            }
            let m = truth(t.samples[k].control.a);
            assert!(tab[node][m] > 1.0 - 1e-9, "step {k}: {tab:?}");
        }
    }

    #[test]
    fn arrival_moves_mass_to_successors() {
        let (h, ds) = model(5, 5);
        let xs: Vec<AgentState> = ds.trajectories[0].states().copied().collect();
        let post = h.filter(&xs).unwrap();
        let k = (1..xs.len()).find(|&k| h.arrived(0, xs[k].pos())).unwrap();
        let next = post.node_marginal(k);
        assert!(next[1] + next[2] >= 0.99, "{next:?}");
    }

    #[test]
    fn filter_recovers_modes_of_fresh_runs() {
        let (h, _) = model(6, 6);
        let t = run(3.0);
        let xs: Vec<AgentState> = t.states().copied().collect();
        let modes = h.filter(&xs).unwrap().map_modes();
        let hits = modes.iter().enumerate().filter(|&(k, m)| *m == truth(t.samples[k].control.a)).count();
        assert!(hits as f64 >= 0.99 * modes.len() as f64);
    }

    #[test]
    fn filter_input_errors() {
        let (h, ds) = model(2, 2);
        let mut xs: Vec<AgentState> = ds.trajectories[0].states().copied().take(10).collect();
        assert!(matches!(h.filter(&xs[..1]), Err(Error::InsufficientData(_))));
        xs[3].v = f64::NAN;
        assert!(matches!(h.filter(&xs), Err(Error::InvalidMeasurement(3))));
    }

    #[test]
    fn prediction_edge_cases() {
        let (h, _) = model(2, 2);
        let p = h.predict(&AgentState::new(0.0, 5.0, 0.0, 0.0), 0).unwrap();
        assert!(p.states.is_empty() && !p.reached_goal);
        let p = h.predict(&AgentState::new(GOAL[0], GOAL[1], 0.0, 0.0), 100).unwrap();
        assert!(p.states.is_empty() && p.reached_goal);
    }

    #[test]
    fn prediction_follows_the_likeliest_route() {
        let (h, _) = model(8, 2);
        let p = h.predict(&AgentState::new(0.0, 5.0, 0.0, 0.0), 2000).unwrap();
        assert!(p.reached_goal);
        assert_eq!(p.path[0].0, 0);
        assert_eq!(p.path.last().unwrap().0, 2);
    }

    #[test]
    fn mode_switch_tracks_the_guard() {
        let (h, _) = model(4, 4);
        let x0 = AgentState::new(0.0, 5.0, 0.0, 0.0);
        let p = h.predict(&x0, 2000).unwrap();
        let before: Vec<AgentState> = std::iter::once(x0).chain(p.states.iter().copied()).collect();
        for (k, (_, m)) in p.path.iter().enumerate() {
            assert_eq!(*m, h.guard_mode(&before[k]));
        }
        let seen: Vec<usize> = p.path.iter().map(|s| s.1).collect();
        assert!(seen.contains(&0) && seen.contains(&1) && seen.contains(&2));
    }

    #[test]
    fn zero_noise_generation_matches_prediction() {
        let (mut h, _) = model(4, 4);
        h.emission = vec![[[0.0; NX]; NX]; 3];
        h.initial = vec![1.0, 0.0, 0.0];
        for s in h.subgoals.iter_mut() {
            s.next = vec![0.0, 0.0, 1.0];
        }
        let x0 = AgentState::new(0.0, 5.0, 0.0, 0.0);
        let g = h.generate(&x0, 9, 2000).unwrap();
        let p = h.predict(&x0, 2000).unwrap();
        assert_eq!(&g.trajectory.states().copied().collect::<Vec<_>>()[1..], &p.states[..]);
        assert_eq!(g.path, p.path);
    }

    #[test]
    fn generation_limits() {
        let (h, _) = model(2, 2);
        let x0 = AgentState::new(0.0, 5.0, 0.0, 0.0);
        let g = h.generate(&x0, 1, 5).unwrap();
        assert!(g.timed_out && g.trajectory.len() == 6);
        assert!(matches!(h.generate(&AgentState::new(f64::NAN, 0.0, 0.0, 0.0), 1, 5), Err(Error::InfeasibleStart)));
    }

    /// Accuracy of filtering self-generated data as the noise shrinks.
    fn self_accuracy(h: &Hhmm, scale: f64) -> f64 {
        let mut h = h.clone();
        for c in h.emission.iter_mut() {
            c[0][0] = 1e-4 * scale;
            c[1][1] = 1e-4 * scale;
            c[2][2] = 1e-4 * scale;
            c[3][3] = 1e-6;
        }
        let (mut hit, mut total) = (0, 0);
        for seed in 0..4 {
            let g = h.generate(&AgentState::new(0.0, 5.0, 0.0, 0.0), seed, 2000).unwrap();
            let xs: Vec<AgentState> = g.trajectory.states().copied().collect();
            let modes = h.filter(&xs).unwrap().map_modes();
            hit += modes.iter().zip(&g.path).filter(|(m, p)| **m == p.1).count();
            total += modes.len();
        }
        hit as f64 / total as f64
    }

    #[test]
    fn accuracy_does_not_drop_as_noise_shrinks() {
        let (h, _) = model(4, 4);
        let acc: Vec<f64> = [1.0, 0.1, 0.01].iter().map(|&s| self_accuracy(&h, s)).collect();
        assert!(acc.windows(2).all(|w| w[1] >= w[0]), "{acc:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn posteriors_are_normalized(seed in 0u64..1000, y in -8.0f64..8.0) {
            let (h, _) = model(3, 3);
            let g = h.generate(&AgentState::new(0.0, y, 0.0, 0.0), seed, 800).unwrap();
            let xs: Vec<AgentState> = g.trajectory.states().copied().collect();
            prop_assume!(xs.len() >= 2);
            let post = h.filter(&xs).unwrap();
            for tab in &post.tables {
                prop_assert!((tab.iter().flatten().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            prop_assert!(post.log_likelihood.is_finite());
        }

        #[test]
        fn goal_switch_fires_only_on_arrival(seed in 0u64..1000, y in -8.0f64..8.0) {
            let (h, _) = model(3, 3);
            let x0 = AgentState::new(0.0, y, 0.0, 0.0);
            let g = h.generate(&x0, seed, 2000).unwrap();
            let xs: Vec<AgentState> = g.trajectory.states().copied().collect();
            for (k, w) in g.path.windows(2).enumerate() {
                if w[0].0 != w[1].0 {
                    prop_assert!(h.arrived(w[0].0, xs[k + 1].pos()));
                }
            }
        }

        #[test]
        fn generation_is_deterministic_per_seed(seed in 0u64..1000) {
            let (h, _) = model(2, 2);
            let x0 = AgentState::new(0.0, 1.0, 0.0, 0.0);
            prop_assert_eq!(h.generate(&x0, seed, 600).unwrap(), h.generate(&x0, seed, 600).unwrap());
        }
    }
}
