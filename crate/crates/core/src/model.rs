//! Domain types shared by every pipeline stage: agent state, controls,
//! the obstacle environment and sampled trajectories.
//!
//! Angles are always stored wrapped to `(-π, π]`; every heading difference
//! goes through [`wrap_angle`] or [`angle_diff`].

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planar pose plus speed: `[x, y, v, ψ]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub psi: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64, v: f64, psi: f64) -> Self {
        Self { x, y, v, psi }
    }

    pub fn pos(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.v, self.psi]
    }

    /// Builds a state from a raw vector, wrapping the heading.
    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], wrap_angle_unchecked(a[3]))
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.v.is_finite() && self.psi.is_finite()
    }

    pub fn dist(&self, other: &AgentState) -> f64 {
        dist(self.pos(), other.pos())
    }
}

/// Turn rate and tangential acceleration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ControlInput {
    pub omega: f64,
    pub a: f64,
}

impl ControlInput {
    pub fn new(omega: f64, a: f64) -> Self {
        Self { omega, a }
    }

    pub fn to_array(&self) -> [f64; 2] {
        [self.omega, self.a]
    }
}

/// Environment state expressed relative to the agent. Derived on demand and
/// never persisted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvRelativeState {
    pub to_goal: [f64; 2],
    pub to_nearest_vertex: [f64; 2],
}

impl EnvRelativeState {
    pub fn of(state: &AgentState, env: &Environment) -> Self {
        let p = state.pos();
        let to_goal = sub(env.goal.pos(), p);
        let to_nearest_vertex = env
            .obstacles
            .iter()
            .flat_map(|o| o.vertices.iter())
            .map(|v| sub(*v, p))
            .min_by(|a, b| norm(*a).total_cmp(&norm(*b)))
            .unwrap_or(to_goal);
        Self {
            to_goal,
            to_nearest_vertex,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl Bounds {
    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.xmin && p[0] <= self.xmax && p[1] >= self.ymin && p[1] <= self.ymax
    }

    pub fn strictly_contains(&self, p: [f64; 2]) -> bool {
        p[0] > self.xmin && p[0] < self.xmax && p[1] > self.ymin && p[1] < self.ymax
    }

    /// Larger side length; the workspace scale used by default cell sizes.
    pub fn extent(&self) -> f64 {
        self.width().max(self.height())
    }

    pub fn corners(&self) -> [[f64; 2]; 4] {
        [
            [self.xmin, self.ymin],
            [self.xmax, self.ymin],
            [self.xmax, self.ymax],
            [self.xmin, self.ymax],
        ]
    }

    pub fn enclosing(points: impl IntoIterator<Item = [f64; 2]>) -> Self {
        let mut b = Bounds {
            xmin: f64::INFINITY,
            ymin: f64::INFINITY,
            xmax: f64::NEG_INFINITY,
            ymax: f64::NEG_INFINITY,
        };
        for p in points {
            b.xmin = b.xmin.min(p[0]);
            b.ymin = b.ymin.min(p[1]);
            b.xmax = b.xmax.max(p[0]);
            b.ymax = b.ymax.max(p[1]);
        }
        b
    }
}

/// Convex polygon with counter-clockwise vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polygon {
    pub vertices: Vec<[f64; 2]>,
}

const GEOM_EPS: f64 = 1e-9;

impl Polygon {
    pub fn new(vertices: Vec<[f64; 2]>) -> Self {
        Self { vertices }
    }

    /// Axis-aligned square centred at `c`.
    pub fn square(c: [f64; 2], half: f64) -> Self {
        Self::new(vec![
            [c[0] - half, c[1] - half],
            [c[0] + half, c[1] - half],
            [c[0] + half, c[1] + half],
            [c[0] - half, c[1] + half],
        ])
    }

    /// Square rotated by 45°, vertices at `c ± half·e_x` and `c ± half·e_y`.
    pub fn diamond(c: [f64; 2], half: f64) -> Self {
        Self::new(vec![
            [c[0], c[1] - half],
            [c[0] + half, c[1]],
            [c[0], c[1] + half],
            [c[0] - half, c[1]],
        ])
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn edges(&self) -> impl Iterator<Item = ([f64; 2], [f64; 2])> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn signed_area(&self) -> f64 {
        0.5 * self.edges().map(|(a, b)| cross(a, b)).sum::<f64>()
    }

    pub fn centroid(&self) -> [f64; 2] {
        let n = self.vertices.len() as f64;
        let s = self
            .vertices
            .iter()
            .fold([0.0, 0.0], |acc, v| [acc[0] + v[0], acc[1] + v[1]]);
        [s[0] / n, s[1] / n]
    }

    /// True when every turn is strictly left (CCW) and the polygon is simple.
    pub fn is_strictly_convex_ccw(&self) -> bool {
        let n = self.vertices.len();
        if n < 3 {
            return false;
        }
        let mut winding = 0.0;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let c = self.vertices[(i + 2) % n];
            if cross(sub(b, a), sub(c, b)) <= GEOM_EPS {
                return false;
            }
            let t1 = sub(b, a);
            let t2 = sub(c, b);
            winding += cross(t1, t2).atan2(dot(t1, t2));
        }
        (winding - TAU).abs() < 1e-6
    }

    /// Signed distance of `p` to the supporting line of each edge; the
    /// maximum is negative inside and positive outside.
    fn max_edge_offset(&self, p: [f64; 2]) -> f64 {
        self.edges()
            .map(|(a, b)| {
                let e = sub(b, a);
                let n = [e[1], -e[0]];
                dot(n, sub(p, a)) / norm(n)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Strict interior test with a small tolerance; boundary points are outside.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.max_edge_offset(p) < -GEOM_EPS
    }

    pub fn contains_or_touches(&self, p: [f64; 2]) -> bool {
        self.max_edge_offset(p) <= GEOM_EPS
    }

    /// Offsets every edge outward by `delta` (mitred corners).
    pub fn inflate(&self, delta: f64) -> Polygon {
        let n = self.vertices.len();
        let normals: Vec<[f64; 2]> = self
            .edges()
            .map(|(a, b)| {
                let e = sub(b, a);
                let l = norm(e);
                [e[1] / l, -e[0] / l]
            })
            .collect();
        let vertices = (0..n)
            .map(|i| {
                let n_prev = normals[(i + n - 1) % n];
                let n_next = normals[i];
                let bis = [n_prev[0] + n_next[0], n_prev[1] + n_next[1]];
                let bl = norm(bis);
                let cos_half = bl / 2.0;
                let scale = delta / cos_half / bl;
                let v = self.vertices[i];
                [v[0] + bis[0] * scale, v[1] + bis[1] * scale]
            })
            .collect();
        Polygon::new(vertices)
    }

    /// Whether the open segment `a→b` passes through the polygon interior.
    /// Grazing a vertex or sliding along an edge does not count.
    pub fn segment_hits_interior(&self, a: [f64; 2], b: [f64; 2]) -> bool {
        // Cyrus-Beck clipping against the edge half-planes.
        let d = sub(b, a);
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for (p, q) in self.edges() {
            let e = sub(q, p);
            let n = [e[1], -e[0]];
            let nl = norm(n);
            let num = -dot(n, sub(a, p)) / nl;
            let den = dot(n, d) / nl;
            if den.abs() < 1e-14 {
                if num <= GEOM_EPS {
                    return false;
                }
                continue;
            }
            let t = num / den;
            if den < 0.0 {
                t0 = t0.max(t);
            } else {
                t1 = t1.min(t);
            }
            if t0 >= t1 {
                return false;
            }
        }
        let seg_len = norm(d);
        if (t1 - t0) * seg_len <= 1e-7 {
            return false;
        }
        let mid = [a[0] + d[0] * 0.5 * (t0 + t1), a[1] + d[1] * 0.5 * (t0 + t1)];
        self.max_edge_offset(mid) < -1e-7
    }

    /// Convex-convex overlap test by separating axes; touching counts as disjoint.
    pub fn intersects(&self, other: &Polygon) -> bool {
        for poly in [self, other] {
            for (a, b) in poly.edges() {
                let e = sub(b, a);
                let axis = [e[1], -e[0]];
                let proj = |p: &Polygon| {
                    p.vertices.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                        let s = dot(axis, *v);
                        (lo.min(s), hi.max(s))
                    })
                };
                let (a0, a1) = proj(self);
                let (b0, b1) = proj(other);
                if a1 <= b0 + GEOM_EPS || b1 <= a0 + GEOM_EPS {
                    return false;
                }
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub bounds: Bounds,
    pub goal: AgentState,
    pub goal_tolerance: f64,
    pub obstacles: Vec<Polygon>,
}

impl Environment {
    pub fn empty(bounds: Bounds, goal: AgentState, goal_tolerance: f64) -> Self {
        Self {
            bounds,
            goal,
            goal_tolerance,
            obstacles: Vec::new(),
        }
    }

    pub fn at_goal(&self, p: [f64; 2]) -> bool {
        dist(p, self.goal.pos()) <= self.goal_tolerance
    }

    /// Index of an obstacle whose interior contains `p`.
    pub fn obstacle_at(&self, p: [f64; 2]) -> Option<usize> {
        self.obstacles.iter().position(|o| o.contains(p))
    }

    pub fn inflated(&self, delta: f64) -> Vec<Polygon> {
        self.obstacles.iter().map(|o| o.inflate(delta)).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Lists every violated environment invariant; an empty report means valid.
pub fn validate_environment(env: &Environment) -> Vec<String> {
    let mut report = Vec::new();
    let b = &env.bounds;
    if !(b.width() > 0.0 && b.height() > 0.0) {
        report.push("bounds are degenerate".to_string());
    }
    if !(env.goal_tolerance > 0.0) {
        report.push("goal tolerance must be positive".to_string());
    }
    if !env.goal.is_finite() {
        report.push("goal is not finite".to_string());
    } else if !b.contains(env.goal.pos()) {
        report.push("goal outside bounds".to_string());
    }
    for (i, o) in env.obstacles.iter().enumerate() {
        if o.len() < 3 {
            report.push(format!("obstacle {i} has fewer than 3 vertices"));
            continue;
        }
        if !o.is_strictly_convex_ccw() {
            report.push(format!("obstacle {i} is not strictly convex with CCW order"));
        }
        if !o.vertices.iter().all(|v| b.strictly_contains(*v)) {
            report.push(format!("obstacle {i} not strictly inside bounds"));
        }
        if env.goal.is_finite() && o.contains_or_touches(env.goal.pos()) {
            report.push(format!("goal occluded by obstacle {i}"));
        }
    }
    for i in 0..env.obstacles.len() {
        for j in i + 1..env.obstacles.len() {
            let (a, c) = (&env.obstacles[i], &env.obstacles[j]);
            if a.len() >= 3 && c.len() >= 3 && a.intersects(c) {
                report.push(format!("obstacles intersect: {i} and {j}"));
            }
        }
    }
    report
}

/// One trajectory sample: state and the control held over the next step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub state: AgentState,
    pub control: ControlInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub samples: Vec<Sample>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn states(&self) -> impl Iterator<Item = &AgentState> {
        self.samples.iter().map(|s| &s.state)
    }

    pub fn first(&self) -> &AgentState {
        &self.samples[0].state
    }

    pub fn last(&self) -> &AgentState {
        &self.samples[self.samples.len() - 1].state
    }

    pub fn duration(&self) -> f64 {
        self.dt * (self.samples.len().saturating_sub(1)) as f64
    }

    pub fn arc_length(&self) -> f64 {
        self.samples
            .windows(2)
            .map(|w| w[0].state.dist(&w[1].state))
            .sum()
    }

    /// Maximum deviation of each position increment from the unicycle
    /// prediction using the mean of the endpoint velocities.
    pub fn kinematic_defect(&self) -> f64 {
        self.samples
            .windows(2)
            .map(|w| {
                let (s0, s1) = (w[0].state, w[1].state);
                let vx = 0.5 * (s0.v * s0.psi.cos() + s1.v * s1.psi.cos());
                let vy = 0.5 * (s0.v * s0.psi.sin() + s1.v * s1.psi.sin());
                norm([s1.x - s0.x - vx * self.dt, s1.y - s0.y - vy * self.dt])
            })
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "x", "y", "v", "psi", "omega", "a"])?;
        for (i, s) in self.samples.iter().enumerate() {
            let st = s.state;
            w.write_record([
                format!("{:.6}", i as f64 * self.dt),
                st.x.to_string(),
                st.y.to_string(),
                st.v.to_string(),
                st.psi.to_string(),
                s.control.omega.to_string(),
                s.control.a.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["t", "x", "y", "v", "psi", "omega", "a"] {
            return Err(Error::invalid(format!("unexpected trajectory header {header:?}")));
        }
        let mut times = Vec::new();
        let mut samples = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let f = |i: usize| -> Result<f64> {
                rec[i]
                    .parse::<f64>()
                    .map_err(|e| Error::invalid(format!("bad number {:?}: {e}", &rec[i])))
            };
            times.push(f(0)?);
            samples.push(Sample {
                state: AgentState::new(f(1)?, f(2)?, f(3)?, f(4)?),
                control: ControlInput::new(f(5)?, f(6)?),
            });
        }
        if samples.len() < 2 {
            return Err(Error::invalid("trajectory needs at least 2 samples"));
        }
        let dt = times[1] - times[0];
        if !(dt > 0.0) {
            return Err(Error::invalid("non-increasing trajectory times"));
        }
        // Times carry 6 decimals; recover the nominal period from the span.
        let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
        let dt = (dt * 1e6).round() / 1e6;
        Ok(Trajectory { dt, samples })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub env: Environment,
    pub trajectories: Vec<Trajectory>,
    pub provenance: Provenance,
}

impl Dataset {
    /// Every trajectory terminates inside the goal tolerance.
    pub fn all_reach_goal(&self) -> bool {
        self.trajectories
            .iter()
            .all(|t| self.env.at_goal(t.last().pos()))
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> Result<f64> {
    if !theta.is_finite() {
        return Err(Error::invalid(format!("non-finite angle {theta}")));
    }
    Ok(wrap_angle_unchecked(theta))
}

pub(crate) fn wrap_angle_unchecked(theta: f64) -> f64 {
    let r = theta.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Wrapped difference `a − b`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle_unchecked(a - b)
}

/// Circular mean of a set of angles.
pub fn circular_mean(angles: impl IntoIterator<Item = f64>) -> f64 {
    let (s, c) = angles
        .into_iter()
        .fold((0.0, 0.0), |(s, c), a| (s + a.sin(), c + a.cos()));
    wrap_angle_unchecked(s.atan2(c))
}

pub fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

pub fn norm(a: [f64; 2]) -> f64 {
    a[0].hypot(a[1])
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    norm(sub(a, b))
}

/// Distance from `p` to the closed segment `a-b`.
pub fn point_segment_dist(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = sub(b, a);
    let l2 = dot(d, d);
    if l2 == 0.0 {
        return dist(p, a);
    }
    let t = (dot(sub(p, a), d) / l2).clamp(0.0, 1.0);
    dist(p, [a[0] + t * d[0], a[1] + t * d[1]])
}
