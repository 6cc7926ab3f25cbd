//! Closed-loop unicycle simulation under a route-following guidance law,
//! and the seeded start-grid dataset generator built on top of it.
//!
//! The guidance law tracks the current route leg with a pure-pursuit carrot
//! and shapes speed with a ramp / cruise / brake profile, so every
//! trajectory passes through three distinct speed regimes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{
    angle_diff, dist, dot, norm, sub, wrap_angle_unchecked, AgentState, Bounds, ControlInput,
    Dataset, Environment, Provenance, Sample, Trajectory,
};
use crate::route::{Route, VisibilityGraph};

/// Vehicle and guidance-law parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub v_cruise: f64,
    pub a_max: f64,
    pub d_brake: f64,
    pub omega_max: f64,
    /// Heading gain of the pursuit law (1/s).
    pub pursuit_gain: f64,
    /// Carrot distance ahead along the active leg (m).
    pub lookahead: f64,
    /// Distance at which the next waypoint becomes active (m).
    pub switch_radius: f64,
    /// Obstacle inflation as a multiple of the turning radius.
    pub inflate_factor: f64,
    pub dt: f64,
    pub t_max: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            v_cruise: 2.0,
            a_max: 1.0,
            d_brake: 4.0,
            omega_max: 1.0,
            pursuit_gain: 2.0,
            lookahead: 2.0,
            switch_radius: 2.0,
            inflate_factor: 1.2,
            dt: 0.05,
            t_max: 300.0,
        }
    }
}

impl SimConfig {
    pub fn turn_radius(&self) -> f64 {
        self.v_cruise / self.omega_max
    }

    pub fn inflate(&self) -> f64 {
        self.inflate_factor * self.turn_radius()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("v_cruise", self.v_cruise),
            ("a_max", self.a_max),
            ("omega_max", self.omega_max),
            ("pursuit_gain", self.pursuit_gain),
            ("lookahead", self.lookahead),
            ("dt", self.dt),
            ("t_max", self.t_max),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("sim.{name} must be positive")));
            }
        }
        if !(self.switch_radius >= 0.0 && self.inflate_factor >= 0.0) {
            return Err(Error::invalid("switch radius and inflation must be non-negative"));
        }
        if self.d_brake < self.v_cruise.powi(2) / (2.0 * self.a_max) {
            return Err(Error::invalid("d_brake shorter than the braking distance at a_max"));
        }
        Ok(())
    }

    pub fn policy(&self, route: Vec<[f64; 2]>) -> GuidancePolicy {
        GuidancePolicy {
            route,
            pursuit_gain: self.pursuit_gain,
            v_cruise: self.v_cruise,
            a_max: self.a_max,
            d_brake: self.d_brake,
            omega_max: self.omega_max,
            lookahead: self.lookahead,
            switch_radius: self.switch_radius,
        }
    }
}

/// Information-extraction and control law: which waypoint to chase and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidancePolicy {
    /// Subgoal positions followed by the goal.
    pub route: Vec<[f64; 2]>,
    pub pursuit_gain: f64,
    pub v_cruise: f64,
    pub a_max: f64,
    pub d_brake: f64,
    pub omega_max: f64,
    pub lookahead: f64,
    pub switch_radius: f64,
}

/// Mutable guidance-law memory: the active leg.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceState {
    pub leg_start: [f64; 2],
    pub active: usize,
}

impl GuidancePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.route.is_empty() {
            return Err(Error::invalid("route must end at the goal"));
        }
        if self.d_brake < self.v_cruise.powi(2) / (2.0 * self.a_max) {
            return Err(Error::invalid("d_brake shorter than the braking distance at a_max"));
        }
        Ok(())
    }

    pub fn start(&self, p: [f64; 2]) -> GuidanceState {
        GuidanceState {
            leg_start: p,
            active: 0,
        }
    }

    /// Deceleration of the braking profile.
    pub fn a_brake(&self) -> f64 {
        if self.d_brake > 0.0 {
            (self.v_cruise.powi(2) / (2.0 * self.d_brake)).min(self.a_max)
        } else {
            f64::INFINITY
        }
    }

    /// Advances the waypoint index when the active one is reached or passed.
    pub fn update(&self, g: &mut GuidanceState, p: [f64; 2]) {
        while g.active + 1 < self.route.len() {
            let w = self.route[g.active];
            let leg = sub(w, g.leg_start);
            let passed = dot(sub(p, w), leg) > 0.0 && norm(leg) > 0.0;
            if dist(p, w) <= self.switch_radius || passed {
                g.leg_start = w;
                g.active += 1;
            } else {
                break;
            }
        }
    }

    /// Remaining route length from `p` via the active waypoint.
    pub fn remaining(&self, g: &GuidanceState, p: [f64; 2]) -> f64 {
        let mut s = dist(p, self.route[g.active]);
        for w in self.route[g.active..].windows(2) {
            s += dist(w[0], w[1]);
        }
        s
    }

    /// Pure-pursuit carrot on the active leg.
    pub fn carrot(&self, g: &GuidanceState, p: [f64; 2]) -> [f64; 2] {
        let w = self.route[g.active];
        let leg = sub(w, g.leg_start);
        let len = norm(leg);
        if len < 1e-12 {
            return w;
        }
        let dir = [leg[0] / len, leg[1] / len];
        let along = dot(sub(p, g.leg_start), dir);
        let s = (along + self.lookahead).min(len);
        if s >= len {
            return w;
        }
        [g.leg_start[0] + dir[0] * s, g.leg_start[1] + dir[1] * s]
    }

    /// Control held over the next step.
    pub fn control(&self, g: &GuidanceState, s: &AgentState, dt: f64) -> ControlInput {
        let p = s.pos();
        let c = self.carrot(g, p);
        let d = sub(c, p);
        let omega = if norm(d) > 1e-12 {
            let err = angle_diff(d[1].atan2(d[0]), s.psi);
            (self.pursuit_gain * err).clamp(-self.omega_max, self.omega_max)
        } else {
            0.0
        };
        let rem = self.remaining(g, p);
        let v_ref = self.v_cruise.min((2.0 * self.a_brake() * rem).sqrt());
        let a = ((v_ref - s.v) / dt).clamp(-self.a_max, self.a_max);
        ControlInput::new(omega, a)
    }
}

fn deriv(s: [f64; 4], u: &ControlInput) -> [f64; 4] {
    [s[2] * s[3].cos(), s[2] * s[3].sin(), u.a, u.omega]
}

/// One RK4 step of the unicycle with the control held constant.
pub fn rk4_step(s: &AgentState, u: &ControlInput, dt: f64) -> AgentState {
    let x = [s.x, s.y, s.v, s.psi];
    let add = |a: [f64; 4], k: [f64; 4], h: f64| [a[0] + h * k[0], a[1] + h * k[1], a[2] + h * k[2], a[3] + h * k[3]];
    let k1 = deriv(x, u);
    let k2 = deriv(add(x, k1, dt / 2.0), u);
    let k3 = deriv(add(x, k2, dt / 2.0), u);
    let k4 = deriv(add(x, k3, dt), u);
    let mut n = [0.0; 4];
    for i in 0..4 {
        n[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    AgentState::new(n[0], n[1], n[2].max(0.0), wrap_angle_unchecked(n[3]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub trajectory: Trajectory,
    pub timed_out: bool,
}

/// Integrates the closed loop until the goal tolerance is reached or
/// `t_max` elapses. Trajectories that touch an obstacle interior are rejected.
pub fn simulate_closed_loop(
    env: &Environment,
    start: &AgentState,
    policy: &GuidancePolicy,
    dt: f64,
    t_max: f64,
) -> Result<SimOutcome> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt must be positive"));
    }
    policy.validate()?;
    let mut g = policy.start(start.pos());
    let mut state = *start;
    let mut samples = Vec::new();
    let max_steps = (t_max / dt).ceil() as usize;
    let mut timed_out = true;
    for step in 0..=max_steps {
        if let Some(obstacle) = env.obstacle_at(state.pos()) {
            return Err(Error::Collision {
                obstacle,
                sample: samples.len(),
            });
        }
        if env.at_goal(state.pos()) && step > 0 {
            samples.push(Sample {
                state,
                control: ControlInput::default(),
            });
            timed_out = false;
            break;
        }
        if step == max_steps {
            samples.push(Sample {
                state,
                control: ControlInput::default(),
            });
            break;
        }
        let u = if env.at_goal(state.pos()) {
            ControlInput::default()
        } else {
            policy.update(&mut g, state.pos());
            policy.control(&g, &state, dt)
        };
        samples.push(Sample { state, control: u });
        state = rk4_step(&state, &u, dt);
    }
    Ok(SimOutcome {
        trajectory: Trajectory { dt, samples },
        timed_out,
    })
}

/// Start grid over a rectangular region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StartGrid {
    pub region: Bounds,
    pub nx: usize,
    pub ny: usize,
    pub headings: usize,
    /// Heading of the first heading sample (rad).
    #[serde(default)]
    pub heading0: f64,
}

impl StartGrid {
    fn axis(lo: f64, hi: f64, n: usize) -> (Vec<f64>, f64) {
        if n <= 1 {
            return (vec![0.5 * (lo + hi)], hi - lo);
        }
        let step = (hi - lo) / (n - 1) as f64;
        ((0..n).map(|i| lo + step * i as f64).collect(), step)
    }

    /// Seeded start states: each grid point jittered by at most 10% of the
    /// grid spacing, one state per heading.
    pub fn starts(&self, seed: u64) -> Vec<AgentState> {
        let (xs, sx) = Self::axis(self.region.xmin, self.region.xmax, self.nx);
        let (ys, sy) = Self::axis(self.region.ymin, self.region.ymax, self.ny);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for &y in &ys {
            for &x in &xs {
                let jx = rng.random_range(-0.1..=0.1) * sx;
                let jy = rng.random_range(-0.1..=0.1) * sy;
                for h in 0..self.headings.max(1) {
                    let psi = self.heading0 + std::f64::consts::TAU * h as f64 / self.headings.max(1) as f64;
                    out.push(AgentState::new(x + jx, y + jy, 0.0, wrap_angle_unchecked(psi)));
                }
            }
        }
        out
    }
}

/// A generated trajectory together with its ground-truth route.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub dataset: Dataset,
    pub routes: Vec<Route>,
}

pub fn config_digest<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("config serialises");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// One closed-loop trajectory per feasible start of the grid.
pub fn generate_dataset(env: &Environment, grid: &StartGrid, cfg: &SimConfig, seed: u64) -> Result<Generated> {
    cfg.validate()?;
    let graph = VisibilityGraph::new(env, cfg.inflate());
    let starts: Vec<AgentState> = grid
        .starts(seed)
        .into_iter()
        .filter(|s| env.bounds.contains(s.pos()) && !graph.blocked(s.pos()))
        .collect();
    let results: Vec<Result<Option<(Trajectory, Route)>>> = starts
        .par_iter()
        .map(|s| {
            let route = match graph.plan(s.pos()) {
                Ok(r) => r,
                Err(Error::NoRoute) => return Ok(None),
                Err(e) => return Err(e),
            };
            let policy = cfg.policy(route.waypoints.clone());
            let out = simulate_closed_loop(env, s, &policy, cfg.dt, cfg.t_max)?;
            if out.timed_out {
                return Err(Error::invalid(format!(
                    "simulation from ({:.3}, {:.3}) timed out",
                    s.x, s.y
                )));
            }
            Ok(Some((out.trajectory, route)))
        })
        .collect();
    let mut trajectories = Vec::new();
    let mut routes = Vec::new();
    for r in results {
        if let Some((t, route)) = r? {
            trajectories.push(t);
            routes.push(route);
        }
    }
    if trajectories.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(Generated {
        dataset: Dataset {
            env: env.clone(),
            trajectories,
            provenance: Provenance {
                seed,
                config_digest: config_digest(&(grid, cfg)),
            },
        },
        routes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::GroupElement;
    use crate::model::Polygon;
    use crate::route::plan_route;

    fn world(obstacles: Vec<Polygon>) -> Environment {
        Environment {
            bounds: Bounds {
                xmin: 0.0,
                ymin: -30.0,
                xmax: 80.0,
                ymax: 30.0,
            },
            goal: AgentState::new(70.0, 0.0, 0.0, 0.0),
            goal_tolerance: 1.0,
            obstacles,
        }
    }

    fn run(env: &Environment, start: AgentState, cfg: &SimConfig) -> Trajectory {
        let route = plan_route(env, start.pos(), cfg.inflate()).unwrap();
        let out = simulate_closed_loop(env, &start, &cfg.policy(route.waypoints), cfg.dt, cfg.t_max).unwrap();
        assert!(!out.timed_out);
        out.trajectory
    }

    #[test]
    fn start_at_goal_terminates() {
        let env = world(vec![]);
        let cfg = SimConfig::default();
        let t = run(&env, env.goal, &cfg);
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn corridor_speed_profile() {
        let env = world(vec![]);
        let cfg = SimConfig::default();
        let t = run(&env, AgentState::new(5.0, 0.0, 0.0, 0.0), &cfg);
        let v: Vec<f64> = t.states().map(|s| s.v).collect();
        let top = v.iter().cloned().fold(0.0, f64::max);
        assert!((top - cfg.v_cruise).abs() < 1e-6);
        let first_top = v.iter().position(|&x| (x - cfg.v_cruise).abs() < 1e-6).unwrap();
        let last_top = v.iter().rposition(|&x| (x - cfg.v_cruise).abs() < 1e-6).unwrap();
        assert!(v[..first_top].windows(2).all(|w| w[1] >= w[0]));
        assert!(v[first_top..=last_top].iter().all(|&x| (x - cfg.v_cruise).abs() < 1e-6));
        assert!(v[last_top..].windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(t.kinematic_defect() < 1e-3);
    }

    #[test]
    fn rounds_obstacle_and_mirrors() {
        let env = world(vec![Polygon::diamond([40.0, 0.0], 10.0)]);
        let cfg = SimConfig::default();
        let a = run(&env, AgentState::new(10.0, 4.0, 0.0, 0.0), &cfg);
        let m = GroupElement::mirror();
        let b = run(&m.act_environment(&env), m.act(a.first()), &cfg);
        assert_eq!(a.len(), b.len());
        for (p, q) in a.states().zip(b.states()) {
            let q = m.act(q);
            assert!((p.x - q.x).abs() < 1e-6 && (p.y - q.y).abs() < 1e-6);
        }
        assert!(a.states().any(|s| s.y > 10.0));
        assert!(a.states().all(|s| env.obstacle_at(s.pos()).is_none()));
    }

    #[test]
    fn dataset_is_deterministic() {
        let env = world(vec![Polygon::diamond([40.0, 0.0], 10.0)]);
        let grid = StartGrid {
            region: Bounds {
                xmin: 5.0,
                ymin: -10.0,
                xmax: 10.0,
                ymax: 10.0,
            },
            nx: 2,
            ny: 3,
            headings: 1,
            heading0: 0.0,
        };
        let cfg = SimConfig::default();
        let a = generate_dataset(&env, &grid, &cfg, 7).unwrap();
        let b = generate_dataset(&env, &grid, &cfg, 7).unwrap();
        assert_eq!(a.dataset.trajectories.len(), 6);
        assert!(a.dataset.all_reach_goal());
        for (x, y) in a.dataset.trajectories.iter().zip(&b.dataset.trajectories) {
            assert_eq!(x.to_csv_string(), y.to_csv_string());
        }
    }

    #[test]
    fn single_point_grid_at_goal() {
        let env = world(vec![]);
        let grid = StartGrid {
            region: Bounds {
                xmin: 70.0,
                ymin: 0.0,
                xmax: 70.0,
                ymax: 0.0,
            },
            nx: 1,
            ny: 1,
            headings: 1,
            heading0: 0.0,
        };
        let g = generate_dataset(&env, &grid, &SimConfig::default(), 1).unwrap();
        assert_eq!(g.dataset.trajectories.len(), 1);
        assert_eq!(g.dataset.trajectories[0].len(), 2);
    }

    #[test]
    fn empty_world_distance_decreases_after_turn() {
        let env = world(vec![]);
        let grid = StartGrid {
            region: Bounds {
                xmin: 5.0,
                ymin: -20.0,
                xmax: 40.0,
                ymax: 20.0,
            },
            nx: 5,
            ny: 5,
            headings: 1,
            heading0: 0.0,
        };
        let g = generate_dataset(&env, &grid, &SimConfig::default(), 3).unwrap();
        assert_eq!(g.dataset.trajectories.len(), 25);
        for t in &g.dataset.trajectories {
            let d: Vec<f64> = t.states().map(|s| s.dist(&env.goal)).collect();
            // After the initial turn the heading error stays below 90°.
            let turned = t
                .states()
                .position(|s| {
                    let b = (env.goal.y - s.y).atan2(env.goal.x - s.x);
                    angle_diff(b, s.psi).abs() < 0.5
                })
                .unwrap();
            assert!(d[turned..].windows(2).all(|w| w[1] <= w[0] + 1e-9));
        }
    }
}
