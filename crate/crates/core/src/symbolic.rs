//! Symbolic representation of trajectories and pairwise subgoal extraction.
//!
//! States are quantized into half-open cells over `(x, y, v, ψ)`; the goal
//! region of the environment is a single reserved symbol. Two symbol
//! strings that end in the same symbol share a future from the first symbol
//! of their longest common suffix on: that symbol is their subgoal.

use std::f64::consts::TAU;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{circular_mean, dist, AgentState, Dataset, Environment, Trajectory};

/// Cell identifier; [`Symbol::GOAL`] marks the goal region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Symbol(pub [i32; 4]);

impl Symbol {
    pub const GOAL: Symbol = Symbol([i32::MAX; 4]);

    pub fn is_goal(&self) -> bool {
        *self == Symbol::GOAL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalRegion {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantizer {
    /// `(Δx, Δy, Δv, Δψ)`.
    pub cell: [f64; 4],
    pub origin: [f64; 4],
    pub goal: Option<GoalRegion>,
}

impl Quantizer {
    pub fn new(cell: [f64; 4], origin: [f64; 4]) -> Result<Self> {
        let q = Self {
            cell,
            origin,
            goal: None,
        };
        q.validate()?;
        Ok(q)
    }

    /// Workspace/40 spatial cells, a quarter of cruise speed and π/8 heading
    /// sectors; the goal tolerance disc is the goal symbol.
    pub fn for_environment(env: &Environment, v_cruise: f64) -> Self {
        let d = env.bounds.extent() / 40.0;
        Self {
            cell: [d, d, v_cruise / 4.0, std::f64::consts::PI / 8.0],
            origin: [env.bounds.xmin, env.bounds.ymin, 0.0, 0.0],
            goal: Some(GoalRegion {
                center: env.goal.pos(),
                radius: env.goal_tolerance,
            }),
        }
    }

    pub fn with_goal(mut self, env: &Environment) -> Self {
        self.goal = Some(GoalRegion {
            center: env.goal.pos(),
            radius: env.goal_tolerance,
        });
        self
    }

    pub fn heading_sectors(&self) -> i32 {
        (TAU / self.cell[3]).round() as i32
    }

    pub fn validate(&self) -> Result<()> {
        if !self.cell.iter().all(|c| *c > 0.0 && c.is_finite()) {
            return Err(Error::invalid("quantizer cell sizes must be positive"));
        }
        let n = self.heading_sectors();
        if n < 1 || (n as f64 * self.cell[3] - TAU).abs() > 1e-9 {
            return Err(Error::invalid("heading cell must divide 2π evenly"));
        }
        Ok(())
    }

    /// Spatial cell indices of a position.
    pub fn cell_xy(&self, p: [f64; 2]) -> [i32; 2] {
        [
            ((p[0] - self.origin[0]) / self.cell[0]).floor() as i32,
            ((p[1] - self.origin[1]) / self.cell[1]).floor() as i32,
        ]
    }

    pub fn cell_center_xy(&self, c: [i32; 2]) -> [f64; 2] {
        [
            self.origin[0] + (c[0] as f64 + 0.5) * self.cell[0],
            self.origin[1] + (c[1] as f64 + 0.5) * self.cell[1],
        ]
    }

    pub fn symbol(&self, s: &AgentState) -> Symbol {
        if let Some(g) = &self.goal {
            if dist(s.pos(), g.center) <= g.radius {
                return Symbol::GOAL;
            }
        }
        let [ix, iy] = self.cell_xy(s.pos());
        let iv = ((s.v - self.origin[2]) / self.cell[2]).floor() as i32;
        let n = self.heading_sectors();
        let ip = (((s.psi - self.origin[3]).rem_euclid(TAU) / self.cell[3]).floor() as i32).rem_euclid(n);
        Symbol([ix, iy, iv, ip])
    }

    pub fn quantize(&self, traj: &Trajectory) -> SymbolicTrajectory {
        let mut symbols: Vec<Symbol> = Vec::new();
        let mut anchor_indices = Vec::new();
        for (i, s) in traj.states().enumerate() {
            let sym = self.symbol(s);
            if symbols.last() != Some(&sym) {
                symbols.push(sym);
                anchor_indices.push(i);
            }
        }
        SymbolicTrajectory {
            symbols,
            anchor_indices,
        }
    }
}

/// Run-length-collapsed symbol string with first-entry sample indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolicTrajectory {
    pub symbols: Vec<Symbol>,
    pub anchor_indices: Vec<usize>,
}

impl SymbolicTrajectory {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

pub fn quantize_dataset(ds: &Dataset, q: &Quantizer) -> Vec<SymbolicTrajectory> {
    ds.trajectories.par_iter().map(|t| q.quantize(t)).collect()
}

/// Position of the shared future within each string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuffixMatch {
    pub symbol: Symbol,
    pub index_a: usize,
    pub index_b: usize,
    pub suffix_len: usize,
}

/// Longest common suffix of two strings ending in the same goal symbol, if
/// it is at least `l_min` symbols long.
pub fn pairwise_subgoal(
    sa: &SymbolicTrajectory,
    sb: &SymbolicTrajectory,
    l_min: usize,
) -> Result<Option<SuffixMatch>> {
    if sa.is_empty() || sb.is_empty() || sa.symbols.last() != sb.symbols.last() {
        return Err(Error::IncompatibleGoals);
    }
    let k = sa
        .symbols
        .iter()
        .rev()
        .zip(sb.symbols.iter().rev())
        .take_while(|(a, b)| a == b)
        .count();
    if k < l_min.max(1) {
        return Ok(None);
    }
    let (ia, ib) = (sa.len() - k, sb.len() - k);
    Ok(Some(SuffixMatch {
        symbol: sa.symbols[ia],
        index_a: ia,
        index_b: ib,
        suffix_len: k,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgoalObservation {
    pub cell: Symbol,
    pub state_a: AgentState,
    pub state_b: AgentState,
    pub rep_state: AgentState,
    pub pair: (usize, usize),
    /// First-entry sample index in each trajectory.
    pub anchors: (usize, usize),
}

impl SubgoalObservation {
    fn new(cell: Symbol, pair: (usize, usize), anchors: (usize, usize), a: AgentState, b: AgentState) -> Self {
        let rep_state = AgentState::new(
            0.5 * (a.x + b.x),
            0.5 * (a.y + b.y),
            0.5 * (a.v + b.v),
            circular_mean([a.psi, b.psi]),
        );
        Self {
            cell,
            state_a: a,
            state_b: b,
            rep_state,
            pair,
            anchors,
        }
    }
}

/// One observation per unordered trajectory pair with a subgoal, pairs in
/// lexicographic order. Pairs whose subgoal is the goal symbol are dropped
/// when `exclude_goal` is set.
pub fn extract_observed_subgoals(
    sds: &[SymbolicTrajectory],
    ds: &Dataset,
    l_min: usize,
    exclude_goal: bool,
) -> Result<Vec<SubgoalObservation>> {
    if sds.len() != ds.trajectories.len() {
        return Err(Error::invalid("symbolic and continuous trajectories are not aligned"));
    }
    let pairs: Vec<(usize, usize)> = (0..sds.len())
        .flat_map(|i| (i + 1..sds.len()).map(move |j| (i, j)))
        .collect();
    let found: Vec<Result<Option<SubgoalObservation>>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let Some(m) = pairwise_subgoal(&sds[i], &sds[j], l_min)? else {
                return Ok(None);
            };
            if exclude_goal && m.symbol.is_goal() {
                return Ok(None);
            }
            let ai = sds[i].anchor_indices[m.index_a];
            let aj = sds[j].anchor_indices[m.index_b];
            Ok(Some(SubgoalObservation::new(
                m.symbol,
                (i, j),
                (ai, aj),
                ds.trajectories[i].samples[ai].state,
                ds.trajectories[j].samples[aj].state,
            )))
        })
        .collect();
    let mut out = Vec::new();
    for f in found {
        if let Some(o) = f? {
            out.push(o);
        }
    }
    Ok(out)
}
