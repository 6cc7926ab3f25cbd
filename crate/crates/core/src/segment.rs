//! Hidden subgoals from the fitted mixture, and trajectory segmentation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{fit_gmm_select_floored, GmmFit};
use crate::isomap::{isomap_embed, Embedding};
use crate::model::{circular_mean, AgentState, Dataset, Sample};
use crate::symbolic::{Quantizer, SubgoalObservation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenSubgoal {
    pub id: usize,
    /// Responsibility-weighted mean of member representatives.
    pub state: AgentState,
    pub cell: [i32; 2],
    pub members: usize,
}

/// Maps each mixture component back to state space.
pub fn hidden_subgoals(
    obs: &[SubgoalObservation],
    emb: &Embedding,
    fit: &GmmFit,
    q: &Quantizer,
) -> Vec<HiddenSubgoal> {
    let (resp, _) = fit.model.responsibilities(&emb.points);
    (0..fit.model.k)
        .map(|k| {
            let w: Vec<f64> = resp.iter().map(|r| r[k]).collect();
            let total: f64 = w.iter().sum::<f64>().max(f64::MIN_POSITIVE);
            let mean = |f: fn(&AgentState) -> f64| obs.iter().zip(&w).map(|(o, w)| w * f(&o.rep_state)).sum::<f64>() / total;
            let (s, c) = obs
                .iter()
                .zip(&w)
                .fold((0.0, 0.0), |(s, c), (o, w)| (s + w * o.rep_state.psi.sin(), c + w * o.rep_state.psi.cos()));
            let state = AgentState::new(mean(|s| s.x), mean(|s| s.y), mean(|s| s.v), circular_mean([s.atan2(c)]));
            HiddenSubgoal {
                id: k,
                cell: q.cell_xy(state.pos()),
                state,
                members: fit.memberships.iter().filter(|&&m| m == k).count(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub embedding: Embedding,
    pub fit: GmmFit,
    pub hidden: Vec<HiddenSubgoal>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterParams {
    pub k_nn: usize,
    pub dims: usize,
    pub k_max: usize,
    pub heading_weight: f64,
    pub seed: u64,
    /// Absolute covariance floor (m²); `None` keeps the relative floor only.
    pub cov_floor: Option<f64>,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            k_nn: 8,
            dims: 2,
            k_max: 8,
            heading_weight: 0.5,
            seed: 0,
            cov_floor: None,
        }
    }
}

pub fn cluster_subgoals(obs: &[SubgoalObservation], q: &Quantizer, p: &ClusterParams) -> Result<ClusterResult> {
    if obs.len() < 2 {
        return Err(Error::InsufficientData(format!("{} subgoal observations", obs.len())));
    }
    let embedding = isomap_embed(obs, p.k_nn.min(obs.len() - 1), p.dims, p.heading_weight)?;
    let fit = fit_gmm_select_floored(&embedding.points, p.k_max, p.seed, p.cov_floor)?;
    let hidden = hidden_subgoals(obs, &embedding, &fit, q);
    Ok(ClusterResult { embedding, fit, hidden })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub traj: usize,
    /// Half-open sample range.
    pub start: usize,
    pub end: usize,
    /// 1-based cluster label; `K* + 1` marks the goal-reaching segment.
    pub membership: usize,
    /// Hidden subgoal that terminates the segment, if any.
    pub terminal: Option<usize>,
}

impl Segment {
    /// Samples of the segment including the cut sample it ends on.
    pub fn samples<'a>(&self, ds: &'a Dataset) -> &'a [Sample] {
        let t = &ds.trajectories[self.traj];
        &t.samples[self.start..(self.end + 1).min(t.len())]
    }

    pub fn states(&self, ds: &Dataset) -> Vec<AgentState> {
        self.samples(ds).iter().map(|s| s.state).collect()
    }
}

/// Cuts each trajectory at its first entry into each hidden subgoal's
/// spatial cell, in visit order.
pub fn segment_trajectories(ds: &Dataset, hidden: &[HiddenSubgoal], q: &Quantizer) -> Vec<Segment> {
    let k_star = hidden.len();
    let goal_cell = q.cell_xy(ds.env.goal.pos());
    let goal_subgoal = hidden.iter().find(|h| h.cell == goal_cell).map(|h| h.id);
    let mut out = Vec::new();
    for (ti, traj) in ds.trajectories.iter().enumerate() {
        let mut cuts: Vec<(usize, usize)> = hidden
            .iter()
            .filter(|h| Some(h.id) != goal_subgoal)
            .filter_map(|h| traj.states().position(|s| q.cell_xy(s.pos()) == h.cell).map(|i| (i, h.id)))
            .filter(|&(i, _)| i > 0 && i + 1 < traj.len())
            .collect();
        cuts.sort();
        cuts.dedup_by_key(|c| c.0);
        let mut start = 0;
        for (i, id) in cuts {
            out.push(Segment {
                traj: ti,
                start,
                end: i,
                membership: id + 1,
                terminal: Some(id),
            });
            start = i;
        }
        let (membership, terminal) = match goal_subgoal {
            Some(g) => (g + 1, Some(g)),
            None => (k_star + 1, None),
        };
        out.push(Segment {
            traj: ti,
            start,
            end: traj.len(),
            membership,
            terminal,
        });
    }
    out
}
