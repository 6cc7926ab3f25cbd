//! Shortest routes on the visibility graph of inflated obstacle vertices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dist, Environment, Polygon};

/// Node of the visibility graph other than the start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RouteNode {
    /// Global vertex index, obstacle-major.
    Vertex(usize),
    Goal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub waypoints: Vec<[f64; 2]>,
    pub nodes: Vec<RouteNode>,
    pub length: f64,
}

impl Route {
    /// Vertex waypoints only (the goal excluded).
    pub fn vertex_waypoints(&self) -> impl Iterator<Item = (usize, [f64; 2])> + '_ {
        self.nodes.iter().zip(&self.waypoints).filter_map(|(n, w)| match n {
            RouteNode::Vertex(i) => Some((*i, *w)),
            RouteNode::Goal => None,
        })
    }
}

/// Visibility graph over inflated obstacles, reusable across many starts.
#[derive(Debug, Clone)]
pub struct VisibilityGraph {
    pub inflated: Vec<Polygon>,
    /// Usable inflated vertices (not swallowed by another inflated obstacle).
    pub vertices: Vec<(usize, [f64; 2])>,
    goal: [f64; 2],
}

impl VisibilityGraph {
    pub fn new(env: &Environment, inflate: f64) -> Self {
        let inflated = env.inflated(inflate);
        let mut vertices = Vec::new();
        let mut gid = 0;
        for poly in &inflated {
            for v in &poly.vertices {
                if !inflated.iter().any(|o| o.contains(*v)) {
                    vertices.push((gid, *v));
                }
                gid += 1;
            }
        }
        Self {
            inflated,
            vertices,
            goal: env.goal.pos(),
        }
    }

    pub fn visible(&self, a: [f64; 2], b: [f64; 2]) -> bool {
        !self.inflated.iter().any(|o| o.segment_hits_interior(a, b))
    }

    pub fn blocked(&self, p: [f64; 2]) -> bool {
        self.inflated.iter().any(|o| o.contains(p))
    }

    /// Dijkstra from `start` to the goal. Among equal-cost predecessors the
    /// smaller node index wins.
    pub fn plan(&self, start: [f64; 2]) -> Result<Route> {
        if self.blocked(start) {
            return Err(Error::InfeasibleStart);
        }
        // Node 0 = start, 1..=n vertices, n + 1 = goal.
        let n = self.vertices.len();
        let pos = |i: usize| -> [f64; 2] {
            if i == 0 {
                start
            } else if i == n + 1 {
                self.goal
            } else {
                self.vertices[i - 1].1
            }
        };
        let total = n + 2;
        let mut cost = vec![f64::INFINITY; total];
        let mut pred = vec![usize::MAX; total];
        let mut done = vec![false; total];
        cost[0] = 0.0;
        const TIE: f64 = 1e-9;
        loop {
            let mut u = usize::MAX;
            for i in 0..total {
                if !done[i] && cost[i].is_finite() && (u == usize::MAX || cost[i] < cost[u] - TIE) {
                    u = i;
                }
            }
            if u == usize::MAX || u == n + 1 {
                break;
            }
            done[u] = true;
            for w in 1..total {
                if done[w] || !self.visible(pos(u), pos(w)) {
                    continue;
                }
                let c = cost[u] + dist(pos(u), pos(w));
                if c < cost[w] - TIE || (c <= cost[w] + TIE && u < pred[w]) {
                    cost[w] = c;
                    pred[w] = u;
                }
            }
        }
        if !cost[n + 1].is_finite() {
            return Err(Error::NoRoute);
        }
        let mut chain = Vec::new();
        let mut cur = n + 1;
        while cur != 0 {
            chain.push(cur);
            cur = pred[cur];
        }
        chain.reverse();
        Ok(Route {
            waypoints: chain.iter().map(|&i| pos(i)).collect(),
            nodes: chain
                .iter()
                .map(|&i| {
                    if i == n + 1 {
                        RouteNode::Goal
                    } else {
                        RouteNode::Vertex(self.vertices[i - 1].0)
                    }
                })
                .collect(),
            length: cost[n + 1],
        })
    }
}

/// Shortest visibility-graph route from `start` to the goal around obstacles
/// inflated by `inflate`; waypoints exclude the start and end at the goal.
pub fn plan_route(env: &Environment, start: [f64; 2], inflate: f64) -> Result<Route> {
    VisibilityGraph::new(env, inflate).plan(start)
}
