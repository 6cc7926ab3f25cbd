//! Shortest curvature-bounded paths between planar poses.
//!
//! Each candidate is a three-segment word of left arcs (`L`), right arcs
//! (`R`) and straights (`S`). Lengths are solved in closed form in units of
//! the turning radius and the shortest feasible word wins.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::model::{wrap_angle_unchecked, AgentState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PathKind {
    LSL,
    RSR,
    LSR,
    RSL,
    RLR,
    LRL,
}

impl PathKind {
    /// Tie-break order.
    pub const ALL: [PathKind; 6] = [
        PathKind::LSL,
        PathKind::RSR,
        PathKind::LSR,
        PathKind::RSL,
        PathKind::RLR,
        PathKind::LRL,
    ];

    /// Turn direction per segment: +1 left, -1 right, 0 straight.
    pub fn turns(self) -> [i8; 3] {
        match self {
            PathKind::LSL => [1, 0, 1],
            PathKind::RSR => [-1, 0, -1],
            PathKind::LSR => [1, 0, -1],
            PathKind::RSL => [-1, 0, 1],
            PathKind::RLR => [-1, 1, -1],
            PathKind::LRL => [1, -1, 1],
        }
    }
}

/// A pose `(x, y, ψ)` as used by the path planner.
pub type Pose = [f64; 3];

pub fn pose_of(s: &AgentState) -> Pose {
    [s.x, s.y, s.psi]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DubinsPath {
    pub start: Pose,
    pub kind: PathKind,
    /// Segment lengths in metres.
    pub segment_params: [f64; 3],
    pub rho: f64,
    pub length: f64,
}

fn mod2pi(x: f64) -> f64 {
    let r = x.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Normalised segment lengths of one word, or `None` when infeasible.
fn word(kind: PathKind, alpha: f64, beta: f64, d: f64) -> Option<[f64; 3]> {
    let (sa, ca) = alpha.sin_cos();
    let (sb, cb) = beta.sin_cos();
    let c_ab = (alpha - beta).cos();
    match kind {
        PathKind::LSL => {
            let p2 = 2.0 + d * d - 2.0 * c_ab + 2.0 * d * (sa - sb);
            if p2 < 0.0 {
                return None;
            }
            let tmp = (cb - ca).atan2(d + sa - sb);
            Some([mod2pi(tmp - alpha), p2.sqrt(), mod2pi(beta - tmp)])
        }
        PathKind::RSR => {
            let p2 = 2.0 + d * d - 2.0 * c_ab + 2.0 * d * (sb - sa);
            if p2 < 0.0 {
                return None;
            }
            let tmp = (ca - cb).atan2(d - sa + sb);
            Some([mod2pi(alpha - tmp), p2.sqrt(), mod2pi(tmp - beta)])
        }
        PathKind::LSR => {
            let p2 = -2.0 + d * d + 2.0 * c_ab + 2.0 * d * (sa + sb);
            if p2 < 0.0 {
                return None;
            }
            let p = p2.sqrt();
            let tmp = (-ca - cb).atan2(d + sa + sb) - (-2.0f64).atan2(p);
            Some([mod2pi(tmp - alpha), p, mod2pi(tmp - mod2pi(beta))])
        }
        PathKind::RSL => {
            let p2 = -2.0 + d * d + 2.0 * c_ab - 2.0 * d * (sa + sb);
            if p2 < 0.0 {
                return None;
            }
            let p = p2.sqrt();
            let tmp = (ca + cb).atan2(d - sa - sb) - 2.0f64.atan2(p);
            Some([mod2pi(alpha - tmp), p, mod2pi(beta - tmp)])
        }
        PathKind::RLR => {
            let tmp = (6.0 - d * d + 2.0 * c_ab + 2.0 * d * (sa - sb)) / 8.0;
            if tmp.abs() > 1.0 {
                return None;
            }
            let p = mod2pi(TAU - tmp.acos());
            let t = mod2pi(alpha - (ca - cb).atan2(d - sa + sb) + p / 2.0);
            Some([t, p, mod2pi(alpha - beta - t + p)])
        }
        PathKind::LRL => {
            let tmp = (6.0 - d * d + 2.0 * c_ab + 2.0 * d * (sb - sa)) / 8.0;
            if tmp.abs() > 1.0 {
                return None;
            }
            let p = mod2pi(TAU - tmp.acos());
            let t = mod2pi(-alpha - (ca - cb).atan2(d + sa - sb) + p / 2.0);
            Some([t, p, mod2pi(mod2pi(beta) - alpha - t + p)])
        }
    }
}

/// All feasible candidate paths, in tie-break order.
pub fn candidates(start: Pose, end: Pose, rho: f64) -> Vec<DubinsPath> {
    assert!(rho > 0.0, "turning radius must be positive");
    let dx = end[0] - start[0];
    let dy = end[1] - start[1];
    let d = dx.hypot(dy) / rho;
    let theta = if d > 0.0 { mod2pi(dy.atan2(dx)) } else { 0.0 };
    let alpha = mod2pi(start[2] - theta);
    let beta = mod2pi(end[2] - theta);
    PathKind::ALL
        .iter()
        .filter_map(|&kind| {
            word(kind, alpha, beta, d).map(|seg| {
                let segment_params = seg.map(|s| s * rho);
                DubinsPath {
                    start,
                    kind,
                    segment_params,
                    rho,
                    length: segment_params.iter().sum(),
                }
            })
        })
        .collect()
}

/// Shortest path; ties resolved by [`PathKind::ALL`] order.
pub fn dubins_shortest_path(start: Pose, end: Pose, rho: f64) -> DubinsPath {
    candidates(start, end, rho)
        .into_iter()
        .fold(None::<DubinsPath>, |best, p| match best {
            Some(b) if b.length <= p.length + 1e-12 => Some(b),
            _ => Some(p),
        })
        .expect("a Dubins path always exists")
}

/// Advances a pose along one primitive by arc length `len`.
pub fn advance(p: Pose, turn: i8, len: f64, rho: f64) -> Pose {
    match turn {
        0 => [p[0] + len * p[2].cos(), p[1] + len * p[2].sin(), p[2]],
        _ => {
            let k = turn as f64 / rho;
            let psi1 = p[2] + k * len;
            [
                p[0] + (psi1.sin() - p[2].sin()) / k,
                p[1] - (psi1.cos() - p[2].cos()) / k,
                psi1,
            ]
        }
    }
}

impl DubinsPath {
    /// Pose at arc length `s` (clamped to the path).
    pub fn sample(&self, s: f64) -> Pose {
        let mut rest = s.clamp(0.0, self.length);
        let mut p = self.start;
        for (turn, len) in self.kind.turns().into_iter().zip(self.segment_params) {
            let step = rest.min(len);
            p = advance(p, turn, step, self.rho);
            rest -= step;
            if rest <= 0.0 {
                break;
            }
        }
        [p[0], p[1], wrap_angle_unchecked(p[2])]
    }

    pub fn endpoint(&self) -> Pose {
        self.sample(self.length)
    }

    /// Poses every `step` metres including both ends.
    pub fn sample_many(&self, step: f64) -> Vec<Pose> {
        let n = (self.length / step).ceil().max(1.0) as usize;
        (0..=n)
            .map(|i| self.sample(self.length * i as f64 / n as f64))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::GroupElement;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn pose_err(a: Pose, b: Pose) -> f64 {
        (a[0] - b[0])
            .abs()
            .max((a[1] - b[1]).abs())
            .max(wrap_angle_unchecked(a[2] - b[2]).abs())
    }

    #[test]
    fn straight_line() {
        let p = dubins_shortest_path([0.0, 0.0, 0.0], [10.0, 0.0, 0.0], 1.0);
        assert!((p.length - 10.0).abs() < 1e-12);
        assert_eq!(p.kind, PathKind::LSL);
    }

    #[test]
    fn half_turn_left() {
        let p = dubins_shortest_path([0.0, 0.0, 0.0], [0.0, 2.0, PI], 1.0);
        assert!((p.length - PI).abs() < 1e-9, "{p:?}");
        assert!(pose_err(p.endpoint(), [0.0, 2.0, PI]) < 1e-9);
    }

    #[test]
    fn zero_length_for_identical_poses() {
        let p = dubins_shortest_path([3.0, -1.0, 0.7], [3.0, -1.0, 0.7], 2.0);
        assert!(p.length.abs() < 1e-12);
    }

    fn pose() -> impl Strategy<Value = Pose> {
        (-10.0f64..10.0, -10.0f64..10.0, -PI..PI).prop_map(|(x, y, p)| [x, y, p])
    }

    proptest! {
        #[test]
        fn candidates_reach_the_target(a in pose(), b in pose(), rho in 0.3f64..3.0) {
            for c in candidates(a, b, rho) {
                prop_assert!(c.segment_params.iter().all(|&s| s >= 0.0));
                prop_assert!(pose_err(c.endpoint(), b) < 1e-6, "{:?} -> {:?}", c, c.endpoint());
            }
        }

        #[test]
        fn length_is_se2_invariant(a in pose(), b in pose(), psi in -PI..PI, tx in -20.0f64..20.0, ty in -20.0f64..20.0) {
            let m = GroupElement::new(psi, [tx, ty], false);
            let map = |p: Pose| {
                let q = m.act_point([p[0], p[1]]);
                [q[0], q[1], m.act_heading(p[2])]
            };
            let l0 = dubins_shortest_path(a, b, 1.0).length;
            let l1 = dubins_shortest_path(map(a), map(b), 1.0).length;
            prop_assert!((l0 - l1).abs() <= 1e-9 * l0.max(1.0));
        }
    }
}
