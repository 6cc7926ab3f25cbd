//! The planar symmetry group SE(2), optionally extended by the mirror
//! reflection `y ↦ −y`, acting on states, controls, trajectories and
//! environments.

use serde::{Deserialize, Serialize};

use crate::model::{
    wrap_angle_unchecked, AgentState, Bounds, ControlInput, Environment, Polygon, Sample,
    Trajectory,
};

/// `m(ψ, t)` with an optional reflection applied before the rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupElement {
    pub psi: f64,
    pub t: [f64; 2],
    pub reflect: bool,
}

impl Default for GroupElement {
    fn default() -> Self {
        Self::identity()
    }
}

impl GroupElement {
    pub fn identity() -> Self {
        Self {
            psi: 0.0,
            t: [0.0, 0.0],
            reflect: false,
        }
    }

    pub fn new(psi: f64, t: [f64; 2], reflect: bool) -> Self {
        Self {
            psi: wrap_angle_unchecked(psi),
            t,
            reflect,
        }
    }

    pub fn rotation(psi: f64) -> Self {
        Self::new(psi, [0.0, 0.0], false)
    }

    pub fn translation(t: [f64; 2]) -> Self {
        Self::new(0.0, t, false)
    }

    pub fn mirror() -> Self {
        Self::new(0.0, [0.0, 0.0], true)
    }

    fn sign(&self) -> f64 {
        if self.reflect {
            -1.0
        } else {
            1.0
        }
    }

    /// Linear part applied to a vector.
    pub fn act_vector(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.psi.sin_cos();
        let (x, y) = (v[0], self.sign() * v[1]);
        [c * x - s * y, s * x + c * y]
    }

    pub fn act_point(&self, p: [f64; 2]) -> [f64; 2] {
        let r = self.act_vector(p);
        [r[0] + self.t[0], r[1] + self.t[1]]
    }

    pub fn act_heading(&self, psi: f64) -> f64 {
        wrap_angle_unchecked(self.sign() * psi + self.psi)
    }

    /// Ψ(m, x): reflect, rotate and translate the position, carry the heading
    /// along and leave the speed untouched.
    pub fn act(&self, s: &AgentState) -> AgentState {
        let p = self.act_point(s.pos());
        AgentState::new(p[0], p[1], s.v, self.act_heading(s.psi))
    }

    /// Controls transform with the heading: reflection reverses turn direction.
    pub fn act_control(&self, u: &ControlInput) -> ControlInput {
        ControlInput::new(self.sign() * u.omega, u.a)
    }

    pub fn act_trajectory(&self, traj: &Trajectory) -> Trajectory {
        Trajectory {
            dt: traj.dt,
            samples: traj
                .samples
                .iter()
                .map(|s| Sample {
                    state: self.act(&s.state),
                    control: self.act_control(&s.control),
                })
                .collect(),
        }
    }

    pub fn act_polygon(&self, poly: &Polygon) -> Polygon {
        let mut vertices: Vec<[f64; 2]> = poly.vertices.iter().map(|v| self.act_point(*v)).collect();
        if self.reflect {
            // Keep counter-clockwise orientation, starting from the image of vertex 0.
            vertices[1..].reverse();
        }
        Polygon::new(vertices)
    }

    /// Restriction of the action to the environment: obstacles and goal are
    /// transformed; the bounds become the box enclosing the transformed ones.
    pub fn act_environment(&self, env: &Environment) -> Environment {
        Environment {
            bounds: Bounds::enclosing(env.bounds.corners().iter().map(|c| self.act_point(*c))),
            goal: self.act(&env.goal),
            goal_tolerance: env.goal_tolerance,
            obstacles: env.obstacles.iter().map(|o| self.act_polygon(o)).collect(),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &GroupElement) -> GroupElement {
        let t = self.act_point(other.t);
        GroupElement::new(self.psi + self.sign() * other.psi, t, self.reflect ^ other.reflect)
    }

    pub fn inverse(&self) -> GroupElement {
        let psi = if self.reflect { self.psi } else { -self.psi };
        let lin = GroupElement::new(psi, [0.0, 0.0], self.reflect);
        let t = lin.act_vector(self.t);
        GroupElement::new(psi, [-t[0], -t[1]], self.reflect)
    }

    /// Homogeneous 3×3 matrix, row-major.
    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        let (s, c) = self.psi.sin_cos();
        let f = self.sign();
        [
            [c, -s * f, self.t[0]],
            [s, c * f, self.t[1]],
            [0.0, 0.0, 1.0],
        ]
    }

    /// Largest component difference, with the angle compared on the circle.
    pub fn distance(&self, other: &GroupElement) -> f64 {
        if self.reflect != other.reflect {
            return f64::INFINITY;
        }
        let dpsi = wrap_angle_unchecked(self.psi - other.psi).abs();
        dpsi.max((self.t[0] - other.t[0]).abs())
            .max((self.t[1] - other.t[1]).abs())
    }
}
