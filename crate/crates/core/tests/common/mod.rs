//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::{PI, TAU};

fn wrap(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(TAU) - PI;
    if r <= -PI {
        r + TAU
    } else {
        r
    }
}

/// Pose after driving `len` metres with constant curvature `k`.
pub fn drive(p: [f64; 3], k: f64, len: f64) -> [f64; 3] {
    let [x, y, psi] = p;
    if k == 0.0 {
        return [x + len * psi.cos(), y + len * psi.sin(), psi];
    }
    let dpsi = k * len;
    [
        x + (f64::sin(psi + dpsi) - psi.sin()) / k,
        y - (f64::cos(psi + dpsi) - psi.cos()) / k,
        psi + dpsi,
    ]
}

/// Shortest path length between poses when the curvature takes only the
/// values `{-1/rho, 0, 1/rho}` over at most three pieces. Every control word
/// is solved for its three lengths by Newton's method from a grid of starting
/// guesses; no closed-form path geometry is used.
pub fn dubins_oracle(a: [f64; 3], b: [f64; 3], rho: f64) -> f64 {
    let ks = [1.0 / rho, 0.0, -1.0 / rho];
    let guesses = [0.0, 0.5, 1.5, 3.0, 5.0];
    let mut best = f64::INFINITY;
    for k1 in ks {
        for k2 in ks {
            for k3 in ks {
                let k = [k1, k2, k3];
                let resid = |t: [f64; 3]| {
                    let mut p = a;
                    for i in 0..3 {
                        p = drive(p, k[i], t[i]);
                    }
                    [p[0] - b[0], p[1] - b[1], wrap(p[2] - b[2]) * rho]
                };
                for &g1 in &guesses {
                    for &g2 in &guesses {
                        for &g3 in &guesses {
                            let mut t = [g1 * rho, g2 * rho, g3 * rho];
                            let mut ok = false;
                            for _ in 0..60 {
                                let r = resid(t);
                                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                                if n < 1e-10 {
                                    ok = true;
                                    break;
                                }
                                let h = 1e-7 * rho;
                                let mut jac = [[0.0; 3]; 3];
                                for j in 0..3 {
                                    let mut tp = t;
                                    tp[j] += h;
                                    let rp = resid(tp);
                                    for i in 0..3 {
                                        jac[i][j] = (rp[i] - r[i]) / h;
                                    }
                                }
                                let Some(step) = solve3(jac, r) else { break };
                                for j in 0..3 {
                                    t[j] -= step[j];
                                }
                            }
                            // Arcs longer than a full circle are never shortest.
                            let valid = t.iter().zip(&k).all(|(&ti, &ki)| ti >= -1e-9 && (ki == 0.0 || ti <= TAU * rho + 1e-9));
                            if ok && valid {
                                best = best.min(t.iter().sum());
                            }
                        }
                    }
                }
            }
        }
    }
    best
}

fn solve3(m: [[f64; 3]; 3], r: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(&m);
    if d.abs() < 1e-14 {
        return None;
    }
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let mut mc = m;
        for i in 0..3 {
            mc[i][c] = r[i];
        }
        *o = det(&mc) / d;
    }
    Some(out)
}

/// Rigid alignment of `a` onto `b` by the closed form for planar points,
/// with reflection tried when allowed. Returns `(psi, t, reflect, rms)` for
/// the map `p -> R(psi) F p + t`, `F = diag(1, -1)` when reflecting.
pub fn procrustes(a: &[[f64; 2]], b: &[[f64; 2]], allow_reflect: bool) -> (f64, [f64; 2], bool, f64) {
    let n = a.len() as f64;
    let solve = |reflect: bool| {
        let s = if reflect { -1.0 } else { 1.0 };
        let a: Vec<[f64; 2]> = a.iter().map(|p| [p[0], s * p[1]]).collect();
        let ca = [a.iter().map(|p| p[0]).sum::<f64>() / n, a.iter().map(|p| p[1]).sum::<f64>() / n];
        let cb = [b.iter().map(|p| p[0]).sum::<f64>() / n, b.iter().map(|p| p[1]).sum::<f64>() / n];
        let (mut dot, mut cross) = (0.0, 0.0);
        for (p, q) in a.iter().zip(b) {
            let (px, py) = (p[0] - ca[0], p[1] - ca[1]);
            let (qx, qy) = (q[0] - cb[0], q[1] - cb[1]);
            dot += px * qx + py * qy;
            cross += px * qy - py * qx;
        }
        let psi = cross.atan2(dot);
        let (sn, cs) = psi.sin_cos();
        let t = [cb[0] - (cs * ca[0] - sn * ca[1]), cb[1] - (sn * ca[0] + cs * ca[1])];
        let ss: f64 = a
            .iter()
            .zip(b)
            .map(|(p, q)| (cs * p[0] - sn * p[1] + t[0] - q[0]).powi(2) + (sn * p[0] + cs * p[1] + t[1] - q[1]).powi(2))
            .sum();
        (psi, t, reflect, (ss / n).sqrt())
    };
    let plain = solve(false);
    if !allow_reflect {
        return plain;
    }
    let mirrored = solve(true);
    if mirrored.3 < plain.3 {
        mirrored
    } else {
        plain
    }
}

pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap(a - b).abs()
}
