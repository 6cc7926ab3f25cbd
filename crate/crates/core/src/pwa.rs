//! Piecewise-affine identification by local regression and clustering.
//!
//! Regressors are `z = (x, y, v, ψ, ω, a)` and targets the next state
//! `(x, y, v, ψ)`; the heading target is unwrapped relative to the current
//! heading so the map stays affine across the ±π cut.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::argmax;
use crate::kmeans;
use crate::model::{angle_diff, wrap_angle_unchecked, AgentState, Bounds, ControlInput};

pub const NX: usize = 4;
pub const NU: usize = 2;
pub const NZ: usize = NX + NU;

/// One regression pair `(x(t), u(t)) → x(t+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub x: [f64; NX],
    pub u: [f64; NU],
    pub next: [f64; NX],
}

impl Transition {
    pub fn new(s: &AgentState, u: &ControlInput, next: &AgentState) -> Self {
        Self {
            x: s.to_array(),
            u: [u.omega, u.a],
            next: [next.x, next.y, next.v, s.psi + angle_diff(next.psi, s.psi)],
        }
    }

    pub fn z(&self) -> [f64; NZ] {
        [self.x[0], self.x[1], self.x[2], self.x[3], self.u[0], self.u[1]]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMode {
    pub a: [[f64; NX]; NX],
    pub b: [[f64; NU]; NX],
    pub d: [f64; NX],
}

impl AffineMode {
    pub fn step(&self, x: &[f64; NX], u: &[f64; NU]) -> [f64; NX] {
        let mut out = self.d;
        for i in 0..NX {
            for j in 0..NX {
                out[i] += self.a[i][j] * x[j];
            }
            for j in 0..NU {
                out[i] += self.b[i][j] * u[j];
            }
        }
        out
    }

    /// Parameters as a `(NZ + 1) × NX` matrix, rows `[A | B | d]ᵀ`.
    fn from_theta(t: &DMatrix<f64>) -> Self {
        let mut m = AffineMode {
            a: [[0.0; NX]; NX],
            b: [[0.0; NU]; NX],
            d: [0.0; NX],
        };
        for i in 0..NX {
            for j in 0..NX {
                m.a[i][j] = t[(j, i)];
            }
            for j in 0..NU {
                m.b[i][j] = t[(NX + j, i)];
            }
            m.d[i] = t[(NZ, i)];
        }
        m
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(NX * (NZ + 1));
        for i in 0..NX {
            v.extend_from_slice(&self.a[i]);
            v.extend_from_slice(&self.b[i]);
            v.push(self.d[i]);
        }
        v
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|x| x.is_finite())
    }
}

/// Per-coordinate affine standardisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Scaler {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let n = rows.len() as f64;
        let d = rows[0].len();
        let mean: Vec<f64> = (0..d).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
        let scale = (0..d)
            .map(|k| {
                let var = rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, r: &[f64]) -> Vec<f64> {
        r.iter().zip(&self.mean).zip(&self.scale).map(|((x, m), s)| (x - m) / s).collect()
    }
}

/// One-vs-rest linear discriminant over standardised `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regions {
    pub scaler: Scaler,
    /// One weight row per mode, last entry the bias.
    pub weights: Vec<Vec<f64>>,
}

impl Regions {
    pub fn scores(&self, z: &[f64; NZ]) -> Vec<f64> {
        let f = self.scaler.apply(z);
        self.weights
            .iter()
            .map(|w| w[..NZ].iter().zip(&f).map(|(a, b)| a * b).sum::<f64>() + w[NZ])
            .collect()
    }

    /// Region winner, ties to the lowest index.
    pub fn winner(&self, z: &[f64; NZ]) -> usize {
        argmax(&self.scores(z))
    }

    /// One-vs-rest least squares with each side of the split weighted to
    /// equal total mass, so small modes are not swallowed by large ones.
    pub fn fit(zs: &[[f64; NZ]], labels: &[usize], n_modes: usize, ridge: f64) -> Self {
        let rows: Vec<Vec<f64>> = zs.iter().map(|z| z.to_vec()).collect();
        let scaler = Scaler::fit(&rows);
        let n = zs.len();
        let x = DMatrix::from_fn(n, NZ + 1, |i, j| if j < NZ { (rows[i][j] - scaler.mean[j]) / scaler.scale[j] } else { 1.0 });
        let weights = (0..n_modes)
            .map(|k| {
                let pos = labels.iter().filter(|&&l| l == k).count().max(1) as f64;
                let neg = (n as f64 - pos).max(1.0);
                let w: Vec<f64> = labels.iter().map(|&l| if l == k { 0.5 / pos } else { 0.5 / neg }).collect();
                let xw = DMatrix::from_fn(n, NZ + 1, |i, j| x[(i, j)] * w[i]);
                let xtx = x.transpose() * &xw + DMatrix::identity(NZ + 1, NZ + 1) * ridge;
                let y = DVector::from_fn(n, |i, _| if labels[i] == k { 1.0 } else { -1.0 });
                let chol = xtx.cholesky().expect("ridge system is positive definite");
                chol.solve(&(xw.transpose() * y)).iter().copied().collect()
            })
            .collect();
        Self { scaler, weights }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwaModel {
    pub modes: Vec<AffineMode>,
    pub regions: Regions,
    pub n_modes: usize,
    /// Extent of the training positions, used for divergence checks.
    pub bounds: Bounds,
    pub warnings: Vec<String>,
    pub rounds: usize,
    /// Total squared one-step residual after each refit.
    pub residual_history: Vec<f64>,
}

impl PwaModel {
    pub fn mode_at(&self, x: &[f64; NX], u: &[f64; NU]) -> usize {
        self.regions.winner(&[x[0], x[1], x[2], x[3], u[0], u[1]])
    }

    pub fn predict(&self, t: &Transition) -> [f64; NX] {
        self.modes[self.mode_at(&t.x, &t.u)].step(&t.x, &t.u)
    }

    pub fn labels(&self, data: &[Transition]) -> Vec<usize> {
        data.iter().map(|t| self.mode_at(&t.x, &t.u)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PwaParams {
    pub n_modes: usize,
    pub c_local: usize,
    /// Weight of the standardised datapoint location against the
    /// standardised local parameters in the clustering features.
    pub location_weight: f64,
    /// Per-feature multipliers on the location part, in (x, y, v, psi, omega, a) order.
    pub feature_weights: [f64; NZ],
    /// Ridge on standardised local regressors, relative to neighbourhood size.
    pub local_ridge: f64,
    pub region_ridge: f64,
    pub max_rounds: usize,
    /// k-means restarts; the lowest-inertia run is kept.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for PwaParams {
    fn default() -> Self {
        Self {
            n_modes: 3,
            c_local: 12,
            location_weight: 0.3,
            feature_weights: [1.0; NZ],
            local_ridge: 1e-6,
            region_ridge: 1e-6,
            max_rounds: 20,
            restarts: 8,
            seed: 0,
        }
    }
}

fn design(data: &[Transition], idx: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
    let x = DMatrix::from_fn(idx.len(), NZ + 1, |i, j| if j < NZ { data[idx[i]].z()[j] } else { 1.0 });
    let y = DMatrix::from_fn(idx.len(), NX, |i, j| data[idx[i]].next[j]);
    (x, y)
}

/// Ordinary least squares `[A | B | d]` on the given samples.
pub fn fit_affine(data: &[Transition], idx: &[usize]) -> Option<AffineMode> {
    if idx.is_empty() {
        return None;
    }
    let (x, y) = design(data, idx);
    let svd = x.svd(true, true);
    let theta = svd.solve(&y, 1e-12).ok()?;
    let m = AffineMode::from_theta(&theta);
    m.is_finite().then_some(m)
}

fn squared_residual(mode: &AffineMode, t: &Transition) -> f64 {
    mode.step(&t.x, &t.u).iter().zip(&t.next).map(|(a, b)| (a - b).powi(2)).sum()
}

/// Local ridge fit on a neighbourhood, in standardised regressor units.
/// Returns `None` when the neighbourhood has no spread at all.
fn local_fit(data: &[Transition], idx: &[usize], scaler: &Scaler, ridge: f64) -> Option<Vec<f64>> {
    let n = idx.len();
    let zs: Vec<Vec<f64>> = idx.iter().map(|&i| scaler.apply(&data[i].z())).collect();
    let spread = (0..NZ).any(|k| zs.iter().any(|z| (z[k] - zs[0][k]).abs() > 1e-12));
    if !spread {
        return None;
    }
    let x = DMatrix::from_fn(n, NZ + 1, |i, j| if j < NZ { zs[i][j] } else { 1.0 });
    let y = DMatrix::from_fn(n, NX, |i, j| data[idx[i]].next[j]);
    let mut reg = DMatrix::identity(NZ + 1, NZ + 1) * (ridge * n as f64);
    reg[(NZ, NZ)] = 0.0;
    let theta = (x.transpose() * &x + reg).cholesky()?.solve(&(x.transpose() * y));
    Some(theta.iter().copied().collect())
}

fn knn(points: &[Vec<f64>], i: usize, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(j, p)| (p.iter().zip(&points[i]).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), j))
        .collect();
    let k = k.min(d.len());
    d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = d[..k].iter().map(|e| e.1).collect();
    out.sort_unstable();
    out
}

fn position_bounds(data: &[Transition]) -> Bounds {
    let mut b = Bounds {
        xmin: f64::INFINITY,
        ymin: f64::INFINITY,
        xmax: f64::NEG_INFINITY,
        ymax: f64::NEG_INFINITY,
    };
    for t in data {
        b.xmin = b.xmin.min(t.x[0]);
        b.xmax = b.xmax.max(t.x[0]);
        b.ymin = b.ymin.min(t.x[1]);
        b.ymax = b.ymax.max(t.x[1]);
    }
    b
}

/// Initial mode labels from local regressions clustered with k-means.
pub fn local_clustering(data: &[Transition], p: &PwaParams) -> Result<Vec<usize>> {
    let z_rows: Vec<Vec<f64>> = data.iter().map(|t| t.z().to_vec()).collect();
    let scaler = Scaler::fit(&z_rows);
    let zs: Vec<Vec<f64>> = z_rows.iter().map(|r| scaler.apply(r)).collect();
    let params: Vec<Vec<f64>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let nb = knn(&zs, i, p.c_local + 1);
            if let Some(v) = local_fit(data, &nb, &scaler, p.local_ridge) {
                return Ok(v);
            }
            let nb = knn(&zs, i, 2 * p.c_local + 1);
            local_fit(data, &nb, &scaler, p.local_ridge).ok_or(Error::SingularLocalFit(i))
        })
        .collect::<Result<_>>()?;
    let pscale = Scaler::fit(&params);
    let feats: Vec<Vec<f64>> = params
        .iter()
        .zip(&zs)
        .map(|(th, z)| {
            let mut f = pscale.apply(th);
            f.extend(z.iter().zip(&p.feature_weights).map(|(x, w)| x * w * p.location_weight));
            f
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut best: Option<kmeans::KMeans> = None;
    for _ in 0..p.restarts.max(1) {
        let run = kmeans::kmeans(&feats, p.n_modes, 200, &mut rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.unwrap().labels)
}

/// Refits modes and regions from labels until the region labels stop changing.
pub fn refine(data: &[Transition], mut labels: Vec<usize>, p: &PwaParams) -> Result<PwaModel> {
    let mut warnings = Vec::new();
    let mut history = Vec::new();
    let mut previous: Option<Vec<AffineMode>> = None;
    let mut rounds = 0;
    let mut n_modes = p.n_modes;
    loop {
        rounds += 1;
        // Drop empty modes and renumber densely.
        let mut present: Vec<usize> = labels.clone();
        present.sort_unstable();
        present.dedup();
        if present.len() < n_modes {
            warnings.push(format!("{} empty mode(s) dropped in round {rounds}", n_modes - present.len()));
            for l in &mut labels {
                *l = present.binary_search(l).unwrap();
            }
            n_modes = present.len();
            previous = None;
        }
        let groups: Vec<Vec<usize>> = (0..n_modes).map(|k| (0..data.len()).filter(|&i| labels[i] == k).collect()).collect();
        let modes: Vec<AffineMode> = groups
            .iter()
            .map(|g| fit_affine(data, g).ok_or(Error::SingularLocalFit(g.first().copied().unwrap_or(0))))
            .collect::<Result<_>>()?;
        let total: f64 = data.iter().zip(&labels).map(|(t, &l)| squared_residual(&modes[l], t)).sum();
        if let Some(prev) = &previous {
            let before: f64 = data.iter().zip(&labels).map(|(t, &l)| squared_residual(&prev[l], t)).sum();
            assert!(total <= before * (1.0 + 1e-9) + 1e-18, "refit increased residual: {before} -> {total}");
        }
        history.push(total);
        let zs: Vec<[f64; NZ]> = data.iter().map(Transition::z).collect();
        let regions = Regions::fit(&zs, &labels, n_modes, p.region_ridge);
        let next: Vec<usize> = zs.iter().map(|z| regions.winner(z)).collect();
        let model = PwaModel {
            modes: modes.clone(),
            regions,
            n_modes,
            bounds: position_bounds(data),
            warnings: warnings.clone(),
            rounds,
            residual_history: history.clone(),
        };
        if next == labels || rounds >= p.max_rounds {
            return Ok(model);
        }
        let mut seen = next.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() < n_modes {
            // The discriminant cannot express every mode; keep the last consistent fit.
            return Ok(model);
        }
        labels = next;
        previous = Some(modes);
    }
}

pub fn identify_pwa(data: &[Transition], p: &PwaParams) -> Result<PwaModel> {
    if p.n_modes == 0 || p.c_local == 0 {
        return Err(Error::invalid("n_modes and c_local must be positive"));
    }
    if data.len() < p.n_modes * p.c_local {
        return Err(Error::InsufficientData(format!(
            "{} transitions for {} modes of {} neighbours",
            data.len(),
            p.n_modes,
            p.c_local
        )));
    }
    let labels = if p.n_modes == 1 { vec![0; data.len()] } else { local_clustering(data, p)? };
    refine(data, labels, p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeLabel {
    Starting,
    Coasting,
    Approaching,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeStats {
    pub samples: usize,
    pub mean_speed: f64,
    pub mean_tangential_accel: f64,
    pub mean_normal_accel: f64,
    pub std_speed: f64,
    pub std_tangential_accel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSemantics {
    pub labels: Option<Vec<ModeLabel>>,
    pub stats: Vec<ModeStats>,
}

impl ModeSemantics {
    pub fn mode_of(&self, label: ModeLabel) -> Option<usize> {
        self.labels.as_ref()?.iter().position(|l| *l == label)
    }
}

pub fn mode_statistics(model: &PwaModel, data: &[Transition]) -> Vec<ModeStats> {
    let labels = model.labels(data);
    (0..model.n_modes)
        .map(|k| {
            let v: Vec<&Transition> = data.iter().zip(&labels).filter(|(_, &l)| l == k).map(|(t, _)| t).collect();
            let n = v.len().max(1) as f64;
            let ms = v.iter().map(|t| t.x[2]).sum::<f64>() / n;
            let ma = v.iter().map(|t| t.u[1]).sum::<f64>() / n;
            ModeStats {
                samples: v.len(),
                mean_speed: ms,
                mean_tangential_accel: ma,
                mean_normal_accel: v.iter().map(|t| t.x[2] * t.u[0]).sum::<f64>() / n,
                std_speed: (v.iter().map(|t| (t.x[2] - ms).powi(2)).sum::<f64>() / n).sqrt(),
                std_tangential_accel: (v.iter().map(|t| (t.u[1] - ma).powi(2)).sum::<f64>() / n).sqrt(),
            }
        })
        .collect()
}

/// Orders modes by mean tangential acceleration (descending), then mean
/// speed (ascending), then index.
pub fn label_modes(stats: &[ModeStats]) -> Result<Vec<ModeLabel>> {
    if stats.len() != 3 {
        return Err(Error::SemanticsUndefined(stats.len()));
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&i, &j| {
        stats[j]
            .mean_tangential_accel
            .total_cmp(&stats[i].mean_tangential_accel)
            .then(stats[i].mean_speed.total_cmp(&stats[j].mean_speed))
            .then(i.cmp(&j))
    });
    let mut labels = vec![ModeLabel::Coasting; 3];
    labels[order[0]] = ModeLabel::Starting;
    labels[order[2]] = ModeLabel::Approaching;
    Ok(labels)
}

/// Labels and statistics; the error is returned alongside the statistics
/// when the mode count is not 3.
pub fn classify_mode_semantics(model: &PwaModel, data: &[Transition]) -> (ModeSemantics, Option<Error>) {
    let stats = mode_statistics(model, data);
    match label_modes(&stats) {
        Ok(l) => (ModeSemantics { labels: Some(l), stats }, None),
        Err(e) => (ModeSemantics { labels: None, stats }, Some(e)),
    }
}

/// Rolls the model forward under the given controls; the output starts with `x0`.
pub fn simulate_pwa(model: &PwaModel, x0: &AgentState, controls: &[ControlInput]) -> Result<Vec<AgentState>> {
    let b = &model.bounds;
    let (cx, cy) = (0.5 * (b.xmin + b.xmax), 0.5 * (b.ymin + b.ymax));
    let half = 0.5 * b.width().max(b.height()).max(1.0);
    let mut x = x0.to_array();
    let mut out = vec![*x0];
    for (k, u) in controls.iter().enumerate() {
        if !(u.omega.is_finite() && u.a.is_finite()) {
            return Err(Error::invalid(format!("non-finite control at step {k}")));
        }
        let uu = [u.omega, u.a];
        x = model.modes[model.mode_at(&x, &uu)].step(&x, &uu);
        x[3] = wrap_angle_unchecked(x[3]);
        let far = (x[0] - cx).abs().max((x[1] - cy).abs()) > 10.0 * half;
        if far || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(k + 1));
        }
        out.push(AgentState::new(x[0], x[1], x[2], x[3]));
    }
    Ok(out)
}
