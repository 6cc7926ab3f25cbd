//! Gaussian mixtures fitted by EM, with the component count picked by BIC.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    pub k: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Row-major `d × d` covariances.
    pub covariances: Vec<Vec<Vec<f64>>>,
    pub log_likelihood: f64,
    pub bic: f64,
    pub iterations: usize,
    pub floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub model: MixtureModel,
    pub memberships: Vec<usize>,
    /// `(K, BIC)` for every K evaluated.
    pub bic_curve: Vec<(usize, f64)>,
}

struct Component {
    mean: DVector<f64>,
    chol_inv: DMatrix<f64>,
    log_norm: f64,
}

fn to_mat(c: &[Vec<f64>]) -> DMatrix<f64> {
    let d = c.len();
    DMatrix::from_fn(d, d, |i, j| c[i][j])
}

fn from_mat(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

/// Clamps eigenvalues of a symmetric matrix from below.
fn floor_cov(c: DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (&c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|l| l.max(floor));
    let v = &eig.eigenvectors;
    v * DMatrix::from_diagonal(&vals) * v.transpose()
}

impl MixtureModel {
    fn components(&self) -> Vec<Component> {
        let d = self.means[0].len();
        self.covariances
            .iter()
            .zip(&self.means)
            .map(|(c, m)| {
                let chol = to_mat(c).cholesky().expect("floored covariance is positive definite");
                let l = chol.l();
                let log_det: f64 = 2.0 * l.diagonal().iter().map(|x| x.ln()).sum::<f64>();
                let chol_inv = l.try_inverse().expect("triangular factor is invertible");
                Component {
                    mean: DVector::from_vec(m.clone()),
                    chol_inv,
                    log_norm: -0.5 * (d as f64 * (2.0 * PI).ln() + log_det),
                }
            })
            .collect()
    }

    /// `ln(w_k N(x | μ_k, Σ_k))` for every component.
    fn joint_log(&self, comps: &[Component], x: &DVector<f64>) -> Vec<f64> {
        comps
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| {
                let z = &c.chol_inv * (x - &c.mean);
                w.ln() + c.log_norm - 0.5 * z.norm_squared()
            })
            .collect()
    }

    /// Posterior responsibilities and total log-likelihood.
    pub fn responsibilities(&self, points: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
        let comps = self.components();
        let mut ll = 0.0;
        let resp = points
            .iter()
            .map(|p| {
                let lj = self.joint_log(&comps, &DVector::from_vec(p.clone()));
                let m = lj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = lj.iter().map(|l| (l - m).exp()).sum();
                let lse = m + s.ln();
                ll += lse;
                lj.iter().map(|l| (l - lse).exp()).collect()
            })
            .collect();
        (resp, ll)
    }

    /// Argmax responsibility, ties to the lower index.
    pub fn predict(&self, points: &[Vec<f64>]) -> Vec<usize> {
        self.responsibilities(points).0.iter().map(|r| argmax(r)).collect()
    }

    pub fn free_parameters(&self) -> usize {
        let d = self.means[0].len();
        (self.k - 1) + self.k * d + self.k * d * (d + 1) / 2
    }
}

pub(crate) fn argmax(r: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in r.iter().enumerate() {
        if *v > r[best] {
            best = i;
        }
    }
    best
}

/// Covariance floor: `1e-6` times the mean per-axis data variance.
pub fn covariance_floor(points: &[Vec<f64>]) -> f64 {
    let n = points.len() as f64;
    let d = points[0].len();
    let mut total = 0.0;
    for k in 0..d {
        let mean = points.iter().map(|p| p[k]).sum::<f64>() / n;
        total += points.iter().map(|p| (p[k] - mean).powi(2)).sum::<f64>() / n;
    }
    1e-6 * (total / d as f64).max(1e-12)
}

fn m_step(points: &[Vec<f64>], resp: &[Vec<f64>], k: usize, floor: f64) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let n = points.len();
    let d = points[0].len();
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for c in 0..k {
        let nk: f64 = resp.iter().map(|r| r[c]).sum::<f64>().max(1e-300);
        let mut mu = DVector::zeros(d);
        for (p, r) in points.iter().zip(resp) {
            mu += DVector::from_vec(p.clone()) * r[c];
        }
        mu /= nk;
        let mut cov = DMatrix::zeros(d, d);
        for (p, r) in points.iter().zip(resp) {
            let dx = DVector::from_vec(p.clone()) - &mu;
            cov += &dx * dx.transpose() * r[c];
        }
        cov /= nk;
        weights.push(nk / n as f64);
        means.push(mu.iter().copied().collect());
        covs.push(from_mat(&floor_cov(cov, floor)));
    }
    let s: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= s;
    }
    (weights, means, covs)
}

pub const MAX_EM_ITER: usize = 500;
pub const EM_TOL: f64 = 1e-8;

/// EM for a fixed component count from a k-means++/Lloyd start.
pub fn fit_gmm(points: &[Vec<f64>], k: usize, seed: u64) -> Result<MixtureModel> {
    fit_gmm_floored(points, k, seed, None)
}

/// As [`fit_gmm`], with an optional absolute lower bound on the
/// covariance floor.
pub fn fit_gmm_floored(points: &[Vec<f64>], k: usize, seed: u64, min_floor: Option<f64>) -> Result<MixtureModel> {
    if points.len() < 2 {
        return Err(Error::InsufficientData("mixture fit needs at least 2 points".into()));
    }
    if k == 0 {
        return Err(Error::invalid("component count must be positive"));
    }
    let n = points.len();
    let floor = covariance_floor(points).max(min_floor.unwrap_or(0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let km = kmeans::kmeans(points, k, 100, &mut rng);
    let hard: Vec<Vec<f64>> = km
        .labels
        .iter()
        .map(|&l| (0..k).map(|c| if c == l { 1.0 } else { 0.0 }).collect())
        .collect();
    let (weights, means, covariances) = m_step(points, &hard, k, floor);
    let mut model = MixtureModel {
        k,
        weights,
        means,
        covariances,
        log_likelihood: f64::NEG_INFINITY,
        bic: f64::INFINITY,
        iterations: 0,
        floor,
    };
    let mut prev = f64::NEG_INFINITY;
    for it in 0..MAX_EM_ITER {
        let (resp, ll) = model.responsibilities(points);
        assert!(
            ll >= prev - 1e-9 * prev.abs().max(1.0),
            "EM log-likelihood decreased: {prev} -> {ll}"
        );
        model.log_likelihood = ll;
        model.iterations = it;
        if (ll - prev).abs() < EM_TOL {
            break;
        }
        prev = ll;
        let (w, m, c) = m_step(points, &resp, k, floor);
        model.weights = w;
        model.means = m;
        model.covariances = c;
    }
    let (_, ll) = model.responsibilities(points);
    model.log_likelihood = ll;
    model.bic = -2.0 * ll + model.free_parameters() as f64 * (n as f64).ln();
    Ok(model)
}

/// Fits K = 1..=k_max in parallel and keeps the minimum-BIC model; ties go
/// to the smaller K.
pub fn fit_gmm_select(points: &[Vec<f64>], k_max: usize, seed: u64) -> Result<GmmFit> {
    fit_gmm_select_floored(points, k_max, seed, None)
}

pub fn fit_gmm_select_floored(points: &[Vec<f64>], k_max: usize, seed: u64, min_floor: Option<f64>) -> Result<GmmFit> {
    if k_max < 1 {
        return Err(Error::invalid("k_max must be at least 1"));
    }
    let k_max = k_max.min(points.len());
    let fits: Vec<Result<MixtureModel>> = (1..=k_max).into_par_iter().map(|k| fit_gmm_floored(points, k, seed, min_floor)).collect();
    let fits: Vec<MixtureModel> = fits.into_iter().collect::<Result<_>>()?;
    let bic_curve = fits.iter().map(|m| (m.k, m.bic)).collect();
    let model = fits
        .into_iter()
        .reduce(|best, m| if m.bic < best.bic { m } else { best })
        .expect("at least one K");
    let memberships = model.predict(points);
    Ok(GmmFit {
        model,
        memberships,
        bic_curve,
    })
}
