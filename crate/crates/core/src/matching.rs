//! Closed-form rigid matching of segments and the interaction-pattern library.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::GroupElement;
use crate::model::{angle_diff, dist, AgentState};

pub const DEFAULT_N_CORR: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Maps `a` onto `b`.
    pub m: GroupElement,
    pub rms_residual: f64,
    /// Per-correspondence residual over the arc length of `b`.
    pub relative_difference: Vec<f64>,
    /// Diagnostic only; not part of the objective.
    pub heading_rms: f64,
}

/// Resamples a polyline to `n` points equally spaced in arc length.
pub fn resample(points: &[[f64; 2]], n: usize) -> Result<Vec<[f64; 2]>> {
    if points.len() < 2 || n < 2 {
        return Err(Error::invalid("resampling needs at least 2 input and output points"));
    }
    let mut cum = Vec::with_capacity(points.len());
    cum.push(0.0);
    for w in points.windows(2) {
        cum.push(cum.last().unwrap() + dist(w[0], w[1]));
    }
    let total = *cum.last().unwrap();
    if total <= 0.0 {
        return Err(Error::DegenerateSegment);
    }
    let mut out = Vec::with_capacity(n);
    let mut j = 0;
    for k in 0..n {
        let s = total * k as f64 / (n - 1) as f64;
        while j + 2 < cum.len() && cum[j + 1] < s {
            j += 1;
        }
        let seg = cum[j + 1] - cum[j];
        let u = if seg > 0.0 { ((s - cum[j]) / seg).clamp(0.0, 1.0) } else { 0.0 };
        let (p, q) = (points[j], points[j + 1]);
        out.push([p[0] + u * (q[0] - p[0]), p[1] + u * (q[1] - p[1])]);
    }
    Ok(out)
}

fn arc_length(p: &[[f64; 2]]) -> f64 {
    p.windows(2).map(|w| dist(w[0], w[1])).sum()
}

fn centroid(p: &[[f64; 2]]) -> [f64; 2] {
    let n = p.len() as f64;
    let (x, y) = p.iter().fold((0.0, 0.0), |(x, y), q| (x + q[0], y + q[1]));
    [x / n, y / n]
}

/// Optimal element for equal-length correspondences, one reflection branch.
fn align(a: &[[f64; 2]], b: &[[f64; 2]], reflect: bool) -> GroupElement {
    let sign = if reflect { -1.0 } else { 1.0 };
    let ca = centroid(a);
    let cb = centroid(b);
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (p, q) in a.iter().zip(b) {
        let pa = [p[0] - ca[0], sign * (p[1] - ca[1])];
        let qb = [q[0] - cb[0], q[1] - cb[1]];
        sxx += pa[0] * qb[0] + pa[1] * qb[1];
        sxy += pa[0] * qb[1] - pa[1] * qb[0];
    }
    let psi = sxy.atan2(sxx);
    let lin = GroupElement::new(psi, [0.0, 0.0], reflect);
    let r = lin.act_point(ca);
    GroupElement::new(psi, [cb[0] - r[0], cb[1] - r[1]], reflect)
}

/// Root-mean-square residual of `a` mapped by `m` against `b`.
pub fn residual_rms(m: &GroupElement, a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let ss: f64 = a.iter().zip(b).map(|(p, q)| dist(m.act_point(*p), *q).powi(2)).sum();
    (ss / a.len() as f64).sqrt()
}

/// Match of two already-resampled point sets.
pub fn match_points(a: &[[f64; 2]], b: &[[f64; 2]], allow_reflect: bool) -> MatchResult {
    let mut best = align(a, b, false);
    let mut rms = residual_rms(&best, a, b);
    if allow_reflect {
        let m = align(a, b, true);
        let r = residual_rms(&m, a, b);
        if r < rms - 1e-12 * rms.max(1.0) {
            best = m;
            rms = r;
        }
    }
    let len = arc_length(b).max(f64::MIN_POSITIVE);
    MatchResult {
        relative_difference: a.iter().zip(b).map(|(p, q)| dist(best.act_point(*p), *q) / len).collect(),
        m: best,
        rms_residual: rms,
        heading_rms: 0.0,
    }
}

/// Heading at each resampled point, taken from the nearest source sample.
fn resample_headings(states: &[AgentState], n: usize) -> Vec<f64> {
    let pos: Vec<[f64; 2]> = states.iter().map(|s| s.pos()).collect();
    let mut cum = vec![0.0];
    for w in pos.windows(2) {
        cum.push(cum.last().unwrap() + dist(w[0], w[1]));
    }
    let total = *cum.last().unwrap();
    let mut j = 0;
    (0..n)
        .map(|k| {
            let s = total * k as f64 / (n - 1) as f64;
            while j + 1 < cum.len() && cum[j + 1] <= s {
                j += 1;
            }
            states[j].psi
        })
        .collect()
}

pub fn match_segments(a: &[AgentState], b: &[AgentState], n_corr: usize, allow_reflect: bool) -> Result<MatchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("segments need at least 2 samples"));
    }
    let pa: Vec<[f64; 2]> = a.iter().map(|s| s.pos()).collect();
    let pb: Vec<[f64; 2]> = b.iter().map(|s| s.pos()).collect();
    let ra = resample(&pa, n_corr)?;
    let rb = resample(&pb, n_corr)?;
    let mut r = match_points(&ra, &rb, allow_reflect);
    let ha = resample_headings(a, n_corr);
    let hb = resample_headings(b, n_corr);
    let ss: f64 = ha.iter().zip(&hb).map(|(x, y)| angle_diff(r.m.act_heading(*x), *y).powi(2)).sum();
    r.heading_rms = (ss / n_corr as f64).sqrt();
    Ok(r)
}

/// Segments of one cluster, as raw positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentCluster {
    pub id: usize,
    pub members: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub a: usize,
    pub b: usize,
    /// Medoid of `a` onto medoid of `b`.
    pub m: MatchResult,
    /// Worst nearest-member residual over both directions.
    pub worst_member_rms: f64,
    pub equivalent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionPattern {
    pub clusters: Vec<usize>,
    /// `(cluster id, member index)` of the representative segment.
    pub representative: (usize, usize),
    /// One element per member cluster, mapping its medoid onto the representative.
    pub alignments: Vec<GroupElement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternLibrary {
    pub patterns: Vec<InteractionPattern>,
    pub medoids: Vec<(usize, usize)>,
    pub pairs: Vec<PairTest>,
    pub eps_match: f64,
    pub allow_reflect: bool,
}

impl PatternLibrary {
    pub fn pattern_of(&self, cluster: usize) -> Option<usize> {
        self.patterns.iter().position(|p| p.clusters.contains(&cluster))
    }
}

/// `eps_match` default: 5% of the median segment arc length.
pub fn default_eps(clusters: &[SegmentCluster]) -> f64 {
    let mut lens: Vec<f64> = clusters.iter().flat_map(|c| c.members.iter().map(|m| arc_length(m))).collect();
    if lens.is_empty() {
        return 0.0;
    }
    lens.sort_by(f64::total_cmp);
    let n = lens.len();
    let med = if n % 2 == 1 { lens[n / 2] } else { 0.5 * (lens[n / 2 - 1] + lens[n / 2]) };
    0.05 * med
}

fn medoid(members: &[Vec<[f64; 2]>], allow_reflect: bool) -> usize {
    let costs: Vec<f64> = (0..members.len())
        .into_par_iter()
        .map(|i| {
            members
                .iter()
                .map(|m| match_points(&members[i], m, allow_reflect).rms_residual)
                .sum()
        })
        .collect();
    (0..members.len())
        .min_by(|&i, &j| costs[i].total_cmp(&costs[j]).then(i.cmp(&j)))
        .unwrap_or(0)
}

/// Largest over `from` of the smallest residual to any member of `to` under `m`.
fn worst_nearest(m: &GroupElement, from: &[Vec<[f64; 2]>], to: &[Vec<[f64; 2]>]) -> f64 {
    from.par_iter()
        .map(|a| to.iter().map(|b| residual_rms(m, a, b)).fold(f64::INFINITY, f64::min))
        .reduce(|| 0.0, f64::max)
}

pub fn build_pattern_library(
    clusters: &[SegmentCluster],
    eps_match: f64,
    allow_reflect: bool,
    n_corr: usize,
) -> Result<PatternLibrary> {
    if clusters.iter().any(|c| c.members.is_empty()) {
        return Err(Error::invalid("empty segment cluster"));
    }
    let sampled: Vec<Vec<Vec<[f64; 2]>>> = clusters
        .iter()
        .map(|c| c.members.iter().map(|m| resample(m, n_corr)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let med: Vec<usize> = sampled.par_iter().map(|s| medoid(s, allow_reflect)).collect();
    let n = clusters.len();
    let pairs: Vec<PairTest> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&(i, j)| {
            let m = match_points(&sampled[i][med[i]], &sampled[j][med[j]], allow_reflect);
            let fwd = worst_nearest(&m.m, &sampled[i], &sampled[j]);
            let back = worst_nearest(&m.m.inverse(), &sampled[j], &sampled[i]);
            let worst = fwd.max(back);
            PairTest {
                a: clusters[i].id,
                b: clusters[j].id,
                m,
                worst_member_rms: worst,
                equivalent: worst <= eps_match,
            }
        })
        .collect();
    // Connected components; each labelled by its smallest index.
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            if pairs[k].equivalent {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri.max(rj)] = ri.min(rj);
            }
            k += 1;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| clusters[i].id);
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for &i in &order {
        let r = find(&mut parent, i);
        match groups.iter_mut().find(|g| g.0 == r) {
            Some(g) => g.1.push(i),
            None => groups.push((r, vec![i])),
        }
    }
    let patterns = groups
        .into_iter()
        .map(|(_, idx)| {
            let rep = idx[0];
            InteractionPattern {
                clusters: idx.iter().map(|&i| clusters[i].id).collect(),
                representative: (clusters[rep].id, med[rep]),
                alignments: idx
                    .iter()
                    .map(|&i| match_points(&sampled[i][med[i]], &sampled[rep][med[rep]], allow_reflect).m)
                    .collect(),
            }
        })
        .collect();
    Ok(PatternLibrary {
        patterns,
        medoids: clusters.iter().zip(&med).map(|(c, m)| (c.id, *m)).collect(),
        pairs,
        eps_match,
        allow_reflect,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn curve(bend: f64, len: f64, n: usize) -> Vec<[f64; 2]> {
        let mut p = [0.0, 0.0];
        let mut psi: f64 = 0.0;
        let step = len / (n - 1) as f64;
        let mut out = vec![p];
        for i in 1..n {
            psi += bend * step * (i as f64 / n as f64);
            p = [p[0] + step * psi.cos(), p[1] + step * psi.sin()];
            out.push(p);
        }
        out
    }

    fn element() -> impl Strategy<Value = GroupElement> {
        (-PI..PI, -50.0f64..50.0, -50.0f64..50.0, any::<bool>()).prop_map(|(p, x, y, r)| GroupElement::new(p, [x, y], r))
    }

    #[test]
    fn resample_is_uniform() {
        let r = resample(&[[0.0, 0.0], [1.0, 0.0], [1.0, 3.0]], 5).unwrap();
        assert_eq!(r[0], [0.0, 0.0]);
        assert!((r[2][0] - 1.0).abs() < 1e-12 && (r[2][1] - 1.0).abs() < 1e-12);
        assert_eq!(r[4], [1.0, 3.0]);
        assert!(matches!(resample(&[[1.0, 1.0], [1.0, 1.0]], 5), Err(Error::DegenerateSegment)));
    }

    #[test]
    fn self_match_is_identity() {
        let a = resample(&curve(0.1, 20.0, 80), 50).unwrap();
        let r = match_points(&a, &a, true);
        assert!(r.m.distance(&GroupElement::identity()) < 1e-9);
        assert!(r.rms_residual < 1e-12);
    }

    #[test]
    fn one_cluster_one_pattern() {
        let c = SegmentCluster {
            id: 4,
            members: vec![curve(0.1, 20.0, 40), curve(0.12, 21.0, 40)],
        };
        let lib = build_pattern_library(&[c], 1.0, false, 50).unwrap();
        assert_eq!(lib.patterns.len(), 1);
        assert_eq!(lib.patterns[0].clusters, vec![4]);
    }

    #[test]
    fn mirrored_clusters_need_reflection() {
        let left: Vec<Vec<[f64; 2]>> = (0..4).map(|k| curve(0.15 + 0.01 * k as f64, 20.0, 60)).collect();
        let right: Vec<Vec<[f64; 2]>> = left
            .iter()
            .map(|c| c.iter().map(|p| GroupElement::new(0.3, [5.0, -2.0], true).act_point(*p)).collect())
            .collect();
        let clusters = [SegmentCluster { id: 0, members: left }, SegmentCluster { id: 1, members: right }];
        let eps = default_eps(&clusters);
        assert_eq!(build_pattern_library(&clusters, eps, false, 50).unwrap().patterns.len(), 2);
        let lib = build_pattern_library(&clusters, eps, true, 50).unwrap();
        assert_eq!(lib.patterns.len(), 1);
        assert_eq!(lib.patterns[0].alignments.len(), 2);
    }

    proptest! {
        #[test]
        fn recovers_exact_element(m0 in element(), bend in 0.05f64..0.3) {
            let a = resample(&curve(bend, 20.0, 60), 50).unwrap();
            let b: Vec<[f64; 2]> = a.iter().map(|p| m0.act_point(*p)).collect();
            let r = match_points(&a, &b, true);
            prop_assert!(r.m.distance(&m0) < 1e-9, "{:?} vs {:?}", r.m, m0);
            prop_assert!(r.rms_residual < 1e-9);
        }

        #[test]
        fn match_is_symmetric(m0 in element(), bend in -0.3f64..0.3, bend2 in -0.3f64..0.3, refl in any::<bool>()) {
            let a = resample(&curve(bend, 20.0, 60), 50).unwrap();
            let b: Vec<[f64; 2]> = resample(&curve(bend2, 18.0, 45), 50).unwrap().iter().map(|p| m0.act_point(*p)).collect();
            let ab = match_points(&a, &b, refl);
            let ba = match_points(&b, &a, refl);
            prop_assert!((ab.rms_residual - ba.rms_residual).abs() < 1e-9);
            if ab.m.reflect == ba.m.reflect {
                prop_assert!(ab.m.compose(&ba.m).distance(&GroupElement::identity()) < 1e-9);
            }
        }

        #[test]
        fn composition_on_exact_triples(m1 in element(), m2 in element(), bend in 0.05f64..0.3) {
            let a = resample(&curve(bend, 20.0, 60), 50).unwrap();
            let b: Vec<[f64; 2]> = a.iter().map(|p| m1.act_point(*p)).collect();
            let c: Vec<[f64; 2]> = b.iter().map(|p| m2.act_point(*p)).collect();
            let r = match_points(&a, &c, true);
            prop_assert!(r.m.distance(&m2.compose(&m1)) < 1e-9);
        }

        #[test]
        fn equivalence_decision_is_symmetric(bend in 0.0f64..0.3, m0 in element(), eps in 0.1f64..3.0) {
            let a = SegmentCluster { id: 0, members: vec![curve(bend, 20.0, 40), curve(bend + 0.02, 20.0, 40)] };
            let b = SegmentCluster {
                id: 1,
                members: vec![curve(-bend, 19.0, 40).iter().map(|p| m0.act_point(*p)).collect()],
            };
            let ab = build_pattern_library(&[a.clone(), b.clone()], eps, false, 50).unwrap();
            let ba = build_pattern_library(&[b, a], eps, false, 50).unwrap();
            prop_assert_eq!(ab.pairs[0].equivalent, ba.pairs[0].equivalent);
        }
    }
}
