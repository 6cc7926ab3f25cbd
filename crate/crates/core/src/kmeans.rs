//! Lloyd's k-means with k-means++ seeding.

use rand::Rng;

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centre; ties go to the lower index.
pub fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (k, c) in centers.iter().enumerate() {
        let d = sq(p, c);
        if d < bd {
            bd = d;
            best = k;
        }
    }
    best
}

/// k-means++ seeding: first centre uniform, the rest with probability
/// proportional to squared distance to the nearest chosen centre.
pub fn kmeans_pp<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    assert!(!points.is_empty() && k > 0);
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        };
        let c = points[idx].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq(p, &c));
        }
        centers.push(c);
    }
    centers
}

#[derive(Debug, Clone)]
pub struct KMeans {
    pub centers: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

/// Lloyd iterations from the given centres until labels stop changing.
/// An emptied cluster is moved to the point farthest from its centre.
pub fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>, max_iter: usize) -> KMeans {
    let dim = points[0].len();
    let k = centers.len();
    let mut labels = vec![usize::MAX; points.len()];
    let mut iterations = 0;
    for it in 0..max_iter.max(1) {
        iterations = it + 1;
        let mut changed = false;
        for (l, p) in labels.iter_mut().zip(points) {
            let n = nearest(p, &centers);
            if n != *l {
                *l = n;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (l, p) in labels.iter().zip(points) {
            counts[*l] += 1;
            for (s, x) in sums[*l].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        sq(&points[a], &centers[labels[a]])
                            .total_cmp(&sq(&points[b], &centers[labels[b]]))
                            .then(b.cmp(&a))
                    })
                    .unwrap();
                centers[c] = points[far].clone();
                labels[far] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = labels.iter().zip(points).map(|(l, p)| sq(p, &centers[*l])).sum();
    KMeans {
        centers,
        labels,
        inertia,
        iterations,
    }
}

pub fn kmeans<R: Rng>(points: &[Vec<f64>], k: usize, max_iter: usize, rng: &mut R) -> KMeans {
    let init = kmeans_pp(points, k, rng);
    lloyd(points, init, max_iter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separates_two_blobs() {
        let mut pts = Vec::new();
        for i in 0..20 {
            let e = (i as f64 * 0.37).sin() * 0.1;
            pts.push(vec![e, -e]);
            pts.push(vec![10.0 + e, 5.0 - e]);
        }
        let r = kmeans(&pts, 2, 100, &mut ChaCha8Rng::seed_from_u64(3));
        for i in 0..20 {
            assert_eq!(r.labels[2 * i], r.labels[0]);
            assert_ne!(r.labels[2 * i + 1], r.labels[0]);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let pts: Vec<Vec<f64>> = (0..50).map(|i| vec![(i as f64 * 1.3).sin(), (i as f64 * 0.7).cos()]).collect();
        let a = kmeans(&pts, 4, 100, &mut ChaCha8Rng::seed_from_u64(9));
        let b = kmeans(&pts, 4, 100, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn no_empty_clusters_on_duplicates() {
        let pts = vec![vec![1.0, 1.0]; 10];
        let r = kmeans(&pts, 3, 50, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(r.centers.len(), 3);
        assert!(r.inertia.abs() < 1e-12);
    }
}
