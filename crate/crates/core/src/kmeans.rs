//! Seeded k-means with k-means++ initialization, shared by zone clustering
//! and the spectral embedding step.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut labels = vec![0usize; points.len()];
    let mut inertia = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut best = (f64::INFINITY, 0usize);
        for (c, centroid) in centroids.iter().enumerate() {
            let d = sq_dist(p, centroid);
            if d < best.0 {
                best = (d, c);
            }
        }
        labels[i] = best.1;
        inertia += best.0;
    }
    (labels, inertia)
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())].clone());
    while centroids.len() < k {
        let dists: Vec<f64> = points
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| sq_dist(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = dists.iter().sum();
        if total <= 0.0 {
            // all remaining points coincide with a centroid; duplicate one
            centroids.push(points[rng.gen_range(0..points.len())].clone());
            continue;
        }
        let mut target = rng.gen_range(0.0..total);
        let mut chosen = points.len() - 1;
        for (i, d) in dists.iter().enumerate() {
            if target < *d {
                chosen = i;
                break;
            }
            target -= d;
        }
        centroids.push(points[chosen].clone());
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> KMeansResult {
    let dim = points[0].len();
    let k = centroids.len();
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..100 {
        let (new_labels, _) = assign(points, &centroids);
        if new_labels == labels {
            break;
        }
        labels = new_labels;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for s in &mut sums[c] {
                    *s /= counts[c] as f64;
                }
                centroids[c] = sums[c].clone();
            }
        }
    }
    let (labels, inertia) = assign(points, &centroids);
    KMeansResult { labels, inertia }
}

/// Cluster `points` into `k` groups; `restarts` seeded runs keep the best
/// inertia. Deterministic for a fixed seed. Labels are relabeled so that the
/// first occurrence order is 0, 1, 2, ...
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> KMeansResult {
    assert!(!points.is_empty());
    let k = k.max(1).min(points.len());
    if k == 1 {
        let dim = points[0].len();
        let mut mean = vec![0.0; dim];
        for p in points {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= points.len() as f64;
        }
        let inertia = points.iter().map(|p| sq_dist(p, &mean)).sum();
        return KMeansResult {
            labels: vec![0; points.len()],
            inertia,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let centroids = plus_plus_init(points, k, &mut rng);
        let result = lloyd(points, centroids);
        if best.as_ref().map_or(true, |b| result.inertia < b.inertia) {
            best = Some(result);
        }
    }
    let mut result = best.unwrap();
    relabel_first_seen(&mut result.labels);
    result
}

fn relabel_first_seen(labels: &mut [usize]) {
    let mut map: Vec<Option<usize>> = vec![None; labels.len() + 1];
    let mut next = 0usize;
    for l in labels.iter_mut() {
        let slot = map.get_mut(*l).expect("label in range");
        if slot.is_none() {
            *slot = Some(next);
            next += 1;
        }
        *l = slot.unwrap();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_blobs_separate() {
        let mut points = Vec::new();
        for i in 0..10 {
            points.push(vec![0.0 + i as f64 * 0.01, 0.0]);
            points.push(vec![10.0 + i as f64 * 0.01, 10.0]);
        }
        let r = kmeans(&points, 2, 1, 10);
        for pair in points.chunks(2).zip(r.labels.chunks(2)) {
            let _ = pair;
        }
        for i in (0..points.len()).step_by(2) {
            assert_eq!(r.labels[i], r.labels[0]);
            assert_eq!(r.labels[i + 1], r.labels[1]);
        }
        assert_ne!(r.labels[0], r.labels[1]);
    }

    #[test]
    fn deterministic_given_seed() {
        let points: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![(i as f64 * 0.7).sin() * 5.0, (i as f64 * 1.3).cos() * 5.0])
            .collect();
        let a = kmeans(&points, 3, 42, 10);
        let b = kmeans(&points, 3, 42, 10);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.inertia, b.inertia);
    }

    #[test]
    fn single_point_single_cluster() {
        let r = kmeans(&[vec![1.0, 2.0]], 3, 0, 10);
        assert_eq!(r.labels, vec![0]);
        assert_eq!(r.inertia, 0.0);
    }
}
