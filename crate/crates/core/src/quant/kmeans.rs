//! k-means++ seeding and Lloyd iterations, used to initialise codebooks.

use rand::Rng;

use crate::scalar::Scalar;

pub fn sq_dist<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Index of the closest centroid, lowest index on ties.
pub fn nearest_index<S: Scalar>(centroids: &[Vec<S>], p: &[S]) -> (usize, S) {
    let mut best = (0, S::infinity());
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// k-means++ seeding: the first centroid uniformly, each next one with
/// probability proportional to its squared distance from the chosen set.
/// With fewer distinct points than `k`, the remainder are uniform picks.
pub fn kmeans_pp<S: Scalar, R: Rng>(points: &[Vec<S>], k: usize, rng: &mut R) -> Vec<Vec<S>> {
    assert!(!points.is_empty(), "k-means++ needs points");
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())].clone());
    let mut dist: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p, &centroids[0]).to_f64_lossy())
        .collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, &d) in dist.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick].clone();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c).to_f64_lossy());
        }
        centroids.push(c);
    }
    centroids
}

#[derive(Clone, Debug)]
pub struct KMeans<S> {
    pub centroids: Vec<Vec<S>>,
    /// Mean squared distance from each point to its centroid.
    pub distortion: f64,
}

/// k-means++ seeding followed by at most `iters` Lloyd steps. Empty
/// clusters keep their previous centroid.
pub fn kmeans<S: Scalar, R: Rng>(
    points: &[Vec<S>],
    k: usize,
    iters: usize,
    rng: &mut R,
) -> KMeans<S> {
    let mut centroids = kmeans_pp(points, k, rng);
    let dim = points[0].len();
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..iters {
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(points) {
            let (i, _) = nearest_index(&centroids, p);
            changed |= *a != i;
            *a = i;
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![S::zero(); dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assign.iter().zip(points) {
            counts[a] += 1;
            for (s, &x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s.into_iter().map(|x| x / S::of(n as f64)).collect();
            }
        }
    }
    let distortion = points
        .iter()
        .map(|p| nearest_index(&centroids, p).1.to_f64_lossy())
        .sum::<f64>()
        / points.len() as f64;
    KMeans {
        centroids,
        distortion,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separated_clusters_are_found() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let centres = [[-5.0, 0.0], [5.0, 0.0], [0.0, 5.0]];
        let pts: Vec<Vec<f64>> = (0..300)
            .map(|i| {
                let c = centres[i % 3];
                vec![
                    c[0] + rng.random_range(-0.1..0.1),
                    c[1] + rng.random_range(-0.1..0.1),
                ]
            })
            .collect();
        let km = kmeans(&pts, 3, 50, &mut rng);
        assert!(km.distortion < 0.01);
        for c in centres {
            assert!(km.centroids.iter().any(|k| sq_dist(k, &c) < 0.01));
        }
    }

    #[test]
    fn more_centroids_than_distinct_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts = vec![vec![1.0f64, 2.0]; 4];
        let c = kmeans_pp(&pts, 6, &mut rng);
        assert_eq!(c.len(), 6);
        assert!(c.iter().all(|x| x == &pts[0]));
    }

    #[test]
    fn ties_go_low() {
        let cs = vec![vec![1.0f64], vec![-1.0]];
        assert_eq!(nearest_index(&cs, &[0.0]).0, 0);
    }
}
