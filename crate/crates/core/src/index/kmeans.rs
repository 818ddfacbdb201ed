//! Lloyd's k-means with k-means++ seeding, used for both the coarse
//! quantizer and the per-subspace product-quantizer codebooks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Trained centroids (`k × d`, row-major) and the final assignment of each
/// training point.
#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centroids: Vec<f32>,
    pub assignments: Vec<u32>,
}

/// Run k-means on `n` points of dimension `d` (`data` is `n × d` row-major).
///
/// Assignment during training uses squared Euclidean distance; k-means++
/// seeding draws proportionally to squared distance from the chosen set.
/// Empty clusters are repaired by re-seeding them on the farthest member of
/// the largest cluster. Iteration stops when assignments are stable or after
/// `max_iters` rounds.
///
/// Callers must guarantee `n >= k` and `k >= 1`.
pub fn kmeans(data: &[f32], n: usize, d: usize, k: usize, max_iters: usize, seed: u64) -> KMeansResult {
    assert!(k >= 1 && n >= k, "kmeans needs at least k points (n={n}, k={k})");
    assert_eq!(data.len(), n * d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = seed_plus_plus(data, n, d, k, &mut rng);
    let mut assignments = vec![u32::MAX; n];

    for _ in 0..max_iters {
        let new_assignments: Vec<u32> = (0..n)
            .into_par_iter()
            .map(|i| nearest_centroid(&data[i * d..(i + 1) * d], &centroids, k, d).0 as u32)
            .collect();

        // Recompute means sequentially in id order so results do not depend
        // on thread scheduling.
        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for (i, &a) in new_assignments.iter().enumerate() {
            let c = a as usize;
            counts[c] += 1;
            let row = &data[i * d..(i + 1) * d];
            let acc = &mut sums[c * d..(c + 1) * d];
            for (s, &v) in acc.iter_mut().zip(row) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for j in 0..d {
                    centroids[c * d + j] = (sums[c * d + j] * inv) as f32;
                }
            }
        }

        let repaired = repair_empty_clusters(data, n, d, k, &mut centroids, &new_assignments, &counts);
        let converged = new_assignments == assignments;
        assignments = new_assignments;
        if converged && !repaired {
            break;
        }
    }

    KMeansResult { centroids, assignments }
}

/// k-means++ seeding: first centroid uniform, the rest drawn with
/// probability proportional to squared distance from the closest chosen one.
fn seed_plus_plus(data: &[f32], n: usize, d: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut centroids = vec![0.0f32; k * d];
    let first = rng.gen_range(0..n);
    centroids[..d].copy_from_slice(&data[first * d..(first + 1) * d]);

    let mut dist2: Vec<f64> =
        (0..n).map(|i| sq_dist(&data[i * d..(i + 1) * d], &centroids[..d])).collect();

    for c in 1..k {
        let total: f64 = dist2.iter().sum();
        let pick = if total <= 0.0 {
            // All remaining points coincide with a chosen centroid; fall back
            // to a uniform draw.
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d2) in dist2.iter().enumerate() {
                target -= d2;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        let row: Vec<f32> = data[pick * d..(pick + 1) * d].to_vec();
        centroids[c * d..(c + 1) * d].copy_from_slice(&row);
        for i in 0..n {
            let d2 = sq_dist(&data[i * d..(i + 1) * d], &row);
            if d2 < dist2[i] {
                dist2[i] = d2;
            }
        }
    }
    centroids
}

/// Give every empty cluster the farthest member of the (current) largest
/// cluster. Returns true when anything was repaired, which forces another
/// assignment round.
fn repair_empty_clusters(
    data: &[f32],
    n: usize,
    d: usize,
    k: usize,
    centroids: &mut [f32],
    assignments: &[u32],
    counts: &[usize],
) -> bool {
    let mut counts = counts.to_vec();
    let mut repaired = false;
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let largest = (0..k).max_by_key(|&l| counts[l]).unwrap();
        if counts[largest] < 2 {
            break; // nothing left to split (mass of duplicate points)
        }
        let mut far_i = usize::MAX;
        let mut far_d = -1.0f64;
        for i in 0..n {
            if assignments[i] as usize != largest {
                continue;
            }
            let d2 = sq_dist(
                &data[i * d..(i + 1) * d],
                &centroids[largest * d..(largest + 1) * d],
            );
            if d2 > far_d {
                far_d = d2;
                far_i = i;
            }
        }
        if far_i == usize::MAX {
            break;
        }
        centroids[c * d..(c + 1) * d].copy_from_slice(&data[far_i * d..(far_i + 1) * d]);
        counts[largest] -= 1;
        counts[c] += 1;
        repaired = true;
    }
    repaired
}

pub(crate) fn nearest_centroid(v: &[f32], centroids: &[f32], k: usize, d: usize) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for c in 0..k {
        let d2 = sq_dist(v, &centroids[c * d..(c + 1) * d]);
        if d2 < best_d {
            best_d = d2;
            best = c;
        }
    }
    (best, best_d)
}

pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let diff = x as f64 - y as f64;
            diff * diff
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn each_distinct_point_gets_its_own_centroid_when_k_equals_n() {
        let data = vec![0.0, 0.0, 10.0, 0.0, 0.0, 10.0, 7.0, 7.0];
        let res = kmeans(&data, 4, 2, 4, 25, 3);
        // Distortion must be zero: every point sits on a centroid.
        for i in 0..4 {
            let (_, d2) = nearest_centroid(&data[i * 2..(i + 1) * 2], &res.centroids, 4, 2);
            assert!(d2 < 1e-12);
        }
        let mut seen: Vec<u32> = res.assignments.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 4, "no cluster may stay empty");
    }

    #[test]
    fn same_seed_is_deterministic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f32> = (0..200 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = kmeans(&data, 200, 8, 16, 25, 42);
        let b = kmeans(&data, 200, 8, 16, 25, 42);
        assert_eq!(a.centroids, b.centroids);
        assert_eq!(a.assignments, b.assignments);
    }

    #[test]
    fn two_separated_blobs_are_recovered() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut data = Vec::new();
        for i in 0..100 {
            let base = if i < 50 { -5.0 } else { 5.0 };
            data.push(base + rng.gen_range(-0.1f32..0.1));
            data.push(base + rng.gen_range(-0.1f32..0.1));
        }
        let res = kmeans(&data, 100, 2, 2, 25, 1);
        let mut means: Vec<f32> = vec![res.centroids[0], res.centroids[2]];
        means.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((means[0] + 5.0).abs() < 0.2, "low blob mean {means:?}");
        assert!((means[1] - 5.0).abs() < 0.2, "high blob mean {means:?}");
        // The two halves land in different clusters.
        assert_ne!(res.assignments[0], res.assignments[99]);
    }

    #[test]
    fn empty_clusters_are_repaired_when_enough_distinct_points_exist() {
        // 97 near-duplicates plus 3 outliers tempt k-means into empty
        // clusters; repair must keep all 6 populated.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut data = Vec::new();
        for _ in 0..97 {
            data.push(rng.gen_range(-0.001f32..0.001));
            data.push(rng.gen_range(-0.001f32..0.001));
        }
        for v in [[50.0, 0.0], [0.0, 50.0], [-50.0, -50.0]] {
            data.extend_from_slice(&v);
        }
        let res = kmeans(&data, 100, 2, 6, 25, 2);
        let mut populated: Vec<u32> = res.assignments.clone();
        populated.sort_unstable();
        populated.dedup();
        assert_eq!(populated.len(), 6);
    }
}
