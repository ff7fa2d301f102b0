//! Seeded Lloyd's K-Means with k-means++ initialization.
//!
//! Distances are accumulated in f64 and all loops run in index order, so a
//! given seed always produces the same centers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{param, Result};

pub const MAX_ITERATIONS: usize = 100;
pub const RELATIVE_TOLERANCE: f64 = 1e-6;

/// Row-major points, `dim` values each.
pub(crate) struct Points<'a> {
    pub data: &'a [f64],
    pub dim: usize,
}

impl Points<'_> {
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub(crate) struct Fit {
    pub centers: Vec<f64>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest center; ties go to the lowest index.
pub(crate) fn nearest(p: &[f64], centers: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.chunks_exact(dim).enumerate() {
        let d = sq_dist(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(points: &Points, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let n = points.len();
    let dim = points.dim;
    let mut centers = Vec::with_capacity(k * dim);
    centers.extend_from_slice(points.get(rng.random_range(0..n)));
    let mut closest: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.get(i), &centers[..dim]))
        .collect();

    for chosen in 1..k {
        let total: f64 = closest.iter().sum();
        if total.is_nan() || total <= 0.0 {
            return Err(param(format!(
                "only {chosen} distinct points available for {k} clusters"
            )));
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        // Fallback is the last point with positive weight, for rounding at the top end.
        let mut pick = closest.iter().rposition(|&d| d > 0.0).unwrap_or(0);
        for (i, &d) in closest.iter().enumerate() {
            acc += d;
            if d > 0.0 && acc > target {
                pick = i;
                break;
            }
        }
        let start = centers.len();
        centers.extend_from_slice(points.get(pick));
        for (i, slot) in closest.iter_mut().enumerate() {
            let d = sq_dist(points.get(i), &centers[start..start + dim]);
            if d < *slot {
                *slot = d;
            }
        }
    }
    Ok(centers)
}

/// Clusters `points` into `k` groups.
///
/// Stops after `MAX_ITERATIONS` Lloyd steps or when the relative inertia
/// change drops below `RELATIVE_TOLERANCE`. A cluster that loses all its
/// members is re-seeded with the point farthest from its own center.
pub(crate) fn kmeans(points: &Points, k: usize, seed: u64) -> Result<Fit> {
    let n = points.len();
    let dim = points.dim;
    if k < 1 || k > n {
        return Err(param(format!("cluster count {k} must be in [1, {n}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_init(points, k, &mut rng)?;
    let mut assignment = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    let mut prev_inertia = f64::INFINITY;
    let mut inertia;
    let mut iterations = 0;

    loop {
        inertia = 0.0;
        for i in 0..n {
            let (c, d) = nearest(points.get(i), &centers, dim);
            assignment[i] = c;
            dists[i] = d;
            inertia += d;
        }

        let mut counts = vec![0usize; k];
        for &c in &assignment {
            counts[c] += 1;
        }
        let has_empty = counts.contains(&0);
        let converged = inertia == 0.0
            || (prev_inertia.is_finite()
                && (prev_inertia - inertia).abs() <= RELATIVE_TOLERANCE * prev_inertia);
        if converged && !has_empty {
            break;
        }
        let last = iterations + 1 >= MAX_ITERATIONS;
        prev_inertia = inertia;
        iterations += 1;

        while let Some(empty) = counts.iter().position(|&c| c == 0) {
            let (far, _) = dists
                .iter()
                .enumerate()
                .filter(|&(i, _)| counts[assignment[i]] > 1)
                .fold(
                    (usize::MAX, -1.0),
                    |best, (i, &d)| if d > best.1 { (i, d) } else { best },
                );
            debug_assert_ne!(far, usize::MAX, "k <= n guarantees a donor cluster");
            counts[assignment[far]] -= 1;
            assignment[far] = empty;
            dists[far] = 0.0;
            counts[empty] = 1;
        }

        let mut sums = vec![0.0f64; k * dim];
        for (i, &c) in assignment.iter().enumerate() {
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(points.get(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            for (dst, s) in centers[c * dim..(c + 1) * dim]
                .iter_mut()
                .zip(&sums[c * dim..(c + 1) * dim])
            {
                *dst = s * inv;
            }
        }
        if last {
            // Iteration budget spent: keep the repaired assignment so every
            // cluster stays populated, and report its inertia.
            inertia = (0..n)
                .map(|i| {
                    sq_dist(
                        points.get(i),
                        &centers[assignment[i] * dim..(assignment[i] + 1) * dim],
                    )
                })
                .sum();
            break;
        }
    }

    Ok(Fit {
        centers,
        assignment,
        inertia,
        iterations,
    })
}

/// Number of distinct points, comparing exact bit patterns.
pub(crate) fn distinct_count(points: &Points) -> usize {
    let mut keys: Vec<Vec<u64>> = (0..points.len())
        .map(|i| points.get(i).iter().map(|v| (v + 0.0).to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}
