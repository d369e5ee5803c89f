use serde::{Deserialize, Serialize};

use crate::autodiff::RngStream;
use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITER: usize = 2000;
pub const MIN_SUBSET_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KMeansInit {
    PlusPlus,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Inertia after each assignment pass.
    pub inertia: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn seed_centroids(points: &[Vec<f64>], k: usize, init: KMeansInit, rng: &mut RngStream) -> Vec<Vec<f64>> {
    match init {
        KMeansInit::Random => rng
            .sample_indices(points.len(), k)
            .into_iter()
            .map(|i| points[i].clone())
            .collect(),
        KMeansInit::PlusPlus => {
            let mut chosen = vec![rng.below(points.len())];
            let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
            while chosen.len() < k {
                let total: f64 = d2.iter().sum();
                let next = if total > 0.0 {
                    let mut target = rng.next_f64() * total;
                    let mut pick = d2.len() - 1;
                    for (i, w) in d2.iter().enumerate() {
                        if *w > 0.0 && target < *w {
                            pick = i;
                            break;
                        }
                        target -= w;
                    }
                    while d2[pick] == 0.0 {
                        pick -= 1;
                    }
                    pick
                } else {
                    // all remaining points coincide with a centroid
                    let free: Vec<usize> = (0..points.len()).filter(|i| !chosen.contains(i)).collect();
                    free[rng.below(free.len())]
                };
                chosen.push(next);
                for (i, p) in points.iter().enumerate() {
                    d2[i] = d2[i].min(sq_dist(p, &points[next]));
                }
            }
            chosen.into_iter().map(|i| points[i].clone()).collect()
        }
    }
}

/// Lloyd's algorithm from the chosen seeding, until assignments stop
/// changing or `max_iter` passes. Empty clusters keep their centroid.
pub fn kmeans_split(
    points: &[Vec<f64>],
    k: usize,
    max_iter: usize,
    init: KMeansInit,
    rng: &mut RngStream,
) -> Result<KMeansResult> {
    if k == 0 || k > points.len() {
        return Err(Error::Invalid(format!(
            "k = {k} with {} points",
            points.len()
        )));
    }
    let dim = points[0].len();
    let mut centroids = seed_centroids(points, k, init, rng);
    let mut assignments = vec![usize::MAX; points.len()];
    let mut inertia: Vec<f64> = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let mut changed = false;
        let mut total = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (best, d) = centroids
                .iter()
                .enumerate()
                .map(|(c, cent)| (c, sq_dist(p, cent)))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            total += d;
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }
        if let Some(&prev) = inertia.last() {
            debug_assert!(total <= prev + 1e-9 * prev.max(1.0), "inertia increased");
        }
        inertia.push(total);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    Ok(KMeansResult {
        assignments,
        centroids,
        inertia,
        iterations,
    })
}

/// Member indices of every cluster with at least `min_size` points.
pub fn clusters_to_subsets(assignments: &[usize], k: usize, min_size: usize) -> Vec<Vec<usize>> {
    (0..k)
        .map(|c| (0..assignments.len()).filter(|&i| assignments[i] == c).collect::<Vec<_>>())
        .filter(|m| m.len() >= min_size)
        .collect()
}
