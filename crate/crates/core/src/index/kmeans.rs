//! Seeded k-means (k-means++ initialization, Lloyd iterations).

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Rows per parallel work unit. Fixed so results do not depend on the
/// number of threads.
const CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Array2<f64>,
    pub assignments: Vec<u32>,
    /// Objective (sum of squared distances) after each Lloyd update.
    pub objective_history: Vec<f64>,
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid of every row, lowest index on ties.
fn assign(x: ArrayView2<'_, f64>, centroids: &Array2<f64>) -> Vec<u32> {
    let c_norms: Array1<f64> = centroids.rows().into_iter().map(|c| c.dot(&c)).collect();
    let starts: Vec<usize> = (0..x.nrows()).step_by(CHUNK).collect();
    starts
        .par_iter()
        .flat_map_iter(|&start| {
            let end = (start + CHUNK).min(x.nrows());
            // |x - c|^2 = |x|^2 - 2 x.c + |c|^2; |x|^2 does not affect the argmin.
            let prods = x.slice(s![start..end, ..]).dot(&centroids.t());
            prods
                .rows()
                .into_iter()
                .map(|row| {
                    let mut best = (f64::INFINITY, 0u32);
                    for (c, p) in row.iter().enumerate() {
                        let d = c_norms[c] - 2.0 * p;
                        if d < best.0 {
                            best = (d, c as u32);
                        }
                    }
                    best.1
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Gives every empty cluster the point farthest from its own centroid, taken
/// from a cluster that keeps at least one member.
fn repair_empty(x: ArrayView2<'_, f64>, centroids: &mut Array2<f64>, assignments: &mut [u32]) {
    let k = centroids.nrows();
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a as usize] += 1;
    }
    if sizes.iter().all(|&s| s > 0) {
        return;
    }
    let mut dist: Vec<f64> = (0..x.nrows())
        .map(|i| sq_dist(x.row(i), centroids.row(assignments[i] as usize)))
        .collect();
    for c in 0..k {
        if sizes[c] > 0 {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for i in 0..x.nrows() {
            if sizes[assignments[i] as usize] > 1 && best.is_none_or(|(d, _)| dist[i] > d) {
                best = Some((dist[i], i));
            }
        }
        let Some((_, i)) = best else { break };
        sizes[assignments[i] as usize] -= 1;
        sizes[c] = 1;
        assignments[i] = c as u32;
        dist[i] = 0.0;
        centroids.row_mut(c).assign(&x.row(i));
    }
}

fn update(x: ArrayView2<'_, f64>, centroids: &mut Array2<f64>, assignments: &[u32]) {
    let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
    let mut counts = vec![0usize; centroids.nrows()];
    for (i, &a) in assignments.iter().enumerate() {
        let mut row = sums.row_mut(a as usize);
        row += &x.row(i);
        counts[a as usize] += 1;
    }
    for (c, mut row) in sums.axis_iter_mut(Axis(0)).enumerate() {
        if counts[c] > 0 {
            row /= counts[c] as f64;
            centroids.row_mut(c).assign(&row);
        }
    }
}

pub fn objective(x: ArrayView2<'_, f64>, centroids: &Array2<f64>, assignments: &[u32]) -> f64 {
    (0..x.nrows())
        .map(|i| sq_dist(x.row(i), centroids.row(assignments[i] as usize)))
        .sum()
}

fn seed_plus_plus(x: ArrayView2<'_, f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut centroids = Array2::zeros((k, x.ncols()));
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centroids.row_mut(0).assign(&x.row(first));
    let mut min_d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(first))).collect();
    for c in 1..k {
        let total: f64 = min_d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, d) in min_d2.iter().enumerate() {
                if *d > 0.0 {
                    pick = Some(i);
                    if r < *d {
                        break;
                    }
                    r -= d;
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            // Every remaining point duplicates a centroid: take any unused one.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.row_mut(c).assign(&x.row(pick));
        let xc = centroids.row(c);
        min_d2
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, d)| *d = d.min(sq_dist(x.row(i), xc)));
    }
    centroids
}

/// Clusters the rows of `x` into `k` groups.
///
/// Stops after `max_iters` Lloyd iterations or when assignments stop
/// changing. Each point ends assigned to its nearest final centroid.
pub fn kmeans(x: ArrayView2<'_, f64>, k: usize, max_iters: usize, seed: u64) -> KMeansResult {
    assert!(k >= 1 && k <= x.nrows(), "k must be in 1..=n");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(x, k, &mut rng);
    let mut history = Vec::new();
    let mut previous: Option<Vec<u32>> = None;
    for _ in 0..max_iters {
        let mut a = assign(x, &centroids);
        repair_empty(x, &mut centroids, &mut a);
        if previous.as_ref() == Some(&a) {
            break;
        }
        update(x, &mut centroids, &a);
        history.push(objective(x, &centroids, &a));
        previous = Some(a);
    }
    let mut assignments = assign(x, &centroids);
    repair_empty(x, &mut centroids, &mut assignments);
    KMeansResult {
        centroids,
        assignments,
        objective_history: history,
    }
}
