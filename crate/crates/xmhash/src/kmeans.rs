//! Lloyd k-means with k-means++ seeding, deterministic per seed.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// k x D centroid matrix.
    pub centroids: DMatrix<f64>,
    /// Assignment of each input row to a centroid index.
    pub assignments: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

fn sq_dist_row(data: &DMatrix<f64>, i: usize, centroids: &DMatrix<f64>, c: usize) -> f64 {
    let mut s = 0.0;
    for j in 0..data.ncols() {
        let d = data[(i, j)] - centroids[(c, j)];
        s += d * d;
    }
    s
}

/// k-means++ seeding: first centroid uniform, subsequent ones sampled
/// proportional to squared distance from the nearest chosen centroid.
fn seed_plus_plus(data: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = data.nrows();
    let d = data.ncols();
    let mut centroids = DMatrix::zeros(k, d);
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).copy_from(&data.row(first));
    let mut best_d2: Vec<f64> = (0..n).map(|i| sq_dist_row(data, i, &centroids, 0)).collect();
    for c in 1..k {
        let total: f64 = best_d2.iter().sum();
        let chosen = if total <= 0.0 {
            // all points already covered; pick deterministically
            rng.gen_range(0..n)
        } else {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in best_d2.iter().enumerate() {
                acc += w;
                if acc >= target {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.row_mut(c).copy_from(&data.row(chosen));
        for i in 0..n {
            let d2 = sq_dist_row(data, i, &centroids, c);
            if d2 < best_d2[i] {
                best_d2[i] = d2;
            }
        }
    }
    centroids
}

pub fn kmeans(
    data: &DMatrix<f64>,
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<KMeansResult> {
    let n = data.nrows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "k must be in 1..=n (k={k}, n={n})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(data, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..max_iters.max(1) {
        iterations = it + 1;
        // assign: ties go to the lowest centroid index
        for i in 0..n {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d2 = sq_dist_row(data, i, &centroids, c);
                if d2 < best_d {
                    best_d = d2;
                    best = c;
                }
            }
            assignments[i] = best;
        }
        // update
        let mut sums = DMatrix::zeros(k, data.ncols());
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i];
            counts[c] += 1;
            for j in 0..data.ncols() {
                sums[(c, j)] += data[(i, j)];
            }
        }
        // empty clusters take the point farthest from its assigned centroid
        for c in 0..k {
            if counts[c] == 0 {
                let mut far_i = 0usize;
                let mut far_d = -1.0;
                for i in 0..n {
                    let d2 = sq_dist_row(data, i, &centroids, assignments[i]);
                    if d2 > far_d {
                        far_d = d2;
                        far_i = i;
                    }
                }
                let old = assignments[far_i];
                counts[old] -= 1;
                for j in 0..data.ncols() {
                    sums[(old, j)] -= data[(far_i, j)];
                    sums[(c, j)] = data[(far_i, j)];
                }
                counts[c] = 1;
                assignments[far_i] = c;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            for j in 0..data.ncols() {
                let new = sums[(c, j)] / counts[c] as f64;
                let d = new - centroids[(c, j)];
                shift += d * d;
                centroids[(c, j)] = new;
            }
        }
        if shift.sqrt() < tol {
            converged = true;
            break;
        }
    }
    Ok(KMeansResult {
        centroids,
        assignments,
        iterations,
        converged,
    })
}
