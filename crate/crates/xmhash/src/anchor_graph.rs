//! Joint anchor learning and anchor-graph construction.
//!
//! Anchors are learned once by k-means on the column-concatenated, normalized
//! modalities and split back per modality, preserving the one-to-one pairing
//! of anchors across modalities. Each modality then gets a sparse
//! data-to-anchor affinity Z, a reciprocal-kNN anchor-to-anchor affinity S,
//! the expanded affinity Z_hat = Z * S, the data-to-data affinity
//! A = Z_hat * inv(Lambda) * Z_hat^T, and the Laplacian I - A.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::MultiModalDataset;
use crate::error::{Error, Result};
use crate::io;
use crate::kmeans;

/// Gaussian-kernel bandwidth: fixed, or learned as the mean squared distance
/// to the k nearest neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sigma {
    Fixed(f64),
    Auto,
}

/// Per-modality anchor matrices sharing one joint centroid per row.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    per_modality: Vec<DMatrix<f64>>,
}

impl AnchorSet {
    pub fn new(per_modality: Vec<DMatrix<f64>>) -> Result<Self> {
        if per_modality.is_empty() {
            return Err(Error::invalid("anchor set needs at least one modality"));
        }
        let p = per_modality[0].nrows();
        if per_modality.iter().any(|m| m.nrows() != p) {
            return Err(Error::dims("anchor count differs across modalities"));
        }
        Ok(AnchorSet { per_modality })
    }

    pub fn anchor_count(&self) -> usize {
        self.per_modality[0].nrows()
    }

    pub fn modality(&self, m: usize) -> &DMatrix<f64> {
        &self.per_modality[m]
    }

    pub fn modality_count(&self) -> usize {
        self.per_modality.len()
    }
}

/// Graph matrices for one modality.
#[derive(Debug, Clone)]
pub struct ModalityGraph {
    /// N x P data-to-anchor affinity, row-stochastic, <= k nonzeros per row.
    pub z: DMatrix<f64>,
    /// P x P anchor-to-anchor affinity, row-stochastic.
    pub s: DMatrix<f64>,
    /// Expanded affinity Z * S.
    pub z_hat: DMatrix<f64>,
    /// Column sums of Z_hat (unused-anchor columns replaced by 1).
    pub lambda: DVector<f64>,
    /// Dense N x N data-to-data affinity.
    pub affinity: DMatrix<f64>,
    /// Dense N x N Laplacian, I - affinity.
    pub laplacian: DMatrix<f64>,
    pub sigma_data: f64,
    pub sigma_anchor: f64,
}

impl ModalityGraph {
    /// Laplacian-times-matrix through the low-rank factorization:
    /// (I - Z_hat inv(Lambda) Z_hat^T) Y, O(N P L) instead of O(N^2 L).
    pub fn laplacian_times(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let zt_y = self.z_hat.transpose() * y;
        let mut scaled = zt_y;
        for p in 0..scaled.nrows() {
            let inv = 1.0 / self.lambda[p];
            for c in 0..scaled.ncols() {
                scaled[(p, c)] *= inv;
            }
        }
        y - &self.z_hat * scaled
    }
}

#[derive(Debug, Clone)]
pub struct AnchorGraph {
    pub modalities: Vec<ModalityGraph>,
    pub k: usize,
    pub k_a: usize,
}

impl AnchorGraph {
    pub fn instance_count(&self) -> usize {
        self.modalities[0].z.nrows()
    }

    pub fn modality_count(&self) -> usize {
        self.modalities.len()
    }

    /// Dump all matrices of every modality as raw-f32 files into `dir`.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        for (m, g) in self.modalities.iter().enumerate() {
            io::write_raw_f32(&dir.join(format!("z_{m}.xmf")), &g.z)?;
            io::write_raw_f32(&dir.join(format!("s_{m}.xmf")), &g.s)?;
            io::write_raw_f32(&dir.join(format!("zhat_{m}.xmf")), &g.z_hat)?;
            io::write_raw_f32(&dir.join(format!("affinity_{m}.xmf")), &g.affinity)?;
            io::write_raw_f32(&dir.join(format!("laplacian_{m}.xmf")), &g.laplacian)?;
        }
        Ok(())
    }
}

/// k-means over the concatenated modalities, centroids split back per
/// modality. The dataset must already be unit-variance normalized.
pub fn learn_joint_anchors(
    dataset: &MultiModalDataset,
    p: usize,
    seed: u64,
    max_iters: usize,
) -> Result<AnchorSet> {
    let n = dataset.instance_count();
    if p == 0 || p > n {
        return Err(Error::invalid(format!("anchor count must be in 1..=N (P={p}, N={n})")));
    }
    let concat = dataset.concatenated();
    let result = kmeans::kmeans(&concat, p, seed, max_iters, 1e-6)?;
    let mut per_modality = Vec::with_capacity(dataset.modality_count());
    let mut offset = 0;
    for fm in dataset.modalities() {
        let d = fm.cols();
        per_modality.push(result.centroids.view((0, offset), (p, d)).into_owned());
        offset += d;
    }
    AnchorSet::new(per_modality)
}

/// Indices and squared distances of the k nearest rows of `anchors` to the
/// point `row` of `points`, ties broken by ascending index.
fn knn_to_anchors(
    points: &DMatrix<f64>,
    row: usize,
    anchors: &DMatrix<f64>,
    k: usize,
    skip: Option<usize>,
) -> Vec<(usize, f64)> {
    let mut dists: Vec<(usize, f64)> = (0..anchors.nrows())
        .filter(|&a| Some(a) != skip)
        .map(|a| {
            let mut s = 0.0;
            for j in 0..points.ncols() {
                let d = points[(row, j)] - anchors[(a, j)];
                s += d * d;
            }
            (a, s)
        })
        .collect();
    dists.sort_by(|x, y| x.1.partial_cmp(&y.1).unwrap().then(x.0.cmp(&y.0)));
    dists.truncate(k);
    dists
}

fn resolve_sigma(sigma: Sigma, neighbor_d2: &[f64]) -> Result<f64> {
    match sigma {
        Sigma::Fixed(s) => {
            if s <= 0.0 {
                return Err(Error::invalid("sigma must be positive"));
            }
            Ok(s)
        }
        Sigma::Auto => {
            let mean = neighbor_d2.iter().sum::<f64>() / neighbor_d2.len().max(1) as f64;
            // degenerate all-coincident case; any positive bandwidth gives
            // the same normalized weights
            Ok(if mean > 0.0 { mean } else { 1.0 })
        }
    }
}

/// Sparse row-stochastic data-to-anchor affinity: Gaussian kernel weights over
/// each point's k nearest anchors, L1-normalized; all other entries zero.
pub fn data_to_anchor(
    features: &DMatrix<f64>,
    anchors: &DMatrix<f64>,
    k: usize,
    sigma: Sigma,
) -> Result<(DMatrix<f64>, f64)> {
    let n = features.nrows();
    let p = anchors.nrows();
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > p {
        return Err(Error::invalid(format!("k={k} exceeds anchor count P={p}")));
    }
    if features.ncols() != anchors.ncols() {
        return Err(Error::dims("feature and anchor dimensions differ"));
    }
    let neighbors: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| knn_to_anchors(features, i, anchors, k, None))
        .collect();
    let all_d2: Vec<f64> = neighbors.iter().flatten().map(|&(_, d2)| d2).collect();
    let sigma = resolve_sigma(sigma, &all_d2)?;
    let mut z = DMatrix::zeros(n, p);
    for (i, nbrs) in neighbors.iter().enumerate() {
        let weights: Vec<f64> = nbrs.iter().map(|&(_, d2)| (-d2 / sigma).exp()).collect();
        let total: f64 = weights.iter().sum();
        for (&(a, _), w) in nbrs.iter().zip(&weights) {
            z[(i, a)] = w / total;
        }
    }
    Ok((z, sigma))
}

/// Reciprocal-kNN anchor-to-anchor affinity. Anchor j contributes to row i
/// only when i and j are mutually among each other's k_a nearest anchors. The
/// self weight K(u_i, u_i) = 1 is always included before normalization, so an
/// anchor with no reciprocal neighbors keeps the trivial self-row.
pub fn anchor_to_anchor(
    anchors: &DMatrix<f64>,
    k_a: usize,
    sigma: Sigma,
) -> Result<(DMatrix<f64>, f64)> {
    let p = anchors.nrows();
    if k_a >= p {
        return Err(Error::invalid(format!("k_a={k_a} must be < P={p}")));
    }
    if k_a == 0 {
        return Ok((DMatrix::identity(p, p), 1.0));
    }
    let knn: Vec<Vec<(usize, f64)>> = (0..p)
        .map(|i| knn_to_anchors(anchors, i, anchors, k_a, Some(i)))
        .collect();
    let all_d2: Vec<f64> = knn.iter().flatten().map(|&(_, d2)| d2).collect();
    let sigma = resolve_sigma(sigma, &all_d2)?;
    let mut s = DMatrix::zeros(p, p);
    for i in 0..p {
        let mut row: Vec<(usize, f64)> = vec![(i, 1.0)]; // self weight K(u_i,u_i)
        for &(j, d2) in &knn[i] {
            let mutual = knn[j].iter().any(|&(back, _)| back == i);
            if mutual {
                row.push((j, (-d2 / sigma).exp()));
            }
        }
        let total: f64 = row.iter().map(|&(_, w)| w).sum();
        for (j, w) in row {
            s[(i, j)] = w / total;
        }
    }
    Ok((s, sigma))
}

/// Build the full per-modality anchor graph from a normalized dataset.
pub fn build_graph(
    dataset: &MultiModalDataset,
    anchor_set: &AnchorSet,
    k: usize,
    k_a: usize,
    sigma_data: Sigma,
    sigma_anchor: Sigma,
) -> Result<AnchorGraph> {
    if anchor_set.modality_count() != dataset.modality_count() {
        return Err(Error::dims("anchor set and dataset modality counts differ"));
    }
    let modalities: Vec<ModalityGraph> = dataset
        .modalities()
        .par_iter()
        .enumerate()
        .map(|(m, fm)| {
            let anchors = anchor_set.modality(m);
            let (z, sd) = data_to_anchor(fm.as_matrix(), anchors, k, sigma_data)?;
            let (s, sa) = anchor_to_anchor(anchors, k_a, sigma_anchor)?;
            let z_hat = &z * &s;
            let p = z_hat.ncols();
            let mut lambda = DVector::zeros(p);
            for c in 0..p {
                let col_sum: f64 = z_hat.column(c).sum();
                // unused anchors contribute nothing to A; avoid 0 division
                lambda[c] = if col_sum > 0.0 { col_sum } else { 1.0 };
            }
            let mut scaled = z_hat.clone();
            for c in 0..p {
                let inv = 1.0 / lambda[c];
                for r in 0..scaled.nrows() {
                    scaled[(r, c)] *= inv;
                }
            }
            let affinity = &scaled * z_hat.transpose();
            let n = affinity.nrows();
            let mut laplacian = -affinity.clone();
            for i in 0..n {
                laplacian[(i, i)] += 1.0;
            }
            Ok(ModalityGraph {
                z,
                s,
                z_hat,
                lambda,
                affinity,
                laplacian,
                sigma_data: sd,
                sigma_anchor: sa,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AnchorGraph { modalities, k, k_a })
}
