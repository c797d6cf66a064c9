//! Multi-modal feature datasets: validation, unit-variance normalization,
//! and seeded synthetic fixtures.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::io::{self, MatrixFormat};

/// A validated N x D matrix of finite feature values for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: DMatrix<f64>,
}

impl FeatureMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::invalid("feature matrix dimensions must be positive"));
        }
        for i in 0..data.nrows() {
            for j in 0..data.ncols() {
                if !data[(i, j)].is_finite() {
                    return Err(Error::NonFinite { row: i, col: j });
                }
            }
        }
        Ok(FeatureMatrix { data })
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    /// Trace of the (unbiased, 1/(N-1)) covariance matrix: the total variance.
    pub fn total_variance(&self) -> f64 {
        let n = self.rows();
        if n < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for j in 0..self.cols() {
            let col = self.data.column(j);
            let mean = col.sum() / n as f64;
            let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
            total += ss / (n as f64 - 1.0);
        }
        total
    }
}

/// M aligned modalities: row i of every modality describes the same instance.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalDataset {
    modalities: Vec<FeatureMatrix>,
    labels: Option<Vec<Vec<u32>>>,
}

impl MultiModalDataset {
    pub fn new(modalities: Vec<FeatureMatrix>, labels: Option<Vec<Vec<u32>>>) -> Result<Self> {
        if modalities.is_empty() {
            return Err(Error::invalid("dataset needs at least one modality"));
        }
        let counts: Vec<usize> = modalities.iter().map(|m| m.rows()).collect();
        if counts.iter().any(|&c| c != counts[0]) {
            return Err(Error::RowCountMismatch { counts });
        }
        if let Some(ref l) = labels {
            if l.len() != counts[0] {
                return Err(Error::RowCountMismatch {
                    counts: vec![counts[0], l.len()],
                });
            }
        }
        Ok(MultiModalDataset { modalities, labels })
    }

    pub fn instance_count(&self) -> usize {
        self.modalities[0].rows()
    }

    pub fn modality_count(&self) -> usize {
        self.modalities.len()
    }

    pub fn modalities(&self) -> &[FeatureMatrix] {
        &self.modalities
    }

    pub fn modality(&self, m: usize) -> &FeatureMatrix {
        &self.modalities[m]
    }

    pub fn labels(&self) -> Option<&[Vec<u32>]> {
        self.labels.as_deref()
    }

    pub fn with_labels(mut self, labels: Vec<Vec<u32>>) -> Result<Self> {
        if labels.len() != self.instance_count() {
            return Err(Error::RowCountMismatch {
                counts: vec![self.instance_count(), labels.len()],
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Select a subset of instances by row index, keeping labels aligned.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let modalities = self
            .modalities
            .iter()
            .map(|fm| {
                let m = fm.as_matrix();
                FeatureMatrix::new(DMatrix::from_fn(indices.len(), m.ncols(), |r, c| {
                    m[(indices[r], c)]
                }))
            })
            .collect::<Result<Vec<_>>>()?;
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i].clone()).collect());
        MultiModalDataset::new(modalities, labels)
    }

    /// Concatenate all modalities column-wise into one N x sum(D^m) matrix.
    pub fn concatenated(&self) -> DMatrix<f64> {
        let n = self.instance_count();
        let total_d: usize = self.modalities.iter().map(|m| m.cols()).sum();
        let mut out = DMatrix::zeros(n, total_d);
        let mut offset = 0;
        for fm in &self.modalities {
            let m = fm.as_matrix();
            out.view_mut((0, offset), (n, m.ncols())).copy_from(m);
            offset += m.ncols();
        }
        out
    }
}

/// Load per-modality feature files into one validated dataset.
pub fn load_dataset(paths: &[impl AsRef<Path>], format: MatrixFormat) -> Result<MultiModalDataset> {
    let modalities = paths
        .iter()
        .map(|p| io::read_matrix(p.as_ref(), format).and_then(FeatureMatrix::new))
        .collect::<Result<Vec<_>>>()?;
    MultiModalDataset::new(modalities, None)
}

pub fn save_dataset(
    dataset: &MultiModalDataset,
    paths: &[impl AsRef<Path>],
    format: MatrixFormat,
) -> Result<()> {
    if paths.len() != dataset.modality_count() {
        return Err(Error::invalid("one output path per modality required"));
    }
    for (fm, p) in dataset.modalities().iter().zip(paths) {
        io::write_matrix(p.as_ref(), fm.as_matrix(), format)?;
    }
    Ok(())
}

/// Scale each modality so its covariance trace becomes 1, dividing by the
/// square root of the total variance (equal to the eigenvalue sum of the
/// covariance matrix).
pub fn unit_variance_normalize(dataset: &MultiModalDataset) -> Result<MultiModalDataset> {
    if dataset.instance_count() < 2 {
        return Err(Error::invalid(
            "unit-variance normalization needs at least 2 instances",
        ));
    }
    let modalities = dataset
        .modalities()
        .iter()
        .enumerate()
        .map(|(idx, fm)| {
            let total = fm.total_variance();
            if total <= 0.0 {
                return Err(Error::ZeroVariance { modality: idx });
            }
            let divisor = total.sqrt();
            FeatureMatrix::new(fm.as_matrix() / divisor)
        })
        .collect::<Result<Vec<_>>>()?;
    MultiModalDataset::new(modalities, dataset.labels().map(|l| l.to_vec()))
}

/// Paired Gaussian clusters: instance i belongs to the same cluster in every
/// modality, each modality drawing its own centroids. Deterministic per seed.
pub fn synthesize_clustered(
    n_clusters: usize,
    per_cluster: usize,
    dims: &[usize],
    spread: f64,
    seed: u64,
) -> Result<MultiModalDataset> {
    synthesize_clustered_anisotropic(n_clusters, per_cluster, dims, spread, 1.0, seed)
}

/// Same fixture with within-cluster noise stretched by `elongation` along one
/// random unit direction per cluster per modality. `elongation = 1` recovers
/// isotropic clusters.
pub fn synthesize_clustered_anisotropic(
    n_clusters: usize,
    per_cluster: usize,
    dims: &[usize],
    spread: f64,
    elongation: f64,
    seed: u64,
) -> Result<MultiModalDataset> {
    if n_clusters < 2 {
        return Err(Error::invalid("need at least 2 clusters"));
    }
    if per_cluster < 1 {
        return Err(Error::invalid("need at least 1 point per cluster"));
    }
    if !(spread > 0.0) {
        return Err(Error::invalid("spread must be positive"));
    }
    if dims.is_empty() {
        return Err(Error::invalid("need at least one modality dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_clusters * per_cluster;
    let mut modalities = Vec::with_capacity(dims.len());
    for &d in dims {
        if d == 0 {
            return Err(Error::invalid("modality dimension must be positive"));
        }
        // centroids at unit-normal scale; separation >> spread for small spread
        let centroids: Vec<Vec<f64>> = (0..n_clusters)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let axes: Vec<Vec<f64>> = (0..n_clusters)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        let mut data = DMatrix::zeros(n, d);
        for c in 0..n_clusters {
            for p in 0..per_cluster {
                let row = c * per_cluster + p;
                let noise: Vec<f64> = (0..d)
                    .map(|_| {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        spread * g
                    })
                    .collect();
                let along: f64 = noise.iter().zip(&axes[c]).map(|(n, a)| n * a).sum();
                for j in 0..d {
                    let stretched = noise[j] + (elongation - 1.0) * along * axes[c][j];
                    data[(row, j)] = centroids[c][j] + stretched;
                }
            }
        }
        modalities.push(FeatureMatrix::new(data)?);
    }
    let labels: Vec<Vec<u32>> = (0..n)
        .map(|i| vec![(i / per_cluster) as u32])
        .collect();
    MultiModalDataset::new(modalities, Some(labels))
}

/// Seeded permutation split into (query, database) index sets.
pub fn split_indices(n: usize, query_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(query_fraction > 0.0 && query_fraction < 1.0) {
        return Err(Error::invalid("query fraction must be in (0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    let n_query = ((n as f64) * query_fraction).round().max(1.0) as usize;
    let n_query = n_query.min(n - 1);
    let query = perm[..n_query].to_vec();
    let db = perm[n_query..].to_vec();
    Ok((query, db))
}
