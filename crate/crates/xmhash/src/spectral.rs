//! Dense symmetric eigensolve, orthogonal Procrustes, and the alternating
//! rotation alignment that initializes the per-modality spectral embeddings.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::anchor_graph::AnchorGraph;
use crate::error::{Error, Result};

/// One modality's N x L spectral embedding.
#[derive(Debug, Clone)]
pub struct SpectralEmbedding {
    pub y: DMatrix<f64>,
    /// ||Y^T Y - N I||_F at construction time.
    pub orthogonality_residual: f64,
}

impl SpectralEmbedding {
    pub fn new(y: DMatrix<f64>) -> Self {
        let residual = orthogonality_residual(&y);
        SpectralEmbedding {
            y,
            orthogonality_residual: residual,
        }
    }
}

pub fn orthogonality_residual(y: &DMatrix<f64>) -> f64 {
    let n = y.nrows() as f64;
    let mut gram = y.transpose() * y;
    for i in 0..gram.nrows() {
        gram[(i, i)] -= n;
    }
    gram.norm()
}

/// Per-modality rotations from the alignment loop.
#[derive(Debug, Clone)]
pub struct RotationSet {
    pub rotations: Vec<DMatrix<f64>>,
    /// Final value of the ordered-pair correlation objective.
    pub alignment_objective: f64,
    pub rounds: usize,
    /// Objective before any round, then after each round.
    pub objective_history: Vec<f64>,
}

/// The L eigenpairs just above the numerically-zero part of the spectrum of a
/// symmetric PSD matrix, ascending. `zero_tol = None` uses a scale-aware
/// cutoff of 1e-8 times the largest eigenvalue.
pub fn smallest_positive_eigenpairs(
    lap: &DMatrix<f64>,
    l: usize,
    zero_tol: Option<f64>,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = lap.nrows();
    if lap.ncols() != n {
        return Err(Error::dims("matrix must be square"));
    }
    if l == 0 || l > n.saturating_sub(1) {
        return Err(Error::invalid(format!("L must be in 1..=N-1 (L={l}, N={n})")));
    }
    if (lap - lap.transpose()).amax() > 1e-8 {
        return Err(Error::invalid("matrix is not symmetric within 1e-8"));
    }
    // symmetrize to guard the eigensolver against roundoff asymmetry
    let sym = (lap + lap.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let max_eig = eig.eigenvalues[order[n - 1]].max(0.0);
    let tol = zero_tol.unwrap_or(1e-8 * max_eig.max(1.0));
    let positive: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| eig.eigenvalues[i] > tol)
        .collect();
    if positive.len() < l {
        return Err(Error::EigenDeficit {
            available: positive.len(),
            requested: l,
        });
    }
    let mut values = Vec::with_capacity(l);
    let mut vectors = DMatrix::zeros(n, l);
    for (c, &idx) in positive.iter().take(l).enumerate() {
        values.push(eig.eigenvalues[idx]);
        let mut col = eig.eigenvectors.column(idx).into_owned();
        // sign convention: largest-magnitude entry positive
        let mut max_abs = 0.0;
        let mut max_i = 0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > max_abs {
                max_abs = v.abs();
                max_i = i;
            }
        }
        if col[max_i] < 0.0 {
            col.neg_mut();
        }
        vectors.column_mut(c).copy_from(&col);
    }
    Ok((values, vectors))
}

/// Orthogonal maximizer of Tr(M R): with M = U S V^T, R = V U^T and the
/// attained trace equals the sum of singular values.
pub fn procrustes(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    for v in m.iter() {
        if !v.is_finite() {
            return Err(Error::invalid("procrustes input has non-finite entries"));
        }
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let v_t = svd.v_t.as_ref().expect("svd with v_t");
    Ok(v_t.transpose() * u.transpose())
}

/// Ordered-pair correlation objective: sum over m != t of
/// Tr((R^t)^T (Y^t)^T Y^m R^m).
fn alignment_objective(ys: &[DMatrix<f64>], rotations: &[DMatrix<f64>]) -> f64 {
    let m = ys.len();
    let rotated: Vec<DMatrix<f64>> = ys.iter().zip(rotations).map(|(y, r)| y * r).collect();
    let mut total = 0.0;
    for a in 0..m {
        for b in 0..m {
            if a != b {
                total += (rotated[a].transpose() * &rotated[b]).trace();
            }
        }
    }
    total
}

/// Eigen-based initialization of each modality's embedding followed by
/// alternating Procrustes rounds maximizing pairwise correlations.
pub fn init_embeddings(
    graphs: &AnchorGraph,
    l: usize,
    max_rounds: usize,
    tol: Option<f64>,
) -> Result<(Vec<SpectralEmbedding>, RotationSet)> {
    let n = graphs.instance_count();
    let m = graphs.modality_count();
    let sqrt_n = (n as f64).sqrt();
    let bases: Vec<DMatrix<f64>> = graphs
        .modalities
        .par_iter()
        .map(|g| {
            let (_, e) = smallest_positive_eigenpairs(&g.laplacian, l, None)?;
            Ok(e * sqrt_n)
        })
        .collect::<Result<_>>()?;
    let mut rotations: Vec<DMatrix<f64>> = (0..m).map(|_| DMatrix::identity(l, l)).collect();
    let mut rounds = 0;
    let mut objective = alignment_objective(&bases, &rotations);
    let mut objective_history = vec![objective];
    if m > 1 {
        let tol = tol.unwrap_or(1e-7 * n as f64 * l as f64);
        for _ in 0..max_rounds {
            rounds += 1;
            for target in 0..m {
                let mut combined = DMatrix::zeros(n, l);
                for t in 0..m {
                    if t != target {
                        combined += &bases[t] * &rotations[t];
                    }
                }
                let cross = combined.transpose() * &bases[target];
                rotations[target] = procrustes(&cross)?;
            }
            let new_objective = alignment_objective(&bases, &rotations);
            let improved = new_objective - objective;
            objective = new_objective;
            objective_history.push(objective);
            if improved < tol {
                break;
            }
        }
    }
    let embeddings = bases
        .iter()
        .zip(&rotations)
        .map(|(y, r)| SpectralEmbedding::new(y * r))
        .collect();
    Ok((
        embeddings,
        RotationSet {
            rotations,
            alignment_objective: objective,
            rounds,
            objective_history,
        },
    ))
}
