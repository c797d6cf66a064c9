//! Stage 2: modality-specific hash functions fit against the learned codes.
//!
//! Encoders are linear maps or shallow ReLU MLPs over precomputed features.
//! Training minimizes code fidelity plus cross-modality correlation and
//! independence regularizers, with the Gram target scaled to the mini-batch
//! size. Gradients are computed by hand-rolled backprop.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureMatrix, MultiModalDataset};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"XMHM";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Linear,
    Mlp { hidden: Vec<usize> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub gamma1: f64,
    pub gamma2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Include the m = t pairs in the independence regularizer.
    pub diagonal_pairs: bool,
    /// Fidelity-only epochs before joint training.
    pub pretrain_epochs: usize,
    /// Per-modality, per-batch cap on the parameter gradient norm. The
    /// independence regularizer is quartic, so unclipped descent blows up at
    /// the recommended regularizer weights.
    pub max_grad_norm: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            gamma1: 100.0,
            gamma2: 100.0,
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-4,
            momentum: 0.9,
            seed: 0,
            diagonal_pairs: true,
            pretrain_epochs: 0,
            max_grad_norm: 1e3,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.gamma1 < 0.0 || self.gamma2 < 0.0 {
            return Err(Error::Config("gamma1/gamma2 must be >= 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::Config("max_grad_norm must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// in x out weight matrix.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// One modality's encoder: features -> L real outputs, quantized by sign.
#[derive(Debug, Clone, PartialEq)]
pub struct HashModel {
    pub architecture: Architecture,
    pub layers: Vec<Layer>,
}

impl HashModel {
    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weights.ncols()
    }

    /// Seeded uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    pub fn init(architecture: &Architecture, input_dim: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims: Vec<usize> = match architecture {
            Architecture::Linear => vec![input_dim, output_dim],
            Architecture::Mlp { hidden } => {
                let mut d = vec![input_dim];
                d.extend_from_slice(hidden);
                d.push(output_dim);
                d
            }
        };
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Layer {
                    weights: DMatrix::from_fn(w[0], w[1], |_, _| {
                        rng.gen::<f64>() * 2.0 * bound - bound
                    }),
                    bias: DVector::from_fn(w[1], |_, _| rng.gen::<f64>() * 2.0 * bound - bound),
                }
            })
            .collect();
        HashModel {
            architecture: architecture.clone(),
            layers,
        }
    }

    /// Real-valued outputs before quantization.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward_cached(x)?.pop().unwrap())
    }

    /// Activations after every layer; the last entry is the output.
    fn forward_cached(&self, x: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dims(format!(
                "model expects {} input features, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut pre = &h * &layer.weights;
            for r in 0..pre.nrows() {
                for c in 0..pre.ncols() {
                    pre[(r, c)] += layer.bias[c];
                }
            }
            if idx + 1 < self.layers.len() {
                pre.apply(|v| *v = v.max(0.0)); // ReLU on hidden layers
            }
            activations.push(pre.clone());
            h = pre;
        }
        Ok(activations)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut w = std::io::BufWriter::new(file);
        let io_err = |e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        };
        w.write_all(MODEL_MAGIC).map_err(io_err)?;
        let tag: u32 = match self.architecture {
            Architecture::Linear => 0,
            Architecture::Mlp { .. } => 1,
        };
        w.write_all(&tag.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())
            .map_err(io_err)?;
        for layer in &self.layers {
            w.write_all(&(layer.weights.nrows() as u32).to_le_bytes())
                .map_err(io_err)?;
            w.write_all(&(layer.weights.ncols() as u32).to_le_bytes())
                .map_err(io_err)?;
        }
        for layer in &self.layers {
            for r in 0..layer.weights.nrows() {
                for c in 0..layer.weights.ncols() {
                    w.write_all(&(layer.weights[(r, c)] as f32).to_le_bytes())
                        .map_err(io_err)?;
                }
            }
            for v in layer.bias.iter() {
                w.write_all(&(*v as f32).to_le_bytes()).map_err(io_err)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut r = std::io::BufReader::new(file);
        let io_err = |e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::BadRawFile {
                path: path.to_path_buf(),
                message: "bad model magic".into(),
            });
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |r: &mut std::io::BufReader<std::fs::File>| -> Result<u32> {
            r.read_exact(&mut u32buf).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let tag = read_u32(&mut r)?;
        let n_layers = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            dims.push((rows, cols));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for &(rows, cols) in &dims {
            let mut buf = vec![0u8; (rows * cols + cols) * 4];
            r.read_exact(&mut buf).map_err(io_err)?;
            let weights = DMatrix::from_fn(rows, cols, |i, j| {
                let off = (i * cols + j) * 4;
                f32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as f64
            });
            let bias = DVector::from_fn(cols, |i, _| {
                let off = (rows * cols + i) * 4;
                f32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as f64
            });
            layers.push(Layer { weights, bias });
        }
        let architecture = if tag == 0 {
            Architecture::Linear
        } else {
            Architecture::Mlp {
                hidden: dims.iter().take(n_layers - 1).map(|&(_, c)| c).collect(),
            }
        };
        Ok(HashModel {
            architecture,
            layers,
        })
    }
}

/// Binary codes for out-of-sample points: sign of the model outputs,
/// sign(0) := +1.
pub fn encode(model: &HashModel, features: &FeatureMatrix) -> Result<DMatrix<f64>> {
    let out = model.forward(features.as_matrix())?;
    Ok(out.map(|v| if v < 0.0 { -1.0 } else { 1.0 }))
}

/// The stage-2 training loss: 1/2 sum_m ||F^m - B||_F^2
/// - gamma1 sum_{m != t} Tr((F^m)^T F^t)
/// + gamma2 sum_{m,t} ||(F^m)^T F^t - n I||_F^2
/// with n the row count of the supplied outputs.
pub fn stage2_loss(
    outputs: &[DMatrix<f64>],
    b: &DMatrix<f64>,
    gamma1: f64,
    gamma2: f64,
    diagonal_pairs: bool,
) -> Result<f64> {
    let n = b.nrows() as f64;
    let l = b.ncols();
    for f in outputs {
        if f.nrows() != b.nrows() || f.ncols() != l {
            return Err(Error::dims("output shape does not match codes"));
        }
    }
    let mut loss = 0.0;
    for f in outputs {
        loss += 0.5 * (f - b).norm_squared();
    }
    for (m, fm) in outputs.iter().enumerate() {
        for (t, ft) in outputs.iter().enumerate() {
            if m != t {
                loss -= gamma1 * (fm.transpose() * ft).trace();
            }
            if m != t || diagonal_pairs {
                let mut gram = fm.transpose() * ft;
                for i in 0..l {
                    gram[(i, i)] -= n;
                }
                loss += gamma2 * gram.norm_squared();
            }
        }
    }
    Ok(loss)
}

/// Gradient of `stage2_loss` in the outputs of modality `m`.
fn output_grad(
    outputs: &[DMatrix<f64>],
    b: &DMatrix<f64>,
    m: usize,
    gamma1: f64,
    gamma2: f64,
    diagonal_pairs: bool,
) -> DMatrix<f64> {
    let n = b.nrows() as f64;
    let l = b.ncols();
    let mut grad = &outputs[m] - b;
    for (t, ft) in outputs.iter().enumerate() {
        if t != m {
            grad -= 2.0 * gamma1 * ft;
        }
        if t != m || diagonal_pairs {
            let mut gram = ft.transpose() * &outputs[m];
            for i in 0..l {
                gram[(i, i)] -= n;
            }
            grad += 4.0 * gamma2 * ft * gram;
        }
    }
    grad
}

/// Backprop `out_grad` through the model, accumulating parameter gradients.
fn backprop(
    model: &HashModel,
    x: &DMatrix<f64>,
    activations: &[DMatrix<f64>],
    out_grad: &DMatrix<f64>,
) -> Vec<Layer> {
    let mut grads: Vec<Layer> = model
        .layers
        .iter()
        .map(|l| Layer {
            weights: DMatrix::zeros(l.weights.nrows(), l.weights.ncols()),
            bias: DVector::zeros(l.bias.len()),
        })
        .collect();
    let mut delta = out_grad.clone();
    for idx in (0..model.layers.len()).rev() {
        let input = if idx == 0 { x } else { &activations[idx - 1] };
        grads[idx].weights = input.transpose() * &delta;
        for c in 0..delta.ncols() {
            grads[idx].bias[c] = delta.column(c).sum();
        }
        if idx > 0 {
            delta = &delta * model.layers[idx].weights.transpose();
            // ReLU mask of the hidden activation
            let act = &activations[idx - 1];
            for r in 0..delta.nrows() {
                for c in 0..delta.ncols() {
                    if act[(r, c)] <= 0.0 {
                        delta[(r, c)] = 0.0;
                    }
                }
            }
        }
    }
    grads
}

/// Full-loss parameter gradients for every modality on one batch; exposed for
/// finite-difference verification.
pub fn batch_param_grads(
    models: &[HashModel],
    inputs: &[DMatrix<f64>],
    b: &DMatrix<f64>,
    config: &Stage2Config,
) -> Result<Vec<Vec<Layer>>> {
    let cached: Vec<Vec<DMatrix<f64>>> = models
        .iter()
        .zip(inputs)
        .map(|(model, x)| model.forward_cached(x))
        .collect::<Result<_>>()?;
    let outputs: Vec<DMatrix<f64>> = cached.iter().map(|a| a.last().unwrap().clone()).collect();
    models
        .iter()
        .enumerate()
        .map(|(m, model)| {
            let og = output_grad(
                &outputs,
                b,
                m,
                config.gamma1,
                config.gamma2,
                config.diagonal_pairs,
            );
            Ok(backprop(model, &inputs[m], &cached[m], &og))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Train one encoder per modality against the shared codes by mini-batch
/// gradient descent with momentum, joint across modalities within a batch.
pub fn train_hash_models(
    dataset: &MultiModalDataset,
    codes: &DMatrix<f64>,
    architecture: &Architecture,
    config: &Stage2Config,
) -> Result<(Vec<HashModel>, TrainReport)> {
    config.validate()?;
    let n = dataset.instance_count();
    if codes.nrows() != n {
        return Err(Error::dims("codes row count does not match dataset"));
    }
    let l = codes.ncols();
    let mut models: Vec<HashModel> = dataset
        .modalities()
        .iter()
        .enumerate()
        .map(|(m, fm)| {
            HashModel::init(
                architecture,
                fm.cols(),
                l,
                config.seed.wrapping_add(m as u64),
            )
        })
        .collect();
    let mut velocity: Vec<Vec<Layer>> = models
        .iter()
        .map(|model| {
            model
                .layers
                .iter()
                .map(|layer| Layer {
                    weights: DMatrix::zeros(layer.weights.nrows(), layer.weights.ncols()),
                    bias: DVector::zeros(layer.bias.len()),
                })
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5134_7fe2);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        // Fisher-Yates shuffle
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let fidelity_only = epoch < config.pretrain_epochs;
        let (g1, g2) = if fidelity_only {
            (0.0, 0.0)
        } else {
            (config.gamma1, config.gamma2)
        };
        let batch_config = Stage2Config {
            gamma1: g1,
            gamma2: g2,
            ..config.clone()
        };
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let inputs: Vec<DMatrix<f64>> = dataset
                .modalities()
                .iter()
                .map(|fm| {
                    let x = fm.as_matrix();
                    DMatrix::from_fn(chunk.len(), x.ncols(), |r, c| x[(chunk[r], c)])
                })
                .collect();
            let b_batch = DMatrix::from_fn(chunk.len(), l, |r, c| codes[(chunk[r], c)]);
            let outputs: Vec<DMatrix<f64>> = models
                .iter()
                .zip(&inputs)
                .map(|(model, x)| model.forward(x))
                .collect::<Result<_>>()?;
            let loss = stage2_loss(&outputs, &b_batch, g1, g2, config.diagonal_pairs)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            epoch_loss += loss;
            batches += 1;
            let mut grads = batch_param_grads(&models, &inputs, &b_batch, &batch_config)?;
            for model_grads in &mut grads {
                let norm: f64 = model_grads
                    .iter()
                    .map(|g| g.weights.norm_squared() + g.bias.norm_squared())
                    .sum::<f64>()
                    .sqrt();
                if norm > config.max_grad_norm {
                    let scale = config.max_grad_norm / norm;
                    for g in model_grads.iter_mut() {
                        g.weights *= scale;
                        g.bias *= scale;
                    }
                }
            }
            for (m, model_grads) in grads.into_iter().enumerate() {
                for (idx, g) in model_grads.into_iter().enumerate() {
                    let vel = &mut velocity[m][idx];
                    vel.weights = config.momentum * &vel.weights - config.learning_rate * g.weights;
                    vel.bias = config.momentum * &vel.bias - config.learning_rate * g.bias;
                    models[m].layers[idx].weights += &vel.weights;
                    models[m].layers[idx].bias += &vel.bias;
                }
            }
        }
        epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }
    Ok((models, TrainReport { epoch_losses }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codes::snap_sign;
    use crate::dataset;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn rand_matrix(n: usize, l: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, l, |_, _| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn loss_term_isolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = snap_sign(&rand_matrix(4, 2, &mut rng));
        // outputs equal B, M=1: fidelity 0, gamma2 term on B's own Gram
        let loss = stage2_loss(&[b.clone()], &b, 5.0, 3.0, true).unwrap();
        let n = 4.0;
        let mut gram = b.transpose() * &b;
        for i in 0..2 {
            gram[(i, i)] -= n;
        }
        assert_relative_eq!(loss, 3.0 * gram.norm_squared(), epsilon = 1e-10);
        // zero outputs, gammas off: M*N*L/2
        let zero = DMatrix::zeros(4, 2);
        let loss = stage2_loss(&[zero], &b, 0.0, 0.0, true).unwrap();
        assert_relative_eq!(loss, 4.0 * 2.0 / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn loss_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = snap_sign(&rand_matrix(4, 2, &mut rng));
        let outputs = vec![rand_matrix(4, 2, &mut rng), rand_matrix(4, 2, &mut rng)];
        let (g1, g2) = (0.7, 1.3);
        let fast = stage2_loss(&outputs, &b, g1, g2, true).unwrap();
        let n = 4.0;
        let mut naive = 0.0;
        for f in &outputs {
            for i in 0..4 {
                for c in 0..2 {
                    let d = f[(i, c)] - b[(i, c)];
                    naive += 0.5 * d * d;
                }
            }
        }
        for m in 0..2 {
            for t in 0..2 {
                let mut gram = [[0.0f64; 2]; 2];
                for a in 0..2 {
                    for bcol in 0..2 {
                        for i in 0..4 {
                            gram[a][bcol] += outputs[m][(i, a)] * outputs[t][(i, bcol)];
                        }
                    }
                }
                if m != t {
                    naive -= g1 * (gram[0][0] + gram[1][1]);
                }
                for a in 0..2 {
                    for bcol in 0..2 {
                        let target = if a == bcol { n } else { 0.0 };
                        let d = gram[a][bcol] - target;
                        naive += g2 * d * d;
                    }
                }
            }
        }
        assert_relative_eq!(fast, naive, epsilon = 1e-10);
    }

    #[test]
    fn encode_signs() {
        let model = HashModel {
            architecture: Architecture::Linear,
            layers: vec![Layer {
                weights: DMatrix::identity(2, 2),
                bias: DVector::zeros(2),
            }],
        };
        let fm = FeatureMatrix::new(DMatrix::from_row_slice(1, 2, &[2.0, -3.0])).unwrap();
        let codes = encode(&model, &fm).unwrap();
        assert_eq!(codes, DMatrix::from_row_slice(1, 2, &[1.0, -1.0]));
    }

    #[test]
    fn encode_zero_model_is_all_ones() {
        let model = HashModel {
            architecture: Architecture::Linear,
            layers: vec![Layer {
                weights: DMatrix::zeros(3, 2),
                bias: DVector::zeros(2),
            }],
        };
        let fm = FeatureMatrix::new(DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, -2.0, -3.0]))
            .unwrap();
        let codes = encode(&model, &fm).unwrap();
        assert!(codes.iter().all(|&v| v == 1.0));
    }

    fn flatten(model: &HashModel) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &model.layers {
            out.extend(layer.weights.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    fn unflatten(model: &HashModel, params: &[f64]) -> HashModel {
        let mut model = model.clone();
        let mut idx = 0;
        for layer in &mut model.layers {
            for v in layer.weights.iter_mut() {
                *v = params[idx];
                idx += 1;
            }
            for v in layer.bias.iter_mut() {
                *v = params[idx];
                idx += 1;
            }
        }
        model
    }

    fn gradcheck(architecture: Architecture, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![rand_matrix(6, 3, &mut rng), rand_matrix(6, 4, &mut rng)];
        let b = snap_sign(&rand_matrix(6, 2, &mut rng));
        let config = Stage2Config {
            gamma1: 0.5,
            gamma2: 0.8,
            ..Stage2Config::default()
        };
        let models: Vec<HashModel> = inputs
            .iter()
            .enumerate()
            .map(|(m, x)| HashModel::init(&architecture, x.ncols(), 2, m as u64))
            .collect();
        let analytic = batch_param_grads(&models, &inputs, &b, &config).unwrap();
        for m in 0..2 {
            let params = flatten(&models[m]);
            let flat_analytic = {
                let g_model = HashModel {
                    architecture: architecture.clone(),
                    layers: analytic[m].clone(),
                };
                flatten(&g_model)
            };
            let h = 1e-6;
            let mut max_rel: f64 = 0.0;
            let scale = flat_analytic.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1.0);
            for p in 0..params.len() {
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus[p] += h;
                minus[p] -= h;
                let eval = |pv: &[f64]| {
                    let mut ms = models.clone();
                    ms[m] = unflatten(&models[m], pv);
                    let outputs: Vec<DMatrix<f64>> = ms
                        .iter()
                        .zip(&inputs)
                        .map(|(model, x)| model.forward(x).unwrap())
                        .collect();
                    stage2_loss(&outputs, &b, config.gamma1, config.gamma2, true).unwrap()
                };
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                max_rel = max_rel.max((flat_analytic[p] - numeric).abs() / scale);
            }
            assert!(max_rel < tol, "modality {m}: max relative error {max_rel}");
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        gradcheck(Architecture::Linear, 1e-4);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        gradcheck(
            Architecture::Mlp {
                hidden: vec![5],
            },
            1e-3,
        );
    }

    #[test]
    fn linear_fidelity_converges_to_least_squares() {
        let ds = dataset::synthesize_clustered(2, 10, &[3], 0.2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = snap_sign(&rand_matrix(20, 2, &mut rng));
        let config = Stage2Config {
            gamma1: 0.0,
            gamma2: 0.0,
            epochs: 3000,
            batch_size: 20,
            learning_rate: 5e-3,
            momentum: 0.9,
            ..Stage2Config::default()
        };
        let (models, _) = train_hash_models(&ds, &b, &Architecture::Linear, &config).unwrap();
        let x = ds.modality(0).as_matrix();
        // normal-equations oracle on [X | 1]
        let mut aug = DMatrix::zeros(20, 4);
        aug.view_mut((0, 0), (20, 3)).copy_from(x);
        for i in 0..20 {
            aug[(i, 3)] = 1.0;
        }
        let gram = aug.transpose() * &aug;
        let rhs = aug.transpose() * &b;
        let sol = gram.lu().solve(&rhs).unwrap();
        let optimum = 0.5 * (&aug * &sol - &b).norm_squared();
        let out = models[0].forward(x).unwrap();
        let attained = 0.5 * (out - b).norm_squared();
        assert!(
            attained <= optimum * 1.01 + 1e-9,
            "attained {attained}, optimum {optimum}"
        );
    }

    #[test]
    fn separable_data_hits_most_bits() {
        let ds = dataset::synthesize_clustered(2, 15, &[4], 0.05, 6).unwrap();
        let labels = ds.labels().unwrap();
        let b = DMatrix::from_fn(30, 2, |i, j| {
            let bit = if labels[i][0] == 0 { 1.0 } else { -1.0 };
            if j == 0 {
                bit
            } else {
                -bit
            }
        });
        let config = Stage2Config {
            gamma1: 0.0,
            gamma2: 0.0,
            epochs: 800,
            batch_size: 30,
            learning_rate: 1e-2,
            momentum: 0.9,
            seed: 1,
            ..Stage2Config::default()
        };
        let (models, report) = train_hash_models(&ds, &b, &Architecture::Linear, &config).unwrap();
        let predicted = encode(&models[0], ds.modality(0)).unwrap();
        let agree = predicted
            .iter()
            .zip(b.iter())
            .filter(|(a, b)| a == b)
            .count();
        assert!(
            agree as f64 >= 0.95 * 60.0,
            "bit agreement {agree}/60, final loss {}",
            report.epoch_losses.last().unwrap()
        );
    }

    #[test]
    fn gamma2_reduces_independence_residual() {
        let ds = dataset::synthesize_clustered(3, 10, &[4], 0.2, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = snap_sign(&rand_matrix(30, 2, &mut rng));
        let run = |gamma2: f64| {
            let config = Stage2Config {
                gamma1: 0.0,
                gamma2,
                epochs: 400,
                batch_size: 30,
                learning_rate: 1e-4,
                momentum: 0.9,
                seed: 2,
                ..Stage2Config::default()
            };
            let (models, _) = train_hash_models(&ds, &b, &Architecture::Linear, &config).unwrap();
            let out = models[0].forward(ds.modality(0).as_matrix()).unwrap();
            let mut gram = out.transpose() * &out;
            for i in 0..2 {
                gram[(i, i)] -= 30.0;
            }
            gram.norm()
        };
        let loose = run(0.0);
        let tight = run(100.0);
        assert!(tight < loose, "gamma2=100 residual {tight} vs gamma2=0 {loose}");
    }

    #[test]
    fn training_is_deterministic() {
        let ds = dataset::synthesize_clustered(2, 5, &[3], 0.2, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let b = snap_sign(&rand_matrix(10, 2, &mut rng));
        let config = Stage2Config {
            epochs: 20,
            batch_size: 4,
            learning_rate: 1e-5,
            ..Stage2Config::default()
        };
        let (a, _) = train_hash_models(&ds, &b, &Architecture::Linear, &config).unwrap();
        let (bm, _) = train_hash_models(&ds, &b, &Architecture::Linear, &config).unwrap();
        assert_eq!(a, bm);
    }

    #[test]
    fn model_save_load_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model = HashModel::init(&Architecture::Mlp { hidden: vec![5, 3] }, 7, 2, 3);
        model.save(&path).unwrap();
        let back = HashModel::load(&path).unwrap();
        assert_eq!(back.architecture, model.architecture);
        assert_eq!(back.layers.len(), model.layers.len());
        for (a, b) in model.layers.iter().zip(&back.layers) {
            assert!((&a.weights - &b.weights).amax() < 1e-6);
            assert!((&a.bias - &b.bias).amax() < 1e-6);
        }
    }
}
