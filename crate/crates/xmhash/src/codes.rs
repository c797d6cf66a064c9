//! Stage 1: joint binary codes by alternating optimization.
//!
//! The code matrix B is updated with an exact penalty method for the binary
//! constraint (box-constrained projected gradient descent plus a closed-form
//! auxiliary variable on the sphere of radius sqrt(NL), with a growing
//! penalty), and each modality embedding Y is updated with an augmented
//! Lagrangian method for the orthogonality constraint Y^T Y = N I.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::anchor_graph::AnchorGraph;
use crate::error::{Error, Result};
use crate::spectral::{self, SpectralEmbedding};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpmConfig {
    /// Initial bilinear penalty weight.
    pub rho0: f64,
    /// Multiplicative penalty growth per outer iteration.
    pub sigma_growth: f64,
    /// Base learning rate of the projected gradient descent.
    pub eta: f64,
    /// Projected-gradient steps per penalty level.
    pub inner_max_iters: usize,
    /// Cap on penalty-growth iterations.
    pub outer_max_iters: usize,
    /// Entries count as binary when max(1 - |b|) falls below this.
    pub binary_tol: f64,
}

impl Default for EpmConfig {
    fn default() -> Self {
        EpmConfig {
            rho0: 0.1,
            sigma_growth: 1.05,
            eta: 0.01,
            inner_max_iters: 60,
            outer_max_iters: 500,
            binary_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlConfig {
    /// Initial orthogonality penalty weight.
    pub mu0: f64,
    /// Multiplicative penalty growth per multiplier update.
    pub mu_growth: f64,
    /// Objective-change stopping tolerance.
    pub eps: f64,
    /// Cap on multiplier updates.
    pub t_max: usize,
    /// Gradient steps per subproblem.
    pub inner_max_iters: usize,
    /// Feasibility target as a fraction of N: ||Y^T Y - N I||_F <= factor * N.
    pub feasibility_tol_factor: f64,
}

impl Default for AlConfig {
    fn default() -> Self {
        AlConfig {
            mu0: 0.01,
            mu_growth: 2.0,
            eps: 1e-3,
            t_max: 40,
            inner_max_iters: 200,
            feasibility_tol_factor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    /// Code length L.
    pub code_length: usize,
    /// Trade-off between the spectral term and the code correlation term.
    pub alpha: f64,
    /// Independence penalty weight.
    pub lambda1: f64,
    /// Balance penalty weight.
    pub lambda2: f64,
    pub outer_max_iters: usize,
    /// Relative stopping tolerance on the total objective, scaled by N*L.
    pub outer_tol: f64,
    /// Reuse the previous relaxed B as the next warm start.
    pub warm_start_codes: bool,
    pub init_max_rounds: usize,
    pub epm: EpmConfig,
    pub al: AlConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            code_length: 16,
            alpha: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            outer_max_iters: 20,
            outer_tol: 1e-5,
            warm_start_codes: true,
            init_max_rounds: 50,
            epm: EpmConfig::default(),
            al: AlConfig::default(),
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.code_length == 0 {
            return Err(Error::Config("code_length must be >= 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("alpha must be > 0".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("lambda1/lambda2 must be >= 0".into()));
        }
        if !(self.epm.rho0 > 0.0) || !(self.epm.sigma_growth > 1.0) || !(self.epm.eta > 0.0) {
            return Err(Error::Config(
                "epm requires rho0 > 0, sigma_growth > 1, eta > 0".into(),
            ));
        }
        if !(self.al.mu0 > 0.0) || !(self.al.mu_growth > 1.0) {
            return Err(Error::Config("al requires mu0 > 0, mu_growth > 1".into()));
        }
        Ok(())
    }
}

/// Per-outer-iteration diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OuterTrace {
    pub iteration: usize,
    pub objective: f64,
    pub per_modality: Vec<f64>,
    pub epm_iterations: usize,
    pub al_residuals: Vec<f64>,
}

/// Joint binary codes plus convergence diagnostics.
#[derive(Debug, Clone)]
pub struct BinaryCodes {
    /// N x L, entries exactly -1 or +1.
    pub codes: DMatrix<f64>,
    /// Pre-snap relaxed values, kept for diagnostics.
    pub relaxed: DMatrix<f64>,
    pub trace: Vec<OuterTrace>,
    pub epm_converged: bool,
    pub al_feasible: bool,
}

fn check_same_dims(b: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    if b.nrows() != y.nrows() || b.ncols() != y.ncols() {
        return Err(Error::dims(format!(
            "B is {}x{}, Y is {}x{}",
            b.nrows(),
            b.ncols(),
            y.nrows(),
            y.ncols()
        )));
    }
    Ok(())
}

/// Single-modality objective: Tr(Y^T L Y) - alpha * Tr(B^T Y).
pub fn modality_objective(
    b: &DMatrix<f64>,
    y: &DMatrix<f64>,
    lap: &DMatrix<f64>,
    alpha: f64,
) -> Result<f64> {
    check_same_dims(b, y)?;
    if lap.nrows() != y.nrows() || lap.ncols() != y.nrows() {
        return Err(Error::dims("Laplacian does not match embedding rows"));
    }
    Ok(modality_objective_with(b, y, &(lap * y), alpha))
}

fn modality_objective_with(b: &DMatrix<f64>, y: &DMatrix<f64>, lap_y: &DMatrix<f64>, alpha: f64) -> f64 {
    y.dot(lap_y) - alpha * b.dot(y)
}

/// The penalized code loss: -sum_m Tr(B^T Y^m)
/// + lambda1/4 ||B^T B - N I||_F^2 + lambda2/2 ||B^T 1||^2.
pub fn penalized_loss(b: &DMatrix<f64>, ys: &[DMatrix<f64>], lambda1: f64, lambda2: f64) -> f64 {
    let n = b.nrows() as f64;
    let correlation: f64 = ys.iter().map(|y| b.dot(y)).sum();
    let mut gram = b.transpose() * b;
    for i in 0..gram.nrows() {
        gram[(i, i)] -= n;
    }
    let mut balance = 0.0;
    for c in 0..b.ncols() {
        let s: f64 = b.column(c).sum();
        balance += s * s;
    }
    -correlation + lambda1 / 4.0 * gram.norm_squared() + lambda2 / 2.0 * balance
}

fn q_loss(
    b: &DMatrix<f64>,
    ys: &[DMatrix<f64>],
    lambda1: f64,
    lambda2: f64,
    rho: f64,
    v: &DMatrix<f64>,
) -> f64 {
    let nl = (b.nrows() * b.ncols()) as f64;
    penalized_loss(b, ys, lambda1, lambda2) + rho * (nl - b.dot(v))
}

/// Gradient of the penalized loss plus the bilinear penalty term:
/// -sum Y^m + lambda1 B(B^T B - N I) + lambda2 1 (1^T B) - rho V.
pub fn grad_penalized(
    b: &DMatrix<f64>,
    ys: &[DMatrix<f64>],
    lambda1: f64,
    lambda2: f64,
    rho: f64,
    v: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = b.nrows();
    let l = b.ncols();
    let mut grad = DMatrix::zeros(n, l);
    for y in ys {
        grad -= y;
    }
    if lambda1 != 0.0 {
        let mut gram = b.transpose() * b;
        for i in 0..l {
            gram[(i, i)] -= n as f64;
        }
        grad += lambda1 * b * gram;
    }
    if lambda2 != 0.0 {
        // 1_{NxN} B = 1 * (column sums), no N x N materialization
        for c in 0..l {
            let s: f64 = b.column(c).sum();
            let add = lambda2 * s;
            for r in 0..n {
                grad[(r, c)] += add;
            }
        }
    }
    if rho != 0.0 {
        grad -= rho * v;
    }
    grad
}

fn clamp_unit(m: &mut DMatrix<f64>) {
    for v in m.iter_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
}

/// sign with sign(0) := +1.
pub fn snap_sign(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| if v < 0.0 { -1.0 } else { 1.0 })
}

#[derive(Debug, Clone)]
pub struct EpmOutcome {
    /// Exactly binary code matrix.
    pub codes: DMatrix<f64>,
    /// Relaxed (pre-snap) values.
    pub relaxed: DMatrix<f64>,
    pub outer_iterations: usize,
    /// False when the budget ran out before entries reached the binary
    /// tolerance; `codes` is the best-effort snap in that case.
    pub converged: bool,
}

/// Exact-penalty solve of min L(B) over B in {-1,+1}^{N x L}.
pub fn update_codes_epm(
    ys: &[DMatrix<f64>],
    lambda1: f64,
    lambda2: f64,
    config: &EpmConfig,
    b_init: Option<&DMatrix<f64>>,
) -> Result<EpmOutcome> {
    if ys.is_empty() {
        return Err(Error::invalid("at least one embedding required"));
    }
    let n = ys[0].nrows();
    let l = ys[0].ncols();
    for y in ys {
        if y.nrows() != n || y.ncols() != l {
            return Err(Error::dims("embeddings have differing shapes"));
        }
    }
    let nl = (n * l) as f64;
    let mut b = match b_init {
        Some(init) => {
            check_same_dims(init, &ys[0])?;
            let mut b = init.clone();
            clamp_unit(&mut b);
            b
        }
        None => DMatrix::zeros(n, l),
    };
    if b.norm() == 0.0 {
        // break the B = 0 saddle (zero gradient, zero auxiliary direction)
        // with a tiny column-balanced alternating pattern
        for i in 0..n {
            for j in 0..l {
                b[(i, j)] = if (i + j) % 2 == 0 { 1e-3 } else { -1e-3 };
            }
        }
    }
    let mut v = DMatrix::zeros(n, l);
    let mut rho = config.rho0;
    let mut converged = false;
    let mut outer_iterations = 0;
    for _ in 0..config.outer_max_iters {
        outer_iterations += 1;
        // projected gradient descent on Q at fixed (rho, V), monotone via
        // step halving
        let mut q = q_loss(&b, ys, lambda1, lambda2, rho, &v);
        for _ in 0..config.inner_max_iters {
            let grad = grad_penalized(&b, ys, lambda1, lambda2, rho, &v);
            let mut step = config.eta;
            let mut accepted = false;
            for _ in 0..25 {
                let mut candidate = &b - step * &grad;
                clamp_unit(&mut candidate);
                let q_new = q_loss(&candidate, ys, lambda1, lambda2, rho, &v);
                if q_new <= q {
                    let improvement = q - q_new;
                    b = candidate;
                    q = q_new;
                    accepted = improvement > 1e-12 * (1.0 + q.abs());
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        // closed-form auxiliary update onto the sqrt(NL) sphere
        let norm = b.norm();
        if norm > 0.0 {
            v = &b * (nl.sqrt() / norm);
        } else {
            v.fill(0.0);
        }
        rho *= config.sigma_growth;
        let max_gap = b.iter().map(|x| 1.0 - x.abs()).fold(0.0f64, f64::max);
        if max_gap < config.binary_tol {
            converged = true;
            break;
        }
    }
    let relaxed = b.clone();
    let codes = snap_sign(&b);
    Ok(EpmOutcome {
        codes,
        relaxed,
        outer_iterations,
        converged,
    })
}

/// Augmented Lagrangian value for one modality embedding:
/// J(B, Y) - Tr(Gamma^T Phi) + mu/2 ||Phi||_F^2, Phi = Y^T Y - N I.
pub fn al_loss(
    y: &DMatrix<f64>,
    b: &DMatrix<f64>,
    lap: &DMatrix<f64>,
    alpha: f64,
    gamma: &DMatrix<f64>,
    mu: f64,
) -> Result<f64> {
    check_same_dims(b, y)?;
    let phi = constraint_residual(y);
    Ok(modality_objective(b, y, lap, alpha)? - gamma.dot(&phi) + mu / 2.0 * phi.norm_squared())
}

/// Gradient of `al_loss` in Y:
/// 2 L Y - alpha B - Y (Gamma + Gamma^T) + 2 mu Y Phi.
pub fn al_grad(
    y: &DMatrix<f64>,
    b: &DMatrix<f64>,
    lap: &DMatrix<f64>,
    alpha: f64,
    gamma: &DMatrix<f64>,
    mu: f64,
) -> Result<DMatrix<f64>> {
    check_same_dims(b, y)?;
    Ok(al_grad_with(y, b, &(lap * y), alpha, gamma, mu))
}

fn al_grad_with(
    y: &DMatrix<f64>,
    b: &DMatrix<f64>,
    lap_y: &DMatrix<f64>,
    alpha: f64,
    gamma: &DMatrix<f64>,
    mu: f64,
) -> DMatrix<f64> {
    let phi = constraint_residual(y);
    2.0 * lap_y - alpha * b - y * (gamma + gamma.transpose()) + 2.0 * mu * y * phi
}

fn constraint_residual(y: &DMatrix<f64>) -> DMatrix<f64> {
    let n = y.nrows() as f64;
    let mut phi = y.transpose() * y;
    for i in 0..phi.nrows() {
        phi[(i, i)] -= n;
    }
    phi
}

#[derive(Debug, Clone)]
pub struct AlOutcome {
    pub y: DMatrix<f64>,
    pub multiplier_updates: usize,
    /// Final ||Y^T Y - N I||_F.
    pub residual: f64,
    /// False when the feasibility target was not reached within t_max.
    pub feasible: bool,
}

/// Augmented Lagrangian solve of the orthogonality-constrained embedding
/// update, warm-started from `y_init` (dense-Laplacian entry point).
pub fn update_embedding_al(
    lap: &DMatrix<f64>,
    b: &DMatrix<f64>,
    alpha: f64,
    y_init: &DMatrix<f64>,
    config: &AlConfig,
) -> Result<AlOutcome> {
    update_embedding_al_with(|y| lap * y, b, alpha, y_init, config)
}

/// Same solve with the Laplacian supplied as a linear operator, so callers
/// holding the anchor factorization avoid the dense product.
pub fn update_embedding_al_with(
    lap_apply: impl Fn(&DMatrix<f64>) -> DMatrix<f64>,
    b: &DMatrix<f64>,
    alpha: f64,
    y_init: &DMatrix<f64>,
    config: &AlConfig,
) -> Result<AlOutcome> {
    check_same_dims(b, y_init)?;
    let n = y_init.nrows() as f64;
    let mut y = y_init.clone();
    let feasibility_tol = config.feasibility_tol_factor * n;

    // multiplier init from the stationarity condition at a feasible point,
    // symmetrized to match the symmetric constraint residual
    let gram = y.transpose() * &y;
    let gram_inv = gram
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::invalid("initial embedding has a singular Gram matrix"))?;
    let raw = gram_inv * y.transpose() * (lap_apply(&y) - (alpha / 2.0) * b);
    let mut gamma = (&raw + raw.transpose()) * 0.5;

    let mut mu = config.mu0;
    let mut j_prev = modality_objective_with(b, &y, &lap_apply(&y), alpha);
    let mut residual = constraint_residual(&y).norm();
    let mut feasible = residual <= feasibility_tol;
    let mut multiplier_updates = 0;
    let mut step = 0.1;

    for _ in 0..config.t_max {
        multiplier_updates += 1;
        // inner unconstrained descent with backtracking line search
        let loss = |y: &DMatrix<f64>| {
            let phi = constraint_residual(y);
            modality_objective_with(b, y, &lap_apply(y), alpha) - gamma.dot(&phi)
                + mu / 2.0 * phi.norm_squared()
        };
        let mut current = loss(&y);
        for _ in 0..config.inner_max_iters {
            let grad = al_grad_with(&y, b, &lap_apply(&y), alpha, &gamma, mu);
            let mut trial = step;
            let mut moved = false;
            for _ in 0..40 {
                let candidate = &y - trial * &grad;
                let cand_loss = loss(&candidate);
                if cand_loss < current {
                    let improvement = current - cand_loss;
                    y = candidate;
                    current = cand_loss;
                    step = (trial * 1.5).min(1.0);
                    moved = improvement > 1e-10 * (1.0 + current.abs());
                    break;
                }
                trial *= 0.5;
            }
            if !moved {
                step = (step * 0.5).max(1e-12);
                break;
            }
        }
        let phi = constraint_residual(&y);
        residual = phi.norm();
        feasible = residual <= feasibility_tol;
        gamma -= mu * &phi;
        let j_new = modality_objective_with(b, &y, &lap_apply(&y), alpha);
        if (j_new - j_prev).abs() < config.eps && feasible {
            j_prev = j_new;
            break;
        }
        j_prev = j_new;
        mu *= config.mu_growth;
    }
    let _ = j_prev;
    Ok(AlOutcome {
        y,
        multiplier_updates,
        residual,
        feasible,
    })
}

/// Full stage-1 alternation: spectral initialization, then alternating code
/// and embedding updates until the total objective stalls.
pub fn solve_joint_codes(
    graphs: &AnchorGraph,
    config: &Stage1Config,
) -> Result<(BinaryCodes, Vec<SpectralEmbedding>)> {
    config.validate()?;
    let n = graphs.instance_count();
    let l = config.code_length;
    let (embeddings, _) = spectral::init_embeddings(graphs, l, config.init_max_rounds, None)?;
    let mut ys: Vec<DMatrix<f64>> = embeddings.into_iter().map(|e| e.y).collect();

    let mut trace: Vec<OuterTrace> = Vec::new();
    let mut warm: Option<DMatrix<f64>> = None;
    let mut codes = DMatrix::zeros(n, l);
    let mut relaxed = DMatrix::zeros(n, l);
    let mut epm_converged = true;
    let mut al_feasible = true;
    let scale = (n * l) as f64;

    for iteration in 0..config.outer_max_iters {
        let epm = update_codes_epm(
            &ys,
            config.lambda1,
            config.lambda2,
            &config.epm,
            warm.as_ref(),
        )?;
        epm_converged &= epm.converged;
        if config.warm_start_codes {
            warm = Some(epm.relaxed.clone());
        }
        codes = epm.codes;
        relaxed = epm.relaxed;

        let mut al_residuals = Vec::with_capacity(ys.len());
        for (m, g) in graphs.modalities.iter().enumerate() {
            let outcome = update_embedding_al_with(
                |y| g.laplacian_times(y),
                &codes,
                config.alpha,
                &ys[m],
                &config.al,
            )?;
            al_feasible &= outcome.feasible;
            al_residuals.push(outcome.residual);
            ys[m] = outcome.y;
        }

        let per_modality: Vec<f64> = graphs
            .modalities
            .iter()
            .zip(&ys)
            .map(|(g, y)| modality_objective_with(&codes, y, &g.laplacian_times(y), config.alpha))
            .collect();
        let objective: f64 = per_modality.iter().sum();
        trace.push(OuterTrace {
            iteration,
            objective,
            per_modality,
            epm_iterations: epm.outer_iterations,
            al_residuals,
        });
        if trace.len() >= 2 {
            let prev = trace[trace.len() - 2].objective;
            if (prev - objective).abs() < config.outer_tol * scale {
                break;
            }
        }
    }

    let final_embeddings = ys.into_iter().map(SpectralEmbedding::new).collect();
    Ok((
        BinaryCodes {
            codes,
            relaxed,
            trace,
            epm_converged,
            al_feasible,
        },
        final_embeddings,
    ))
}

/// Write codes as one 0/1 line per instance (-1 maps to 0).
pub fn write_codes_text(path: &Path, codes: &DMatrix<f64>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut w = std::io::BufWriter::new(file);
    for i in 0..codes.nrows() {
        let line: String = (0..codes.ncols())
            .map(|j| if codes[(i, j)] > 0.0 { '1' } else { '0' })
            .collect();
        writeln!(w, "{line}").map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}

pub fn read_codes_text(path: &Path) -> Result<DMatrix<f64>> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let lines: Vec<&str> = content.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "empty codes file".into(),
        });
    }
    let l = lines[0].trim().len();
    let mut m = DMatrix::zeros(lines.len(), l);
    for (i, line) in lines.iter().enumerate() {
        let bits = line.trim();
        if bits.len() != l {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "inconsistent code length".into(),
            });
        }
        for (j, ch) in bits.chars().enumerate() {
            m[(i, j)] = match ch {
                '1' => 1.0,
                '0' => -1.0,
                _ => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        message: format!("bad bit {ch:?}"),
                    })
                }
            };
        }
    }
    Ok(m)
}

/// Objective trace CSV: iteration, total objective, per-modality terms,
/// penalty-solver iterations, per-modality constraint residuals.
pub fn write_trace_csv(path: &Path, trace: &[OuterTrace]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut w = std::io::BufWriter::new(file);
    let modalities = trace.first().map(|t| t.per_modality.len()).unwrap_or(0);
    let mut header = vec!["iteration".to_string(), "objective".to_string()];
    for m in 0..modalities {
        header.push(format!("objective_m{m}"));
    }
    header.push("epm_iterations".to_string());
    for m in 0..modalities {
        header.push(format!("al_residual_m{m}"));
    }
    writeln!(w, "{}", header.join(",")).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    for t in trace {
        let mut row = vec![t.iteration.to_string(), format!("{}", t.objective)];
        for v in &t.per_modality {
            row.push(format!("{v}"));
        }
        row.push(t.epm_iterations.to_string());
        for v in &t.al_residuals {
            row.push(format!("{v}"));
        }
        writeln!(w, "{}", row.join(",")).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}
