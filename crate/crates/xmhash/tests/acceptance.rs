//! Acceptance gate: one test per primary acceptance criterion, each ending in
//! a single PASS line with the measured quantities.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xmhash::anchor_graph::{build_graph, learn_joint_anchors, AnchorGraph, Sigma};
use xmhash::codes::{
    penalized_loss, snap_sign, update_codes_epm, update_embedding_al, AlConfig, EpmConfig,
};
use xmhash::dataset::{synthesize_clustered, unit_variance_normalize};
use xmhash::hashfn::{batch_param_grads, stage2_loss, Architecture, HashModel, Stage2Config};
use xmhash::pipeline::{run_pipeline, PipelineConfig, SyntheticConfig};
use xmhash::spectral::{init_embeddings, procrustes, smallest_positive_eigenpairs};

fn random_graph(rng: &mut ChaCha8Rng, n_min: usize, n_max: usize) -> AnchorGraph {
    let m = rng.gen_range(1..=3usize);
    let clusters = rng.gen_range(2..=4usize);
    let per = (rng.gen_range(n_min..=n_max) / clusters).max(4);
    let dims: Vec<usize> = (0..m).map(|_| rng.gen_range(3..=8)).collect();
    let spread = 0.1 + rng.gen::<f64>() * 0.6;
    let seed = rng.gen::<u64>();
    let ds = synthesize_clustered(clusters, per, &dims, spread, seed).unwrap();
    let ds = unit_variance_normalize(&ds).unwrap();
    let n = ds.instance_count();
    let p = (n / 4).clamp(6, 24);
    let anchors = learn_joint_anchors(&ds, p, seed, 60).unwrap();
    build_graph(&ds, &anchors, 3, 2, Sigma::Auto, Sigma::Auto).unwrap()
}

fn random_orthogonal(l: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(l, l, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
    g.qr().q()
}

/// Criterion 1: anchor-graph invariants on 50 random synthetic datasets.
#[test]
fn criterion_1_graph_invariants() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xAC01);
    for case in 0..50 {
        let graph = random_graph(&mut rng, 50, 500);
        for g in &graph.modalities {
            let n = g.affinity.nrows();
            let row_err = (0..n)
                .map(|i| (g.affinity.row(i).sum() - 1.0).abs())
                .fold(0.0f64, f64::max);
            assert!(row_err < 1e-8, "case {case}: A not row-stochastic ({row_err:.2e})");
            let asym = (&g.affinity - g.affinity.transpose()).amax();
            assert!(asym < 1e-8, "case {case}: A not symmetric ({asym:.2e})");
            let ones = DMatrix::from_element(n, 1, 1.0);
            let lap_ones = (&g.laplacian * &ones).amax();
            assert!(lap_ones < 1e-8, "case {case}: Lap*1 != 0 ({lap_ones:.2e})");
            let eigen = g.laplacian.clone().symmetric_eigen();
            let min = eigen.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = eigen.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(min >= -1e-8, "case {case}: Lap not PSD (lambda_min {min:.2e})");
            assert!(max <= 2.0 + 1e-8, "case {case}: spectral radius {max}");
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 30.0, "runtime {elapsed:.1}s exceeds 30s");
    println!("PASS criterion 1: graph invariants on 50 random datasets in {elapsed:.1}s");
}

/// Criterion 2: Procrustes optimality on 200 random matrices.
#[test]
fn criterion_2_procrustes_optimality() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xAC02);
    for case in 0..200 {
        let l = rng.gen_range(1..=8usize);
        let m = DMatrix::from_fn(l, l, |_, _| rng.gen::<f64>() * 4.0 - 2.0);
        let r = procrustes(&m).unwrap();
        let attained = (&m * &r).trace();
        let svd = m.clone().svd(false, false);
        let sigma_sum: f64 = svd.singular_values.iter().sum();
        assert!(
            (attained - sigma_sum).abs() < 1e-8,
            "case {case}: Tr(MR)={attained} vs sum of singular values {sigma_sum}"
        );
        for _ in 0..100 {
            let probe = random_orthogonal(l, &mut rng);
            let probed = (&m * &probe).trace();
            assert!(
                probed <= attained + 1e-8,
                "case {case}: probe beats Procrustes ({probed} > {attained})"
            );
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 5.0, "runtime {elapsed:.1}s exceeds 5s");
    println!("PASS criterion 2: Procrustes optimality on 200 matrices, 100 probes each, in {elapsed:.1}s");
}

/// Criterion 3: alignment objective monotone and bounded; duplicated
/// modalities align almost perfectly.
#[test]
fn criterion_3_initialization_alignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xAC03);
    for case in 0..20 {
        let graph = random_graph(&mut rng, 40, 120);
        let l = rng.gen_range(2..=4usize);
        let (_, rotations) = init_embeddings(&graph, l, 50, None).unwrap();
        for w in rotations.objective_history.windows(2) {
            assert!(
                w[1] >= w[0] - 1e-9,
                "case {case}: objective decreased {} -> {}",
                w[0],
                w[1]
            );
        }
        let m = graph.modality_count();
        let n = graph.instance_count() as f64;
        let bound = (m * (m - 1)) as f64 * n * l as f64;
        assert!(
            rotations.alignment_objective <= bound + 1e-6,
            "case {case}: objective {} above bound {bound}",
            rotations.alignment_objective
        );
    }
    // duplicated-modality alignment
    let base = random_graph(&mut rng, 40, 80);
    let g0 = base.modalities[0].clone();
    let graph = AnchorGraph {
        modalities: vec![g0.clone(), g0],
        k: base.k,
        k_a: base.k_a,
    };
    let l = 3;
    let n = graph.instance_count() as f64;
    let (embeddings, _) = init_embeddings(&graph, l, 100, None).unwrap();
    let correlation = (embeddings[0].y.transpose() * &embeddings[1].y).trace();
    assert!(
        correlation >= 0.999 * n * l as f64,
        "duplicated-modality correlation {correlation} below 0.999*N*L = {}",
        0.999 * n * l as f64
    );
    println!(
        "PASS criterion 3: alignment monotone+bounded on 20 cases; duplicated-modality correlation {:.4}*N*L",
        correlation / (n * l as f64)
    );
}

/// Criterion 4: all three analytic gradients match central finite differences.
#[test]
fn criterion_4_gradient_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xAC04);
    let h = 1e-5;

    // code-update gradient vs FD of the penalized loss + bilinear term
    let mut worst_b: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.gen_range(3..=6usize);
        let l = rng.gen_range(1..=3usize);
        let nl = (n * l) as f64;
        let ys = vec![DMatrix::from_fn(n, l, |_, _| rng.gen::<f64>() * 2.0 - 1.0)];
        let b = DMatrix::from_fn(n, l, |_, _| rng.gen::<f64>() * 1.6 - 0.8);
        let v = DMatrix::from_fn(n, l, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let (l1, l2, rho) = (0.7, 1.3, 0.4);
        let analytic = xmhash::codes::grad_penalized(&b, &ys, l1, l2, rho, &v);
        let scale = analytic.amax().max(1.0);
        let q = |b: &DMatrix<f64>| penalized_loss(b, &ys, l1, l2) + rho * (nl - b.dot(&v));
        for r in 0..n {
            for c in 0..l {
                let mut plus = b.clone();
                let mut minus = b.clone();
                plus[(r, c)] += h;
                minus[(r, c)] -= h;
                let fd = (q(&plus) - q(&minus)) / (2.0 * h);
                worst_b = worst_b.max((analytic[(r, c)] - fd).abs() / scale);
            }
        }
    }
    assert!(worst_b < 1e-4, "code-update gradient rel err {worst_b:.2e}");

    // embedding-update gradient vs FD of the augmented Lagrangian
    let mut worst_y: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.gen_range(3..=6usize);
        let l = rng.gen_range(1..=3usize);
        let sym = {
            let a = DMatrix::from_fn(n, n, |_, _| rng.gen::<f64>());
            &a * a.transpose() / n as f64
        };
        let b = snap_sign(&DMatrix::from_fn(n, l, |_, _| rng.gen::<f64>() - 0.5));
        let y = DMatrix::from_fn(n, l, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let gamma = DMatrix::from_fn(l, l, |_, _| rng.gen::<f64>() - 0.5);
        let (alpha, mu) = (0.8, 0.3);
        let analytic = xmhash::codes::al_grad(&y, &b, &sym, alpha, &gamma, mu).unwrap();
        let scale = analytic.amax().max(1.0);
        for r in 0..n {
            for c in 0..l {
                let mut plus = y.clone();
                let mut minus = y.clone();
                plus[(r, c)] += h;
                minus[(r, c)] -= h;
                let fd = (xmhash::codes::al_loss(&plus, &b, &sym, alpha, &gamma, mu).unwrap()
                    - xmhash::codes::al_loss(&minus, &b, &sym, alpha, &gamma, mu).unwrap())
                    / (2.0 * h);
                worst_y = worst_y.max((analytic[(r, c)] - fd).abs() / scale);
            }
        }
    }
    assert!(worst_y < 1e-4, "embedding gradient rel err {worst_y:.2e}");

    // stage-2 backprop vs FD of the training loss, linear and MLP
    let mut worst_linear: f64 = 0.0;
    let mut worst_mlp: f64 = 0.0;
    for case in 0..20 {
        let arch = if case % 2 == 0 {
            Architecture::Linear
        } else {
            Architecture::Mlp { hidden: vec![4] }
        };
        let n = 5;
        let l = 2;
        let inputs = vec![
            DMatrix::from_fn(n, 3, |_, _| rng.gen::<f64>() * 2.0 - 1.0),
            DMatrix::from_fn(n, 4, |_, _| rng.gen::<f64>() * 2.0 - 1.0),
        ];
        let b = snap_sign(&DMatrix::from_fn(n, l, |_, _| rng.gen::<f64>() - 0.5));
        let config = Stage2Config {
            gamma1: 0.6,
            gamma2: 0.9,
            ..Stage2Config::default()
        };
        let models: Vec<HashModel> = inputs
            .iter()
            .enumerate()
            .map(|(m, x)| HashModel::init(&arch, x.ncols(), l, case * 10 + m as u64))
            .collect();
        let analytic = batch_param_grads(&models, &inputs, &b, &config).unwrap();
        for m in 0..2 {
            let scale = analytic[m]
                .iter()
                .map(|layer| layer.weights.amax().max(layer.bias.amax()))
                .fold(1.0f64, f64::max);
            let eval = |models: &[HashModel]| {
                let outputs: Vec<DMatrix<f64>> = models
                    .iter()
                    .zip(&inputs)
                    .map(|(model, x)| model.forward(x).unwrap())
                    .collect();
                stage2_loss(&outputs, &b, config.gamma1, config.gamma2, true).unwrap()
            };
            for layer_idx in 0..models[m].layers.len() {
                for r in 0..models[m].layers[layer_idx].weights.nrows() {
                    for c in 0..models[m].layers[layer_idx].weights.ncols() {
                        let mut plus = models.clone();
                        let mut minus = models.clone();
                        plus[m].layers[layer_idx].weights[(r, c)] += h;
                        minus[m].layers[layer_idx].weights[(r, c)] -= h;
                        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                        let err =
                            (analytic[m][layer_idx].weights[(r, c)] - fd).abs() / scale;
                        if matches!(arch, Architecture::Linear) {
                            worst_linear = worst_linear.max(err);
                        } else {
                            worst_mlp = worst_mlp.max(err);
                        }
                    }
                }
            }
        }
    }
    assert!(worst_linear < 1e-4, "stage-2 linear gradient rel err {worst_linear:.2e}");
    assert!(worst_mlp < 1e-3, "stage-2 MLP gradient rel err {worst_mlp:.2e}");
    println!(
        "PASS criterion 4: gradient oracles (code {worst_b:.1e}, embedding {worst_y:.1e}, \
         stage-2 linear {worst_linear:.1e}, MLP {worst_mlp:.1e})"
    );
}

/// Criterion 5: exact binarity on 50 random instances; near-optimality on
/// exhaustively enumerable instances.
#[test]
fn criterion_5_epm_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xAC05);
    for case in 0..50 {
        let n = rng.gen_range(4..=64usize);
        let l = rng.gen_range(1..=8usize);
        let ys = vec![DMatrix::from_fn(n, l, |_, _| rng.gen::<f64>() * 4.0 - 2.0)];
        let out = update_codes_epm(&ys, 1.0, 1.0, &EpmConfig::default(), None).unwrap();
        assert!(
            out.codes.iter().all(|&v| v == 1.0 || v == -1.0),
            "case {case}: non-binary entry"
        );
    }
    let mut optima = 0;
    let cases = 20;
    for seed in 0..cases {
        let mut case_rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, l) = if seed % 2 == 0 { (4usize, 3usize) } else { (6, 2) };
        let ys = vec![DMatrix::from_fn(n, l, |_, _| case_rng.gen::<f64>() * 4.0 - 2.0)];
        let out = update_codes_epm(&ys, 1.0, 1.0, &EpmConfig::default(), None).unwrap();
        let attained = penalized_loss(&out.codes, &ys, 1.0, 1.0);
        let mut losses: Vec<f64> = (0..1u32 << (n * l))
            .map(|bits| {
                let b = DMatrix::from_fn(n, l, |i, j| {
                    if bits >> (i * l + j) & 1 == 1 {
                        1.0
                    } else {
                        -1.0
                    }
                });
                penalized_loss(&b, &ys, 1.0, 1.0)
            })
            .collect();
        losses.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = losses.iter().filter(|&&v| v < attained - 1e-9).count();
        assert!(
            rank <= losses.len() / 20,
            "instance {seed}: rank {rank} outside top 5% of {}",
            losses.len()
        );
        if (attained - losses[0]).abs() < 1e-9 {
            optima += 1;
        }
    }
    assert!(
        optima * 100 >= cases as usize * 80,
        "only {optima}/{cases} global optima (< 80%)"
    );
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "runtime {elapsed:.1}s exceeds 60s");
    println!(
        "PASS criterion 5: 50/50 exactly binary; {optima}/{cases} global optima, all in top 5%, in {elapsed:.1}s"
    );
}

/// Criterion 6: embedding update reaches feasibility; alpha=0 matches the
/// eigensolver oracle.
#[test]
fn criterion_6_al_feasibility() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xAC06);
    let config = AlConfig {
        t_max: 80,
        ..AlConfig::default()
    };
    let mut worst_residual_ratio: f64 = 0.0;
    for case in 0..30 {
        let graph = random_graph(&mut rng, 24, 60);
        let g = &graph.modalities[0];
        let n = g.laplacian.nrows() as f64;
        let l = rng.gen_range(1..=3usize);
        let (_, e) = smallest_positive_eigenpairs(&g.laplacian, l, None).unwrap();
        let y0 = e * n.sqrt();
        let b = snap_sign(&DMatrix::from_fn(y0.nrows(), l, |_, _| rng.gen::<f64>() - 0.5));
        let out = update_embedding_al(&g.laplacian, &b, 1.0, &y0, &config).unwrap();
        assert!(
            out.residual <= 1e-3 * n,
            "case {case}: residual {} above 1e-3*N = {}",
            out.residual,
            1e-3 * n
        );
        worst_residual_ratio = worst_residual_ratio.max(out.residual / n);
    }
    // alpha = 0 oracle
    let graph = random_graph(&mut rng, 30, 60);
    let g = &graph.modalities[0];
    let n = g.laplacian.nrows() as f64;
    let l = 2;
    let (values, e) = smallest_positive_eigenpairs(&g.laplacian, l, None).unwrap();
    let y0 = e * n.sqrt();
    let b = snap_sign(&y0);
    let out = update_embedding_al(&g.laplacian, &b, 1e-12, &y0, &config).unwrap();
    let j = xmhash::codes::modality_objective(&b, &out.y, &g.laplacian, 0.0).unwrap();
    let oracle = n * values.iter().sum::<f64>();
    let rel = (j - oracle).abs() / oracle.abs().max(1.0);
    assert!(rel <= 1e-3, "alpha=0 objective {j} vs oracle {oracle} (rel {rel:.2e})");
    println!(
        "PASS criterion 6: feasibility on 30 instances (worst residual {worst_residual_ratio:.2e}*N); \
         alpha=0 oracle rel err {rel:.2e}"
    );
}

fn fixture_config(seed: u64) -> PipelineConfig {
    let mut config = PipelineConfig::default();
    config.seed = seed;
    config.dataset.synthetic = Some(SyntheticConfig {
        clusters: 3,
        per_cluster: 200,
        dims: vec![6, 5],
        spread: 0.15,
        elongation: 1.0,
    });
    config.stage1.code_length = 16;
    config.stage2.optimizer.epochs = 150;
    config.apply_desk_scale();
    config
}

/// Frozen overlapping-elongated-clusters fixture used by the two ablation
/// criteria; small enough that 20 pipeline runs stay fast.
fn ablation_map(seed: u64, k_a: usize, alpha: f64) -> f64 {
    let dir = tempfile::tempdir().unwrap();
    let mut config = PipelineConfig::default();
    config.seed = seed;
    config.dataset.synthetic = Some(SyntheticConfig {
        clusters: 3,
        per_cluster: 50,
        dims: vec![6, 5],
        spread: 0.8,
        elongation: 4.0,
    });
    config.graph.anchors = 16;
    config.graph.k_a = k_a;
    config.stage1.code_length = 8;
    config.stage1.alpha = alpha;
    config.stage2.optimizer.epochs = 150;
    let results = run_pipeline(dir.path(), &config).unwrap();
    results.iter().map(|r| r.map).sum::<f64>() / results.len() as f64
}

/// Criterion 7: end-to-end retrieval quality and runtime on the desk-scale
/// fixture.
#[test]
fn criterion_7_end_to_end_retrieval() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = fixture_config(0);
    let results = run_pipeline(dir.path(), &config).unwrap();
    for r in &results {
        assert!(r.map >= 0.85, "{}: mAP {} below 0.85", r.task, r.map);
        assert!(
            r.map >= 2.0 * r.label_prior,
            "{}: mAP {} below 2x label prior {}",
            r.task,
            r.map,
            r.label_prior
        );
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "runtime {elapsed:.1}s exceeds 2 minutes");
    let min_map = results.iter().map(|r| r.map).fold(f64::INFINITY, f64::min);
    println!(
        "PASS criterion 7: every-task mAP >= {min_map:.4} (prior {:.4}) in {elapsed:.1}s",
        results[0].label_prior
    );
}

/// Criterion 8: the anchor-to-anchor mapping does not hurt mean mAP on the
/// elongated-cluster fixture.
#[test]
fn criterion_8_anchor_mapping_ablation() {
    let seeds = 0..5u64;
    let mean = |k_a: usize| {
        seeds.clone().map(|s| ablation_map(s, k_a, 1.0)).sum::<f64>() / 5.0
    };
    let without = mean(0);
    let with = mean(2);
    assert!(
        with >= without - 1e-12,
        "mean mAP with anchor mapping {with:.4} below {without:.4} without"
    );
    println!(
        "PASS criterion 8: mean mAP {with:.4} with anchor-to-anchor mapping vs {without:.4} without"
    );
}

/// Criterion 9: the alpha sweep peaks at alpha = 1 within one grid step.
#[test]
fn criterion_9_alpha_sensitivity() {
    let grid = [0.1, 1.0, 10.0];
    let means: Vec<f64> = grid
        .iter()
        .map(|&alpha| (0..5u64).map(|s| ablation_map(s, 2, alpha)).sum::<f64>() / 5.0)
        .collect();
    let argmax = means
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0;
    let center = 1; // index of alpha = 1
    assert!(
        (argmax as i64 - center as i64).abs() <= 1,
        "mean mAP peaks at alpha {} ({means:?}), more than one grid step from 1",
        grid[argmax]
    );
    println!(
        "PASS criterion 9: alpha sweep means {:?} peak at alpha {}",
        means
            .iter()
            .map(|m| format!("{m:.4}"))
            .collect::<Vec<_>>(),
        grid[argmax]
    );
}

/// Criterion 10: equal seeds give bit-identical code files and metrics JSON.
#[test]
fn criterion_10_determinism() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let mut config = fixture_config(42);
    config.dataset.synthetic.as_mut().unwrap().per_cluster = 40;
    run_pipeline(dir_a.path(), &config).unwrap();
    run_pipeline(dir_b.path(), &config).unwrap();
    for name in ["codes.txt", "results.json"] {
        let a = std::fs::read(dir_a.path().join(name)).unwrap();
        let b = std::fs::read(dir_b.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between equal-seed runs");
    }
    println!("PASS criterion 10: equal-seed runs produced bit-identical codes.txt and results.json");
}
