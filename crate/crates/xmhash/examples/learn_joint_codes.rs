//! Stage 1 in isolation: spectral initialization with cross-modality
//! rotation alignment, then alternating exact-penalty code updates and
//! augmented-Lagrangian embedding updates.
//!
//! Run: cargo run --example learn_joint_codes

use xmhash::anchor_graph::{build_graph, learn_joint_anchors, Sigma};
use xmhash::codes::{solve_joint_codes, Stage1Config};
use xmhash::dataset::{synthesize_clustered, unit_variance_normalize};

fn main() -> xmhash::Result<()> {
    let ds = synthesize_clustered(3, 40, &[8, 6], 0.2, 11)?;
    let ds = unit_variance_normalize(&ds)?;
    let anchors = learn_joint_anchors(&ds, 16, 11, 100)?;
    let graph = build_graph(&ds, &anchors, 3, 2, Sigma::Auto, Sigma::Auto)?;

    let config = Stage1Config {
        code_length: 8,
        ..Stage1Config::default()
    };
    let (binary, embeddings) = solve_joint_codes(&graph, &config)?;

    println!(
        "codes: {} x {}, binary solver converged: {}, embeddings feasible: {}",
        binary.codes.nrows(),
        binary.codes.ncols(),
        binary.epm_converged,
        binary.al_feasible
    );
    for t in &binary.trace {
        println!(
            "  outer {}: objective {:.4}, code-solver iters {}, max residual {:.2e}",
            t.iteration,
            t.objective,
            t.epm_iterations,
            t.al_residuals.iter().cloned().fold(0.0f64, f64::max)
        );
    }
    for (m, e) in embeddings.iter().enumerate() {
        println!(
            "  embedding {m}: orthogonality residual {:.3e}",
            e.orthogonality_residual
        );
    }

    // codes of same-cluster instances should agree on most bits
    let labels = ds.labels().unwrap();
    let n = binary.codes.nrows();
    let l = binary.codes.ncols() as f64;
    let (mut within, mut across, mut wc, mut ac) = (0.0, 0.0, 0usize, 0usize);
    for i in 0..n {
        for j in (i + 1)..n {
            let agree = (0..binary.codes.ncols())
                .filter(|&c| binary.codes[(i, c)] == binary.codes[(j, c)])
                .count() as f64
                / l;
            if labels[i] == labels[j] {
                within += agree;
                wc += 1;
            } else {
                across += agree;
                ac += 1;
            }
        }
    }
    println!(
        "mean bit agreement: within-cluster {:.3}, across-cluster {:.3}",
        within / wc as f64,
        across / ac as f64
    );
    Ok(())
}
