//! Hamming-space retrieval metrics on hand-built codes: mean average
//! precision and precision within a fixed Hamming radius, for every ordered
//! cross-modal task.
//!
//! Run: cargo run --example evaluate_retrieval

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xmhash::retrieval::{evaluate_all_tasks, PackedCodes};

fn main() -> xmhash::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let l = 16;
    let clusters = 3;
    let per_cluster = 30;
    let n = clusters * per_cluster;

    // cluster prototype codes, with per-modality bit noise
    let prototypes: Vec<Vec<f64>> = (0..clusters)
        .map(|_| (0..l).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect())
        .collect();
    let labels: Vec<Vec<u32>> = (0..n).map(|i| vec![(i / per_cluster) as u32]).collect();
    let mut noisy = |flip_prob: f64| {
        let m = DMatrix::from_fn(n, l, |i, j| {
            let v = prototypes[i / per_cluster][j];
            if rng.gen::<f64>() < flip_prob {
                -v
            } else {
                v
            }
        });
        PackedCodes::pack(&m)
    };
    let codes_m0 = noisy(0.05);
    let codes_m1 = noisy(0.10);

    let results = evaluate_all_tasks(
        &[codes_m0.clone(), codes_m1.clone()],
        &[codes_m0, codes_m1],
        &labels,
        &labels,
        2,
    )?;
    for r in &results {
        println!(
            "{}: mAP {:.4} (prior {:.4}), prec@r<={} {:.4}, {} queries",
            r.task, r.map, r.label_prior, r.radius, r.prec_at_radius, r.num_queries
        );
    }
    Ok(())
}
