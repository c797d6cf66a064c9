//! Stage 2 in isolation: fit per-modality hash functions (linear here) to a
//! given code matrix, then encode out-of-sample points.
//!
//! Run: cargo run --example train_hash_functions

use nalgebra::DMatrix;
use xmhash::dataset::{synthesize_clustered, unit_variance_normalize};
use xmhash::hashfn::{encode, train_hash_models, Architecture, Stage2Config};

fn main() -> xmhash::Result<()> {
    let ds = synthesize_clustered(2, 50, &[6, 4], 0.1, 13)?;
    let ds = unit_variance_normalize(&ds)?;
    let labels = ds.labels().unwrap().to_vec();

    // stand-in codes: one bit per cluster sign, rest alternating — in the
    // real pipeline these come from the stage-1 solver
    let l = 8;
    let codes = DMatrix::from_fn(ds.instance_count(), l, |i, j| {
        let cluster = if labels[i][0] == 0 { 1.0 } else { -1.0 };
        if j % 2 == 0 {
            cluster
        } else {
            -cluster
        }
    });

    let config = Stage2Config {
        epochs: 300,
        batch_size: 32,
        learning_rate: 1e-5,
        ..Stage2Config::default()
    };
    let (models, report) = train_hash_models(&ds, &codes, &Architecture::Linear, &config)?;
    println!(
        "trained {} models, first-epoch loss {:.1}, last-epoch loss {:.1}",
        models.len(),
        report.epoch_losses.first().unwrap(),
        report.epoch_losses.last().unwrap()
    );

    for (m, model) in models.iter().enumerate() {
        let predicted = encode(model, ds.modality(m))?;
        let agree = predicted
            .iter()
            .zip(codes.iter())
            .filter(|(a, b)| a == b)
            .count();
        println!(
            "modality {m}: {agree}/{} bits reproduced",
            codes.nrows() * codes.ncols()
        );
    }
    Ok(())
}
