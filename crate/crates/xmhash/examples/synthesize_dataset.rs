//! Generate a paired multi-modal synthetic dataset, normalize it, and save
//! the per-modality feature files plus labels.
//!
//! Run: cargo run --example synthesize_dataset

use xmhash::dataset::{synthesize_clustered_anisotropic, unit_variance_normalize};
use xmhash::io::{self, MatrixFormat};

fn main() -> xmhash::Result<()> {
    let out = std::env::temp_dir().join("xmhash_synth_example");
    std::fs::create_dir_all(&out).expect("create output dir");

    // 3 clusters x 40 instances, two modalities of different width; row i of
    // both modalities describes the same underlying instance
    let ds = synthesize_clustered_anisotropic(3, 40, &[8, 5], 0.2, 1.0, 42)?;
    let ds = unit_variance_normalize(&ds)?;

    for (m, fm) in ds.modalities().iter().enumerate() {
        println!(
            "modality {m}: {} x {}, total variance {:.3}",
            fm.rows(),
            fm.cols(),
            fm.total_variance()
        );
        io::write_matrix(
            &out.join(format!("modality_{m}.csv")),
            fm.as_matrix(),
            MatrixFormat::Csv,
        )?;
    }
    io::write_labels(&out.join("labels.csv"), ds.labels().unwrap())?;
    println!("wrote dataset to {}", out.display());
    Ok(())
}
