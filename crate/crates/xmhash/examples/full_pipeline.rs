//! The whole pipeline through the staged runner: synthetic data, anchor
//! graphs, joint binary codes, hash-function training, and retrieval
//! evaluation, with every artifact written to one directory.
//!
//! Run: cargo run --example full_pipeline

use xmhash::pipeline::{run_pipeline, PipelineConfig, SyntheticConfig};

fn main() -> xmhash::Result<()> {
    let out = std::env::temp_dir().join("xmhash_pipeline_example");
    std::fs::create_dir_all(&out).expect("create output dir");

    let mut config = PipelineConfig::default();
    config.seed = 5;
    config.dataset.synthetic = Some(SyntheticConfig {
        clusters: 3,
        per_cluster: 60,
        dims: vec![10, 8],
        spread: 0.15,
        elongation: 1.0,
    });
    config.stage1.code_length = 16;
    config.apply_desk_scale(); // small anchor budget for a fast run

    let results = run_pipeline(&out, &config)?;
    for r in &results {
        println!(
            "{}: mAP {:.4} (label prior {:.4}), prec@r<={} {:.4}",
            r.task, r.map, r.label_prior, r.radius, r.prec_at_radius
        );
    }
    println!("artifacts in {}", out.display());
    Ok(())
}
