//! Thin CLI over the staged pipeline. Exit codes: 0 success, 2 config
//! errors, 3 stage failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use xmhash::error::Error;
use xmhash::pipeline::{self, PipelineConfig};

#[derive(Parser)]
#[command(name = "xmhash", version, about = "Two-stage cross-modal hashing on anchor graphs")]
struct Cli {
    /// TOML config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Artifact directory shared by all stages.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker thread count; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Shrink the anchor budget for a fast desk-scale run.
    #[arg(long, global = true)]
    desk_scale: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run synth (when configured), graph, codes, train, and eval in order.
    Run,
    /// Generate the configured synthetic dataset.
    Synth,
    /// Learn joint anchors and build the per-modality anchor graphs.
    Graph,
    /// Solve for the joint binary codes (stage 1).
    Codes,
    /// Fit the per-modality hash functions (stage 2).
    Train,
    /// Score cross-modal retrieval on a query/database split.
    Eval,
}

fn run(cli: &Cli) -> Result<(), Error> {
    if let Some(threads) = cli.threads {
        // a pool may already exist in tests; the stricter setting wins there
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let mut config = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.override_seed(seed);
    }
    if cli.desk_scale {
        config.apply_desk_scale();
    }
    config.validate()?;
    match cli.command {
        Command::Run => {
            let results = pipeline::run_pipeline(&cli.out, &config)?;
            for r in &results {
                println!(
                    "{}: mAP {:.4}, prec@r<={} {:.4} ({} queries, {} skipped)",
                    r.task, r.map, r.radius, r.prec_at_radius, r.num_queries, r.skipped_queries
                );
            }
        }
        Command::Synth => {
            pipeline::run_synth(&cli.out, &config)?;
            println!("synthetic dataset written to {}", cli.out.display());
        }
        Command::Graph => {
            let graph = pipeline::run_graph(&cli.out, &config)?;
            println!(
                "anchor graph built: {} modalities, {} instances, P={}",
                graph.modality_count(),
                graph.instance_count(),
                config.graph.anchors
            );
        }
        Command::Codes => {
            let binary = pipeline::run_codes(&cli.out, &config)?;
            println!(
                "codes solved: {} x {}, {} outer iterations, binary solver converged: {}",
                binary.codes.nrows(),
                binary.codes.ncols(),
                binary.trace.len(),
                binary.epm_converged
            );
        }
        Command::Train => {
            let models = pipeline::run_train(&cli.out, &config)?;
            println!("trained {} hash models", models.len());
        }
        Command::Eval => {
            let results = pipeline::run_eval(&cli.out, &config)?;
            for r in &results {
                println!(
                    "{}: mAP {:.4}, prec@r<={} {:.4} ({} queries, {} skipped)",
                    r.task, r.map, r.radius, r.prec_at_radius, r.num_queries, r.skipped_queries
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source: Option<&dyn std::error::Error> = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            let config_error = matches!(
                e,
                Error::Config(_) | Error::InvalidArgument { .. }
            );
            if config_error {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
