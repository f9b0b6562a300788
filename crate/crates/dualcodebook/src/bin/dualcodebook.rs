//! Command-line front end: synthesize datasets, train, evaluate, ablate,
//! complete single clouds, export codebook statistics, and verify gradients.
//!
//! Every subcommand is deterministic given its seed when run single-threaded
//! (`--threads 1` where the flag exists). Exit codes are stable so scripts can
//! branch on failure class: 0 success, 2 configuration/shape error, 3 data
//! error, 4 numeric error.

use clap::{Parser, Subcommand};
use dualcodebook::data::{generate_dataset, Dataset, ShapeKind, Split};
use dualcodebook::harness::{
    codebook_stats, complete_file, evaluate_model, gradcheck_model, load_reference_clouds,
    manifest_digest, run_ablation, stats_csv, stats_svg, train, write_json, write_text, Checkpoint,
    Sample, F_SCORE_TAU, GRADCHECK_EPS, GRADCHECK_SAMPLES, GRADCHECK_TOL,
};
use dualcodebook::model::ModelConfig;
use dualcodebook::{Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "dualcodebook",
    version,
    about = "Dual-codebook point-cloud completion: data synthesis, training, evaluation, ablation, and reporting."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of partial/complete cloud pairs.
    GenData {
        /// Directory to create (train/, test/, manifest.json).
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Master seed; every cloud derives an independent stream from it.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Comma-separated shape categories (default: all five).
        #[arg(long, value_delimiter = ',', value_name = "LIST")]
        categories: Vec<ShapeKind>,
        /// Complete clouds per category; one fifth (at least one) is held out.
        #[arg(long, default_value_t = 20, value_name = "N")]
        per_category: usize,
    },
    /// Train a model from a JSON config on a generated dataset.
    Train {
        /// Model configuration (JSON with every field; unknown keys rejected).
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        /// Dataset directory produced by gen-data.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Checkpoint path to write.
        #[arg(long, value_name = "CKPT")]
        out: PathBuf,
        /// Worker threads for the per-batch gradient passes (default: all cores).
        #[arg(long, value_name = "N")]
        threads: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset's held-out split.
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        /// Dataset directory; metrics run over its test split.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Optional directory of reference .xyz clouds for the MMD column.
        #[arg(long, value_name = "DIR")]
        refs: Option<PathBuf>,
        /// Optional config to cross-check; the checkpoint's embedded config
        /// wins on conflict, with a warning.
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// Optional path for the JSON report (the table always prints).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Train and evaluate all six codebook ablation variants (A-F).
    Ablate {
        /// Base model configuration; each variant overrides only the toggles.
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        /// Dataset directory produced by gen-data.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Output directory for per-variant checkpoints and the combined table.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Worker threads for the per-batch gradient passes (default: all cores).
        #[arg(long, value_name = "N")]
        threads: Option<usize>,
    },
    /// Complete a single partial cloud file with a trained checkpoint.
    Complete {
        /// Checkpoint to run.
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        /// Partial input cloud (.xyz, one "x y z" triple per line).
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        /// Where to write the dense completion (.xyz).
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Optionally also write the coarse sketch (.xyz).
        #[arg(long, value_name = "FILE")]
        coarse: Option<PathBuf>,
    },
    /// Export per-dimension histograms and usage counters for the codebooks.
    CodebookStats {
        /// Checkpoint to inspect (must have at least one codebook).
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        /// Output directory for CSV, SVG, and JSON reports.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Comma-separated code dimensions to plot (default: first eight).
        #[arg(long, value_delimiter = ',', value_name = "LIST")]
        dims: Vec<usize>,
    },
    /// Verify analytic gradients of the full objective against finite differences.
    Gradcheck {
        /// Model configuration to check at a fresh initialization.
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        /// Central-difference step.
        #[arg(long, default_value_t = GRADCHECK_EPS)]
        eps: f64,
        /// Entries probed per parameter tensor.
        #[arg(long, default_value_t = GRADCHECK_SAMPLES, value_name = "N")]
        samples: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { out, seed, categories, per_category } => {
            let categories = if categories.is_empty() {
                ShapeKind::ALL.to_vec()
            } else {
                categories
            };
            let manifest = generate_dataset(&out, seed, &categories, per_category)?;
            let train_n = manifest.entries.iter().filter(|e| e.split == Split::Train).count();
            let test_n = manifest.entries.len() - train_n;
            println!(
                "wrote {train_n} train + {test_n} test pairs across {} categories to {}",
                manifest.categories.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train { config, data, out, threads } => {
            let config = ModelConfig::load(&config)?;
            let samples = load_samples(&data, Split::Train)?;
            println!(
                "training on {} clouds for {} epochs (config {})",
                samples.len(),
                config.epochs,
                config.fingerprint()
            );
            let outcome = train(&config, &samples, threads, |log| println!("{}", log.line()))?;
            let epoch = outcome.logs.len();
            let ckpt =
                Checkpoint::from_model(&outcome.model, epoch, Some(outcome.optimizer), Some(outcome.rng));
            ckpt.save(&out)?;
            println!("saved checkpoint to {}", out.display());
            Ok(())
        }
        Command::Eval { ckpt, data, refs, config, out } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            if let Some(path) = config {
                let cli_config = ModelConfig::load(&path)?;
                if cli_config != ckpt.config {
                    eprintln!(
                        "warning: {} (fingerprint {}) conflicts with the checkpoint's embedded config (fingerprint {}); using the checkpoint's",
                        path.display(),
                        cli_config.fingerprint(),
                        ckpt.config.fingerprint()
                    );
                }
            }
            let model = ckpt.to_model()?;
            let dataset = Dataset::load(&data)?;
            let entries = dataset.split(Split::Test);
            let references = refs.as_deref().map(load_reference_clouds).transpose()?;
            let digest = manifest_digest(&data)?;
            let report =
                evaluate_model(&model, &entries, F_SCORE_TAU, references.as_deref(), Some(digest))?;
            print!("{}", report.text_table());
            if let Some(path) = out {
                write_json(&path, &report)?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Ablate { config, data, out, threads } => {
            let base = ModelConfig::load(&config)?;
            let train_samples = load_samples(&data, Split::Train)?;
            let dataset = Dataset::load(&data)?;
            let test_entries = dataset.split(Split::Test);
            std::fs::create_dir_all(&out)
                .map_err(|e| Error::data(format!("cannot create {}: {e}", out.display())))?;
            let report = run_ablation(&base, &train_samples, &test_entries, threads, |variant, outcome, eval| {
                let epoch = outcome.logs.len();
                let ckpt = Checkpoint::from_model(&outcome.model, epoch, None, None);
                ckpt.save(&out.join(format!("{variant}.ckpt.json")))?;
                write_json(&out.join(format!("{variant}.eval.json")), eval)?;
                println!(
                    "variant {variant} done: test cd_l2x1e3 {:.4}, f-score {:.4}",
                    eval.mean.cd_l2 * 1e3,
                    eval.mean.f_score
                );
                Ok(())
            })?;
            let table = report.text_table();
            write_text(&out.join("ablation.txt"), &table)?;
            write_json(&out.join("ablation.json"), &report)?;
            print!("{table}");
            println!("wrote per-variant checkpoints and the combined table to {}", out.display());
            Ok(())
        }
        Command::Complete { ckpt, input, out, coarse } => {
            let model = Checkpoint::load(&ckpt)?.to_model()?;
            let n = complete_file(&model, &input, &out, coarse.as_deref())?;
            println!("completed {} -> {} points in {}", input.display(), n, out.display());
            if let Some(path) = coarse {
                println!(
                    "coarse sketch: {} points in {}",
                    model.config().coarse_points,
                    path.display()
                );
            }
            Ok(())
        }
        Command::CodebookStats { ckpt, out, dims } => {
            let model = Checkpoint::load(&ckpt)?.to_model()?;
            let dims = if dims.is_empty() {
                (0..model.config().code_dim.min(8)).collect()
            } else {
                dims
            };
            let stats = codebook_stats(&model, &dims)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| Error::data(format!("cannot create {}: {e}", out.display())))?;
            write_text(&out.join("histograms.csv"), &stats_csv(&stats))?;
            write_text(&out.join("histograms.svg"), &stats_svg(&stats))?;
            write_json(&out.join("stats.json"), &stats)?;
            for d in &stats.dims {
                match d.tv {
                    Some(tv) => println!("dim {}: range [{:.4}, {:.4}], site discrepancy (total variation) {tv:.4}", d.dim, d.lo, d.hi),
                    None => println!("dim {}: range [{:.4}, {:.4}], single site", d.dim, d.lo, d.hi),
                }
            }
            println!("wrote histograms.csv, histograms.svg, stats.json to {}", out.display());
            Ok(())
        }
        Command::Gradcheck { config, eps, samples } => {
            let config = ModelConfig::load(&config)?;
            let report = gradcheck_model(&config, samples, eps, GRADCHECK_TOL)?;
            println!(
                "checked {} of {} planned entries over {} tensors ({} kinks skipped) in {:.1}s",
                report.entries_checked,
                report.entries_planned,
                report.tensors,
                report.kinks_skipped,
                report.elapsed_seconds
            );
            match &report.worst {
                Some((name, idx)) => println!(
                    "max relative error {:.3e} at {name}[{idx}] (tolerance {:.1e})",
                    report.max_rel_err, report.tolerance
                ),
                None => println!("no comparable entries (all probes hit kinks)"),
            }
            if report.passed {
                println!("gradcheck passed");
                Ok(())
            } else {
                Err(Error::numeric(format!(
                    "gradcheck failed: max relative error {:.3e} exceeds tolerance {:.1e}",
                    report.max_rel_err, report.tolerance
                )))
            }
        }
    }
}

/// Loads one split of a dataset as owned training samples.
fn load_samples(dir: &Path, split: Split) -> Result<Vec<Sample>> {
    let dataset = Dataset::load(dir)?;
    let samples: Vec<Sample> = dataset
        .split(split)
        .into_iter()
        .map(|e| (e.partial.clone(), e.gt.clone()))
        .collect();
    if samples.is_empty() {
        return Err(Error::data(format!(
            "dataset {} has no {split:?} entries",
            dir.display()
        )));
    }
    Ok(samples)
}
