//! Command-line entry points: dataset generation, training, evaluation,
//! report comparison, and gradient verification.

use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::metrics::{render_table, MetricsReport};
use crate::synth::{generate_dataset, DatasetSpec};
use crate::train::{evaluate, format_log_csv, train_with, Checkpoint, TrainConfig};
use crate::verify::{run_gradient_suite, DEFAULT_SEEDS, GRAD_TOLERANCE};

#[derive(Parser)]
#[command(
    name = "mapdeblur",
    version,
    about = "Segmentation-prior deblurring testbed: synthetic data, training, metrics"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of regionally blurred images.
    Gen {
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long)]
        count: usize,
        /// Master seed; sample i derives its own seed from it.
        #[arg(long)]
        seed: u64,
        /// Use the harder out-of-distribution parameter ranges.
        #[arg(long)]
        ood: bool,
    },
    /// Train a restoration model and write a checkpoint directory.
    Train {
        /// Dataset directory produced by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Training seed (initialization, sampling, augmentation, dropout).
        #[arg(long)]
        seed: u64,
        /// Feed mask-pooled features to the network.
        #[arg(long = "map-prior")]
        map_prior: bool,
        /// Per-mask dropout probability during training.
        #[arg(long = "dropout-p")]
        dropout_p: Option<f64>,
        /// Mask-feature channels.
        #[arg(long = "s-channels")]
        s_channels: Option<usize>,
        /// Optimization iterations.
        #[arg(long)]
        iters: Option<usize>,
        /// Patches per iteration.
        #[arg(long)]
        batch: Option<usize>,
        /// Square patch side (even, >= 16).
        #[arg(long)]
        patch: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset and write a metrics report.
    Eval {
        /// Dataset directory produced by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory produced by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Confirm the checkpoint consumes mask-pooled features.
        #[arg(long = "map-prior")]
        map_prior: bool,
        /// Where to write the JSON report.
        #[arg(long)]
        report: PathBuf,
    },
    /// Print aggregate metrics from one or more reports side by side.
    Report {
        /// Report JSON files written by `eval`.
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Verify recorded gradients against finite differences.
    Gradcheck,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            out,
            count,
            seed,
            ood,
        } => {
            let spec = if ood {
                DatasetSpec::ood_default()
            } else {
                DatasetSpec::train_default()
            };
            let manifest = generate_dataset(&out, count, &spec, seed)?;
            println!(
                "wrote {} samples ({}x{}) to {}",
                manifest.count,
                manifest.spec.height,
                manifest.spec.width,
                out.display()
            );
            Ok(())
        }
        Command::Train {
            data,
            out,
            seed,
            map_prior,
            dropout_p,
            s_channels,
            iters,
            batch,
            patch,
        } => {
            let defaults = TrainConfig::default();
            let cfg = TrainConfig {
                use_map_prior: map_prior,
                dropout_p: dropout_p.unwrap_or(defaults.dropout_p),
                s_channels: s_channels.unwrap_or(defaults.s_channels),
                iterations: iters.unwrap_or(defaults.iterations),
                batch_size: batch.unwrap_or(defaults.batch_size),
                patch: patch.unwrap_or(defaults.patch),
                seed,
                ..defaults
            };
            cfg.validate()?;
            eprintln!(
                "training {} model: {} input channels",
                if map_prior { "mask-prior" } else { "baseline" },
                cfg.in_channels()
            );
            let total = cfg.iterations;
            let outcome = train_with(&data, &cfg, |row| {
                if row.iter % 100 == 0 || row.iter + 1 == total as u64 {
                    eprintln!(
                        "iter {}/{total} loss {:.6} lr {:.6e}",
                        row.iter, row.loss, row.lr
                    );
                }
            })?;
            outcome.checkpoint.save(&out)?;
            fs::write(out.join("log.csv"), format_log_csv(&outcome.log))?;
            let last = outcome.log.last().expect("iterations >= 1");
            println!(
                "trained {} parameters for {} iterations, final loss {:.6}, checkpoint in {}",
                outcome.checkpoint.param_count(),
                total,
                last.loss,
                out.display()
            );
            Ok(())
        }
        Command::Eval {
            data,
            ckpt,
            map_prior,
            report,
        } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            if checkpoint.config.use_map_prior != map_prior {
                return Err(Error::Contract(if checkpoint.config.use_map_prior {
                    "checkpoint was trained with the mask prior; pass --map-prior".into()
                } else {
                    "checkpoint was trained without the mask prior; drop --map-prior".into()
                }));
            }
            let metrics = evaluate(&checkpoint, &data)?;
            if let Some(parent) = report.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            metrics.save(&report)?;
            let agg = &metrics.aggregate;
            let psnr = if agg.psnr.0.is_finite() {
                format!("{:.3}", agg.psnr.0)
            } else {
                "inf".to_string()
            };
            println!(
                "evaluated {} images: PSNR {psnr} dB, SSIM {:.4}, MCR {:.3} -> {}",
                metrics.per_image.len(),
                agg.ssim,
                agg.mcr,
                report.display()
            );
            Ok(())
        }
        Command::Report { files } => {
            let mut rows = Vec::with_capacity(files.len());
            for file in &files {
                let report = MetricsReport::load(file)?;
                rows.push((file.display().to_string(), report.aggregate));
            }
            print!("{}", render_table(&rows));
            Ok(())
        }
        Command::Gradcheck => {
            let results = run_gradient_suite(&DEFAULT_SEEDS)?;
            let mut failures = 0;
            for r in &results {
                println!(
                    "{} seed {}: max rel err {:.3e} [{}]",
                    r.name,
                    r.seed,
                    r.max_rel_err,
                    if r.passed() { "ok" } else { "FAIL" }
                );
                if !r.passed() {
                    failures += 1;
                }
            }
            if failures > 0 {
                return Err(Error::Contract(format!(
                    "{failures} of {} gradient checks exceeded {GRAD_TOLERANCE:e}",
                    results.len()
                )));
            }
            println!(
                "all {} gradient checks within {GRAD_TOLERANCE:e}",
                results.len()
            );
            Ok(())
        }
    }
}
