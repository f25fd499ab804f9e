//! Experiment runner CLI.
//!
//! Exit codes: 0 on success, 1 on configuration or I/O errors, 2 on
//! numerical failures (non-finite values, gradient-check failures, aborted
//! trials).

use clap::{Args, Parser, Subcommand};
use sbs_core::config::{self, ExperimentConfig};
use sbs_core::experiment::{
    cma_reference_gap, run_experiment, sweep, Experiment, SweepAxis, SweepReport,
};
use sbs_core::metrics;
use sbs_core::RunError;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sbs", about = "Gated stochastic-batch-size training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every trial of an experiment and write metrics + summary.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Run the config's optimizer against an SGD baseline along one axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Swept axis: fraction | batch | scheme.
        #[arg(long)]
        axis: String,
        /// Fractions for --axis fraction (default 0.5,0.25,0.125).
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        /// Batch sizes for --axis batch (default 16,32,64,128).
        #[arg(long, value_delimiter = ',')]
        batches: Option<Vec<usize>>,
    },
    /// Aggregate an existing metrics file into the run summary.
    Aggregate {
        /// Metrics JSONL path; defaults to <config out>/metrics.jsonl.
        metrics: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare the analytic gradient with central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Maximum tolerated relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Measure the gap between the accumulated-average gradient and its
    /// recomputed reference at two learning rates.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Upper learning rate; the run repeats at half this value.
        #[arg(long, default_value_t = 1e-2)]
        eta: f64,
        /// Constant update probability for the gated run.
        #[arg(long, default_value_t = 0.5)]
        p: f64,
        /// Epochs per gap measurement.
        #[arg(long, default_value_t = 2)]
        epochs: usize,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, RunError> {
    let mut cfg = config::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.display().to_string();
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            if err.is_numerical() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, RunError> {
    match cli.command {
        Command::Run { common } => {
            let cfg = load_config(&common)?;
            let out = run_experiment(cfg, None)?;
            match &out.summary {
                Some(s) => println!(
                    "trials {} | epochs {} | last-{} window mean {:.3}% (std {:.3}) | max {:.3}%",
                    s.trials,
                    s.epochs,
                    s.window,
                    s.mean_last_window,
                    s.std_last_window,
                    s.max_accuracy
                ),
                None => eprintln!("no trial completed; partial metrics retained"),
            }
            if let Some(path) = &out.metrics_path {
                println!("metrics: {}", path.display());
            }
            if let Some(path) = &out.summary_path {
                println!("summary: {}", path.display());
            }
            if out.aborted.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                for (trial, reason) in &out.aborted {
                    eprintln!("trial {trial} aborted: {reason}");
                }
                Ok(ExitCode::from(2))
            }
        }
        Command::Sweep {
            common,
            axis,
            fractions,
            batches,
        } => {
            let cfg = load_config(&common)?;
            let axis = match axis.as_str() {
                "fraction" => {
                    SweepAxis::Fraction(fractions.unwrap_or_else(|| vec![0.5, 0.25, 0.125]))
                }
                "batch" => SweepAxis::Batch(batches.unwrap_or_else(|| vec![16, 32, 64, 128])),
                "scheme" => SweepAxis::default_schemes(),
                other => {
                    return Err(RunError::Config(sbs_core::ConfigError::Field {
                        section: "optimizer",
                        key: "rule",
                        msg: format!(
                            "unknown sweep axis \"{other}\"; known: fraction, batch, scheme"
                        ),
                    }))
                }
            };
            let report = sweep(&cfg, &axis)?;
            print_sweep(&report);
            let out_dir = common.out.unwrap_or_else(|| PathBuf::from(&cfg.out));
            let csv_path = out_dir.join("sweep.csv");
            write_text(&csv_path, &report.to_csv())?;
            println!("sweep grid: {}", csv_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Aggregate { metrics, common } => {
            let cfg = load_config(&common)?;
            let path = metrics.unwrap_or_else(|| Path::new(&cfg.out).join("metrics.jsonl"));
            let (hash, records) = metrics::read_jsonl(&path)?;
            let summary = metrics::aggregate(&hash, &records, &path.display().to_string())?;
            println!(
                "trials {} | epochs {} | last-{} window mean {:.3}% (std {:.3}) | max {:.3}%",
                summary.trials,
                summary.epochs,
                summary.window,
                summary.mean_last_window,
                summary.std_last_window,
                summary.max_accuracy
            );
            if !summary.incomplete_trials.is_empty() {
                eprintln!("incomplete trials: {:?}", summary.incomplete_trials);
            }
            let out_dir = common.out.unwrap_or_else(|| PathBuf::from(&cfg.out));
            let csv = out_dir.join("summary.csv");
            metrics::write_summary_csv(&csv, &summary)?;
            println!("summary: {}", csv.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck {
            common,
            step,
            tolerance,
        } => {
            let cfg = load_config(&common)?;
            let exp = Experiment::prepare(cfg)?;
            let report = exp.gradcheck(0, step)?;
            println!(
                "checked {} parameters | max relative error {:.3e} (param {}) | mean {:.3e}",
                report.checked, report.max_rel_error, report.worst_param, report.mean_rel_error
            );
            if report.max_rel_error < tolerance {
                println!("gradcheck passed at tolerance {tolerance:.1e}");
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("gradcheck FAILED at tolerance {tolerance:.1e}");
                Ok(ExitCode::from(2))
            }
        }
        Command::Oracle {
            common,
            eta,
            p,
            epochs,
        } => {
            let cfg = load_config(&common)?;
            let exp = Experiment::prepare(cfg)?;
            let high = cma_reference_gap(&exp, eta, epochs, p, 0)?;
            let low = cma_reference_gap(&exp, eta / 2.0, epochs, p, 0)?;
            let ratio = high.max_gap / low.max_gap;
            println!(
                "eta {:>9.3e}: max gap {:.6e} (mean {:.6e}, {} applications)",
                high.eta, high.max_gap, high.mean_gap, high.applications
            );
            println!(
                "eta {:>9.3e}: max gap {:.6e} (mean {:.6e}, {} applications)",
                low.eta, low.max_gap, low.mean_gap, low.applications
            );
            println!("gap ratio: {ratio:.4} (2.0 means the gap is linear in the rate)");
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn print_sweep(report: &SweepReport) {
    println!("axis: {}", report.axis);
    println!(
        "{:<10} {:<16} {:>10} {:>10} {:>8} {:>9}",
        "batch", "cell", "baseline", "candidate", "gain", "gain_std"
    );
    for c in &report.cells {
        println!(
            "{:<10} {:<16} {:>10.3} {:>10.3} {:>8.3} {:>9.3}",
            c.batch_size, c.axis_label, c.baseline_mean, c.candidate_mean, c.gain, c.gain_std
        );
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), RunError> {
    let io_err = |source: std::io::Error| RunError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
    }
    std::fs::write(path, text).map_err(io_err)
}
