//! Per-epoch metrics records, JSONL persistence, and run aggregation.
//!
//! The metrics file is one JSON object per line: a header object carrying
//! the config hash, then one record per (trial, epoch). Wall-clock time is
//! tracked in memory for the summary but never serialized, so identical
//! (config, seed) runs produce byte-identical files.

use crate::error::RunError;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// One (trial, epoch) measurement.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub trial: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Validation accuracy in percent, in [0, 100].
    pub val_accuracy: f64,
    /// Mean of the update indicators over parameters and iterations.
    pub applied_update_fraction: f64,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config_hash: String,
    schema: String,
}

/// Writes the header plus records as JSONL.
pub fn write_jsonl(
    path: &Path,
    config_hash: &str,
    records: &[MetricsRecord],
) -> Result<(), RunError> {
    let io_err = |source: std::io::Error| RunError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    let header = Header {
        config_hash: config_hash.to_string(),
        schema: "metrics/1".to_string(),
    };
    serde_json::to_writer(&mut file, &header).map_err(|e| io_err(e.into()))?;
    file.write_all(b"\n").map_err(io_err)?;
    for record in records {
        serde_json::to_writer(&mut file, record).map_err(|e| io_err(e.into()))?;
        file.write_all(b"\n").map_err(io_err)?;
    }
    file.flush().map_err(io_err)
}

/// Reads a metrics file back: (config hash, records).
pub fn read_jsonl(path: &Path) -> Result<(String, Vec<MetricsRecord>), RunError> {
    let io_err = |source: std::io::Error| RunError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header_line = match lines.next() {
        Some(l) => l.map_err(io_err)?,
        None => {
            return Err(RunError::EmptyMetrics {
                path: path.display().to_string(),
            })
        }
    };
    let header: Header = serde_json::from_str(&header_line).map_err(|e| io_err(e.into()))?;
    let mut records = Vec::new();
    for line in lines {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let record: MetricsRecord = serde_json::from_str(&line).map_err(|e| io_err(e.into()))?;
        records.push(record);
    }
    Ok((header.config_hash, records))
}

/// Per-trial and cross-trial statistics of validation accuracy.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub config_hash: String,
    pub trials: usize,
    pub epochs: usize,
    /// Number of final epochs in the averaging window: ceil(0.1 * epochs).
    pub window: usize,
    /// Per complete trial: (trial id, mean val accuracy over the window,
    /// max val accuracy over all its epochs).
    pub per_trial: Vec<(usize, f64, f64)>,
    /// Mean over trials of the window means.
    pub mean_last_window: f64,
    /// Population std over trials of the window means.
    pub std_last_window: f64,
    /// Maximum validation accuracy over all epochs and trials.
    pub max_accuracy: f64,
    /// Trials that did not reach the full epoch count (aborted runs).
    pub incomplete_trials: Vec<usize>,
}

/// Aggregates records with the run's primary statistics: the mean over the
/// last 10% of epochs per trial (then mean/std over trials), and the maximum
/// over all epochs and trials.
pub fn aggregate(
    config_hash: &str,
    records: &[MetricsRecord],
    source: &str,
) -> Result<Summary, RunError> {
    if records.is_empty() {
        return Err(RunError::EmptyMetrics {
            path: source.to_string(),
        });
    }
    let epochs = records.iter().map(|r| r.epoch).max().unwrap() + 1;
    let window = epochs.div_ceil(10);
    let trial_count = records.iter().map(|r| r.trial).max().unwrap() + 1;

    let mut per_trial = Vec::new();
    let mut incomplete = Vec::new();
    let mut max_accuracy = f64::NEG_INFINITY;
    for trial in 0..trial_count {
        let mut accs: Vec<(usize, f64)> = records
            .iter()
            .filter(|r| r.trial == trial)
            .map(|r| (r.epoch, r.val_accuracy))
            .collect();
        accs.sort_by_key(|&(e, _)| e);
        if accs.len() < epochs {
            incomplete.push(trial);
            continue;
        }
        let window_mean = accs[epochs - window..]
            .iter()
            .map(|&(_, a)| a)
            .sum::<f64>()
            / window as f64;
        let trial_max = accs
            .iter()
            .map(|&(_, a)| a)
            .fold(f64::NEG_INFINITY, f64::max);
        max_accuracy = max_accuracy.max(trial_max);
        per_trial.push((trial, window_mean, trial_max));
    }
    if per_trial.is_empty() {
        return Err(RunError::EmptyMetrics {
            path: source.to_string(),
        });
    }
    let n = per_trial.len() as f64;
    let mean = per_trial.iter().map(|&(_, m, _)| m).sum::<f64>() / n;
    let var = per_trial
        .iter()
        .map(|&(_, m, _)| (m - mean) * (m - mean))
        .sum::<f64>()
        / n;
    Ok(Summary {
        config_hash: config_hash.to_string(),
        trials: per_trial.len(),
        epochs,
        window,
        per_trial,
        mean_last_window: mean,
        std_last_window: var.sqrt(),
        max_accuracy,
        incomplete_trials: incomplete,
    })
}

/// Writes the summary as a small CSV for spreadsheet import, with the config
/// hash on the first line.
pub fn write_summary_csv(path: &Path, summary: &Summary) -> Result<(), RunError> {
    let io_err = |source: std::io::Error| RunError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
    }
    let mut out = String::new();
    out.push_str(&format!("config_hash,{}\n", summary.config_hash));
    out.push_str("trial,last_window_mean_val_accuracy,max_val_accuracy\n");
    for &(trial, mean, max) in &summary.per_trial {
        out.push_str(&format!("{trial},{mean},{max}\n"));
    }
    out.push_str(&format!("mean,{},\n", summary.mean_last_window));
    out.push_str(&format!("std,{},\n", summary.std_last_window));
    out.push_str(&format!("max,,{}\n", summary.max_accuracy));
    std::fs::write(path, out).map_err(io_err)
}
