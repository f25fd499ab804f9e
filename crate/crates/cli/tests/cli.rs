//! CLI surface tests: verbs, outputs, and exit codes (0 success, 1 config
//! error, 2 numerical failure).

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sbs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbs"))
        .args(args)
        .output()
        .unwrap()
}

fn base_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("exp.cfg");
    fs::write(
        &path,
        format!(
            "
[dataset]
kind = blobs
n = 200
classes = 2
dim = 2
separation = 3.0
val_n = 80

[model]
kind = mlp
hidden = 8

[optimizer]
rule = sbs-cma
scheme = combined
batch_size = 16
{extra}

[schedule]
kind = sigmoid

[run]
epochs = 3
trials = 2
seed = 5
out = unused
"
        ),
    )
    .unwrap();
    path
}

#[test]
fn run_writes_metrics_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = base_config(dir.path(), "");
    let out_dir = dir.path().join("out");
    let out = sbs(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("metrics.jsonl").exists());
    assert!(out_dir.join("summary.csv").exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("window mean"), "{stdout}");
}

#[test]
fn config_errors_exit_one_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    fs::write(&path, "[dataset]\nkind = blobs\nn = 100\nbogus_key = 3\n").unwrap();
    let out = sbs(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bogus_key"), "{stderr}");
    assert!(stderr.contains(":4"), "missing line number: {stderr}");
}

#[test]
fn missing_config_file_exits_one() {
    let out = sbs(&["run", "--config", "/nonexistent/exp.cfg"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn numerical_abort_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = base_config(dir.path(), "");
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("kind = sigmoid", "kind = constant\neta_init = 1e120");
    fs::write(&cfg, text).unwrap();
    let out_dir = dir.path().join("out");
    let out = sbs(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("aborted"), "{stderr}");
}

#[test]
fn aggregate_reads_back_run_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = base_config(dir.path(), "");
    let out_dir = dir.path().join("out");
    assert!(sbs(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ])
    .status
    .success());
    let metrics = out_dir.join("metrics.jsonl");
    let out = sbs(&[
        "aggregate",
        metrics.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("trials 2"), "{stdout}");
}

#[test]
fn gradcheck_passes_on_default_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = base_config(dir.path(), "");
    let out = sbs(&["gradcheck", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("gradcheck passed"), "{stdout}");
}

#[test]
fn sweep_emits_grid_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = base_config(dir.path(), "");
    let out_dir = dir.path().join("out");
    let out = sbs(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--axis",
        "fraction",
        "--fractions",
        "0.5,0.25",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    assert!(csv.contains("fraction=0.5"));
    assert!(csv.contains("fraction=0.25"));
}

#[test]
fn oracle_reports_gap_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = base_config(dir.path(), "");
    let out = sbs(&[
        "oracle",
        "--config",
        cfg.to_str().unwrap(),
        "--epochs",
        "1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("gap ratio"), "{stdout}");
}
