use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use parctx_core::cli::report::read_reports;
use parctx_core::model::{save_checkpoint, Model, ModelConfig};

fn parctx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_parctx")).args(args).output().unwrap()
}

fn small_checkpoint(dir: &Path) -> String {
    let cfg = ModelConfig { layers: 1, heads: 2, model_dim: 16, mlp_dim: 32, ..ModelConfig::reference() };
    let path = dir.join("small.pctx");
    save_checkpoint(&Model::init(cfg).unwrap(), &path).unwrap();
    path.display().to_string()
}

#[test]
fn dry_run_needs_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let o = parctx(&["--dry-run", "--scheme", "parallel", "--parallel-degree", "4", "--n-instances", "3", "--dump-layout", "--out", &out]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let line = fs::read_to_string(dir.path().join("dry_run.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(v["dry_run"], true);
    assert!(dir.path().join("layout.json").exists());
}

#[test]
fn config_errors_exit_2() {
    for args in [
        &["--dry-run", "--parallel-degree", "0"][..],
        &["--dry-run", "--aggr", "xyz"][..],
        &["--dry-run", "--set", "nonsense=1"][..],
        &["--dry-run", "--task", "poetry"][..],
    ] {
        assert_eq!(parctx(args).status.code(), Some(2), "{args:?}");
    }
    // No checkpoint and no --train.
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(parctx(&["--out", &dir.path().display().to_string()]).status.code(), Some(2));
}

#[test]
fn bad_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.pctx");
    fs::write(&bogus, b"not a checkpoint").unwrap();
    let out = dir.path().display().to_string();
    for ckpt in [bogus.display().to_string(), dir.path().join("missing.pctx").display().to_string()] {
        let o = parctx(&["--checkpoint", &ckpt, "--n-instances", "2", "--out", &out]);
        assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn run_writes_verified_reports() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = small_checkpoint(dir.path());
    let out = dir.path().display().to_string();
    let o = parctx(&[
        "--checkpoint", &ckpt, "--scheme", "parallel", "--parallel-degree", "2", "--select-k", "1", "--aggr", "ht",
        "--n-instances", "3", "--trace-selection", "--set", "n_items=4", "--out", &out,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let reports = read_reports(&fs::read_to_string(dir.path().join("report.jsonl")).unwrap()).unwrap();
    assert_eq!(reports.len(), 1);
    reports[0].verify().unwrap();
    assert_eq!(reports[0].instances.len(), 3);
    assert!(dir.path().join("plot.csv").exists());
    assert!(!fs::read_to_string(dir.path().join("selection_trace.jsonl")).unwrap().is_empty());
}

#[test]
fn sweep_writes_summary_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = small_checkpoint(dir.path());
    let cfg_path = dir.path().join("run.cfg");
    fs::write(&cfg_path, format!("# sweep\ncheckpoint = {ckpt}\nn_instances = 2\nn_items = 4\n")).unwrap();
    let o = parctx(&[
        "--config", &cfg_path.display().to_string(), "--sweep-p", "1,2", "--sweep-schemes", "full,naive,sel",
        "--out", &dir.path().display().to_string(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let reports = read_reports(&fs::read_to_string(dir.path().join("report.jsonl")).unwrap()).unwrap();
    // full only at P=1; naive and sel at both degrees.
    assert_eq!(reports.len(), 5);
    reports.iter().for_each(|r| r.verify().unwrap());
    for f in ["sweep_summary.json", "metric_vs_p.csv", "entropy_vs_p.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}
