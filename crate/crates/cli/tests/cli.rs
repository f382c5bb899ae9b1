use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn micro_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/micro.json")
}

fn mrt(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrt"))
        .arg("--config")
        .arg(micro_config())
        .arg("--out")
        .arg(out)
        .args(args)
        .env("MRT_THREADS", "1")
        .output()
        .expect("spawn mrt")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn pretrain(dir: &Path) -> PathBuf {
    let base = dir.join("base");
    ok(&mrt(&base, &["pretrain-base"]));
    base.join("checkpoint.mrt")
}

#[test]
fn train_writes_metrics_summary_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let base = pretrain(dir.path());
    let before = std::fs::read(&base).unwrap();
    let run = dir.path().join("runs/1");
    ok(&mrt(&run, &["train", "--base", base.to_str().unwrap()]));
    for f in ["metrics.csv", "summary.json", "checkpoint.mrt", "config.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,loss,lr"));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    for key in ["final_accuracy", "trainable_fraction", "seed", "config_hash"] {
        assert!(summary.get(key).is_some(), "summary lacks {key}");
    }
    assert_eq!(std::fs::read(&base).unwrap(), before, "input checkpoint changed");

    let resolved = std::fs::read_to_string(run.join("config.json")).unwrap();
    assert!(resolved.contains(base.file_name().unwrap().to_str().unwrap()));
}

#[test]
fn control_eval_without_editors_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let base = pretrain(dir.path());
    let out = dir.path().join("ce");
    let res = mrt(&out, &["control-eval", "--checkpoint", base.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("no trained editors"), "{err}");
    assert!(out.join("FAILED").exists());
}

#[test]
fn landscape_grid_three_has_nine_rows_and_center() {
    let dir = tempfile::tempdir().unwrap();
    let base = pretrain(dir.path());
    let run = dir.path().join("train");
    ok(&mrt(&run, &["train", "--base", base.to_str().unwrap()]));
    let ckpt = run.join("checkpoint.mrt");
    let out = dir.path().join("ls");
    ok(&mrt(
        &out,
        &["landscape", "--checkpoint", ckpt.to_str().unwrap(), "--grid", "3", "--span", "0.1", "--emit-gnuplot"],
    ));
    let csv = std::fs::read_to_string(out.join("landscape.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 9);
    assert!(rows[4].starts_with("0,0,"), "{}", rows[4]);
    assert_eq!(std::fs::read_to_string(out.join("landscape.dat")).unwrap().lines().count(), 3);
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"plan": {"visual_rank": 0}}"#).unwrap();
    let res = Command::new(env!("CARGO_BIN_EXE_mrt"))
        .args(["--config", bad.to_str().unwrap(), "--out"])
        .arg(dir.path().join("x"))
        .arg("eval")
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("visual_rank"));

    let junk = dir.path().join("junk.mrt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let res = mrt(&dir.path().join("j"), &["eval", "--checkpoint", junk.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3));
}

#[test]
fn sweeps_and_dump_write_csv_with_headers() {
    let dir = tempfile::tempdir().unwrap();
    let base = pretrain(dir.path());
    let b = base.to_str().unwrap();
    for (cmd, file) in [
        ("sweep-rank", "rank_sweep.csv"),
        ("sweep-depth", "depth_sweep.csv"),
        ("sweep-length", "length_sweep.csv"),
        ("sweep-segment", "segment_ablation.csv"),
    ] {
        let out = dir.path().join(cmd);
        ok(&mrt(&out, &[cmd, "--base", b]));
        let csv = std::fs::read_to_string(out.join(file)).unwrap();
        assert!(csv.lines().count() >= 2, "{cmd}: {csv}");
    }
    let out = dir.path().join("dump");
    ok(&mrt(&out, &["dump-data", "--split", "test"]));
    let first = std::fs::read_to_string(out.join("data.jsonl")).unwrap();
    let row: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    for key in ["class", "seed", "pixels", "tokens", "label", "roi"] {
        assert!(row.get(key).is_some(), "row lacks {key}");
    }
}
