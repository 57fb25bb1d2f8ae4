use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
train_per_class = 6
test_per_class = 3
frames = 16

[train]
epochs = 3
warmup_epochs = 1
batch_size = 8

[encoder]
hidden_channels = 4
num_blocks = 1
feature_dim = 6
projector_dims = [8, 8, 8]

[mask]
masked_joints = 2
key_frames = 2

[eval]
linear_epochs = 3
finetune_epochs = 1
finetune_batch_size = 8
"#;

fn pstl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pstl")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = pstl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn only_dir(root: &Path) -> PathBuf {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.pop().unwrap()
}

/// gen-data, pretrain and linear-eval into `out`; returns the run directory.
fn pipeline(config: &Path, out: &Path) -> PathBuf {
    let (c, o) = (config.to_str().unwrap(), out.to_str().unwrap());
    ok(&["gen-data", "--config", c, "--out-dir", o, "--seed", "5"]);
    let run = only_dir(out);
    let data = run.join("dataset.toml");
    ok(&["pretrain", "--config", c, "--out-dir", o, "--seed", "5", "--data", data.to_str().unwrap()]);
    let ckpt = run.join("checkpoint.toml");
    ok(&[
        "linear-eval",
        "--config",
        c,
        "--out-dir",
        o,
        "--seed",
        "5",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    run
}

#[test]
fn pipeline_reruns_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let a = pipeline(&config, &dir.path().join("a"));
    let b = pipeline(&config, &dir.path().join("b"));
    assert_eq!(a.file_name(), b.file_name());
    assert!(a.file_name().unwrap().to_str().unwrap().ends_with("-s5"));
    for f in [
        "config.toml",
        "dataset.toml",
        "dataset.bin",
        "checkpoint.toml",
        "checkpoint.bin",
        "telemetry.csv",
        "linear-eval-J/report.txt",
        "linear-eval-J/report.csv",
        "linear-eval-J/logits.csv",
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let telemetry = fs::read_to_string(a.join("telemetry.csv")).unwrap();
    assert!(telemetry.starts_with("step,L_p,L_1,L_2,lr\n"));
    assert_eq!(telemetry.lines().count(), 1 + 3 * 24 / 8);

    let logits = a.join("linear-eval-J/logits.csv");
    let l = logits.to_str().unwrap();
    let out = ok(&["fuse", "--out-dir", dir.path().join("f").to_str().unwrap(), "--logits", l, l, l]);
    let single = fs::read_to_string(a.join("linear-eval-J/report.csv")).unwrap();
    let top1 = |s: &str| s.trim().rsplit(',').next().unwrap().to_string();
    assert_eq!(top1(out.lines().next().unwrap()), top1(single.lines().nth(1).unwrap()));
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["grad-check", "--out-dir", dir.path().to_str().unwrap()]);
    assert!(out.contains("max relative error"));
}

#[test]
fn failures_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nbatchsize = 4\n").unwrap();
    let config = pstl(&["gen-data", "--config", bad.to_str().unwrap(), "--out-dir", o]);
    assert_eq!(config.status.code(), Some(3));

    let missing = pstl(&["linear-eval", "--out-dir", o, "--data", "nope.toml", "--checkpoint", "nope.toml"]);
    assert_eq!(missing.status.code(), Some(4));

    let usage = pstl(&["partial-eval", "--out-dir", o]);
    assert_eq!(usage.status.code(), Some(2));
    for out in [config, missing, usage] {
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn sweep_records_invalid_grid_points() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let (c, o) = (config.to_str().unwrap(), dir.path().join("out"));
    ok(&["gen-data", "--config", c, "--out-dir", o.to_str().unwrap()]);
    let data = only_dir(&o).join("dataset.toml");
    ok(&[
        "sweep",
        "--config",
        c,
        "--out-dir",
        o.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--grid",
        "masked-joints",
        "--values",
        "1,11",
    ]);
    let csv = fs::read_to_string(only_dir(&o).join("sweep-masked_joints/sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("masked_joints,1,ok,"));
    assert!(rows[2].starts_with("masked_joints,11,invalid,"));
}
