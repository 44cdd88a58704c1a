use std::path::Path;
use std::process::{Command, Output};

fn crosstok(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crosstok"))
        .arg("--workdir")
        .arg(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

const SMALL: &str = r#"
[data]
n_train = 16
n_val = 16
points = 128
[model]
dim = 32
heads = 2
k = 8
[train]
batch_size = 8
[output]
dir = "run"
[pretrain]
images = 48
val_images = 16
epochs = 1
warmup_epochs = 0
batch_size = 16
"#;

fn with_config() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = crosstok(dir.path(), &["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(crosstok(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(
        crosstok(dir.path(), &["gradcheck", "--precision", "f32"]).status.code(),
        Some(2)
    );
    assert_eq!(
        crosstok(dir.path(), &["gradcheck", "--suite", "nope"]).status.code(),
        Some(2)
    );
    assert_eq!(
        crosstok(dir.path(), &["train", "--freeze-backbone"]).status.code(),
        Some(2)
    );
    assert_eq!(
        crosstok(dir.path(), &["train", "--init", "missing"]).status.code(),
        Some(2)
    );
    assert_eq!(
        crosstok(dir.path(), &["--config", "absent.toml", "train"])
            .status
            .code(),
        Some(2)
    );
    std::fs::write(dir.path().join("bad.toml"), "[train]\nlr = -1.0\n").unwrap();
    assert_eq!(
        crosstok(dir.path(), &["--config", "bad.toml", "train"]).status.code(),
        Some(2)
    );
}

#[test]
fn runtime_errors_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("x.manifest.json"), "{\"entries\": [").unwrap();
    std::fs::write(dir.path().join("x.bin"), "").unwrap();
    let o = crosstok(dir.path(), &["inspect-ckpt", "x"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!o.stderr.is_empty());
    assert_eq!(crosstok(dir.path(), &["eval", "x"]).status.code(), Some(3));
}

#[test]
fn train_with_zero_epochs_prints_the_initial_record() {
    let dir = with_config();
    let o = crosstok(dir.path(), &["--config", "small.toml", "train", "--epochs", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().filter(|l| l.starts_with('{')).collect();
    assert_eq!(lines.len(), 1);
    let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!((v["epoch"].as_u64(), v["split"].as_str()), (Some(0), Some("val")));
}

#[test]
fn pretrain_transfer_train_inspect_eval() {
    let dir = with_config();
    let run = |args: &[&str]| {
        let mut full = vec!["--config", "small.toml"];
        full.extend_from_slice(args);
        let o = crosstok(dir.path(), &full);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        stdout(&o)
    };

    let out = run(&["pretrain-toy", "--out", "ckpt/img"]);
    assert!(out.contains("saved"));

    let out = run(&["inspect-ckpt", "ckpt/img"]);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("ckpt/img.manifest.json")).unwrap()).unwrap();
    let n = manifest["entries"].as_array().unwrap().len();
    let rows: Vec<&str> = out.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), n);
    assert!(rows
        .iter()
        .any(|r| r.starts_with("blocks.0.attn.qkv.weight") && r.contains("f32")));

    let out = run(&["transfer", "ckpt/img", "--freeze-backbone", "--out", "ckpt/point"]);
    assert!(out.lines().any(|l| l.starts_with("matched   cls_token")));
    assert!(out.lines().any(|l| l.starts_with("skipped   patch_embed.proj.weight")));
    assert!(dir.path().join("ckpt/point.bin").exists());

    let out = run(&[
        "train",
        "--epochs",
        "1",
        "--init",
        "ckpt/img",
        "--freeze-backbone",
        "--out",
        "ft",
    ]);
    assert_eq!(out.lines().filter(|l| l.starts_with('{')).count(), 3);

    let out = run(&["eval", "ft/last"]);
    let log = std::fs::read_to_string(dir.path().join("ft/metrics.jsonl")).unwrap();
    let logged: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    let evaluated: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(evaluated["oa"], logged["oa"]);
    assert_eq!(evaluated["loss"], logged["loss"]);
}

#[test]
fn gradcheck_prints_a_row_per_suite() {
    let dir = tempfile::tempdir().unwrap();
    let o = crosstok(dir.path(), &["gradcheck", "--seeds", "1", "--suite", "classifier"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(
        out.lines().any(|l| l.starts_with("classifier") && l.ends_with("ok")),
        "{out}"
    );
}

#[test]
fn bench_and_gen_data() {
    let dir = tempfile::tempdir().unwrap();
    let o = crosstok(dir.path(), &["bench", "--points", "512", "--reps", "1"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().filter(|l| l.ends_with("true")).count(), 3);

    let o = crosstok(
        dir.path(),
        &[
            "gen-data",
            "--family",
            "parts4",
            "--n-train",
            "3",
            "--n-val",
            "2",
            "--points",
            "64",
            "--format",
            "bin",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let cloud = crosstok::read_points(&dir.path().join("data/train/00001.bin"), crosstok::PointFormat::Bin).unwrap();
    assert_eq!(cloud.len(), 64);
    let labels = std::fs::read_to_string(dir.path().join("data/train/00001.labels")).unwrap();
    assert_eq!(labels.lines().count(), 64);
    assert!(dir.path().join("data/val/00001.labels").exists());
    assert!(!dir.path().join("data/val/labels.txt").exists());

    let o = crosstok(
        dir.path(),
        &[
            "gen-data",
            "--family",
            "shapes8",
            "--n-train",
            "2",
            "--n-val",
            "3",
            "--out",
            "s8",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        std::fs::read_to_string(dir.path().join("s8/val/labels.txt"))
            .unwrap()
            .lines()
            .count(),
        3
    );
}

#[test]
fn thread_cap_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_crosstok"))
        .args(["gradcheck", "--seeds", "1", "--suite", "classifier"])
        .current_dir(dir.path())
        .env("P4P_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
