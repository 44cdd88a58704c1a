use crosstok::experiment::{evaluate_checkpoint, read_log, EvalSplit, RunError};
use crosstok::pretrain::run_pretrain;
use crosstok::{run_experiment, ExperimentConfig, RunOptions};
use crosstok_core::transfer::SkipReason;

fn small(epochs: usize) -> ExperimentConfig {
    ExperimentConfig::parse(
        &format!(
            r#"
seed = 5
[data]
n_train = 16
n_val = 16
points = 128
[model]
dim = 32
heads = 2
k = 8
[train]
epochs = {epochs}
batch_size = 8
[output]
dir = "run"
"#
        ),
        false,
    )
    .unwrap()
}

#[test]
fn zero_epochs_logs_only_the_initial_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let s = run_experiment(&small(0), dir.path(), RunOptions::default(), |_| {}).unwrap();
    assert_eq!(s.records.len(), 1);
    assert_eq!((s.records[0].epoch, s.records[0].split.as_str()), (0, "val"));
    assert_eq!(read_log(&s.dir).unwrap().lines().count(), 1);
    assert!(s.dir.join("best.manifest.json").exists() && s.dir.join("last.bin").exists());
}

#[test]
fn resume_continues_the_same_trajectory() {
    let straight = tempfile::tempdir().unwrap();
    let full = run_experiment(&small(3), straight.path(), RunOptions::default(), |_| {}).unwrap();

    let split = tempfile::tempdir().unwrap();
    let first = run_experiment(
        &small(3),
        split.path(),
        RunOptions {
            resume: false,
            stop_after: Some(2),
        },
        |_| {},
    )
    .unwrap();
    assert_eq!(first.records.last().unwrap().epoch, 2);
    let rest = run_experiment(
        &small(3),
        split.path(),
        RunOptions {
            resume: true,
            stop_after: None,
        },
        |_| {},
    )
    .unwrap();
    assert_eq!(rest.started_at, 2);
    assert_eq!(rest.records, full.records);
    assert_eq!(read_log(&rest.dir).unwrap(), read_log(&full.dir).unwrap());
}

#[test]
fn best_checkpoint_reproduces_its_logged_metric() {
    let dir = tempfile::tempdir().unwrap();
    let s = run_experiment(&small(3), dir.path(), RunOptions::default(), |_| {}).unwrap();
    let best_val = s
        .records
        .iter()
        .filter(|r| r.split == "val")
        .map(|r| r.oa)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(s.best.value, best_val);
    let stats = evaluate_checkpoint(&s.dir.join("best"), None, EvalSplit::Val).unwrap();
    assert_eq!(stats.metrics.oa, best_val);
    let last = evaluate_checkpoint(&s.dir.join("last"), None, EvalSplit::Val).unwrap();
    assert_eq!(last.metrics.oa, s.final_val().unwrap().oa);
}

#[test]
fn missing_init_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(1);
    cfg.init = Some(toml::from_str(r#"path = "nope""#).unwrap());
    let e = run_experiment(&cfg, dir.path(), RunOptions::default(), |_| {}).unwrap_err();
    assert!(e.is_config(), "{e}");
    assert!(!dir.path().join("run").exists());
}

#[test]
fn pretrained_encoder_transfers_and_freezes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(2);
    cfg.pretrain.images = 64;
    cfg.pretrain.val_images = 16;
    cfg.pretrain.epochs = 1;
    cfg.pretrain.batch_size = 16;
    cfg.pretrain.warmup_epochs = 0;
    let p = run_pretrain(&cfg, dir.path(), |_| {}).unwrap();
    assert_eq!(p.epochs.len(), 1);

    cfg.init = Some(
        toml::from_str(
            r#"path = "ckpt/pretrained"
freeze_backbone = true"#,
        )
        .unwrap(),
    );
    let before = crosstok::load_archive(&p.path).unwrap();
    let s = run_experiment(&cfg, dir.path(), RunOptions::default(), |_| {}).unwrap();
    let report = s.transfer.unwrap();
    assert!(report.mismatched.is_empty());
    assert_eq!(report.total(), p.tensors);
    assert!(report.matched.iter().any(|n| n == "cls_token"));
    assert!(report.matched.iter().any(|n| n.starts_with("blocks.1.")));
    assert!(report
        .skipped
        .iter()
        .any(|(n, r)| n.starts_with("patch_embed.") && *r == SkipReason::Policy));
    assert!(report
        .skipped
        .iter()
        .any(|(n, r)| n == "pos_embed" && *r == SkipReason::Disabled));

    let after = crosstok::load_archive(&s.dir.join("last")).unwrap();
    for name in report.frozen.iter() {
        assert_eq!(after.get(name), before.get(name), "{name} moved while frozen");
    }
    assert!(!report.frozen.is_empty());
}

#[test]
fn config_errors_are_distinguished() {
    let e: RunError = ExperimentConfig::parse("[data]\nfamily = \"patches2d\"", false)
        .unwrap()
        .resolve()
        .unwrap_err()
        .into();
    assert!(e.is_config());
}
