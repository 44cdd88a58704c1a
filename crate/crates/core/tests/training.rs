use std::collections::BTreeSet;

use crosstok_core::augment::{augment, parse_list, Augmentation};
use crosstok_core::data::{gen_shapes8, Family, SyntheticTaskSpec};
use crosstok_core::gradcheck::Input;
use crosstok_core::loss::ce_label_smoothing;
use crosstok_core::model::{ModelConfig, PointModel, Task};
use crosstok_core::nn::{Mode, NormKind};
use crosstok_core::optim::{cosine_lr, AdamW, AdamWConfig};
use crosstok_core::rng::Purpose;
use crosstok_core::train::{TrainPreset, Trainer};
use crosstok_core::transfer::{is_backbone_name, TransferPolicy};
use crosstok_core::{NamedTensors, Params, PointCloud, RngStream, Tensor};

mod common;
use common::random_cloud;

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

#[test]
fn smoothed_cross_entropy_by_hand() {
    let p = softmax(&[1.0, 0.0, -1.0]);
    let q = [0.8 + 0.2 / 3.0, 0.2 / 3.0, 0.2 / 3.0];
    let want: f64 = -q.iter().zip(&p).map(|(q, p)| q * p.ln()).sum::<f64>();
    let (loss, grad) = ce_label_smoothing(&[1.0f64, 0.0, -1.0], 3, &[0], 0.2).unwrap();
    assert!((loss - want).abs() < 1e-14);
    for j in 0..3 {
        assert!((grad[j] - (p[j] - q[j])).abs() < 1e-14);
    }
}

#[test]
fn smoothed_cross_entropy_limits() {
    for k in [2usize, 5, 13] {
        for eps in [0.0, 0.2, 0.7] {
            let (l, _) = ce_label_smoothing(&vec![0.3f64; k], k, &[1], eps).unwrap();
            assert!((l - (k as f64).ln()).abs() < 1e-12);
        }
    }
    let (l, _) = ce_label_smoothing(&[60.0f64, -60.0, -60.0], 3, &[0], 0.0).unwrap();
    assert!(l < 1e-40);
    assert!(ce_label_smoothing(&[0.0f64; 3], 3, &[0], 1.0).is_err());
    assert!(ce_label_smoothing(&[0.0f64; 3], 3, &[3], 0.1).is_err());
}

#[test]
fn smoothed_loss_is_minimized_at_the_smoothed_target() {
    let eps = 0.3;
    let mut z = [0.0f64; 3];
    for _ in 0..5000 {
        let (_, g) = ce_label_smoothing(&z, 3, &[2], eps).unwrap();
        for j in 0..3 {
            z[j] -= 2.0 * g[j];
        }
    }
    let p = softmax(&z);
    let q = [0.1, 0.1, 0.8];
    for j in 0..3 {
        assert!((p[j] - q[j]).abs() < 1e-6, "{p:?}");
    }
}

#[test]
fn schedule_examples() {
    let (base, min) = (5e-4, 1e-6);
    assert_eq!(cosine_lr(10, 110, 10, base, min), base);
    assert_eq!(cosine_lr(110, 110, 10, base, min), min);
    assert!((cosine_lr(60, 110, 10, base, min) - (base + min) / 2.0).abs() < 1e-12);
    assert_eq!(cosine_lr(0, 110, 10, base, min), 0.0);
    assert!((cosine_lr(5, 110, 10, base, min) - base / 2.0).abs() < 1e-18);
}

#[test]
fn adamw_single_step_by_hand() {
    let (lr, wd, eps) = (0.01, 0.1, 1e-8);
    let w0 = [0.5f64, -1.5];
    let g = [0.2f64, -3.0];
    let mut p = Input {
        name: "w",
        value: Tensor::matrix(1, 2, w0.to_vec()),
    };
    let grad = Input {
        name: "w",
        value: Tensor::matrix(1, 2, g.to_vec()),
    };
    let cfg = AdamWConfig {
        beta1: 0.9,
        beta2: 0.999,
        eps,
        weight_decay: wd,
    };
    let mut opt = AdamW::new(&p, cfg);
    let updated = opt.update(&mut p, &grad, lr, &BTreeSet::new());
    assert_eq!(updated, ["w"]);
    for i in 0..2 {
        let decayed = w0[i] - lr * wd * w0[i];
        let m_hat = (0.1 * g[i]) / (1.0 - 0.9);
        let v_hat = (0.001 * g[i] * g[i]) / (1.0 - 0.999);
        let want = decayed - lr * m_hat / (v_hat.sqrt() + eps);
        assert!((p.value.data()[i] - want).abs() < 1e-15, "{i}");
    }

    let mut q = Input {
        name: "w",
        value: Tensor::matrix(1, 2, w0.to_vec()),
    };
    let frozen: BTreeSet<String> = ["w".to_string()].into();
    assert!(AdamW::new(&q, cfg).update(&mut q, &grad, lr, &frozen).is_empty());
    assert_eq!(q.value.data(), w0);
}

fn shapes(n_train: usize, points: usize, seed: u64) -> Vec<PointCloud<f64>> {
    gen_shapes8(&SyntheticTaskSpec::new(Family::Shapes8, n_train, 2, points, seed))
        .unwrap()
        .train
}

fn quiet_preset(n_points: usize) -> TrainPreset {
    TrainPreset {
        augmentations: vec![],
        label_smoothing: 0.0,
        batch_size: 8,
        n_points,
        ..TrainPreset::toy()
    }
}

fn small_cfg(dim: usize) -> ModelConfig {
    let mut cfg = ModelConfig::small(Task::Classification, 8, 0, dim, 2, 4);
    cfg.tokenizer.downsample_ratio = 8;
    cfg.tokenizer.k = 8;
    cfg.head_dropout = 0.0;
    cfg
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = shapes(4, 64, 1);
    let mut t = Trainer::<f64>::new(small_cfg(16), TrainPreset::toy(), 3, 4).unwrap();
    let before: Vec<Tensor<f64>> = t.model.named().into_iter().map(|(_, x)| x.clone()).collect();
    let refs: Vec<&PointCloud<f64>> = data.iter().collect();
    let mut d = RngStream::new(0, 0);
    t.step_with_lr(&refs, &[0; 4], &mut d, 0.0).unwrap();
    let after: Vec<Tensor<f64>> = t.model.named().into_iter().map(|(_, x)| x.clone()).collect();
    assert_eq!(before, after);
}

#[test]
fn single_sample_overfits() {
    let data = shapes(1, 64, 2);
    let mut cfg = small_cfg(32);
    cfg.head_norm = NormKind::Layer;
    let preset = TrainPreset {
        lr: 3e-3,
        batch_size: 1,
        ..quiet_preset(64)
    };
    let mut t = Trainer::<f64>::new(cfg, preset, 5, 1).unwrap();
    let mut last = f64::INFINITY;
    for step in 0..200 {
        let mut d = RngStream::keyed(5, Purpose::Dropout, 0, step);
        last = t.step_with_lr(&[&data[0]], &[0], &mut d, 3e-3).unwrap().loss;
    }
    assert!(last < 0.01, "final loss {last}");
}

/// A checkpoint holding another model's backbone under canonical names.
fn backbone_checkpoint(cfg: &ModelConfig, seed: u64) -> NamedTensors<f64> {
    let donor = PointModel::<f64>::new(cfg, &mut RngStream::new(seed, 0)).unwrap();
    donor
        .named()
        .into_iter()
        .filter(|(n, _)| is_backbone_name(n))
        .map(|(n, t)| (n, t.clone()))
        .collect()
}

#[test]
fn frozen_backbone_stays_bit_identical() {
    let cfg = small_cfg(16);
    let data = shapes(8, 64, 3);
    let ckpt = backbone_checkpoint(&cfg, 99);
    let mut t = Trainer::<f64>::new(
        cfg.clone(),
        TrainPreset {
            batch_size: 4,
            ..TrainPreset::toy()
        },
        4,
        8,
    )
    .unwrap();
    let policy = TransferPolicy {
        freeze_backbone: true,
        ..TransferPolicy::default()
    };
    let report = t.model.transfer_from(&ckpt, &policy).unwrap();
    t.frozen = report.frozen.clone();
    let before: Vec<(String, Tensor<f64>)> = t.model.named().into_iter().map(|(n, x)| (n, x.clone())).collect();

    let expected: BTreeSet<String> = before
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| !is_backbone_name(n))
        .collect();
    for step in 0..50u64 {
        let ids = [
            (step as usize * 4) % 8,
            (step as usize * 4 + 1) % 8,
            (step as usize * 4 + 2) % 8,
        ];
        let (views, starts): (Vec<_>, Vec<_>) = ids.iter().map(|&i| t.train_view(&data[i], 0, i)).unzip();
        let refs: Vec<&PointCloud<f64>> = views.iter().collect();
        let mut d = RngStream::keyed(4, Purpose::Dropout, 0, step);
        let stats = t.train_step(&refs, &starts, &mut d).unwrap();
        let updated: BTreeSet<String> = stats.updated.into_iter().collect();
        assert_eq!(updated, expected);
    }
    let after = t.model.named();
    let mut changed_tok = false;
    let mut changed_head = false;
    for ((name, a), (_, b)) in before.iter().zip(after) {
        if is_backbone_name(name) {
            assert_eq!(a, b, "{name} moved");
        } else if a != b {
            changed_tok |= name.starts_with("tokenizer.");
            changed_head |= name.starts_with("head.");
        }
    }
    assert!(changed_tok && changed_head);
}

#[test]
fn augmentation_contracts() {
    let mut rng = RngStream::new(1, 0);
    let cloud = random_cloud(50, 3, &mut rng);
    assert_eq!(augment(&cloud, &[], &mut RngStream::new(2, 0)), cloud);

    let rotated = augment(&cloud, &[Augmentation::Rotate], &mut RngStream::new(2, 0));
    for i in 0..10 {
        for j in 0..10 {
            let d0 = crosstok_core::geometry::dist2(&cloud.positions[i], &cloud.positions[j]);
            let d1 = crosstok_core::geometry::dist2(&rotated.positions[i], &rotated.positions[j]);
            assert!((d0 - d1).abs() <= 1e-5 * d0.max(1e-12));
        }
    }
    let spec = parse_list(&["rotate", "scale", "jitter", "color_autocontrast", "color_drop"]).unwrap();
    let a = augment(&cloud, &spec, &mut RngStream::new(7, 3));
    let b = augment(&cloud, &spec, &mut RngStream::new(7, 3));
    assert_eq!(a, b);
    assert!(parse_list(&["rotate", "mirror"]).is_err());
}

#[test]
fn train_mode_dropout_differs_from_eval() {
    let cfg = ModelConfig {
        head_dropout: 0.5,
        ..small_cfg(16)
    };
    let m = PointModel::<f64>::new(&cfg, &mut RngStream::new(1, 0)).unwrap();
    let data = shapes(2, 64, 4);
    let refs: Vec<&PointCloud<f64>> = data.iter().collect();
    let (a, _) = m.forward(&cfg, &refs, &[0, 0], &mut Mode::Eval).unwrap();
    let (b, _) = m.forward(&cfg, &refs, &[0, 0], &mut Mode::Eval).unwrap();
    assert_eq!(a, b);
    let mut d = RngStream::new(3, 3);
    let (c, _) = m.forward(&cfg, &refs, &[0, 0], &mut Mode::Train(&mut d)).unwrap();
    assert_ne!(a, c);
}
