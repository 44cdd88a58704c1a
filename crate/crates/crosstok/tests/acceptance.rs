//! One line per acceptance criterion, `criterion N ... PASS|FAIL`.
//!
//! Lines go straight to stdout so they show up without `--nocapture`. The
//! tests share a lock: timing budgets are measured with the machine to
//! themselves.

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::Mutex;
use std::time::Instant;

use crosstok::archive::{read_archive, save_archive};
use crosstok::experiment::read_log;
use crosstok::pretrain::run_pretrain;
use crosstok::{run_experiment, ExperimentConfig, RunOptions};
use crosstok_core::data::{gen_patches2d, gen_shapes8, Family, SyntheticTaskSpec};
use crosstok_core::geometry::{dist2, farthest_point_sample, group, knn_query, Interpolation, INTERP_EPS};
use crosstok_core::gradcheck::{run_all, TOLERANCE};
use crosstok_core::metrics::compute_metrics;
use crosstok_core::model::{ImageModelConfig, ModelConfig, Task};
use crosstok_core::nn::Mode;
use crosstok_core::rng::Purpose;
use crosstok_core::tokenizer::{InputMode, PointTokenizer, PointTokenizerConfig};
use crosstok_core::train::{pretrain_images, TrainPreset, Trainer};
use crosstok_core::transfer::{is_backbone_name, SkipReason, TransferPolicy};
use crosstok_core::{Labels, Params, PointCloud, RngStream, Tensor};

static SERIAL: Mutex<()> = Mutex::new(());

fn report(n: u32, what: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {n} {what}: {} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

// Pinned tolerances.
const GRAD_REL: f64 = 1e-4;
const GRAD_SECONDS: f64 = 120.0;
const INTERP_REL: f64 = 1e-6;
const TOKEN_REL: f64 = 1e-5;
const OVERFIT_LOSS: f64 = 0.01;
const OVERFIT_LR: f64 = 3e-3;
const METRIC_ABS: f64 = 1e-9;

#[test]
fn criterion_1_gradients() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let reports = run_all(0..20).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.stats.max_rel_err).fold(0.0, f64::max);
    let checked: usize = reports.iter().map(|r| r.stats.checked).sum();
    let pass =
        TOLERANCE <= GRAD_REL && worst < GRAD_REL && secs < GRAD_SECONDS && reports.iter().all(|r| r.stats.checked > 0);
    report(
        1,
        "gradient suites, 20 seeds, f64 central differences",
        pass,
        &format!(
            "{} suites, {checked} entries, max rel err {worst:.2e} < {GRAD_REL:e}, {secs:.1}s < {GRAD_SECONDS}s",
            reports.len()
        ),
    );
    assert!(pass);
}

fn cloud(n: usize, rng: &mut RngStream) -> Vec<[f64; 3]> {
    (0..n).map(|_| [rng.uniform(), rng.uniform(), rng.uniform()]).collect()
}

fn fps_oracle(p: &[[f64; 3]], n: usize, start: usize) -> Vec<usize> {
    let mut picked = vec![start];
    while picked.len() < n {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for i in (0..p.len()).filter(|i| !picked.contains(i)) {
            let d = picked
                .iter()
                .map(|&s| dist2(&p[s], &p[i]))
                .fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        picked.push(best.1);
    }
    picked
}

/// Full sort by (distance, index), padded with the nearest.
fn knn_oracle(src: &[[f64; 3]], q: &[f64; 3], k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = src.iter().enumerate().map(|(i, s)| (dist2(s, q), i)).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = all.iter().take(k).map(|x| x.1).collect();
    while out.len() < k {
        out.push(all[0].1);
    }
    out
}

#[test]
fn criterion_2_geometry_oracles() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = RngStream::new(515, 0);
    let (mut fps_bad, mut knn_bad, mut ids_bad) = (0, 0, 0);
    let mut worst_w = 0.0f64;
    for inst in 0..200 {
        let n = 1 + rng.below(512);
        let mut p = cloud(n, &mut rng);
        if inst % 4 == 0 {
            // Coarse lattice: many exact distance ties.
            for v in p.iter_mut() {
                *v = v.map(|x| (x * 4.0).floor() / 4.0);
            }
        }
        let m = 1 + rng.below(n.min(128));
        let start = rng.below(n);
        fps_bad += usize::from(farthest_point_sample(&p, m, start).unwrap() != fps_oracle(&p, m, start));

        let k = 1 + rng.below(32);
        let queries = if inst % 2 == 0 {
            p.clone()
        } else {
            cloud(1 + rng.below(256), &mut rng)
        };
        let nb = knn_query(&p, &queries, k).unwrap();
        let plan = Interpolation::new(&p, &queries).unwrap();
        for (qi, q) in queries.iter().enumerate() {
            knn_bad += usize::from(nb.row(qi) != knn_oracle(&p, q, k).as_slice());
            let ids = knn_oracle(&p, q, n.min(3));
            let w: Vec<f64> = ids
                .iter()
                .map(|&i| 1.0 / (dist2(&p[i], q).sqrt() + INTERP_EPS))
                .collect();
            let total: f64 = w.iter().sum();
            for (j, &id) in ids.iter().enumerate() {
                ids_bad += usize::from(plan.ids[qi][j] != id);
                let want = w[j] / total;
                worst_w = worst_w.max((plan.weights[qi][j] - want).abs() / want);
            }
        }
    }
    let pass = fps_bad == 0 && knn_bad == 0 && ids_bad == 0 && worst_w <= INTERP_REL;
    report(
        2,
        "FPS, kNN, 3-NN interpolation vs brute force on 200 instances, N <= 512",
        pass,
        &format!(
            "index mismatches fps {fps_bad} knn {knn_bad} interp {ids_bad}, max weight rel err {worst_w:.1e} <= {INTERP_REL:e}"
        ),
    );
    assert!(pass);
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn linear(w: &Tensor<f64>, b: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    (0..w.cols())
        .map(|o| b.data()[o] + (0..w.rows()).map(|i| x[i] * w.data()[i * w.cols() + o]).sum::<f64>())
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// One token by straight loops: per-edge MLP, max, concat, MLP, max.
fn token_oracle(
    tok: &PointTokenizer<f64>,
    c: &PointCloud<f64>,
    center: usize,
    nbrs: &[usize],
    mode: InputMode,
) -> Vec<f64> {
    let gc = &tok.stages[0];
    let (pi, xi) = (c.positions[center], c.feature(center));
    let edges: Vec<Vec<f64>> = nbrs
        .iter()
        .map(|&j| {
            let (pj, xj) = (c.positions[j], c.feature(j));
            let mut u: Vec<f64> = (0..3)
                .map(|a| {
                    if mode == InputMode::AbsPos {
                        pj[a]
                    } else {
                        pj[a] - pi[a]
                    }
                })
                .collect();
            u.extend((0..xj.len()).map(|a| {
                if mode == InputMode::AbsFeat {
                    xj[a]
                } else {
                    xj[a] - xi[a]
                }
            }));
            linear(&gc.h1.weight, &gc.h1.bias, &u).into_iter().map(gelu).collect()
        })
        .collect();
    let inner: Vec<f64> = (0..edges[0].len())
        .map(|q| edges.iter().map(|e| e[q]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let outs: Vec<Vec<f64>> = edges
        .iter()
        .map(|e| linear(&gc.h2.weight, &gc.h2.bias, &[e.as_slice(), &inner].concat()))
        .collect();
    (0..outs[0].len())
        .map(|q| outs.iter().map(|o| o[q]).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

fn random_cloud(n: usize, c: usize, rng: &mut RngStream) -> PointCloud<f64> {
    PointCloud::new(
        (0..n).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect(),
        (0..n * c).map(|_| rng.normal()).collect(),
        c,
    )
    .unwrap()
}

#[test]
fn criterion_3_tokenizer_fidelity() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let (mut oracle_err, mut perm_err, mut trans_err) = (0.0f64, 0.0f64, 0.0f64);
    let mut tokens = 0;
    for seed in 0..20u64 {
        let mut rng = RngStream::new(seed, 0);
        let mode = [InputMode::Relative, InputMode::AbsPos, InputMode::AbsFeat][seed as usize % 3];
        let c = (seed % 4) as usize;
        let mut cfg = PointTokenizerConfig::new(c, 16);
        cfg.k = 2 + (seed as usize % 7);
        cfg.downsample_ratio = 4;
        cfg.input_mode = mode;
        let tok = PointTokenizer::<f64>::new(&cfg, &mut rng);
        let cl = random_cloud(16 + 4 * seed as usize, c, &mut rng);

        let (ts, _) = tok.forward(&cl, &cfg, 0).unwrap();
        let nbr = group(&cl.positions, cfg.n_centers(cl.len()), cfg.k, 0).unwrap();
        for (i, &center) in nbr.center_ids.iter().enumerate() {
            oracle_err = oracle_err.max(rel_err(
                ts.tokens.row(i),
                &token_oracle(&tok, &cl, center, nbr.row(i), mode),
            ));
            tokens += 1;
        }

        let mut shuffled = nbr.clone();
        for row in shuffled.neighbor_ids.chunks_mut(cfg.k) {
            rng.shuffle(row);
        }
        let run = |n| {
            tok.stages[0]
                .forward(&cl.positions, &cl.features, c, n, mode)
                .unwrap()
                .0
        };
        perm_err = perm_err.max(rel_err(&run(&nbr), &run(&shuffled)));

        let rel = PointTokenizerConfig {
            input_mode: InputMode::Relative,
            ..cfg.clone()
        };
        let t = [rng.normal() * 20.0, rng.normal() * 20.0, rng.normal() * 20.0];
        let mut moved = cl.clone();
        for p in moved.positions.iter_mut() {
            *p = [p[0] + t[0], p[1] + t[1], p[2] + t[2]];
        }
        let (a, _) = tok.forward(&cl, &rel, 0).unwrap();
        let (b, _) = tok.forward(&moved, &rel, 0).unwrap();
        trans_err = trans_err.max(rel_err(a.tokens.data(), b.tokens.data()));
        for (pa, pb) in a.center_pos.iter().zip(&b.center_pos) {
            for d in 0..3 {
                trans_err = trans_err.max((pa[d] + t[d] - pb[d]).abs() / pb[d].abs().max(1.0));
            }
        }
    }
    let pass = oracle_err <= TOKEN_REL && perm_err == 0.0 && trans_err <= TOKEN_REL;
    report(
        3,
        "batched tokenizer vs loop oracle, neighbor permutation, translation",
        pass,
        &format!(
            "{tokens} tokens, oracle rel err {oracle_err:.1e} <= {TOKEN_REL:e}, permutation diff {perm_err:e}, translation rel err {trans_err:.1e}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_transfer_mechanics() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dir = tempfile::tempdir().unwrap();

    // A briefly trained image encoder as the source.
    let image_cfg = ImageModelConfig {
        side: 16,
        channels: 1,
        patch: 4,
        n_classes: Family::Patches2d.n_classes(),
        backbone: ModelConfig::small(Task::Classification, 8, 0, 32, 2, 4).backbone,
    };
    let images = gen_patches2d::<f32>(&SyntheticTaskSpec::new(Family::Patches2d, 32, 0, 16, 1)).unwrap();
    let preset = TrainPreset {
        epochs: 1,
        warmup_epochs: 0,
        batch_size: 16,
        ..TrainPreset::toy()
    };
    let image_model = pretrain_images(&image_cfg, &preset, &images.train, 3, |_| {}).unwrap();
    let state = image_model.state();
    save_archive(&dir.path().join("img"), &state, serde_json::json!({})).unwrap();
    let back = read_archive(&dir.path().join("img")).unwrap().to_named::<f32>();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let round_trip = back.len() == state.len()
        && back
            .iter()
            .zip(state.iter())
            .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape() && bits(a) == bits(b));

    let mut cfg = ModelConfig::small(Task::Classification, 8, 0, 32, 2, 4);
    cfg.tokenizer.k = 8;
    cfg.tokenizer.downsample_ratio = 8;
    let data = gen_shapes8::<f32>(&SyntheticTaskSpec::new(Family::Shapes8, 8, 0, 64, 2))
        .unwrap()
        .train;
    let mut t = Trainer::<f32>::new(
        cfg,
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
    let rep = t.model.transfer_from(&back, &policy).unwrap();
    t.frozen = rep.frozen.clone();

    let mut seen: Vec<&str> = rep.matched.iter().map(String::as_str).collect();
    seen.extend(rep.skipped.iter().map(|(n, _)| n.as_str()));
    seen.extend(rep.mismatched.iter().map(|m| m.name.as_str()));
    seen.sort_unstable();
    let mut all: Vec<&str> = back.names().collect();
    all.sort_unstable();
    let expected_matched: BTreeSet<&str> = back
        .names()
        .filter(|n| is_backbone_name(n) || *n == "cls_token")
        .collect();
    let partition = seen == all
        && rep.mismatched.is_empty()
        && rep.matched.iter().map(String::as_str).collect::<BTreeSet<_>>() == expected_matched
        && rep.skipped.iter().all(|(n, r)| match r {
            SkipReason::Policy => n.starts_with("patch_embed.") || n.starts_with("head."),
            SkipReason::Disabled => n == "pos_embed",
            SkipReason::Unknown => false,
        });

    let before: Vec<(String, Tensor<f32>)> = t.model.named().into_iter().map(|(n, x)| (n, x.clone())).collect();
    for step in 0..50u64 {
        let ids = [
            (step as usize * 4) % 8,
            (step as usize * 4 + 1) % 8,
            (step as usize * 4 + 2) % 8,
            (step as usize * 4 + 3) % 8,
        ];
        let (views, starts): (Vec<_>, Vec<_>) = ids.iter().map(|&i| t.train_view(&data[i], 0, i)).unzip();
        let refs: Vec<&PointCloud<f32>> = views.iter().collect();
        let mut d = RngStream::keyed(4, Purpose::Dropout, 0, step);
        t.train_step(&refs, &starts, &mut d).unwrap();
    }
    let (mut moved_backbone, mut tok_changed, mut tok_total, mut dec_changed, mut dec_total) = (0, 0, 0, 0, 0);
    for ((name, a), (_, b)) in before.iter().zip(t.model.named()) {
        if is_backbone_name(name) {
            moved_backbone += usize::from(bits(a) != bits(b));
        } else if name.starts_with("tokenizer.") {
            tok_total += 1;
            tok_changed += usize::from(a != b);
        } else if name.starts_with("head.") {
            dec_total += 1;
            dec_changed += usize::from(a != b);
        }
    }
    let frozen_ok = moved_backbone == 0 && tok_changed == tok_total && tok_total > 0 && dec_changed > 0;
    let pass = round_trip && partition && frozen_ok;
    report(
        4,
        "archive round-trip, transfer partition, frozen 50-step run",
        pass,
        &format!(
            "round-trip bit-exact {round_trip}, {} entries partitioned {partition} ({} matched), backbone tensors moved {moved_backbone}, tokenizer changed {tok_changed}/{tok_total}, decoder changed {dec_changed}/{dec_total}",
            back.len(),
            rep.matched.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_overfit() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let data = gen_shapes8::<f32>(&SyntheticTaskSpec::new(Family::Shapes8, 8, 0, 256, 0))
        .unwrap()
        .train;
    // Regularizers off: no dropout, augmentation or label smoothing.
    let cfg = ModelConfig {
        head_dropout: 0.0,
        ..ModelConfig::small(Task::Classification, 8, 0, 64, 2, 4)
    };
    let preset = TrainPreset {
        lr: OVERFIT_LR,
        augmentations: vec![],
        label_smoothing: 0.0,
        batch_size: 8,
        ..TrainPreset::toy()
    };
    let mut t = Trainer::<f32>::new(cfg.clone(), preset, 0, 8).unwrap();
    let refs: Vec<&PointCloud<f32>> = data.iter().collect();
    let starts = [0usize; 8];
    let (mut loss, mut acc, mut reached) = (f64::INFINITY, 0.0, None);
    for step in 0..200u64 {
        let mut d = RngStream::keyed(0, Purpose::Dropout, 0, step);
        loss = t.step_with_lr(&refs, &starts, &mut d, OVERFIT_LR).unwrap().loss as f64;
        let (logits, _) = t.model.forward(&cfg, &refs, &starts, &mut Mode::Eval).unwrap();
        let pred: Vec<u32> = logits.iter().map(|l| argmax(l.data())).collect();
        let truth: Vec<u32> = data
            .iter()
            .map(|c| match c.labels {
                Labels::Cloud(l) => l,
                _ => unreachable!("shapes8 carries cloud labels"),
            })
            .collect();
        acc = compute_metrics(&pred, &truth, 8).unwrap().oa;
        if acc == 100.0 && loss < OVERFIT_LOSS {
            reached = Some(step + 1);
            break;
        }
    }
    let pass = reached.is_some();
    report(
        5,
        "overfit 8 shapes8 clouds, depth 2, dim 64, 200 steps",
        pass,
        &format!(
            "{}, train accuracy {acc:.1}%, loss {loss:.4} < {OVERFIT_LOSS}",
            reached.map_or("not reached".into(), |s| format!("reached at step {s}"))
        ),
    );
    assert!(pass);
}

fn argmax(v: &[f32]) -> u32 {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best as u32
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Pretrains once on 2000 images, then finetunes scratch and pretrained
/// inits on 64 clouds for 30 epochs over five seeds. The ordering of the
/// medians is reported, not asserted; see the README for measured values.
#[test]
fn criterion_6_toy_transfer() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dir = tempfile::tempdir().unwrap();
    let base = ExperimentConfig::parse(
        r#"
[data]
n_train = 64
n_val = 128
[train]
epochs = 30
[pretrain]
images = 2000
epochs = 28
"#,
        false,
    )
    .unwrap();
    let t0 = Instant::now();
    let pre = run_pretrain(&base, dir.path(), |_| {}).unwrap();
    let pretrain_secs = t0.elapsed().as_secs_f64();

    let mut arms: [(Vec<f64>, Vec<f64>); 2] = Default::default();
    for seed in 1..=5u64 {
        for (arm, init) in [None, Some(&pre.path)].into_iter().enumerate() {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.output.dir = format!("run_{arm}_{seed}");
            cfg.init = init.map(|p| toml::from_str(&format!("path = {:?}", p.to_str().unwrap())).unwrap());
            let s = run_experiment(&cfg, dir.path(), RunOptions::default(), |_| {}).unwrap();
            arms[arm].0.push(s.final_val().unwrap().oa);
            arms[arm].1.push(s.best.value);
            assert_eq!(s.transfer.is_some(), init.is_some());
        }
    }
    let (scratch, pretrained) = (median(arms[0].0.clone()), median(arms[1].0.clone()));
    let (scratch_best, pretrained_best) = (median(arms[0].1.clone()), median(arms[1].1.clone()));
    report(
        6,
        "toy transfer, median final val OA over 5 seeds, pretrained >= scratch",
        pretrained >= scratch,
        &format!(
            "pretrained {pretrained:.2} vs scratch {scratch:.2}; best-epoch medians {pretrained_best:.2} vs {scratch_best:.2}; pretrain val acc {:.1}% in {pretrain_secs:.0}s; per seed scratch {:?} pretrained {:?}",
            pre.val_accuracy, arms[0].0, arms[1].0
        ),
    );
    assert_eq!(arms[0].0.len() + arms[1].0.len(), 10);
}

#[test]
fn criterion_7_metrics() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let imbalanced_truth: Vec<u32> = [0; 10].into_iter().chain([1]).collect();
    let imbalanced_pred: Vec<u32> = [0; 9].into_iter().chain([1, 0]).collect();
    #[rustfmt::skip]
    let cases: Vec<(Vec<u32>, Vec<u32>, usize, [f64; 3])> = vec![
        (vec![0, 1, 2], vec![0, 1, 2], 3, [100.0, 100.0, 100.0]),
        (vec![0, 0, 0, 0], vec![0, 0, 1, 1], 2, [50.0, 50.0, 25.0]),
        (vec![1], vec![1], 4, [100.0, 100.0, 100.0]),
        (vec![0, 1, 1], vec![0, 0, 1], 2, [200.0 / 3.0, 75.0, 50.0]),
        (vec![0, 1, 0, 1], vec![0, 1, 1, 0], 3, [50.0, 50.0, 100.0 / 3.0]),
        (vec![2, 0], vec![0, 0], 3, [50.0, 50.0, 25.0]),
        (vec![1, 0], vec![0, 1], 2, [0.0, 0.0, 0.0]),
        (vec![0, 0, 1, 1, 2, 2], vec![0, 0, 0, 1, 1, 2], 3,
         [400.0 / 6.0, (2.0 / 3.0 + 0.5 + 1.0) / 3.0 * 100.0, (2.0 / 3.0 + 1.0 / 3.0 + 0.5) / 3.0 * 100.0]),
        (imbalanced_pred, imbalanced_truth, 2, [900.0 / 11.0, 45.0, 9.0 / 11.0 * 50.0]),
        (vec![3, 3, 0, 1], vec![3, 2, 0, 0], 4, [50.0, (0.5 + 0.0 + 1.0) / 3.0 * 100.0, (0.5 + 0.0 + 0.0 + 0.5) / 4.0 * 100.0]),
    ];
    let mut worst = 0.0f64;
    for (pred, truth, k, want) in &cases {
        let m = compute_metrics(pred, truth, *k).unwrap();
        for (got, want) in [m.oa, m.macc, m.miou].iter().zip(want) {
            worst = worst.max((got - want).abs());
        }
    }
    let pass = cases.len() == 10 && worst <= METRIC_ABS;
    report(
        7,
        "metrics on 10 hand-computed confusion matrices",
        pass,
        &format!("{} cases, max abs err {worst:.1e} <= {METRIC_ABS:e}", cases.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_8_determinism() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let logs: Vec<String> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let o = std::process::Command::new(env!("CARGO_BIN_EXE_crosstok"))
                .args([
                    "--workdir",
                    dir.path().to_str().unwrap(),
                    "train",
                    "--seed",
                    "7",
                    "--epochs",
                    "2",
                ])
                .output()
                .unwrap();
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
            read_log(&dir.path().join("runs/default")).unwrap()
        })
        .collect();
    let pass = logs[0] == logs[1] && logs[0].lines().count() == 5;
    report(
        8,
        "two runs of train --seed 7 --epochs 2 give identical metric logs",
        pass,
        &format!(
            "{} lines, {} bytes, identical {}",
            logs[0].lines().count(),
            logs[0].len(),
            logs[0] == logs[1]
        ),
    );
    assert!(pass);
}
