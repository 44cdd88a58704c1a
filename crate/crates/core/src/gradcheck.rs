//! Central finite-difference checks of every hand-written backward pass.
//!
//! Each suite builds a small random instance in `f64`, reduces its output to
//! a scalar with fixed random weights (or the real training loss for the
//! end-to-end suites), and compares the analytic gradient of a sample of
//! entries per tensor against `(f(x + h) - f(x - h)) / 2h`.
//!
//! Max-pooling and ReLU are piecewise linear. An entry whose one-sided
//! differences disagree sharply straddles a kink; it is counted and skipped
//! rather than compared.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::{Backbone, BackboneConfig, PosEmbed};
use crate::decoders::{ClassifierHead, GlobalSource, SegInput, SegmenterConfig, SegmenterHead};
use crate::error::{Error, Result};
use crate::geometry::{Labels, PointCloud};
use crate::model::{ModelConfig, PointModel, Task};
use crate::nn::{Mode, NormKind};
use crate::params::{join, Params};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::tokenizer::{InputMode, PointTokenizer, PointTokenizerConfig, TokenSet};

/// Pass threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const FLOOR: f64 = 1e-5;
/// One-sided slopes differing by more than this fraction mark a kink.
pub const KINK: f64 = 1e-2;
/// Entries sampled per tensor (all entries of smaller tensors).
pub const SAMPLES_PER_TENSOR: usize = 8;

pub const SUITES: [&str; 6] = [
    "tokenizer",
    "backbone",
    "classifier",
    "segmenter",
    "end_to_end_cls",
    "end_to_end_seg",
];

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Outcome of one suite on one seed, or merged over several.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckStats {
    pub checked: usize,
    pub kinks: usize,
    pub max_rel_err: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
}

impl CheckStats {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE && self.checked > 0
    }

    pub fn merge(&mut self, other: &CheckStats) {
        self.checked += other.checked;
        self.kinks += other.kinks;
        if other.max_rel_err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
            self.worst = other.worst.clone();
        }
    }
}

/// Compares `analytic` against finite differences of `f` around `point`.
pub fn check_params<P: Params<f64>>(
    point: &P,
    analytic: &P,
    f: impl Fn(&P) -> Result<f64>,
    rng: &mut RngStream,
) -> Result<CheckStats> {
    let f0 = f(point)?;
    let grads: Vec<(String, Vec<f64>)> = analytic
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.data().to_vec()))
        .collect();
    let mut stats = CheckStats::default();
    let mut probe = point.clone();
    for (ti, (name, g)) in grads.iter().enumerate() {
        let n = g.len();
        let picks: Vec<usize> = if n <= SAMPLES_PER_TENSOR {
            (0..n).collect()
        } else {
            (0..SAMPLES_PER_TENSOR).map(|_| rng.below(n)).collect()
        };
        for idx in picks {
            let orig = point.named()[ti].1.data()[idx];
            let mut eval_at = |v: f64| -> Result<f64> {
                probe.named_mut()[ti].1.data_mut()[idx] = v;
                let r = f(&probe);
                probe.named_mut()[ti].1.data_mut()[idx] = orig;
                r
            };
            let fp = eval_at(orig + STEP)?;
            let fm = eval_at(orig - STEP)?;
            let forward = (fp - f0) / STEP;
            let backward = (f0 - fm) / STEP;
            let scale = forward.abs().max(backward.abs()).max(FLOOR * 100.0);
            if (forward - backward).abs() > KINK * scale {
                stats.kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * STEP);
            let err = rel_err(g[idx], numeric);
            stats.checked += 1;
            if err > stats.max_rel_err || stats.worst.is_empty() {
                stats.max_rel_err = stats.max_rel_err.max(err);
                stats.worst = format!("{name}[{idx}]");
            }
        }
    }
    Ok(stats)
}

/// Adds `N(0, scale²)` noise to every learnable tensor so that layer-norm
/// gains, biases and the like are not at their special initial values.
pub fn perturb<P: Params<f64>>(p: &mut P, scale: f64, rng: &mut RngStream) {
    for (_, t) in p.named_mut() {
        for v in t.data_mut() {
            *v += scale * rng.normal();
        }
    }
}

/// A free-standing tensor checked like a parameter (e.g. network inputs).
#[derive(Debug, Clone, PartialEq)]
pub struct Input {
    pub name: &'static str,
    pub value: Tensor<f64>,
}

impl Params<f64> for Input {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<f64>)>) {
        out.push((join(prefix, self.name), &self.value));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<f64>)>) {
        out.push((join(prefix, self.name), &mut self.value));
    }
}

fn weights(n: usize, rng: &mut RngStream) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn weighted(out: &[f64], w: &[f64]) -> f64 {
    out.iter().zip(w).map(|(a, b)| a * b).sum()
}

fn random_cloud(n: usize, c_in: usize, rng: &mut RngStream) -> PointCloud<f64> {
    let pos = (0..n).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect();
    let feat = (0..n * c_in).map(|_| rng.normal()).collect();
    PointCloud {
        positions: pos,
        features: feat,
        c_in,
        labels: Labels::None,
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect())
}

/// Tokenizer parameters and input features; stage count and input mode vary
/// with the seed.
pub fn suite_tokenizer(seed: u64) -> Result<CheckStats> {
    let mut rng = RngStream::new(seed, 0x7001);
    let modes = [InputMode::Relative, InputMode::AbsPos, InputMode::AbsFeat];
    let cfg = PointTokenizerConfig {
        c_in: 3,
        dim: 8,
        hidden: 4,
        k: 6,
        downsample_ratio: 4,
        input_mode: modes[(seed % 3) as usize],
        stages: 1 + (seed % 2) as usize,
    };
    let mut tok = PointTokenizer::<f64>::new(&cfg, &mut rng);
    perturb(&mut tok, 0.1, &mut rng);
    let cloud = random_cloud(32, cfg.c_in, &mut rng);
    let n_c = cfg.n_centers(cloud.len());
    let w_tok = weights(n_c * cfg.dim, &mut rng);
    let w_cls = weights(cfg.dim, &mut rng);
    let start = rng.below(cloud.len());

    let (_, cache) = tok.forward(&cloud, &cfg, start)?;
    let mut grad = tok.zeros_like();
    let d_feat = tok.backward(&cache, &w_tok, &w_cls, &cfg, &mut grad);

    let loss = |t: &PointTokenizer<f64>, c: &PointCloud<f64>| -> Result<f64> {
        let (ts, _) = t.forward(c, &cfg, start)?;
        Ok(weighted(ts.tokens.data(), &w_tok) + weighted(ts.cls.data(), &w_cls))
    };
    let mut stats = check_params(&tok, &grad, |t| loss(t, &cloud), &mut rng)?;
    let input = Input {
        name: "input.features",
        value: Tensor::matrix(cloud.len(), cfg.c_in, cloud.features.clone()),
    };
    let d_input = Input {
        name: "input.features",
        value: Tensor::matrix(cloud.len(), cfg.c_in, d_feat),
    };
    let feat_stats = check_params(
        &input,
        &d_input,
        |x| {
            let mut c = cloud.clone();
            c.features = x.value.data().to_vec();
            loss(&tok, &c)
        },
        &mut rng,
    )?;
    stats.merge(&feat_stats);
    Ok(stats)
}

/// Every backbone tensor on a depth-2, width-8 encoder, including dropout
/// masks held fixed; positional embedding and norm placement vary with the
/// seed.
pub fn suite_backbone(seed: u64) -> Result<CheckStats> {
    let mut rng = RngStream::new(seed, 0x7002);
    let mut cfg = BackboneConfig::new(8, 2, 2);
    cfg.prenorm = seed % 4 != 3;
    cfg.dropout = if seed.is_multiple_of(2) { 0.0 } else { 0.2 };
    let n = 5;
    let pos = match seed % 3 {
        0 => PosEmbed::coord(cfg.dim, &mut rng),
        1 => PosEmbed::learned(n + 1, cfg.dim, &mut rng),
        _ => PosEmbed::None,
    };
    let mut bb = Backbone::<f64>::new(&cfg, pos, &mut rng);
    perturb(&mut bb, 0.1, &mut rng);
    let tokens = TokenSet {
        center_pos: (0..n).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect(),
        tokens: random_matrix(n, cfg.dim, &mut rng),
        cls: random_matrix(1, cfg.dim, &mut rng),
    };
    let w = weights((n + 1) * cfg.dim, &mut rng);
    let dropout_seed = rng.next_u64();

    let run = |b: &Backbone<f64>, t: &TokenSet<f64>| {
        let mut d = RngStream::new(dropout_seed, 0);
        b.forward(t, &cfg, &mut Mode::Train(&mut d))
    };
    let (_, cache) = run(&bb, &tokens)?;
    let mut grad = bb.zeros_like();
    let (d_tok, d_cls) = bb.backward(&cache, &w, &cfg, &mut grad);
    let mut stats = check_params(&bb, &grad, |b| Ok(weighted(run(b, &tokens)?.0.data(), &w)), &mut rng)?;

    let input = Input {
        name: "input.tokens",
        value: tokens.tokens.clone(),
    };
    let d_input = Input {
        name: "input.tokens",
        value: Tensor::matrix(n, cfg.dim, d_tok),
    };
    stats.merge(&check_params(
        &input,
        &d_input,
        |x| {
            let mut t = tokens.clone();
            t.tokens = x.value.clone();
            Ok(weighted(run(&bb, &t)?.0.data(), &w))
        },
        &mut rng,
    )?);
    let cls_in = Input {
        name: "input.cls",
        value: tokens.cls.clone(),
    };
    let d_cls_in = Input {
        name: "input.cls",
        value: Tensor::matrix(1, cfg.dim, d_cls),
    };
    stats.merge(&check_params(
        &cls_in,
        &d_cls_in,
        |x| {
            let mut t = tokens.clone();
            t.cls = x.value.clone();
            Ok(weighted(run(&bb, &t)?.0.data(), &w))
        },
        &mut rng,
    )?);
    Ok(stats)
}

/// A batch of wrapped feature matrices, so per-sample input gradients can be
/// checked through one `Params` value.
#[derive(Debug, Clone, PartialEq)]
struct Batch(Vec<Tensor<f64>>);

impl Params<f64> for Batch {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<f64>)>) {
        for (i, t) in self.0.iter().enumerate() {
            out.push((join(prefix, &format!("input.{i}")), t));
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<f64>)>) {
        for (i, t) in self.0.iter_mut().enumerate() {
            out.push((join(prefix, &format!("input.{i}")), t));
        }
    }
}

fn norm_for(seed: u64) -> NormKind {
    if seed.is_multiple_of(2) {
        NormKind::Batch
    } else {
        NormKind::Layer
    }
}

/// Classifier head in training mode (batch statistics, fixed dropout mask)
/// on a batch of three samples.
pub fn suite_classifier(seed: u64) -> Result<CheckStats> {
    let mut rng = RngStream::new(seed, 0x7003);
    let (dim, k, b) = (8, 4, 3);
    let mut head = ClassifierHead::<f64>::new(dim, k, norm_for(seed), 0.2, &mut rng);
    perturb(&mut head, 0.1, &mut rng);
    let feats = Batch((0..b).map(|_| random_matrix(6, dim, &mut rng)).collect());
    let w = weights(b * k, &mut rng);
    let dropout_seed = rng.next_u64();
    let run = |h: &ClassifierHead<f64>, x: &Batch| {
        let refs: Vec<&Tensor<f64>> = x.0.iter().collect();
        let mut d = RngStream::new(dropout_seed, 0);
        h.forward(&refs, &mut Mode::Train(&mut d))
    };
    let (_, cache) = run(&head, &feats)?;
    let mut grad = head.zeros_like();
    let d_in = Batch(head.backward(&cache, &w, &mut grad));
    let mut stats = check_params(&head, &grad, |h| Ok(weighted(run(h, &feats)?.0.data(), &w)), &mut rng)?;
    stats.merge(&check_params(
        &feats,
        &d_in,
        |x| Ok(weighted(run(&head, x)?.0.data(), &w)),
        &mut rng,
    )?);
    Ok(stats)
}

/// Segmentation head on two samples; global source, interpolation stages
/// and the globals switch vary with the seed.
pub fn suite_segmenter(seed: u64) -> Result<CheckStats> {
    let mut rng = RngStream::new(seed, 0x7004);
    let (dim, k) = (8, 3);
    let cfg = SegmenterConfig {
        globals: seed % 5 != 4,
        global_source: if seed.is_multiple_of(2) {
            GlobalSource::Backbone
        } else {
            GlobalSource::Interpolated
        },
        interp_stages: 1 + (seed % 2) as usize,
        dropout: 0.2,
    };
    let mut head = SegmenterHead::<f64>::new(dim, k, norm_for(seed / 2), cfg, &mut rng);
    perturb(&mut head, 0.1, &mut rng);
    let n_tok = 4;
    let samples: Vec<(Vec<[f64; 3]>, Vec<[f64; 3]>)> = (0..2)
        .map(|_| {
            let tp = (0..n_tok).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect();
            let rp = (0..12).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect();
            (tp, rp)
        })
        .collect();
    let feats = Batch((0..2).map(|_| random_matrix(n_tok + 1, dim, &mut rng)).collect());
    let w: Vec<Vec<f64>> = (0..2).map(|_| weights(12 * k, &mut rng)).collect();
    let dropout_seed = rng.next_u64();
    let run = |h: &SegmenterHead<f64>, x: &Batch| -> Result<f64> {
        let inputs: Vec<SegInput<'_, f64>> =
            x.0.iter()
                .zip(&samples)
                .map(|(f, (tp, rp))| SegInput {
                    features: f,
                    token_pos: tp,
                    raw_pos: rp,
                })
                .collect();
        let mut d = RngStream::new(dropout_seed, 0);
        let (out, _) = h.forward(&inputs, &mut Mode::Train(&mut d))?;
        Ok(out.iter().zip(&w).map(|(o, w)| weighted(o.data(), w)).sum())
    };
    let inputs: Vec<SegInput<'_, f64>> = feats
        .0
        .iter()
        .zip(&samples)
        .map(|(f, (tp, rp))| SegInput {
            features: f,
            token_pos: tp,
            raw_pos: rp,
        })
        .collect();
    let mut d = RngStream::new(dropout_seed, 0);
    let (_, cache) = head.forward(&inputs, &mut Mode::Train(&mut d))?;
    let d_logits: Vec<Tensor<f64>> = w.iter().map(|w| Tensor::matrix(12, k, w.clone())).collect();
    let mut grad = head.zeros_like();
    let d_in = Batch(head.backward(&cache, &d_logits, &mut grad));
    let mut stats = check_params(&head, &grad, |h| run(h, &feats), &mut rng)?;
    stats.merge(&check_params(&feats, &d_in, |x| run(&head, x), &mut rng)?);
    Ok(stats)
}

fn end_to_end(seed: u64, task: Task) -> Result<CheckStats> {
    let mut rng = RngStream::new(seed, 0x7005 + task as u64);
    let k = 4;
    let mut cfg = ModelConfig::small(task, k, 3, 16, 2, 2);
    cfg.tokenizer.k = 8;
    cfg.tokenizer.downsample_ratio = 4;
    cfg.backbone.dropout = 0.1;
    cfg.head_dropout = 0.2;
    cfg.segmenter.dropout = 0.2;
    cfg.head_norm = norm_for(seed);
    let mut model = PointModel::<f64>::new(&cfg, &mut rng)?;
    perturb(&mut model, 0.05, &mut rng);
    let clouds: Vec<PointCloud<f64>> = (0..2)
        .map(|i| {
            let c = random_cloud(32, 3, &mut rng);
            let labels = match task {
                Task::Classification => Labels::Cloud(i as u32 % k as u32),
                Task::Segmentation => Labels::Points((0..32).map(|_| rng.below(k) as u32).collect()),
            };
            c.with_labels(labels)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&PointCloud<f64>> = clouds.iter().collect();
    let starts = [rng.below(32), rng.below(32)];
    let dropout_seed = rng.next_u64();
    let loss = |m: &PointModel<f64>| -> Result<_> {
        let mut d = RngStream::new(dropout_seed, 0);
        m.loss_grad(&cfg, &refs, &starts, 0.2, &mut Mode::Train(&mut d))
    };
    let out = loss(&model)?;
    check_params(&model, &out.grad, |m| Ok(loss(m)?.loss), &mut rng)
}

/// Gradient of the smoothed cross-entropy with respect to every trainable
/// tensor of a full classification pipeline (`N = 32`, `C = 16`, depth 2).
pub fn suite_end_to_end_cls(seed: u64) -> Result<CheckStats> {
    end_to_end(seed, Task::Classification)
}

pub fn suite_end_to_end_seg(seed: u64) -> Result<CheckStats> {
    end_to_end(seed, Task::Segmentation)
}

pub fn run_suite(name: &str, seed: u64) -> Result<CheckStats> {
    match name {
        "tokenizer" => suite_tokenizer(seed),
        "backbone" => suite_backbone(seed),
        "classifier" => suite_classifier(seed),
        "segmenter" => suite_segmenter(seed),
        "end_to_end_cls" => suite_end_to_end_cls(seed),
        "end_to_end_seg" => suite_end_to_end_seg(seed),
        other => Err(Error::InvalidArgument(format!("unknown gradient suite {other:?}"))),
    }
}

/// Result of one suite over a range of seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub seeds: usize,
    pub stats: CheckStats,
}

/// Every suite over `seeds`.
pub fn run_all(seeds: core::ops::Range<u64>) -> Result<Vec<SuiteReport>> {
    let mut out = vec![];
    for suite in SUITES {
        let mut stats = CheckStats::default();
        for seed in seeds.clone() {
            stats.merge(&run_suite(suite, seed)?);
        }
        out.push(SuiteReport {
            suite,
            seeds: seeds.clone().count(),
            stats,
        });
    }
    Ok(out)
}
