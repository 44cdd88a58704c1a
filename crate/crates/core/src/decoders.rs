//! Task decoders on top of backbone features (`[cls ; tokens]` rows).

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::geometry::{farthest_point_sample, Interpolation};
use crate::nn::{apply_mask, Linear, Mode, Norm, NormCache, NormKind};
use crate::params::{join, Params};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn relu_in_place<S: Scalar>(x: &mut [S]) {
    for v in x.iter_mut() {
        if *v < S::zero() {
            *v = S::zero();
        }
    }
}

/// Zeroes gradients where the forward ReLU output was zero.
fn relu_back<S: Scalar>(out: &[S], d: &mut [S]) {
    for (dv, &o) in d.iter_mut().zip(out) {
        if o <= S::zero() {
            *dv = S::zero();
        }
    }
}

/// Elementwise max over rows `1..` of a `[cls ; tokens]` matrix, with the
/// winning row per channel (lowest index on ties).
fn token_max<S: Scalar>(features: &Tensor<S>) -> (Vec<S>, Vec<usize>) {
    let c = features.cols();
    let mut best = features.row(1).to_vec();
    let mut arg = vec![1usize; c];
    for r in 2..features.rows() {
        for (q, &v) in features.row(r).iter().enumerate() {
            if v > best[q] {
                best[q] = v;
                arg[q] = r;
            }
        }
    }
    (best, arg)
}

/// Linear → norm → ReLU → dropout, the hidden unit of both heads.
#[derive(Debug, Clone)]
struct HiddenCache<S> {
    input: Vec<S>,
    norm: NormCache<S>,
    out: Vec<S>,
    mask: Option<Vec<S>>,
}

fn hidden_forward<S: Scalar>(
    fc: &Linear<S>,
    norm: &Norm<S>,
    input: Vec<S>,
    rows: usize,
    dropout: f64,
    mode: &mut Mode<'_>,
) -> (Vec<S>, HiddenCache<S>) {
    let h = fc.forward(&input, rows);
    let (mut out, nc) = norm.forward(&h, rows, mode.is_train());
    relu_in_place(&mut out);
    let mask = mode.dropout_mask(out.len(), dropout);
    let mut dropped = out.clone();
    apply_mask(&mut dropped, &mask);
    (
        dropped,
        HiddenCache {
            input,
            norm: nc,
            out,
            mask,
        },
    )
}

fn hidden_backward<S: Scalar>(
    fc: &Linear<S>,
    norm: &Norm<S>,
    cache: &HiddenCache<S>,
    d_out: &[S],
    rows: usize,
    g_fc: &mut Linear<S>,
    g_norm: &mut Norm<S>,
) -> Vec<S> {
    let mut d = d_out.to_vec();
    apply_mask(&mut d, &cache.mask);
    relu_back(&cache.out, &mut d);
    let dh = norm.backward(&cache.norm, &d, g_norm);
    fc.backward(&cache.input, &dh, rows, g_fc)
}

/// Three linear layers `2C → C → C/2 → K` on `[max-pooled tokens ; cls]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<S> {
    pub fc1: Linear<S>,
    pub norm1: Norm<S>,
    pub fc2: Linear<S>,
    pub norm2: Norm<S>,
    pub fc3: Linear<S>,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct ClassifierCache<S> {
    batch: usize,
    /// Per sample: row count and winning row per channel.
    pool: Vec<(usize, Vec<usize>)>,
    h1: HiddenCache<S>,
    h2: HiddenCache<S>,
    fc3_in: Vec<S>,
}

impl<S: Scalar> ClassifierHead<S> {
    pub fn new(dim: usize, n_classes: usize, norm: NormKind, dropout: f64, rng: &mut RngStream) -> Self {
        let half = (dim / 2).max(1);
        ClassifierHead {
            fc1: Linear::new(2 * dim, dim, rng),
            norm1: Norm::new(norm, dim),
            fc2: Linear::new(dim, half, rng),
            norm2: Norm::new(norm, half),
            fc3: Linear::new(half, n_classes, rng),
            dropout,
        }
    }

    pub fn dim(&self) -> usize {
        self.fc1.fan_in() / 2
    }

    pub fn n_classes(&self) -> usize {
        self.fc3.fan_out()
    }

    /// The `2C` pooled input of one sample.
    pub fn pool(features: &Tensor<S>) -> (Vec<S>, Vec<usize>) {
        let (mut pooled, arg) = token_max(features);
        pooled.extend_from_slice(features.row(0));
        (pooled, arg)
    }

    /// `B × K` logits for a batch of backbone outputs. Normalization
    /// statistics are shared across the batch in training mode.
    pub fn forward(&self, batch: &[&Tensor<S>], mode: &mut Mode<'_>) -> Result<(Tensor<S>, ClassifierCache<S>)> {
        if self.n_classes() < 2 {
            return Err(Error::InvalidArgument("at least two classes required".into()));
        }
        if batch.is_empty() {
            return Err(Error::EmptyInput("classifier batch"));
        }
        let c = self.dim();
        let mut input = Vec::with_capacity(batch.len() * 2 * c);
        let mut pool = Vec::with_capacity(batch.len());
        for f in batch {
            if f.cols() != c || f.rows() < 2 {
                return Err(shape_err!(
                    "classifier expects [cls ; tokens] rows of width {}, got {:?}",
                    c,
                    f.shape()
                ));
            }
            let (p, arg) = Self::pool(f);
            input.extend_from_slice(&p);
            pool.push((f.rows(), arg));
        }
        let b = batch.len();
        let (x1, h1) = hidden_forward(&self.fc1, &self.norm1, input, b, self.dropout, mode);
        let (x2, h2) = hidden_forward(&self.fc2, &self.norm2, x1, b, self.dropout, mode);
        let logits = self.fc3.forward(&x2, b);
        Ok((
            Tensor::matrix(b, self.n_classes(), logits),
            ClassifierCache {
                batch: b,
                pool,
                h1,
                h2,
                fc3_in: x2,
            },
        ))
    }

    /// Gradients with respect to each sample's backbone output.
    pub fn backward(&self, cache: &ClassifierCache<S>, d_logits: &[S], grad: &mut Self) -> Vec<Tensor<S>> {
        let b = cache.batch;
        let c = self.dim();
        let d2 = self.fc3.backward(&cache.fc3_in, d_logits, b, &mut grad.fc3);
        let d1 = hidden_backward(
            &self.fc2,
            &self.norm2,
            &cache.h2,
            &d2,
            b,
            &mut grad.fc2,
            &mut grad.norm2,
        );
        let d_in = hidden_backward(
            &self.fc1,
            &self.norm1,
            &cache.h1,
            &d1,
            b,
            &mut grad.fc1,
            &mut grad.norm1,
        );
        cache
            .pool
            .iter()
            .enumerate()
            .map(|(s, (rows, arg))| {
                let row = &d_in[s * 2 * c..(s + 1) * 2 * c];
                let mut d = Tensor::zeros(&[*rows, c]);
                d.row_mut(0).copy_from_slice(&row[c..]);
                for q in 0..c {
                    d.data_mut()[arg[q] * c + q] += row[q];
                }
                d
            })
            .collect()
    }

    pub fn update_running(&mut self, cache: &ClassifierCache<S>) {
        self.norm1.update_running(&cache.h1.norm);
        self.norm2.update_running(&cache.h2.norm);
    }
}

impl<S: Scalar> Params<S> for ClassifierHead<S> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<S>)>) {
        self.fc1.visit(&join(prefix, "fc1"), out);
        self.norm1.visit(&join(prefix, "norm1"), out);
        self.fc2.visit(&join(prefix, "fc2"), out);
        self.norm2.visit(&join(prefix, "norm2"), out);
        self.fc3.visit(&join(prefix, "fc3"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<S>)>) {
        self.fc1.visit_mut(&join(prefix, "fc1"), out);
        self.norm1.visit_mut(&join(prefix, "norm1"), out);
        self.fc2.visit_mut(&join(prefix, "fc2"), out);
        self.norm2.visit_mut(&join(prefix, "norm2"), out);
        self.fc3.visit_mut(&join(prefix, "fc3"), out);
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<S>)>) {
        self.norm1.visit_buffers(&join(prefix, "norm1"), out);
        self.norm2.visit_buffers(&join(prefix, "norm2"), out);
    }

    fn visit_buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<S>)>) {
        self.norm1.visit_buffers_mut(&join(prefix, "norm1"), out);
        self.norm2.visit_buffers_mut(&join(prefix, "norm2"), out);
    }
}

/// Where the global max appended to every point is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum GlobalSource {
    /// Max over the backbone's point-token outputs.
    #[default]
    Backbone,
    /// Max over the interpolated per-point features.
    Interpolated,
}

/// Chain of 3-NN interpolations from token centers to the raw points.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationPlan<S> {
    steps: Vec<Interpolation<S>>,
}

impl<S: Scalar> InterpolationPlan<S> {
    /// With `stages > 1`, intermediate point sets are FPS subsets of the raw
    /// points whose sizes grow geometrically from `N_c` to `N`.
    pub fn new(token_pos: &[[S; 3]], raw_pos: &[[S; 3]], stages: usize) -> Result<Self> {
        if raw_pos.is_empty() {
            return Err(Error::EmptyInput("segmentation points"));
        }
        let stages = stages.max(1);
        let (nc, n) = (token_pos.len() as f64, raw_pos.len() as f64);
        let mut steps = Vec::with_capacity(stages);
        let mut from: Vec<[S; 3]> = token_pos.to_vec();
        for t in 1..stages {
            let count =
                num_traits::Float::round(nc * num_traits::Float::powf(n / nc, t as f64 / stages as f64)) as usize;
            let count = count.clamp(1, raw_pos.len());
            let ids = farthest_point_sample(raw_pos, count, 0)?;
            let to: Vec<[S; 3]> = ids.iter().map(|&i| raw_pos[i]).collect();
            steps.push(Interpolation::new(&from, &to)?);
            from = to;
        }
        steps.push(Interpolation::new(&from, raw_pos)?);
        Ok(InterpolationPlan { steps })
    }

    pub fn apply(&self, feat: &[S], c: usize) -> Vec<S> {
        let mut x = feat.to_vec();
        for s in &self.steps {
            x = s.apply(&x, c);
        }
        x
    }

    pub fn apply_transpose(&self, d: &[S], c: usize) -> Vec<S> {
        let mut x = d.to_vec();
        for s in self.steps.iter().rev() {
            x = s.apply_transpose(&x, c);
        }
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SegmenterConfig {
    /// Append `[global max ; cls]` to every point.
    pub globals: bool,
    pub global_source: GlobalSource,
    pub interp_stages: usize,
    pub dropout: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            globals: true,
            global_source: GlobalSource::Backbone,
            interp_stages: 1,
            dropout: 0.5,
        }
    }
}

/// Per-point projection on `[x_i ; global max ; cls]` (width `3C`, or `C`
/// without globals) to `K` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterHead<S> {
    pub fc1: Linear<S>,
    pub norm1: Norm<S>,
    pub fc2: Linear<S>,
    pub cfg: SegmenterConfig,
}

/// One sample's input to the segmentation head.
#[derive(Debug, Clone, Copy)]
pub struct SegInput<'a, S> {
    /// `[cls ; tokens]`, `(N_c + 1) × C`
    pub features: &'a Tensor<S>,
    pub token_pos: &'a [[S; 3]],
    pub raw_pos: &'a [[S; 3]],
}

#[derive(Debug, Clone)]
struct SegSample<S> {
    rows: usize,
    n_points: usize,
    plan: InterpolationPlan<S>,
    global_arg: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SegmenterCache<S> {
    samples: Vec<SegSample<S>>,
    total: usize,
    hidden: HiddenCache<S>,
    fc2_in: Vec<S>,
}

impl<S: Scalar> SegmenterHead<S> {
    pub fn new(dim: usize, n_classes: usize, norm: NormKind, cfg: SegmenterConfig, rng: &mut RngStream) -> Self {
        let width = if cfg.globals { 3 * dim } else { dim };
        SegmenterHead {
            fc1: Linear::new(width, dim, rng),
            norm1: Norm::new(norm, dim),
            fc2: Linear::new(dim, n_classes, rng),
            cfg,
        }
    }

    pub fn dim(&self) -> usize {
        self.fc1.fan_out()
    }

    pub fn n_classes(&self) -> usize {
        self.fc2.fan_out()
    }

    /// Per-point head input of one sample plus what backward needs.
    fn point_inputs(&self, s: &SegInput<'_, S>) -> Result<(Vec<S>, SegSample<S>)> {
        let c = self.dim();
        let f = s.features;
        let n_tok = f.rows().saturating_sub(1);
        if f.cols() != c || n_tok == 0 || s.token_pos.len() != n_tok {
            return Err(shape_err!(
                "segmenter got features {:?} for {} token centers, width {}",
                f.shape(),
                s.token_pos.len(),
                c
            ));
        }
        let plan = InterpolationPlan::new(s.token_pos, s.raw_pos, self.cfg.interp_stages)?;
        let x = plan.apply(&f.data()[c..], c);
        let n = s.raw_pos.len();
        if !self.cfg.globals {
            return Ok((
                x,
                SegSample {
                    rows: f.rows(),
                    n_points: n,
                    plan,
                    global_arg: Vec::new(),
                },
            ));
        }
        let (g, arg) = match self.cfg.global_source {
            GlobalSource::Backbone => token_max(f),
            GlobalSource::Interpolated => {
                let mut best = x[..c].to_vec();
                let mut arg = vec![0usize; c];
                for i in 1..n {
                    for q in 0..c {
                        if x[i * c + q] > best[q] {
                            best[q] = x[i * c + q];
                            arg[q] = i;
                        }
                    }
                }
                (best, arg)
            }
        };
        let mut input = Vec::with_capacity(n * 3 * c);
        for i in 0..n {
            input.extend_from_slice(&x[i * c..(i + 1) * c]);
            input.extend_from_slice(&g);
            input.extend_from_slice(f.row(0));
        }
        Ok((
            input,
            SegSample {
                rows: f.rows(),
                n_points: n,
                plan,
                global_arg: arg,
            },
        ))
    }

    /// Per-sample `N × K` logits.
    pub fn forward(
        &self,
        batch: &[SegInput<'_, S>],
        mode: &mut Mode<'_>,
    ) -> Result<(Vec<Tensor<S>>, SegmenterCache<S>)> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("segmenter batch"));
        }
        let mut input = Vec::new();
        let mut samples = Vec::with_capacity(batch.len());
        for s in batch {
            let (x, meta) = self.point_inputs(s)?;
            input.extend_from_slice(&x);
            samples.push(meta);
        }
        let total: usize = samples.iter().map(|s| s.n_points).sum();
        let (h, hidden) = hidden_forward(&self.fc1, &self.norm1, input, total, self.cfg.dropout, mode);
        let logits = self.fc2.forward(&h, total);
        let k = self.n_classes();
        let mut out = Vec::with_capacity(batch.len());
        let mut offset = 0;
        for s in &samples {
            out.push(Tensor::matrix(
                s.n_points,
                k,
                logits[offset * k..(offset + s.n_points) * k].to_vec(),
            ));
            offset += s.n_points;
        }
        Ok((
            out,
            SegmenterCache {
                samples,
                total,
                hidden,
                fc2_in: h,
            },
        ))
    }

    pub fn backward(&self, cache: &SegmenterCache<S>, d_logits: &[Tensor<S>], grad: &mut Self) -> Vec<Tensor<S>> {
        let c = self.dim();
        let mut d_all = Vec::with_capacity(cache.total * self.n_classes());
        for d in d_logits {
            d_all.extend_from_slice(d.data());
        }
        let dh = self.fc2.backward(&cache.fc2_in, &d_all, cache.total, &mut grad.fc2);
        let d_in = hidden_backward(
            &self.fc1,
            &self.norm1,
            &cache.hidden,
            &dh,
            cache.total,
            &mut grad.fc1,
            &mut grad.norm1,
        );
        let width = self.fc1.fan_in();
        let mut offset = 0;
        let mut out = Vec::with_capacity(cache.samples.len());
        for s in &cache.samples {
            let rows = &d_in[offset * width..(offset + s.n_points) * width];
            offset += s.n_points;
            let mut d_x = vec![S::zero(); s.n_points * c];
            let mut d_g = vec![S::zero(); c];
            let mut d_cls = vec![S::zero(); c];
            for i in 0..s.n_points {
                let r = &rows[i * width..(i + 1) * width];
                d_x[i * c..(i + 1) * c].copy_from_slice(&r[..c]);
                if self.cfg.globals {
                    for q in 0..c {
                        d_g[q] += r[c + q];
                        d_cls[q] += r[2 * c + q];
                    }
                }
            }
            let mut d_feat = Tensor::zeros(&[s.rows, c]);
            if self.cfg.globals && self.cfg.global_source == GlobalSource::Interpolated {
                for q in 0..c {
                    d_x[s.global_arg[q] * c + q] += d_g[q];
                }
            }
            let d_tok = s.plan.apply_transpose(&d_x, c);
            d_feat.data_mut()[c..].copy_from_slice(&d_tok);
            d_feat.row_mut(0).copy_from_slice(&d_cls);
            if self.cfg.globals && self.cfg.global_source == GlobalSource::Backbone {
                for q in 0..c {
                    d_feat.data_mut()[s.global_arg[q] * c + q] += d_g[q];
                }
            }
            out.push(d_feat);
        }
        out
    }

    pub fn update_running(&mut self, cache: &SegmenterCache<S>) {
        self.norm1.update_running(&cache.hidden.norm);
    }
}

impl<S: Scalar> Params<S> for SegmenterHead<S> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<S>)>) {
        self.fc1.visit(&join(prefix, "fc1"), out);
        self.norm1.visit(&join(prefix, "norm1"), out);
        self.fc2.visit(&join(prefix, "fc2"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<S>)>) {
        self.fc1.visit_mut(&join(prefix, "fc1"), out);
        self.norm1.visit_mut(&join(prefix, "norm1"), out);
        self.fc2.visit_mut(&join(prefix, "fc2"), out);
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<S>)>) {
        self.norm1.visit_buffers(&join(prefix, "norm1"), out);
    }

    fn visit_buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<S>)>) {
        self.norm1.visit_buffers_mut(&join(prefix, "norm1"), out);
    }
}
