//! Full networks: point tokenizer → backbone → task head, and the image model
//! used for toy pretraining.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::{Backbone, BackboneCache, BackboneConfig, PosEmbed};
use crate::decoders::{ClassifierCache, ClassifierHead, SegInput, SegmenterCache, SegmenterConfig, SegmenterHead};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{Labels, PointCloud};
use crate::loss::ce_label_smoothing;
use crate::nn::{Linear, Mode, NormKind};
use crate::params::{join, Params};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::{
    Image, ImageTokenizer, ImageTokenizerCache, PointTokenizer, PointTokenizerCache, PointTokenizerConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Task {
    Classification,
    Segmentation,
}

impl core::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" | "classification" => Ok(Task::Classification),
            "seg" | "segmentation" => Ok(Task::Segmentation),
            other => Err(Error::InvalidArgument(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub task: Task,
    pub n_classes: usize,
    pub tokenizer: PointTokenizerConfig,
    pub backbone: BackboneConfig,
    /// Coordinate-MLP positional embedding on the token centers.
    pub pos_embed: bool,
    pub head_norm: NormKind,
    /// Classifier dropout.
    pub head_dropout: f64,
    pub segmenter: SegmenterConfig,
}

impl ModelConfig {
    /// A small network of width `dim` for `c_in`-feature clouds.
    pub fn small(task: Task, n_classes: usize, c_in: usize, dim: usize, depth: usize, heads: usize) -> Self {
        ModelConfig {
            task,
            n_classes,
            tokenizer: PointTokenizerConfig::new(c_in, dim),
            backbone: BackboneConfig::new(dim, depth, heads),
            pos_embed: true,
            head_norm: NormKind::Batch,
            head_dropout: 0.5,
            segmenter: SegmenterConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.tokenizer.dim != self.backbone.dim {
            return Err(shape_err!(
                "tokenizer width {} differs from backbone width {}",
                self.tokenizer.dim,
                self.backbone.dim
            ));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidArgument("at least two classes required".into()));
        }
        if self.tokenizer.k == 0 || self.tokenizer.downsample_ratio == 0 || self.tokenizer.hidden == 0 {
            return Err(Error::InvalidArgument(
                "tokenizer k, downsample ratio and hidden width must be positive".into(),
            ));
        }
        for (what, p) in [
            ("head dropout", self.head_dropout),
            ("segmenter dropout", self.segmenter.dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{what} {p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head<S> {
    Classifier(ClassifierHead<S>),
    Segmenter(SegmenterHead<S>),
}

impl<S: Scalar> Params<S> for Head<S> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<S>)>) {
        match self {
            Head::Classifier(h) => h.visit(prefix, out),
            Head::Segmenter(h) => h.visit(prefix, out),
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<S>)>) {
        match self {
            Head::Classifier(h) => h.visit_mut(prefix, out),
            Head::Segmenter(h) => h.visit_mut(prefix, out),
        }
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<S>)>) {
        match self {
            Head::Classifier(h) => h.visit_buffers(prefix, out),
            Head::Segmenter(h) => h.visit_buffers(prefix, out),
        }
    }

    fn visit_buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<S>)>) {
        match self {
            Head::Classifier(h) => h.visit_buffers_mut(prefix, out),
            Head::Segmenter(h) => h.visit_buffers_mut(prefix, out),
        }
    }
}

/// Point tokenizer, shared backbone and task head.
///
/// Canonical names: `cls_token` and `tokenizer.*` for the tokenizer,
/// `pos_mlp.*`, `blocks.*` and `norm.*` for the backbone, `head.*` for the
/// decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PointModel<S> {
    pub tokenizer: PointTokenizer<S>,
    pub backbone: Backbone<S>,
    pub head: Head<S>,
}

#[derive(Debug, Clone)]
enum HeadCache<S> {
    Classifier(ClassifierCache<S>),
    Segmenter(SegmenterCache<S>),
}

#[derive(Debug, Clone)]
pub struct ModelCache<S> {
    tokenizer: Vec<PointTokenizerCache<S>>,
    backbone: Vec<BackboneCache<S>>,
    head: HeadCache<S>,
}

/// Loss, logits and parameter gradients of one batch.
#[derive(Debug, Clone)]
pub struct LossOutput<S> {
    pub loss: S,
    /// Per sample: `1 × K` for classification, `N × K` for segmentation.
    pub logits: Vec<Tensor<S>>,
    pub targets: Vec<Vec<u32>>,
    pub grad: PointModel<S>,
    pub cache: ModelCache<S>,
}

impl<S: Scalar> PointModel<S> {
    pub fn new(cfg: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let tokenizer = PointTokenizer::new(&cfg.tokenizer, rng);
        let pos = if cfg.pos_embed {
            PosEmbed::coord(cfg.backbone.dim, rng)
        } else {
            PosEmbed::None
        };
        let backbone = Backbone::new(&cfg.backbone, pos, rng);
        let head = match cfg.task {
            Task::Classification => Head::Classifier(ClassifierHead::new(
                cfg.backbone.dim,
                cfg.n_classes,
                cfg.head_norm,
                cfg.head_dropout,
                rng,
            )),
            Task::Segmentation => Head::Segmenter(SegmenterHead::new(
                cfg.backbone.dim,
                cfg.n_classes,
                cfg.head_norm,
                cfg.segmenter,
                rng,
            )),
        };
        Ok(PointModel {
            tokenizer,
            backbone,
            head,
        })
    }

    /// Logits per cloud. `fps_starts[i]` seeds farthest point sampling of
    /// cloud `i`.
    pub fn forward(
        &self,
        cfg: &ModelConfig,
        clouds: &[&PointCloud<S>],
        fps_starts: &[usize],
        mode: &mut Mode<'_>,
    ) -> Result<(Vec<Tensor<S>>, ModelCache<S>)> {
        if clouds.is_empty() {
            return Err(Error::EmptyInput("batch"));
        }
        if fps_starts.len() != clouds.len() {
            return Err(shape_err!(
                "{} FPS starts for {} clouds",
                fps_starts.len(),
                clouds.len()
            ));
        }
        let mut tok_caches = Vec::with_capacity(clouds.len());
        let mut bb_caches = Vec::with_capacity(clouds.len());
        let mut features = Vec::with_capacity(clouds.len());
        let mut centers = Vec::with_capacity(clouds.len());
        for (cloud, &start) in clouds.iter().zip(fps_starts) {
            let (tokens, tc) = self.tokenizer.forward(cloud, &cfg.tokenizer, start)?;
            let (f, bc) = self.backbone.forward(&tokens, &cfg.backbone, mode)?;
            tok_caches.push(tc);
            bb_caches.push(bc);
            features.push(f);
            centers.push(tokens.center_pos);
        }
        let (logits, head) = match &self.head {
            Head::Classifier(h) => {
                let refs: Vec<&Tensor<S>> = features.iter().collect();
                let (l, c) = h.forward(&refs, mode)?;
                let k = l.cols();
                let per = (0..l.rows()).map(|r| Tensor::matrix(1, k, l.row(r).to_vec())).collect();
                (per, HeadCache::Classifier(c))
            }
            Head::Segmenter(h) => {
                let inputs: Vec<SegInput<'_, S>> = features
                    .iter()
                    .zip(&centers)
                    .zip(clouds)
                    .map(|((f, c), cloud)| SegInput {
                        features: f,
                        token_pos: c,
                        raw_pos: &cloud.positions,
                    })
                    .collect();
                let (l, c) = h.forward(&inputs, mode)?;
                (l, HeadCache::Segmenter(c))
            }
        };
        Ok((
            logits,
            ModelCache {
                tokenizer: tok_caches,
                backbone: bb_caches,
                head,
            },
        ))
    }

    /// Accumulates parameter gradients; returns the gradient with respect to
    /// each cloud's input features.
    pub fn backward(
        &self,
        cfg: &ModelConfig,
        cache: &ModelCache<S>,
        d_logits: &[Tensor<S>],
        grad: &mut Self,
    ) -> Vec<Vec<S>> {
        let d_features = match (&self.head, &cache.head, &mut grad.head) {
            (Head::Classifier(h), HeadCache::Classifier(c), Head::Classifier(g)) => {
                let mut flat = Vec::new();
                for d in d_logits {
                    flat.extend_from_slice(d.data());
                }
                h.backward(c, &flat, g)
            }
            (Head::Segmenter(h), HeadCache::Segmenter(c), Head::Segmenter(g)) => h.backward(c, d_logits, g),
            _ => unreachable!("head, cache and gradient built from one model"),
        };
        let c = cfg.backbone.dim;
        d_features
            .iter()
            .zip(&cache.backbone)
            .zip(&cache.tokenizer)
            .map(|((d, bc), tc)| {
                let (d_tok, d_cls) = self.backbone.backward(bc, d.data(), &cfg.backbone, &mut grad.backbone);
                debug_assert_eq!(d_cls.len(), c);
                self.tokenizer
                    .backward(tc, &d_tok, &d_cls, &cfg.tokenizer, &mut grad.tokenizer)
            })
            .collect()
    }

    /// Folds training-mode batch statistics into the head's running estimates.
    pub fn update_running(&mut self, cache: &ModelCache<S>) {
        match (&mut self.head, &cache.head) {
            (Head::Classifier(h), HeadCache::Classifier(c)) => h.update_running(c),
            (Head::Segmenter(h), HeadCache::Segmenter(c)) => h.update_running(c),
            _ => {}
        }
    }

    /// Cross-entropy with label smoothing over the batch (over every point
    /// for segmentation) and its gradient.
    pub fn loss_grad(
        &self,
        cfg: &ModelConfig,
        clouds: &[&PointCloud<S>],
        fps_starts: &[usize],
        label_smoothing: f64,
        mode: &mut Mode<'_>,
    ) -> Result<LossOutput<S>> {
        let targets = clouds
            .iter()
            .map(|c| targets(c, cfg.task))
            .collect::<Result<Vec<_>>>()?;
        let (logits, cache) = self.forward(cfg, clouds, fps_starts, mode)?;
        let k = cfg.n_classes;
        let mut flat = Vec::new();
        for l in &logits {
            flat.extend_from_slice(l.data());
        }
        let truth: Vec<u32> = targets.iter().flatten().copied().collect();
        let (loss, d_flat) = ce_label_smoothing(&flat, k, &truth, label_smoothing)?;
        let mut d_logits = Vec::with_capacity(logits.len());
        let mut offset = 0;
        for l in &logits {
            d_logits.push(Tensor::matrix(l.rows(), k, d_flat[offset..offset + l.numel()].to_vec()));
            offset += l.numel();
        }
        let mut grad = self.zeros_like();
        self.backward(cfg, &cache, &d_logits, &mut grad);
        Ok(LossOutput {
            loss,
            logits,
            targets,
            grad,
            cache,
        })
    }
}

/// Class ids a cloud is scored against: one per cloud or one per point.
pub fn targets<S: Scalar>(cloud: &PointCloud<S>, task: Task) -> Result<Vec<u32>> {
    match (&cloud.labels, task) {
        (Labels::Cloud(c), Task::Classification) => Ok(vec![*c]),
        (Labels::Points(p), Task::Segmentation) => Ok(p.clone()),
        (other, task) => Err(Error::InvalidArgument(format!(
            "labels {other:?} do not fit task {task:?}"
        ))),
    }
}

impl<S: Scalar> Params<S> for PointModel<S> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<S>)>) {
        self.tokenizer.visit(prefix, out);
        self.backbone.visit(prefix, out);
        self.head.visit(&join(prefix, "head"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<S>)>) {
        self.tokenizer.visit_mut(prefix, out);
        self.backbone.visit_mut(prefix, out);
        self.head.visit_mut(&join(prefix, "head"), out);
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<S>)>) {
        self.head.visit_buffers(&join(prefix, "head"), out);
    }

    fn visit_buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<S>)>) {
        self.head.visit_buffers_mut(&join(prefix, "head"), out);
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ImageModelConfig {
    pub side: usize,
    pub channels: usize,
    pub patch: usize,
    pub n_classes: usize,
    pub backbone: BackboneConfig,
}

impl ImageModelConfig {
    pub fn n_patches(&self) -> usize {
        (self.side / self.patch) * (self.side / self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.patch == 0 || !self.side.is_multiple_of(self.patch) {
            return Err(Error::InvalidArgument(format!(
                "image side {} is not a multiple of patch {}",
                self.side, self.patch
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidArgument("at least two classes required".into()));
        }
        Ok(())
    }
}

/// Patch tokenizer, backbone with a learned positional table, and a linear
/// classifier on the class-token output (`head.*`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageModel<S> {
    pub tokenizer: ImageTokenizer<S>,
    pub backbone: Backbone<S>,
    pub head: Linear<S>,
}

#[derive(Debug, Clone)]
pub struct ImageCache<S> {
    tokenizer: ImageTokenizerCache<S>,
    backbone: BackboneCache<S>,
    cls_out: Vec<S>,
    rows: usize,
}

impl<S: Scalar> ImageModel<S> {
    pub fn new(cfg: &ImageModelConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let dim = cfg.backbone.dim;
        let tokenizer = ImageTokenizer::new(cfg.patch, cfg.channels, dim, rng);
        let pos = PosEmbed::learned(cfg.n_patches() + 1, dim, rng);
        let backbone = Backbone::new(&cfg.backbone, pos, rng);
        let head = Linear::new(dim, cfg.n_classes, rng);
        Ok(ImageModel {
            tokenizer,
            backbone,
            head,
        })
    }

    pub fn forward(
        &self,
        cfg: &ImageModelConfig,
        image: &Image<S>,
        mode: &mut Mode<'_>,
    ) -> Result<(Vec<S>, ImageCache<S>)> {
        let (tokens, tc) = self.tokenizer.forward(image)?;
        let (f, bc) = self.backbone.forward(&tokens, &cfg.backbone, mode)?;
        let cls_out = f.row(0).to_vec();
        let logits = self.head.forward(&cls_out, 1);
        Ok((
            logits,
            ImageCache {
                tokenizer: tc,
                backbone: bc,
                cls_out,
                rows: f.rows(),
            },
        ))
    }

    pub fn backward(&self, cfg: &ImageModelConfig, cache: &ImageCache<S>, d_logits: &[S], grad: &mut Self) {
        let d_cls_out = self.head.backward(&cache.cls_out, d_logits, 1, &mut grad.head);
        let c = cfg.backbone.dim;
        let mut d_f = vec![S::zero(); cache.rows * c];
        d_f[..c].copy_from_slice(&d_cls_out);
        let (d_tok, d_cls) = self
            .backbone
            .backward(&cache.backbone, &d_f, &cfg.backbone, &mut grad.backbone);
        self.tokenizer
            .backward(&cache.tokenizer, &d_tok, &d_cls, &mut grad.tokenizer);
    }

    /// Mean smoothed cross-entropy over the batch, per-sample logits and
    /// parameter gradients.
    pub fn loss_grad(
        &self,
        cfg: &ImageModelConfig,
        batch: &[(&Image<S>, u32)],
        label_smoothing: f64,
        mode: &mut Mode<'_>,
    ) -> Result<(S, Vec<Vec<S>>, Self)> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("batch"));
        }
        let mut grad = self.zeros_like();
        let mut total = S::zero();
        let mut all_logits = Vec::with_capacity(batch.len());
        let scale = S::one() / S::of_usize(batch.len());
        for &(image, label) in batch {
            let (logits, cache) = self.forward(cfg, image, mode)?;
            let (loss, mut d) = ce_label_smoothing(&logits, cfg.n_classes, &[label], label_smoothing)?;
            for v in &mut d {
                *v *= scale;
            }
            total += loss * scale;
            self.backward(cfg, &cache, &d, &mut grad);
            all_logits.push(logits);
        }
        Ok((total, all_logits, grad))
    }
}

impl<S: Scalar> Params<S> for ImageModel<S> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<S>)>) {
        self.tokenizer.visit(prefix, out);
        self.backbone.visit(prefix, out);
        self.head.visit(&join(prefix, "head"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<S>)>) {
        self.tokenizer.visit_mut(prefix, out);
        self.backbone.visit_mut(prefix, out);
        self.head.visit_mut(&join(prefix, "head"), out);
    }
}
