//! Finetuning presets and the step / epoch loop.
//!
//! Randomness is keyed, never sequential: the shuffle of epoch `e`, the
//! augmentation and sampling of sample `i` in epoch `e`, and the dropout masks
//! of batch `b` each come from their own [`RngStream`]. A run resumed from a
//! checkpoint therefore replays exactly what the unbroken run would have done.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::augment::{augment, parse_list, Augmentation};
use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, PointCloud};
use crate::loss::ce_label_smoothing;
use crate::metrics::{argmax_rows, compute_metrics, Metrics};
use crate::model::{targets, ImageModel, ImageModelConfig, LossOutput, ModelConfig, PointModel, Task};
use crate::nn::Mode;
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::params::{NamedTensors, Params};
use crate::rng::{Purpose, RngStream};
use crate::scalar::Scalar;

/// Loss, optimizer, schedule and augmentation settings of one task.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainPreset {
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    /// Points fed to the network per cloud. Larger clouds are subsampled:
    /// randomly in training, by farthest point sampling in evaluation.
    pub n_points: usize,
    pub augmentations: Vec<Augmentation>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainPreset {
    fn default() -> Self {
        TrainPreset::toy()
    }
}

impl TrainPreset {
    /// Indoor semantic segmentation.
    pub fn s3dis() -> Self {
        TrainPreset {
            lr: 5e-4,
            min_lr: 1e-6,
            weight_decay: 1e-4,
            warmup_epochs: 10,
            epochs: 100,
            batch_size: 32,
            label_smoothing: 0.2,
            n_points: 24_000,
            augmentations: names(&["rotate", "scale", "jitter", "color_autocontrast", "color_drop"]),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Part segmentation: normals are dropped instead of colors and there
    /// is no color auto-contrast.
    pub fn shapenetpart() -> Self {
        TrainPreset {
            epochs: 500,
            batch_size: 64,
            n_points: 2048,
            augmentations: names(&["rotate", "scale", "jitter", "feature_drop"]),
            ..Self::s3dis()
        }
    }

    /// Object classification on real scans.
    pub fn scanobjectnn() -> Self {
        TrainPreset {
            weight_decay: 0.05,
            epochs: 200,
            n_points: 1024,
            ..Self::shapenetpart()
        }
    }

    /// Desk-scale runs on the synthetic families.
    pub fn toy() -> Self {
        TrainPreset {
            lr: 1e-3,
            min_lr: 1e-6,
            weight_decay: 0.05,
            warmup_epochs: 2,
            epochs: 30,
            batch_size: 16,
            label_smoothing: 0.2,
            n_points: 256,
            augmentations: names(&["rotate", "scale", "jitter"]),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "s3dis" => Ok(Self::s3dis()),
            "shapenetpart" => Ok(Self::shapenetpart()),
            "scanobjectnn" => Ok(Self::scanobjectnn()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::InvalidArgument(format!("unknown preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return bad(format!("min_lr {} outside [0, lr]", self.min_lr));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.warmup_epochs > self.epochs {
            return bad(format!(
                "warmup of {} epochs exceeds the {}-epoch schedule",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 || self.n_points == 0 {
            return bad("batch size and point count must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

fn names(list: &[&str]) -> Vec<Augmentation> {
    parse_list(list).expect("built-in augmentation names")
}

/// Index batches of `order`, with a trailing single sample folded into the
/// previous batch so that batch statistics are never taken over one row.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().map(Vec::len) == Some(1) {
        let last = out.pop().unwrap_or_default();
        if let Some(prev) = out.last_mut() {
            prev.extend(last);
        }
    }
    out
}

/// Number of optimizer steps in one epoch over `n` samples (the length of
/// [`batches`]).
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    let bs = batch_size.max(1);
    match n {
        0 => 0,
        n if n <= bs => 1,
        n if n % bs <= 1 => n / bs,
        n => n / bs + 1,
    }
}

#[derive(Debug, Clone)]
pub struct StepStats<S> {
    pub loss: S,
    pub lr: f64,
    /// Tensors the optimizer changed.
    pub updated: Vec<String>,
}

/// Mean loss and metrics over one pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub metrics: Metrics,
    /// Learning rate of the last step (0 for evaluation).
    pub lr: f64,
}

/// Completed epochs and optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Progress {
    pub epoch: usize,
    pub step: usize,
}

pub struct Trainer<S: Scalar> {
    pub cfg: ModelConfig,
    pub preset: TrainPreset,
    pub model: PointModel<S>,
    pub optimizer: AdamW<S, PointModel<S>>,
    /// Tensors excluded from optimization.
    pub frozen: BTreeSet<String>,
    pub seed: u64,
    pub progress: Progress,
    steps_per_epoch: usize,
}

impl<S: Scalar> Trainer<S> {
    /// Fresh model initialized from `seed`, scheduled for `n_train` samples
    /// per epoch.
    pub fn new(cfg: ModelConfig, preset: TrainPreset, seed: u64, n_train: usize) -> Result<Self> {
        let model = PointModel::new(&cfg, &mut RngStream::keyed(seed, Purpose::Init, 0, 0))?;
        Self::with_model(model, cfg, preset, seed, n_train)
    }

    pub fn with_model(
        model: PointModel<S>,
        cfg: ModelConfig,
        preset: TrainPreset,
        seed: u64,
        n_train: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        preset.validate()?;
        let optimizer = AdamW::new(&model, preset.adamw());
        Ok(Trainer {
            steps_per_epoch: steps_per_epoch(n_train, preset.batch_size),
            cfg,
            preset,
            model,
            optimizer,
            frozen: BTreeSet::new(),
            seed,
            progress: Progress::default(),
        })
    }

    pub fn total_steps(&self) -> usize {
        self.preset.epochs * self.steps_per_epoch
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        cosine_lr(
            step,
            self.total_steps(),
            self.preset.warmup_epochs * self.steps_per_epoch,
            self.preset.lr,
            self.preset.min_lr,
        )
    }

    /// One forward / backward / update on a prepared batch.
    pub fn train_step(
        &mut self,
        batch: &[&PointCloud<S>],
        fps_starts: &[usize],
        dropout: &mut RngStream,
    ) -> Result<StepStats<S>> {
        self.step_with_lr(batch, fps_starts, dropout, self.lr_at(self.progress.step))
    }

    /// As [`Trainer::train_step`] with an explicit learning rate.
    pub fn step_with_lr(
        &mut self,
        batch: &[&PointCloud<S>],
        fps_starts: &[usize],
        dropout: &mut RngStream,
        lr: f64,
    ) -> Result<StepStats<S>> {
        self.step_full(batch, fps_starts, dropout, lr).map(|(s, _)| s)
    }

    fn step_full(
        &mut self,
        batch: &[&PointCloud<S>],
        fps_starts: &[usize],
        dropout: &mut RngStream,
        lr: f64,
    ) -> Result<(StepStats<S>, LossOutput<S>)> {
        let out = self.model.loss_grad(
            &self.cfg,
            batch,
            fps_starts,
            self.preset.label_smoothing,
            &mut Mode::Train(dropout),
        )?;
        if !out.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.progress.step,
            });
        }
        let updated = self.optimizer.update(&mut self.model, &out.grad, lr, &self.frozen);
        self.model.update_running(&out.cache);
        self.progress.step += 1;
        Ok((
            StepStats {
                loss: out.loss,
                lr,
                updated,
            },
            out,
        ))
    }

    /// The augmented, subsampled training view of sample `id` in `epoch` and
    /// its FPS start.
    pub fn train_view(&self, cloud: &PointCloud<S>, epoch: usize, id: usize) -> (PointCloud<S>, usize) {
        let mut rng = RngStream::keyed(self.seed, Purpose::Sampling, epoch as u64, id as u64);
        let mut view = if cloud.len() > self.preset.n_points {
            let mut ids: Vec<usize> = (0..cloud.len()).collect();
            rng.shuffle(&mut ids);
            ids.truncate(self.preset.n_points);
            ids.sort_unstable();
            cloud.select(&ids)
        } else {
            cloud.clone()
        };
        let start = rng.below(view.len());
        let mut aug_rng = RngStream::keyed(self.seed, Purpose::Augment, epoch as u64, id as u64);
        view = augment(&view, &self.preset.augmentations, &mut aug_rng);
        (view, start)
    }

    /// One pass over `data` in a seeded random order.
    pub fn train_epoch(&mut self, data: &[PointCloud<S>]) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::EmptyInput("training set"));
        }
        let epoch = self.progress.epoch;
        let mut order: Vec<usize> = (0..data.len()).collect();
        RngStream::keyed(self.seed, Purpose::Shuffle, epoch as u64, 0).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        let mut preds = Vec::new();
        let mut truth = Vec::new();
        let mut lr = 0.0;
        for (b, ids) in batches(&order, self.preset.batch_size).into_iter().enumerate() {
            let views: Vec<(PointCloud<S>, usize)> = ids.iter().map(|&i| self.train_view(&data[i], epoch, i)).collect();
            let clouds: Vec<&PointCloud<S>> = views.iter().map(|(c, _)| c).collect();
            let starts: Vec<usize> = views.iter().map(|(_, s)| *s).collect();
            let mut dropout = RngStream::keyed(self.seed, Purpose::Dropout, epoch as u64, b as u64);
            let (stats, out) = self.step_full(&clouds, &starts, &mut dropout, self.lr_at(self.progress.step))?;
            lr = stats.lr;
            let rows = out.targets.iter().map(Vec::len).sum::<usize>();
            loss_sum += out.loss.to_f64() * rows as f64;
            count += rows;
            for (l, t) in out.logits.iter().zip(&out.targets) {
                preds.extend(argmax_rows(l.data(), self.cfg.n_classes));
                truth.extend_from_slice(t);
            }
        }
        self.progress.epoch += 1;
        Ok(EpochStats {
            loss: loss_sum / count as f64,
            metrics: compute_metrics(&preds, &truth, self.cfg.n_classes)?,
            lr,
        })
    }

    /// Loss and metrics in evaluation mode (running statistics, no dropout,
    /// no augmentation, FPS from index 0).
    pub fn evaluate(&self, data: &[PointCloud<S>]) -> Result<EpochStats> {
        evaluate(&self.model, &self.cfg, &self.preset, data)
    }

    /// Model tensors and buffers under their canonical names plus optimizer
    /// moments under `optim.*`.
    pub fn state(&self) -> NamedTensors<S> {
        let mut out = self.model.state();
        for (n, t) in self.optimizer.state().iter() {
            out.push(n, t.clone());
        }
        out
    }

    /// Restores what [`Trainer::state`] saved. Returns an error when a model
    /// tensor is missing or has the wrong shape.
    pub fn restore(&mut self, state: &NamedTensors<S>, progress: Progress) -> Result<()> {
        let installed = self.model.load_state(state);
        let expected = self.model.named().len() + self.model.buffers().len();
        if installed.len() != expected {
            let have: BTreeSet<String> = installed.into_iter().collect();
            let missing = self
                .model
                .named()
                .into_iter()
                .chain(self.model.buffers())
                .map(|(n, _)| n)
                .find(|n| !have.contains(n))
                .unwrap_or_default();
            return Err(Error::TransferMismatch {
                name: missing,
                reason: "missing or mis-shaped in checkpoint".into(),
            });
        }
        self.optimizer.load_state(state);
        self.progress = progress;
        Ok(())
    }
}

/// The evaluation view of a cloud: FPS subsample to `n_points` from index 0.
pub fn eval_view<S: Scalar>(cloud: &PointCloud<S>, n_points: usize) -> Result<PointCloud<S>> {
    if cloud.len() > n_points {
        let ids = farthest_point_sample(&cloud.positions, n_points, 0)?;
        let mut ids = ids;
        ids.sort_unstable();
        Ok(cloud.select(&ids))
    } else {
        Ok(cloud.clone())
    }
}

pub fn evaluate<S: Scalar>(
    model: &PointModel<S>,
    cfg: &ModelConfig,
    preset: &TrainPreset,
    data: &[PointCloud<S>],
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let k = cfg.n_classes;
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    let mut preds = Vec::new();
    let mut truth = Vec::new();
    let order: Vec<usize> = (0..data.len()).collect();
    for ids in order.chunks(preset.batch_size.max(1)) {
        let views = ids
            .iter()
            .map(|&i| eval_view(&data[i], preset.n_points))
            .collect::<Result<Vec<_>>>()?;
        let clouds: Vec<&PointCloud<S>> = views.iter().collect();
        let (logits, _) = model.forward(cfg, &clouds, &alloc::vec![0; clouds.len()], &mut Mode::Eval)?;
        for (l, c) in logits.iter().zip(&clouds) {
            let t = targets(c, cfg.task)?;
            let (loss, _) = ce_label_smoothing(l.data(), k, &t, preset.label_smoothing)?;
            loss_sum += loss.to_f64() * t.len() as f64;
            count += t.len();
            preds.extend(argmax_rows(l.data(), k));
            truth.extend(t);
        }
    }
    Ok(EpochStats {
        loss: loss_sum / count as f64,
        metrics: compute_metrics(&preds, &truth, k)?,
        lr: 0.0,
    })
}

/// Per-epoch summary of image pretraining.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Supervised pretraining of an image model on labeled images.
pub fn pretrain_images<S: Scalar>(
    cfg: &ImageModelConfig,
    preset: &TrainPreset,
    data: &[LabeledImage<S>],
    seed: u64,
    mut on_epoch: impl FnMut(&PretrainEpoch),
) -> Result<ImageModel<S>> {
    preset.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("pretraining set"));
    }
    let mut model = ImageModel::new(cfg, &mut RngStream::keyed(seed, Purpose::Init, 0, 0))?;
    let mut opt = AdamW::new(&model, preset.adamw());
    let spe = steps_per_epoch(data.len(), preset.batch_size);
    let total = preset.epochs * spe;
    let warmup = preset.warmup_epochs * spe;
    let frozen = BTreeSet::new();
    let mut step = 0;
    for epoch in 0..preset.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        RngStream::keyed(seed, Purpose::Shuffle, epoch as u64, 0).shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, ids) in batches(&order, preset.batch_size).into_iter().enumerate() {
            let batch: Vec<_> = ids.iter().map(|&i| (&data[i].image, data[i].label)).collect();
            let mut dropout = RngStream::keyed(seed, Purpose::Dropout, epoch as u64, b as u64);
            let (loss, logits, grad) =
                model.loss_grad(cfg, &batch, preset.label_smoothing, &mut Mode::Train(&mut dropout))?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let lr = cosine_lr(step, total, warmup, preset.lr, preset.min_lr);
            opt.update(&mut model, &grad, lr, &frozen);
            step += 1;
            loss_sum += loss.to_f64() * ids.len() as f64;
            for (l, &(_, y)) in logits.iter().zip(&batch) {
                if argmax_rows(l, cfg.n_classes)[0] == y {
                    correct += 1;
                }
            }
        }
        on_epoch(&PretrainEpoch {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: 100.0 * correct as f64 / data.len() as f64,
        });
    }
    Ok(model)
}

/// Accuracy (percent) of an image model in evaluation mode.
pub fn image_accuracy<S: Scalar>(
    model: &ImageModel<S>,
    cfg: &ImageModelConfig,
    data: &[LabeledImage<S>],
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let mut correct = 0;
    for s in data {
        let (logits, _) = model.forward(cfg, &s.image, &mut Mode::Eval)?;
        if argmax_rows(&logits, cfg.n_classes)[0] == s.label {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

/// Whether a task's labels fit the model: used to reject configs early.
pub fn check_labels<S: Scalar>(data: &[PointCloud<S>], task: Task, n_classes: usize) -> Result<()> {
    for (i, c) in data.iter().enumerate() {
        let t = targets(c, task).map_err(|e| Error::InvalidArgument(format!("sample {i}: {e}")))?;
        if let Some(&bad) = t.iter().find(|&&v| v as usize >= n_classes) {
            return Err(Error::InvalidArgument(format!(
                "sample {i}: class id {bad} outside {n_classes} classes"
            )));
        }
    }
    Ok(())
}
