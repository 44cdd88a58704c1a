//! Experiment configuration: one TOML or JSON document.
//!
//! Every key is optional. A minimal TOML file:
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! family = "shapes8"      # shapes8 | parts4
//! n_train = 64
//!
//! [model]
//! dim = 64
//! depth = 2
//!
//! [train]
//! preset = "toy"          # toy | s3dis | shapenetpart | scanobjectnn
//! epochs = 30
//! augmentations = ["rotate", "scale", {name = "jitter", sigma = 0.01}]
//!
//! [init]
//! path = "ckpt/pretrained"
//! freeze_backbone = true
//!
//! [output]
//! dir = "runs/shapes8"
//! ```
//!
//! Unknown keys are rejected, so a typo fails before any compute starts.

use std::fs;
use std::path::Path;

use crosstok_core::augment::{parse_list, Augmentation};
use crosstok_core::data::{Family, SyntheticTaskSpec};
use crosstok_core::decoders::{GlobalSource, SegmenterConfig};
use crosstok_core::model::{ImageModelConfig, ModelConfig, Task};
use crosstok_core::nn::NormKind;
use crosstok_core::tokenizer::PointTokenizerConfig;
use crosstok_core::train::TrainPreset;
use crosstok_core::transfer::TransferPolicy;
use crosstok_core::{BackboneConfig, InputMode};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Read { path: String, msg: String },
    #[error("{0}")]
    Invalid(String),
}

impl From<crosstok_core::Error> for ConfigError {
    fn from(e: crosstok_core::Error) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ExperimentConfig {
    /// Drives initialization, shuffling, augmentation and dropout.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub init: Option<InitSection>,
    pub output: OutputSection,
    pub pretrain: PretrainSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub family: Family,
    pub n_train: usize,
    pub n_val: usize,
    pub points: usize,
    pub noise: f64,
    /// Seed of the generator, independent of the run seed so that runs with
    /// different seeds see the same data.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            family: Family::Shapes8,
            n_train: 64,
            n_val: 64,
            points: 256,
            noise: 0.01,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn spec(&self) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            family: self.family,
            n_train: self.n_train,
            n_val: self.n_val,
            points: self.points,
            noise: self.noise,
            seed: self.seed,
        }
    }

    pub fn task(&self) -> Result<Task, ConfigError> {
        match self.family {
            Family::Shapes8 => Ok(Task::Classification),
            Family::Parts4 => Ok(Task::Segmentation),
            Family::Patches2d => Err(ConfigError::Invalid(
                "data.family 'patches2d' holds images; point training needs shapes8 or parts4".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Dropout inside the encoder blocks.
    pub dropout: f64,
    /// Neighbors per token.
    pub k: usize,
    /// Points per token.
    pub downsample_ratio: usize,
    /// Width of the tokenizer's first layer; half of `dim` when unset.
    pub hidden: Option<usize>,
    pub stages: usize,
    pub input_mode: InputMode,
    pub pos_embed: bool,
    pub head_norm: NormKind,
    pub head_dropout: f64,
    /// Segmentation only: append the global max and class token per point.
    pub globals: bool,
    pub global_source: GlobalSource,
    pub interp_stages: usize,
    pub seg_dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let seg = SegmenterConfig::default();
        ModelSection {
            dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4.0,
            dropout: 0.0,
            k: 16,
            downsample_ratio: 16,
            hidden: None,
            stages: 1,
            input_mode: InputMode::Relative,
            pos_embed: true,
            head_norm: NormKind::Batch,
            head_dropout: 0.5,
            globals: seg.globals,
            global_source: seg.global_source,
            interp_stages: seg.interp_stages,
            seg_dropout: seg.dropout,
        }
    }
}

impl ModelSection {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            mlp_ratio: self.mlp_ratio,
            dropout: self.dropout,
            ..BackboneConfig::new(self.dim, self.depth, self.heads)
        }
    }

    pub fn model_config(&self, task: Task, n_classes: usize, c_in: usize) -> ModelConfig {
        let mut tokenizer = PointTokenizerConfig::new(c_in, self.dim);
        tokenizer.hidden = self.hidden.unwrap_or(tokenizer.hidden);
        tokenizer.k = self.k;
        tokenizer.downsample_ratio = self.downsample_ratio;
        tokenizer.input_mode = self.input_mode;
        tokenizer.stages = self.stages;
        ModelConfig {
            task,
            n_classes,
            tokenizer,
            backbone: self.backbone(),
            pos_embed: self.pos_embed,
            head_norm: self.head_norm,
            head_dropout: self.head_dropout,
            segmenter: SegmenterConfig {
                globals: self.globals,
                global_source: self.global_source,
                interp_stages: self.interp_stages,
                dropout: self.seg_dropout,
            },
        }
    }
}

/// An augmentation given either by name (default parameters) or as a table
/// with a `name` key and parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AugSpec {
    Name(String),
    Full(Augmentation),
}

/// A named preset with optional per-field overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub preset: String,
    pub lr: Option<f64>,
    pub min_lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub warmup_epochs: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub label_smoothing: Option<f64>,
    pub n_points: Option<usize>,
    pub augmentations: Option<Vec<AugSpec>>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            preset: "toy".into(),
            lr: None,
            min_lr: None,
            weight_decay: None,
            warmup_epochs: None,
            epochs: None,
            batch_size: None,
            label_smoothing: None,
            n_points: None,
            augmentations: None,
            beta1: None,
            beta2: None,
            eps: None,
        }
    }
}

impl TrainSection {
    pub fn preset(&self) -> Result<TrainPreset, ConfigError> {
        let mut p = TrainPreset::by_name(&self.preset)?;
        macro_rules! over {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { p.$f = v; } )* };
        }
        over!(
            lr,
            min_lr,
            weight_decay,
            warmup_epochs,
            epochs,
            batch_size,
            label_smoothing,
            n_points,
            beta1,
            beta2,
            eps
        );
        if let Some(list) = &self.augmentations {
            p.augmentations = resolve_augmentations(list)?;
        }
        if self.warmup_epochs.is_none() && p.warmup_epochs > p.epochs {
            p.warmup_epochs = p.epochs;
        }
        p.validate()?;
        Ok(p)
    }
}

pub fn resolve_augmentations(list: &[AugSpec]) -> Result<Vec<Augmentation>, ConfigError> {
    list.iter()
        .map(|a| match a {
            AugSpec::Name(n) => Ok(parse_list(&[n.as_str()])?.remove(0)),
            AugSpec::Full(a) => Ok(a.clone()),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSection {
    /// Archive prefix, relative to the working directory.
    pub path: String,
    pub transfer_cls: bool,
    pub transfer_pos: bool,
    pub freeze_backbone: bool,
    pub strict: bool,
}

impl Default for InitSection {
    fn default() -> Self {
        let p = TransferPolicy::default();
        InitSection {
            path: String::new(),
            transfer_cls: p.transfer_cls,
            transfer_pos: p.transfer_pos,
            freeze_backbone: p.freeze_backbone,
            strict: p.strict,
        }
    }
}

impl InitSection {
    pub fn policy(&self) -> TransferPolicy {
        TransferPolicy {
            transfer_cls: self.transfer_cls,
            transfer_pos: self.transfer_pos,
            freeze_backbone: self.freeze_backbone,
            strict: self.strict,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectMetric {
    Oa,
    Macc,
    Miou,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Run directory, relative to the working directory.
    pub dir: String,
    /// Validation metric that picks the best checkpoint. Overall accuracy
    /// for classification and mIoU for segmentation when unset.
    pub select: Option<SelectMetric>,
    /// Validate every this many epochs (and always after the last one).
    pub val_every: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: "runs/default".into(),
            select: None,
            val_every: 1,
        }
    }
}

/// Supervised image pretraining of the shared encoder on `patches2d`. The
/// encoder shape comes from `[model]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub images: usize,
    pub val_images: usize,
    pub side: usize,
    pub patch: usize,
    pub noise: f64,
    pub data_seed: u64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    /// Archive prefix, relative to the working directory.
    pub out: String,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            images: 2000,
            val_images: 200,
            side: 16,
            patch: 4,
            noise: 0.05,
            data_seed: 0,
            epochs: 8,
            warmup_epochs: 1,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.05,
            label_smoothing: 0.1,
            out: "ckpt/pretrained".into(),
        }
    }
}

impl PretrainSection {
    pub fn spec(&self) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            family: Family::Patches2d,
            n_train: self.images,
            n_val: self.val_images,
            points: self.side,
            noise: self.noise,
            seed: self.data_seed,
        }
    }

    pub fn image_config(&self, model: &ModelSection) -> ImageModelConfig {
        ImageModelConfig {
            side: self.side,
            channels: 1,
            patch: self.patch,
            n_classes: Family::Patches2d.n_classes(),
            backbone: model.backbone(),
        }
    }

    pub fn preset(&self) -> Result<TrainPreset, ConfigError> {
        let p = TrainPreset {
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_epochs: self.warmup_epochs.min(self.epochs),
            epochs: self.epochs,
            batch_size: self.batch_size,
            label_smoothing: self.label_smoothing,
            augmentations: Vec::new(),
            ..TrainPreset::toy()
        };
        p.validate()?;
        Ok(p)
    }
}

/// Everything a training run needs, derived and checked up front.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub model: ModelConfig,
    pub preset: TrainPreset,
    pub data: SyntheticTaskSpec,
    pub select: SelectMetric,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let read_err = |msg: String| ConfigError::Read {
            path: path.display().to_string(),
            msg,
        };
        let text = fs::read_to_string(path).map_err(|e| read_err(e.to_string()))?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        Self::parse(&text, is_json).map_err(|e| match e {
            ConfigError::Invalid(msg) => read_err(msg),
            other => other,
        })
    }

    pub fn parse(text: &str, json: bool) -> Result<Self, ConfigError> {
        if json {
            serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))
        } else {
            toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))
        }
    }

    /// Checks the whole document and derives the core configurations.
    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        let task = self.data.task()?;
        let model = self.model.model_config(task, self.data.family.n_classes(), 0);
        model.validate()?;
        let preset = self.train.preset()?;
        if self.data.n_train == 0 || self.data.n_val == 0 {
            return Err(ConfigError::Invalid(
                "data.n_train and data.n_val must be positive".into(),
            ));
        }
        if self.data.points < crosstok_core::data::MIN_POINTS {
            return Err(ConfigError::Invalid(format!(
                "data.points {} below the minimum of {}",
                self.data.points,
                crosstok_core::data::MIN_POINTS
            )));
        }
        if preset.n_points < model.tokenizer.downsample_ratio {
            return Err(ConfigError::Invalid(format!(
                "train.n_points {} gives no tokens at downsample ratio {}",
                preset.n_points, model.tokenizer.downsample_ratio
            )));
        }
        if self.output.val_every == 0 {
            return Err(ConfigError::Invalid("output.val_every must be positive".into()));
        }
        if let Some(init) = &self.init {
            if init.path.is_empty() {
                return Err(ConfigError::Invalid("init.path is empty".into()));
            }
        }
        let select = self.output.select.unwrap_or(match task {
            Task::Classification => SelectMetric::Oa,
            Task::Segmentation => SelectMetric::Miou,
        });
        Ok(Resolved {
            model,
            preset,
            data: self.data.spec(),
            select,
        })
    }
}
