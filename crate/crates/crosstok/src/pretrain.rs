//! Toy image pretraining of the shared encoder, saved as an image checkpoint
//! under the canonical names (`cls_token`, `patch_embed.proj.*`, `pos_embed`,
//! `blocks.*`, `norm.*`, `head.*`).

use std::path::{Path, PathBuf};

use crosstok_core::data::gen_patches2d;
use crosstok_core::train::{image_accuracy, pretrain_images, PretrainEpoch};
use crosstok_core::Params;
use serde_json::json;

use crate::archive;
use crate::config::ExperimentConfig;
use crate::experiment::RunError;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSummary {
    pub path: PathBuf,
    pub epochs: Vec<PretrainEpoch>,
    /// Percent correct on the held-out images.
    pub val_accuracy: f64,
    pub tensors: usize,
}

pub fn run_pretrain(
    cfg: &ExperimentConfig,
    workdir: &Path,
    mut on_epoch: impl FnMut(&PretrainEpoch),
) -> Result<PretrainSummary, RunError> {
    let p = &cfg.pretrain;
    let image_cfg = p.image_config(&cfg.model);
    image_cfg.validate()?;
    let preset = p.preset()?;
    let data = gen_patches2d::<f32>(&p.spec())?;

    let mut epochs = Vec::new();
    let model = pretrain_images(&image_cfg, &preset, &data.train, cfg.seed, |e| {
        on_epoch(e);
        epochs.push(*e);
    })?;
    let val_accuracy = image_accuracy(&model, &image_cfg, &data.val)?;

    let path = workdir.join(&p.out);
    let state = model.state();
    let meta = json!({
        "kind": "image-model",
        "image_config": image_cfg,
        "seed": cfg.seed,
        "val_accuracy": val_accuracy,
    });
    archive::save_archive(&path, &state, meta)?;
    Ok(PretrainSummary {
        path,
        epochs,
        val_accuracy,
        tensors: state.len(),
    })
}
