//! Initializing a point model's backbone from an image-pretrained checkpoint.
//!
//! Checkpoints use the canonical names below. Backbone tensors (`blocks.*`,
//! `norm.*`) are copied when name and shape agree; tokenizer, positional-MLP
//! and decoder tensors keep their fresh initialization.
//!
//! | role                                   | canonical name                      | shape        |
//! |----------------------------------------|-------------------------------------|--------------|
//! | class token                            | `cls_token`                         | `1 × C`      |
//! | patch projection (image only)          | `patch_embed.proj.{weight,bias}`    | `p²c × C`, `C` |
//! | learned positional table (image only)  | `pos_embed`                         | `(T+1) × C`  |
//! | pre-attention layer norm               | `blocks.<i>.norm1.{weight,bias}`    | `C`          |
//! | fused query/key/value projection       | `blocks.<i>.attn.qkv.{weight,bias}` | `C × 3C`, `3C` |
//! | attention output projection            | `blocks.<i>.attn.proj.{weight,bias}`| `C × C`, `C` |
//! | pre-MLP layer norm                     | `blocks.<i>.norm2.{weight,bias}`    | `C`          |
//! | MLP expansion                          | `blocks.<i>.mlp.fc1.{weight,bias}`  | `C × rC`, `rC` |
//! | MLP contraction                        | `blocks.<i>.mlp.fc2.{weight,bias}`  | `rC × C`, `C` |
//! | final layer norm                       | `norm.{weight,bias}`                | `C`          |
//! | classifier (image only)                | `head.*`                            | any          |
//!
//! Linear weights are stored input-major (`y = x W + b`), so a PyTorch
//! `out × in` weight is transposed by the exporter.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::backbone::{Backbone, PosEmbed, BLOCK_LEAVES};
use crate::error::{Error, Result};
use crate::params::{NamedTensors, Params};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Canonical backbone tensor names for `depth` blocks: `12 · depth + 2`.
pub fn canonical_backbone_names(depth: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(depth * BLOCK_LEAVES.len() + 2);
    for i in 0..depth {
        for leaf in BLOCK_LEAVES {
            out.push(format!("blocks.{i}.{leaf}"));
        }
    }
    out.push("norm.weight".into());
    out.push("norm.bias".into());
    out
}

/// Whether `name` belongs to the shared encoder (`blocks.*` or `norm.*`).
pub fn is_backbone_name(name: &str) -> bool {
    name.starts_with("blocks.") || name.starts_with("norm.")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TransferPolicy {
    /// Copy `cls_token` into the point tokenizer's class token.
    pub transfer_cls: bool,
    /// Request `pos_embed` transfer. Image positional tables have no
    /// counterpart in a coordinate-MLP embedding, so for point models this
    /// only records a warning.
    pub transfer_pos: bool,
    /// Exclude every backbone tensor from optimization afterwards.
    pub freeze_backbone: bool,
    /// Unknown names, shape mismatches and missing backbone tensors are errors.
    pub strict: bool,
}

impl Default for TransferPolicy {
    fn default() -> Self {
        TransferPolicy {
            transfer_cls: true,
            transfer_pos: false,
            freeze_backbone: false,
            strict: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SkipReason {
    /// Image-only or decoder tensor, never transferred.
    Policy,
    /// Transfer of this tensor disabled by a policy flag.
    Disabled,
    /// No tensor of that name in the target.
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mismatch {
    pub name: String,
    pub checkpoint: Vec<usize>,
    pub target: Vec<usize>,
}

/// Every checkpoint entry lands in exactly one of `matched`, `skipped` and
/// `mismatched`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TransferReport {
    pub matched: Vec<String>,
    pub skipped: Vec<(String, SkipReason)>,
    pub mismatched: Vec<Mismatch>,
    pub warnings: Vec<String>,
    /// Target tensors to exclude from optimization.
    pub frozen: BTreeSet<String>,
}

impl TransferReport {
    pub fn total(&self) -> usize {
        self.matched.len() + self.skipped.len() + self.mismatched.len()
    }
}

/// Copies matching tensors of `ckpt` into `backbone` (and `cls_token` into
/// `cls` when given and allowed by the policy).
pub fn transfer_image_weights<S: Scalar>(
    ckpt: &NamedTensors<S>,
    backbone: &mut Backbone<S>,
    mut cls: Option<&mut Tensor<S>>,
    policy: &TransferPolicy,
) -> Result<TransferReport> {
    let mut report = TransferReport::default();
    let target_names: BTreeSet<String> = backbone.named().into_iter().map(|(n, _)| n).collect();
    let mut installs: Vec<(String, Tensor<S>)> = Vec::new();

    for (name, t) in ckpt.iter() {
        let name = String::from(name);
        let target_shape: Option<Vec<usize>> = if name == "cls_token" {
            if !policy.transfer_cls {
                report.skipped.push((name.clone(), SkipReason::Disabled));
                continue;
            }
            match cls.as_deref() {
                Some(c) => Some(c.shape().to_vec()),
                None => {
                    report.skipped.push((name.clone(), SkipReason::Disabled));
                    continue;
                }
            }
        } else if name == "pos_embed" {
            let learned = matches!(backbone.pos, PosEmbed::Learned { .. });
            if !policy.transfer_pos || !learned {
                if policy.transfer_pos {
                    report
                        .warnings
                        .push("pos_embed requested but the target embeds coordinates; left untouched".into());
                }
                report.skipped.push((name.clone(), SkipReason::Disabled));
                continue;
            }
            target_shape_of(backbone, &name)
        } else if name.starts_with("patch_embed.") || name.starts_with("head.") {
            report.skipped.push((name.clone(), SkipReason::Policy));
            continue;
        } else if target_names.contains(name.as_str()) {
            target_shape_of(backbone, &name)
        } else {
            None
        };

        let Some(shape) = target_shape else {
            if policy.strict {
                return Err(Error::TransferMismatch {
                    name: name.clone(),
                    reason: "no tensor of that name in the target".into(),
                });
            }
            report.warnings.push(format!("{name}: not in target, skipped"));
            report.skipped.push((name.clone(), SkipReason::Unknown));
            continue;
        };
        if shape.as_slice() != t.shape() {
            if policy.strict {
                return Err(Error::TransferMismatch {
                    name: name.clone(),
                    reason: format!("checkpoint shape {:?}, target shape {:?}", t.shape(), shape),
                });
            }
            report
                .warnings
                .push(format!("{name}: shape {:?} vs target {:?}, skipped", t.shape(), shape));
            report.mismatched.push(Mismatch {
                name: name.clone(),
                checkpoint: t.shape().to_vec(),
                target: shape,
            });
            continue;
        }
        installs.push((name.clone(), t.clone()));
    }

    if policy.strict {
        let provided: BTreeSet<&str> = installs.iter().map(|(n, _)| n.as_str()).collect();
        if let Some(missing) = target_names
            .iter()
            .find(|n| is_backbone_name(n) && !provided.contains(n.as_str()))
        {
            return Err(Error::TransferMismatch {
                name: missing.clone(),
                reason: "backbone tensor missing from checkpoint".into(),
            });
        }
    }
    if installs.is_empty() {
        return Err(Error::IncompatibleCheckpoint);
    }

    for (name, t) in installs {
        if name == "cls_token" {
            if let Some(c) = cls.as_deref_mut() {
                *c = t;
            }
        } else if let Some((_, slot)) = backbone.named_mut().into_iter().find(|(n, _)| *n == name) {
            *slot = t;
        }
        report.matched.push(name);
    }
    if policy.freeze_backbone {
        report.frozen = target_names.into_iter().filter(|n| is_backbone_name(n)).collect();
    }
    Ok(report)
}

impl<S: Scalar> crate::model::PointModel<S> {
    /// Transfers into this model's backbone and class token.
    pub fn transfer_from(&mut self, ckpt: &NamedTensors<S>, policy: &TransferPolicy) -> Result<TransferReport> {
        transfer_image_weights(ckpt, &mut self.backbone, Some(&mut self.tokenizer.cls), policy)
    }
}

fn target_shape_of<S: Scalar>(backbone: &Backbone<S>, name: &str) -> Option<Vec<usize>> {
    backbone
        .named()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t.shape().to_vec())
}
