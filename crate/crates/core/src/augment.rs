//! Training-time point cloud augmentations.
//!
//! Every augmentation draws only from the stream it is given, so a fixed
//! `(seed, epoch, sample)` key reproduces the same cloud.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::rng::RngStream;
use crate::scalar::Scalar;

#[cfg(feature = "serde")]
mod defaults {
    pub fn scale_lo() -> f64 {
        0.9
    }
    pub fn scale_hi() -> f64 {
        1.1
    }
    pub fn sigma() -> f64 {
        0.005
    }
    pub fn clip() -> f64 {
        0.02
    }
    pub fn p() -> f64 {
        0.2
    }
    pub fn colors() -> core::ops::Range<usize> {
        0..3
    }
}

/// One augmentation with its parameters. Channel ranges are clipped to the
/// cloud's feature width.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "name", rename_all = "snake_case"))]
pub enum Augmentation {
    /// Uniform angle in `[0, 2π)` about the z axis.
    Rotate,
    /// Isotropic factor in `[lo, hi]`.
    Scale {
        #[cfg_attr(feature = "serde", serde(default = "defaults::scale_lo"))]
        lo: f64,
        #[cfg_attr(feature = "serde", serde(default = "defaults::scale_hi"))]
        hi: f64,
    },
    /// Per-coordinate Gaussian noise clipped to `±clip`.
    Jitter {
        #[cfg_attr(feature = "serde", serde(default = "defaults::sigma"))]
        sigma: f64,
        #[cfg_attr(feature = "serde", serde(default = "defaults::clip"))]
        clip: f64,
    },
    /// With probability `p`, remap each color channel affinely so that its
    /// per-cloud minimum becomes 0 and maximum becomes 1.
    ColorAutocontrast {
        #[cfg_attr(feature = "serde", serde(default = "defaults::p"))]
        p: f64,
        #[cfg_attr(feature = "serde", serde(default = "defaults::colors"))]
        channels: Range<usize>,
    },
    /// With probability `p`, zero every color channel.
    ColorDrop {
        #[cfg_attr(feature = "serde", serde(default = "defaults::p"))]
        p: f64,
        #[cfg_attr(feature = "serde", serde(default = "defaults::colors"))]
        channels: Range<usize>,
    },
    /// With probability `p`, zero the given feature channels (all of them
    /// when unset; normals for part segmentation).
    FeatureDrop {
        #[cfg_attr(feature = "serde", serde(default = "defaults::p"))]
        p: f64,
        #[cfg_attr(feature = "serde", serde(default))]
        channels: Option<Range<usize>>,
    },
}

impl Augmentation {
    pub fn name(&self) -> &'static str {
        match self {
            Augmentation::Rotate => "rotate",
            Augmentation::Scale { .. } => "scale",
            Augmentation::Jitter { .. } => "jitter",
            Augmentation::ColorAutocontrast { .. } => "color_autocontrast",
            Augmentation::ColorDrop { .. } => "color_drop",
            Augmentation::FeatureDrop { .. } => "feature_drop",
        }
    }

    fn apply<S: Scalar>(&self, cloud: &mut PointCloud<S>, rng: &mut RngStream) {
        match *self {
            Augmentation::Rotate => {
                let theta = rng.range(0.0, core::f64::consts::TAU);
                let (sin, cos) = Float::sin_cos(theta);
                let (sin, cos) = (S::of(sin), S::of(cos));
                for p in &mut cloud.positions {
                    let (x, y) = (p[0], p[1]);
                    p[0] = cos * x - sin * y;
                    p[1] = sin * x + cos * y;
                }
            }
            Augmentation::Scale { lo, hi } => {
                let s = S::of(rng.range(lo, hi));
                for p in &mut cloud.positions {
                    for v in p.iter_mut() {
                        *v *= s;
                    }
                }
            }
            Augmentation::Jitter { sigma, clip } => {
                for p in &mut cloud.positions {
                    for v in p.iter_mut() {
                        *v += S::of((sigma * rng.normal()).clamp(-clip, clip));
                    }
                }
            }
            Augmentation::ColorAutocontrast { p, ref channels } => {
                if !rng.bernoulli(p) {
                    return;
                }
                let c = cloud.c_in;
                for ch in clip_range(channels, c) {
                    let column = cloud.features.iter().skip(ch).step_by(c);
                    let (lo, hi) = column.fold((S::infinity(), S::neg_infinity()), |(lo, hi), &v| {
                        (lo.min(v), hi.max(v))
                    });
                    let span = hi - lo;
                    if span > S::zero() {
                        for v in cloud.features.iter_mut().skip(ch).step_by(c) {
                            *v = (*v - lo) / span;
                        }
                    }
                }
            }
            Augmentation::ColorDrop { p, ref channels } => drop_channels(cloud, p, channels, rng),
            Augmentation::FeatureDrop { p, ref channels } => {
                drop_channels(cloud, p, channels.as_ref().unwrap_or(&(0..cloud.c_in)), rng)
            }
        }
    }
}

fn drop_channels<S: Scalar>(cloud: &mut PointCloud<S>, p: f64, channels: &Range<usize>, rng: &mut RngStream) {
    if !rng.bernoulli(p) {
        return;
    }
    let c = cloud.c_in;
    for ch in clip_range(channels, c) {
        for v in cloud.features.iter_mut().skip(ch).step_by(c) {
            *v = S::zero();
        }
    }
}

fn clip_range(r: &Range<usize>, c: usize) -> Range<usize> {
    r.start.min(c)..r.end.min(c)
}

impl core::str::FromStr for Augmentation {
    type Err = Error;

    /// Parses a bare name into the augmentation with default parameters.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "rotate" => Augmentation::Rotate,
            "scale" => Augmentation::Scale { lo: 0.9, hi: 1.1 },
            "jitter" => Augmentation::Jitter {
                sigma: 0.005,
                clip: 0.02,
            },
            "color_autocontrast" => Augmentation::ColorAutocontrast { p: 0.2, channels: 0..3 },
            "color_drop" => Augmentation::ColorDrop { p: 0.2, channels: 0..3 },
            "feature_drop" => Augmentation::FeatureDrop { p: 0.2, channels: None },
            other => return Err(Error::UnknownAugmentation(String::from(other))),
        })
    }
}

/// Parses a list of bare names.
pub fn parse_list(names: &[&str]) -> Result<Vec<Augmentation>> {
    names.iter().map(|n| n.parse()).collect()
}

/// Applies `spec` in order. An empty list returns an exact copy.
pub fn augment<S: Scalar>(cloud: &PointCloud<S>, spec: &[Augmentation], rng: &mut RngStream) -> PointCloud<S> {
    let mut out = cloud.clone();
    for a in spec {
        a.apply(&mut out, rng);
    }
    out
}
