//! Synthetic desk-scale datasets: parametric shape classification, composite
//! part segmentation and small stroke images for toy image pretraining.
//!
//! Sample `i` of a dataset is a pure function of `(seed, i)`. The first
//! `n_train` ids form the training split and the next `n_val` the validation
//! split, so the splits are disjoint by construction.

use alloc::vec::Vec;
use core::f64::consts::TAU;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::geometry::{Labels, PointCloud};
use crate::rng::{Purpose, RngStream};
use crate::scalar::Scalar;
use crate::tokenizer::Image;

pub const SHAPES8_CLASSES: [&str; 8] = [
    "sphere",
    "cube",
    "cylinder",
    "cone",
    "torus",
    "plane",
    "helix",
    "two_sphere",
];

/// Part ids of the composite shapes.
pub const PARTS4_PARTS: [&str; 4] = ["stem", "cap", "base", "ring"];

pub const PATCHES2D_CLASSES: [&str; 8] = ["hbar", "vbar", "diag", "antidiag", "blob", "ring", "cross", "corner"];

pub const MIN_POINTS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Family {
    Shapes8,
    Parts4,
    Patches2d,
}

impl Family {
    pub fn n_classes(self) -> usize {
        match self {
            Family::Shapes8 => SHAPES8_CLASSES.len(),
            Family::Parts4 => PARTS4_PARTS.len(),
            Family::Patches2d => PATCHES2D_CLASSES.len(),
        }
    }
}

impl core::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes8" => Ok(Family::Shapes8),
            "parts4" => Ok(Family::Parts4),
            "patches2d" => Ok(Family::Patches2d),
            other => Err(Error::InvalidArgument(alloc::format!(
                "unknown dataset family {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SyntheticTaskSpec {
    pub family: Family,
    pub n_train: usize,
    pub n_val: usize,
    /// Points per cloud; for images, the side length in pixels.
    pub points: usize,
    /// Standard deviation of the additive noise.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn new(family: Family, n_train: usize, n_val: usize, points: usize, seed: u64) -> Self {
        SyntheticTaskSpec {
            family,
            n_train,
            n_val,
            points,
            noise: 0.01,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let min = match self.family {
            Family::Patches2d => 8,
            _ => MIN_POINTS,
        };
        if self.points < min {
            return Err(Error::InsufficientPoints {
                needed: min,
                available: self.points,
            });
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidArgument(alloc::format!(
                "noise {} must be finite and non-negative",
                self.noise
            )));
        }
        Ok(())
    }

    /// Global ids of the training and validation samples.
    pub fn split_ids(&self) -> (core::ops::Range<usize>, core::ops::Range<usize>) {
        (0..self.n_train, self.n_train..self.n_train + self.n_val)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
}

/// Scale factor the generators use for sample `id`. Exposed so tests can
/// check a cloud against the geometry it was drawn from.
pub fn sample_scale(seed: u64, id: usize) -> f64 {
    RngStream::keyed(seed, Purpose::Data, 1, id as u64).range(0.7, 1.0)
}

/// Class id of the `i`-th sample within its split (round-robin).
fn round_robin(i: usize, k: usize) -> u32 {
    (i % k) as u32
}

fn generate<T>(spec: &SyntheticTaskSpec, k: usize, mut f: impl FnMut(usize, u32) -> Result<T>) -> Result<Split<T>> {
    spec.validate()?;
    let (train_ids, val_ids) = spec.split_ids();
    let train = train_ids
        .enumerate()
        .map(|(i, id)| f(id, round_robin(i, k)))
        .collect::<Result<_>>()?;
    let val = val_ids
        .enumerate()
        .map(|(i, id)| f(id, round_robin(i, k)))
        .collect::<Result<_>>()?;
    Ok(Split { train, val })
}

type P3 = [f64; 3];

fn on_sphere(rng: &mut RngStream, r: f64) -> P3 {
    let z = rng.range(-1.0, 1.0);
    let phi = rng.range(0.0, TAU);
    let s = Float::sqrt(1.0 - z * z);
    [r * s * Float::cos(phi), r * s * Float::sin(phi), r * z]
}

fn on_cube(rng: &mut RngStream, h: f64) -> P3 {
    let face = rng.below(6);
    let (u, v) = (rng.range(-h, h), rng.range(-h, h));
    let s = if face.is_multiple_of(2) { h } else { -h };
    match face / 2 {
        0 => [s, u, v],
        1 => [u, s, v],
        _ => [u, v, s],
    }
}

/// Lateral surface of a z-aligned cylinder from `z0` to `z1`.
fn on_cylinder(rng: &mut RngStream, r: f64, z0: f64, z1: f64) -> P3 {
    let phi = rng.range(0.0, TAU);
    [r * Float::cos(phi), r * Float::sin(phi), rng.range(z0, z1)]
}

fn on_cone(rng: &mut RngStream, r: f64, h: f64) -> P3 {
    // area-uniform: radius fraction ∝ sqrt(u)
    let t = Float::sqrt(rng.uniform());
    let phi = rng.range(0.0, TAU);
    [r * t * Float::cos(phi), r * t * Float::sin(phi), h * (0.5 - t)]
}

fn on_torus(rng: &mut RngStream, big: f64, small: f64, z: f64) -> P3 {
    // rejection on the tube angle keeps the density uniform over the surface
    loop {
        let (u, v) = (rng.range(0.0, TAU), rng.range(0.0, TAU));
        let w = (big + small * Float::cos(v)) / (big + small);
        if rng.uniform() <= w {
            let ring = big + small * Float::cos(v);
            return [ring * Float::cos(u), ring * Float::sin(u), z + small * Float::sin(v)];
        }
    }
}

fn on_disk(rng: &mut RngStream, r: f64, z: f64) -> P3 {
    let t = r * Float::sqrt(rng.uniform());
    let phi = rng.range(0.0, TAU);
    [t * Float::cos(phi), t * Float::sin(phi), z]
}

fn on_helix(rng: &mut RngStream, r: f64, h: f64) -> P3 {
    let t = rng.uniform();
    let a = 3.0 * TAU * t;
    let tube = on_sphere(rng, 0.05 * r);
    [
        r * Float::cos(a) + tube[0],
        r * Float::sin(a) + tube[1],
        h * (t - 0.5) + tube[2],
    ]
}

fn to_cloud<S: Scalar>(pts: Vec<P3>, noise: f64, rng: &mut RngStream, labels: Labels) -> Result<PointCloud<S>> {
    let positions = pts
        .into_iter()
        .map(|p| p.map(|v| S::of(v + noise * rng.normal())))
        .collect();
    PointCloud::from_positions(positions)?.with_labels(labels)
}

/// One shapes8 sample of class `class`, drawn from stream `id`.
pub fn shape8_sample<S: Scalar>(spec: &SyntheticTaskSpec, id: usize, class: u32) -> Result<PointCloud<S>> {
    let mut rng = RngStream::keyed(spec.seed, Purpose::Data, 0, id as u64);
    let s = sample_scale(spec.seed, id);
    let n = spec.points;
    let pts: Vec<P3> = (0..n)
        .map(|_| match class {
            0 => on_sphere(&mut rng, s),
            1 => on_cube(&mut rng, 0.8 * s),
            2 => on_cylinder(&mut rng, 0.5 * s, -s, s),
            3 => on_cone(&mut rng, 0.8 * s, 1.6 * s),
            4 => on_torus(&mut rng, 0.7 * s, 0.25 * s, 0.0),
            5 => [rng.range(-s, s), rng.range(-s, s), 0.0],
            6 => on_helix(&mut rng, 0.6 * s, 2.0 * s),
            _ => {
                let c = if rng.bernoulli(0.5) { 0.55 * s } else { -0.55 * s };
                let p = on_sphere(&mut rng, 0.45 * s);
                [p[0] + c, p[1], p[2]]
            }
        })
        .collect();
    to_cloud(pts, spec.noise, &mut rng, Labels::Cloud(class))
}

/// Eight parametric surface classes with per-cloud labels, `points` points
/// each and no per-point features.
pub fn gen_shapes8<S: Scalar>(spec: &SyntheticTaskSpec) -> Result<Split<PointCloud<S>>> {
    generate(spec, SHAPES8_CLASSES.len(), |id, class| shape8_sample(spec, id, class))
}

/// Composite objects with per-point part ids. The object category cycles
/// round-robin; each category combines two or three parts.
pub fn parts4_sample<S: Scalar>(spec: &SyntheticTaskSpec, id: usize, category: u32) -> Result<PointCloud<S>> {
    let mut rng = RngStream::keyed(spec.seed, Purpose::Data, 0, id as u64);
    let s = sample_scale(spec.seed, id);
    let n = spec.points;
    // (part id, share of points)
    let parts: &[(u32, f64)] = match category {
        // lamp: base, stem, shade
        0 => &[(2, 0.25), (0, 0.35), (1, 0.40)],
        // ringed post
        1 => &[(0, 0.6), (3, 0.4)],
        // ringed ball
        2 => &[(1, 0.55), (3, 0.45)],
        // stool: base and post
        _ => &[(2, 0.45), (0, 0.55)],
    };
    let mut pts = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut remaining = n;
    for (j, &(part, share)) in parts.iter().enumerate() {
        let count = if j + 1 == parts.len() {
            remaining
        } else {
            ((n as f64 * share) as usize).min(remaining)
        };
        remaining -= count;
        for _ in 0..count {
            let p = match (category, part) {
                (0, 2) | (3, 2) => on_disk(&mut rng, 0.6 * s, -s),
                (0, 0) => on_cylinder(&mut rng, 0.1 * s, -s, 0.4 * s),
                (0, 1) => {
                    let p = on_sphere(&mut rng, 0.45 * s);
                    [p[0], p[1], p[2] + 0.75 * s]
                }
                (3, 0) => on_cylinder(&mut rng, 0.25 * s, -s, 0.3 * s),
                (1, 0) => on_cylinder(&mut rng, 0.2 * s, -s, s),
                (1, 3) => on_torus(&mut rng, 0.5 * s, 0.12 * s, 0.2 * s),
                (_, 1) => on_sphere(&mut rng, 0.6 * s),
                _ => on_torus(&mut rng, 0.85 * s, 0.12 * s, 0.0),
            };
            pts.push(p);
            labels.push(part);
        }
    }
    to_cloud(pts, spec.noise, &mut rng, Labels::Points(labels))
}

pub fn gen_parts4<S: Scalar>(spec: &SyntheticTaskSpec) -> Result<Split<PointCloud<S>>> {
    generate(spec, 4, |id, category| parts4_sample(spec, id, category))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage<S> {
    pub image: Image<S>,
    pub label: u32,
}

/// One grayscale `side × side` stroke image of class `class`.
pub fn patch_sample<S: Scalar>(spec: &SyntheticTaskSpec, id: usize, class: u32) -> Result<LabeledImage<S>> {
    let mut rng = RngStream::keyed(spec.seed, Purpose::Data, 0, id as u64);
    let side = spec.points;
    let n = side as f64;
    let cx = rng.range(0.35, 0.65) * n;
    let cy = rng.range(0.35, 0.65) * n;
    let width = rng.range(0.06, 0.12) * n;
    let radius = rng.range(0.2, 0.3) * n;
    let intensity = rng.range(0.7, 1.0);
    let soft = |d: f64| {
        // smooth band of half-width `width`
        let t = d / width;
        Float::exp(-t * t)
    };
    let mut data = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let r = Float::sqrt(px * px + py * py);
            let v = match class {
                0 => soft(py),
                1 => soft(px),
                2 => soft((px - py) / 2f64.sqrt()),
                3 => soft((px + py) / 2f64.sqrt()),
                4 => soft(r / 1.5),
                5 => soft(r - radius),
                6 => soft(px).max(soft(py)),
                _ => {
                    // L-shaped corner opening to the lower right
                    let h = if px >= -width { soft(py) } else { 0.0 };
                    let v = if py >= -width { soft(px) } else { 0.0 };
                    h.max(v)
                }
            };
            let noisy = intensity * v + spec.noise * rng.normal();
            data.push(S::of(noisy.clamp(0.0, 1.0)));
        }
    }
    Ok(LabeledImage {
        image: Image::new(side, side, 1, data)?,
        label: class,
    })
}

pub fn gen_patches2d<S: Scalar>(spec: &SyntheticTaskSpec) -> Result<Split<LabeledImage<S>>> {
    generate(spec, PATCHES2D_CLASSES.len(), |id, class| patch_sample(spec, id, class))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(family: Family, points: usize) -> SyntheticTaskSpec {
        SyntheticTaskSpec::new(family, 16, 8, points, 11)
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            gen_shapes8::<f32>(&spec(Family::Shapes8, 31)),
            Err(Error::InsufficientPoints { needed: 32, .. })
        ));
        assert!(gen_parts4::<f32>(&spec(Family::Parts4, 8)).is_err());
        assert!(gen_patches2d::<f32>(&spec(Family::Patches2d, 4)).is_err());
    }

    #[test]
    fn labels_round_robin() {
        let d = gen_shapes8::<f32>(&spec(Family::Shapes8, 64)).unwrap();
        for (i, c) in d.train.iter().enumerate() {
            assert_eq!(c.labels, Labels::Cloud((i % 8) as u32));
            assert_eq!(c.len(), 64);
        }
    }

    #[test]
    fn parts_cover_every_point() {
        let d = gen_parts4::<f64>(&spec(Family::Parts4, 100)).unwrap();
        for c in d.train.iter().chain(&d.val) {
            match &c.labels {
                Labels::Points(l) => {
                    assert_eq!(l.len(), 100);
                    assert!(l.iter().all(|&p| p < 4));
                }
                other => panic!("unexpected labels {other:?}"),
            }
        }
    }

    #[test]
    fn images_have_requested_side() {
        let d = gen_patches2d::<f32>(&spec(Family::Patches2d, 16)).unwrap();
        assert_eq!(d.train.len(), 16);
        assert!(d.val.iter().all(|s| s.image.height == 16 && s.image.width == 16));
        assert!(d.train[0].image.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
