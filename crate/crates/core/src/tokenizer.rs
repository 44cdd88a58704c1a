//! Tokenizers mapping raw inputs into the shared token space of width `C`.
//!
//! The point tokenizer samples `N / ratio` centers by farthest point
//! sampling, gathers k nearest neighbors, and runs one graph convolution per
//! center:
//!
//! ```text
//! e_ij    = act(h1([p_j - p_i ; x_j - x_i]))
//! token_i = max_j h2([e_ij ; max_j' e_ij'])
//! ```
//!
//! The image tokenizer is a linear projection of flattened square patches.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::geometry::{group, knn_query, NeighborIndex, PointCloud};
use crate::nn::{gelu_backward, gelu_forward, Linear};
use crate::params::{join, Params};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// What enters `h1` for each edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum InputMode {
    /// `[p_j - p_i ; x_j - x_i]`
    #[default]
    Relative,
    /// `[p_j ; x_j - x_i]`
    AbsPos,
    /// `[p_j - p_i ; x_j]`
    AbsFeat,
}

impl core::str::FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relative" => Ok(InputMode::Relative),
            "abs_pos" => Ok(InputMode::AbsPos),
            "abs_feat" => Ok(InputMode::AbsFeat),
            other => Err(Error::InvalidArgument(alloc::format!(
                "unknown tokenizer mode '{other}'"
            ))),
        }
    }
}

/// Center positions, their tokens, and the class token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet<S> {
    /// One row per token; all zero for image tokens' third coordinate.
    pub center_pos: Vec<[S; 3]>,
    /// `N_c × C`
    pub tokens: Tensor<S>,
    /// `1 × C`
    pub cls: Tensor<S>,
}

impl<S: Scalar> TokenSet<S> {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.center_pos.is_empty()
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        if self.center_pos.is_empty() {
            return Err(Error::EmptyInput("token set"));
        }
        if self.tokens.shape() != [self.center_pos.len(), width] || self.cls.shape() != [1, width] {
            return Err(shape_err!(
                "token set {:?} / cls {:?} for {} centers of width {}",
                self.tokens.shape(),
                self.cls.shape(),
                self.center_pos.len(),
                width
            ));
        }
        if !(self.tokens.is_finite() && self.cls.is_finite()) {
            return Err(Error::NonFinite("token set".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct PointTokenizerConfig {
    /// Per-point input feature width.
    pub c_in: usize,
    /// Token width; must equal the backbone width.
    pub dim: usize,
    /// Width of `h1`'s output.
    pub hidden: usize,
    pub k: usize,
    pub downsample_ratio: usize,
    pub input_mode: InputMode,
    /// Graph convolutions applied in sequence; stages after the first run on
    /// the tokens of the previous one.
    pub stages: usize,
}

impl Default for PointTokenizerConfig {
    fn default() -> Self {
        PointTokenizerConfig::new(0, 384)
    }
}

impl PointTokenizerConfig {
    pub fn new(c_in: usize, dim: usize) -> Self {
        PointTokenizerConfig {
            c_in,
            dim,
            hidden: (dim / 2).max(1),
            k: 16,
            downsample_ratio: 16,
            input_mode: InputMode::Relative,
            stages: 1,
        }
    }

    pub fn n_centers(&self, n_points: usize) -> usize {
        (n_points / self.downsample_ratio.max(1)).max(1)
    }
}

/// `h1` and `h2` of one graph convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphConv<S> {
    pub h1: Linear<S>,
    pub h2: Linear<S>,
}

#[derive(Debug, Clone)]
pub struct GraphConvCache<S> {
    edges: usize,
    k: usize,
    u: Vec<S>,
    a: Vec<S>,
    z: Vec<S>,
    /// `N_c × H` neighbor slot holding the inner max.
    arg_inner: Vec<usize>,
    /// `N_c × C` neighbor slot holding the outer max.
    arg_outer: Vec<usize>,
}

impl<S: Scalar> GraphConv<S> {
    pub fn new(in_width: usize, hidden: usize, dim: usize, rng: &mut RngStream) -> Self {
        GraphConv {
            h1: Linear::new(in_width, hidden, rng),
            h2: Linear::new(2 * hidden, dim, rng),
        }
    }

    pub fn in_width(&self) -> usize {
        self.h1.fan_in()
    }

    pub fn hidden(&self) -> usize {
        self.h1.fan_out()
    }

    pub fn dim(&self) -> usize {
        self.h2.fan_out()
    }

    /// Edge inputs `E × (3 + c)` for every (center, neighbor) pair.
    fn edge_inputs(positions: &[[S; 3]], features: &[S], c: usize, nbr: &NeighborIndex, mode: InputMode) -> Vec<S> {
        let width = 3 + c;
        let mut u = Vec::with_capacity(nbr.neighbor_ids.len() * width);
        for (ci, &center) in nbr.center_ids.iter().enumerate() {
            let pi = positions[center];
            let xi = &features[center * c..(center + 1) * c];
            for &j in nbr.row(ci) {
                let pj = positions[j];
                let xj = &features[j * c..(j + 1) * c];
                match mode {
                    InputMode::AbsPos => u.extend_from_slice(&pj),
                    _ => u.extend((0..3).map(|a| pj[a] - pi[a])),
                }
                match mode {
                    InputMode::AbsFeat => u.extend_from_slice(xj),
                    _ => u.extend(xj.iter().zip(xi).map(|(&a, &b)| a - b)),
                }
            }
        }
        u
    }

    pub fn forward(
        &self,
        positions: &[[S; 3]],
        features: &[S],
        c: usize,
        nbr: &NeighborIndex,
        mode: InputMode,
    ) -> Result<(Vec<S>, GraphConvCache<S>)> {
        if 3 + c != self.in_width() {
            return Err(shape_err!(
                "edge input width {} does not match h1 input width {}",
                3 + c,
                self.in_width()
            ));
        }
        let (h, dim, k) = (self.hidden(), self.dim(), nbr.k);
        let n_c = nbr.center_ids.len();
        let edges = n_c * k;
        let u = Self::edge_inputs(positions, features, c, nbr, mode);
        let a = self.h1.forward(&u, edges);
        let e = gelu_forward(&a);

        let mut arg_inner = vec![0usize; n_c * h];
        let mut z = vec![S::zero(); edges * 2 * h];
        for i in 0..n_c {
            let mut best: Vec<S> = e[i * k * h..(i * k + 1) * h].to_vec();
            let arg = &mut arg_inner[i * h..(i + 1) * h];
            for j in 1..k {
                let row = &e[(i * k + j) * h..(i * k + j + 1) * h];
                for q in 0..h {
                    if row[q] > best[q] {
                        best[q] = row[q];
                        arg[q] = j;
                    }
                }
            }
            for j in 0..k {
                let edge = i * k + j;
                let zr = &mut z[edge * 2 * h..(edge + 1) * 2 * h];
                zr[..h].copy_from_slice(&e[edge * h..(edge + 1) * h]);
                zr[h..].copy_from_slice(&best);
            }
        }

        let y = self.h2.forward(&z, edges);
        let mut tokens = vec![S::zero(); n_c * dim];
        let mut arg_outer = vec![0usize; n_c * dim];
        for i in 0..n_c {
            let t = &mut tokens[i * dim..(i + 1) * dim];
            t.copy_from_slice(&y[i * k * dim..(i * k + 1) * dim]);
            let arg = &mut arg_outer[i * dim..(i + 1) * dim];
            for j in 1..k {
                let row = &y[(i * k + j) * dim..(i * k + j + 1) * dim];
                for q in 0..dim {
                    if row[q] > t[q] {
                        t[q] = row[q];
                        arg[q] = j;
                    }
                }
            }
        }
        Ok((
            tokens,
            GraphConvCache {
                edges,
                k,
                u,
                a,
                z,
                arg_inner,
                arg_outer,
            },
        ))
    }

    /// Accumulates parameter gradients and returns `d features` (`N × c`).
    pub fn backward(
        &self,
        cache: &GraphConvCache<S>,
        d_tokens: &[S],
        n_points: usize,
        c: usize,
        nbr: &NeighborIndex,
        mode: InputMode,
        grad: &mut Self,
    ) -> Vec<S> {
        let (h, dim, k) = (self.hidden(), self.dim(), cache.k);
        let n_c = nbr.center_ids.len();
        let mut dy = vec![S::zero(); cache.edges * dim];
        for i in 0..n_c {
            for q in 0..dim {
                let j = cache.arg_outer[i * dim + q];
                dy[(i * k + j) * dim + q] += d_tokens[i * dim + q];
            }
        }
        let dz = self.h2.backward(&cache.z, &dy, cache.edges, &mut grad.h2);
        let mut de = vec![S::zero(); cache.edges * h];
        for i in 0..n_c {
            for j in 0..k {
                let edge = i * k + j;
                de[edge * h..(edge + 1) * h].copy_from_slice(&dz[edge * 2 * h..edge * 2 * h + h]);
            }
            for q in 0..h {
                let mut dm = S::zero();
                for j in 0..k {
                    dm += dz[(i * k + j) * 2 * h + h + q];
                }
                let j = cache.arg_inner[i * h + q];
                de[(i * k + j) * h + q] += dm;
            }
        }
        let da = gelu_backward(&cache.a, &de);
        let du = self.h1.backward(&cache.u, &da, cache.edges, &mut grad.h1);

        let mut d_feat = vec![S::zero(); n_points * c];
        if c == 0 {
            return d_feat;
        }
        let width = 3 + c;
        for (ci, &center) in nbr.center_ids.iter().enumerate() {
            for (slot, &j) in nbr.row(ci).iter().enumerate() {
                let edge = ci * k + slot;
                let g = &du[edge * width + 3..(edge + 1) * width];
                for q in 0..c {
                    d_feat[j * c + q] += g[q];
                }
                if mode != InputMode::AbsFeat {
                    for q in 0..c {
                        d_feat[center * c + q] -= g[q];
                    }
                }
            }
        }
        d_feat
    }
}

impl<S: Scalar> Params<S> for GraphConv<S> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<S>)>) {
        self.h1.visit(&join(prefix, "h1"), out);
        self.h2.visit(&join(prefix, "h2"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<S>)>) {
        self.h1.visit_mut(&join(prefix, "h1"), out);
        self.h2.visit_mut(&join(prefix, "h2"), out);
    }
}

/// Learnable state of the point tokenizer: one graph convolution per stage
/// and the class token.
#[derive(Debug, Clone, PartialEq)]
pub struct PointTokenizer<S> {
    pub stages: Vec<GraphConv<S>>,
    /// `1 × C`
    pub cls: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct PointTokenizerCache<S> {
    n_points: usize,
    stages: Vec<(NeighborIndex, GraphConvCache<S>)>,
}

impl<S: Scalar> PointTokenizerCache<S> {
    /// Neighborhoods of the first stage.
    pub fn neighbors(&self) -> &NeighborIndex {
        &self.stages[0].0
    }
}

impl<S: Scalar> PointTokenizer<S> {
    pub fn new(cfg: &PointTokenizerConfig, rng: &mut RngStream) -> Self {
        let mut stages = Vec::with_capacity(cfg.stages.max(1));
        for s in 0..cfg.stages.max(1) {
            let c = if s == 0 { cfg.c_in } else { cfg.dim };
            stages.push(GraphConv::new(3 + c, cfg.hidden, cfg.dim, rng));
        }
        let cls = (0..cfg.dim).map(|_| S::of(0.02 * rng.normal())).collect();
        PointTokenizer {
            stages,
            cls: Tensor::matrix(1, cfg.dim, cls),
        }
    }

    pub fn dim(&self) -> usize {
        self.cls.cols()
    }

    pub fn forward(
        &self,
        cloud: &PointCloud<S>,
        cfg: &PointTokenizerConfig,
        fps_start: usize,
    ) -> Result<(TokenSet<S>, PointTokenizerCache<S>)> {
        cloud.validate()?;
        let n = cloud.len();
        if n < cfg.downsample_ratio {
            return Err(Error::InsufficientPoints {
                needed: cfg.downsample_ratio,
                available: n,
            });
        }
        if cfg.k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if cloud.c_in != cfg.c_in {
            return Err(shape_err!(
                "cloud has {} feature channels, tokenizer expects {}",
                cloud.c_in,
                cfg.c_in
            ));
        }
        let n_c = cfg.n_centers(n);
        let first = group(&cloud.positions, n_c, cfg.k, fps_start % n)?;
        let center_pos: Vec<[S; 3]> = first.center_ids.iter().map(|&i| cloud.positions[i]).collect();
        let (mut tokens, gc) =
            self.stages[0].forward(&cloud.positions, &cloud.features, cloud.c_in, &first, cfg.input_mode)?;
        let mut caches = vec![(first, gc)];

        for stage in &self.stages[1..] {
            let nb = knn_query(&center_pos, &center_pos, cfg.k)?;
            let nbr = NeighborIndex {
                center_ids: (0..n_c).collect(),
                k: cfg.k,
                neighbor_ids: nb.ids,
            };
            let (t, gc) = stage.forward(&center_pos, &tokens, self.dim(), &nbr, cfg.input_mode)?;
            tokens = t;
            caches.push((nbr, gc));
        }
        Ok((
            TokenSet {
                center_pos,
                tokens: Tensor::matrix(n_c, self.dim(), tokens),
                cls: self.cls.clone(),
            },
            PointTokenizerCache {
                n_points: n,
                stages: caches,
            },
        ))
    }

    /// Accumulates gradients for all stages and the class token. Returns the
    /// gradient with respect to the input point features (`N × c_in`).
    pub fn backward(
        &self,
        cache: &PointTokenizerCache<S>,
        d_tokens: &[S],
        d_cls: &[S],
        cfg: &PointTokenizerConfig,
        grad: &mut Self,
    ) -> Vec<S> {
        for (g, &d) in grad.cls.data_mut().iter_mut().zip(d_cls) {
            *g += d;
        }
        let mut d = d_tokens.to_vec();
        for s in (0..self.stages.len()).rev() {
            let (nbr, gc) = &cache.stages[s];
            let (n, c) = if s == 0 {
                (cache.n_points, cfg.c_in)
            } else {
                (nbr.center_ids.len(), self.dim())
            };
            d = self.stages[s].backward(gc, &d, n, c, nbr, cfg.input_mode, &mut grad.stages[s]);
        }
        d
    }
}

impl<S: Scalar> Params<S> for PointTokenizer<S> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<S>)>) {
        out.push((join(prefix, "cls_token"), &self.cls));
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &alloc::format!("tokenizer.{i}")), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<S>)>) {
        out.push((join(prefix, "cls_token"), &mut self.cls));
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &alloc::format!("tokenizer.{i}")), out);
        }
    }
}

/// Convenience wrapper: tokenize with FPS starting at index 0.
pub fn tokenize_points<S: Scalar>(
    cloud: &PointCloud<S>,
    params: &PointTokenizer<S>,
    cfg: &PointTokenizerConfig,
) -> Result<TokenSet<S>> {
    params.forward(cloud, cfg, 0).map(|(t, _)| t)
}

/// `H × W × C` image, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<S> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Image<S> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(shape_err!(
                "{} values for a {}×{}×{} image",
                data.len(),
                height,
                width,
                channels
            ));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> S {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Linear patch embedding plus class token.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTokenizer<S> {
    /// `(patch² · channels) × C`
    pub proj: Linear<S>,
    pub cls: Tensor<S>,
    pub patch: usize,
}

#[derive(Debug, Clone)]
pub struct ImageTokenizerCache<S> {
    patches: Vec<S>,
    n_tokens: usize,
}

impl<S: Scalar> ImageTokenizer<S> {
    pub fn new(patch: usize, channels: usize, dim: usize, rng: &mut RngStream) -> Self {
        let cls = (0..dim).map(|_| S::of(0.02 * rng.normal())).collect();
        ImageTokenizer {
            proj: Linear::new(patch * patch * channels, dim, rng),
            cls: Tensor::matrix(1, dim, cls),
            patch,
        }
    }

    /// Patches flattened row-major (pixel rows, then columns, then channels),
    /// in row-major patch-grid order.
    pub fn flatten_patches(image: &Image<S>, patch: usize) -> Result<(Vec<S>, usize, usize)> {
        if patch == 0 || !image.height.is_multiple_of(patch) || !image.width.is_multiple_of(patch) {
            return Err(shape_err!(
                "{}×{} image is not divisible into {}-pixel patches",
                image.height,
                image.width,
                patch
            ));
        }
        let (gh, gw) = (image.height / patch, image.width / patch);
        let mut out = Vec::with_capacity(image.data.len());
        for pr in 0..gh {
            for pc in 0..gw {
                for dy in 0..patch {
                    let y = pr * patch + dy;
                    let start = (y * image.width + pc * patch) * image.channels;
                    out.extend_from_slice(&image.data[start..start + patch * image.channels]);
                }
            }
        }
        Ok((out, gh, gw))
    }

    pub fn forward(&self, image: &Image<S>) -> Result<(TokenSet<S>, ImageTokenizerCache<S>)> {
        let (patches, gh, gw) = Self::flatten_patches(image, self.patch)?;
        let n = gh * gw;
        if patches.len() != n * self.proj.fan_in() {
            return Err(shape_err!(
                "patch width {} does not match projection input {}",
                patches.len() / n.max(1),
                self.proj.fan_in()
            ));
        }
        let tokens = self.proj.forward(&patches, n);
        let center_pos = (0..n)
            .map(|t| [S::of_usize(t / gw), S::of_usize(t % gw), S::zero()])
            .collect();
        Ok((
            TokenSet {
                center_pos,
                tokens: Tensor::matrix(n, self.proj.fan_out(), tokens),
                cls: self.cls.clone(),
            },
            ImageTokenizerCache { patches, n_tokens: n },
        ))
    }

    pub fn backward(&self, cache: &ImageTokenizerCache<S>, d_tokens: &[S], d_cls: &[S], grad: &mut Self) {
        self.proj
            .backward_params(&cache.patches, d_tokens, cache.n_tokens, &mut grad.proj);
        for (g, &d) in grad.cls.data_mut().iter_mut().zip(d_cls) {
            *g += d;
        }
    }
}

impl<S: Scalar> Params<S> for ImageTokenizer<S> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<S>)>) {
        out.push((join(prefix, "cls_token"), &self.cls));
        self.proj.visit(&join(prefix, "patch_embed.proj"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<S>)>) {
        out.push((join(prefix, "cls_token"), &mut self.cls));
        self.proj.visit_mut(&join(prefix, "patch_embed.proj"), out);
    }
}
