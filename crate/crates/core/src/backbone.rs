//! Transformer encoder shared by image and point inputs.
//!
//! Input rows are `[cls ; token_1 ; … ; token_Nc]` with positional
//! embeddings added before the first block. Row 0 of the output is the class
//! token.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::nn::{apply_mask, gelu_backward, gelu_forward, LayerNorm, Linear, Mode, NormCache};
use crate::params::{join, Params};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::tokenizer::TokenSet;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct BackboneConfig {
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: f64,
    pub dropout: f64,
    pub prenorm: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::vit_s()
    }
}

impl BackboneConfig {
    /// 12 blocks, 6 heads, width 384.
    pub fn vit_s() -> Self {
        BackboneConfig {
            depth: 12,
            heads: 6,
            dim: 384,
            mlp_ratio: 4.0,
            dropout: 0.0,
            prenorm: true,
        }
    }

    pub fn new(dim: usize, depth: usize, heads: usize) -> Self {
        BackboneConfig {
            depth,
            heads,
            dim,
            ..BackboneConfig::vit_s()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.dim as f64 * self.mlp_ratio) as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::InvalidArgument("mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// One encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<S> {
    pub norm1: LayerNorm<S>,
    pub qkv: Linear<S>,
    pub proj: Linear<S>,
    pub norm2: LayerNorm<S>,
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
}

/// Leaf names under `blocks.<i>.`, in traversal order.
pub const BLOCK_LEAVES: [&str; 12] = [
    "norm1.weight",
    "norm1.bias",
    "attn.qkv.weight",
    "attn.qkv.bias",
    "attn.proj.weight",
    "attn.proj.bias",
    "norm2.weight",
    "norm2.bias",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

impl<S: Scalar> Block<S> {
    pub fn new(cfg: &BackboneConfig, rng: &mut RngStream) -> Self {
        let (c, h) = (cfg.dim, cfg.mlp_hidden());
        Block {
            norm1: LayerNorm::new(c),
            qkv: Linear::new(c, 3 * c, rng),
            proj: Linear::new(c, c, rng),
            norm2: LayerNorm::new(c),
            fc1: Linear::new(c, h, rng),
            fc2: Linear::new(h, c, rng),
        }
    }
}

impl<S: Scalar> Params<S> for Block<S> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<S>)>) {
        self.norm1.visit(&join(prefix, "norm1"), out);
        self.qkv.visit(&join(prefix, "attn.qkv"), out);
        self.proj.visit(&join(prefix, "attn.proj"), out);
        self.norm2.visit(&join(prefix, "norm2"), out);
        self.fc1.visit(&join(prefix, "mlp.fc1"), out);
        self.fc2.visit(&join(prefix, "mlp.fc2"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<S>)>) {
        self.norm1.visit_mut(&join(prefix, "norm1"), out);
        self.qkv.visit_mut(&join(prefix, "attn.qkv"), out);
        self.proj.visit_mut(&join(prefix, "attn.proj"), out);
        self.norm2.visit_mut(&join(prefix, "norm2"), out);
        self.fc1.visit_mut(&join(prefix, "mlp.fc1"), out);
        self.fc2.visit_mut(&join(prefix, "mlp.fc2"), out);
    }
}

/// Positional information added to the input rows.
#[derive(Debug, Clone, PartialEq)]
pub enum PosEmbed<S> {
    None,
    /// Two-layer MLP on token center coordinates, plus a learned vector for
    /// the class token. Used for point tokens.
    Coord {
        fc1: Linear<S>,
        fc2: Linear<S>,
        cls: Tensor<S>,
    },
    /// One learned row per input position, class token first. Used for
    /// image patches.
    Learned {
        table: Tensor<S>,
    },
}

impl<S: Scalar> PosEmbed<S> {
    pub fn coord(dim: usize, rng: &mut RngStream) -> Self {
        PosEmbed::Coord {
            fc1: Linear::new(3, dim, rng),
            fc2: Linear::new(dim, dim, rng),
            cls: Tensor::matrix(1, dim, (0..dim).map(|_| S::of(0.02 * rng.normal())).collect()),
        }
    }

    pub fn learned(rows: usize, dim: usize, rng: &mut RngStream) -> Self {
        PosEmbed::Learned {
            table: Tensor::matrix(rows, dim, (0..rows * dim).map(|_| S::of(0.02 * rng.normal())).collect()),
        }
    }
}

#[derive(Debug, Clone)]
struct PosCache<S> {
    input: Vec<S>,
    pre: Vec<S>,
    act: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<S> {
    pub blocks: Vec<Block<S>>,
    pub norm: LayerNorm<S>,
    pub pos: PosEmbed<S>,
}

#[derive(Debug, Clone)]
struct AttnCache<S> {
    input: Vec<S>,
    qkv: Vec<S>,
    /// `heads × T × T`
    probs: Vec<S>,
    merged: Vec<S>,
    mask: Option<Vec<S>>,
}

#[derive(Debug, Clone)]
struct MlpCache<S> {
    input: Vec<S>,
    pre: Vec<S>,
    act: Vec<S>,
    mask: Option<Vec<S>>,
}

#[derive(Debug, Clone)]
struct BlockCache<S> {
    ln1: NormCache<S>,
    attn: AttnCache<S>,
    ln2: NormCache<S>,
    mlp: MlpCache<S>,
}

#[derive(Debug, Clone)]
pub struct BackboneCache<S> {
    rows: usize,
    pos: Option<PosCache<S>>,
    blocks: Vec<BlockCache<S>>,
    final_ln: NormCache<S>,
}

impl<S: Scalar> BackboneCache<S> {
    /// Attention probabilities of a block, `heads × T × T`.
    pub fn attention(&self, block: usize) -> &[S] {
        &self.blocks[block].attn.probs
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

impl<S: Scalar> Backbone<S> {
    pub fn new(cfg: &BackboneConfig, pos: PosEmbed<S>, rng: &mut RngStream) -> Self {
        Backbone {
            blocks: (0..cfg.depth).map(|_| Block::new(cfg, rng)).collect(),
            norm: LayerNorm::new(cfg.dim),
            pos,
        }
    }

    pub fn dim(&self) -> usize {
        self.norm.width()
    }

    /// Input rows `[cls ; tokens]` with positional embeddings added.
    fn embed(&self, tokens: &TokenSet<S>) -> Result<(Vec<S>, Option<PosCache<S>>)> {
        let c = self.dim();
        let n = tokens.len();
        let rows = n + 1;
        let mut x = Vec::with_capacity(rows * c);
        x.extend_from_slice(tokens.cls.data());
        x.extend_from_slice(tokens.tokens.data());
        match &self.pos {
            PosEmbed::None => Ok((x, None)),
            PosEmbed::Learned { table } => {
                if table.shape() != [rows, c] {
                    return Err(shape_err!(
                        "learned positional table {:?} for {} rows of width {}",
                        table.shape(),
                        rows,
                        c
                    ));
                }
                for (v, &p) in x.iter_mut().zip(table.data()) {
                    *v += p;
                }
                Ok((x, None))
            }
            PosEmbed::Coord { fc1, fc2, cls } => {
                let input: Vec<S> = tokens.center_pos.iter().flat_map(|p| *p).collect();
                let pre = fc1.forward(&input, n);
                let act = gelu_forward(&pre);
                let out = fc2.forward(&act, n);
                for (v, &p) in x[..c].iter_mut().zip(cls.data()) {
                    *v += p;
                }
                for (v, &p) in x[c..].iter_mut().zip(&out) {
                    *v += p;
                }
                Ok((x, Some(PosCache { input, pre, act })))
            }
        }
    }

    pub fn forward(
        &self,
        tokens: &TokenSet<S>,
        cfg: &BackboneConfig,
        mode: &mut Mode<'_>,
    ) -> Result<(Tensor<S>, BackboneCache<S>)> {
        cfg.validate()?;
        if tokens.width() != cfg.dim || self.dim() != cfg.dim {
            return Err(shape_err!(
                "token width {} / backbone width {} / configured width {}",
                tokens.width(),
                self.dim(),
                cfg.dim
            ));
        }
        tokens.validate(cfg.dim)?;
        let rows = tokens.len() + 1;
        let (mut x, pos) = self.embed(tokens)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (y, cache) = block_forward(block, &x, rows, cfg, mode);
            if !y.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("backbone block {i}")));
            }
            x = y;
            caches.push(cache);
        }
        let (y, final_ln) = self.norm.forward(&x, rows);
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("backbone final norm".into()));
        }
        Ok((
            Tensor::matrix(rows, cfg.dim, y),
            BackboneCache {
                rows,
                pos,
                blocks: caches,
                final_ln,
            },
        ))
    }

    /// Returns `(d tokens [N_c × C], d cls [C])` and accumulates parameter
    /// gradients.
    pub fn backward(
        &self,
        cache: &BackboneCache<S>,
        d_out: &[S],
        cfg: &BackboneConfig,
        grad: &mut Self,
    ) -> (Vec<S>, Vec<S>) {
        let c = cfg.dim;
        let rows = cache.rows;
        let mut dx = self.norm.backward(&cache.final_ln, d_out, &mut grad.norm);
        for i in (0..self.blocks.len()).rev() {
            dx = block_backward(&self.blocks[i], &cache.blocks[i], &dx, rows, cfg, &mut grad.blocks[i]);
        }
        let d_cls = dx[..c].to_vec();
        let d_tokens = dx[c..].to_vec();
        match (&self.pos, &mut grad.pos) {
            (PosEmbed::Learned { .. }, PosEmbed::Learned { table }) => {
                for (g, &d) in table.data_mut().iter_mut().zip(&dx) {
                    *g += d;
                }
            }
            (
                PosEmbed::Coord { fc1, fc2, .. },
                PosEmbed::Coord {
                    fc1: g1,
                    fc2: g2,
                    cls: gc,
                },
            ) => {
                let pc = cache.pos.as_ref().expect("coordinate cache");
                let n = rows - 1;
                for (g, &d) in gc.data_mut().iter_mut().zip(&d_cls) {
                    *g += d;
                }
                let d_act = fc2.backward(&pc.act, &d_tokens, n, g2);
                let d_pre = gelu_backward(&pc.pre, &d_act);
                fc1.backward_params(&pc.input, &d_pre, n, g1);
            }
            _ => {}
        }
        (d_tokens, d_cls)
    }
}

fn attn_forward<S: Scalar>(
    block: &Block<S>,
    h: Vec<S>,
    rows: usize,
    cfg: &BackboneConfig,
    mode: &mut Mode<'_>,
) -> (Vec<S>, AttnCache<S>) {
    let c = cfg.dim;
    let heads = cfg.heads;
    let hd = cfg.head_dim();
    let scale = S::one() / S::of_usize(hd).sqrt();
    let qkv = block.qkv.forward(&h, rows);
    let mut probs = vec![S::zero(); heads * rows * rows];
    let mut merged = vec![S::zero(); rows * c];
    let mut q = vec![S::zero(); rows * hd];
    let mut k = vec![S::zero(); rows * hd];
    let mut v = vec![S::zero(); rows * hd];
    for head in 0..heads {
        split_head(&qkv, rows, c, head, hd, &mut q, &mut k, &mut v);
        let p = &mut probs[head * rows * rows..(head + 1) * rows * rows];
        matmul_nt_acc(p, &q, &k, rows, rows, hd);
        for r in 0..rows {
            softmax_in_place(&mut p[r * rows..(r + 1) * rows], scale);
        }
        let mut o = vec![S::zero(); rows * hd];
        matmul_acc(&mut o, p, &v, rows, rows, hd);
        for r in 0..rows {
            merged[r * c + head * hd..r * c + (head + 1) * hd].copy_from_slice(&o[r * hd..(r + 1) * hd]);
        }
    }
    let mut out = block.proj.forward(&merged, rows);
    let mask = mode.dropout_mask(rows * c, cfg.dropout);
    apply_mask(&mut out, &mask);
    (
        out,
        AttnCache {
            input: h,
            qkv,
            probs,
            merged,
            mask,
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn split_head<S: Scalar>(
    qkv: &[S],
    rows: usize,
    c: usize,
    head: usize,
    hd: usize,
    q: &mut [S],
    k: &mut [S],
    v: &mut [S],
) {
    for r in 0..rows {
        let base = r * 3 * c + head * hd;
        q[r * hd..(r + 1) * hd].copy_from_slice(&qkv[base..base + hd]);
        k[r * hd..(r + 1) * hd].copy_from_slice(&qkv[base + c..base + c + hd]);
        v[r * hd..(r + 1) * hd].copy_from_slice(&qkv[base + 2 * c..base + 2 * c + hd]);
    }
}

/// Softmax of `scale · row`, in place.
fn softmax_in_place<S: Scalar>(row: &mut [S], scale: S) {
    let mut max = S::neg_infinity();
    for v in row.iter_mut() {
        *v *= scale;
        if *v > max {
            max = *v;
        }
    }
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn attn_backward<S: Scalar>(
    block: &Block<S>,
    cache: &AttnCache<S>,
    d_out: &[S],
    rows: usize,
    cfg: &BackboneConfig,
    grad: &mut Block<S>,
) -> Vec<S> {
    let c = cfg.dim;
    let heads = cfg.heads;
    let hd = cfg.head_dim();
    let scale = S::one() / S::of_usize(hd).sqrt();
    let mut d = d_out.to_vec();
    apply_mask(&mut d, &cache.mask);
    let d_merged = block.proj.backward(&cache.merged, &d, rows, &mut grad.proj);
    let mut d_qkv = vec![S::zero(); rows * 3 * c];
    let mut q = vec![S::zero(); rows * hd];
    let mut k = vec![S::zero(); rows * hd];
    let mut v = vec![S::zero(); rows * hd];
    let mut d_o = vec![S::zero(); rows * hd];
    for head in 0..heads {
        split_head(&cache.qkv, rows, c, head, hd, &mut q, &mut k, &mut v);
        for r in 0..rows {
            d_o[r * hd..(r + 1) * hd].copy_from_slice(&d_merged[r * c + head * hd..r * c + (head + 1) * hd]);
        }
        let p = &cache.probs[head * rows * rows..(head + 1) * rows * rows];
        let mut d_v = vec![S::zero(); rows * hd];
        matmul_tn_acc(&mut d_v, p, &d_o, rows, rows, hd);
        let mut d_p = vec![S::zero(); rows * rows];
        matmul_nt_acc(&mut d_p, &d_o, &v, rows, rows, hd);
        // softmax backward, then the 1/sqrt(d) scale
        for r in 0..rows {
            let pr = &p[r * rows..(r + 1) * rows];
            let dr = &mut d_p[r * rows..(r + 1) * rows];
            let dot: S = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
            for (dv, &pv) in dr.iter_mut().zip(pr) {
                *dv = pv * (*dv - dot) * scale;
            }
        }
        let mut d_q = vec![S::zero(); rows * hd];
        matmul_acc(&mut d_q, &d_p, &k, rows, rows, hd);
        let mut d_k = vec![S::zero(); rows * hd];
        matmul_tn_acc(&mut d_k, &d_p, &q, rows, rows, hd);
        for r in 0..rows {
            let base = r * 3 * c + head * hd;
            d_qkv[base..base + hd].copy_from_slice(&d_q[r * hd..(r + 1) * hd]);
            d_qkv[base + c..base + c + hd].copy_from_slice(&d_k[r * hd..(r + 1) * hd]);
            d_qkv[base + 2 * c..base + 2 * c + hd].copy_from_slice(&d_v[r * hd..(r + 1) * hd]);
        }
    }
    block.qkv.backward(&cache.input, &d_qkv, rows, &mut grad.qkv)
}

fn mlp_forward<S: Scalar>(
    block: &Block<S>,
    h: Vec<S>,
    rows: usize,
    cfg: &BackboneConfig,
    mode: &mut Mode<'_>,
) -> (Vec<S>, MlpCache<S>) {
    let pre = block.fc1.forward(&h, rows);
    let act = gelu_forward(&pre);
    let mut out = block.fc2.forward(&act, rows);
    let mask = mode.dropout_mask(rows * cfg.dim, cfg.dropout);
    apply_mask(&mut out, &mask);
    (
        out,
        MlpCache {
            input: h,
            pre,
            act,
            mask,
        },
    )
}

fn mlp_backward<S: Scalar>(
    block: &Block<S>,
    cache: &MlpCache<S>,
    d_out: &[S],
    rows: usize,
    grad: &mut Block<S>,
) -> Vec<S> {
    let mut d = d_out.to_vec();
    apply_mask(&mut d, &cache.mask);
    let d_act = block.fc2.backward(&cache.act, &d, rows, &mut grad.fc2);
    let d_pre = gelu_backward(&cache.pre, &d_act);
    block.fc1.backward(&cache.input, &d_pre, rows, &mut grad.fc1)
}

fn add<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

fn block_forward<S: Scalar>(
    block: &Block<S>,
    x: &[S],
    rows: usize,
    cfg: &BackboneConfig,
    mode: &mut Mode<'_>,
) -> (Vec<S>, BlockCache<S>) {
    if cfg.prenorm {
        let (h, ln1) = block.norm1.forward(x, rows);
        let (a, attn) = attn_forward(block, h, rows, cfg, mode);
        let x1 = add(x, &a);
        let (h2, ln2) = block.norm2.forward(&x1, rows);
        let (m, mlp) = mlp_forward(block, h2, rows, cfg, mode);
        (add(&x1, &m), BlockCache { ln1, attn, ln2, mlp })
    } else {
        let (a, attn) = attn_forward(block, x.to_vec(), rows, cfg, mode);
        let (x1, ln1) = block.norm1.forward(&add(x, &a), rows);
        let (m, mlp) = mlp_forward(block, x1.clone(), rows, cfg, mode);
        let (x2, ln2) = block.norm2.forward(&add(&x1, &m), rows);
        (x2, BlockCache { ln1, attn, ln2, mlp })
    }
}

fn block_backward<S: Scalar>(
    block: &Block<S>,
    cache: &BlockCache<S>,
    d_out: &[S],
    rows: usize,
    cfg: &BackboneConfig,
    grad: &mut Block<S>,
) -> Vec<S> {
    if cfg.prenorm {
        let d_h2 = mlp_backward(block, &cache.mlp, d_out, rows, grad);
        let d_x1 = add(d_out, &block.norm2.backward(&cache.ln2, &d_h2, &mut grad.norm2));
        let d_h = attn_backward(block, &cache.attn, &d_x1, rows, cfg, grad);
        add(&d_x1, &block.norm1.backward(&cache.ln1, &d_h, &mut grad.norm1))
    } else {
        let d_r2 = block.norm2.backward(&cache.ln2, d_out, &mut grad.norm2);
        let d_x1 = add(&d_r2, &mlp_backward(block, &cache.mlp, &d_r2, rows, grad));
        let d_r1 = block.norm1.backward(&cache.ln1, &d_x1, &mut grad.norm1);
        add(&d_r1, &attn_backward(block, &cache.attn, &d_r1, rows, cfg, grad))
    }
}

impl<S: Scalar> Params<S> for Backbone<S> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<S>)>) {
        match &self.pos {
            PosEmbed::None => {}
            PosEmbed::Coord { fc1, fc2, cls } => {
                fc1.visit(&join(prefix, "pos_mlp.fc1"), out);
                fc2.visit(&join(prefix, "pos_mlp.fc2"), out);
                out.push((join(prefix, "pos_mlp.cls"), cls));
            }
            PosEmbed::Learned { table } => out.push((join(prefix, "pos_embed"), table)),
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.norm.visit(&join(prefix, "norm"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<S>)>) {
        match &mut self.pos {
            PosEmbed::None => {}
            PosEmbed::Coord { fc1, fc2, cls } => {
                fc1.visit_mut(&join(prefix, "pos_mlp.fc1"), out);
                fc2.visit_mut(&join(prefix, "pos_mlp.fc2"), out);
                out.push((join(prefix, "pos_mlp.cls"), cls));
            }
            PosEmbed::Learned { table } => out.push((join(prefix, "pos_embed"), table)),
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.norm.visit_mut(&join(prefix, "norm"), out);
    }
}

/// Expected tensor shapes at one block boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockShapes {
    pub block: usize,
    pub input: [usize; 2],
    pub qkv_weight: [usize; 2],
    pub qkv_out: [usize; 2],
    pub attention: [usize; 3],
    pub mlp_hidden: [usize; 2],
    pub output: [usize; 2],
}

/// Shape report for every block, used for debugging and to validate
/// checkpoints before transfer.
pub fn attention_rollout_shapes(cfg: &BackboneConfig, n_tokens: usize) -> Vec<BlockShapes> {
    let (c, t) = (cfg.dim, n_tokens);
    (0..cfg.depth)
        .map(|block| BlockShapes {
            block,
            input: [t, c],
            qkv_weight: [c, 3 * c],
            qkv_out: [t, 3 * c],
            attention: [cfg.heads, t, t],
            mlp_hidden: [t, cfg.mlp_hidden()],
            output: [t, c],
        })
        .collect()
}
