//! Layer primitives with explicit forward caches and backward passes.
//!
//! Activations are flat row-major buffers of `rows × width`. Every
//! `backward` accumulates parameter gradients into a value of the same layer
//! type and returns the gradient with respect to the layer input.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::params::{join, Params};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Forward-pass mode. Dropout and batch statistics are only used in training.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut RngStream),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    /// Inverted-dropout multipliers, or `None` when dropout is inactive.
    pub fn dropout_mask<S: Scalar>(&mut self, n: usize, p: f64) -> Option<Vec<S>> {
        match self {
            Mode::Train(rng) if p > 0.0 => {
                let keep = S::of(1.0 / (1.0 - p));
                Some(
                    (0..n)
                        .map(|_| if rng.uniform() < p { S::zero() } else { keep })
                        .collect(),
                )
            }
            _ => None,
        }
    }
}

pub(crate) fn apply_mask<S: Scalar>(x: &mut [S], mask: &Option<Vec<S>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

/// Fully connected layer, `y = x · W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    /// Xavier-uniform weights, zero bias.
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        let bound = num_traits::Float::sqrt(6.0 / (fan_in + fan_out) as f64);
        let w = (0..fan_in * fan_out).map(|_| S::of(rng.range(-bound, bound))).collect();
        Linear {
            weight: Tensor::matrix(fan_in, fan_out, w),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &[S], rows: usize) -> Vec<S> {
        let (i, o) = (self.fan_in(), self.fan_out());
        debug_assert_eq!(x.len(), rows * i);
        let mut y = Vec::with_capacity(rows * o);
        for _ in 0..rows {
            y.extend_from_slice(self.bias.data());
        }
        matmul_acc(&mut y, x, self.weight.data(), rows, i, o);
        y
    }

    /// Accumulates `dW`, `db` into `grad` and returns `dx`.
    pub fn backward(&self, x: &[S], dy: &[S], rows: usize, grad: &mut Self) -> Vec<S> {
        self.backward_params(x, dy, rows, grad);
        let (i, o) = (self.fan_in(), self.fan_out());
        let mut dx = vec![S::zero(); rows * i];
        matmul_nt_acc(&mut dx, dy, self.weight.data(), rows, i, o);
        dx
    }

    pub fn backward_params(&self, x: &[S], dy: &[S], rows: usize, grad: &mut Self) {
        let (i, o) = (self.fan_in(), self.fan_out());
        matmul_tn_acc(grad.weight.data_mut(), x, dy, rows, i, o);
        let db = grad.bias.data_mut();
        for r in 0..rows {
            for (b, &d) in db.iter_mut().zip(&dy[r * o..(r + 1) * o]) {
                *b += d;
            }
        }
    }
}

impl<S: Scalar> Params<S> for Linear<S> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<S>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<S>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

#[derive(Debug, Clone)]
pub struct NormCache<S> {
    xhat: Vec<S>,
    /// Per-row (layer norm) or per-channel (batch norm) reciprocal std.
    rstd: Vec<S>,
    mean: Vec<S>,
    var: Vec<S>,
    rows: usize,
    /// Batch norm evaluated with running statistics.
    frozen_stats: bool,
}

impl<S: Scalar> NormCache<S> {
    pub fn batch_mean(&self) -> &[S] {
        &self.mean
    }

    pub fn batch_var(&self) -> &[S] {
        &self.var
    }
}

/// Per-row layer normalization with learnable scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub eps: f64,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(width: usize) -> Self {
        LayerNorm {
            weight: Tensor::full(&[width], S::one()),
            bias: Tensor::zeros(&[width]),
            eps: 1e-6,
        }
    }

    pub fn width(&self) -> usize {
        self.weight.numel()
    }

    pub fn forward(&self, x: &[S], rows: usize) -> (Vec<S>, NormCache<S>) {
        let c = self.width();
        let n = S::of_usize(c);
        let eps = S::of(self.eps);
        let (g, b) = (self.weight.data(), self.bias.data());
        let mut y = vec![S::zero(); rows * c];
        let mut xhat = vec![S::zero(); rows * c];
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = &x[r * c..(r + 1) * c];
            let mean = xr.iter().copied().sum::<S>() / n;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let rstd = S::one() / (var + eps).sqrt();
            rstds.push(rstd);
            for j in 0..c {
                let h = (xr[j] - mean) * rstd;
                xhat[r * c + j] = h;
                y[r * c + j] = h * g[j] + b[j];
            }
        }
        (
            y,
            NormCache {
                xhat,
                rstd: rstds,
                mean: Vec::new(),
                var: Vec::new(),
                rows,
                frozen_stats: false,
            },
        )
    }

    pub fn backward(&self, cache: &NormCache<S>, dy: &[S], grad: &mut Self) -> Vec<S> {
        let c = self.width();
        let rows = cache.rows;
        let n = S::of_usize(c);
        let g = self.weight.data();
        let mut dx = vec![S::zero(); rows * c];
        for r in 0..rows {
            let xh = &cache.xhat[r * c..(r + 1) * c];
            let dyr = &dy[r * c..(r + 1) * c];
            let mut sum_d = S::zero();
            let mut sum_dx = S::zero();
            for j in 0..c {
                let d = dyr[j] * g[j];
                sum_d += d;
                sum_dx += d * xh[j];
                grad.weight.data_mut()[j] += dyr[j] * xh[j];
                grad.bias.data_mut()[j] += dyr[j];
            }
            let mean_d = sum_d / n;
            let mean_dx = sum_dx / n;
            let rstd = cache.rstd[r];
            for j in 0..c {
                let d = dyr[j] * g[j];
                dx[r * c + j] = rstd * (d - mean_d - xh[j] * mean_dx);
            }
        }
        dx
    }
}

impl<S: Scalar> Params<S> for LayerNorm<S> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<S>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<S>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Normalization over the row (batch) axis with running statistics for eval.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub momentum: f64,
    pub eps: f64,
}

impl<S: Scalar> BatchNorm<S> {
    pub fn new(width: usize) -> Self {
        BatchNorm {
            weight: Tensor::full(&[width], S::one()),
            bias: Tensor::zeros(&[width]),
            running_mean: Tensor::zeros(&[width]),
            running_var: Tensor::full(&[width], S::one()),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn width(&self) -> usize {
        self.weight.numel()
    }

    pub fn forward(&self, x: &[S], rows: usize, batch_stats: bool) -> (Vec<S>, NormCache<S>) {
        let c = self.width();
        let eps = S::of(self.eps);
        let (mean, var) = if batch_stats {
            let n = S::of_usize(rows);
            let mut mean = vec![S::zero(); c];
            for r in 0..rows {
                for j in 0..c {
                    mean[j] += x[r * c + j];
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![S::zero(); c];
            for r in 0..rows {
                for j in 0..c {
                    let d = x[r * c + j] - mean[j];
                    var[j] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= n);
            (mean, var)
        } else {
            (self.running_mean.data().to_vec(), self.running_var.data().to_vec())
        };
        let rstd: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.weight.data(), self.bias.data());
        let mut y = vec![S::zero(); rows * c];
        let mut xhat = vec![S::zero(); rows * c];
        for r in 0..rows {
            for j in 0..c {
                let h = (x[r * c + j] - mean[j]) * rstd[j];
                xhat[r * c + j] = h;
                y[r * c + j] = h * g[j] + b[j];
            }
        }
        (
            y,
            NormCache {
                xhat,
                rstd,
                mean,
                var,
                rows,
                frozen_stats: !batch_stats,
            },
        )
    }

    pub fn backward(&self, cache: &NormCache<S>, dy: &[S], grad: &mut Self) -> Vec<S> {
        let c = self.width();
        let rows = cache.rows;
        let g = self.weight.data();
        let mut dx = vec![S::zero(); rows * c];
        let mut sum_d = vec![S::zero(); c];
        let mut sum_dx = vec![S::zero(); c];
        for r in 0..rows {
            for j in 0..c {
                let k = r * c + j;
                grad.weight.data_mut()[j] += dy[k] * cache.xhat[k];
                grad.bias.data_mut()[j] += dy[k];
                let d = dy[k] * g[j];
                sum_d[j] += d;
                sum_dx[j] += d * cache.xhat[k];
            }
        }
        if cache.frozen_stats {
            for r in 0..rows {
                for j in 0..c {
                    dx[r * c + j] = dy[r * c + j] * g[j] * cache.rstd[j];
                }
            }
            return dx;
        }
        let n = S::of_usize(rows);
        for r in 0..rows {
            for j in 0..c {
                let k = r * c + j;
                let d = dy[k] * g[j];
                dx[k] = cache.rstd[j] * (d - sum_d[j] / n - cache.xhat[k] * sum_dx[j] / n);
            }
        }
        dx
    }

    /// Fold the batch statistics of a training forward pass into the running
    /// estimates (unbiased variance).
    pub fn update_running(&mut self, cache: &NormCache<S>) {
        if cache.frozen_stats {
            return;
        }
        let m = S::of(self.momentum);
        let n = cache.rows;
        let unbias = if n > 1 {
            S::of(n as f64 / (n - 1) as f64)
        } else {
            S::one()
        };
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&cache.mean) {
            *r = (S::one() - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&cache.var) {
            *r = (S::one() - m) * *r + m * b * unbias;
        }
    }
}

impl<S: Scalar> Params<S> for BatchNorm<S> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<S>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<S>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<S>)>) {
        out.push((join(prefix, "running_mean"), &self.running_mean));
        out.push((join(prefix, "running_var"), &self.running_var));
    }

    fn visit_buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<S>)>) {
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }
}

/// Normalization flavor used by the decoder heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum NormKind {
    #[default]
    Batch,
    Layer,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Norm<S> {
    Batch(BatchNorm<S>),
    Layer(LayerNorm<S>),
}

impl<S: Scalar> Norm<S> {
    pub fn new(kind: NormKind, width: usize) -> Self {
        match kind {
            NormKind::Batch => Norm::Batch(BatchNorm::new(width)),
            NormKind::Layer => Norm::Layer(LayerNorm::new(width)),
        }
    }

    pub fn forward(&self, x: &[S], rows: usize, train: bool) -> (Vec<S>, NormCache<S>) {
        match self {
            Norm::Batch(bn) => bn.forward(x, rows, train),
            Norm::Layer(ln) => ln.forward(x, rows),
        }
    }

    pub fn backward(&self, cache: &NormCache<S>, dy: &[S], grad: &mut Self) -> Vec<S> {
        match (self, grad) {
            (Norm::Batch(bn), Norm::Batch(g)) => bn.backward(cache, dy, g),
            (Norm::Layer(ln), Norm::Layer(g)) => ln.backward(cache, dy, g),
            _ => unreachable!("gradient structure differs from parameters"),
        }
    }

    pub fn update_running(&mut self, cache: &NormCache<S>) {
        if let Norm::Batch(bn) = self {
            bn.update_running(cache);
        }
    }
}

impl<S: Scalar> Params<S> for Norm<S> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<S>)>) {
        match self {
            Norm::Batch(n) => n.visit(prefix, out),
            Norm::Layer(n) => n.visit(prefix, out),
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<S>)>) {
        match self {
            Norm::Batch(n) => n.visit_mut(prefix, out),
            Norm::Layer(n) => n.visit_mut(prefix, out),
        }
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<S>)>) {
        if let Norm::Batch(n) = self {
            n.visit_buffers(prefix, out);
        }
    }

    fn visit_buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<S>)>) {
        if let Norm::Batch(n) = self {
            n.visit_buffers_mut(prefix, out);
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<S: Scalar>(x: S) -> S {
    let k = S::of(GELU_K);
    let c = S::of(GELU_C);
    let half = S::of(0.5);
    half * x * (S::one() + (k * (x + c * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let k = S::of(GELU_K);
    let c = S::of(GELU_C);
    let half = S::of(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * k * (S::one() + S::of(3.0) * c * x * x)
}

pub fn gelu_forward<S: Scalar>(a: &[S]) -> Vec<S> {
    a.iter().map(|&v| gelu(v)).collect()
}

/// `da = dy ⊙ gelu'(a)`
pub fn gelu_backward<S: Scalar>(a: &[S], dy: &[S]) -> Vec<S> {
    a.iter().zip(dy).map(|(&v, &d)| d * gelu_grad(v)).collect()
}
