//! Decoupled-weight-decay Adam and the warmup + cosine learning-rate schedule.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;

use crate::params::{NamedTensors, Params};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Linear warmup from 0 to `base_lr`, then cosine decay to `min_lr` at
/// `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64, min_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if step == warmup_steps {
        return base_lr;
    }
    if step >= total_steps {
        return min_lr;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + Float::cos(core::f64::consts::PI * progress))
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment estimates mirror the parameter structure `P`.
#[derive(Debug, Clone)]
pub struct AdamW<S: Scalar, P: Params<S>> {
    pub cfg: AdamWConfig,
    pub step: u64,
    m: P,
    v: P,
    _s: core::marker::PhantomData<S>,
}

impl<S: Scalar, P: Params<S>> AdamW<S, P> {
    pub fn new(params: &P, cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
            _s: core::marker::PhantomData,
        }
    }

    /// One update of every tensor not in `frozen`. Frozen tensors are left
    /// untouched and their moments stay at zero. Returns the updated names.
    pub fn update(&mut self, params: &mut P, grads: &P, lr: f64, frozen: &BTreeSet<String>) -> Vec<String> {
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - Float::powi(c.beta1, t);
        let bc2 = 1.0 - Float::powi(c.beta2, t);
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (one_b1, one_b2) = (S::of(1.0 - c.beta1), S::of(1.0 - c.beta2));
        let decay = S::of(lr * c.weight_decay);
        let step_size = S::of(lr / bc1);
        let bc2_sqrt = S::of(Float::sqrt(bc2));
        let eps = S::of(c.eps);

        let grads = grads.named();
        let mut updated = Vec::new();
        let slots = params
            .named_mut()
            .into_iter()
            .zip(self.m.named_mut())
            .zip(self.v.named_mut())
            .zip(grads);
        for ((((name, p), (_, m)), (_, v)), (_, g)) in slots {
            if frozen.contains(&name) {
                continue;
            }
            let (p, m, v, g) = (p.data_mut(), m.data_mut(), v.data_mut(), g.data());
            for i in 0..p.len() {
                p[i] -= decay * p[i];
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                p[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
            updated.push(name);
        }
        updated
    }

    /// `optim.step`, `optim.m.<name>`, `optim.v.<name>`.
    pub fn state(&self) -> NamedTensors<S> {
        let mut out = NamedTensors::new();
        out.push("optim.step", Tensor::matrix(1, 1, Vec::from([S::of(self.step as f64)])));
        for (n, t) in self.m.named() {
            out.push(format!("optim.m.{n}"), t.clone());
        }
        for (n, t) in self.v.named() {
            out.push(format!("optim.v.{n}"), t.clone());
        }
        out
    }

    pub fn load_state(&mut self, state: &NamedTensors<S>) {
        if let Some(s) = state.get("optim.step") {
            self.step = s.data()[0].to_f64() as u64;
        }
        self.m.load_state(&state.with_prefix("optim.m"));
        self.v.load_state(&state.with_prefix("optim.v"));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let (base, min) = (5e-4, 1e-6);
        assert_eq!(cosine_lr(10, 110, 10, base, min), base);
        assert_eq!(cosine_lr(110, 110, 10, base, min), min);
        assert_eq!(cosine_lr(0, 110, 10, base, min), 0.0);
        assert!((cosine_lr(5, 110, 10, base, min) - base / 2.0).abs() < 1e-18);
        let mid = cosine_lr(60, 110, 10, base, min);
        assert!((mid - (base + min) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let mut prev = f64::INFINITY;
        for s in 10..=100 {
            let lr = cosine_lr(s, 100, 10, 1.0, 0.01);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
