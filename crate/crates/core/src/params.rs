//! Named parameter traversal and in-memory named tensor collections.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        String::from(leaf)
    } else {
        format!("{prefix}.{leaf}")
    }
}

/// A module whose learnable tensors can be enumerated by canonical name.
///
/// `visit` and `visit_mut` must yield tensors in the same order. Gradients are
/// represented by a value of the same type, so pairing a model with its
/// gradient is a zip over the two traversals.
pub trait Params<S: Scalar>: Clone {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<S>)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<S>)>);

    /// Non-learnable state that still belongs in a checkpoint (running statistics).
    fn visit_buffers<'a>(&'a self, _prefix: &str, _out: &mut Vec<(String, &'a Tensor<S>)>) {}
    fn visit_buffers_mut<'a>(&'a mut self, _prefix: &str, _out: &mut Vec<(String, &'a mut Tensor<S>)>) {}

    fn named(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    fn buffers(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        self.visit_buffers("", &mut out);
        out
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = Vec::new();
        self.visit_buffers_mut("", &mut out);
        out
    }

    /// Same structure with every learnable tensor zeroed.
    fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        for (_, t) in g.named_mut() {
            t.fill(S::zero());
        }
        g
    }

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Accumulate another value of the same structure, tensor by tensor.
    fn accumulate(&mut self, other: &Self) {
        let theirs = other.named();
        for ((_, mine), (_, t)) in self.named_mut().into_iter().zip(theirs) {
            mine.add_assign(t);
        }
    }

    /// Learnable tensors followed by buffers, as an owned collection.
    fn state(&self) -> NamedTensors<S> {
        let mut out = NamedTensors::new();
        for (name, t) in self.named().into_iter().chain(self.buffers()) {
            out.push(name, t.clone());
        }
        out
    }

    /// Overwrite every tensor whose name appears in `state` with matching
    /// shape. Returns the names that were installed.
    fn load_state(&mut self, state: &NamedTensors<S>) -> Vec<String> {
        fn install<S: Scalar>(
            slots: Vec<(String, &mut Tensor<S>)>,
            state: &NamedTensors<S>,
            installed: &mut Vec<String>,
        ) {
            for (name, t) in slots {
                if let Some(src) = state.get(&name) {
                    if src.shape() == t.shape() {
                        *t = src.clone();
                        installed.push(name);
                    }
                }
            }
        }
        let mut installed = Vec::new();
        install(self.named_mut(), state, &mut installed);
        install(self.buffers_mut(), state, &mut installed);
        installed
    }
}

/// Ordered collection of named tensors. Names are unique; insertion order is
/// preserved.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NamedTensors<S> {
    entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> NamedTensors<S> {
    pub fn new() -> Self {
        NamedTensors { entries: Vec::new() }
    }

    /// Insert or replace.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<S>) {
        let name = name.into();
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = tensor;
        } else {
            self.entries.push((name, tensor));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<S>> {
        let pos = self.entries.iter().position(|(n, _)| n == name)?;
        Some(self.entries.remove(pos).1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn into_entries(self) -> Vec<(String, Tensor<S>)> {
        self.entries
    }

    pub fn cast<T: Scalar>(&self) -> NamedTensors<T> {
        NamedTensors {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Entries whose name starts with `prefix.`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> NamedTensors<S> {
        let lead = format!("{prefix}.");
        NamedTensors {
            entries: self
                .entries
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(&lead).map(|s| (String::from(s), t.clone())))
                .collect(),
        }
    }

    /// Copy every entry of `other` under `prefix.`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &NamedTensors<S>) {
        for (n, t) in other.iter() {
            self.push(join(prefix, n), t.clone());
        }
    }
}

impl<S: Scalar> FromIterator<(String, Tensor<S>)> for NamedTensors<S> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<S>)>>(iter: I) -> Self {
        let mut out = NamedTensors::new();
        for (n, t) in iter {
            out.push(n, t);
        }
        out
    }
}
