//! Dense `f64` tensors, a reverse-mode expression graph, AdamW, and the
//! binary checkpoint format.

mod checkpoint;
mod graph;
mod optim;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use graph::{Gradients, Graph, Var};
pub use optim::{cosine_lr, warmup_lr, AdamW, AdamWConfig};
pub use tensor::Tensor;

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("slice [{start}, {end}) out of range for {shape:?} in {op}")]
    SliceOutOfRange { op: &'static str, shape: Vec<usize>, start: usize, end: usize },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("unresolved parameter `{0}`")]
    UnresolvedParameter(String),
    #[error("gradient requested of non-scalar root with shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGradient(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Named parameter tensors plus AdamW state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    pub(crate) opt: optim::AdamState,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, t)| t.len()).sum()
    }

    /// Optimizer step counter (number of applied updates).
    pub fn step(&self) -> u64 {
        self.opt.step
    }

    /// Drops first/second moments and resets the step counter.
    pub fn reset_optimizer(&mut self) {
        self.opt = optim::AdamState::default();
    }
}
