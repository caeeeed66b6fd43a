//! Named parameter storage with seeded initialization.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tape::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Decides optimizer treatment: weight decay applies to `Weight` only, and
/// `Fixed` tensors are counted but never updated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    Fixed,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    /// Non-learned state such as normalization running statistics.
    buffers: Vec<(String, Tensor)>,
    seed: u64,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("tensors", &self.params.len())
            .field("scalars", &self.total())
            .field("seed", &self.seed)
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            seed,
        }
    }

    fn add(&mut self, name: String, kind: ParamKind, value: Tensor) -> ParamId {
        debug_assert!(!self.params.iter().any(|p| p.name == name), "duplicate parameter {name}");
        self.params.push(Param { name, kind, value });
        ParamId(self.params.len() - 1)
    }

    /// Uniform in `±1/sqrt(fan_in)`, drawn from a stream keyed by the name.
    pub fn uniform(&mut self, name: &str, kind: ParamKind, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut r = loopseg_core::rng::stream(self.seed, &["param", name]);
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || r.random_range(-bound..bound));
        self.add(name.to_string(), kind, value)
    }

    pub fn constant(&mut self, name: &str, kind: ParamKind, value: Tensor) -> ParamId {
        self.add(name.to_string(), kind, value)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> usize {
        self.buffers.push((name.to_string(), value));
        self.buffers.len() - 1
    }

    pub fn buffer_value(&self, i: usize) -> &Tensor {
        &self.buffers[i].1
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Scalar count of every parameter whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn total(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Count after folding each normalization into the preceding convolution,
    /// where a scale and shift pair becomes one bias.
    pub fn fused_total(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind != ParamKind::NormScale)
            .map(|p| p.value.len())
            .sum()
    }
}
