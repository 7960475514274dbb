use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use ndarray::Array2;
use rand::Rng;

/// Index of a block inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBlock {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    /// Frozen blocks still pass gradients through to their inputs but never
    /// accumulate or update.
    pub frozen: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    blocks: Vec<ParameterBlock>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter block {name}");
        let grad = Array2::zeros(value.dim());
        self.blocks.push(ParameterBlock { name, value, grad, frozen: false });
        ParamId(self.blocks.len() - 1)
    }

    pub fn block(&self, id: ParamId) -> &ParameterBlock {
        &self.blocks[id.0]
    }

    pub fn block_mut(&mut self, id: ParamId) -> &mut ParameterBlock {
        &mut self.blocks[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.blocks[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.blocks.iter().position(|b| b.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.blocks.len()).map(ParamId)
    }

    pub fn blocks(&self) -> &[ParameterBlock] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.blocks.iter().map(|b| b.value.len()).sum()
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.blocks[id.0].frozen = frozen;
    }

    /// Freezes or thaws every block whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for b in self.blocks.iter_mut().filter(|b| b.name.starts_with(prefix)) {
            b.frozen = frozen;
        }
    }

    pub fn zero_grad(&mut self) {
        for b in &mut self.blocks {
            b.grad.fill(0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Array2<f64>) {
        let b = &mut self.blocks[id.0];
        if !b.frozen {
            b.grad += g;
        }
    }

    /// Order-sensitive hash of the exact bits of every block under `prefix`.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h = DefaultHasher::new();
        for b in self.blocks.iter().filter(|b| b.name.starts_with(prefix)) {
            b.name.hash(&mut h);
            for v in b.value.iter() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Kaiming-uniform weights for a `fan_in × fan_out` linear map:
/// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn kaiming_uniform<R: Rng + ?Sized>(fan_in: usize, rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| crate::geometry::round_f32(rng.random_range(-bound..bound)))
}
