//! Named parameter storage shared by every model component.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Ordered map from parameter name to value. Names use `.`-separated scopes
/// (`slow.sa.wq`, `probe.count.w`) so whole groups can be frozen by prefix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Copies every tensor whose name starts with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> usize {
        let mut copied = 0;
        for (name, t) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            self.insert(name.clone(), t.clone());
            copied += 1;
        }
        copied
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }
}

impl From<BTreeMap<String, Tensor>> for ParamStore {
    fn from(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }
}

/// Which parameters receive gradients in a graph.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum ParamFilter {
    #[default]
    All,
    None,
    Prefixes(Vec<String>),
}

impl ParamFilter {
    pub fn prefixes(p: &[&str]) -> Self {
        Self::Prefixes(p.iter().map(|s| s.to_string()).collect())
    }

    pub fn accepts(&self, name: &str) -> bool {
        match self {
            Self::All => true,
            Self::None => false,
            Self::Prefixes(ps) => ps.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// Gaussian tensor with the given standard deviation.
pub fn normal<R: Rng + ?Sized>(rng: &mut R, dims: &[usize], std: f32) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("finite std");
    let n = dims.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(dims.to_vec(), data).expect("numel matches dims")
}

/// Weight matrix `[fan_in, fan_out]` scaled by `1 / sqrt(fan_in)`.
pub fn weight<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    normal(rng, &[fan_in, fan_out], 1.0 / (fan_in as f32).sqrt())
}
