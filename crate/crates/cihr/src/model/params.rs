//! Ordered named-parameter store shared by the optimizer and checkpoints.

use std::collections::HashMap;

use crate::numerics::{SplitMix64, Tensor};

pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Register a leaf; names are unique and ordering is insertion order,
    /// which fixes the checkpoint layout.
    pub fn register(&mut self, name: &str, tensor: Tensor) -> Tensor {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        tensor.set_requires_grad(true);
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor.clone()));
        tensor
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    /// Copy all values out (name, shape, values), in registration order.
    pub fn snapshot(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.entries
            .iter()
            .map(|(n, t)| (n.clone(), t.shape(), t.to_vec()))
            .collect()
    }

    /// Write values back by name; every entry must exist with matching size.
    pub fn restore(&self, snapshot: &[(String, Vec<usize>, Vec<f64>)]) {
        for (name, shape, values) in snapshot {
            let t = self
                .get(name)
                .unwrap_or_else(|| panic!("unknown parameter {name} in snapshot"));
            assert_eq!(&t.shape(), shape, "shape drift for {name}");
            t.set_values(values);
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore::new()
    }
}

/// Glorot-normal weight init: std √(2/(fan_in+fan_out)). Nothing here is
/// pretrained, so the init must carry signal through the stack on its own;
/// a small fixed scale leaves the CLS output dominated by its constant
/// embedding and the classifier sees near-constant features.
pub fn init_normal(shape: Vec<usize>, rng: &mut SplitMix64) -> Tensor {
    let n: usize = shape.iter().product();
    let fan_out = *shape.last().expect("non-empty shape");
    let fan_in = n / fan_out.max(1);
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_vec(shape, (0..n).map(|_| rng.next_normal() * std).collect())
}

pub fn init_zeros(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape)
}

pub fn init_ones(shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, vec![1.0; n])
}
