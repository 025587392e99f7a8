use std::collections::HashMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{AlftError, Result};

/// Stable handle to one named parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

/// Named learnable tensors with their gradients and adaptive-moment state.
///
/// Names follow a dotted group convention (`decoder.layer0.self.q.w`), are
/// unique, and a tensor's shape never changes after it is registered.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(AlftError::Config(format!("duplicate parameter name `{name}`")));
        }
        if !value.is_finite() {
            return Err(AlftError::ParameterHealth(format!("`{name}` initialized with non-finite values")));
        }
        let n = value.len();
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad: vec![0.0; n],
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    /// Fan-in scaled uniform initialization, `U(-1/√fan_in, 1/√fan_in)`.
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_filled(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.add(name, Tensor::filled(shape, value))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let e = &mut self.entries[id.0];
        assert_eq!(e.grad.len(), g.len(), "gradient length mismatch for `{}`", e.name);
        for (a, b) in e.grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn scale_grads(&mut self, c: f64) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g *= c);
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// All parameter values concatenated in registration order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.value.data().iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.grad.iter().copied()).collect()
    }

    pub fn set_flat_values(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.scalar_count());
        let mut off = 0;
        for e in &mut self.entries {
            let n = e.value.len();
            e.value.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
    }

    /// Range of flat indices covered by parameters whose name starts with `prefix`.
    pub fn flat_ranges(&self, prefix: &str) -> Vec<std::ops::Range<usize>> {
        let mut off = 0;
        let mut out = Vec::new();
        for e in &self.entries {
            let n = e.value.len();
            if e.name.starts_with(prefix) {
                out.push(off..off + n);
            }
            off += n;
        }
        out
    }

    pub(crate) fn adam_state_mut(&mut self, id: ParamId) -> (&mut Tensor, &[f64], &mut [f64], &mut [f64]) {
        let e = &mut self.entries[id.0];
        (&mut e.value, &e.grad, &mut e.first_moment, &mut e.second_moment)
    }

    /// Named tensors in registration order.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Overwrite values from named tensors; every stored name must be present
    /// with an identical shape.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let map: HashMap<&str, &Tensor> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for e in &mut self.entries {
            let t = map
                .get(e.name.as_str())
                .ok_or_else(|| AlftError::Container(format!("missing parameter `{}`", e.name)))?;
            if t.shape() != e.value.shape() {
                return Err(AlftError::Container(format!(
                    "parameter `{}` has shape {:?}, checkpoint holds {:?}",
                    e.name,
                    e.value.shape(),
                    t.shape()
                )));
            }
            e.value = (*t).clone();
        }
        if map.len() != self.entries.len() {
            return Err(AlftError::Container(format!(
                "checkpoint holds {} tensors, model has {}",
                map.len(),
                self.entries.len()
            )));
        }
        Ok(())
    }

    /// Reject any non-finite parameter value.
    pub fn check_health(&self) -> Result<()> {
        for e in &self.entries {
            if !e.value.is_finite() {
                return Err(AlftError::ParameterHealth(format!("`{}` holds non-finite values", e.name)));
            }
        }
        Ok(())
    }
}
