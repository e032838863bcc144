//! Learnable-parameter storage, shared read-only by any number of
//! computation graphs and mutated only by the optimizer.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

struct Param {
    name: String,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

/// Flat registry of named parameter buffers.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "parameter shape/buffer mismatch");
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            data: Arc::new(data),
        });
        id
    }

    /// Uniform init in +-sqrt(6 / (fan_in + fan_out)).
    pub fn register_glorot(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let (fan_in, fan_out) = match shape.as_slice() {
            [rows, cols] => (*rows, *cols),
            [n] => (*n, *n),
            _ => panic!("unsupported parameter rank {shape:?}"),
        };
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.register(name, shape, data)
    }

    pub fn register_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        let numel: usize = shape.iter().product();
        self.register(name, shape, vec![0.0; numel])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.params[id.0].shape
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].data
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Vec<f64>> {
        Arc::clone(&self.params[id.0].data)
    }

    /// Mutable access for optimizer updates. Clones the buffer if a graph
    /// still holds it, so in-flight tapes never observe the write.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.params[id.0].data)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &[usize], &[f64])> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p.name.as_str(), p.shape.as_slice(), p.data.as_slice()))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }
}

/// Dense per-parameter gradient buffers, aligned with a `ParamStore`.
#[derive(Clone)]
pub struct ParamGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        match &mut self.grads[id.0] {
            Some(buf) => {
                for (o, g) in buf.iter_mut().zip(grad) {
                    *o += g;
                }
            }
            None => self.grads[id.0] = Some(grad.to_vec()),
        }
    }

    /// Adds `other * weight` into self.
    pub fn add_scaled(&mut self, other: &ParamGrads, weight: f64) {
        for (slot, og) in self.grads.iter_mut().zip(other.grads.iter()) {
            if let Some(g) = og {
                match slot {
                    Some(buf) => {
                        for (o, v) in buf.iter_mut().zip(g) {
                            *o += weight * v;
                        }
                    }
                    None => *slot = Some(g.iter().map(|v| weight * v).collect()),
                }
            }
        }
    }

    pub fn scale(&mut self, weight: f64) {
        for slot in self.grads.iter_mut().flatten() {
            for v in slot.iter_mut() {
                *v *= weight;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn is_all_zero(&self) -> bool {
        self.grads
            .iter()
            .all(|g| g.as_ref().map_or(true, |b| b.iter().all(|v| *v == 0.0)))
    }
}
