//! Named parameter store shared by layers and the optimizer.
//!
//! Parameters live outside the tape; each forward pass leases them in as leaf
//! nodes and `Tape::backward` scatters gradients back here.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Flat collection of learnable tensors with accumulated gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    /// Fan-in scaled uniform init: U(-1/√fan_in, 1/√fan_in).
    pub fn add_fan_in(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let value = Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) {
        let dst = self.params[id.0].grad.data_mut();
        for (d, &g) in dst.iter_mut().zip(grad.data()) {
            *d += g;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copy every parameter value from `src`; stores must be congruent.
    pub fn copy_values_from(&mut self, src: &ParamStore) {
        assert_eq!(self.params.len(), src.params.len(), "param store mismatch");
        for (dst, s) in self.params.iter_mut().zip(&src.params) {
            assert_eq!(dst.value.shape(), s.value.shape(), "param shape mismatch");
            dst.value = s.value.clone();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn grads_accumulate_additively() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros(&[2]));
        let g = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        store.accumulate_grad(id, &g);
        store.accumulate_grad(id, &g);
        assert_eq!(store.grad(id).data(), &[2.0, 4.0]);
        store.zero_grads();
        assert_eq!(store.grad(id).data(), &[0.0, 0.0]);
    }

    #[test]
    fn fan_in_bound_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let id = store.add_fan_in("w", &[64, 16], 64, &mut rng);
        let bound = 1.0 / 8.0;
        assert!(store.value(id).data().iter().all(|v| v.abs() <= bound));
    }
}
