use super::{Real, Tensor};

/// A trainable (or frozen) tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub frozen: bool,
}

impl<T: Real> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            value,
            grad,
            frozen: false,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn cast<U: Real>(&self) -> Parameter<U> {
        Parameter {
            value: self.value.cast(),
            grad: self.grad.cast(),
            frozen: self.frozen,
        }
    }
}

/// Anything that owns named parameters.
///
/// Names are stable and unique within a module; they key serialization,
/// initialization seeds and optimizer state.
pub trait Module<T: Real> {
    fn params(&self) -> Vec<(String, &Parameter<T>)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)>;

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    fn freeze(&mut self) {
        for (_, p) in self.params_mut() {
            p.frozen = true;
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.len()).sum()
    }

    /// Flattened copy of every parameter value, in `params()` order.
    fn flat_values(&self) -> Vec<T> {
        self.params()
            .iter()
            .flat_map(|(_, p)| p.value.data().iter().copied())
            .collect()
    }

    fn flat_grads(&self) -> Vec<T> {
        self.params()
            .iter()
            .flat_map(|(_, p)| p.grad.data().iter().copied())
            .collect()
    }

    fn set_flat_values(&mut self, values: &[T]) {
        let mut offset = 0;
        for (_, p) in self.params_mut() {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, values.len(), "flat parameter vector has the wrong length");
    }
}
