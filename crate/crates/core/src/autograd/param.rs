use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor with its gradient buffer and Adam moments.
#[derive(Debug, Clone)]
pub struct Parameter<T: Real> {
    name: String,
    value: Tensor<T>,
    grad: Tensor<T>,
    trainable: bool,
    first_moment: Vec<T>,
    second_moment: Vec<T>,
    step: u64,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        let n = value.len();
        Self {
            name: name.into(),
            value,
            grad,
            trainable,
            first_moment: vec![T::ZERO; n],
            second_moment: vec![T::ZERO; n],
            step: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn grad(&self) -> &Tensor<T> {
        &self.grad
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Replaces the value, resetting gradient and optimizer state.
    pub fn set_value(&mut self, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::invalid(format!(
                "parameter {} has shape {:?}, new value {:?}",
                self.name,
                self.value.shape(),
                value.shape()
            )));
        }
        self.value = value;
        self.zero_grad();
        self.reset_optimizer_state();
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(T::ZERO);
    }

    pub fn reset_optimizer_state(&mut self) {
        self.first_moment.fill(T::ZERO);
        self.second_moment.fill(T::ZERO);
        self.step = 0;
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[T]) {
        for (dst, &v) in self.grad.data_mut().iter_mut().zip(g) {
            *dst += v;
        }
    }
}

/// Owns every parameter of a model; tape nodes refer to them by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.params.push(Parameter::new(name, value, trainable));
        ParamId(self.params.len() - 1)
    }

    /// Puts a fresh parameter into an existing slot.
    pub fn replace(&mut self, id: ParamId, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        self.params[id.0] = Parameter::new(name, value, trainable);
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// Updates every trainable parameter in place; frozen ones are not touched.
    pub fn step<T: Real>(&self, store: &mut ParamStore<T>) {
        for p in store.iter_mut() {
            self.step_param(p);
        }
    }

    pub fn step_param<T: Real>(&self, p: &mut Parameter<T>) {
        if !p.trainable {
            return;
        }
        p.step += 1;
        let t = p.step as i32;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (c1, c2) = (T::ONE - b1, T::ONE - b2);
        let corr1 = T::from_f64(1.0 / (1.0 - self.beta1.powi(t)));
        let corr2 = T::from_f64(1.0 / (1.0 - self.beta2.powi(t)));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        let grads = p.grad.data();
        let values = p.value.data_mut();
        for i in 0..values.len() {
            let g = grads[i];
            let m = b1 * p.first_moment[i] + c1 * g;
            let v = b2 * p.second_moment[i] + c2 * g * g;
            p.first_moment[i] = m;
            p.second_moment[i] = v;
            values[i] -= lr * (m * corr1) / ((v * corr2).sqrt() + eps);
        }
    }
}
