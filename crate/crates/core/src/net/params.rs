use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Option<Vec<T>>,
    pub momentum: Vec<T>,
}

/// Named parameters in declaration order, with SGD momentum buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, value: Vec<T>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let n = value.len();
        self.params.push(Param {
            name: name.to_string(),
            shape,
            value,
            grad: None,
            momentum: vec![T::zero(); n],
        });
        ParamId(self.params.len() - 1)
    }

    /// He-normal initialisation with standard deviation sqrt(2 / fan_in).
    pub fn add_he<R: Rng + ?Sized>(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, rng: &mut R) -> ParamId {
        let n = shape.iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let value = (0..n).map(|_| T::lit(normal.sample(rng))).collect();
        self.add(name, shape, value)
    }

    pub fn add_zeros(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![T::zero(); n])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        &self.params[id.0].value
    }

    /// Gradient buffer for accumulation; created zeroed on first access.
    pub fn grad_mut(&mut self, id: ParamId) -> &mut [T] {
        let p = &mut self.params[id.0];
        let n = p.value.len();
        p.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    /// Moves the gradient buffer out (zeroed if absent); pair with [`Self::put_grad`].
    pub fn take_grad(&mut self, id: ParamId) -> Vec<T> {
        let p = &mut self.params[id.0];
        p.grad.take().unwrap_or_else(|| vec![T::zero(); p.value.len()])
    }

    pub fn put_grad(&mut self, id: ParamId, grad: Vec<T>) {
        self.params[id.0].grad = Some(grad);
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            match &mut p.grad {
                Some(g) => g.iter_mut().for_each(|v| *v = T::zero()),
                None => p.grad = Some(vec![T::zero(); p.value.len()]),
            }
        }
    }

    pub fn clear_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Euclidean norm over every gradient buffer.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flatten()
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grad(&mut self, factor: T) {
        for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// One SGD step with classical momentum: `v ← m·v + g; p ← p − lr·v`.
pub fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, lr: f64, momentum: f64) -> Result<()> {
    if let Some(p) = store.iter().find(|p| p.grad.is_none()) {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    let lr = T::lit(lr);
    let m = T::lit(momentum);
    for p in store.iter_mut() {
        let grad = p.grad.as_ref().expect("checked above");
        for ((v, w), &g) in p.momentum.iter_mut().zip(p.value.iter_mut()).zip(grad) {
            *v = m * *v + g;
            *w = *w - lr * *v;
        }
    }
    Ok(())
}

/// Reduce-on-plateau learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub best_loss: f64,
    pub stall_count: usize,
    /// Minimum relative improvement that resets the stall counter.
    pub threshold: f64,
}

impl PlateauSchedule {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            factor: 10.0,
            patience: 2,
            best_loss: f64::INFINITY,
            stall_count: 0,
            threshold: 1e-4,
        }
    }

    /// Feeds one validation loss and returns the learning rate to use next.
    pub fn update(&mut self, loss: f64) -> f64 {
        if loss < self.best_loss * (1.0 - self.threshold) || self.best_loss.is_infinite() {
            self.best_loss = loss;
            self.stall_count = 0;
        } else {
            self.stall_count += 1;
            if self.stall_count > self.patience {
                self.lr /= self.factor;
                self.stall_count = 0;
            }
        }
        self.lr
    }
}

impl Default for PlateauSchedule {
    fn default() -> Self {
        Self::new(1e-4)
    }
}
