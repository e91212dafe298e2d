//! Optimizers, selected by name.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Updates every trainable parameter from its accumulated gradient.
/// Frozen parameters are never written.
pub trait Optimizer: Send {
    fn name(&self) -> &'static str;
    fn step(&mut self, store: &mut ParamStore);
}

pub struct Sgd {
    pub learning_rate: f64,
}

impl Optimizer for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn step(&mut self, store: &mut ParamStore) {
        for id in store.trainable_ids() {
            let p = store.get_mut(id);
            let lr = self.learning_rate;
            for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v -= lr * g;
            }
        }
    }
}

pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Optimizer for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for id in store.trainable_ids() {
            let p = store.get_mut(id);
            let (m, v) = self.moments.entry(id).or_insert_with(|| {
                (
                    Tensor::zeros(p.value.rows(), p.value.cols()),
                    Tensor::zeros(p.value.rows(), p.value.cols()),
                )
            });
            let values = p.value.data_mut();
            let grads = p.grad.data();
            for i in 0..values.len() {
                let g = grads[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = self.learning_rate * (mi / bc1) / ((vi / bc2).sqrt() + self.epsilon);
                values[i] -= update;
            }
        }
    }
}

type OptimizerCtor = fn(f64) -> Box<dyn Optimizer>;

/// Registered optimizer constructors, keyed by config name.
pub fn registry() -> BTreeMap<&'static str, OptimizerCtor> {
    let mut r: BTreeMap<&'static str, OptimizerCtor> = BTreeMap::new();
    r.insert("adam", |lr| Box::new(Adam::new(lr)));
    r.insert("sgd", |lr| Box::new(Sgd { learning_rate: lr }));
    r
}

pub fn build(name: &str, learning_rate: f64) -> Result<Box<dyn Optimizer>> {
    let r = registry();
    let ctor = r.get(name).ok_or_else(|| {
        Error::Config(format!(
            "unknown optimizer {name:?}; known: {}",
            r.keys().copied().collect::<Vec<_>>().join(", ")
        ))
    })?;
    Ok(ctor(learning_rate))
}
