//! Optimizers for the two parameter groups and the cosine schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::{Group, ParamStore};

/// `lr0 (1 + cos(pi t / T)) / 2`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("cosine-lr", "schedule length must be positive"));
    }
    if t > total {
        return Err(Error::invalid("cosine-lr", format!("step {t} is past the schedule end {total}")));
    }
    Ok(lr0 * (1.0 + (PI * t as f64 / total as f64).cos()) / 2.0)
}

fn grads_of(store: &ParamStore, group: Group) -> Result<Vec<Vec<f64>>> {
    store
        .ids_in(group)
        .into_iter()
        .map(|id| {
            let p = store.get(id);
            p.value.grad.clone().ok_or_else(|| Error::MissingGrad(p.name.clone()))
        })
        .collect()
}

/// SGD with heavy-ball momentum, weight decay folded into the gradient:
/// `v = m v + g + wd p`, `p -= lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    /// Updates every parameter of `group`. Each must hold a gradient.
    pub fn step(&mut self, store: &mut ParamStore, group: Group, lr: f64) -> Result<()> {
        let grads = grads_of(store, group)?;
        let ids = store.ids_in(group);
        if self.velocity.is_empty() {
            self.velocity = ids.iter().map(|&id| vec![0.0; store.get(id).value.numel()]).collect();
        }
        for ((id, g), v) in ids.into_iter().zip(grads).zip(&mut self.velocity) {
            let p = store.get_mut(id).value.values_mut();
            for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = self.momentum * *v + g + self.weight_decay * *p;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction; weight decay is added to the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

pub const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self { lr, beta1, beta2, weight_decay, eps: ADAM_EPS, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, store: &mut ParamStore, group: Group) -> Result<()> {
        let grads = grads_of(store, group)?;
        let ids = store.ids_in(group);
        if self.m.is_empty() {
            self.m = ids.iter().map(|&id| vec![0.0; store.get(id).value.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((id, g), m), v) in ids.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let p = store.get_mut(id).value.values_mut();
            for (((p, g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g + self.weight_decay * *p;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
