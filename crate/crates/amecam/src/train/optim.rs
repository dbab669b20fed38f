//! Adam and momentum-SGD over named parameters.
//!
//! State is keyed by parameter name, so the set of layers passed to `step`
//! must keep stable names across calls (see [`LayerGroup`]).

use super::{OptimizerKind, PhaseConfig};
use crate::nn::{self, Layer, Param};
use crate::Scalar;
use ndarray::ArrayD;
use std::collections::HashMap;

/// Ad-hoc composite layer: visits several sub-layers under fixed prefixes.
/// Lets one optimizer step a subset of the model (e.g. attention + projector
/// while the backbone stays frozen) with checkpoint-consistent names.
pub struct LayerGroup<'a, T: Scalar> {
    parts: Vec<(&'static str, &'a mut dyn Layer<T>)>,
}

impl<'a, T: Scalar> LayerGroup<'a, T> {
    pub fn new() -> Self {
        Self { parts: Vec::new() }
    }

    pub fn with(mut self, name: &'static str, layer: &'a mut dyn Layer<T>) -> Self {
        self.parts.push((name, layer));
        self
    }
}

impl<'a, T: Scalar> Default for LayerGroup<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Layer<T> for LayerGroup<'a, T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (name, layer) in &self.parts {
            layer.visit_params(&nn::join(prefix, name), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (name, layer) in &mut self.parts {
            layer.visit_params_mut(&nn::join(prefix, name), f);
        }
    }
}

struct AdamState<T> {
    m: ArrayD<T>,
    v: ArrayD<T>,
}

pub struct Adam<T> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    state: HashMap<String, AdamState<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, state: HashMap::new() }
    }

    pub fn step(&mut self, layer: &mut dyn Layer<T>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::from_f64_(self.beta1), T::from_f64_(self.beta2));
        let (ib1, ib2) = (T::from_f64_(1.0 - self.beta1), T::from_f64_(1.0 - self.beta2));
        let wd = T::from_f64_(self.weight_decay);
        let eps = T::from_f64_(self.eps);
        let scale = T::from_f64_(lr / bc1);
        let vs = T::from_f64_(1.0 / bc2);
        let state = &mut self.state;
        layer.visit_params_mut("", &mut |name, p| {
            let s = state.entry(name.to_string()).or_insert_with(|| AdamState {
                m: ArrayD::zeros(p.value.raw_dim()),
                v: ArrayD::zeros(p.value.raw_dim()),
            });
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(&mut s.m)
                .and(&mut s.v)
                .for_each(|w, &g, m, v| {
                    let g = g + wd * *w;
                    *m = b1 * *m + ib1 * g;
                    *v = b2 * *v + ib2 * g * g;
                    *w -= scale * *m / ((*v * vs).sqrt() + eps);
                });
        });
    }
}

struct SgdState<T> {
    velocity: ArrayD<T>,
}

pub struct Sgd<T> {
    momentum: f64,
    weight_decay: f64,
    state: HashMap<String, SgdState<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, state: HashMap::new() }
    }

    pub fn step(&mut self, layer: &mut dyn Layer<T>, lr: f64) {
        let mu = T::from_f64_(self.momentum);
        let wd = T::from_f64_(self.weight_decay);
        let lr = T::from_f64_(lr);
        let state = &mut self.state;
        layer.visit_params_mut("", &mut |name, p| {
            let s = state
                .entry(name.to_string())
                .or_insert_with(|| SgdState { velocity: ArrayD::zeros(p.value.raw_dim()) });
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(&mut s.velocity)
                .for_each(|w, &g, v| {
                    *v = mu * *v + g + wd * *w;
                    *w -= lr * *v;
                });
        });
    }
}

pub enum Optimizer<T> {
    Adam(Adam<T>),
    Sgd(Sgd<T>),
}

impl<T: Scalar> Optimizer<T> {
    pub fn from_config(cfg: &PhaseConfig) -> Self {
        match cfg.effective_optimizer() {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(cfg.weight_decay)),
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(cfg.sgd_momentum, cfg.weight_decay)),
        }
    }

    pub fn step(&mut self, layer: &mut dyn Layer<T>, lr: f64) {
        match self {
            Optimizer::Adam(a) => a.step(layer, lr),
            Optimizer::Sgd(s) => s.step(layer, lr),
        }
    }
}
