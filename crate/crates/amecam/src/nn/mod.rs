//! Minimal neural-network building blocks with hand-written backward passes.
//!
//! Layers own their parameters together with gradient accumulators; training
//! code zeroes gradients, runs forward passes that return whatever cache the
//! matching backward pass needs, then lets an optimizer walk the parameter
//! tree through [`Layer::visit_params_mut`]. Everything is deterministic:
//! no threading, fixed iteration order, seeded initialization.

pub mod conv;
pub mod init;
pub mod linear;
pub mod norm;
pub mod ops;

pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::{BatchNorm2d, BnCache};

use crate::{Error, Result, Scalar};
use ndarray::ArrayD;
use sha2::{Digest, Sha256};
use std::collections::HashMap;

/// A learnable tensor paired with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Tree of named parameters and buffers.
///
/// `visit_*` callbacks receive hierarchical dot-separated names; buffers are
/// non-learnable state (running statistics) that still belongs in checkpoints.
pub trait Layer<T: Scalar> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));
    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &ArrayD<T>)) {}
    fn visit_buffers_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {}
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn zero_grads<T: Scalar>(layer: &mut dyn Layer<T>) {
    layer.visit_params_mut("", &mut |_, p| p.zero_grad());
}

/// Multiplies every accumulated gradient by `factor` (e.g. 1/batch to turn
/// per-sample sums into means before an optimizer step).
pub fn scale_grads<T: Scalar>(layer: &mut dyn Layer<T>, factor: T) {
    layer.visit_params_mut("", &mut |_, p| p.grad.mapv_inplace(|g| g * factor));
}

/// Parameters followed by buffers, in visit order.
pub fn collect_state<T: Scalar>(layer: &dyn Layer<T>) -> Vec<(String, ArrayD<T>)> {
    let mut out = Vec::new();
    layer.visit_params("", &mut |name, p| out.push((name.to_string(), p.value.clone())));
    layer.visit_buffers("", &mut |name, b| out.push((name.to_string(), b.clone())));
    out
}

/// Load every parameter and buffer of `layer` from `tensors`, shape-checked.
pub fn load_state<T: Scalar>(
    layer: &mut dyn Layer<T>,
    tensors: &HashMap<String, ArrayD<T>>,
) -> Result<()> {
    let mut missing: Vec<String> = Vec::new();
    let mut bad_shape: Vec<String> = Vec::new();
    {
        let mut load = |name: &str, dst: &mut ArrayD<T>| match tensors.get(name) {
            Some(src) if src.shape() == dst.shape() => dst.assign(src),
            Some(_) => bad_shape.push(name.to_string()),
            None => missing.push(name.to_string()),
        };
        layer.visit_params_mut("", &mut |name, p| load(name, &mut p.value));
        layer.visit_buffers_mut("", &mut |name, b| load(name, b));
    }
    if !missing.is_empty() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "missing tensors: {}",
            missing.join(", ")
        )));
    }
    if !bad_shape.is_empty() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "tensor shape mismatch: {}",
            bad_shape.join(", ")
        )));
    }
    Ok(())
}

/// SHA-256 over names, shapes and little-endian bytes of the full state.
pub fn state_hash<T: Scalar>(layer: &dyn Layer<T>) -> String {
    let mut hasher = Sha256::new();
    for (name, tensor) in collect_state(layer) {
        hasher.update(name.as_bytes());
        for d in tensor.shape() {
            hasher.update((*d as u64).to_le_bytes());
        }
        let mut bytes = Vec::with_capacity(tensor.len() * T::BYTES);
        for &v in tensor.iter() {
            v.write_le(&mut bytes);
        }
        hasher.update(&bytes);
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}
