//! Minimal neural-network building blocks: parameters, linear and
//! convolutional layers, activations, and initialization.
//!
//! Everything runs in f64 on the CPU. Layers are functional: `forward` takes
//! inputs by reference, `backward` takes the same inputs plus the upstream
//! gradient and accumulates into the layer's `grad` buffers. Callers keep
//! whatever activations they need for the backward pass.

pub mod activations;
pub mod conv;
pub mod linear;
pub mod optim;

pub use activations::{
    leaky_relu, leaky_relu_backward, relu, relu_backward, sigmoid, softplus, tanh_backward,
    tanh_forward,
};
pub use conv::{upsample_nearest_2x, upsample_nearest_2x_backward, Conv2d};
pub use linear::Linear;
pub use optim::{snap_f32, snap_params, Adam};

use crate::rng::Rng;
use ndarray::{Array, Dimension, IntoDimension};
use rand_distr::{Distribution, Normal};

/// A trainable tensor: value plus an accumulated gradient of the same shape.
#[derive(Debug, Clone)]
pub struct Param<D: Dimension> {
    pub value: Array<f64, D>,
    pub grad: Array<f64, D>,
}

impl<D: Dimension> Param<D> {
    pub fn new(value: Array<f64, D>) -> Self {
        let grad = Array::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn visit_with(&mut self, f: &mut dyn FnMut(ParamRef<'_>)) {
        let shape = self.value.shape().to_vec();
        f(ParamRef {
            shape,
            value: self
                .value
                .as_slice_mut()
                .expect("parameters are standard layout"),
            grad: self
                .grad
                .as_slice_mut()
                .expect("parameters are standard layout"),
        })
    }
}

/// Flat view of one parameter tensor handed to [`Params::visit`] callbacks.
pub struct ParamRef<'a> {
    pub shape: Vec<usize>,
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
}

/// Anything holding trainable parameters.
pub trait Params {
    /// Visits every parameter tensor in a fixed order: field declaration
    /// order, recursing into children. Optimizers, serialization, and
    /// model-level attacks all rely on this order being stable.
    fn visit(&mut self, f: &mut dyn FnMut(ParamRef<'_>));

    fn zero_grad(&mut self) {
        self.visit(&mut |p| p.grad.fill(0.0));
    }

    /// Total number of scalar parameters.
    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value.len());
        n
    }
}

/// Snapshot weights as f32 tensors in visit order.
pub fn export_weights(net: &mut dyn Params) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    net.visit(&mut |p| out.push(p.value.iter().map(|&v| v as f32).collect()));
    out
}

/// Overwrite weights from an [`export_weights`] snapshot of an identically
/// shaped network.
pub fn import_weights(net: &mut dyn Params, tensors: &[Vec<f32>]) -> crate::error::Result<()> {
    let mut idx = 0usize;
    let mut err = None;
    net.visit(&mut |p| {
        if err.is_some() {
            return;
        }
        match tensors.get(idx) {
            Some(t) if t.len() == p.value.len() => {
                for (w, &v) in p.value.iter_mut().zip(t) {
                    *w = v as f64;
                }
            }
            Some(t) => {
                err = Some(format!(
                    "tensor {idx}: {} values for a {}-element parameter",
                    t.len(),
                    p.value.len()
                ))
            }
            None => err = Some(format!("missing tensor {idx}")),
        }
        idx += 1;
    });
    if err.is_none() && idx != tensors.len() {
        err = Some(format!("{} tensors supplied, network has {idx}", tensors.len()));
    }
    match err {
        Some(e) => Err(crate::error::Error::Format(e)),
        None => Ok(()),
    }
}

/// Kaiming-normal standard deviation for layers followed by a ReLU family
/// activation.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Glorot-normal standard deviation for output heads.
pub fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Samples a tensor with i.i.d. N(0, std^2) entries.
pub fn sample_normal<Sh>(rng: &mut Rng, shape: Sh, std: f64) -> Array<f64, Sh::Dim>
where
    Sh: IntoDimension,
{
    let normal = Normal::new(0.0, std).expect("finite nonnegative std");
    Array::from_shape_simple_fn(shape.into_dimension(), || normal.sample(rng))
}
