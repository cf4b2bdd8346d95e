//! Elementwise activations with explicit backward passes, plus the stable
//! scalar sigmoid/softplus helpers the loss terms are written in.

use ndarray::{Array, Dimension, Zip};

pub fn relu<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient of [`relu`] given the pre-activation input `x`.
pub fn relu_backward<D: Dimension>(x: &Array<f64, D>, gy: &Array<f64, D>) -> Array<f64, D> {
    let mut gx = gy.clone();
    Zip::from(&mut gx).and(x).for_each(|g, &v| {
        if v <= 0.0 {
            *g = 0.0;
        }
    });
    gx
}

pub fn leaky_relu<D: Dimension>(x: &Array<f64, D>, alpha: f64) -> Array<f64, D> {
    x.mapv(|v| if v > 0.0 { v } else { alpha * v })
}

/// Gradient of [`leaky_relu`] given the pre-activation input `x`.
pub fn leaky_relu_backward<D: Dimension>(
    x: &Array<f64, D>,
    gy: &Array<f64, D>,
    alpha: f64,
) -> Array<f64, D> {
    let mut gx = gy.clone();
    Zip::from(&mut gx).and(x).for_each(|g, &v| {
        if v <= 0.0 {
            *g *= alpha;
        }
    });
    gx
}

pub fn tanh_forward<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(f64::tanh)
}

/// Gradient of tanh given the post-activation output `y`.
pub fn tanh_backward<D: Dimension>(y: &Array<f64, D>, gy: &Array<f64, D>) -> Array<f64, D> {
    let mut gx = gy.clone();
    Zip::from(&mut gx).and(y).for_each(|g, &v| *g *= 1.0 - v * v);
    gx
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log(1 + exp(x)).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
