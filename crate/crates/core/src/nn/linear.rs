//! Fully connected layer.

use super::{sample_normal, Param, ParamRef, Params};
use crate::rng::Rng;
use ndarray::{Array1, Array2, Axis, Ix1, Ix2};

/// y = x W^T + b over a batch of row vectors.
#[derive(Debug, Clone)]
pub struct Linear {
    /// Weight, shape (out, in).
    pub w: Param<Ix2>,
    /// Bias, shape (out).
    pub b: Param<Ix1>,
}

impl Linear {
    pub fn new(rng: &mut Rng, in_dim: usize, out_dim: usize, w_std: f64, b_init: f64) -> Self {
        Linear {
            w: Param::new(sample_normal(rng, (out_dim, in_dim), w_std)),
            b: Param::new(Array1::from_elem(out_dim, b_init)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.value.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.value.nrows()
    }

    /// x: (batch, in) -> (batch, out).
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.value.t());
        y += &self.b.value;
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    /// `x` must be the same batch that produced `gy`.
    pub fn backward(&mut self, x: &Array2<f64>, gy: &Array2<f64>) -> Array2<f64> {
        self.w.grad += &gy.t().dot(x);
        self.b.grad += &gy.sum_axis(Axis(0));
        gy.dot(&self.w.value)
    }
}

impl Params for Linear {
    fn visit(&mut self, f: &mut dyn FnMut(ParamRef<'_>)) {
        self.w.visit_with(f);
        self.b.visit_with(f);
    }
}
