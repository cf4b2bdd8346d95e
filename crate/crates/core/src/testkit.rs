//! Slow, obviously-correct reference implementations and numeric helpers.
//!
//! Production code never calls into this module; it exists so tests can check
//! the optimized paths against independent oracles.

use ndarray::{Array1, Array2, Array4};

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let hi = f(&probe);
        probe[i] = x[i] - eps;
        let lo = f(&probe);
        probe[i] = x[i];
        grad.push((hi - lo) / (2.0 * eps));
    }
    grad
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch: {} vs {}", a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Elementwise relative error with a unit floor, so entries near zero are
/// compared absolutely.
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch: {} vs {}", a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Naive quadruple-loop convolution over (b, h, w, c) tensors with zero
/// padding. `w` has shape (kh * kw * cin, cout) with row index
/// (dy * kw + dx) * cin + ci.
pub fn conv2d_reference(
    x: &Array4<f64>,
    w: &Array2<f64>,
    b: &Array1<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (bsz, h, wd, cin) = x.dim();
    let cout = b.len();
    assert_eq!(w.dim(), (kh * kw * cin, cout));
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut y = Array4::<f64>::zeros((bsz, oh, ow, cout));
    for bi in 0..bsz {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = b[co];
                    for dy in 0..kh {
                        let iy = (oy * stride + dy) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..kw {
                            let ix = (ox * stride + dx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x[[bi, iy as usize, ix as usize, ci]]
                                    * w[[(dy * kw + dx) * cin + ci, co]];
                            }
                        }
                    }
                    y[[bi, oy, ox, co]] = acc;
                }
            }
        }
    }
    y
}
