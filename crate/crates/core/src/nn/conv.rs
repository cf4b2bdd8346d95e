//! 2-D convolution via im2col + GEMM, and nearest-neighbour upsampling.
//!
//! Feature maps are (batch, height, width, channels). The im2col patch axis
//! is ordered (dy, dx, cin), so the weight matrix has shape
//! (kh * kw * cin, cout) with row index (dy * kw + dx) * cin + cin_idx.

use super::{sample_normal, Param, ParamRef, Params};
use crate::rng::Rng;
use ndarray::{Array1, Array2, Array4, Axis, Ix1, Ix2};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    /// Weight, shape (kh * kw * cin, cout).
    pub w: Param<Ix2>,
    /// Bias, shape (cout).
    pub b: Param<Ix1>,
}

impl Conv2d {
    pub fn new(
        rng: &mut Rng,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
        w_std: f64,
    ) -> Self {
        assert!(k >= 1 && stride >= 1 && cin >= 1 && cout >= 1);
        Conv2d {
            kh: k,
            kw: k,
            cin,
            cout,
            stride,
            pad,
            w: Param::new(sample_normal(rng, (k * k * cin, cout), w_std)),
            b: Param::new(Array1::zeros(cout)),
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        assert!(
            h + 2 * self.pad >= self.kh && w + 2 * self.pad >= self.kw,
            "input {h}x{w} too small for {}x{} kernel with pad {}",
            self.kh,
            self.kw,
            self.pad
        );
        (
            (h + 2 * self.pad - self.kh) / self.stride + 1,
            (w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array4<f64>) -> Array2<f64> {
        let (bsz, h, w, cin) = x.dim();
        assert_eq!(cin, self.cin, "channel mismatch");
        let (oh, ow) = self.out_hw(h, w);
        let xs = x.as_slice().expect("standard layout");
        let row_len = self.kh * self.kw * cin;
        let mut cols = Array2::<f64>::zeros((bsz * oh * ow, row_len));
        let cs = cols.as_slice_mut().unwrap();
        for bi in 0..bsz {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((bi * oh + oy) * ow + ox) * row_len;
                    for dy in 0..self.kh {
                        let iy = (oy * self.stride + dy) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..self.kw {
                            let ix = (ox * self.stride + dx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = ((bi * h + iy as usize) * w + ix as usize) * cin;
                            let dst = row + (dy * self.kw + dx) * cin;
                            cs[dst..dst + cin].copy_from_slice(&xs[src..src + cin]);
                        }
                    }
                }
            }
        }
        cols
    }

    /// x: (batch, h, w, cin) -> (batch, oh, ow, cout).
    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (bsz, h, w, _) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let cols = self.im2col(x);
        let mut y = cols.dot(&self.w.value);
        y += &self.b.value;
        y.into_shape_with_order((bsz, oh, ow, self.cout)).unwrap()
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    /// `x` must be the same batch that produced `gy`.
    pub fn backward(&mut self, x: &Array4<f64>, gy: &Array4<f64>) -> Array4<f64> {
        let (bsz, h, w, cin) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        assert_eq!(gy.dim(), (bsz, oh, ow, self.cout));
        let gy2 = gy
            .to_shape((bsz * oh * ow, self.cout))
            .expect("standard layout");

        let cols = self.im2col(x);
        self.w.grad += &cols.t().dot(&gy2);
        self.b.grad += &gy2.sum_axis(Axis(0));

        // col2im: scatter-add the column gradient back onto the input grid.
        let gcols = gy2.dot(&self.w.value.t());
        let gs = gcols.as_slice().unwrap();
        let mut gx = Array4::<f64>::zeros((bsz, h, w, cin));
        let gxs = gx.as_slice_mut().unwrap();
        let row_len = self.kh * self.kw * cin;
        for bi in 0..bsz {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((bi * oh + oy) * ow + ox) * row_len;
                    for dy in 0..self.kh {
                        let iy = (oy * self.stride + dy) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..self.kw {
                            let ix = (ox * self.stride + dx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let dst = ((bi * h + iy as usize) * w + ix as usize) * cin;
                            let src = row + (dy * self.kw + dx) * cin;
                            for c in 0..cin {
                                gxs[dst + c] += gs[src + c];
                            }
                        }
                    }
                }
            }
        }
        gx
    }
}

impl Params for Conv2d {
    fn visit(&mut self, f: &mut dyn FnMut(ParamRef<'_>)) {
        self.w.visit_with(f);
        self.b.visit_with(f);
    }
}

/// (b, h, w, c) -> (b, 2h, 2w, c), each pixel replicated into a 2x2 block.
pub fn upsample_nearest_2x(x: &Array4<f64>) -> Array4<f64> {
    let (bsz, h, w, c) = x.dim();
    let mut y = Array4::<f64>::zeros((bsz, 2 * h, 2 * w, c));
    let xs = x.as_slice().expect("standard layout");
    let ys = y.as_slice_mut().unwrap();
    for bi in 0..bsz {
        for iy in 0..h {
            for ix in 0..w {
                let src = ((bi * h + iy) * w + ix) * c;
                for (sy, sx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let dst = ((bi * 2 * h + 2 * iy + sy) * 2 * w + 2 * ix + sx) * c;
                    ys[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                }
            }
        }
    }
    y
}

/// Adjoint of [`upsample_nearest_2x`]: sums each 2x2 block.
pub fn upsample_nearest_2x_backward(gy: &Array4<f64>) -> Array4<f64> {
    let (bsz, h2, w2, c) = gy.dim();
    assert!(h2 % 2 == 0 && w2 % 2 == 0);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::<f64>::zeros((bsz, h, w, c));
    let gys = gy.as_slice().expect("standard layout");
    let gxs = gx.as_slice_mut().unwrap();
    for bi in 0..bsz {
        for iy in 0..h {
            for ix in 0..w {
                let dst = ((bi * h + iy) * w + ix) * c;
                for (sy, sx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = ((bi * h2 + 2 * iy + sy) * w2 + 2 * ix + sx) * c;
                    for ch in 0..c {
                        gxs[dst + ch] += gys[src + ch];
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use crate::testkit::{conv2d_reference, finite_diff, max_abs_diff};

    #[test]
    fn forward_matches_naive_reference() {
        let mut rng = derive_rng(7, "nn.conv.test");
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let conv = Conv2d::new(&mut rng, 3, 2, 4, stride, pad, 0.3);
            let x = sample_normal(&mut rng, (2, 5, 6, 2), 1.0);
            let y = conv.forward(&x);
            let want = conv2d_reference(&x, &conv.w.value, &conv.b.value, 3, 3, stride, pad);
            assert_eq!(y.dim(), want.dim());
            assert!(
                max_abs_diff(y.as_slice().unwrap(), want.as_slice().unwrap()) < 1e-12,
                "stride {stride} pad {pad}"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = derive_rng(8, "nn.conv.test");
        for (stride, pad) in [(1, 1), (2, 1)] {
            let mut conv = Conv2d::new(&mut rng, 3, 2, 3, stride, pad, 0.4);
            let x = sample_normal(&mut rng, (1, 4, 4, 2), 1.0);
            let gy_dim = {
                let (oh, ow) = conv.out_hw(4, 4);
                (1, oh, ow, 3)
            };
            let gy = sample_normal(&mut rng, gy_dim, 1.0);

            let gx = conv.backward(&x, &gy);

            let fd_x = finite_diff(x.as_slice().unwrap(), 1e-6, |v| {
                let xv = Array4::from_shape_vec((1, 4, 4, 2), v.to_vec()).unwrap();
                (conv.forward(&xv) * &gy).sum()
            });
            assert!(max_abs_diff(gx.as_slice().unwrap(), &fd_x) < 1e-6);

            let w0 = conv.w.value.clone();
            let fd_w = finite_diff(w0.as_slice().unwrap(), 1e-6, |v| {
                let mut probe = conv.clone();
                probe.w.value = Array2::from_shape_vec(w0.raw_dim(), v.to_vec()).unwrap();
                (probe.forward(&x) * &gy).sum()
            });
            assert!(max_abs_diff(conv.w.grad.as_slice().unwrap(), &fd_w) < 1e-6);

            let fd_b = finite_diff(conv.b.value.clone().as_slice().unwrap(), 1e-6, |v| {
                let mut probe = conv.clone();
                probe.b.value = Array1::from_vec(v.to_vec());
                (probe.forward(&x) * &gy).sum()
            });
            assert!(max_abs_diff(conv.b.grad.as_slice().unwrap(), &fd_b) < 1e-6);
        }
    }

    #[test]
    fn upsample_replicates_pixels() {
        let mut rng = derive_rng(9, "nn.conv.test");
        let x = sample_normal(&mut rng, (1, 2, 3, 2), 1.0);
        let y = upsample_nearest_2x(&x);
        assert_eq!(y.dim(), (1, 4, 6, 2));
        for iy in 0..4 {
            for ix in 0..6 {
                for c in 0..2 {
                    assert_eq!(y[[0, iy, ix, c]], x[[0, iy / 2, ix / 2, c]]);
                }
            }
        }
    }

    #[test]
    fn upsample_backward_is_the_exact_adjoint() {
        // <A x, y> == <x, A^T y> for random x, y.
        let mut rng = derive_rng(10, "nn.conv.test");
        let x = sample_normal(&mut rng, (2, 3, 3, 4), 1.0);
        let y = sample_normal(&mut rng, (2, 6, 6, 4), 1.0);
        let lhs = (upsample_nearest_2x(&x) * &y).sum();
        let rhs = (x * upsample_nearest_2x_backward(&y)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
