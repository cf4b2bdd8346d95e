//! Separable Gaussian blur with mirrored (edge-excluding) reflect padding,
//! plus its exact adjoint for the training path.

use crate::error::{Error, Result};
use crate::tensor::Image;

/// Normalized 1-D Gaussian taps for an odd kernel size, with
/// sigma = 0.3*((k-1)/2 - 1) + 0.8.
pub fn gaussian_kernel(kernel_size: usize) -> Result<Vec<f64>> {
    if !matches!(kernel_size, 3 | 5 | 7 | 9) {
        return Err(Error::InvalidArgument(format!(
            "blur kernel size {kernel_size} not in {{0, 1, 3, 5, 7, 9}}"
        )));
    }
    let sigma = 0.3 * ((kernel_size - 1) as f64 / 2.0 - 1.0) + 0.8;
    let c = (kernel_size / 2) as f64;
    let mut taps: Vec<f64> = (0..kernel_size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    Ok(taps)
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge
/// sample.
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

/// One separable pass along the given axis (0 = rows move, 1 = cols move).
fn pass(img: &Image, taps: &[f64], axis: usize) -> Image {
    let (h, w, c) = img.dim();
    let half = (taps.len() / 2) as isize;
    let mut out = Image::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                let mut acc = 0.0;
                for (t, &tap) in taps.iter().enumerate() {
                    let off = t as isize - half;
                    let (y, x) = if axis == 0 {
                        (mirror(i as isize + off, h), j)
                    } else {
                        (i, mirror(j as isize + off, w))
                    };
                    acc += tap * img[[y, x, k]];
                }
                out[[i, j, k]] = acc;
            }
        }
    }
    out
}

/// Adjoint of [`pass`]: scatter each output gradient back through the same
/// mirrored taps.
fn pass_adjoint(gy: &Image, taps: &[f64], axis: usize) -> Image {
    let (h, w, c) = gy.dim();
    let half = (taps.len() / 2) as isize;
    let mut gx = Image::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                let g = gy[[i, j, k]];
                for (t, &tap) in taps.iter().enumerate() {
                    let off = t as isize - half;
                    let (y, x) = if axis == 0 {
                        (mirror(i as isize + off, h), j)
                    } else {
                        (i, mirror(j as isize + off, w))
                    };
                    gx[[y, x, k]] += tap * g;
                }
            }
        }
    }
    gx
}

/// Blur with precomputed taps (both separable passes).
pub fn blur_with_kernel(image: &Image, taps: &[f64]) -> Image {
    if taps.len() <= 1 {
        return image.clone();
    }
    pass(&pass(image, taps, 0), taps, 1)
}

/// Exact gradient of [`blur_with_kernel`] w.r.t. its input.
pub fn blur_adjoint(gy: &Image, taps: &[f64]) -> Image {
    if taps.len() <= 1 {
        return gy.clone();
    }
    pass_adjoint(&pass_adjoint(gy, taps, 1), taps, 0)
}

/// Gaussian-blur an image. Kernel sizes 0 and 1 are the identity; even sizes
/// and sizes above 9 are rejected.
pub fn gaussian_blur(image: &Image, kernel_size: usize) -> Result<Image> {
    if kernel_size <= 1 {
        return Ok(image.clone());
    }
    let taps = gaussian_kernel(kernel_size)?;
    Ok(blur_with_kernel(image, &taps))
}
