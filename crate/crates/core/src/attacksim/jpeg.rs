//! Self-contained baseline JPEG round-trip: 8x8 DCT, quality-scaled standard
//! quantization tables, full-range YCbCr, no chroma subsampling.

use crate::error::{Error, Result};
use crate::tensor::Image;
use ndarray::Array2;
use std::f64::consts::PI;

#[rustfmt::skip]
const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

#[rustfmt::skip]
const CHROMA_TABLE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Scale a base table for the quality factor, clamping entries to 1..=255.
fn scaled_table(base: &[u16; 64], qf: u8) -> [f64; 64] {
    let scale: u32 = if qf < 50 { 5000 / qf as u32 } else { 200 - 2 * qf as u32 };
    let mut out = [0.0; 64];
    for (o, &t) in out.iter_mut().zip(base.iter()) {
        *o = ((t as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    out
}

fn dct_basis() -> ([[f64; 8]; 8], [f64; 8]) {
    let mut cos = [[0.0; 8]; 8];
    for (u, row) in cos.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            *v = (((2 * x + 1) as f64) * u as f64 * PI / 16.0).cos();
        }
    }
    let mut c = [1.0; 8];
    c[0] = 1.0 / 2f64.sqrt();
    (cos, c)
}

/// Forward DCT, quantize, dequantize, inverse DCT for one 8x8 block of
/// level-shifted samples.
fn round_trip_block(block: &mut [[f64; 8]; 8], table: &[f64; 64]) {
    let (cos, c) = dct_basis();
    let mut coef = [[0.0; 8]; 8];
    for u in 0..8 {
        for v in 0..8 {
            let mut acc = 0.0;
            for (x, row) in block.iter().enumerate() {
                for (y, &s) in row.iter().enumerate() {
                    acc += s * cos[u][x] * cos[v][y];
                }
            }
            let f = c[u] * c[v] / 4.0 * acc;
            let q = table[u * 8 + v];
            coef[u][v] = (f / q).round() * q;
        }
    }
    for (x, row) in block.iter_mut().enumerate() {
        for (y, s) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (u, crow) in coef.iter().enumerate() {
                for (v, &f) in crow.iter().enumerate() {
                    acc += c[u] * c[v] / 4.0 * f * cos[u][x] * cos[v][y];
                }
            }
            *s = acc;
        }
    }
}

/// Round-trip one plane of 8-bit samples. Plane edges are replicated out to
/// the block grid; the output is rounded back onto the 8-bit lattice.
fn round_trip_plane(plane: &Array2<f64>, table: &[f64; 64]) -> Array2<f64> {
    let (h, w) = plane.dim();
    let mut out = Array2::zeros((h, w));
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            let mut block = [[0.0; 8]; 8];
            for (dy, row) in block.iter_mut().enumerate() {
                for (dx, s) in row.iter_mut().enumerate() {
                    let y = (by + dy).min(h - 1);
                    let x = (bx + dx).min(w - 1);
                    *s = plane[[y, x]] - 128.0;
                }
            }
            round_trip_block(&mut block, table);
            for (dy, row) in block.iter().enumerate() {
                for (dx, &s) in row.iter().enumerate() {
                    if by + dy < h && bx + dx < w {
                        out[[by + dy, bx + dx]] = (s + 128.0).round().clamp(0.0, 255.0);
                    }
                }
            }
        }
    }
    out
}

/// Round-trip an image through baseline JPEG at the given quality factor.
/// Deterministic; the result lands back on the 8-bit lattice in `[-1, 1]`.
pub fn jpeg_compress(image: &Image, quality_factor: u8) -> Result<Image> {
    if !(1..=100).contains(&quality_factor) {
        return Err(Error::InvalidArgument(format!(
            "JPEG quality factor {quality_factor} outside 1..=100"
        )));
    }
    let (h, w, ch) = image.dim();
    if ch != 3 {
        return Err(Error::Shape(format!("JPEG needs 3 channels, got {ch}")));
    }

    let mut y = Array2::zeros((h, w));
    let mut cb = Array2::zeros((h, w));
    let mut cr = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let to8 = |v: f64| ((v + 1.0) * 0.5 * 255.0).round().clamp(0.0, 255.0);
            let r = to8(image[[i, j, 0]]);
            let g = to8(image[[i, j, 1]]);
            let b = to8(image[[i, j, 2]]);
            y[[i, j]] = 0.299 * r + 0.587 * g + 0.114 * b;
            cb[[i, j]] = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0;
            cr[[i, j]] = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0;
        }
    }

    let luma = scaled_table(&LUMA_TABLE, quality_factor);
    let chroma = scaled_table(&CHROMA_TABLE, quality_factor);
    let y = round_trip_plane(&y, &luma);
    let cb = round_trip_plane(&cb, &chroma);
    let cr = round_trip_plane(&cr, &chroma);

    let mut out = Image::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let (yy, pb, pr) = (y[[i, j]], cb[[i, j]] - 128.0, cr[[i, j]] - 128.0);
            let r = yy + 1.402 * pr;
            let g = yy - 0.344136 * pb - 0.714136 * pr;
            let b = yy + 1.772 * pb;
            for (k, v) in [r, g, b].into_iter().enumerate() {
                out[[i, j, k]] = v.round().clamp(0.0, 255.0) / 255.0 * 2.0 - 1.0;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng as _;

    fn mse(a: &Image, b: &Image) -> f64 {
        (a - b).mapv(|v| v * v).mean().unwrap()
    }

    /// Smooth low-frequency test image on the 8-bit lattice.
    fn natural_image(h: usize, w: usize) -> Image {
        let mut img = Image::zeros((h, w, 3));
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    let v = 0.4 * ((i as f64 / 7.0) + c as f64).sin()
                        + 0.3 * ((j as f64 / 5.0) - 0.3 * c as f64).cos()
                        + 0.1 * (((i + j) as f64) / 11.0).sin();
                    let byte = ((v + 1.0) * 0.5 * 255.0).round().clamp(0.0, 255.0);
                    img[[i, j, c]] = byte / 255.0 * 2.0 - 1.0;
                }
            }
        }
        img
    }

    #[test]
    fn qf_out_of_range_rejected() {
        let img = Image::zeros((8, 8, 3));
        assert!(matches!(jpeg_compress(&img, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(jpeg_compress(&img, 101), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn qf_100_near_lossless_on_flat_gray() {
        // 8-bit mid-gray everywhere.
        let gray = 128.0 / 255.0 * 2.0 - 1.0;
        let img = Image::from_elem((16, 16, 3), gray);
        let out = jpeg_compress(&img, 100).unwrap();
        let mean_abs = (&out - &img).mapv(f64::abs).mean().unwrap();
        assert!(mean_abs < 1.0 / 255.0, "mean abs change {mean_abs}");
    }

    #[test]
    fn quality_table_scaling() {
        // QF 50 leaves the base tables untouched; QF 100 collapses to 1s.
        assert_eq!(scaled_table(&LUMA_TABLE, 50)[0], 16.0);
        assert!(scaled_table(&LUMA_TABLE, 100).iter().all(|&q| q == 1.0));
        // QF 25 doubles (scale 200).
        assert_eq!(scaled_table(&LUMA_TABLE, 25)[1], 22.0);
        // Clamped at 255 for tiny QF.
        assert_eq!(scaled_table(&CHROMA_TABLE, 1)[63], 255.0);
    }

    #[test]
    fn decreasing_quality_never_raises_psnr() {
        let img = natural_image(32, 32);
        let mut last = f64::NEG_INFINITY;
        for qf in [95u8, 80, 65, 50, 35, 20, 10, 5] {
            let err = mse(&jpeg_compress(&img, qf).unwrap(), &img);
            assert!(
                err + 1e-12 >= last,
                "MSE dropped from {last} to {err} at QF {qf}"
            );
            last = err;
        }
    }

    #[test]
    fn output_stays_in_range_and_on_lattice() {
        let mut rng = derive_rng(70, "attacksim.jpeg");
        let mut img = Image::zeros((24, 24, 3));
        img.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        let out = jpeg_compress(&img, 30).unwrap();
        for &v in out.iter() {
            assert!((-1.0..=1.0).contains(&v));
            let byte = (v + 1.0) * 0.5 * 255.0;
            assert!((byte - byte.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn non_multiple_of_eight_sizes_round_trip() {
        let img = natural_image(13, 21);
        let out = jpeg_compress(&img, 75).unwrap();
        assert_eq!(out.dim(), (13, 21, 3));
        assert!(mse(&out, &img) < 0.01);
    }
}
