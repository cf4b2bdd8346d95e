//! Feature-map and image tensor conventions.
//!
//! All spatial data is height x width x channels (`[h, w, c]`), f64. Batched
//! internals add a leading batch axis (`[b, h, w, c]`). Images are `c == 3`
//! with values in `[-1, 1]`.

use crate::error::{Error, Result};
use ndarray::{Array3, Array4, Axis};

/// A single feature map of shape `(height, width, channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    data: Array3<f64>,
}

impl FeatureTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature tensor contains a non-finite entry".into()));
        }
        Ok(FeatureTensor { data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureTensor { data: Array3::zeros((height, width, channels)) }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.data.dim();
        (s.0, s.1, s.2)
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.data
    }
}

/// An image tensor `[h, w, 3]` expected to lie in `[-1, 1]`.
pub type Image = Array3<f64>;

/// Batched images `[b, h, w, 3]`.
pub type ImageBatch = Array4<f64>;

/// Map `[-1, 1]` to 8-bit RGB, rounding to nearest.
pub fn image_to_u8(img: &Image) -> Vec<u8> {
    img.iter().map(|&v| (((v + 1.0) * 0.5 * 255.0).round()).clamp(0.0, 255.0) as u8).collect()
}

/// Map 8-bit RGB back to `[-1, 1]`.
pub fn image_from_u8(bytes: &[u8], h: usize, w: usize) -> Result<Image> {
    if bytes.len() != h * w * 3 {
        return Err(Error::Shape(format!(
            "byte buffer of {} does not match {h}x{w}x3 image",
            bytes.len()
        )));
    }
    let vals: Vec<f64> = bytes.iter().map(|&b| b as f64 / 255.0 * 2.0 - 1.0).collect();
    Array3::from_shape_vec((h, w, 3), vals)
        .map_err(|e| Error::Shape(e.to_string()))
}

/// Stack single images into a batch. All shapes must agree.
pub fn stack_images(images: &[Image]) -> Result<ImageBatch> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("cannot stack an empty image list".into()));
    }
    let (h, w, c) = images[0].dim();
    let mut out = Array4::zeros((images.len(), h, w, c));
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (h, w, c) {
            return Err(Error::Shape("images in a batch must share one shape".into()));
        }
        out.index_axis_mut(Axis(0), i).assign(img);
    }
    Ok(out)
}

/// Split a batch back into single images.
pub fn unstack_images(batch: &ImageBatch) -> Vec<Image> {
    (0..batch.dim().0).map(|i| batch.index_axis(Axis(0), i).to_owned()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_finite_is_rejected() {
        let mut a = Array3::zeros((2, 2, 1));
        a[[0, 0, 0]] = f64::NAN;
        assert!(FeatureTensor::new(a).is_err());
    }

    #[test]
    fn u8_round_trip_is_stable() {
        // Once on the 8-bit grid, converting again is the identity.
        let img = Array3::from_shape_fn((4, 4, 3), |(i, j, k)| {
            ((i * 16 + j * 4 + k) as f64 / 47.0) * 2.0 - 1.0
        });
        let bytes = image_to_u8(&img);
        let back = image_from_u8(&bytes, 4, 4).unwrap();
        let bytes2 = image_to_u8(&back);
        assert_eq!(bytes, bytes2);
    }
}
