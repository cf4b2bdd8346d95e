//! Additive Gaussian noise with clipping, plus the clip mask needed for the
//! exact training-path gradient.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Image;
use rand_distr::{Distribution, Normal};

/// Add iid zero-mean Gaussian noise and clip to `[-1, 1]`. Also returns the
/// pass mask: 1 where the pre-clip value stayed in range, 0 where clipping
/// saturated it.
pub fn gaussian_noise_masked(image: &Image, std: f64, rng: &mut Rng) -> Result<(Image, Image)> {
    if !(std >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise std {std} is negative")));
    }
    if std == 0.0 {
        return Ok((image.clone(), Image::ones(image.raw_dim())));
    }
    let normal = Normal::new(0.0, std).expect("validated std");
    let mut out = image.clone();
    let mut mask = Image::ones(image.raw_dim());
    for (v, m) in out.iter_mut().zip(mask.iter_mut()) {
        let pre = *v + normal.sample(rng);
        if pre.abs() > 1.0 {
            *m = 0.0;
        }
        *v = pre.clamp(-1.0, 1.0);
    }
    Ok((out, mask))
}

/// Add iid zero-mean Gaussian noise of the given std, clipped to `[-1, 1]`.
pub fn gaussian_noise(image: &Image, std: f64, rng: &mut Rng) -> Result<Image> {
    gaussian_noise_masked(image, std, rng).map(|(img, _)| img)
}
