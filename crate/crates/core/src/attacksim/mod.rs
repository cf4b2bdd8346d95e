//! Image-level processing layer: JPEG round-trip, Gaussian blur, additive
//! Gaussian noise, and their stochastic composition. The same ops serve as
//! the train-time robustness layer and as evaluation attacks.
//!
//! Gradient contract for the training path: JPEG (8-bit rounding and
//! coefficient quantization) is straight-through; blur backpropagates its
//! exact adjoint; noise passes gradients wherever clipping did not saturate.

mod blur;
mod jpeg;
mod noise;

pub use blur::{blur_adjoint, blur_with_kernel, gaussian_blur, gaussian_kernel};
pub use jpeg::jpeg_compress;
pub use noise::{gaussian_noise, gaussian_noise_masked};

use crate::config::AttackLayerConfig;
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Image;
use rand::Rng as _;

/// One processing applied by [`stochastic_preprocess_traced`], with what the
/// backward pass needs.
#[derive(Debug, Clone)]
pub enum AppliedAttack {
    /// Straight-through in backward.
    Jpeg { quality_factor: u8 },
    /// Taps of the separable kernel; empty means the drawn size was 0 or 1.
    Blur { taps: Vec<f64> },
    /// Pass mask from clipping.
    Noise { std: f64, mask: Image },
}

/// Record of which processings hit one image, in application order.
#[derive(Debug, Clone, Default)]
pub struct AttackTrace {
    pub steps: Vec<AppliedAttack>,
}

impl AttackTrace {
    /// Pull a gradient at the processed image back to the clean image.
    pub fn backward(&self, gy: &Image) -> Image {
        let mut g = gy.clone();
        for step in self.steps.iter().rev() {
            match step {
                AppliedAttack::Jpeg { .. } => {}
                AppliedAttack::Blur { taps } => {
                    if taps.len() > 1 {
                        g = blur_adjoint(&g, taps);
                    }
                }
                AppliedAttack::Noise { mask, .. } => {
                    g *= mask;
                }
            }
        }
        g
    }
}

/// Apply each processing independently with `cfg.probability`, parameters
/// drawn uniformly from the configured ranges, in the order
/// JPEG -> blur -> noise. Returns the processed image and the trace.
pub fn stochastic_preprocess_traced(
    image: &Image,
    rng: &mut Rng,
    cfg: &AttackLayerConfig,
) -> Result<(Image, AttackTrace)> {
    cfg.validate()?;
    let mut out = image.clone();
    let mut trace = AttackTrace::default();

    if rng.gen_bool(cfg.probability) {
        let qf = rng.gen_range(cfg.jpeg_qf_min..=cfg.jpeg_qf_max);
        out = jpeg_compress(&out, qf)?;
        trace.steps.push(AppliedAttack::Jpeg { quality_factor: qf });
    }
    if rng.gen_bool(cfg.probability) {
        // Even draws round up to the next odd size; 0 and 1 are identity.
        let mut k = rng.gen_range(cfg.blur_kernel_min..=cfg.blur_kernel_max) as usize;
        if k % 2 == 0 && k > 0 {
            k += 1;
        }
        let taps = if k <= 1 { Vec::new() } else { gaussian_kernel(k)? };
        if !taps.is_empty() {
            out = blur_with_kernel(&out, &taps);
        }
        trace.steps.push(AppliedAttack::Blur { taps });
    }
    if rng.gen_bool(cfg.probability) {
        let std = rng.gen_range(cfg.noise_std_min..=cfg.noise_std_max);
        let (noisy, mask) = gaussian_noise_masked(&out, std, rng)?;
        out = noisy;
        trace.steps.push(AppliedAttack::Noise { std, mask });
    }
    Ok((out, trace))
}

/// [`stochastic_preprocess_traced`] without the trace.
pub fn stochastic_preprocess(
    image: &Image,
    rng: &mut Rng,
    cfg: &AttackLayerConfig,
) -> Result<Image> {
    stochastic_preprocess_traced(image, rng, cfg).map(|(img, _)| img)
}
