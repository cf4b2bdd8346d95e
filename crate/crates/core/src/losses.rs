//! Training objectives: adversarial losses for both players, watermark
//! bit cross-entropy, latent reconstruction, cross-fingerprint consistency,
//! and their weighted combination.
//!
//! Scores and bit predictions stay in the logit domain throughout; nothing
//! here evaluates log(sigmoid(x)) naively.

use crate::error::{Error, Result};
use crate::fingerprint::Fingerprint;
use crate::nn::{sigmoid, softplus};
use crate::tensor::Image;
use ndarray::{Array1, Array2, Array4};

/// Per-step objective values. `l_total` is the combination the generator
/// side actually descends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_g_adv: f64,
    pub l_d_adv: f64,
    pub l_wm: f64,
    pub l_z: f64,
    pub l_const: f64,
    pub l_total: f64,
}

/// Weights on the four generator-side terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub adv: f64,
    pub wm: f64,
    pub z_rec: f64,
    pub consistency: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &crate::config::TrainingConfig) -> Self {
        LossWeights {
            adv: cfg.lambda_adv,
            wm: cfg.lambda_wm,
            z_rec: cfg.lambda_z,
            consistency: cfg.lambda_const,
        }
    }

    /// Attack mode: adversarial term only.
    pub fn adversarial_only() -> Self {
        LossWeights { adv: 1.0, wm: 0.0, z_rec: 0.0, consistency: 0.0 }
    }
}

fn nonempty(name: &str, len: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::InvalidArgument(format!("{name}: empty batch")));
    }
    Ok(())
}

/// Negated discriminator objective: the discriminator maximizes
/// mean[log sigma(real)] + mean[log(1 - sigma(fake))], so minimizing this
/// value trains it. Scores are pre-sigmoid.
pub fn d_adversarial_loss(real_scores: &Array1<f64>, fake_scores: &Array1<f64>) -> Result<f64> {
    nonempty("d_adversarial_loss(real)", real_scores.len())?;
    nonempty("d_adversarial_loss(fake)", fake_scores.len())?;
    // log sigma(x) = -softplus(-x); log(1 - sigma(x)) = -softplus(x)
    let real = real_scores.iter().map(|&r| -softplus(-r)).sum::<f64>() / real_scores.len() as f64;
    let fake = fake_scores.iter().map(|&f| -softplus(f)).sum::<f64>() / fake_scores.len() as f64;
    Ok(-(real + fake))
}

/// Gradients of [`d_adversarial_loss`] w.r.t. both score batches.
pub fn d_adversarial_grads(
    real_scores: &Array1<f64>,
    fake_scores: &Array1<f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    nonempty("d_adversarial_grads(real)", real_scores.len())?;
    nonempty("d_adversarial_grads(fake)", fake_scores.len())?;
    let nr = real_scores.len() as f64;
    let nf = fake_scores.len() as f64;
    Ok((
        real_scores.mapv(|r| (sigmoid(r) - 1.0) / nr),
        fake_scores.mapv(|f| sigmoid(f) / nf),
    ))
}

/// Saturating generator objective: mean[log(1 - sigma(fake))]. The generator
/// minimizes this directly.
pub fn g_adversarial_loss(fake_scores: &Array1<f64>) -> Result<f64> {
    nonempty("g_adversarial_loss", fake_scores.len())?;
    Ok(fake_scores.iter().map(|&f| -softplus(f)).sum::<f64>() / fake_scores.len() as f64)
}

pub fn g_adversarial_grad(fake_scores: &Array1<f64>) -> Result<Array1<f64>> {
    nonempty("g_adversarial_grad", fake_scores.len())?;
    let n = fake_scores.len() as f64;
    Ok(fake_scores.mapv(|f| -sigmoid(f) / n))
}

fn bce_logit(logit: f64, bit: f64) -> f64 {
    softplus(logit) - bit * logit
}

/// Per-bit binary cross-entropy between decoder logits and the fingerprint,
/// summed over bits (one sample).
pub fn watermark_loss(logits: &[f64], w: &Fingerprint) -> Result<f64> {
    if logits.len() != w.len() {
        return Err(Error::Shape(format!(
            "{} logits for a {}-bit fingerprint",
            logits.len(),
            w.len()
        )));
    }
    Ok(logits
        .iter()
        .zip(w.bits())
        .map(|(&l, &b)| bce_logit(l, b as f64))
        .sum())
}

/// Batch mean of per-sample bit-sum cross-entropies.
pub fn watermark_loss_batch(logits: &Array2<f64>, ws: &[Fingerprint]) -> Result<f64> {
    nonempty("watermark_loss_batch", ws.len())?;
    if logits.nrows() != ws.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} fingerprints",
            logits.nrows(),
            ws.len()
        )));
    }
    let mut total = 0.0;
    for (row, w) in logits.outer_iter().zip(ws) {
        total += watermark_loss(row.as_slice().expect("standard layout"), w)?;
    }
    Ok(total / ws.len() as f64)
}

/// Gradient of [`watermark_loss_batch`] w.r.t. the logits.
pub fn watermark_grad_batch(logits: &Array2<f64>, ws: &[Fingerprint]) -> Result<Array2<f64>> {
    nonempty("watermark_grad_batch", ws.len())?;
    if logits.nrows() != ws.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} fingerprints",
            logits.nrows(),
            ws.len()
        )));
    }
    let n = ws.len() as f64;
    let mut g = logits.mapv(sigmoid);
    for (mut row, w) in g.outer_iter_mut().zip(ws) {
        if row.len() != w.len() {
            return Err(Error::Shape(format!(
                "{} logits for a {}-bit fingerprint",
                row.len(),
                w.len()
            )));
        }
        for (v, &b) in row.iter_mut().zip(w.bits()) {
            *v = (*v - b as f64) / n;
        }
    }
    Ok(g)
}

/// Squared L2 distance between a latent vector and its estimate, summed over
/// components (one sample).
pub fn z_reconstruction_loss(z: &[f64], z_hat: &[f64]) -> Result<f64> {
    if z.len() != z_hat.len() {
        return Err(Error::Shape(format!(
            "latent length {} vs estimate length {}",
            z.len(),
            z_hat.len()
        )));
    }
    Ok(z.iter().zip(z_hat).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Batch mean of per-sample squared L2 reconstruction errors.
pub fn z_reconstruction_loss_batch(z: &Array2<f64>, z_hat: &Array2<f64>) -> Result<f64> {
    nonempty("z_reconstruction_loss_batch", z.nrows())?;
    if z.dim() != z_hat.dim() {
        return Err(Error::Shape(format!(
            "latent batch {:?} vs estimate batch {:?}",
            z.dim(),
            z_hat.dim()
        )));
    }
    let diff = z_hat - z;
    Ok(diff.mapv(|v| v * v).sum() / z.nrows() as f64)
}

/// Gradient of [`z_reconstruction_loss_batch`] w.r.t. the estimate.
pub fn z_reconstruction_grad_batch(z: &Array2<f64>, z_hat: &Array2<f64>) -> Result<Array2<f64>> {
    nonempty("z_reconstruction_grad_batch", z.nrows())?;
    if z.dim() != z_hat.dim() {
        return Err(Error::Shape(format!(
            "latent batch {:?} vs estimate batch {:?}",
            z.dim(),
            z_hat.dim()
        )));
    }
    Ok((z_hat - z) * (2.0 / z.nrows() as f64))
}

/// Squared L2 distance between two images (one sample).
pub fn consistency_loss(img1: &Image, img2: &Image) -> Result<f64> {
    if img1.dim() != img2.dim() {
        return Err(Error::Shape(format!(
            "image shapes {:?} vs {:?}",
            img1.dim(),
            img2.dim()
        )));
    }
    Ok((img1 - img2).mapv(|v| v * v).sum())
}

/// Batch mean of per-sample squared L2 distances between paired images.
pub fn consistency_loss_batch(a: &Array4<f64>, b: &Array4<f64>) -> Result<f64> {
    nonempty("consistency_loss_batch", a.dim().0)?;
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "image batches {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok((a - b).mapv(|v| v * v).sum() / a.dim().0 as f64)
}

/// Gradients of [`consistency_loss_batch`] w.r.t. both image batches (the
/// second is the negation of the first).
pub fn consistency_grad_batch(
    a: &Array4<f64>,
    b: &Array4<f64>,
) -> Result<(Array4<f64>, Array4<f64>)> {
    nonempty("consistency_grad_batch", a.dim().0)?;
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "image batches {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let ga = (a - b) * (2.0 / a.dim().0 as f64);
    let gb = -&ga;
    Ok((ga, gb))
}

/// Weighted combination of the generator-side terms. `l_d_adv` and `l_total`
/// in `parts` are ignored; the returned value is the fresh combination.
pub fn total_generator_loss(parts: &LossBreakdown, weights: &LossWeights) -> Result<f64> {
    for (name, v) in [
        ("l_g_adv", parts.l_g_adv),
        ("l_wm", parts.l_wm),
        ("l_z", parts.l_z),
        ("l_const", parts.l_const),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(weights.adv * parts.l_g_adv
        + weights.wm * parts.l_wm
        + weights.z_rec * parts.l_z
        + weights.consistency * parts.l_const)
}
