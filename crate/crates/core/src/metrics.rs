//! Image-quality and fingerprint-effectiveness metrics.
//!
//! FID is computed over features from a pluggable embedder. The built-in
//! [`RandomConvEmbedder`] is a small fixed-seed convolutional net whose
//! pooled penultimate activations stand in for the usual pretrained
//! embedding; absolute values are not comparable across embedders, relative
//! comparisons under a fixed embedder are.

use crate::error::{Error, Result};
use crate::fingerprint::{sample_fingerprint, Fingerprint};
use crate::issuance::GeneratorInstance;
use crate::nets::WatermarkDecoder;
use crate::nn::activations::leaky_relu;
use crate::nn::{he_std, sample_normal, Conv2d};
use crate::rng::{derive_rng, Rng};
use crate::tensor::Image;
use crate::training::TrainedBundle;
use ndarray::{s, Array1, Array2, Axis};

/// Maps one image to a feature vector. All images of a set must produce
/// vectors of one length.
pub trait Embedder {
    fn embed(&self, image: &Image) -> Result<Vec<f64>>;
}

/// Flattens pixels; features are the raw pixel values.
pub struct IdentityEmbedder;

impl Embedder for IdentityEmbedder {
    fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(image.iter().copied().collect())
    }
}

/// Fixed-seed random convolutional embedder: stride-2 3x3 convs with leaky
/// ReLU down to 4x4, then global average pooling.
pub struct RandomConvEmbedder {
    image_size: usize,
    convs: Vec<Conv2d>,
}

impl RandomConvEmbedder {
    pub fn new(image_size: usize, seed: u64) -> Result<Self> {
        if image_size < 8 || !image_size.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "embedder image size {image_size} must be a power of two >= 8"
            )));
        }
        let n_down = (image_size / 4).trailing_zeros() as usize;
        let mut rng = derive_rng(seed, "init.fid_embedder");
        let mut convs = Vec::with_capacity(n_down);
        let mut cin = 3;
        for i in 0..n_down {
            let cout = 16 * (1usize << i).min(4);
            convs.push(Conv2d::new(&mut rng, 3, cin, cout, 2, 1, he_std(9 * cin)));
            cin = cout;
        }
        Ok(RandomConvEmbedder { image_size, convs })
    }

    pub fn feature_dim(&self) -> usize {
        self.convs.last().map_or(3, |c| c.cout)
    }
}

impl Embedder for RandomConvEmbedder {
    fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        let (h, w, c) = image.dim();
        if (h, w, c) != (self.image_size, self.image_size, 3) {
            return Err(Error::Shape(format!(
                "embedder expects {s}x{s}x3 images, got {h}x{w}x{c}",
                s = self.image_size
            )));
        }
        let mut x = image
            .clone()
            .insert_axis(Axis(0))
            .into_dimensionality::<ndarray::Ix4>()
            .expect("rank 4");
        for conv in &self.convs {
            x = leaky_relu(&conv.forward(&x), 0.2);
        }
        // Global average pool over the spatial axes.
        let (_, fh, fw, fc) = x.dim();
        let mut out = vec![0.0; fc];
        for i in 0..fh {
            for j in 0..fw {
                for k in 0..fc {
                    out[k] += x[[0, i, j, k]];
                }
            }
        }
        let norm = (fh * fw) as f64;
        for v in &mut out {
            *v /= norm;
        }
        Ok(out)
    }
}

/// Embed every image; one feature row per image.
pub fn embed_features(images: &[Image], embedder: &dyn Embedder) -> Result<Array2<f64>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no images to embed".into()));
    }
    let first = embedder.embed(&images[0])?;
    let d = first.len();
    let mut out = Array2::zeros((images.len(), d));
    out.row_mut(0).assign(&Array1::from_vec(first));
    for (i, img) in images.iter().enumerate().skip(1) {
        let f = embedder.embed(img)?;
        if f.len() != d {
            return Err(Error::Shape(format!(
                "embedding length {} for image {i}, expected {d}",
                f.len()
            )));
        }
        out.row_mut(i).assign(&Array1::from_vec(f));
    }
    Ok(out)
}

/// Frobenius norm of the strict upper triangle.
fn off_diag_norm(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += a[[i, j]] * a[[i, j]];
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvector columns) with a = v * diag(l) * v^T.
fn sym_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = Array2::eye(n);
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for _ in 0..100 {
        if off_diag_norm(&m) <= 1e-13 * scale {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let tau = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    (m.diag().to_owned(), v)
}

/// Symmetric PSD square root via eigendecomposition, negative eigenvalues
/// clipped to zero.
fn sqrt_psd(a: &Array2<f64>) -> Array2<f64> {
    let (evals, v) = sym_eigen(a);
    let roots = evals.mapv(|l| l.max(0.0).sqrt());
    let scaled = &v * &roots;
    scaled.dot(&v.t())
}

fn mean_and_cov(x: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = x.nrows() as f64;
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let centered = x - &mean;
    let cov = centered.t().dot(&centered) / (n - 1.0);
    (mean, cov)
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// ||mu_r - mu_f||^2 + Tr(S_r + S_f - 2 (S_r S_f)^{1/2}).
pub fn fid(real_features: &Array2<f64>, fake_features: &Array2<f64>) -> Result<f64> {
    for (name, set) in [("real", real_features), ("fake", fake_features)] {
        if set.nrows() < 2 {
            return Err(Error::InvalidArgument(format!(
                "{name} feature set has {} vectors, need at least 2",
                set.nrows()
            )));
        }
    }
    if real_features.ncols() != fake_features.ncols() {
        return Err(Error::Shape(format!(
            "feature dimensions differ: {} vs {}",
            real_features.ncols(),
            fake_features.ncols()
        )));
    }

    let (mu_r, sig_r) = mean_and_cov(real_features);
    let (mu_f, sig_f) = mean_and_cov(fake_features);

    let mean_term = (&mu_r - &mu_f).mapv(|d| d * d).sum();
    let root_r = sqrt_psd(&sig_r);
    let inner = root_r.dot(&sig_f).dot(&root_r);
    let sym = (&inner + &inner.t()) * 0.5;
    let (evals, _) = sym_eigen(&sym);
    let tr_sqrt: f64 = evals.iter().map(|&l| l.max(0.0).sqrt()).sum();

    let d = mean_term + sig_r.diag().sum() + sig_f.diag().sum() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// FID straight from two image sets through one embedder.
pub fn fid_images(
    real: &[Image],
    fake: &[Image],
    embedder: &dyn Embedder,
) -> Result<f64> {
    fid(
        &embed_features(real, embedder)?,
        &embed_features(fake, embedder)?,
    )
}

const EVAL_BATCH: usize = 64;

/// Mean bit accuracy of decoder extraction over independent `(z, w)` draws,
/// each generated as `G_w(z)` by the bundle.
pub fn mean_bit_accuracy(
    bundle: &TrainedBundle,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    let d_w = bundle.d_w();
    let d_z = bundle.d_z();
    let mut matched = 0usize;
    let mut remaining = n_samples;
    while remaining > 0 {
        let b = remaining.min(EVAL_BATCH);
        let z = sample_normal(rng, (b, d_z), 1.0);
        let ws: Vec<Fingerprint> = (0..b)
            .map(|_| sample_fingerprint(rng, d_w))
            .collect::<Result<_>>()?;
        let images = bundle.generate_batch(&ws, &z)?;
        let out = bundle.decoder.forward_batch(&images)?;
        for (i, w) in ws.iter().enumerate() {
            let logits: Vec<f64> = out.slice(s![i, ..d_w]).to_vec();
            matched += Fingerprint::from_logits(&logits)?.matching_bits(w)?;
        }
        remaining -= b;
    }
    Ok(matched as f64 / (n_samples * d_w) as f64)
}

/// Mean bit accuracy of one instance's own fingerprint over fresh latents,
/// decoded by the given (owner-held) decoder.
pub fn instance_bit_accuracy(
    instance: &GeneratorInstance,
    decoder: &WatermarkDecoder,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    let d_w = instance.fingerprint.len();
    let d_z = instance.config.latent_dim;
    let mut matched = 0usize;
    let mut remaining = n_samples;
    while remaining > 0 {
        let b = remaining.min(EVAL_BATCH);
        let z = sample_normal(rng, (b, d_z), 1.0);
        let images = instance.generate_batch(&z)?;
        let out = decoder.forward_batch(&images)?;
        for i in 0..b {
            let logits: Vec<f64> = out.slice(s![i, ..d_w]).to_vec();
            matched += Fingerprint::from_logits(&logits)?.matching_bits(&instance.fingerprint)?;
        }
        remaining -= b;
    }
    Ok(matched as f64 / (n_samples * d_w) as f64)
}
