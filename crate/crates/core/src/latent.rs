//! Latent noise vectors fed to the generator.

use crate::error::{Error, Result};
use rand_distr::{Distribution, StandardNormal};

/// A generator input sample. Drawn i.i.d. standard normal per component.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector {
    values: Vec<f64>,
}

impl LatentVector {
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("latent vector must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent vector contains a non-finite value".into()));
        }
        Ok(LatentVector { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Sample a latent vector of dimension `dim` from the standard normal prior.
/// Lays latent vectors out as a (batch, d_z) matrix.
pub fn latents_to_rows(zs: &[LatentVector]) -> Result<ndarray::Array2<f64>> {
    if zs.is_empty() {
        return Err(Error::InvalidArgument("empty latent batch".into()));
    }
    let d = zs[0].len();
    if zs.iter().any(|z| z.len() != d) {
        return Err(Error::Shape("latent vectors of mixed lengths".into()));
    }
    let mut rows = ndarray::Array2::zeros((zs.len(), d));
    for (i, z) in zs.iter().enumerate() {
        for (j, &v) in z.values().iter().enumerate() {
            rows[[i, j]] = v;
        }
    }
    Ok(rows)
}

pub fn sample_latent(rng: &mut impl rand::Rng, dim: usize) -> Result<LatentVector> {
    if dim == 0 {
        return Err(Error::InvalidArgument("latent dimension must be >= 1".into()));
    }
    let values = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    LatentVector::from_values(values)
}
