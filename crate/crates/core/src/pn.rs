//! The personalized normalization layer: an affine feature-map transform
//! F' = gamma ∘ F + beta whose parameters come from a fingerprint, not from
//! learned per-model weights.
//!
//! No statistics are computed; this is affine modulation only.

use crate::config::PnMode;
use crate::error::{Error, Result};
use crate::tensor::FeatureTensor;
use ndarray::{Array1, Array3, Array4, Axis};

/// One user's normalization parameters for a single insertion point.
///
/// Channel-wise: gamma and beta are length-c vectors shared across the
/// spatial grid. Element-wise: full (p, q, c) tensors applied entrywise.
#[derive(Debug, Clone, PartialEq)]
pub enum PnParameters {
    ChannelWise { gamma: Array1<f64>, beta: Array1<f64> },
    ElementWise { gamma: Array3<f64>, beta: Array3<f64> },
}

impl PnParameters {
    pub fn channel_wise(gamma: Array1<f64>, beta: Array1<f64>) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(Error::Shape(format!(
                "gamma length {} != beta length {}",
                gamma.len(),
                beta.len()
            )));
        }
        Ok(PnParameters::ChannelWise { gamma, beta })
    }

    pub fn element_wise(gamma: Array3<f64>, beta: Array3<f64>) -> Result<Self> {
        if gamma.dim() != beta.dim() {
            return Err(Error::Shape(format!(
                "gamma shape {:?} != beta shape {:?}",
                gamma.dim(),
                beta.dim()
            )));
        }
        Ok(PnParameters::ElementWise { gamma, beta })
    }

    /// Channel-wise identity: gamma = 1, beta = 0.
    pub fn identity(c: usize) -> Self {
        PnParameters::ChannelWise {
            gamma: Array1::ones(c),
            beta: Array1::zeros(c),
        }
    }

    pub fn mode(&self) -> PnMode {
        match self {
            PnParameters::ChannelWise { .. } => PnMode::ChannelWise,
            PnParameters::ElementWise { .. } => PnMode::ElementWise,
        }
    }

    /// Broadcasts channel-wise parameters to a full (p, q, c) element-wise
    /// pair; element-wise parameters are returned as-is.
    pub fn broadcast_to(&self, p: usize, q: usize) -> Result<PnParameters> {
        match self {
            PnParameters::ChannelWise { gamma, beta } => {
                let c = gamma.len();
                let g = Array3::from_shape_fn((p, q, c), |(_, _, k)| gamma[k]);
                let b = Array3::from_shape_fn((p, q, c), |(_, _, k)| beta[k]);
                PnParameters::element_wise(g, b)
            }
            PnParameters::ElementWise { gamma, .. } => {
                if gamma.dim().0 != p || gamma.dim().1 != q {
                    return Err(Error::Shape(format!(
                        "element-wise parameters are {:?}, not {p}x{q}",
                        gamma.dim()
                    )));
                }
                Ok(self.clone())
            }
        }
    }
}

fn check_shapes(f: (usize, usize, usize), params: &PnParameters) -> Result<()> {
    match params {
        PnParameters::ChannelWise { gamma, .. } => {
            if gamma.len() != f.2 {
                return Err(Error::Shape(format!(
                    "feature has {} channels but parameters have {}",
                    f.2,
                    gamma.len()
                )));
            }
        }
        PnParameters::ElementWise { gamma, .. } => {
            if gamma.dim() != f {
                return Err(Error::Shape(format!(
                    "feature shape {f:?} but parameters {:?}",
                    gamma.dim()
                )));
            }
        }
    }
    Ok(())
}

/// F'_{ijk} = gamma_k F_{ijk} + beta_k (channel-wise) or
/// F' = gamma ∘ F + beta (element-wise).
pub fn pn_apply(f: &FeatureTensor, params: &PnParameters) -> Result<FeatureTensor> {
    check_shapes(f.shape(), params)?;
    let out = match params {
        PnParameters::ChannelWise { gamma, beta } => f.data() * gamma + beta,
        PnParameters::ElementWise { gamma, beta } => f.data() * gamma + beta,
    };
    FeatureTensor::new(out)
}

/// Gradients of `pn_apply` under an upstream gradient dL/dF'.
///
/// `features` is dL/dF; `params` carries dL/dgamma and dL/dbeta in the
/// gamma/beta slots, shaped exactly like the parameters they correspond to.
#[derive(Debug, Clone)]
pub struct PnGradients {
    pub features: Array3<f64>,
    pub params: PnParameters,
}

pub fn pn_layer_gradients(
    f: &FeatureTensor,
    params: &PnParameters,
    upstream: &Array3<f64>,
) -> Result<PnGradients> {
    if upstream.dim() != f.shape() {
        return Err(Error::Shape(format!(
            "upstream gradient shape {:?} != feature shape {:?}",
            upstream.dim(),
            f.shape()
        )));
    }
    check_shapes(f.shape(), params)?;
    let x = f.data();
    Ok(match params {
        PnParameters::ChannelWise { gamma, .. } => {
            let gx = upstream * gamma;
            let prod = upstream * x;
            let ggamma = prod.sum_axis(Axis(0)).sum_axis(Axis(0));
            let gbeta = upstream.sum_axis(Axis(0)).sum_axis(Axis(0));
            PnGradients {
                features: gx,
                params: PnParameters::ChannelWise { gamma: ggamma, beta: gbeta },
            }
        }
        PnParameters::ElementWise { gamma, .. } => PnGradients {
            features: upstream * gamma,
            params: PnParameters::ElementWise {
                gamma: upstream * x,
                beta: upstream.clone(),
            },
        },
    })
}

/// Per-sample normalization parameters for a whole batch, as produced by the
/// parameter generators. Channel-wise batches store (b, 1, 1, c) and
/// broadcast over the spatial grid; element-wise batches store the full
/// (b, p, q, c).
#[derive(Debug, Clone)]
pub struct PnBatch {
    pub mode: PnMode,
    pub gamma: Array4<f64>,
    pub beta: Array4<f64>,
}

impl PnBatch {
    pub fn new(mode: PnMode, gamma: Array4<f64>, beta: Array4<f64>) -> Result<Self> {
        if gamma.dim() != beta.dim() {
            return Err(Error::Shape(format!(
                "gamma shape {:?} != beta shape {:?}",
                gamma.dim(),
                beta.dim()
            )));
        }
        if mode == PnMode::ChannelWise && (gamma.dim().1 != 1 || gamma.dim().2 != 1) {
            return Err(Error::Shape(format!(
                "channel-wise batch must be (b, 1, 1, c), got {:?}",
                gamma.dim()
            )));
        }
        Ok(PnBatch { mode, gamma, beta })
    }

    pub fn batch_len(&self) -> usize {
        self.gamma.dim().0
    }

    /// Extracts one sample's parameters.
    pub fn sample(&self, i: usize) -> PnParameters {
        let g = self.gamma.index_axis(Axis(0), i).to_owned();
        let b = self.beta.index_axis(Axis(0), i).to_owned();
        match self.mode {
            PnMode::ChannelWise => PnParameters::ChannelWise {
                gamma: g.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned(),
                beta: b.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned(),
            },
            PnMode::ElementWise => PnParameters::ElementWise { gamma: g, beta: b },
        }
    }

    fn check_features(&self, x: (usize, usize, usize, usize)) -> Result<()> {
        let g = self.gamma.dim();
        let ok = match self.mode {
            PnMode::ChannelWise => g.0 == x.0 && g.3 == x.3,
            PnMode::ElementWise => g == x,
        };
        if !ok {
            return Err(Error::Shape(format!(
                "feature batch {x:?} incompatible with {:?} parameters {g:?}",
                self.mode
            )));
        }
        Ok(())
    }
}

/// Batched `pn_apply` with per-sample parameters.
pub fn pn_apply_batch(x: &Array4<f64>, p: &PnBatch) -> Result<Array4<f64>> {
    p.check_features(x.dim())?;
    Ok(x * &p.gamma + &p.beta)
}

/// Batched backward pass. Returns (dL/dx, dL/dgamma, dL/dbeta); the
/// parameter gradients have the batch's storage shape.
pub fn pn_backward_batch(
    x: &Array4<f64>,
    p: &PnBatch,
    gy: &Array4<f64>,
) -> Result<(Array4<f64>, Array4<f64>, Array4<f64>)> {
    p.check_features(x.dim())?;
    if gy.dim() != x.dim() {
        return Err(Error::Shape(format!(
            "upstream gradient shape {:?} != feature shape {:?}",
            gy.dim(),
            x.dim()
        )));
    }
    let gx = gy * &p.gamma;
    match p.mode {
        PnMode::ChannelWise => {
            let (b, _, _, c) = x.dim();
            let prod = gy * x;
            let ggamma = prod
                .sum_axis(Axis(1))
                .sum_axis(Axis(1))
                .into_shape_with_order((b, 1, 1, c))
                .unwrap();
            let gbeta = gy
                .sum_axis(Axis(1))
                .sum_axis(Axis(1))
                .into_shape_with_order((b, 1, 1, c))
                .unwrap();
            Ok((gx, ggamma, gbeta))
        }
        PnMode::ElementWise => Ok((gx, gy * x, gy.clone())),
    }
}
