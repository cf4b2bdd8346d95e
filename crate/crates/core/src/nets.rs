//! The three networks: generator backbone with pluggable normalization
//! insertion points, discriminator, and watermark decoder.
//!
//! The generator is a DCGAN-style up-convolutional stack. Stage 0 projects
//! the latent vector to a 4x4 map; every later stage doubles the spatial
//! size with nearest-neighbour upsampling followed by a 3x3 convolution.
//! Within a stage the order is conv -> personalized normalization (when the
//! stage is an active insertion point) -> ReLU. A final 3x3 convolution and
//! tanh produce the image in [-1, 1].

use crate::config::{PnMode, PnPosition, TrainingConfig};
use crate::error::{Error, Result};
use crate::latent::LatentVector;
use crate::nn::{
    he_std, leaky_relu, leaky_relu_backward, relu, relu_backward, tanh_backward, tanh_forward,
    upsample_nearest_2x, upsample_nearest_2x_backward, xavier_std, Conv2d, Linear, ParamRef,
    Params,
};
use crate::pn::{pn_apply_batch, pn_backward_batch, PnBatch, PnParameters};
use crate::rng::derive_rng;
use crate::tensor::Image;
use ndarray::{Array1, Array2, Array4, Axis};

const LEAK: f64 = 0.2;

/// One normalization insertion point: the generator stage it follows and the
/// feature shape produced there.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PnPoint {
    pub stage: usize,
    pub shape: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct GeneratorBackbone {
    d_z: usize,
    image_size: usize,
    position: PnPosition,
    stage_shapes: Vec<(usize, usize, usize)>,
    fc: Linear,
    blocks: Vec<Conv2d>,
    head: Conv2d,
}

/// Activations a generator forward keeps around for the backward pass.
pub struct GenTape {
    z: Array2<f64>,
    stage_pre_pn: Vec<Array4<f64>>,
    stage_pre_act: Vec<Array4<f64>>,
    conv_in: Vec<Array4<f64>>,
    head_in: Array4<f64>,
    image: Array4<f64>,
}

/// Per-insertion-point normalization gradients from a generator backward
/// pass, in the same order as [`GeneratorBackbone::active_points`].
pub struct PnGradBatch {
    pub gamma: Array4<f64>,
    pub beta: Array4<f64>,
}

impl GeneratorBackbone {
    fn channel_plan(image_size: usize, base: usize) -> Vec<(usize, usize, usize)> {
        let n_up = (image_size / 4).trailing_zeros() as usize;
        (0..=n_up)
            .map(|s| {
                let side = 4 << s;
                let mult = (1usize << (n_up - s)).min(4);
                (side, side, base * mult)
            })
            .collect()
    }

    pub fn new(config: &TrainingConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = derive_rng(config.seed, "init.generator");
        let shapes = Self::channel_plan(config.image_size, config.base_channels);
        let c0 = shapes[0].2;
        let fc = Linear::new(&mut rng, config.latent_dim, 4 * 4 * c0, he_std(config.latent_dim), 0.0);
        let mut blocks = Vec::new();
        for s in 1..shapes.len() {
            let cin = shapes[s - 1].2;
            let cout = shapes[s].2;
            blocks.push(Conv2d::new(&mut rng, 3, cin, cout, 1, 1, he_std(9 * cin)));
        }
        let c_last = shapes.last().unwrap().2;
        let head = Conv2d::new(&mut rng, 3, c_last, 3, 1, 1, xavier_std(9 * c_last, 3));
        Ok(GeneratorBackbone {
            d_z: config.latent_dim,
            image_size: config.image_size,
            position: config.pn_position,
            stage_shapes: shapes,
            fc,
            blocks,
            head,
        })
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn position(&self) -> PnPosition {
        self.position
    }

    pub fn n_stages(&self) -> usize {
        self.stage_shapes.len()
    }

    /// The stages where normalization is applied under this backbone's
    /// position setting, with their feature shapes.
    pub fn active_points(&self) -> Vec<PnPoint> {
        let last = self.stage_shapes.len() - 1;
        let stages: Vec<usize> = match self.position {
            PnPosition::Input => vec![0],
            PnPosition::Mid => vec![self.stage_shapes.len() / 2],
            PnPosition::Output => vec![last],
            PnPosition::All => (0..=last).collect(),
        };
        stages
            .into_iter()
            .map(|s| PnPoint { stage: s, shape: self.stage_shapes[s] })
            .collect()
    }

    fn pn_for_stage<'a>(&self, pn: &'a [PnBatch], stage: usize) -> Option<(usize, &'a PnBatch)> {
        self.active_points()
            .iter()
            .position(|p| p.stage == stage)
            .map(|i| (i, &pn[i]))
    }

    fn check_pn(&self, pn: &[PnBatch]) -> Result<()> {
        let points = self.active_points();
        if pn.len() != points.len() {
            return Err(Error::Config(format!(
                "backbone expects normalization parameters for {} points, got {}",
                points.len(),
                pn.len()
            )));
        }
        Ok(())
    }

    /// z rows (b, d_z) -> images (b, s, s, 3), with per-sample normalization
    /// parameters for every active insertion point.
    pub fn forward_batch(&self, z: &Array2<f64>, pn: &[PnBatch]) -> Result<Array4<f64>> {
        Ok(self.forward_tape(z, pn)?.0)
    }

    pub fn forward_tape(&self, z: &Array2<f64>, pn: &[PnBatch]) -> Result<(Array4<f64>, GenTape)> {
        if z.ncols() != self.d_z {
            return Err(Error::Shape(format!(
                "latent width {} does not match d_z {}",
                z.ncols(),
                self.d_z
            )));
        }
        self.check_pn(pn)?;
        let b = z.nrows();
        let mut tape = GenTape {
            z: z.clone(),
            stage_pre_pn: Vec::new(),
            stage_pre_act: Vec::new(),
            conv_in: Vec::new(),
            head_in: Array4::zeros((0, 0, 0, 0)),
            image: Array4::zeros((0, 0, 0, 0)),
        };
        let c0 = self.stage_shapes[0].2;
        let mut x = self
            .fc
            .forward(z)
            .into_shape_with_order((b, 4, 4, c0))
            .unwrap();
        for stage in 0..self.stage_shapes.len() {
            if stage > 0 {
                let up = upsample_nearest_2x(&x);
                tape.conv_in.push(up.clone());
                x = self.blocks[stage - 1].forward(&up);
            }
            tape.stage_pre_pn.push(x.clone());
            if let Some((_, batch)) = self.pn_for_stage(pn, stage) {
                x = pn_apply_batch(&x, batch)?;
            }
            tape.stage_pre_act.push(x.clone());
            x = relu(&x);
        }
        tape.head_in = x.clone();
        let pre = self.head.forward(&x);
        let img = tanh_forward(&pre);
        tape.image = img.clone();
        Ok((img, tape))
    }

    /// Backward pass. Accumulates backbone gradients and returns the
    /// normalization-parameter gradients per active point (for routing into
    /// the parameter generators). The latent input is data; its gradient is
    /// discarded.
    pub fn backward_tape(
        &mut self,
        tape: &GenTape,
        pn: &[PnBatch],
        gy_image: &Array4<f64>,
    ) -> Result<Vec<PnGradBatch>> {
        self.check_pn(pn)?;
        let points = self.active_points();
        let mut pn_grads: Vec<Option<PnGradBatch>> = points.iter().map(|_| None).collect();

        let g_pre = tanh_backward(&tape.image, gy_image);
        let mut g = self.head.backward(&tape.head_in, &g_pre);
        for stage in (0..self.stage_shapes.len()).rev() {
            g = relu_backward(&tape.stage_pre_act[stage], &g);
            if let Some((idx, batch)) = self.pn_for_stage(pn, stage) {
                let (gx, ggamma, gbeta) =
                    pn_backward_batch(&tape.stage_pre_pn[stage], batch, &g)?;
                g = gx;
                pn_grads[idx] = Some(PnGradBatch { gamma: ggamma, beta: gbeta });
            }
            if stage > 0 {
                g = self.blocks[stage - 1].backward(&tape.conv_in[stage - 1], &g);
                g = upsample_nearest_2x_backward(&g);
            } else {
                let b = g.dim().0;
                let flat = g
                    .to_shape((b, 4 * 4 * self.stage_shapes[0].2))
                    .expect("standard layout")
                    .to_owned();
                self.fc.backward(&tape.z, &flat);
            }
        }
        Ok(pn_grads.into_iter().map(|g| g.unwrap()).collect())
    }

    /// Forward with no normalization anywhere; identical to applying the
    /// identity transform at every point.
    pub fn forward_plain(&self, z: &Array2<f64>) -> Result<Array4<f64>> {
        let identity: Vec<PnBatch> = self
            .active_points()
            .iter()
            .map(|p| {
                let b = z.nrows();
                let c = p.shape.2;
                PnBatch::new(
                    PnMode::ChannelWise,
                    Array4::ones((b, 1, 1, c)),
                    Array4::zeros((b, 1, 1, c)),
                )
                .unwrap()
            })
            .collect();
        self.forward_batch(z, &identity)
    }
}

impl Params for GeneratorBackbone {
    fn visit(&mut self, f: &mut dyn FnMut(ParamRef<'_>)) {
        self.fc.visit(f);
        for b in &mut self.blocks {
            b.visit(f);
        }
        self.head.visit(f);
    }
}

/// Builds a one-sample [`PnBatch`] from single-instance parameters.
pub fn pn_batch_from_parameters(params: &PnParameters) -> PnBatch {
    match params {
        PnParameters::ChannelWise { gamma, beta } => {
            let c = gamma.len();
            PnBatch::new(
                PnMode::ChannelWise,
                gamma.clone().into_shape_with_order((1, 1, 1, c)).unwrap(),
                beta.clone().into_shape_with_order((1, 1, 1, c)).unwrap(),
            )
            .unwrap()
        }
        PnParameters::ElementWise { gamma, beta } => {
            let (p, q, c) = gamma.dim();
            PnBatch::new(
                PnMode::ElementWise,
                gamma.clone().into_shape_with_order((1, p, q, c)).unwrap(),
                beta.clone().into_shape_with_order((1, p, q, c)).unwrap(),
            )
            .unwrap()
        }
    }
}

/// Single-sample generation: one latent vector, one set of baked
/// normalization parameters per active point.
pub fn generator_forward(
    backbone: &GeneratorBackbone,
    pn_params: &[PnParameters],
    z: &LatentVector,
) -> Result<Image> {
    let rows = crate::latent::latents_to_rows(std::slice::from_ref(z))?;
    let batches: Vec<PnBatch> = pn_params.iter().map(pn_batch_from_parameters).collect();
    let img = backbone.forward_batch(&rows, &batches)?;
    Ok(img.index_axis(Axis(0), 0).to_owned())
}

/// Shared down-convolutional trunk for the discriminator and decoder.
#[derive(Debug, Clone)]
struct ConvTrunk {
    convs: Vec<Conv2d>,
    image_size: usize,
}

struct TrunkTape {
    conv_in: Vec<Array4<f64>>,
    conv_pre: Vec<Array4<f64>>,
    flat: Array2<f64>,
}

impl ConvTrunk {
    fn new(rng: &mut crate::rng::Rng, image_size: usize, base: usize) -> Self {
        let n_down = (image_size / 4).trailing_zeros() as usize;
        let mut convs = Vec::new();
        let mut cin = 3;
        for i in 0..n_down {
            let cout = base * (1usize << i).min(4);
            convs.push(Conv2d::new(rng, 3, cin, cout, 2, 1, he_std(9 * cin)));
            cin = cout;
        }
        ConvTrunk { convs, image_size }
    }

    fn out_features(&self) -> usize {
        4 * 4 * self.convs.last().map(|c| c.cout).unwrap_or(3)
    }

    fn check_images(&self, images: &Array4<f64>) -> Result<()> {
        let (_, h, w, c) = images.dim();
        if h != self.image_size || w != self.image_size || c != 3 {
            return Err(Error::Shape(format!(
                "expected {0}x{0}x3 images, got {h}x{w}x{c}",
                self.image_size
            )));
        }
        Ok(())
    }

    fn forward_tape(&self, images: &Array4<f64>) -> Result<(Array2<f64>, TrunkTape)> {
        self.check_images(images)?;
        let b = images.dim().0;
        let mut tape = TrunkTape {
            conv_in: Vec::new(),
            conv_pre: Vec::new(),
            flat: Array2::zeros((0, 0)),
        };
        let mut x = images.clone();
        for conv in &self.convs {
            tape.conv_in.push(x.clone());
            let pre = conv.forward(&x);
            tape.conv_pre.push(pre.clone());
            x = leaky_relu(&pre, LEAK);
        }
        let flat = x
            .to_shape((b, self.out_features()))
            .expect("standard layout")
            .to_owned();
        tape.flat = flat.clone();
        Ok((flat, tape))
    }

    /// Returns the gradient w.r.t. the input images.
    fn backward_tape(&mut self, tape: &TrunkTape, g_flat: &Array2<f64>) -> Array4<f64> {
        let b = g_flat.nrows();
        let last = self.convs.last().unwrap();
        let side = 4;
        let mut g = g_flat
            .to_shape((b, side, side, last.cout))
            .expect("standard layout")
            .to_owned();
        for i in (0..self.convs.len()).rev() {
            g = leaky_relu_backward(&tape.conv_pre[i], &g, LEAK);
            g = self.convs[i].backward(&tape.conv_in[i], &g);
        }
        g
    }
}

impl Params for ConvTrunk {
    fn visit(&mut self, f: &mut dyn FnMut(ParamRef<'_>)) {
        for c in &mut self.convs {
            c.visit(f);
        }
    }
}

/// Real/fake critic; outputs one pre-sigmoid score per image.
#[derive(Debug, Clone)]
pub struct Discriminator {
    trunk: ConvTrunk,
    fc: Linear,
}

pub struct DiscTape {
    trunk: TrunkTape,
}

impl Discriminator {
    pub fn new(config: &TrainingConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = derive_rng(config.seed, "init.discriminator");
        let trunk = ConvTrunk::new(&mut rng, config.image_size, config.base_channels);
        let nf = trunk.out_features();
        let fc = Linear::new(&mut rng, nf, 1, xavier_std(nf, 1), 0.0);
        Ok(Discriminator { trunk, fc })
    }

    pub fn forward_batch(&self, images: &Array4<f64>) -> Result<Array1<f64>> {
        Ok(self.forward_tape(images)?.0)
    }

    pub fn forward_tape(&self, images: &Array4<f64>) -> Result<(Array1<f64>, DiscTape)> {
        let (flat, trunk) = self.trunk.forward_tape(images)?;
        let scores = self.fc.forward(&flat);
        Ok((
            scores.index_axis(Axis(1), 0).to_owned(),
            DiscTape { trunk },
        ))
    }

    /// Accumulates discriminator gradients and returns the gradient w.r.t.
    /// the input images.
    pub fn backward_tape(&mut self, tape: &DiscTape, g_scores: &Array1<f64>) -> Array4<f64> {
        let b = g_scores.len();
        let g2 = g_scores
            .clone()
            .into_shape_with_order((b, 1))
            .unwrap();
        let g_flat = self.fc.backward(&tape.trunk.flat, &g2);
        self.trunk.backward_tape(&tape.trunk, &g_flat)
    }
}

impl Params for Discriminator {
    fn visit(&mut self, f: &mut dyn FnMut(ParamRef<'_>)) {
        self.trunk.visit(f);
        self.fc.visit(f);
    }
}

/// Box-free watermark reader: image -> d_w bit logits followed by a d_z
/// latent estimate.
#[derive(Debug, Clone)]
pub struct WatermarkDecoder {
    trunk: ConvTrunk,
    fc: Linear,
    d_w: usize,
    d_z: usize,
}

pub struct DecoderTape {
    trunk: TrunkTape,
}

impl WatermarkDecoder {
    pub fn new(config: &TrainingConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = derive_rng(config.seed, "init.decoder");
        let trunk = ConvTrunk::new(&mut rng, config.image_size, config.base_channels);
        let nf = trunk.out_features();
        let out = config.fingerprint_bits + config.latent_dim;
        let fc = Linear::new(&mut rng, nf, out, xavier_std(nf, out), 0.0);
        Ok(WatermarkDecoder {
            trunk,
            fc,
            d_w: config.fingerprint_bits,
            d_z: config.latent_dim,
        })
    }

    pub fn d_w(&self) -> usize {
        self.d_w
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn image_size(&self) -> usize {
        self.trunk.image_size
    }

    /// (b, s, s, 3) -> (b, d_w + d_z): bit logits then the z estimate.
    pub fn forward_batch(&self, images: &Array4<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_tape(images)?.0)
    }

    pub fn forward_tape(&self, images: &Array4<f64>) -> Result<(Array2<f64>, DecoderTape)> {
        let (flat, trunk) = self.trunk.forward_tape(images)?;
        Ok((self.fc.forward(&flat), DecoderTape { trunk }))
    }

    pub fn backward_tape(&mut self, tape: &DecoderTape, g_out: &Array2<f64>) -> Array4<f64> {
        let g_flat = self.fc.backward(&tape.trunk.flat, g_out);
        self.trunk.backward_tape(&tape.trunk, &g_flat)
    }

    /// Single-image forward, shape-checked.
    pub fn forward_one(&self, image: &Image) -> Result<Array1<f64>> {
        let (h, w, c) = image.dim();
        let batch = image
            .clone()
            .into_shape_with_order((1, h, w, c))
            .unwrap();
        let out = self.forward_batch(&batch)?;
        Ok(out.index_axis(Axis(0), 0).to_owned())
    }
}

impl Params for WatermarkDecoder {
    fn visit(&mut self, f: &mut dyn FnMut(ParamRef<'_>)) {
        self.trunk.visit(f);
        self.fc.visit(f);
    }
}

/// Builds the three mutually consistent networks for a config. All
/// initialization derives from `config.seed`, so the same config always
/// produces the same networks.
pub fn build_backbone(
    config: &TrainingConfig,
) -> Result<(GeneratorBackbone, Discriminator, WatermarkDecoder)> {
    let g = GeneratorBackbone::new(config)?;
    let d = Discriminator::new(config)?;
    let dec = WatermarkDecoder::new(config)?;
    Ok((g, d, dec))
}
