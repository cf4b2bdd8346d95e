//! Parameter generators: the shallow nets F_s and F_b that map a fingerprint
//! to the scale and bias of a personalized normalization layer.
//!
//! Channel-wise nets are a four-layer MLP d_w -> 512 -> 512 -> 512 -> c with
//! ReLU after every layer. Element-wise nets project to an 8x8x32 map and
//! grow it to the target (p, q, c) through 3x3 convolution stages with
//! nearest-neighbour 2x upsampling in between, again ReLU throughout. The
//! trailing ReLU means every generated scale and bias is nonnegative.
//!
//! Targets smaller than 8x8 skip the upsampling stages: the projection maps
//! straight to (p, q, 32) and a single 3x3 stage produces the c channels.

use crate::config::PnMode;
use crate::error::{Error, Result};
use crate::fingerprint::Fingerprint;
use crate::nn::{
    he_std, relu, relu_backward, upsample_nearest_2x, upsample_nearest_2x_backward, Conv2d,
    Linear, ParamRef, Params,
};
use crate::pn::PnParameters;
use crate::rng::Rng;
use ndarray::{Array2, Array4, Axis};

const CW_HIDDEN: [usize; 3] = [512, 512, 512];
const EW_SEED_CHANNELS: usize = 32;
const EW_WIDE_CHANNELS: usize = 64;

/// Scale of the last layer's weight noise relative to a unit pre-activation;
/// keeps the initial outputs close to the head bias.
const HEAD_GAIN: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct ParamGenNet {
    mode: PnMode,
    d_w: usize,
    target: (usize, usize, usize),
    hidden: Vec<usize>,
    seed_hw: (usize, usize),
    fcs: Vec<Linear>,
    ups_before: Vec<bool>,
    convs: Vec<Conv2d>,
}

/// Everything the backward pass needs from a cached forward.
pub struct ParamGenTape {
    fc_in: Vec<Array2<f64>>,
    fc_pre: Vec<Array2<f64>>,
    conv_in: Vec<Array4<f64>>,
    conv_pre: Vec<Array4<f64>>,
}

impl ParamGenNet {
    /// Table II left column: d_w -> 512 -> 512 -> 512 -> c.
    pub fn channel_wise(rng: &mut Rng, d_w: usize, c: usize, head_bias: f64) -> Result<Self> {
        Self::channel_wise_custom(rng, d_w, c, &CW_HIDDEN, head_bias)
    }

    /// Channel-wise net with explicit hidden widths (tests use tiny ones).
    pub fn channel_wise_custom(
        rng: &mut Rng,
        d_w: usize,
        c: usize,
        hidden: &[usize],
        head_bias: f64,
    ) -> Result<Self> {
        if d_w == 0 || c == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidArgument(
                "paramgen dimensions must be positive".into(),
            ));
        }
        let mut fcs = Vec::new();
        let mut prev = d_w;
        for &h in hidden {
            fcs.push(Linear::new(rng, prev, h, he_std(prev), 0.0));
            prev = h;
        }
        fcs.push(Linear::new(
            rng,
            prev,
            c,
            HEAD_GAIN / (prev as f64).sqrt(),
            head_bias,
        ));
        Ok(ParamGenNet {
            mode: PnMode::ChannelWise,
            d_w,
            target: (1, 1, c),
            hidden: hidden.to_vec(),
            seed_hw: (1, 1),
            fcs,
            ups_before: Vec::new(),
            convs: Vec::new(),
        })
    }

    /// Table II right column generalized to any power-of-two square target:
    /// project to (min(p,8), min(q,8), 32), upsample-and-convolve up to
    /// (p, q), widen to 64 channels on the last upsampling stage, and finish
    /// with a 3x3 stage onto c channels.
    pub fn element_wise(
        rng: &mut Rng,
        d_w: usize,
        target: (usize, usize, usize),
        head_bias: f64,
    ) -> Result<Self> {
        let (p, q, c) = target;
        if d_w == 0 || c == 0 {
            return Err(Error::InvalidArgument(
                "paramgen dimensions must be positive".into(),
            ));
        }
        if !(p.is_power_of_two() && q.is_power_of_two()) {
            return Err(Error::Config(format!(
                "element-wise target {p}x{q} must have power-of-two sides"
            )));
        }
        let seed_hw = (p.min(8), q.min(8));
        let (su, sv) = (p / seed_hw.0, q / seed_hw.1);
        if su != sv {
            return Err(Error::Config(format!(
                "element-wise target {p}x{q} needs unequal upsampling, unsupported"
            )));
        }
        let n_up = su.trailing_zeros() as usize;

        let fc_out = seed_hw.0 * seed_hw.1 * EW_SEED_CHANNELS;
        let fcs = vec![Linear::new(rng, d_w, fc_out, he_std(d_w), 0.0)];

        let mut convs = Vec::new();
        let mut ups_before = Vec::new();
        let mut prev = EW_SEED_CHANNELS;
        for i in 0..n_up {
            let cout = if i + 1 == n_up {
                EW_WIDE_CHANNELS
            } else {
                EW_SEED_CHANNELS
            };
            ups_before.push(true);
            convs.push(Conv2d::new(rng, 3, prev, cout, 1, 1, he_std(9 * prev)));
            prev = cout;
        }
        ups_before.push(false);
        convs.push(Conv2d::new(
            rng,
            3,
            prev,
            c,
            1,
            1,
            HEAD_GAIN / ((9 * prev) as f64).sqrt(),
        ));
        if let Some(head) = convs.last_mut() {
            head.b.value.fill(head_bias);
        }
        Ok(ParamGenNet {
            mode: PnMode::ElementWise,
            d_w,
            target,
            hidden: Vec::new(),
            seed_hw,
            fcs,
            ups_before,
            convs,
        })
    }

    pub fn mode(&self) -> PnMode {
        self.mode
    }

    pub fn d_w(&self) -> usize {
        self.d_w
    }

    /// (p, q, c); channel-wise reports (1, 1, c).
    pub fn target(&self) -> (usize, usize, usize) {
        self.target
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.hidden
    }

    fn check_bits(&self, bits: &Array2<f64>) -> Result<()> {
        if bits.ncols() != self.d_w {
            return Err(Error::Shape(format!(
                "fingerprint width {} does not match net input width {}",
                bits.ncols(),
                self.d_w
            )));
        }
        Ok(())
    }

    /// Forward over a batch of fingerprints laid out as 0/1 rows.
    /// Output storage shape is (b, 1, 1, c) channel-wise, (b, p, q, c)
    /// element-wise.
    pub fn forward_batch(&self, bits: &Array2<f64>) -> Result<Array4<f64>> {
        Ok(self.forward_tape(bits)?.0)
    }

    /// Forward that also returns the tape consumed by [`Self::backward`].
    pub fn forward_tape(&self, bits: &Array2<f64>) -> Result<(Array4<f64>, ParamGenTape)> {
        self.check_bits(bits)?;
        let b = bits.nrows();
        let mut tape = ParamGenTape {
            fc_in: Vec::new(),
            fc_pre: Vec::new(),
            conv_in: Vec::new(),
            conv_pre: Vec::new(),
        };
        let mut h = bits.clone();
        for fc in &self.fcs {
            tape.fc_in.push(h.clone());
            let pre = fc.forward(&h);
            tape.fc_pre.push(pre.clone());
            h = relu(&pre);
        }
        if self.mode == PnMode::ChannelWise {
            let c = self.target.2;
            return Ok((h.into_shape_with_order((b, 1, 1, c)).unwrap(), tape));
        }
        let mut x = h
            .into_shape_with_order((b, self.seed_hw.0, self.seed_hw.1, EW_SEED_CHANNELS))
            .unwrap();
        for (conv, &up) in self.convs.iter().zip(&self.ups_before) {
            if up {
                x = upsample_nearest_2x(&x);
            }
            tape.conv_in.push(x.clone());
            let pre = conv.forward(&x);
            tape.conv_pre.push(pre.clone());
            x = relu(&pre);
        }
        Ok((x, tape))
    }

    /// Accumulates parameter gradients given the output gradient. The
    /// fingerprint is data, so no input gradient is produced.
    pub fn backward(&mut self, tape: &ParamGenTape, gout: &Array4<f64>) {
        let b = gout.dim().0;
        let mut g2 = if self.mode == PnMode::ChannelWise {
            gout
                .to_shape((b, self.target.2))
                .expect("standard layout")
                .to_owned()
        } else {
            let mut g4 = gout.clone();
            for i in (0..self.convs.len()).rev() {
                g4 = relu_backward(&tape.conv_pre[i], &g4);
                g4 = self.convs[i].backward(&tape.conv_in[i], &g4);
                if self.ups_before[i] {
                    g4 = upsample_nearest_2x_backward(&g4);
                }
            }
            let n = self.seed_hw.0 * self.seed_hw.1 * EW_SEED_CHANNELS;
            g4.into_shape_with_order((b, n)).unwrap()
        };
        for i in (0..self.fcs.len()).rev() {
            g2 = relu_backward(&tape.fc_pre[i], &g2);
            g2 = self.fcs[i].backward(&tape.fc_in[i], &g2);
        }
    }
}

impl Params for ParamGenNet {
    fn visit(&mut self, f: &mut dyn FnMut(ParamRef<'_>)) {
        for fc in &mut self.fcs {
            fc.visit(f);
        }
        for conv in &mut self.convs {
            conv.visit(f);
        }
    }
}

/// Lays fingerprints out as a (batch, d_w) matrix of 0/1 reals.
pub fn fingerprints_to_rows(ws: &[Fingerprint]) -> Result<Array2<f64>> {
    if ws.is_empty() {
        return Err(Error::InvalidArgument("empty fingerprint batch".into()));
    }
    let d_w = ws[0].len();
    if ws.iter().any(|w| w.len() != d_w) {
        return Err(Error::Shape("fingerprints of mixed lengths".into()));
    }
    let mut rows = Array2::zeros((ws.len(), d_w));
    for (i, w) in ws.iter().enumerate() {
        for (j, &bit) in w.bits().iter().enumerate() {
            rows[[i, j]] = bit as f64;
        }
    }
    Ok(rows)
}

/// One half of the PN parameters (the gamma from F_s, or the beta from F_b).
pub fn param_gen_forward(net: &ParamGenNet, w: &Fingerprint) -> Result<Array4<f64>> {
    let out = net.forward_batch(&fingerprints_to_rows(std::slice::from_ref(w))?)?;
    Ok(out)
}

/// Runs both nets on one fingerprint and assembles the PN parameters.
pub fn generate_pn_parameters(
    f_s: &ParamGenNet,
    f_b: &ParamGenNet,
    w: &Fingerprint,
) -> Result<PnParameters> {
    if f_s.mode() != f_b.mode() || f_s.target() != f_b.target() || f_s.d_w() != f_b.d_w() {
        return Err(Error::Config(
            "scale and bias nets disagree on mode, target, or input width".into(),
        ));
    }
    let gamma = param_gen_forward(f_s, w)?;
    let beta = param_gen_forward(f_b, w)?;
    let g3 = gamma.index_axis(Axis(0), 0).to_owned();
    let b3 = beta.index_axis(Axis(0), 0).to_owned();
    match f_s.mode() {
        PnMode::ChannelWise => {
            let c = f_s.target().2;
            PnParameters::channel_wise(
                g3.into_shape_with_order(c).unwrap(),
                b3.into_shape_with_order(c).unwrap(),
            )
        }
        PnMode::ElementWise => PnParameters::element_wise(g3, b3),
    }
}
