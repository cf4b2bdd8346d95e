//! Model-level removal attacks and the collusion attack. All attacks are
//! run from the attacker's seat: they hold a distributed instance (backbone
//! plus baked PN parameters) but never the owner's parameter nets, decoder,
//! or trained discriminator.

use crate::config::PnMode;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::issuance::{repeat_pn, GeneratorInstance};
use crate::losses;
use crate::nets::Discriminator;
use crate::nn::{export_weights, sample_normal, snap_f32, Adam, ParamRef, Params};
use crate::pn::PnParameters;
use crate::rng::derive_rng;
use ndarray::{Array1, Array3, Axis};
use rand::Rng as _;

/// One insertion point's PN parameters flattened into plain trainable
/// buffers, so optimizers and pruning can treat them like any other weights.
struct PnSlot {
    mode: PnMode,
    dims: (usize, usize, usize),
    gamma: Vec<f64>,
    beta: Vec<f64>,
    g_gamma: Vec<f64>,
    g_beta: Vec<f64>,
}

impl PnSlot {
    fn from_params(params: &PnParameters) -> Self {
        let (mode, dims, gamma, beta) = match params {
            PnParameters::ChannelWise { gamma, beta } => (
                PnMode::ChannelWise,
                (1, 1, gamma.len()),
                gamma.to_vec(),
                beta.to_vec(),
            ),
            PnParameters::ElementWise { gamma, beta } => (
                PnMode::ElementWise,
                gamma.dim(),
                gamma.iter().cloned().collect(),
                beta.iter().cloned().collect(),
            ),
        };
        let n = gamma.len();
        PnSlot { mode, dims, gamma, beta, g_gamma: vec![0.0; n], g_beta: vec![0.0; n] }
    }

    fn to_params(&self) -> PnParameters {
        match self.mode {
            PnMode::ChannelWise => PnParameters::ChannelWise {
                gamma: Array1::from_vec(self.gamma.clone()),
                beta: Array1::from_vec(self.beta.clone()),
            },
            PnMode::ElementWise => PnParameters::ElementWise {
                gamma: Array3::from_shape_vec(self.dims, self.gamma.clone())
                    .expect("slot dims match buffer"),
                beta: Array3::from_shape_vec(self.dims, self.beta.clone())
                    .expect("slot dims match buffer"),
            },
        }
    }
}

/// Everything an attacker can touch, as one parameter collection: the
/// backbone weights followed by each point's gamma then beta.
struct AttackNet {
    backbone: crate::nets::GeneratorBackbone,
    slots: Vec<PnSlot>,
}

impl AttackNet {
    fn from_instance(inst: &GeneratorInstance) -> Self {
        AttackNet {
            backbone: inst.backbone.clone(),
            slots: inst.pn.iter().map(PnSlot::from_params).collect(),
        }
    }

    fn into_instance(self, origin: &GeneratorInstance) -> GeneratorInstance {
        GeneratorInstance {
            config: origin.config.clone(),
            backbone: self.backbone,
            fingerprint: origin.fingerprint.clone(),
            pn: self.slots.iter().map(PnSlot::to_params).collect(),
            issued_at: origin.issued_at,
        }
    }
}

impl Params for AttackNet {
    fn visit(&mut self, f: &mut dyn FnMut(ParamRef<'_>)) {
        self.backbone.visit(f);
        for slot in &mut self.slots {
            let shape = vec![slot.dims.0, slot.dims.1, slot.dims.2];
            f(ParamRef { shape: shape.clone(), value: &mut slot.gamma, grad: &mut slot.g_gamma });
            f(ParamRef { shape, value: &mut slot.beta, grad: &mut slot.g_beta });
        }
    }
}

/// Zeroes the `floor(p * N)` parameters smallest in |value|; ties at equal
/// magnitude go to earlier parameters. Returns how many were zeroed.
fn prune_values(net: &mut dyn Params, p: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "prune fraction must be in [0, 1), got {p}"
        )));
    }
    let mut magnitudes: Vec<(f64, usize)> = Vec::new();
    net.visit(&mut |pr: ParamRef| {
        for &v in pr.value.iter() {
            magnitudes.push((v.abs(), magnitudes.len()));
        }
    });
    let k = (p * magnitudes.len() as f64).floor() as usize;
    if k == 0 {
        return Ok(0);
    }
    magnitudes.sort_by(|a, b| a.partial_cmp(b).expect("finite weights"));
    let mut zero = vec![false; magnitudes.len()];
    for &(_, idx) in &magnitudes[..k] {
        zero[idx] = true;
    }
    let mut cursor = 0usize;
    net.visit(&mut |pr: ParamRef| {
        for v in pr.value.iter_mut() {
            if zero[cursor] {
                *v = 0.0;
            }
            cursor += 1;
        }
    });
    Ok(k)
}

/// Magnitude pruning over the whole instance: backbone and PN parameters.
pub fn prune_attack(instance: &GeneratorInstance, p: f64) -> Result<GeneratorInstance> {
    let mut net = AttackNet::from_instance(instance);
    prune_values(&mut net, p)?;
    Ok(net.into_instance(instance))
}

fn round_tenths(v: f64) -> f64 {
    snap_f32((v * 10.0).round() / 10.0)
}

/// Rounds every parameter to one decimal place, half away from zero.
pub fn quantize_attack(instance: &GeneratorInstance) -> GeneratorInstance {
    let mut net = AttackNet::from_instance(instance);
    net.visit(&mut |pr: ParamRef| {
        for v in pr.value.iter_mut() {
            *v = round_tenths(*v);
        }
    });
    net.into_instance(instance)
}

fn backbone_bytes(instance: &GeneratorInstance) -> Vec<Vec<f32>> {
    export_weights(&mut instance.backbone.clone())
}

/// Convex combination `alpha1 * A + (1 - alpha1) * B` of two instances from
/// the same bundle. Only the PN parameters blend; the shared backbone must
/// already be byte-identical. The endpoints return the sources exactly. The
/// output keeps the fingerprint of whichever source dominates the mix.
pub fn collusion_attack(
    inst_a: &GeneratorInstance,
    inst_b: &GeneratorInstance,
    alpha1: f64,
) -> Result<GeneratorInstance> {
    if !(0.0..=1.0).contains(&alpha1) {
        return Err(Error::InvalidArgument(format!(
            "alpha1 must be in [0, 1], got {alpha1}"
        )));
    }
    if inst_a.config != inst_b.config {
        return Err(Error::InvalidArgument(
            "instances built from different configs cannot collude".into(),
        ));
    }
    if backbone_bytes(inst_a) != backbone_bytes(inst_b) {
        return Err(Error::InvalidArgument(
            "instances come from different bundles (backbone bytes differ)".into(),
        ));
    }
    if alpha1 == 1.0 {
        return Ok(inst_a.clone());
    }
    if alpha1 == 0.0 {
        return Ok(inst_b.clone());
    }
    let alpha2 = 1.0 - alpha1;
    let mix = |a: f64, b: f64| snap_f32(alpha1 * a + alpha2 * b);
    let pn = inst_a
        .pn
        .iter()
        .zip(&inst_b.pn)
        .map(|(pa, pb)| match (pa, pb) {
            (
                PnParameters::ChannelWise { gamma: ga, beta: ba },
                PnParameters::ChannelWise { gamma: gb, beta: bb },
            ) => PnParameters::ChannelWise {
                gamma: ndarray::Zip::from(ga).and(gb).map_collect(|&a, &b| mix(a, b)),
                beta: ndarray::Zip::from(ba).and(bb).map_collect(|&a, &b| mix(a, b)),
            },
            (
                PnParameters::ElementWise { gamma: ga, beta: ba },
                PnParameters::ElementWise { gamma: gb, beta: bb },
            ) => PnParameters::ElementWise {
                gamma: ndarray::Zip::from(ga).and(gb).map_collect(|&a, &b| mix(a, b)),
                beta: ndarray::Zip::from(ba).and(bb).map_collect(|&a, &b| mix(a, b)),
            },
            _ => unreachable!("same config implies same pn mode"),
        })
        .collect();
    Ok(GeneratorInstance {
        config: inst_a.config.clone(),
        backbone: inst_a.backbone.clone(),
        fingerprint: if alpha1 >= 0.5 {
            inst_a.fingerprint.clone()
        } else {
            inst_b.fingerprint.clone()
        },
        pn,
        issued_at: 0,
    })
}

/// A freshly initialized discriminator for the attacker's finetuning run,
/// independent of the owner's (which is never distributed).
pub fn attacker_discriminator(
    instance: &GeneratorInstance,
    seed: u64,
) -> Result<Discriminator> {
    let mut cfg = instance.config.clone();
    cfg.seed = seed;
    Discriminator::new(&cfg)
}

/// Continues plain adversarial training on an instance, watermark losses
/// dropped, with both backbone and PN parameters free to move.
pub fn finetune_attack(
    instance: &GeneratorInstance,
    attacker_disc: &mut Discriminator,
    dataset: &Dataset,
    iterations: u64,
    seed: u64,
) -> Result<GeneratorInstance> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset has no images".into()));
    }
    if dataset.image_size() != instance.config.image_size {
        return Err(Error::Shape(format!(
            "dataset images are {0}x{0}, instance wants {1}x{1}",
            dataset.image_size(),
            instance.config.image_size
        )));
    }
    let cfg = &instance.config;
    let batch = cfg.batch_size;
    let mut net = AttackNet::from_instance(instance);
    let mut adam_g = Adam::new(cfg.lr_gen);
    let mut adam_d = Adam::new(cfg.lr_disc);
    let mut rng = derive_rng(seed, "attack.finetune");

    for iter in 0..iterations {
        let indices: Vec<usize> =
            (0..batch).map(|_| rng.gen_range(0..dataset.len())).collect();
        let real = dataset.batch(&indices);
        let z = sample_normal(&mut rng, (batch, cfg.latent_dim), 1.0);
        let pn: Vec<_> = net
            .slots
            .iter()
            .map(|s| repeat_pn(&s.to_params(), batch))
            .collect::<Result<_>>()?;
        let (fake, tape) = net.backbone.forward_tape(&z, &pn)?;

        let (real_scores, real_tape) = attacker_disc.forward_tape(&real)?;
        let (fake_scores, fake_tape) = attacker_disc.forward_tape(&fake)?;
        let l_d = losses::d_adversarial_loss(&real_scores, &fake_scores)?;
        if !l_d.is_finite() {
            return Err(Error::NonFinite(format!(
                "finetune discriminator loss {l_d} at iteration {iter}"
            )));
        }
        let (g_real, g_fake) = losses::d_adversarial_grads(&real_scores, &fake_scores)?;
        attacker_disc.zero_grad();
        attacker_disc.backward_tape(&real_tape, &g_real);
        attacker_disc.backward_tape(&fake_tape, &g_fake);
        adam_d.step(attacker_disc);

        let (scores, disc_tape) = attacker_disc.forward_tape(&fake)?;
        let l_g = losses::g_adversarial_loss(&scores)?;
        if !l_g.is_finite() {
            return Err(Error::NonFinite(format!(
                "finetune generator loss {l_g} at iteration {iter}"
            )));
        }
        let g_scores = losses::g_adversarial_grad(&scores)?;
        attacker_disc.zero_grad();
        let gy = attacker_disc.backward_tape(&disc_tape, &g_scores);
        attacker_disc.zero_grad();

        net.zero_grad();
        let pn_grads = net.backbone.backward_tape(&tape, &pn, &gy)?;
        for (slot, g) in net.slots.iter_mut().zip(&pn_grads) {
            for (dst, src) in slot.g_gamma.iter_mut().zip(g.gamma.sum_axis(Axis(0)).iter()) {
                *dst += src;
            }
            for (dst, src) in slot.g_beta.iter_mut().zip(g.beta.sum_axis(Axis(0)).iter()) {
                *dst += src;
            }
        }
        adam_g.step(&mut net);
    }
    Ok(net.into_instance(instance))
}
