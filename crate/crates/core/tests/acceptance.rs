//! Acceptance gate for the fingerprinting pipeline. Runs nine checks, prints
//! exactly one PASS/FAIL line per criterion, and exits nonzero if any fail.
//!
//! `GANMARK_ACCEPT_SCALE=desk` (default) trains the full desk-scale models:
//! hours of CPU on first run. Because training is fully deterministic, every
//! trained artifact is memoized under `GANMARK_ACCEPT_CACHE` (default
//! `target/acceptance-cache`); a cache hit is byte-identical to retraining,
//! so later runs finish in minutes. `GANMARK_ACCEPT_SCALE=smoke` exercises
//! the same code paths on tiny models for quick plumbing checks; accuracy
//! criteria are expected to fail there.

use ganmark_core::dataset::{load_dataset, Dataset};
use ganmark_core::fingerprint::Fingerprint;
use ganmark_core::issuance::{
    self, bundle_id, issue_instance, load_bundle, load_instance, register_user, save_bundle,
    save_instance, GeneratorInstance, Registry,
};
use ganmark_core::latent::latents_to_rows;
use ganmark_core::losses::{
    consistency_grad_batch, consistency_loss_batch, d_adversarial_grads, d_adversarial_loss,
    g_adversarial_grad, g_adversarial_loss, watermark_grad_batch, watermark_loss_batch,
    z_reconstruction_grad_batch, z_reconstruction_loss_batch,
};
use ganmark_core::metrics::{fid_images, mean_bit_accuracy, RandomConvEmbedder};
use ganmark_core::modelattacks::{
    attacker_discriminator, collusion_attack, finetune_attack, prune_attack, quantize_attack,
};
use ganmark_core::nn::Params;
use ganmark_core::paramgen::fingerprints_to_rows;
use ganmark_core::pn::{pn_apply, pn_layer_gradients, PnBatch, PnParameters};
use ganmark_core::report::{render_tables, RunRecord};
use ganmark_core::rng::{derive_rng, Rng};
use ganmark_core::tensor::FeatureTensor;
use ganmark_core::training::{train, TrainOptions, TrainedBundle, TrainerState};
use ganmark_core::verify::{trace_user, Decision};
use ganmark_core::{
    sample_fingerprint, sample_latent, PnMode, PnPosition, TrainingConfig,
};
use ndarray::{Array1, Array2, Array3};
use rand::Rng as _;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

// ---------------------------------------------------------------------------
// scale and recipe

#[derive(Clone, Copy, PartialEq)]
enum Scale {
    Desk,
    Smoke,
}

struct Knobs {
    d_w: usize,
    d_z: usize,
    image_size: usize,
    base_channels: usize,
    batch_size: usize,
    epochs: usize,
    ew_epochs: usize,
    data: &'static str,
    eval_draws: usize,
    attack_draws: usize,
    finetune_iters: u64,
    position_finetune_iters: u64,
    collusion_pairs: usize,
    collusion_draws: usize,
    fp_trials: usize,
    progress: bool,
}

impl Knobs {
    fn get(scale: Scale) -> Knobs {
        match scale {
            Scale::Desk => Knobs {
                d_w: 32,
                d_z: 64,
                image_size: 32,
                base_channels: 16,
                batch_size: 32,
                epochs: 30,
                ew_epochs: 12,
                data: "synth:10000",
                eval_draws: 1000,
                attack_draws: 500,
                finetune_iters: 2000,
                position_finetune_iters: 300,
                collusion_pairs: 20,
                collusion_draws: 128,
                fp_trials: 10_000,
                progress: true,
            },
            Scale::Smoke => Knobs {
                d_w: 8,
                d_z: 8,
                image_size: 16,
                base_channels: 4,
                batch_size: 8,
                epochs: 2,
                ew_epochs: 2,
                data: "synth:32",
                eval_draws: 50,
                attack_draws: 20,
                finetune_iters: 5,
                position_finetune_iters: 3,
                collusion_pairs: 3,
                collusion_draws: 16,
                fp_trials: 500,
                progress: false,
            },
        }
    }

    /// The tuned desk training recipe. The loss weights depart from the
    /// all-ones default: at this model size the image-consistency term
    /// otherwise pins the fingerprint signal below what the decoder can
    /// bootstrap from, so the watermark term is weighted up and the
    /// consistency term down.
    fn config(&self) -> TrainingConfig {
        let mut cfg = TrainingConfig {
            fingerprint_bits: self.d_w,
            latent_dim: self.d_z,
            image_size: self.image_size,
            base_channels: self.base_channels,
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr_gen: 1e-3,
            lr_disc: 1e-3,
            lambda_adv: 1.0,
            lambda_wm: 10.0,
            lambda_z: 0.1,
            lambda_const: 0.1,
            seed: 11,
            ..TrainingConfig::default()
        };
        cfg.attack.probability = 0.0;
        cfg
    }
}

// ---------------------------------------------------------------------------
// artifact cache: pure memoization of deterministic training

fn cache_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os("GANMARK_ACCEPT_CACHE") {
        return PathBuf::from(dir);
    }
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../target/acceptance-cache")
}

fn artifacts_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance-artifacts")
}

fn config_hash(cfg: &TrainingConfig, data: &str, extra: &str) -> String {
    let mut h = Sha256::new();
    h.update(cfg.to_key_values().as_bytes());
    h.update(data.as_bytes());
    h.update(extra.as_bytes());
    let digest = h.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn cached_bundle(name: &str, cfg: &TrainingConfig, data: &str, progress: bool) -> TrainedBundle {
    let dir = cache_dir();
    std::fs::create_dir_all(&dir).expect("create cache dir");
    let path = dir.join(format!("{name}-{}.gmk", config_hash(cfg, data, "")));
    if path.exists() {
        match load_bundle(&path) {
            Ok(b) => return b,
            Err(e) => eprintln!("[acceptance] cache entry {} unreadable ({e}), retraining", path.display()),
        }
    }
    eprintln!(
        "[acceptance] training {name}: {} epochs x {} images, pn={}/{} ...",
        cfg.epochs,
        data,
        cfg.pn_mode,
        cfg.pn_position
    );
    let started = Instant::now();
    let dataset = load_dataset(data, cfg.image_size).expect("dataset");
    let options = TrainOptions {
        progress,
        ..TrainOptions::default()
    };
    let bundle = train(cfg, &dataset, &options).expect("training");
    save_bundle(&bundle, &path).expect("cache bundle");
    eprintln!(
        "[acceptance] {name} done in {:.1} min",
        started.elapsed().as_secs_f64() / 60.0
    );
    bundle
}

fn cached_finetune(
    name: &str,
    instance: &GeneratorInstance,
    data: &str,
    iters: u64,
    seed: u64,
) -> GeneratorInstance {
    let dir = cache_dir();
    std::fs::create_dir_all(&dir).expect("create cache dir");
    let extra = format!("finetune|{}|{iters}|{seed}", instance.fingerprint.to_hex());
    let path = dir.join(format!(
        "{name}-{}.gmk",
        config_hash(&instance.config, data, &extra)
    ));
    if path.exists() {
        match load_instance(&path) {
            Ok(i) => return i,
            Err(e) => eprintln!("[acceptance] cache entry {} unreadable ({e}), rerunning", path.display()),
        }
    }
    eprintln!("[acceptance] finetuning {name}: {iters} iterations ...");
    let started = Instant::now();
    let dataset = load_dataset(data, instance.config.image_size).expect("dataset");
    let mut disc = attacker_discriminator(instance, seed).expect("attacker disc");
    let attacked = finetune_attack(instance, &mut disc, &dataset, iters, seed).expect("finetune");
    save_instance(&attacked, &path).expect("cache instance");
    eprintln!(
        "[acceptance] {name} done in {:.1} min",
        started.elapsed().as_secs_f64() / 60.0
    );
    attacked
}

// ---------------------------------------------------------------------------
// shared evaluation helpers

/// Accuracy of decoding images from `make` against `w`, over `n` latent
/// draws.
fn decoded_accuracy(
    bundle_decoder: &ganmark_core::nets::WatermarkDecoder,
    w: &Fingerprint,
    n: usize,
    rng: &mut Rng,
    mut make: impl FnMut(&ganmark_core::LatentVector, &mut Rng) -> ganmark_core::Image,
) -> f64 {
    let d_z = bundle_decoder.d_z();
    let d_w = w.len();
    let mut matched = 0usize;
    for _ in 0..n {
        let z = sample_latent(rng, d_z).unwrap();
        let img = make(&z, rng);
        let logits = bundle_decoder.forward_one(&img).unwrap();
        let got = Fingerprint::from_logits(&logits.as_slice().unwrap()[..d_w]).unwrap();
        matched += got.matching_bits(w).unwrap();
    }
    matched as f64 / (n * d_w) as f64
}

/// Batched accuracy of a fixed instance against two reference fingerprints.
fn pair_accuracy(
    inst: &GeneratorInstance,
    decoder: &ganmark_core::nets::WatermarkDecoder,
    wa: &Fingerprint,
    wb: &Fingerprint,
    n: usize,
    rng: &mut Rng,
) -> (f64, f64) {
    let d_w = wa.len();
    let mut hit_a = 0usize;
    let mut hit_b = 0usize;
    let mut left = n;
    while left > 0 {
        let b = left.min(64);
        let zs: Vec<_> = (0..b)
            .map(|_| sample_latent(rng, inst.config.latent_dim).unwrap())
            .collect();
        let images = inst.generate_batch(&latents_to_rows(&zs).unwrap()).unwrap();
        let out = decoder.forward_batch(&images).unwrap();
        for row in out.rows() {
            let got = Fingerprint::from_logits(&row.as_slice().unwrap()[..d_w]).unwrap();
            hit_a += got.matching_bits(wa).unwrap();
            hit_b += got.matching_bits(wb).unwrap();
        }
        left -= b;
    }
    (
        hit_a as f64 / (n * d_w) as f64,
        hit_b as f64 / (n * d_w) as f64,
    )
}

fn bundle_fid(bundle: &TrainedBundle, dataset: &Dataset, n: usize, seed: u64) -> f64 {
    let mut rng = derive_rng(seed, "accept.fid");
    let n = n.min(dataset.len());
    let real: Vec<_> = (0..n).map(|i| dataset.get(i)).collect();
    let mut fakes = Vec::with_capacity(n);
    for _ in 0..n {
        let z = sample_latent(&mut rng, bundle.d_z()).unwrap();
        let w = sample_fingerprint(&mut rng, bundle.d_w()).unwrap();
        fakes.push(bundle.generate(&w, &z).unwrap());
    }
    let embedder = RandomConvEmbedder::new(bundle.config.image_size, 0).unwrap();
    fid_images(&real, &fakes, &embedder).unwrap()
}

/// Mean squared image-pair distance between differently fingerprinted
/// generations from the same z (the quantity the consistency loss controls).
fn mean_pair_distance(bundle: &TrainedBundle, n: usize, rng: &mut Rng) -> f64 {
    let mut total = 0.0;
    for _ in 0..n {
        let z = sample_latent(rng, bundle.d_z()).unwrap();
        let w1 = sample_fingerprint(rng, bundle.d_w()).unwrap();
        let w2 = sample_fingerprint(rng, bundle.d_w()).unwrap();
        let a = bundle.generate(&w1, &z).unwrap();
        let b = bundle.generate(&w2, &z).unwrap();
        total += (&a - &b).mapv(|d| d * d).sum();
    }
    total / n as f64
}

// ---------------------------------------------------------------------------
// criterion 1: oracle/gradient suite

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn grad_at(net: &mut dyn Params, k: usize) -> f64 {
    let mut i = 0usize;
    let mut out = 0.0;
    net.visit(&mut |p| {
        if k >= i && k < i + p.value.len() {
            out = p.grad[k - i];
        }
        i += p.value.len();
    });
    out
}

fn pn_gradient_check(mode: PnMode, rng: &mut Rng) -> f64 {
    let (h, w, c) = (4, 4, 3);
    let f_arr = Array3::from_shape_fn((h, w, c), |_| rng.gen_range(-1.0..1.0));
    let f = FeatureTensor::new(f_arr.clone()).unwrap();
    let upstream = Array3::from_shape_fn((h, w, c), |_| rng.gen_range(-1.0..1.0));
    let params = match mode {
        PnMode::ChannelWise => PnParameters::channel_wise(
            Array1::from_shape_fn(c, |_| rng.gen_range(0.5..1.5)),
            Array1::from_shape_fn(c, |_| rng.gen_range(-0.5..0.5)),
        )
        .unwrap(),
        PnMode::ElementWise => PnParameters::element_wise(
            Array3::from_shape_fn((h, w, c), |_| rng.gen_range(0.5..1.5)),
            Array3::from_shape_fn((h, w, c), |_| rng.gen_range(-0.5..0.5)),
        )
        .unwrap(),
    };
    let loss = |f: &Array3<f64>, p: &PnParameters| -> f64 {
        let out = pn_apply(&FeatureTensor::new(f.clone()).unwrap(), p).unwrap();
        (out.data() * &upstream).sum()
    };
    let grads = pn_layer_gradients(&f, &params, &upstream).unwrap();
    let step = 1e-6;
    let mut worst: f64 = 0.0;
    // feature gradient at a few positions
    for &(i, j, k) in &[(0usize, 0usize, 0usize), (1, 2, 1), (3, 3, 2)] {
        let mut up = f_arr.clone();
        up[[i, j, k]] += step;
        let mut down = f_arr.clone();
        down[[i, j, k]] -= step;
        let fd = (loss(&up, &params) - loss(&down, &params)) / (2.0 * step);
        worst = worst.max(rel_err(grads.features[[i, j, k]], fd));
    }
    // gamma/beta gradients at a few indices
    let perturb = |gi: usize, which: usize, delta: f64| -> PnParameters {
        match &params {
            PnParameters::ChannelWise { gamma, beta } => {
                let mut g = gamma.clone();
                let mut b = beta.clone();
                if which == 0 {
                    g[gi] += delta;
                } else {
                    b[gi] += delta;
                }
                PnParameters::channel_wise(g, b).unwrap()
            }
            PnParameters::ElementWise { gamma, beta } => {
                let mut g = gamma.clone();
                let mut b = beta.clone();
                let flat = if which == 0 {
                    g.as_slice_mut().unwrap()
                } else {
                    b.as_slice_mut().unwrap()
                };
                flat[gi] += delta;
                PnParameters::element_wise(g, b).unwrap()
            }
        }
    };
    let (ga, ba): (Vec<f64>, Vec<f64>) = match &grads.params {
        PnParameters::ChannelWise { gamma, beta } => {
            (gamma.to_vec(), beta.to_vec())
        }
        PnParameters::ElementWise { gamma, beta } => (
            gamma.as_slice().unwrap().to_vec(),
            beta.as_slice().unwrap().to_vec(),
        ),
    };
    for which in 0..2 {
        let analytic = if which == 0 { &ga } else { &ba };
        for &gi in &[0usize, analytic.len() / 2, analytic.len() - 1] {
            let fd = (loss(&f_arr, &perturb(gi, which, step))
                - loss(&f_arr, &perturb(gi, which, -step)))
                / (2.0 * step);
            worst = worst.max(rel_err(analytic[gi], fd));
        }
    }
    worst
}

fn loss_gradient_checks(rng: &mut Rng) -> f64 {
    let step = 1e-6;
    let mut worst: f64 = 0.0;
    let b = 3;

    // adversarial: D side over both score vectors, G side over fake scores
    let real = Array1::from_shape_fn(b, |_| rng.gen_range(-2.0..2.0));
    let fake = Array1::from_shape_fn(b, |_| rng.gen_range(-2.0..2.0));
    let (g_real, g_fake) = d_adversarial_grads(&real, &fake).unwrap();
    for i in 0..b {
        for (vec, grad, other, is_real) in [
            (&real, &g_real, &fake, true),
            (&fake, &g_fake, &real, false),
        ] {
            let mut up = vec.clone();
            up[i] += step;
            let mut down = vec.clone();
            down[i] -= step;
            let (lu, ld) = if is_real {
                (
                    d_adversarial_loss(&up, other).unwrap(),
                    d_adversarial_loss(&down, other).unwrap(),
                )
            } else {
                (
                    d_adversarial_loss(other, &up).unwrap(),
                    d_adversarial_loss(other, &down).unwrap(),
                )
            };
            worst = worst.max(rel_err(grad[i], (lu - ld) / (2.0 * step)));
        }
        let g = g_adversarial_grad(&fake).unwrap();
        let mut up = fake.clone();
        up[i] += step;
        let mut down = fake.clone();
        down[i] -= step;
        let fd = (g_adversarial_loss(&up).unwrap() - g_adversarial_loss(&down).unwrap())
            / (2.0 * step);
        worst = worst.max(rel_err(g[i], fd));
    }

    // watermark BCE over logits
    let d_w = 5;
    let ws: Vec<Fingerprint> = (0..b)
        .map(|_| sample_fingerprint(rng, d_w).unwrap())
        .collect();
    let logits = Array2::from_shape_fn((b, d_w), |_| rng.gen_range(-2.0..2.0));
    let g = watermark_grad_batch(&logits, &ws).unwrap();
    for &(i, j) in &[(0usize, 0usize), (1, 3), (2, 4)] {
        let mut up = logits.clone();
        up[[i, j]] += step;
        let mut down = logits.clone();
        down[[i, j]] -= step;
        let fd = (watermark_loss_batch(&up, &ws).unwrap()
            - watermark_loss_batch(&down, &ws).unwrap())
            / (2.0 * step);
        worst = worst.max(rel_err(g[[i, j]], fd));
    }

    // z reconstruction over z_hat
    let d_z = 4;
    let z = Array2::from_shape_fn((b, d_z), |_| rng.gen_range(-1.0..1.0));
    let z_hat = Array2::from_shape_fn((b, d_z), |_| rng.gen_range(-1.0..1.0));
    let g = z_reconstruction_grad_batch(&z, &z_hat).unwrap();
    for &(i, j) in &[(0usize, 0usize), (2, 3)] {
        let mut up = z_hat.clone();
        up[[i, j]] += step;
        let mut down = z_hat.clone();
        down[[i, j]] -= step;
        let fd = (z_reconstruction_loss_batch(&z, &up).unwrap()
            - z_reconstruction_loss_batch(&z, &down).unwrap())
            / (2.0 * step);
        worst = worst.max(rel_err(g[[i, j]], fd));
    }

    // consistency over the first image batch
    let shape = (b, 4, 4, 3);
    let a = ndarray::Array4::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let c2 = ndarray::Array4::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let (ga, _gb) = consistency_grad_batch(&a, &c2).unwrap();
    for &(i, j, k, l) in &[(0usize, 0usize, 0usize, 0usize), (2, 3, 2, 1)] {
        let mut up = a.clone();
        up[[i, j, k, l]] += step;
        let mut down = a.clone();
        down[[i, j, k, l]] -= step;
        let fd = (consistency_loss_batch(&up, &c2).unwrap()
            - consistency_loss_batch(&down, &c2).unwrap())
            / (2.0 * step);
        worst = worst.max(rel_err(ga[[i, j, k, l]], fd));
    }

    worst
}

/// End-to-end gradient check: watermark BCE through decoder, backbone, and
/// both ParamGen nets of a tiny randomly initialized model.
fn end_to_end_gradient_check() -> f64 {
    let cfg = TrainingConfig {
        fingerprint_bits: 4,
        latent_dim: 5,
        image_size: 8,
        base_channels: 2,
        batch_size: 3,
        epochs: 1,
        seed: 49,
        ..TrainingConfig::default()
    };
    let mut state = TrainerState::init(cfg.clone()).unwrap();
    let mut rng = derive_rng(1234, "accept.e2e");
    let b = 3;
    let zs: Vec<_> = (0..b)
        .map(|_| sample_latent(&mut rng, cfg.latent_dim).unwrap())
        .collect();
    let z_rows = latents_to_rows(&zs).unwrap();
    let ws: Vec<_> = (0..b)
        .map(|_| sample_fingerprint(&mut rng, cfg.fingerprint_bits).unwrap())
        .collect();
    let w_rows = fingerprints_to_rows(&ws).unwrap();

    // analytic gradients
    state.backbone.zero_grad();
    state.decoder.zero_grad();
    for pair in &mut state.param_gens {
        pair.zero_grad();
    }
    let mut pn = Vec::new();
    let mut tapes = Vec::new();
    for pair in &state.param_gens {
        let (gamma, tg) = pair.f_s.forward_tape(&w_rows).unwrap();
        let (beta, tb) = pair.f_b.forward_tape(&w_rows).unwrap();
        pn.push(PnBatch::new(pair.f_s.mode(), gamma, beta).unwrap());
        tapes.push((tg, tb));
    }
    let (images, gen_tape) = state.backbone.forward_tape(&z_rows, &pn).unwrap();
    let (out, dec_tape) = state.decoder.forward_tape(&images).unwrap();
    let logits = out.slice(ndarray::s![.., ..cfg.fingerprint_bits]).to_owned();
    let mut g_out = Array2::zeros(out.dim());
    g_out
        .slice_mut(ndarray::s![.., ..cfg.fingerprint_bits])
        .assign(&watermark_grad_batch(&logits, &ws).unwrap());
    let gy = state.decoder.backward_tape(&dec_tape, &g_out);
    let pn_grads = state.backbone.backward_tape(&gen_tape, &pn, &gy).unwrap();
    for (pair, ((tg, tb), g)) in state
        .param_gens
        .iter_mut()
        .zip(tapes.iter().zip(pn_grads.iter()))
    {
        pair.f_s.backward(tg, &g.gamma);
        pair.f_b.backward(tb, &g.beta);
    }

    // loss as a pure function of current weights
    let loss_of = |state: &mut TrainerState| -> f64 {
        let mut pn = Vec::new();
        for pair in &state.param_gens {
            let gamma = pair.f_s.forward_batch(&w_rows).unwrap();
            let beta = pair.f_b.forward_batch(&w_rows).unwrap();
            pn.push(PnBatch::new(pair.f_s.mode(), gamma, beta).unwrap());
        }
        let images = state.backbone.forward_batch(&z_rows, &pn).unwrap();
        let out = state.decoder.forward_batch(&images).unwrap();
        let logits = out.slice(ndarray::s![.., ..4]).to_owned();
        watermark_loss_batch(&logits, &ws).unwrap()
    };

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    // probe a handful of parameters in each component
    enum Part {
        Backbone,
        Decoder,
        PairS,
        PairB,
    }
    for part in [Part::Backbone, Part::Decoder, Part::PairS, Part::PairB] {
        let count = {
            let net: &mut dyn Params = match part {
                Part::Backbone => &mut state.backbone,
                Part::Decoder => &mut state.decoder,
                Part::PairS => &mut state.param_gens[0].f_s,
                Part::PairB => &mut state.param_gens[0].f_b,
            };
            net.param_count()
        };
        let mut pick = derive_rng(7, "accept.e2e.pick");
        for _ in 0..4 {
            let k = pick.gen_range(0..count);
            let analytic = {
                let net: &mut dyn Params = match part {
                    Part::Backbone => &mut state.backbone,
                    Part::Decoder => &mut state.decoder,
                    Part::PairS => &mut state.param_gens[0].f_s,
                    Part::PairB => &mut state.param_gens[0].f_b,
                };
                grad_at(net, k)
            };
            // split borrows: nudge the selected component, re-evaluate the
            // whole state
            let fd = {
                let nudge = |state: &mut TrainerState, delta: f64| {
                    let net: &mut dyn Params = match part {
                        Part::Backbone => &mut state.backbone,
                        Part::Decoder => &mut state.decoder,
                        Part::PairS => &mut state.param_gens[0].f_s,
                        Part::PairB => &mut state.param_gens[0].f_b,
                    };
                    let mut i = 0usize;
                    net.visit(&mut |p| {
                        if k >= i && k < i + p.value.len() {
                            p.value[k - i] += delta;
                        }
                        i += p.value.len();
                    });
                };
                nudge(&mut state, h);
                let up = loss_of(&mut state);
                nudge(&mut state, -2.0 * h);
                let down = loss_of(&mut state);
                nudge(&mut state, h);
                (up - down) / (2.0 * h)
            };
            if analytic.abs().max(fd.abs()) > 1e-7 {
                worst = worst.max(rel_err(analytic, fd));
            }
        }
    }
    worst
}

fn criterion_1() -> Result<String, String> {
    let started = Instant::now();
    let mut rng = derive_rng(2024, "accept.c1");
    let mut worst: f64 = 0.0;
    worst = worst.max(pn_gradient_check(PnMode::ChannelWise, &mut rng));
    worst = worst.max(pn_gradient_check(PnMode::ElementWise, &mut rng));
    worst = worst.max(loss_gradient_checks(&mut rng));
    worst = worst.max(end_to_end_gradient_check());
    let secs = started.elapsed().as_secs_f64();
    let detail = format!(
        "gradient checks max rel err {worst:.2e} (bound 1e-4), ran in {secs:.1}s (bound 60s); \
         oracle unit suite runs in this same workspace invocation"
    );
    if worst < 1e-4 && secs < 60.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// criteria 2..9

fn criterion_2(cw: &TrainedBundle, ew: &TrainedBundle, k: &Knobs) -> Result<String, String> {
    let mut rng = derive_rng(20, "accept.c2");
    let acc_cw = mean_bit_accuracy(cw, k.eval_draws, &mut rng).unwrap();
    let acc_ew = mean_bit_accuracy(ew, k.eval_draws, &mut rng).unwrap();
    let detail = format!(
        "clean Acc over {} draws: channel-wise {acc_cw:.4}, element-wise {acc_ew:.4} (bound >= 0.95 each)",
        k.eval_draws
    );
    if acc_cw >= 0.95 && acc_ew >= 0.95 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_3(cw: &TrainedBundle, k: &Knobs) -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    let before = dir.path().join("before.gmk");
    save_bundle(cw, &before).unwrap();
    let before_bytes = std::fs::read(&before).unwrap();

    let mut rng = derive_rng(30, "accept.c3");
    let mut per_issue = Vec::with_capacity(100);
    let mut files = Vec::new();
    for i in 0..100 {
        let w = sample_fingerprint(&mut rng, k.d_w).unwrap();
        let t = Instant::now();
        let inst = issue_instance(cw, &w).unwrap();
        per_issue.push(t.elapsed().as_secs_f64());
        let p = dir.path().join(format!("i{i}.gmk"));
        save_instance(&inst, &p).unwrap();
        files.push(p);
    }
    let worst = per_issue.iter().cloned().fold(0.0, f64::max);

    let after = dir.path().join("after.gmk");
    save_bundle(cw, &after).unwrap();
    let unchanged = std::fs::read(&after).unwrap() == before_bytes;

    // any two instance files differ only inside the instance section plus the
    // trailing checksum
    let base = std::fs::read(&files[0]).unwrap();
    let ranges = issuance::section_ranges(&base).unwrap();
    let inst_range = ranges
        .iter()
        .find(|(tag, _)| *tag == issuance::SECTION_INSTANCE)
        .map(|(_, r)| r.clone())
        .unwrap();
    let mut diffs_confined = true;
    for f in &files[1..] {
        let other = std::fs::read(f).unwrap();
        if other.len() != base.len() {
            diffs_confined = false;
            break;
        }
        for (i, (a, b)) in base.iter().zip(other.iter()).enumerate() {
            if a != b && !(inst_range.contains(&i) || i >= base.len() - 8) {
                diffs_confined = false;
                break;
            }
        }
    }

    let detail = format!(
        "100 issuances: max {:.1} ms (bound 1000 ms), bundle bytes unchanged: {unchanged}, \
         diffs confined to instance section: {diffs_confined}",
        worst * 1e3
    );
    if worst < 1.0 && unchanged && diffs_confined {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_4(
    full: &TrainedBundle,
    no_lz: &TrainedBundle,
    no_lconst: &TrainedBundle,
    dataset: &Dataset,
    k: &Knobs,
) -> Result<String, String> {
    let n_fid = 256.min(dataset.len());
    let fid_full = bundle_fid(full, dataset, n_fid, 40);
    let fid_no_lz = bundle_fid(no_lz, dataset, n_fid, 40);

    let mut rng = derive_rng(41, "accept.c4");
    let dist_full = mean_pair_distance(full, 64, &mut rng);
    let dist_no_lconst = mean_pair_distance(no_lconst, 64, &mut rng);

    let acc_no_lz = mean_bit_accuracy(no_lz, k.eval_draws, &mut rng).unwrap();
    let acc_no_lconst = mean_bit_accuracy(no_lconst, k.eval_draws, &mut rng).unwrap();

    let fid_ok = fid_no_lz >= 3.0 * fid_full;
    let dist_ok = dist_no_lconst >= 10.0 * dist_full;
    let acc_ok = acc_no_lz >= 0.95 && acc_no_lconst >= 0.95;
    let detail = format!(
        "FID full {fid_full:.3} vs no-Lz {fid_no_lz:.3} (bound >= 3x: {fid_ok}); \
         pair distance full {dist_full:.3} vs no-Lconst {dist_no_lconst:.3} (bound >= 10x: {dist_ok}); \
         ablation Acc no-Lz {acc_no_lz:.4}, no-Lconst {acc_no_lconst:.4} (bound >= 0.95: {acc_ok})"
    );
    if fid_ok && dist_ok && acc_ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_5(with_att: &TrainedBundle, without: &TrainedBundle, k: &Knobs) -> Result<String, String> {
    use ganmark_core::attacksim::{gaussian_blur, gaussian_noise, jpeg_compress};
    let mut detail = String::new();
    let mut ok = true;
    for (name, which) in [("jpeg q50", 0usize), ("blur k5", 1), ("noise 0.1", 2)] {
        let mut accs = [0.0f64; 2];
        for (side, bundle) in [(0usize, with_att), (1, without)] {
            let mut rng = derive_rng(50 + which as u64, "accept.c5");
            let w = sample_fingerprint(&mut rng, k.d_w).unwrap();
            let inst = issue_instance(bundle, &w).unwrap();
            let acc = decoded_accuracy(&bundle.decoder, &w, k.attack_draws, &mut rng, |z, rng| {
                let img = inst.generate(z).unwrap();
                match which {
                    0 => jpeg_compress(&img, 50).unwrap(),
                    1 => gaussian_blur(&img, 5).unwrap(),
                    _ => gaussian_noise(&img, 0.1, rng).unwrap(),
                }
            });
            accs[side] = acc;
        }
        let pass = accs[0] >= accs[1] + 0.10 && accs[0] > 0.75;
        ok &= pass;
        let _ = write!(
            detail,
            "{name}: with {:.3} vs without {:.3} ({}); ",
            accs[0],
            accs[1],
            if pass { "ok" } else { "fail" }
        );
    }
    detail.push_str("bounds: with >= without + 0.10 and with > 0.75");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_6(cw: &TrainedBundle, k: &Knobs) -> Result<String, String> {
    let mut rng = derive_rng(60, "accept.c6");
    let w = sample_fingerprint(&mut rng, k.d_w).unwrap();
    let inst = issue_instance(cw, &w).unwrap();
    let decoder = &cw.decoder;

    let eval = |inst: &GeneratorInstance, rng: &mut Rng| {
        ganmark_core::metrics::instance_bit_accuracy(inst, decoder, k.eval_draws, rng).unwrap()
    };
    let clean = eval(&inst, &mut rng);
    let pruned = prune_attack(&inst, 0.10).unwrap();
    let acc_prune = eval(&pruned, &mut rng);
    let quant = quantize_attack(&inst);
    let acc_quant = eval(&quant, &mut rng);
    let finetuned = cached_finetune("cw_finetune", &inst, k.data, k.finetune_iters, 777);
    let acc_ft = eval(&finetuned, &mut rng);

    let sigma = (0.25 / (k.eval_draws * k.d_w) as f64).sqrt();
    let prune_ok = acc_prune >= 0.95 * clean;
    let quant_ok = acc_quant >= 0.90 * clean;
    let ft_ok = acc_ft > 0.5 + 3.0 * sigma;

    let records = vec![
        RunRecord::new("model_attack")
            .push("attack", "none")
            .push("param", "-")
            .push("acc", format!("{clean:.4}")),
        RunRecord::new("model_attack")
            .push("attack", "prune")
            .push("param", "0.10")
            .push("acc", format!("{acc_prune:.4}")),
        RunRecord::new("model_attack")
            .push("attack", "quantize")
            .push("param", "0.1-grid")
            .push("acc", format!("{acc_quant:.4}")),
        RunRecord::new("model_attack")
            .push("attack", "finetune")
            .push("param", k.finetune_iters.to_string())
            .push("acc", format!("{acc_ft:.4}")),
    ];
    let dir = artifacts_dir();
    std::fs::create_dir_all(&dir).unwrap();
    let report_path = dir.join("model_attacks.txt");
    std::fs::write(&report_path, render_tables(&records)).unwrap();

    let detail = format!(
        "clean {clean:.4}; prune 10% {acc_prune:.4} (>= {:.4}: {prune_ok}), quantize {acc_quant:.4} \
         (>= {:.4}: {quant_ok}), finetune {}it {acc_ft:.4} (> {:.4}: {ft_ok}); report: {}",
        0.95 * clean,
        0.90 * clean,
        k.finetune_iters,
        0.5 + 3.0 * sigma,
        report_path.display()
    );
    if prune_ok && quant_ok && ft_ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_7(cw: &TrainedBundle, k: &Knobs) -> Result<String, String> {
    let mut rng = derive_rng(70, "accept.c7");
    let clean_acc = mean_bit_accuracy(cw, k.eval_draws.min(300), &mut rng).unwrap();

    // endpoints reproduce the sources bit-exactly
    let wa = sample_fingerprint(&mut rng, k.d_w).unwrap();
    let wb = sample_fingerprint(&mut rng, k.d_w).unwrap();
    let ia = issue_instance(cw, &wa).unwrap();
    let ib = issue_instance(cw, &wb).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let bytes_of = |inst: &GeneratorInstance, name: &str| {
        let p = dir.path().join(name);
        save_instance(inst, &p).unwrap();
        std::fs::read(p).unwrap()
    };
    let endpoints_ok = bytes_of(&collusion_attack(&ia, &ib, 1.0).unwrap(), "e1.gmk")
        == bytes_of(&ia, "a.gmk")
        && bytes_of(&collusion_attack(&ia, &ib, 0.0).unwrap(), "e0.gmk") == bytes_of(&ib, "b.gmk");

    // monotone curve for one pair
    let alphas = [0.0, 0.25, 0.5, 0.75, 1.0];
    let mut curve = Vec::new();
    for &a in &alphas {
        let mixed = collusion_attack(&ia, &ib, a).unwrap();
        let (acc_a, _) = pair_accuracy(&mixed, &cw.decoder, &wa, &wb, k.collusion_draws, &mut rng);
        curve.push(acc_a);
    }
    let mut monotone_ok = true;
    for i in 0..curve.len() - 1 {
        // accuracy against w_A should not fall as alpha (weight on A) rises
        if curve[i + 1] < curve[i] - 0.05 {
            monotone_ok = false;
        }
    }

    // midpoint statistics across random pairs
    let mut mid_each_ok = true;
    let mut mean_sum = 0.0;
    for _ in 0..k.collusion_pairs {
        let wa = sample_fingerprint(&mut rng, k.d_w).unwrap();
        let wb = sample_fingerprint(&mut rng, k.d_w).unwrap();
        let ia = issue_instance(cw, &wa).unwrap();
        let ib = issue_instance(cw, &wb).unwrap();
        let mid = collusion_attack(&ia, &ib, 0.5).unwrap();
        let (acc_a, acc_b) =
            pair_accuracy(&mid, &cw.decoder, &wa, &wb, k.collusion_draws, &mut rng);
        if !(0.5..=clean_acc + 0.02).contains(&acc_a) || !(0.5..=clean_acc + 0.02).contains(&acc_b)
        {
            mid_each_ok = false;
        }
        mean_sum += (acc_a + acc_b) / 2.0;
    }
    let two_source_mean = mean_sum / k.collusion_pairs as f64;
    let mean_ok = (two_source_mean - 0.5).abs() <= 0.1;

    let detail = format!(
        "endpoints exact: {endpoints_ok}; curve vs w_A {:?} monotone: {monotone_ok}; \
         midpoints of {} pairs in [0.5, {clean_acc:.3}]: {mid_each_ok}; \
         two-source mean {two_source_mean:.3} in 0.5 +/- 0.1: {mean_ok}",
        curve.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        k.collusion_pairs
    );
    if endpoints_ok && monotone_ok && mid_each_ok && mean_ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_8(
    positions: &[(PnPosition, &TrainedBundle)],
    k: &Knobs,
) -> Result<String, String> {
    let mut rng = derive_rng(80, "accept.c8");
    let mut records = Vec::new();
    let mut all_ok = true;
    let mut detail = String::new();
    for &(pos, bundle) in positions {
        let clean = mean_bit_accuracy(bundle, k.eval_draws, &mut rng).unwrap();
        let w = sample_fingerprint(&mut rng, k.d_w).unwrap();
        let inst = issue_instance(bundle, &w).unwrap();
        let finetuned = cached_finetune(
            &format!("pos_{pos}_finetune"),
            &inst,
            k.data,
            k.position_finetune_iters,
            888,
        );
        let after = ganmark_core::metrics::instance_bit_accuracy(
            &finetuned,
            &bundle.decoder,
            k.eval_draws.min(300),
            &mut rng,
        )
        .unwrap();
        records.push(
            RunRecord::new("position")
                .push("position", pos.to_string())
                .push("clean_acc", format!("{clean:.4}"))
                .push("acc_after_finetune", format!("{after:.4}")),
        );
        let ok = clean >= 0.95;
        all_ok &= ok;
        let _ = write!(detail, "{pos}: clean {clean:.4} ({}), after-finetune {after:.4}; ",
            if ok { "ok" } else { "fail" });
    }
    let dir = artifacts_dir();
    std::fs::create_dir_all(&dir).unwrap();
    let report_path = dir.join("positions.txt");
    std::fs::write(&report_path, render_tables(&records)).unwrap();
    let _ = write!(detail, "bound clean >= 0.95 each; report: {}", report_path.display());
    if all_ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_9(cw: &TrainedBundle, k: &Knobs) -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();

    // bit-exact round trips
    let p1 = dir.path().join("b1.gmk");
    let p2 = dir.path().join("b2.gmk");
    save_bundle(cw, &p1).unwrap();
    let reloaded = load_bundle(&p1).unwrap();
    save_bundle(&reloaded, &p2).unwrap();
    let bundle_rt = std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();

    let mut rng = derive_rng(90, "accept.c9");
    let w = sample_fingerprint(&mut rng, k.d_w).unwrap();
    let inst = issue_instance(cw, &w).unwrap();
    let q1 = dir.path().join("i1.gmk");
    let q2 = dir.path().join("i2.gmk");
    save_instance(&inst, &q1).unwrap();
    save_instance(&load_instance(&q1).unwrap(), &q2).unwrap();
    let inst_rt = std::fs::read(&q1).unwrap() == std::fs::read(&q2).unwrap();

    // registry: a torn trailing append must be discarded, later appends work
    let reg_path = dir.path().join("registry.tsv");
    let registry = Registry::open(&reg_path, k.d_w);
    let bid = bundle_id(cw);
    let mut seen = std::collections::HashSet::new();
    for i in 0..5 {
        // at small d_w random draws can collide; registered users must be
        // distinct
        let w = loop {
            let w = sample_fingerprint(&mut rng, k.d_w).unwrap();
            if seen.insert(w.to_hex()) {
                break w;
            }
        };
        register_user(&registry, &format!("user{i}"), &w, &bid).unwrap();
    }
    let intact = std::fs::read(&reg_path).unwrap();
    let mut torn = intact.clone();
    torn.extend_from_slice(b"user5\tdeadbe"); // crash mid-append, no newline
    std::fs::write(&reg_path, &torn).unwrap();
    let survived = registry.records().map(|r| r.len()).unwrap_or(usize::MAX) == 5;
    let w5 = loop {
        let w = sample_fingerprint(&mut rng, k.d_w).unwrap();
        if seen.insert(w.to_hex()) {
            break w;
        }
    };
    let recovered = register_user(&registry, "user5", &w5, &bid).is_ok()
        && registry.records().map(|r| r.len()).unwrap_or(usize::MAX) == 6;

    // false positives: random unregistered fingerprints must never match
    let mut false_positives = 0usize;
    for _ in 0..k.fp_trials {
        let probe = sample_fingerprint(&mut rng, k.d_w).unwrap();
        let rep = trace_user(&registry, &probe, 0.9).unwrap();
        if rep.decision == Decision::Match {
            false_positives += 1;
        }
    }

    let detail = format!(
        "bundle round-trip exact: {bundle_rt}, instance: {inst_rt}; torn append discarded: \
         {survived}, post-crash append ok: {recovered}; false positives at 0.9 over {} \
         random fingerprints x 6 users: {false_positives} (bound 0)",
        k.fp_trials
    );
    if bundle_rt && inst_rt && survived && recovered && false_positives == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------

fn main() {
    let scale = match std::env::var("GANMARK_ACCEPT_SCALE").as_deref() {
        Ok("smoke") => Scale::Smoke,
        _ => Scale::Desk,
    };
    let k = Knobs::get(scale);
    println!(
        "acceptance gate: scale={}, cache={}",
        if scale == Scale::Desk { "desk" } else { "smoke" },
        cache_dir().display()
    );

    let mut failed = 0usize;
    let mut run = |n: usize, name: &str, result: Result<String, String>| match result {
        Ok(d) => println!("criterion {n} ({name}): PASS - {d}"),
        Err(d) => {
            failed += 1;
            println!("criterion {n} ({name}): FAIL - {d}");
        }
    };

    run(1, "unit oracles and gradient checks", criterion_1());

    // shared artifacts; trained lazily, memoized on disk
    let base = k.config();
    let cw = cached_bundle("cw_clean", &base, k.data, k.progress);

    let mut ew_cfg = base.clone();
    ew_cfg.pn_mode = PnMode::ElementWise;
    ew_cfg.epochs = k.ew_epochs;
    let ew = cached_bundle("ew_clean", &ew_cfg, k.data, k.progress);

    run(2, "desk-scale effectiveness", criterion_2(&cw, &ew, &k));
    run(3, "retraining-free issuance", criterion_3(&cw, &k));

    let mut no_lz_cfg = base.clone();
    no_lz_cfg.lambda_z = 0.0;
    let no_lz = cached_bundle("no_lz", &no_lz_cfg, k.data, k.progress);
    let mut no_lconst_cfg = base.clone();
    no_lconst_cfg.lambda_const = 0.0;
    let no_lconst = cached_bundle("no_lconst", &no_lconst_cfg, k.data, k.progress);
    let dataset = load_dataset(k.data, base.image_size).expect("dataset");
    run(
        4,
        "loss ablations",
        criterion_4(&cw, &no_lz, &no_lconst, &dataset, &k),
    );

    let mut att_cfg = base.clone();
    att_cfg.attack.probability = 0.15;
    let with_att = cached_bundle("cw_attack_layer", &att_cfg, k.data, k.progress);
    run(5, "image-level robustness", criterion_5(&with_att, &cw, &k));

    run(6, "model-level robustness", criterion_6(&cw, &k));
    run(7, "collusion", criterion_7(&cw, &k));

    let mut position_bundles = Vec::new();
    for pos in [PnPosition::Input, PnPosition::Mid, PnPosition::All] {
        let mut cfg = base.clone();
        cfg.pn_position = pos;
        position_bundles.push((pos, cached_bundle(&format!("pos_{pos}"), &cfg, k.data, k.progress)));
    }
    let positions: Vec<(PnPosition, &TrainedBundle)> = position_bundles
        .iter()
        .map(|(p, b)| (*p, b))
        .chain(std::iter::once((PnPosition::Output, &cw)))
        .collect();
    run(8, "pn-position ablation", criterion_8(&positions, &k));

    run(9, "serialization and registry", criterion_9(&cw, &k));

    if failed > 0 {
        println!("acceptance gate: {failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("acceptance gate: all 9 criteria passed");
}
