//! Joint alternating training of the generator (backbone + normalization
//! parameter nets), the discriminator, and the watermark decoder.
//!
//! Determinism: all randomness of epoch `e` comes from
//! `derive_rng(config.seed, "epoch.e")`, and the optimizer keeps every weight
//! on the f32 grid, so a run resumed from an epoch-boundary checkpoint is
//! bit-identical to an uninterrupted one.

use crate::attacksim::stochastic_preprocess_traced;
use crate::config::{PnMode, TrainingConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fingerprint::{sample_fingerprint, Fingerprint};
use crate::latent::LatentVector;
use crate::losses::{self, LossBreakdown, LossWeights};
use crate::nets::{
    build_backbone, generator_forward, Discriminator, GeneratorBackbone, WatermarkDecoder,
};
use crate::nn::{sample_normal, snap_params, Adam, ParamRef, Params};
use crate::paramgen::{fingerprints_to_rows, generate_pn_parameters, ParamGenNet, ParamGenTape};
use crate::pn::{PnBatch, PnParameters};
use crate::rng::{derive_rng, Rng};
use crate::tensor::{stack_images, unstack_images, Image};
use ndarray::{s, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

/// The two fingerprint-conditioned parameter nets of one insertion point:
/// `f_s` emits scales, `f_b` emits biases.
#[derive(Debug, Clone)]
pub struct ParamGenPair {
    pub f_s: ParamGenNet,
    pub f_b: ParamGenNet,
}

impl ParamGenPair {
    /// Scale net starts at gamma ~= 1, bias net at beta ~= 0, so a fresh
    /// pair is close to the identity transform.
    pub fn new(rng: &mut Rng, config: &TrainingConfig, shape: (usize, usize, usize)) -> Result<Self> {
        let d_w = config.fingerprint_bits;
        let (p, q, c) = shape;
        let (f_s, f_b) = match config.pn_mode {
            PnMode::ChannelWise => (
                ParamGenNet::channel_wise(rng, d_w, c, 1.0)?,
                ParamGenNet::channel_wise(rng, d_w, c, 0.0)?,
            ),
            PnMode::ElementWise => (
                ParamGenNet::element_wise(rng, d_w, (p, q, c), 1.0)?,
                ParamGenNet::element_wise(rng, d_w, (p, q, c), 0.0)?,
            ),
        };
        Ok(ParamGenPair { f_s, f_b })
    }
}

impl Params for ParamGenPair {
    fn visit(&mut self, f: &mut dyn FnMut(ParamRef<'_>)) {
        self.f_s.visit(f);
        self.f_b.visit(f);
    }
}

/// Everything the model owner keeps after training. Immutable once built;
/// issuance and verification read from it, nothing writes back.
#[derive(Debug, Clone)]
pub struct TrainedBundle {
    pub config: TrainingConfig,
    pub backbone: GeneratorBackbone,
    /// One pair per active insertion point, in `active_points` order.
    pub param_gens: Vec<ParamGenPair>,
    pub decoder: WatermarkDecoder,
    /// Where this bundle's training log was written, if anywhere.
    pub log_path: Option<String>,
}

impl TrainedBundle {
    pub fn d_w(&self) -> usize {
        self.config.fingerprint_bits
    }

    pub fn d_z(&self) -> usize {
        self.config.latent_dim
    }

    /// Feed the fingerprint through every parameter net pair.
    pub fn pn_parameters(&self, w: &Fingerprint) -> Result<Vec<PnParameters>> {
        self.param_gens
            .iter()
            .map(|pair| generate_pn_parameters(&pair.f_s, &pair.f_b, w))
            .collect()
    }

    /// One image for one fingerprint and latent vector.
    pub fn generate(&self, w: &Fingerprint, z: &LatentVector) -> Result<Image> {
        let pn = self.pn_parameters(w)?;
        generator_forward(&self.backbone, &pn, z)
    }

    /// Batched generation: row i uses fingerprint i and latent row i.
    pub fn generate_batch(&self, ws: &[Fingerprint], z_rows: &Array2<f64>) -> Result<Array4<f64>> {
        if ws.len() != z_rows.nrows() {
            return Err(Error::Shape(format!(
                "{} fingerprints for {} latent rows",
                ws.len(),
                z_rows.nrows()
            )));
        }
        let rows = fingerprints_to_rows(ws)?;
        let mut pn = Vec::with_capacity(self.param_gens.len());
        for pair in &self.param_gens {
            let gamma = pair.f_s.forward_batch(&rows)?;
            let beta = pair.f_b.forward_batch(&rows)?;
            pn.push(PnBatch::new(pair.f_s.mode(), gamma, beta)?);
        }
        self.backbone.forward_batch(z_rows, &pn)
    }
}

/// Mutable training state: bundle contents plus the discriminator and both
/// optimizers. Checkpoints serialize exactly this.
pub struct TrainerState {
    pub config: TrainingConfig,
    pub backbone: GeneratorBackbone,
    pub param_gens: Vec<ParamGenPair>,
    pub decoder: WatermarkDecoder,
    pub discriminator: Discriminator,
    pub adam_gen: Adam,
    pub adam_disc: Adam,
    pub steps_done: u64,
}

/// View over the generator-side parameters updated as one group.
struct GenSide<'a> {
    backbone: &'a mut GeneratorBackbone,
    param_gens: &'a mut [ParamGenPair],
    decoder: &'a mut WatermarkDecoder,
}

impl Params for GenSide<'_> {
    fn visit(&mut self, f: &mut dyn FnMut(ParamRef<'_>)) {
        self.backbone.visit(f);
        for pair in self.param_gens.iter_mut() {
            pair.visit(f);
        }
        self.decoder.visit(f);
    }
}

impl TrainerState {
    pub fn init(config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let (mut backbone, mut discriminator, mut decoder) = build_backbone(&config)?;
        let mut rng = derive_rng(config.seed, "init.paramgen");
        let mut param_gens = Vec::new();
        for point in backbone.active_points() {
            param_gens.push(ParamGenPair::new(&mut rng, &config, point.shape)?);
        }
        snap_params(&mut backbone);
        snap_params(&mut discriminator);
        snap_params(&mut decoder);
        for pair in &mut param_gens {
            snap_params(pair);
        }
        let adam_gen = Adam::new(config.lr_gen);
        let adam_disc = Adam::new(config.lr_disc);
        Ok(TrainerState {
            config,
            backbone,
            param_gens,
            decoder,
            discriminator,
            adam_gen,
            adam_disc,
            steps_done: 0,
        })
    }

    pub fn into_bundle(self, log_path: Option<&Path>) -> TrainedBundle {
        TrainedBundle {
            config: self.config,
            backbone: self.backbone,
            param_gens: self.param_gens,
            decoder: self.decoder,
            log_path: log_path.map(|p| p.display().to_string()),
        }
    }

    /// Update the discriminator on one real batch and one detached fake
    /// batch. Touches no generator-side or decoder weights.
    fn discriminator_phase(&mut self, real: &Array4<f64>, fake: &Array4<f64>) -> Result<f64> {
        let (real_scores, real_tape) = self.discriminator.forward_tape(real)?;
        let (fake_scores, fake_tape) = self.discriminator.forward_tape(fake)?;
        let l_d = losses::d_adversarial_loss(&real_scores, &fake_scores)?;
        if !l_d.is_finite() {
            return Err(Error::NonFinite(format!(
                "discriminator loss {l_d} at step {}",
                self.steps_done
            )));
        }
        let (g_real, g_fake) = losses::d_adversarial_grads(&real_scores, &fake_scores)?;
        self.discriminator.zero_grad();
        self.discriminator.backward_tape(&real_tape, &g_real);
        self.discriminator.backward_tape(&fake_tape, &g_fake);
        self.adam_disc.step(&mut self.discriminator);
        Ok(l_d)
    }

    /// One full alternating step. Randomness is drawn from `ctx` in a fixed
    /// order: batch indices, z, w1, w2, then per-sample attack draws.
    fn step(&mut self, dataset: &Dataset, ctx: &mut EpochCtx) -> Result<LossBreakdown> {
        let b = self.config.batch_size;
        let d_w = self.config.fingerprint_bits;
        let d_z = self.config.latent_dim;
        let weights = LossWeights::from_config(&self.config);

        let indices = ctx.draw_indices(b);
        let z_rows = sample_normal(&mut ctx.rng, (b, d_z), 1.0);
        let w1: Vec<Fingerprint> =
            (0..b).map(|_| sample_fingerprint(&mut ctx.rng, d_w)).collect::<Result<_>>()?;
        let w2: Vec<Fingerprint> =
            (0..b).map(|_| sample_fingerprint(&mut ctx.rng, d_w)).collect::<Result<_>>()?;

        // Fingerprints -> per-sample normalization parameters, with tapes.
        let w1_rows = fingerprints_to_rows(&w1)?;
        let w2_rows = fingerprints_to_rows(&w2)?;
        let mut pn1 = Vec::new();
        let mut pn2 = Vec::new();
        let mut pg_tapes1: Vec<(ParamGenTape, ParamGenTape)> = Vec::new();
        let mut pg_tapes2: Vec<(ParamGenTape, ParamGenTape)> = Vec::new();
        for pair in &self.param_gens {
            let (gamma, ts) = pair.f_s.forward_tape(&w1_rows)?;
            let (beta, tb) = pair.f_b.forward_tape(&w1_rows)?;
            pn1.push(PnBatch::new(pair.f_s.mode(), gamma, beta)?);
            pg_tapes1.push((ts, tb));
            let (gamma, ts) = pair.f_s.forward_tape(&w2_rows)?;
            let (beta, tb) = pair.f_b.forward_tape(&w2_rows)?;
            pn2.push(PnBatch::new(pair.f_s.mode(), gamma, beta)?);
            pg_tapes2.push((ts, tb));
        }

        let (img1, gen_tape1) = self.backbone.forward_tape(&z_rows, &pn1)?;
        let (img2, gen_tape2) = self.backbone.forward_tape(&z_rows, &pn2)?;

        let real = dataset.batch(&indices);
        let l_d_adv = self.discriminator_phase(&real, &img1)?;

        // Robustness layer between generator and decoder, per sample.
        let singles = unstack_images(&img1);
        let mut attacked = Vec::with_capacity(b);
        let mut traces = Vec::with_capacity(b);
        for img in &singles {
            let (a, t) = stochastic_preprocess_traced(img, &mut ctx.rng, &self.config.attack)?;
            attacked.push(a);
            traces.push(t);
        }
        let attacked = stack_images(&attacked)?;

        let (dec_out, dec_tape) = self.decoder.forward_tape(&attacked)?;
        let logits = dec_out.slice(s![.., ..d_w]).to_owned();
        let z_hat = dec_out.slice(s![.., d_w..]).to_owned();

        let l_wm = losses::watermark_loss_batch(&logits, &w1)?;
        let l_z = losses::z_reconstruction_loss_batch(&z_rows, &z_hat)?;
        let l_const = losses::consistency_loss_batch(&img1, &img2)?;

        // Adversarial term against the just-updated discriminator.
        let (g_scores, disc_tape) = self.discriminator.forward_tape(&img1)?;
        let l_g_adv = losses::g_adversarial_loss(&g_scores)?;

        let mut parts =
            LossBreakdown { l_g_adv, l_d_adv, l_wm, l_z, l_const, l_total: 0.0 };
        parts.l_total = losses::total_generator_loss(&parts, &weights).map_err(|e| {
            Error::NonFinite(format!("step {}: {e}; parts {parts:?}", self.steps_done))
        })?;

        // Generator-side backward.
        self.backbone.zero_grad();
        self.decoder.zero_grad();
        for pair in &mut self.param_gens {
            pair.zero_grad();
        }

        let g_sc = losses::g_adversarial_grad(&g_scores)?.mapv(|g| g * weights.adv);
        self.discriminator.zero_grad();
        let mut gy1 = self.discriminator.backward_tape(&disc_tape, &g_sc);

        let mut g_dec = Array2::zeros((b, d_w + d_z));
        g_dec
            .slice_mut(s![.., ..d_w])
            .assign(&losses::watermark_grad_batch(&logits, &w1)?.mapv(|g| g * weights.wm));
        g_dec
            .slice_mut(s![.., d_w..])
            .assign(&losses::z_reconstruction_grad_batch(&z_rows, &z_hat)?.mapv(|g| g * weights.z_rec));
        let g_attacked = self.decoder.backward_tape(&dec_tape, &g_dec);
        for (i, trace) in traces.iter().enumerate() {
            let gi = trace.backward(&g_attacked.index_axis(Axis(0), i).to_owned());
            let mut row = gy1.index_axis_mut(Axis(0), i);
            row += &gi;
        }

        let (gc1, gc2) = losses::consistency_grad_batch(&img1, &img2)?;
        gy1.scaled_add(weights.consistency, &gc1);
        let gy2 = gc2.mapv(|g| g * weights.consistency);

        let pn_grads1 = self.backbone.backward_tape(&gen_tape1, &pn1, &gy1)?;
        let pn_grads2 = self.backbone.backward_tape(&gen_tape2, &pn2, &gy2)?;
        for (j, pair) in self.param_gens.iter_mut().enumerate() {
            pair.f_s.backward(&pg_tapes1[j].0, &pn_grads1[j].gamma);
            pair.f_b.backward(&pg_tapes1[j].1, &pn_grads1[j].beta);
            pair.f_s.backward(&pg_tapes2[j].0, &pn_grads2[j].gamma);
            pair.f_b.backward(&pg_tapes2[j].1, &pn_grads2[j].beta);
        }

        let TrainerState { backbone, param_gens, decoder, adam_gen, .. } = self;
        let mut gen_side = GenSide { backbone, param_gens, decoder };
        adam_gen.step(&mut gen_side);

        self.steps_done += 1;
        Ok(parts)
    }
}

/// Per-epoch randomness: one derived stream drives the data order and every
/// stochastic draw of the epoch's steps.
struct EpochCtx {
    rng: Rng,
    deck: Vec<usize>,
    pos: usize,
}

impl EpochCtx {
    fn new(seed: u64, epoch: u64, n_images: usize) -> Self {
        let mut rng = derive_rng(seed, &format!("epoch.{epoch}"));
        let mut deck: Vec<usize> = (0..n_images).collect();
        deck.shuffle(&mut rng);
        EpochCtx { rng, deck, pos: 0 }
    }

    /// Draw a full batch, reshuffling the deck whenever it runs out.
    fn draw_indices(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            if self.pos == self.deck.len() {
                self.deck.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.deck[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions<'a> {
    /// Overwritten atomically at every epoch boundary when set.
    pub checkpoint_path: Option<&'a Path>,
    /// Line-delimited per-step loss records when set.
    pub log_path: Option<&'a Path>,
    /// Per-epoch progress lines on stderr.
    pub progress: bool,
}

/// Full batches per epoch; a short final deck reshuffles mid-epoch.
pub fn steps_per_epoch(config: &TrainingConfig, dataset: &Dataset) -> u64 {
    (dataset.len().div_ceil(config.batch_size)).max(1) as u64
}

fn check_dataset(config: &TrainingConfig, dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset has no images".into()));
    }
    if dataset.image_size() != config.image_size {
        return Err(Error::Shape(format!(
            "dataset images are {0}x{0}, config wants {1}x{1}",
            dataset.image_size(),
            config.image_size
        )));
    }
    Ok(())
}

fn run_steps(
    state: &mut TrainerState,
    dataset: &Dataset,
    n_steps: u64,
    options: &TrainOptions,
) -> Result<()> {
    check_dataset(&state.config, dataset)?;
    if n_steps == 0 {
        return Ok(());
    }
    let spe = steps_per_epoch(&state.config, dataset);
    if state.steps_done % spe != 0 {
        return Err(Error::InvalidState(format!(
            "training can only continue from an epoch boundary (step {}, {spe} steps/epoch)",
            state.steps_done
        )));
    }

    let mut log = match options.log_path {
        Some(path) => {
            let file = std::fs::File::create(path)
                .map_err(|e| Error::io(format!("creating log {}", path.display()), e))?;
            let mut w = std::io::BufWriter::new(file);
            writeln!(w, "# step l_g_adv l_d_adv l_wm l_z l_const l_total wall_ms")
                .map_err(Error::from)?;
            Some(w)
        }
        None => None,
    };

    let started = Instant::now();
    let target = state.steps_done + n_steps;
    let mut ctx: Option<EpochCtx> = None;
    let mut epoch_sum = LossBreakdown {
        l_g_adv: 0.0,
        l_d_adv: 0.0,
        l_wm: 0.0,
        l_z: 0.0,
        l_const: 0.0,
        l_total: 0.0,
    };
    let mut epoch_steps = 0u64;

    while state.steps_done < target {
        let step = state.steps_done;
        if step % spe == 0 {
            ctx = Some(EpochCtx::new(state.config.seed, step / spe, dataset.len()));
        }
        let parts = state.step(dataset, ctx.as_mut().expect("context set at epoch start"))?;

        if let Some(w) = log.as_mut() {
            writeln!(
                w,
                "{step}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                parts.l_g_adv,
                parts.l_d_adv,
                parts.l_wm,
                parts.l_z,
                parts.l_const,
                parts.l_total,
                started.elapsed().as_millis()
            )
            .map_err(Error::from)?;
        }
        epoch_sum.l_g_adv += parts.l_g_adv;
        epoch_sum.l_d_adv += parts.l_d_adv;
        epoch_sum.l_wm += parts.l_wm;
        epoch_sum.l_z += parts.l_z;
        epoch_sum.l_const += parts.l_const;
        epoch_sum.l_total += parts.l_total;
        epoch_steps += 1;

        if state.steps_done % spe == 0 {
            let epoch = state.steps_done / spe;
            if let Some(w) = log.as_mut() {
                w.flush().map_err(Error::from)?;
            }
            if let Some(path) = options.checkpoint_path {
                crate::issuance::save_checkpoint(state, path)?;
            }
            if options.progress {
                let n = epoch_steps as f64;
                eprintln!(
                    "epoch {epoch}: l_total {:.4} (adv {:.4} d {:.4} wm {:.4} z {:.4} const {:.5}) [{:.1}s]",
                    epoch_sum.l_total / n,
                    epoch_sum.l_g_adv / n,
                    epoch_sum.l_d_adv / n,
                    epoch_sum.l_wm / n,
                    epoch_sum.l_z / n,
                    epoch_sum.l_const / n,
                    started.elapsed().as_secs_f64()
                );
            }
            epoch_sum = LossBreakdown {
                l_g_adv: 0.0,
                l_d_adv: 0.0,
                l_wm: 0.0,
                l_z: 0.0,
                l_const: 0.0,
                l_total: 0.0,
            };
            epoch_steps = 0;
        }
    }
    if let Some(mut w) = log {
        w.flush().map_err(Error::from)?;
    }
    Ok(())
}

/// Train from scratch for `config.epochs` epochs.
pub fn train(
    config: &TrainingConfig,
    dataset: &Dataset,
    options: &TrainOptions,
) -> Result<TrainedBundle> {
    let mut state = TrainerState::init(config.clone())?;
    let total = config.epochs as u64 * steps_per_epoch(config, dataset);
    run_steps(&mut state, dataset, total, options)?;
    Ok(state.into_bundle(options.log_path))
}

/// Continue a checkpointed run for `extra_steps` more steps with identical
/// semantics.
pub fn resume(
    checkpoint: &Path,
    dataset: &Dataset,
    extra_steps: u64,
    options: &TrainOptions,
) -> Result<TrainedBundle> {
    let mut state = crate::issuance::load_checkpoint(checkpoint)?;
    run_steps(&mut state, dataset, extra_steps, options)?;
    Ok(state.into_bundle(options.log_path))
}

#[cfg(test)]
pub(crate) fn run_steps_for_tests(
    state: &mut TrainerState,
    dataset: &Dataset,
    n_steps: u64,
    options: &TrainOptions,
) -> Result<()> {
    run_steps(state, dataset, n_steps, options)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataset::load_dataset;
    use crate::nn::export_weights;

    pub(crate) fn tiny_config() -> TrainingConfig {
        TrainingConfig {
            fingerprint_bits: 4,
            latent_dim: 6,
            image_size: 8,
            base_channels: 2,
            batch_size: 4,
            epochs: 1,
            seed: 7,
            ..TrainingConfig::default()
        }
    }

    fn weights_of(state: &mut TrainerState) -> Vec<Vec<Vec<f32>>> {
        let mut out = vec![export_weights(&mut state.backbone)];
        for pair in &mut state.param_gens {
            out.push(export_weights(pair));
        }
        out.push(export_weights(&mut state.decoder));
        out.push(export_weights(&mut state.discriminator));
        out
    }

    #[test]
    fn training_logs_every_step_and_totals_recombine_exactly() {
        let cfg = tiny_config();
        let data = load_dataset("synth:10", cfg.image_size).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let log_path = dir.path().join("train.log");
        let bundle = train(
            &cfg,
            &data,
            &TrainOptions { log_path: Some(&log_path), ..TrainOptions::default() },
        )
        .unwrap();
        assert_eq!(bundle.log_path.as_deref(), log_path.to_str());

        let text = std::fs::read_to_string(&log_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let spe = steps_per_epoch(&cfg, &data);
        assert_eq!(lines.len() as u64, 1 + spe * cfg.epochs as u64);
        assert!(lines[0].starts_with('#'));

        let weights = LossWeights::from_config(&cfg);
        for (i, line) in lines[1..].iter().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            assert_eq!(f.len(), 8, "line {line:?}");
            assert_eq!(f[0].parse::<u64>().unwrap(), i as u64);
            let parts = LossBreakdown {
                l_g_adv: f[1].parse().unwrap(),
                l_d_adv: f[2].parse().unwrap(),
                l_wm: f[3].parse().unwrap(),
                l_z: f[4].parse().unwrap(),
                l_const: f[5].parse().unwrap(),
                l_total: 0.0,
            };
            let recombined = losses::total_generator_loss(&parts, &weights).unwrap();
            let logged: f64 = f[6].parse().unwrap();
            assert_eq!(recombined, logged, "recombination at step {i}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_config();
        let data = load_dataset("synth:10", cfg.image_size).unwrap();
        let run = || {
            let mut state = TrainerState::init(cfg.clone()).unwrap();
            run_steps(&mut state, &data, 5, &TrainOptions::default()).unwrap();
            weights_of(&mut state)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn discriminator_update_leaves_generator_side_alone() {
        let cfg = TrainingConfig { lr_gen: 0.0, ..tiny_config() };
        let data = load_dataset("synth:10", cfg.image_size).unwrap();
        let mut state = TrainerState::init(cfg).unwrap();
        let before = weights_of(&mut state);
        run_steps(&mut state, &data, 2, &TrainOptions::default()).unwrap();
        let after = weights_of(&mut state);
        let n = before.len();
        // Generator side (backbone, pairs, decoder) untouched under lr 0.
        assert_eq!(before[..n - 1], after[..n - 1]);
        // Discriminator moved.
        assert_ne!(before[n - 1], after[n - 1]);
    }

    #[test]
    fn generator_update_leaves_discriminator_alone() {
        let cfg = TrainingConfig { lr_disc: 0.0, ..tiny_config() };
        let data = load_dataset("synth:10", cfg.image_size).unwrap();
        let mut state = TrainerState::init(cfg).unwrap();
        let before = weights_of(&mut state);
        run_steps(&mut state, &data, 2, &TrainOptions::default()).unwrap();
        let after = weights_of(&mut state);
        let n = before.len();
        assert_eq!(before[n - 1], after[n - 1]);
        for i in 0..n - 1 {
            assert_ne!(before[i], after[i], "generator-side group {i} never moved");
        }
    }

    #[test]
    fn plain_gan_mode_never_touches_the_decoder() {
        let cfg = TrainingConfig {
            lambda_wm: 0.0,
            lambda_z: 0.0,
            lambda_const: 0.0,
            ..tiny_config()
        };
        let data = load_dataset("synth:10", cfg.image_size).unwrap();
        let mut state = TrainerState::init(cfg).unwrap();
        let dec_before = export_weights(&mut state.decoder);
        let bb_before = export_weights(&mut state.backbone);
        run_steps(&mut state, &data, 3, &TrainOptions::default()).unwrap();
        assert_eq!(dec_before, export_weights(&mut state.decoder));
        assert_ne!(bb_before, export_weights(&mut state.backbone));
    }

    #[test]
    fn non_finite_losses_abort_with_diagnostics() {
        let cfg = tiny_config();
        let data = load_dataset("synth:10", cfg.image_size).unwrap();
        let mut state = TrainerState::init(cfg).unwrap();
        state.backbone.visit(&mut |p: ParamRef| {
            p.value[0] = f64::NAN;
        });
        let err = run_steps(&mut state, &data, 1, &TrainOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "got {err:?}");
    }

    #[test]
    fn dataset_preconditions_checked() {
        let cfg = tiny_config();
        let wrong = load_dataset("synth:4", 16).unwrap();
        assert!(matches!(
            train(&cfg, &wrong, &TrainOptions::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn bundle_generates_deterministic_images() {
        let cfg = tiny_config();
        let data = load_dataset("synth:8", cfg.image_size).unwrap();
        let bundle = train(&cfg, &data, &TrainOptions::default()).unwrap();
        let mut rng = derive_rng(11, "training.test");
        let w = sample_fingerprint(&mut rng, bundle.d_w()).unwrap();
        let z = crate::latent::sample_latent(&mut rng, bundle.d_z()).unwrap();
        let a = bundle.generate(&w, &z).unwrap();
        let b = bundle.generate(&w, &z).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (8, 8, 3));

        // Batched path agrees with the single-sample path.
        let rows = crate::latent::latents_to_rows(std::slice::from_ref(&z)).unwrap();
        let batch = bundle.generate_batch(std::slice::from_ref(&w), &rows).unwrap();
        let from_batch = batch.index_axis(Axis(0), 0).to_owned();
        let diff = (&from_batch - &a).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }
}
