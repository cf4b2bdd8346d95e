//! `ganmark`: train fingerprinted generators, issue per-user instances,
//! attack them, and verify ownership.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 data/format error,
//! 4 numeric failure.

use clap::{Parser, Subcommand, ValueEnum};
use ganmark_core::dataset::{load_dataset, load_png, save_png, write_atomic};
use ganmark_core::error::{Error, Result};
use ganmark_core::issuance::{
    bundle_id, issue_instance, load_bundle, load_instance, register_user, save_bundle,
    save_instance, Registry,
};
use ganmark_core::latent::latents_to_rows;
use ganmark_core::metrics::{fid_images, mean_bit_accuracy, RandomConvEmbedder};
use ganmark_core::modelattacks::{
    attacker_discriminator, collusion_attack, finetune_attack, prune_attack, quantize_attack,
};
use ganmark_core::report::{parse_records, render_tables, RunRecord};
use ganmark_core::rng::derive_rng;
use ganmark_core::tensor::unstack_images;
use ganmark_core::training::{resume, steps_per_epoch, train, TrainOptions, TrainedBundle};
use ganmark_core::verify::{extract_watermark, trace_user, DEFAULT_THRESHOLD};
use ganmark_core::{sample_fingerprint, sample_latent, Fingerprint, TrainingConfig};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "ganmark", version, about = "GAN fingerprinting toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a fingerprinting bundle from a config and a dataset.
    Train {
        /// Key=value config file; falls back to $GANMARK_CONFIG.
        #[arg(long)]
        config: Option<PathBuf>,
        /// PNG directory or `synth:N` for the built-in synthetic set.
        #[arg(long)]
        data: String,
        /// Output bundle file.
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Epoch-boundary checkpoint file.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Per-epoch progress on stderr.
        #[arg(long)]
        progress: bool,
    },
    /// Continue training from an epoch checkpoint for extra epochs.
    Resume {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: String,
        /// Additional epochs on top of the checkpointed state.
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        progress: bool,
    },
    /// Issue a fingerprinted instance to a user and record it.
    Issue {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fingerprint as hex; drawn from --seed when omitted.
        #[arg(long)]
        fingerprint: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sample images from an instance into a directory of PNGs.
    Generate {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract watermarks from images and trace users.
    Verify {
        /// Bundle holding the owner's decoder.
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        /// Directory of PNG images to verify.
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Output report file.
        #[arg(long)]
        report: PathBuf,
    },
    /// Apply one attack to an instance.
    Attack {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, value_enum)]
        kind: AttackKind,
        /// Prune fraction, finetune iterations, jpeg quality, blur kernel,
        /// or noise std, depending on --kind.
        #[arg(long)]
        param: Option<f64>,
        /// Attacked instance file (model attacks) or run record (image
        /// attacks).
        #[arg(long)]
        out: PathBuf,
        /// Owner bundle, needed to evaluate image attacks.
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Real dataset for finetuning.
        #[arg(long)]
        data: Option<String>,
        /// Images to evaluate for image attacks.
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Convex-combine the PN parameters of two instances.
    Collude {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Weight on instance A; B gets 1 - alpha.
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain with one loss term dropped and report the effect.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: String,
        #[arg(long, value_enum)]
        drop: DropTerm,
        /// Output run-record file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        progress: bool,
    },
    /// Measure a bundle's clean bit accuracy and FID, as a run record.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        /// Real dataset for the FID reference side.
        #[arg(long)]
        data: Option<String>,
        /// Number of (z, w) draws for the accuracy estimate.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate run records into plain-text tables.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackKind {
    Finetune,
    Prune,
    Quantize,
    Jpeg,
    Blur,
    Noise,
}

#[derive(Clone, Copy, ValueEnum)]
enum DropTerm {
    Lz,
    Lconst,
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn config_path(flag: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p);
    }
    match std::env::var_os("GANMARK_CONFIG") {
        Some(p) => Ok(PathBuf::from(p)),
        None => Err(Error::InvalidArgument(
            "no --config flag and GANMARK_CONFIG is unset".into(),
        )),
    }
}

fn load_config(flag: Option<PathBuf>, seed: Option<u64>) -> Result<TrainingConfig> {
    let path = config_path(flag)?;
    let mut config = TrainingConfig::from_file(&path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn require_param(param: Option<f64>, kind: &str) -> Result<f64> {
    param.ok_or_else(|| Error::InvalidArgument(format!("--kind {kind} needs --param")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, data, out, log, checkpoint, seed, progress } => {
            let config = load_config(config, seed)?;
            let dataset = load_dataset(&data, config.image_size)?;
            let options = TrainOptions {
                checkpoint_path: checkpoint.as_deref(),
                log_path: log.as_deref(),
                progress,
            };
            let bundle = train(&config, &dataset, &options)?;
            save_bundle(&bundle, &out)
        }
        Command::Resume { checkpoint, data, epochs, out, log, progress } => {
            let state = ganmark_core::issuance::load_checkpoint(&checkpoint)?;
            let dataset = load_dataset(&data, state.config.image_size)?;
            let steps = epochs as u64 * steps_per_epoch(&state.config, &dataset);
            drop(state);
            let options = TrainOptions {
                checkpoint_path: Some(&checkpoint),
                log_path: log.as_deref(),
                progress,
            };
            let bundle = resume(&checkpoint, &dataset, steps, &options)?;
            save_bundle(&bundle, &out)
        }
        Command::Issue { bundle, user, registry, out, fingerprint, seed } => {
            let bundle = load_bundle(&bundle)?;
            let w = match fingerprint {
                Some(hex) => Fingerprint::from_hex(&hex, bundle.d_w())?,
                None => {
                    let mut rng = derive_rng(seed, "cli.issue");
                    sample_fingerprint(&mut rng, bundle.d_w())?
                }
            };
            let reg = Registry::open(&registry, bundle.d_w());
            let already = reg
                .records()?
                .iter()
                .any(|r| r.user_id == user && r.fingerprint == w);
            if !already {
                register_user(&reg, &user, &w, &bundle_id(&bundle))?;
            }
            save_instance(&issue_instance(&bundle, &w)?, &out)
        }
        Command::Generate { instance, n, seed, out } => {
            let instance = load_instance(&instance)?;
            generate_images(&instance, n, seed, &out)
        }
        Command::Verify { bundle, registry, images, threshold, report } => {
            let bundle = load_bundle(&bundle)?;
            let reg = Registry::open(&registry, bundle.d_w());
            let mut names: Vec<PathBuf> = std::fs::read_dir(&images)
                .map_err(|e| Error::io(format!("reading {}", images.display()), e))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .is_some_and(|x| x.eq_ignore_ascii_case("png"))
                })
                .collect();
            names.sort();
            if names.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "no .png images under {}",
                    images.display()
                )));
            }
            let mut text = String::new();
            for path in &names {
                let img = load_png(path)?;
                let (extracted, _) = extract_watermark(&bundle.decoder, &img)?;
                let rep = trace_user(&reg, &extracted, threshold)?;
                text.push_str(&format!(
                    "image\t{}\n",
                    path.file_name().unwrap_or_default().to_string_lossy()
                ));
                text.push_str(&rep.to_text());
                text.push('\n');
            }
            write_atomic(&report, text.as_bytes())
        }
        Command::Attack { instance, kind, param, out, bundle, data, n, seed } => {
            let inst = load_instance(&instance)?;
            match kind {
                AttackKind::Prune => {
                    let p = require_param(param, "prune")?;
                    save_instance(&prune_attack(&inst, p)?, &out)
                }
                AttackKind::Quantize => save_instance(&quantize_attack(&inst), &out),
                AttackKind::Finetune => {
                    let iters = require_param(param, "finetune")?;
                    if iters < 0.0 || iters.fract() != 0.0 {
                        return Err(Error::InvalidArgument(format!(
                            "finetune iterations must be a nonnegative integer, got {iters}"
                        )));
                    }
                    let data = data.ok_or_else(|| {
                        Error::InvalidArgument("--kind finetune needs --data".into())
                    })?;
                    let dataset = load_dataset(&data, inst.config.image_size)?;
                    let mut disc = attacker_discriminator(&inst, seed)?;
                    let attacked =
                        finetune_attack(&inst, &mut disc, &dataset, iters as u64, seed)?;
                    save_instance(&attacked, &out)
                }
                AttackKind::Jpeg | AttackKind::Blur | AttackKind::Noise => {
                    let bundle_path = bundle.ok_or_else(|| {
                        Error::InvalidArgument(
                            "image attacks need --bundle for the decoder".into(),
                        )
                    })?;
                    let bundle = load_bundle(&bundle_path)?;
                    let record = image_attack(&inst, &bundle, kind, param, n, seed)?;
                    write_atomic(&out, record.to_text().as_bytes())
                }
            }
        }
        Command::Collude { a, b, alpha, out } => {
            let inst_a = load_instance(&a)?;
            let inst_b = load_instance(&b)?;
            save_instance(&collusion_attack(&inst_a, &inst_b, alpha)?, &out)
        }
        Command::Ablate { config, data, drop, out, seed, progress } => {
            let mut config = load_config(config, seed)?;
            let variant = match drop {
                DropTerm::Lz => {
                    config.lambda_z = 0.0;
                    "no_lz"
                }
                DropTerm::Lconst => {
                    config.lambda_const = 0.0;
                    "no_lconst"
                }
            };
            let dataset = load_dataset(&data, config.image_size)?;
            let options = TrainOptions { progress, ..TrainOptions::default() };
            let bundle = train(&config, &dataset, &options)?;
            let record = ablation_record(&bundle, &dataset, variant)?;
            write_atomic(&out, record.to_text().as_bytes())
        }
        Command::Eval { bundle, data, n, seed, out } => {
            let bundle_path = bundle;
            let bundle = load_bundle(&bundle_path)?;
            let mut rng = derive_rng(seed, "cli.eval");
            let clean_acc = mean_bit_accuracy(&bundle, n, &mut rng)?;
            let run = bundle_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "bundle".into());
            let mut record = RunRecord::new("effectiveness")
                .push("run", run)
                .push("pn_mode", bundle.config.pn_mode)
                .push("clean_acc", format!("{clean_acc:.4}"))
                .push("n", n)
                .push("seed", seed);
            if let Some(data) = data {
                let dataset = load_dataset(&data, bundle.config.image_size)?;
                record = record.push("fid", format!("{:.3}", bundle_fid(&bundle, &dataset)?));
            }
            write_atomic(&out, record.to_text().as_bytes())
        }
        Command::Report { inputs, out } => {
            let mut records = Vec::new();
            for path in &inputs {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
                records.extend(parse_records(&text)?);
            }
            write_atomic(&out, render_tables(&records).as_bytes())
        }
    }
}

fn generate_images(
    instance: &ganmark_core::GeneratorInstance,
    n: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("--n must be >= 1".into()));
    }
    std::fs::create_dir_all(out)
        .map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let mut rng = derive_rng(seed, "cli.generate");
    let mut written = 0usize;
    while written < n {
        let b = (n - written).min(64);
        let zs: Vec<_> = (0..b)
            .map(|_| sample_latent(&mut rng, instance.config.latent_dim))
            .collect::<Result<_>>()?;
        let batch = instance.generate_batch(&latents_to_rows(&zs)?)?;
        for img in unstack_images(&batch) {
            save_png(&img, &out.join(format!("{written:05}.png")))?;
            written += 1;
        }
    }
    Ok(())
}

fn image_attack(
    inst: &ganmark_core::GeneratorInstance,
    bundle: &TrainedBundle,
    kind: AttackKind,
    param: Option<f64>,
    n: usize,
    seed: u64,
) -> Result<RunRecord> {
    use ganmark_core::attacksim::{gaussian_blur, gaussian_noise, jpeg_compress};
    if n == 0 {
        return Err(Error::InvalidArgument("--n must be >= 1".into()));
    }
    let mut rng = derive_rng(seed, "cli.image_attack");
    let d_w = inst.fingerprint.len();
    let mut matched = 0usize;
    let (name, param_text) = match kind {
        AttackKind::Jpeg => ("jpeg", format!("{}", require_param(param, "jpeg")? as u8)),
        AttackKind::Blur => ("blur", format!("{}", require_param(param, "blur")? as usize)),
        AttackKind::Noise => ("noise", format!("{}", require_param(param, "noise")?)),
        _ => unreachable!("model attacks handled by the caller"),
    };
    for _ in 0..n {
        let z = sample_latent(&mut rng, inst.config.latent_dim)?;
        let img = inst.generate(&z)?;
        let attacked = match kind {
            AttackKind::Jpeg => jpeg_compress(&img, require_param(param, "jpeg")? as u8)?,
            AttackKind::Blur => gaussian_blur(&img, require_param(param, "blur")? as usize)?,
            AttackKind::Noise => {
                gaussian_noise(&img, require_param(param, "noise")?, &mut rng)?
            }
            _ => unreachable!(),
        };
        let (extracted, _) = extract_watermark(&bundle.decoder, &attacked)?;
        matched += extracted.matching_bits(&inst.fingerprint)?;
    }
    let acc = matched as f64 / (n * d_w) as f64;
    Ok(RunRecord::new("image_attack")
        .push("attack", name)
        .push("param", param_text)
        .push("acc", format!("{acc:.4}"))
        .push("n", n)
        .push("seed", seed))
}

/// FID between the dataset and fingerprint-randomized bundle samples, using
/// the fixed-seed conv embedder.
fn bundle_fid(bundle: &TrainedBundle, dataset: &ganmark_core::dataset::Dataset) -> Result<f64> {
    let cfg = &bundle.config;
    let mut rng = derive_rng(cfg.seed, "cli.fid");
    let n_eval = 128.min(dataset.len());
    let real: Vec<_> = (0..n_eval).map(|i| dataset.get(i)).collect();
    let mut fakes = Vec::with_capacity(n_eval);
    for _ in 0..n_eval {
        let z = sample_latent(&mut rng, cfg.latent_dim)?;
        let w = sample_fingerprint(&mut rng, cfg.fingerprint_bits)?;
        fakes.push(bundle.generate(&w, &z)?);
    }
    let embedder = RandomConvEmbedder::new(cfg.image_size, 0)?;
    fid_images(&real, &fakes, &embedder)
}

fn ablation_record(
    bundle: &TrainedBundle,
    dataset: &ganmark_core::dataset::Dataset,
    variant: &str,
) -> Result<RunRecord> {
    let cfg = &bundle.config;
    let mut rng = derive_rng(cfg.seed, "cli.ablate.eval");
    let clean_acc = mean_bit_accuracy(bundle, 200, &mut rng)?;

    let mut pair_distance = 0.0;
    let n_pairs = 64;
    for _ in 0..n_pairs {
        let z = sample_latent(&mut rng, cfg.latent_dim)?;
        let w1 = sample_fingerprint(&mut rng, cfg.fingerprint_bits)?;
        let w2 = sample_fingerprint(&mut rng, cfg.fingerprint_bits)?;
        let img1 = bundle.generate(&w1, &z)?;
        let img2 = bundle.generate(&w2, &z)?;
        pair_distance += (&img1 - &img2).mapv(|d| d * d).sum();
    }
    pair_distance /= n_pairs as f64;

    Ok(RunRecord::new("ablation")
        .push("variant", variant)
        .push("clean_acc", format!("{clean_acc:.4}"))
        .push("fid", format!("{:.3}", bundle_fid(bundle, dataset)?))
        .push("pair_distance", format!("{pair_distance:.5}")))
}
