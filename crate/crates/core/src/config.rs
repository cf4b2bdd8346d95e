//! Training configuration and its plain-text key=value file format.

use crate::error::{Error, Result};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// How the normalization parameters are shaped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PnMode {
    /// One (gamma, beta) pair per channel.
    ChannelWise,
    /// A full (gamma, beta) entry per spatial location and channel.
    ElementWise,
}

impl PnMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PnMode::ChannelWise => "channel_wise",
            PnMode::ElementWise => "element_wise",
        }
    }

    pub fn tag(&self) -> u8 {
        match self {
            PnMode::ChannelWise => 0,
            PnMode::ElementWise => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(PnMode::ChannelWise),
            1 => Ok(PnMode::ElementWise),
            other => Err(Error::Format(format!("unknown pn mode tag {other}"))),
        }
    }
}

impl FromStr for PnMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channel_wise" => Ok(PnMode::ChannelWise),
            "element_wise" => Ok(PnMode::ElementWise),
            other => Err(Error::Config(format!("unknown pn_mode {other:?}"))),
        }
    }
}

impl fmt::Display for PnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where the personalized-normalization layer sits in the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PnPosition {
    /// Right after the first (projection) block.
    Input,
    /// After the middle convolutional block.
    Mid,
    /// After the last convolutional block, i.e. the penultimate layer (default).
    Output,
    /// After every block.
    All,
}

impl PnPosition {
    pub fn as_str(&self) -> &'static str {
        match self {
            PnPosition::Input => "input",
            PnPosition::Mid => "mid",
            PnPosition::Output => "output",
            PnPosition::All => "all",
        }
    }

    pub fn tag(&self) -> u8 {
        match self {
            PnPosition::Input => 0,
            PnPosition::Mid => 1,
            PnPosition::Output => 2,
            PnPosition::All => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(PnPosition::Input),
            1 => Ok(PnPosition::Mid),
            2 => Ok(PnPosition::Output),
            3 => Ok(PnPosition::All),
            other => Err(Error::Format(format!("unknown pn position tag {other}"))),
        }
    }
}

impl FromStr for PnPosition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(PnPosition::Input),
            "mid" => Ok(PnPosition::Mid),
            "output" => Ok(PnPosition::Output),
            "all" => Ok(PnPosition::All),
            other => Err(Error::Config(format!("unknown pn_position {other:?}"))),
        }
    }
}

impl fmt::Display for PnPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parameters of the train-time image-processing layer, doubling as the
/// ranges the evaluation attacks draw from.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackLayerConfig {
    pub jpeg_qf_min: u8,
    pub jpeg_qf_max: u8,
    pub blur_kernel_min: u8,
    pub blur_kernel_max: u8,
    pub noise_std_min: f64,
    pub noise_std_max: f64,
    /// Probability that each processing is (independently) applied.
    pub probability: f64,
}

impl Default for AttackLayerConfig {
    fn default() -> Self {
        AttackLayerConfig {
            jpeg_qf_min: 20,
            jpeg_qf_max: 50,
            blur_kernel_min: 0,
            blur_kernel_max: 9,
            noise_std_min: 0.001,
            noise_std_max: 0.15,
            probability: 0.15,
        }
    }
}

impl AttackLayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.jpeg_qf_min < 1 || self.jpeg_qf_max > 100 || self.jpeg_qf_min > self.jpeg_qf_max {
            return Err(Error::Config("jpeg quality range must satisfy 1 <= min <= max <= 100".into()));
        }
        if self.blur_kernel_min > self.blur_kernel_max {
            return Err(Error::Config("blur kernel range must satisfy min <= max".into()));
        }
        if self.noise_std_min < 0.0 || self.noise_std_min > self.noise_std_max {
            return Err(Error::Config("noise std range must satisfy 0 <= min <= max".into()));
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Config("attack probability must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Everything a training run needs, and everything the key=value file carries.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    /// Fingerprint payload width in bits.
    pub fingerprint_bits: usize,
    /// Latent noise dimension.
    pub latent_dim: usize,
    /// Square image side in pixels; must be a power of two >= 8.
    pub image_size: usize,
    /// Weight on the generator adversarial term.
    pub lambda_adv: f64,
    /// Weight on the watermark extraction term.
    pub lambda_wm: f64,
    /// Weight on the latent reconstruction term.
    pub lambda_z: f64,
    /// Weight on the cross-fingerprint image consistency term.
    pub lambda_const: f64,
    pub pn_mode: PnMode,
    pub pn_position: PnPosition,
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate for generator, parameter generators, and decoder.
    pub lr_gen: f64,
    /// Learning rate for the discriminator.
    pub lr_disc: f64,
    /// Channel width of the generator's final up-block; earlier blocks double
    /// it (capped at 4x). Also the channel count seen by the default
    /// normalization position.
    pub base_channels: usize,
    pub attack: AttackLayerConfig,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            fingerprint_bits: 32,
            latent_dim: 64,
            image_size: 32,
            lambda_adv: 1.0,
            lambda_wm: 1.0,
            lambda_z: 0.1,
            lambda_const: 1.0,
            pn_mode: PnMode::ChannelWise,
            pn_position: PnPosition::Output,
            epochs: 10,
            batch_size: 64,
            lr_gen: 2e-4,
            lr_disc: 2e-4,
            base_channels: 16,
            attack: AttackLayerConfig::default(),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fingerprint_bits == 0 {
            return Err(Error::Config("fingerprint_bits must be >= 1".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be >= 1".into()));
        }
        if self.image_size < 8 || !self.image_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "image_size must be a power of two >= 8, got {}",
                self.image_size
            )));
        }
        for (name, v) in [
            ("lambda_adv", self.lambda_adv),
            ("lambda_wm", self.lambda_wm),
            ("lambda_z", self.lambda_z),
            ("lambda_const", self.lambda_const),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a nonnegative real")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr_gen >= 0.0 && self.lr_disc >= 0.0)
            || !self.lr_gen.is_finite()
            || !self.lr_disc.is_finite()
        {
            return Err(Error::Config("learning rates must be nonnegative reals".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        self.attack.validate()
    }

    /// Canonical key=value rendering. Keys are emitted in a fixed order so
    /// serialized configs are diffable and hashable.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("fingerprint_bits", self.fingerprint_bits.to_string());
        kv("latent_dim", self.latent_dim.to_string());
        kv("image_size", self.image_size.to_string());
        kv("lambda_adv", self.lambda_adv.to_string());
        kv("lambda_wm", self.lambda_wm.to_string());
        kv("lambda_z", self.lambda_z.to_string());
        kv("lambda_const", self.lambda_const.to_string());
        kv("pn_mode", self.pn_mode.to_string());
        kv("pn_position", self.pn_position.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr_gen", self.lr_gen.to_string());
        kv("lr_disc", self.lr_disc.to_string());
        kv("base_channels", self.base_channels.to_string());
        kv("jpeg_qf_min", self.attack.jpeg_qf_min.to_string());
        kv("jpeg_qf_max", self.attack.jpeg_qf_max.to_string());
        kv("blur_kernel_min", self.attack.blur_kernel_min.to_string());
        kv("blur_kernel_max", self.attack.blur_kernel_max.to_string());
        kv("noise_std_min", self.attack.noise_std_min.to_string());
        kv("noise_std_max", self.attack.noise_std_max.to_string());
        kv("attack_probability", self.attack.probability.to_string());
        kv("seed", self.seed.to_string());
        s
    }

    /// Parse a key=value document. Missing keys keep their defaults; unknown
    /// keys are an error. `#` starts a comment, blank lines are skipped.
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut cfg = TrainingConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                Error::Config(format!("line {}: {key} expects {what}, got {value:?}", lineno + 1))
            };
            match key {
                "fingerprint_bits" => cfg.fingerprint_bits = value.parse().map_err(|_| bad("a positive integer"))?,
                "latent_dim" => cfg.latent_dim = value.parse().map_err(|_| bad("a positive integer"))?,
                "image_size" => cfg.image_size = value.parse().map_err(|_| bad("a positive integer"))?,
                "lambda_adv" => cfg.lambda_adv = value.parse().map_err(|_| bad("a real"))?,
                "lambda_wm" => cfg.lambda_wm = value.parse().map_err(|_| bad("a real"))?,
                "lambda_z" => cfg.lambda_z = value.parse().map_err(|_| bad("a real"))?,
                "lambda_const" => cfg.lambda_const = value.parse().map_err(|_| bad("a real"))?,
                "pn_mode" => cfg.pn_mode = value.parse()?,
                "pn_position" => cfg.pn_position = value.parse()?,
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad("a positive integer"))?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("a positive integer"))?,
                "lr_gen" => cfg.lr_gen = value.parse().map_err(|_| bad("a real"))?,
                "lr_disc" => cfg.lr_disc = value.parse().map_err(|_| bad("a real"))?,
                "base_channels" => cfg.base_channels = value.parse().map_err(|_| bad("a positive integer"))?,
                "jpeg_qf_min" => cfg.attack.jpeg_qf_min = value.parse().map_err(|_| bad("an integer in 1..=100"))?,
                "jpeg_qf_max" => cfg.attack.jpeg_qf_max = value.parse().map_err(|_| bad("an integer in 1..=100"))?,
                "blur_kernel_min" => cfg.attack.blur_kernel_min = value.parse().map_err(|_| bad("an integer"))?,
                "blur_kernel_max" => cfg.attack.blur_kernel_max = value.parse().map_err(|_| bad("an integer"))?,
                "noise_std_min" => cfg.attack.noise_std_min = value.parse().map_err(|_| bad("a real"))?,
                "noise_std_max" => cfg.attack.noise_std_max = value.parse().map_err(|_| bad("a real"))?,
                "attack_probability" => cfg.attack.probability = value.parse().map_err(|_| bad("a real in [0,1]"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("an unsigned integer"))?,
                other => {
                    return Err(Error::Config(format!("line {}: unknown key {other:?}", lineno + 1)))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_key_values(&text)
    }
}
