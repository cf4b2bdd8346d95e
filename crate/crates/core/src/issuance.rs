//! Retraining-free issuance of fingerprinted generator instances, the
//! bundle/instance/checkpoint file container, and the user registry.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic "GMRKWGT1" | version u32 | kind u8 | pn_mode u8 | pn_position u8 |
//! reserved u8 | d_w u32 | d_z u32 | image_size u32 | base_channels u32 |
//! n_points u32 | (p,q,c) u32 x3 per point | n_sections u32 |
//! sections: tag u32, byte_len u64, payload |
//! checksum u64 (first 8 bytes of SHA-256 over everything before it)
//! ```
//!
//! Weight payloads are framed as tensor lists (count u32, then per tensor
//! len u64 + f32 values), so weights round-trip at exactly 32-bit precision.
//! The optimizer keeps every weight and moment on the f32 grid, which makes
//! save/load lossless.

use crate::config::{PnMode, PnPosition, TrainingConfig};
use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::fingerprint::Fingerprint;
use crate::latent::LatentVector;
use crate::nets::{build_backbone, generator_forward, GeneratorBackbone};
use crate::nn::{export_weights, import_weights, snap_f32, Adam};
use crate::pn::{PnBatch, PnParameters};
use crate::rng::derive_rng;
use crate::tensor::Image;
use crate::training::{ParamGenPair, TrainedBundle, TrainerState};
use ndarray::{Array1, Array2, Array3, Array4};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::io::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 8] = b"GMRKWGT1";
const VERSION: u32 = 1;

const KIND_BUNDLE: u8 = 1;
const KIND_INSTANCE: u8 = 2;
const KIND_CHECKPOINT: u8 = 3;

pub const SECTION_CONFIG: u32 = 1;
pub const SECTION_BACKBONE: u32 = 2;
pub const SECTION_PARAMGEN: u32 = 3;
pub const SECTION_DECODER: u32 = 4;
pub const SECTION_INSTANCE: u32 = 5;
pub const SECTION_TRAINSTATE: u32 = 6;
pub const SECTION_LOGREF: u32 = 7;

/// What a user receives: the shared backbone plus their personalized
/// normalization constants. No parameter nets, no decoder.
#[derive(Debug, Clone)]
pub struct GeneratorInstance {
    pub config: TrainingConfig,
    pub backbone: GeneratorBackbone,
    pub fingerprint: Fingerprint,
    /// Baked per-point normalization parameters, on the f32 grid.
    pub pn: Vec<PnParameters>,
    /// Fixed at zero so issuing the same fingerprint twice is bit-identical.
    pub issued_at: u64,
}

impl GeneratorInstance {
    pub fn generate(&self, z: &LatentVector) -> Result<Image> {
        generator_forward(&self.backbone, &self.pn, z)
    }

    /// All rows share this instance's fingerprint.
    pub fn generate_batch(&self, z_rows: &Array2<f64>) -> Result<Array4<f64>> {
        let b = z_rows.nrows();
        let pn: Vec<PnBatch> =
            self.pn.iter().map(|p| repeat_pn(p, b)).collect::<Result<_>>()?;
        self.backbone.forward_batch(z_rows, &pn)
    }
}

pub(crate) fn repeat_pn(params: &PnParameters, b: usize) -> Result<PnBatch> {
    let (gamma, beta, mode) = match params {
        PnParameters::ChannelWise { gamma, beta } => {
            let c = gamma.len();
            let tile = |v: &Array1<f64>| {
                let mut out = Array4::zeros((b, 1, 1, c));
                for mut row in out.outer_iter_mut() {
                    row.index_axis_mut(ndarray::Axis(0), 0)
                        .index_axis_mut(ndarray::Axis(0), 0)
                        .assign(v);
                }
                out
            };
            (tile(gamma), tile(beta), PnMode::ChannelWise)
        }
        PnParameters::ElementWise { gamma, beta } => {
            let (p, q, c) = gamma.dim();
            let tile = |v: &Array3<f64>| {
                let mut out = Array4::zeros((b, p, q, c));
                for mut row in out.outer_iter_mut() {
                    row.assign(v);
                }
                out
            };
            (tile(gamma), tile(beta), PnMode::ElementWise)
        }
    };
    PnBatch::new(mode, gamma, beta)
}

fn snap_pn(params: PnParameters) -> PnParameters {
    match params {
        PnParameters::ChannelWise { gamma, beta } => PnParameters::ChannelWise {
            gamma: gamma.mapv(snap_f32),
            beta: beta.mapv(snap_f32),
        },
        PnParameters::ElementWise { gamma, beta } => PnParameters::ElementWise {
            gamma: gamma.mapv(snap_f32),
            beta: beta.mapv(snap_f32),
        },
    }
}

/// Bake `(F_s(w), F_b(w))` into a distributable instance. Pure feedforward,
/// zero parameter updates; the baked values are snapped to the f32 grid so
/// the instance serializes losslessly.
pub fn issue_instance(bundle: &TrainedBundle, w: &Fingerprint) -> Result<GeneratorInstance> {
    if w.len() != bundle.d_w() {
        return Err(Error::Shape(format!(
            "fingerprint has {} bits, bundle expects {}",
            w.len(),
            bundle.d_w()
        )));
    }
    let pn = bundle.pn_parameters(w)?.into_iter().map(snap_pn).collect();
    Ok(GeneratorInstance {
        config: bundle.config.clone(),
        backbone: bundle.backbone.clone(),
        fingerprint: w.clone(),
        pn,
        issued_at: 0,
    })
}

/// Content address of a bundle: first 8 bytes of the SHA-256 of its backbone
/// weight bytes, in hex.
pub fn bundle_id(bundle: &TrainedBundle) -> String {
    let mut backbone = bundle.backbone.clone();
    let mut hasher = Sha256::new();
    for tensor in export_weights(&mut backbone) {
        for v in tensor {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(16);
    for byte in &digest[..8] {
        write!(out, "{byte:02x}").expect("writing to a string cannot fail");
    }
    out
}

// ---------------------------------------------------------------------------
// Byte-level encoding helpers.

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    fn tensors(&mut self, tensors: &[Vec<f32>]) {
        self.u32(tensors.len() as u32);
        for t in tensors {
            self.u64(t.len() as u64);
            for v in t {
                self.buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    fn section(&mut self, tag: u32, payload: &[u8]) {
        self.u32(tag);
        self.u64(payload.len() as u64);
        self.bytes(payload);
    }

    fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.buf);
        let checksum = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        self.u64(checksum);
        self.buf
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated file: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensors(&mut self) -> Result<Vec<Vec<f32>>> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let len = self.u64()? as usize;
            let raw = self.take(len * 4)?;
            out.push(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            );
        }
        Ok(out)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn mode_byte(mode: PnMode) -> u8 {
    match mode {
        PnMode::ChannelWise => 0,
        PnMode::ElementWise => 1,
    }
}

fn mode_from_byte(b: u8) -> Result<PnMode> {
    match b {
        0 => Ok(PnMode::ChannelWise),
        1 => Ok(PnMode::ElementWise),
        other => Err(Error::Format(format!("unknown pn mode byte {other}"))),
    }
}

fn position_byte(position: PnPosition) -> u8 {
    match position {
        PnPosition::Input => 0,
        PnPosition::Mid => 1,
        PnPosition::Output => 2,
        PnPosition::All => 3,
    }
}

// ---------------------------------------------------------------------------
// Container assembly.

fn header(w: &mut Writer, kind: u8, config: &TrainingConfig, points: &[(usize, usize, usize)]) {
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u8(kind);
    w.u8(mode_byte(config.pn_mode));
    w.u8(position_byte(config.pn_position));
    w.u8(0);
    w.u32(config.fingerprint_bits as u32);
    w.u32(config.latent_dim as u32);
    w.u32(config.image_size as u32);
    w.u32(config.base_channels as u32);
    w.u32(points.len() as u32);
    for &(p, q, c) in points {
        w.u32(p as u32);
        w.u32(q as u32);
        w.u32(c as u32);
    }
}

/// Parses the header and returns `(kind, config_from_section, sections)`.
/// Verifies magic, version, and the trailing checksum.
fn parse(bytes: &[u8]) -> Result<(u8, Vec<(u32, Range<usize>)>)> {
    if bytes.len() < MAGIC.len() + 12 {
        return Err(Error::Format("file too short for header".into()));
    }
    let mut r = Reader::new(bytes);
    if r.take(8)? != MAGIC {
        return Err(Error::Format("bad magic, not a generator container".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version}, expected {VERSION}"
        )));
    }
    let kind = r.u8()?;
    mode_from_byte(r.u8()?)?;
    let position = r.u8()?;
    if position > 3 {
        return Err(Error::Format(format!("unknown pn position byte {position}")));
    }
    r.u8()?;
    for _ in 0..4 {
        r.u32()?;
    }
    let n_points = r.u32()? as usize;
    for _ in 0..n_points * 3 {
        r.u32()?;
    }

    let stored = u64::from_le_bytes(
        bytes[bytes.len() - 8..].try_into().expect("8 bytes"),
    );
    let digest = Sha256::digest(&bytes[..bytes.len() - 8]);
    let computed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    if stored != computed {
        return Err(Error::Format(format!(
            "checksum mismatch: stored {stored:016x}, computed {computed:016x}"
        )));
    }

    let n_sections = r.u32()? as usize;
    let mut sections = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        let tag = r.u32()?;
        let len = r.u64()? as usize;
        let start = r.pos;
        r.take(len)?;
        sections.push((tag, start..start + len));
    }
    if r.pos != bytes.len() - 8 {
        return Err(Error::Format(format!(
            "{} trailing bytes after last section",
            bytes.len() - 8 - r.pos
        )));
    }
    Ok((kind, sections))
}

/// Byte ranges of every section payload in a container file, in file order.
/// The final 8 bytes of any container are its checksum and are not listed.
pub fn section_ranges(bytes: &[u8]) -> Result<Vec<(u32, Range<usize>)>> {
    parse(bytes).map(|(_, sections)| sections)
}

fn find_section<'a>(
    bytes: &'a [u8],
    sections: &[(u32, Range<usize>)],
    tag: u32,
) -> Result<&'a [u8]> {
    sections
        .iter()
        .find(|(t, _)| *t == tag)
        .map(|(_, range)| &bytes[range.clone()])
        .ok_or_else(|| Error::Format(format!("missing section tag {tag}")))
}

fn config_section(config: &TrainingConfig) -> Vec<u8> {
    config.to_key_values().into_bytes()
}

fn config_from(bytes: &[u8]) -> Result<TrainingConfig> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| Error::Format(format!("config section is not utf-8: {e}")))?;
    TrainingConfig::from_key_values(text)
}

fn paramgen_section(pairs: &mut [ParamGenPair]) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(pairs.len() as u32);
    for pair in pairs {
        w.tensors(&export_weights(&mut pair.f_s));
        w.tensors(&export_weights(&mut pair.f_b));
    }
    w.buf
}

fn load_paramgen(bytes: &[u8], config: &TrainingConfig, backbone: &GeneratorBackbone) -> Result<Vec<ParamGenPair>> {
    let mut r = Reader::new(bytes);
    let n = r.u32()? as usize;
    let points = backbone.active_points();
    if n != points.len() {
        return Err(Error::Format(format!(
            "paramgen section has {n} pairs, topology wants {}",
            points.len()
        )));
    }
    let mut rng = derive_rng(0, "load.paramgen");
    let mut pairs = Vec::with_capacity(n);
    for point in points {
        let mut pair = ParamGenPair::new(&mut rng, config, point.shape)?;
        import_weights(&mut pair.f_s, &r.tensors()?)?;
        import_weights(&mut pair.f_b, &r.tensors()?)?;
        pairs.push(pair);
    }
    if !r.done() {
        return Err(Error::Format("trailing bytes in paramgen section".into()));
    }
    Ok(pairs)
}

fn instance_section(inst: &GeneratorInstance) -> Vec<u8> {
    let mut w = Writer::new();
    let bits = inst.fingerprint.bits();
    w.u32(bits.len() as u32);
    let mut packed = vec![0u8; bits.len().div_ceil(8)];
    for (i, &bit) in bits.iter().enumerate() {
        packed[i / 8] |= bit << (7 - i % 8);
    }
    w.bytes(&packed);
    w.u64(inst.issued_at);
    w.u32(inst.pn.len() as u32);
    for params in &inst.pn {
        let (mode, gamma, beta, dims): (_, Vec<f32>, Vec<f32>, (usize, usize, usize)) =
            match params {
                PnParameters::ChannelWise { gamma, beta } => (
                    PnMode::ChannelWise,
                    gamma.iter().map(|&v| v as f32).collect(),
                    beta.iter().map(|&v| v as f32).collect(),
                    (1, 1, gamma.len()),
                ),
                PnParameters::ElementWise { gamma, beta } => (
                    PnMode::ElementWise,
                    gamma.iter().map(|&v| v as f32).collect(),
                    beta.iter().map(|&v| v as f32).collect(),
                    gamma.dim(),
                ),
            };
        w.u8(mode_byte(mode));
        w.u32(dims.0 as u32);
        w.u32(dims.1 as u32);
        w.u32(dims.2 as u32);
        w.tensors(&[gamma, beta]);
    }
    w.buf
}

fn load_instance_section(bytes: &[u8]) -> Result<(Fingerprint, u64, Vec<PnParameters>)> {
    let mut r = Reader::new(bytes);
    let bit_len = r.u32()? as usize;
    let packed = r.take(bit_len.div_ceil(8))?;
    let bits: Vec<u8> = (0..bit_len)
        .map(|i| (packed[i / 8] >> (7 - i % 8)) & 1)
        .collect();
    let fingerprint = Fingerprint::from_bits(bits)?;
    let issued_at = r.u64()?;
    let n_points = r.u32()? as usize;
    let mut pn = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let mode = mode_from_byte(r.u8()?)?;
        let p = r.u32()? as usize;
        let q = r.u32()? as usize;
        let c = r.u32()? as usize;
        let tensors = r.tensors()?;
        if tensors.len() != 2 {
            return Err(Error::Format(format!(
                "pn point carries {} tensors, expected gamma and beta",
                tensors.len()
            )));
        }
        let expect = match mode {
            PnMode::ChannelWise => c,
            PnMode::ElementWise => p * q * c,
        };
        for t in &tensors {
            if t.len() != expect {
                return Err(Error::Format(format!(
                    "pn tensor has {} values, shape says {expect}",
                    t.len()
                )));
            }
        }
        let to_f64 = |t: &[f32]| t.iter().map(|&v| v as f64).collect::<Vec<f64>>();
        let params = match mode {
            PnMode::ChannelWise => PnParameters::ChannelWise {
                gamma: Array1::from_vec(to_f64(&tensors[0])),
                beta: Array1::from_vec(to_f64(&tensors[1])),
            },
            PnMode::ElementWise => PnParameters::ElementWise {
                gamma: Array3::from_shape_vec((p, q, c), to_f64(&tensors[0]))
                    .map_err(|e| Error::Format(format!("pn gamma shape: {e}")))?,
                beta: Array3::from_shape_vec((p, q, c), to_f64(&tensors[1]))
                    .map_err(|e| Error::Format(format!("pn beta shape: {e}")))?,
            },
        };
        pn.push(params);
    }
    if !r.done() {
        return Err(Error::Format("trailing bytes in instance section".into()));
    }
    Ok((fingerprint, issued_at, pn))
}

fn adam_state(w: &mut Writer, adam: &Adam) {
    let (t, m, v) = adam.state();
    w.u64(t);
    let to_f32 = |ts: &[Vec<f64>]| {
        ts.iter()
            .map(|t| t.iter().map(|&x| x as f32).collect::<Vec<f32>>())
            .collect::<Vec<_>>()
    };
    w.tensors(&to_f32(m));
    w.tensors(&to_f32(v));
}

fn load_adam(r: &mut Reader, lr: f64) -> Result<Adam> {
    let t = r.u64()?;
    let widen = |ts: Vec<Vec<f32>>| {
        ts.into_iter()
            .map(|t| t.into_iter().map(f64::from).collect::<Vec<f64>>())
            .collect::<Vec<_>>()
    };
    let m = widen(r.tensors()?);
    let v = widen(r.tensors()?);
    let mut adam = Adam::new(lr);
    adam.restore(t, m, v);
    Ok(adam)
}

// ---------------------------------------------------------------------------
// Public save/load entry points.

fn points_of(backbone: &GeneratorBackbone) -> Vec<(usize, usize, usize)> {
    backbone.active_points().iter().map(|p| p.shape).collect()
}

pub fn save_bundle(bundle: &TrainedBundle, path: &Path) -> Result<()> {
    let mut backbone = bundle.backbone.clone();
    let mut decoder = bundle.decoder.clone();
    let mut pairs = bundle.param_gens.clone();
    let mut w = Writer::new();
    header(&mut w, KIND_BUNDLE, &bundle.config, &points_of(&bundle.backbone));
    let n_sections = 4 + usize::from(bundle.log_path.is_some());
    w.u32(n_sections as u32);
    w.section(SECTION_CONFIG, &config_section(&bundle.config));
    let mut bb = Writer::new();
    bb.tensors(&export_weights(&mut backbone));
    w.section(SECTION_BACKBONE, &bb.buf);
    w.section(SECTION_PARAMGEN, &paramgen_section(&mut pairs));
    let mut dec = Writer::new();
    dec.tensors(&export_weights(&mut decoder));
    w.section(SECTION_DECODER, &dec.buf);
    if let Some(log) = &bundle.log_path {
        w.section(SECTION_LOGREF, log.as_bytes());
    }
    write_atomic(path, &w.finish())
}

pub fn load_bundle(path: &Path) -> Result<TrainedBundle> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::io(format!("reading bundle {}", path.display()), e))?;
    let (kind, sections) = parse(&bytes)?;
    if kind != KIND_BUNDLE {
        return Err(Error::Format(format!(
            "not a bundle file (kind tag {kind})"
        )));
    }
    let config = config_from(find_section(&bytes, &sections, SECTION_CONFIG)?)?;
    let (mut backbone, _, mut decoder) = build_backbone(&config)?;
    let mut r = Reader::new(find_section(&bytes, &sections, SECTION_BACKBONE)?);
    import_weights(&mut backbone, &r.tensors()?)?;
    let param_gens = load_paramgen(
        find_section(&bytes, &sections, SECTION_PARAMGEN)?,
        &config,
        &backbone,
    )?;
    let mut r = Reader::new(find_section(&bytes, &sections, SECTION_DECODER)?);
    import_weights(&mut decoder, &r.tensors()?)?;
    let log_path = sections
        .iter()
        .find(|(t, _)| *t == SECTION_LOGREF)
        .map(|(_, range)| String::from_utf8_lossy(&bytes[range.clone()]).into_owned());
    Ok(TrainedBundle { config, backbone, param_gens, decoder, log_path })
}

pub fn save_instance(inst: &GeneratorInstance, path: &Path) -> Result<()> {
    let mut backbone = inst.backbone.clone();
    let mut w = Writer::new();
    header(&mut w, KIND_INSTANCE, &inst.config, &points_of(&inst.backbone));
    w.u32(3);
    w.section(SECTION_CONFIG, &config_section(&inst.config));
    let mut bb = Writer::new();
    bb.tensors(&export_weights(&mut backbone));
    w.section(SECTION_BACKBONE, &bb.buf);
    w.section(SECTION_INSTANCE, &instance_section(inst));
    write_atomic(path, &w.finish())
}

pub fn load_instance(path: &Path) -> Result<GeneratorInstance> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::io(format!("reading instance {}", path.display()), e))?;
    let (kind, sections) = parse(&bytes)?;
    if kind != KIND_INSTANCE {
        return Err(Error::Format(format!(
            "not an instance file (kind tag {kind})"
        )));
    }
    let config = config_from(find_section(&bytes, &sections, SECTION_CONFIG)?)?;
    let (mut backbone, _, _) = build_backbone(&config)?;
    let mut r = Reader::new(find_section(&bytes, &sections, SECTION_BACKBONE)?);
    import_weights(&mut backbone, &r.tensors()?)?;
    let (fingerprint, issued_at, pn) =
        load_instance_section(find_section(&bytes, &sections, SECTION_INSTANCE)?)?;
    if pn.len() != backbone.active_points().len() {
        return Err(Error::Format(format!(
            "instance has {} pn points, topology wants {}",
            pn.len(),
            backbone.active_points().len()
        )));
    }
    Ok(GeneratorInstance { config, backbone, fingerprint, pn, issued_at })
}

pub fn save_checkpoint(state: &mut TrainerState, path: &Path) -> Result<()> {
    let mut w = Writer::new();
    header(&mut w, KIND_CHECKPOINT, &state.config, &points_of(&state.backbone));
    let n_sections = 5;
    w.u32(n_sections);
    w.section(SECTION_CONFIG, &config_section(&state.config));
    let mut bb = Writer::new();
    bb.tensors(&export_weights(&mut state.backbone));
    w.section(SECTION_BACKBONE, &bb.buf);
    w.section(SECTION_PARAMGEN, &paramgen_section(&mut state.param_gens));
    let mut dec = Writer::new();
    dec.tensors(&export_weights(&mut state.decoder));
    w.section(SECTION_DECODER, &dec.buf);
    let mut ts = Writer::new();
    ts.u64(state.steps_done);
    adam_state(&mut ts, &state.adam_gen);
    adam_state(&mut ts, &state.adam_disc);
    ts.tensors(&export_weights(&mut state.discriminator));
    w.section(SECTION_TRAINSTATE, &ts.buf);
    write_atomic(path, &w.finish())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainerState> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    let (kind, sections) = parse(&bytes)?;
    if kind != KIND_CHECKPOINT {
        return Err(Error::Format(format!(
            "not a checkpoint file (kind tag {kind})"
        )));
    }
    let config = config_from(find_section(&bytes, &sections, SECTION_CONFIG)?)?;
    let (mut backbone, mut discriminator, mut decoder) = build_backbone(&config)?;
    let mut r = Reader::new(find_section(&bytes, &sections, SECTION_BACKBONE)?);
    import_weights(&mut backbone, &r.tensors()?)?;
    let param_gens = load_paramgen(
        find_section(&bytes, &sections, SECTION_PARAMGEN)?,
        &config,
        &backbone,
    )?;
    let mut r = Reader::new(find_section(&bytes, &sections, SECTION_DECODER)?);
    import_weights(&mut decoder, &r.tensors()?)?;

    let mut r = Reader::new(find_section(&bytes, &sections, SECTION_TRAINSTATE)?);
    let steps_done = r.u64()?;
    let adam_gen = load_adam(&mut r, config.lr_gen)?;
    let adam_disc = load_adam(&mut r, config.lr_disc)?;
    import_weights(&mut discriminator, &r.tensors()?)?;
    if !r.done() {
        return Err(Error::Format("trailing bytes in train state section".into()));
    }
    Ok(TrainerState {
        config,
        backbone,
        param_gens,
        decoder,
        discriminator,
        adam_gen,
        adam_disc,
        steps_done,
    })
}

// ---------------------------------------------------------------------------
// Registry.

/// One line of the registry file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryRecord {
    pub user_id: String,
    pub fingerprint: Fingerprint,
    pub bundle_id: String,
    pub issued_at_unix: u64,
}

/// Append-only tab-separated user registry. Each complete line is
/// `user_id \t fingerprint_hex \t bundle_id \t issued_at_unix`. A trailing
/// line without a newline is treated as a torn write and ignored.
#[derive(Debug, Clone)]
pub struct Registry {
    path: PathBuf,
    d_w: usize,
}

impl Registry {
    pub fn open(path: impl Into<PathBuf>, d_w: usize) -> Registry {
        Registry { path: path.into(), d_w }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// All durably recorded entries. A missing file is an empty registry.
    pub fn records(&self) -> Result<Vec<RegistryRecord>> {
        let text = match std::fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => {
                return Err(Error::io(
                    format!("reading registry {}", self.path.display()),
                    e,
                ))
            }
        };
        let mut records = Vec::new();
        let mut rest = text.as_str();
        while let Some(nl) = rest.find('\n') {
            let line = &rest[..nl];
            rest = &rest[nl + 1..];
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Format(format!(
                    "registry line has {} fields, expected 4: {line:?}",
                    fields.len()
                )));
            }
            let fingerprint = Fingerprint::from_hex(fields[1], self.d_w)?;
            let issued_at_unix = fields[3].parse::<u64>().map_err(|e| {
                Error::Format(format!("bad registry timestamp {:?}: {e}", fields[3]))
            })?;
            records.push(RegistryRecord {
                user_id: fields[0].to_string(),
                fingerprint,
                bundle_id: fields[2].to_string(),
                issued_at_unix,
            });
        }
        // `rest` is now a torn trailing fragment, if any; drop it.
        Ok(records)
    }

    pub fn lookup(&self, fingerprint: &Fingerprint) -> Result<Option<RegistryRecord>> {
        Ok(self
            .records()?
            .into_iter()
            .find(|r| &r.fingerprint == fingerprint))
    }
}

/// Durably append one user record. Fails on duplicate user id or fingerprint
/// without touching the file.
pub fn register_user(
    registry: &Registry,
    user_id: &str,
    w: &Fingerprint,
    bundle_id: &str,
) -> Result<RegistryRecord> {
    if user_id.is_empty() || user_id.contains(['\t', '\n']) {
        return Err(Error::InvalidArgument(format!(
            "user id {user_id:?} is empty or contains separators"
        )));
    }
    if w.len() != registry.d_w {
        return Err(Error::Shape(format!(
            "fingerprint has {} bits, registry expects {}",
            w.len(),
            registry.d_w
        )));
    }
    for existing in registry.records()? {
        if existing.user_id == user_id {
            return Err(Error::Conflict(format!("user {user_id:?} already registered")));
        }
        if existing.fingerprint == *w {
            return Err(Error::Conflict(format!(
                "fingerprint {} already assigned to user {:?}",
                w.to_hex(),
                existing.user_id
            )));
        }
    }
    let issued_at_unix = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let record = RegistryRecord {
        user_id: user_id.to_string(),
        fingerprint: w.clone(),
        bundle_id: bundle_id.to_string(),
        issued_at_unix,
    };
    let line = format!(
        "{}\t{}\t{}\t{}\n",
        record.user_id,
        record.fingerprint.to_hex(),
        record.bundle_id,
        record.issued_at_unix
    );
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&registry.path)
        .map_err(|e| Error::io(format!("opening registry {}", registry.path.display()), e))?;
    file.write_all(line.as_bytes())
        .map_err(|e| Error::io("appending registry record", e))?;
    file.sync_all()
        .map_err(|e| Error::io("syncing registry", e))?;
    Ok(record)
}
