//! Checkpoint directories: a text manifest, one little-endian f32 weight blob
//! and one little-endian f64 blob holding the variance schedule.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use candle_core::Device;

use crate::config::ExperimentConfig;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::model::{ParamRole, TryOnModel};

pub const MANIFEST: &str = "manifest.txt";
pub const WEIGHTS: &str = "weights.bin";
pub const SCHEDULE: &str = "schedule.bin";
const FORMAT: &str = "tryon-checkpoint-1";

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), msg: msg.into() }
}

/// One parameter record from a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the weight blob.
    pub offset: usize,
    pub frozen: bool,
}

/// Write `model`, `sched` and the experiment config into `dir`.
pub fn save(dir: &Path, model: &TryOnModel, sched: &NoiseSchedule, cfg: &ExperimentConfig, phase: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "format = {FORMAT}");
    let _ = writeln!(manifest, "phase = {phase}");
    let _ = writeln!(manifest, "dtype = f32");
    let _ = writeln!(manifest, "weights = {WEIGHTS}");
    let _ = writeln!(manifest, "schedule = {SCHEDULE}");
    let _ = writeln!(manifest, "schedule_len = {}", sched.steps());
    for line in cfg.to_text().lines().filter(|l| !l.starts_with('#')) {
        let _ = writeln!(manifest, "config.{line}");
    }
    let mut blob = Vec::new();
    for e in model.store().entries() {
        let values = model.store().values(&e.name)?;
        let shape: Vec<String> = e.var.dims().iter().map(ToString::to_string).collect();
        let _ = writeln!(
            manifest,
            "param = {} shape={} offset={} frozen={}",
            e.name,
            shape.join("x"),
            blob.len(),
            e.role == ParamRole::Base
        );
        for v in values {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut sched_blob = Vec::with_capacity(sched.steps() * 8);
    for b in sched.betas() {
        sched_blob.extend_from_slice(&b.to_le_bytes());
    }
    fs::write(dir.join(WEIGHTS), blob)?;
    fs::write(dir.join(SCHEDULE), sched_blob)?;
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Parsed manifest contents.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub phase: String,
    pub config: ExperimentConfig,
    pub params: Vec<ManifestEntry>,
    pub schedule_len: usize,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)?;
    let mut phase = None;
    let mut schedule_len = None;
    let mut config_text = String::new();
    let mut params = Vec::new();
    let mut format_ok = false;
    for line in text.lines() {
        let (k, v) = line.split_once(" = ").ok_or_else(|| format_err(&path, format!("bad line {line:?}")))?;
        match k {
            "format" => format_ok = v == FORMAT,
            "phase" => phase = Some(v.to_string()),
            "dtype" if v != "f32" => return Err(format_err(&path, format!("unsupported dtype {v}"))),
            "schedule_len" => schedule_len = v.parse().ok(),
            "param" => {
                let mut parts = v.split(' ');
                let name = parts.next().unwrap_or_default().to_string();
                let mut shape = None;
                let mut offset = None;
                let mut frozen = None;
                for p in parts {
                    match p.split_once('=') {
                        Some(("shape", s)) => shape = s.split('x').map(|d| d.parse().ok()).collect::<Option<Vec<usize>>>(),
                        Some(("offset", s)) => offset = s.parse().ok(),
                        Some(("frozen", s)) => frozen = s.parse().ok(),
                        _ => return Err(format_err(&path, format!("bad param field {p:?}"))),
                    }
                }
                match (shape, offset, frozen) {
                    (Some(shape), Some(offset), Some(frozen)) => params.push(ManifestEntry { name, shape, offset, frozen }),
                    _ => return Err(format_err(&path, format!("incomplete param record {v:?}"))),
                }
            }
            _ => {
                if let Some(key) = k.strip_prefix("config.") {
                    let _ = writeln!(config_text, "{key} = {v}");
                }
            }
        }
    }
    if !format_ok {
        return Err(format_err(&path, "missing or unknown format tag"));
    }
    Ok(Manifest {
        phase: phase.ok_or_else(|| format_err(&path, "missing phase"))?,
        config: ExperimentConfig::parse(&config_text)?,
        params,
        schedule_len: schedule_len.ok_or_else(|| format_err(&path, "missing schedule_len"))?,
    })
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: TryOnModel,
    pub schedule: NoiseSchedule,
    pub config: ExperimentConfig,
    pub phase: String,
}

pub fn load(dir: &Path, device: &Device) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let cfg = manifest.config.clone();
    let model = TryOnModel::new(&cfg.model, cfg.seed, cfg.precision.dtype(), device)?;
    let blob_path = dir.join(WEIGHTS);
    let blob = fs::read(&blob_path)?;
    let store = model.store();
    if manifest.params.len() != store.entries().len() {
        return Err(format_err(&blob_path, "parameter count differs from the model structure"));
    }
    for (rec, e) in manifest.params.iter().zip(store.entries()) {
        if rec.name != e.name || rec.shape != e.var.dims() || rec.frozen != (e.role == ParamRole::Base) {
            return Err(format_err(&blob_path, format!("record {} does not match parameter {}", rec.name, e.name)));
        }
        let n = e.var.elem_count();
        let bytes = blob
            .get(rec.offset..rec.offset + 4 * n)
            .ok_or_else(|| format_err(&blob_path, format!("{} extends past the end of the blob", rec.name)))?;
        let values: Vec<f64> =
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        store.set_values(&e.name, &values)?;
    }
    let sched_path = dir.join(SCHEDULE);
    let sb = fs::read(&sched_path)?;
    if sb.len() != 8 * manifest.schedule_len {
        return Err(format_err(&sched_path, "schedule blob length mismatch"));
    }
    let betas: Vec<f64> = sb.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(Checkpoint { model, schedule: NoiseSchedule::from_betas(betas)?, config: cfg, phase: manifest.phase })
}
