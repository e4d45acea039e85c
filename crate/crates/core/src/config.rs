//! Experiment configuration as flat `key = value` text.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::augment::AugmentConfig;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::model::UNetConfig;
use crate::synthetic::{DatasetConfig, TextureFamily};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> candle_core::DType {
        match self {
            Precision::F32 => candle_core::DType::F32,
            Precision::F64 => candle_core::DType::F64,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Unconditional denoising iterations for the base model before freezing.
    pub pretrain_iters: usize,
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    pub heldout_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            batch_size: 16,
            pretrain_iters: 2000,
            phase1_iters: 20_000,
            phase2_iters: 2_000,
            heldout_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Noising step at which attention is captured; 0 means `T / 2`.
    pub t_eval: usize,
    pub samples: usize,
    pub seed: u64,
    pub sample_steps: usize,
    /// Number of eval samples that are fully sampled for the RMSE metric.
    pub rmse_samples: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { t_eval: 0, samples: 512, seed: 7_777, sample_steps: 50, rmse_samples: 8, batch_size: 32 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: UNetConfig,
    pub schedule: ScheduleConfig,
    pub augment: AugmentConfig,
    pub dataset: DatasetConfig,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
    pub lambda_atv: f64,
    pub precision: Precision,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: UNetConfig::default(),
            schedule: ScheduleConfig::default(),
            augment: AugmentConfig::default(),
            dataset: DatasetConfig::default(),
            optim: OptimConfig::default(),
            eval: EvalConfig::default(),
            lambda_atv: 0.001,
            precision: Precision::F32,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Every recognised key with its one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master random seed for initialization, data and noise"),
    ("out_dir", "directory receiving checkpoints, logs and dumps"),
    ("precision", "f32 or f64 arithmetic for training and evaluation"),
    ("lambda_atv", "weight of the summed attention total-variation terms in the finetune phase"),
    ("model.base_width", "channel count at the finest level"),
    ("model.depth", "number of downsampling stages"),
    ("model.width_mult", "channel multiplier for every level below the finest"),
    ("model.heads", "attention head count"),
    ("model.latent_height", "latent grid height"),
    ("model.latent_width", "latent grid width"),
    ("model.attn_levels", "comma-separated pyramid levels (0 = finest) carrying zero cross-attention"),
    ("model.norm_groups", "maximum group count of group normalization"),
    ("model.ff_mult", "hidden-width multiplier of the attention feed-forward"),
    ("model.pos_enc", "add fixed grid-position features to cross-attention queries and keys (true/false)"),
    ("model.max_tokens", "largest query or key token count accepted by attention"),
    ("model.patch", "image pixels per latent cell along each axis"),
    ("schedule.steps", "number of diffusion steps T"),
    ("schedule.beta_start", "first variance of the linear schedule"),
    ("schedule.beta_end", "last variance of the linear schedule"),
    ("augment.flip_p", "probability of the shared horizontal flip"),
    ("augment.shift_limit", "maximum shift as a fraction of image extent"),
    ("augment.shift_p", "probability of a shift, drawn per stream"),
    ("augment.scale_limit", "maximum relative scale change"),
    ("augment.scale_p", "probability of a rescale, drawn per stream"),
    ("augment.hsv_limit", "maximum hue rotation in degrees"),
    ("augment.hsv_p", "probability of the shared hue rotation"),
    ("augment.contrast_limit", "maximum relative contrast change"),
    ("augment.contrast_p", "probability of the shared contrast change"),
    ("data.height", "image height in pixels"),
    ("data.width", "image width in pixels"),
    ("data.garment_box", "garment box in the clothing image as x0,y0,x1,y1"),
    ("data.max_translate", "largest garment translation in the person image, pixels"),
    ("data.scale_min", "smallest garment scale"),
    ("data.scale_max", "largest garment scale"),
    ("data.max_rotation_deg", "largest garment rotation, degrees"),
    ("data.clothing_translate", "largest garment shift inside the clothing image, pixels"),
    ("data.clothing_scale", "largest relative garment resize inside the clothing image"),
    ("data.mask_margin", "dilation of the garment mask giving the agnostic mask, pixels"),
    ("data.families", "comma-separated texture families (stripes, checkers, glyphs, color_field)"),
    ("optim.lr", "learning rate"),
    ("optim.weight_decay", "decoupled weight decay"),
    ("optim.batch_size", "samples per training iteration"),
    ("optim.pretrain_iters", "unconditional base-model iterations before freezing"),
    ("optim.phase1_iters", "conditioning-branch iterations with the denoising loss"),
    ("optim.phase2_iters", "finetune iterations with the attention total-variation term"),
    ("optim.heldout_size", "size of the fixed held-out batch tracked during training"),
    ("eval.t_eval", "noising step for attention capture; 0 selects T/2"),
    ("eval.samples", "size of the evaluation set"),
    ("eval.seed", "seed of the evaluation set"),
    ("eval.sample_steps", "reverse steps used when sampling"),
    ("eval.rmse_samples", "evaluation samples that are fully sampled for reconstruction error"),
    ("eval.batch_size", "samples per evaluation forward pass"),
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::InvalidArgument(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidArgument(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse_num(key, s)).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let a = &mut self.augment;
        let d = &mut self.dataset;
        let o = &mut self.optim;
        let e = &mut self.eval;
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::InvalidArgument(format!("precision must be f32 or f64, got {v:?}"))),
                }
            }
            "lambda_atv" => self.lambda_atv = parse_num(key, v)?,
            "model.base_width" => m.base_width = parse_num(key, v)?,
            "model.depth" => m.depth = parse_num(key, v)?,
            "model.width_mult" => m.width_mult = parse_num(key, v)?,
            "model.heads" => m.heads = parse_num(key, v)?,
            "model.latent_height" => m.latent_height = parse_num(key, v)?,
            "model.latent_width" => m.latent_width = parse_num(key, v)?,
            "model.attn_levels" => m.attn_levels = parse_list(key, v)?,
            "model.norm_groups" => m.norm_groups = parse_num(key, v)?,
            "model.ff_mult" => m.ff_mult = parse_num(key, v)?,
            "model.pos_enc" => m.pos_enc = parse_bool(key, v)?,
            "model.max_tokens" => m.max_tokens = parse_num(key, v)?,
            "model.patch" => m.patch = parse_num(key, v)?,
            "schedule.steps" => self.schedule.steps = parse_num(key, v)?,
            "schedule.beta_start" => self.schedule.beta_start = parse_num(key, v)?,
            "schedule.beta_end" => self.schedule.beta_end = parse_num(key, v)?,
            "augment.flip_p" => a.flip_p = parse_num(key, v)?,
            "augment.shift_limit" => a.shift_limit = parse_num(key, v)?,
            "augment.shift_p" => a.shift_p = parse_num(key, v)?,
            "augment.scale_limit" => a.scale_limit = parse_num(key, v)?,
            "augment.scale_p" => a.scale_p = parse_num(key, v)?,
            "augment.hsv_limit" => a.hsv_limit = parse_num(key, v)?,
            "augment.hsv_p" => a.hsv_p = parse_num(key, v)?,
            "augment.contrast_limit" => a.contrast_limit = parse_num(key, v)?,
            "augment.contrast_p" => a.contrast_p = parse_num(key, v)?,
            "data.height" => d.height = parse_num(key, v)?,
            "data.width" => d.width = parse_num(key, v)?,
            "data.garment_box" => {
                let b: Vec<f64> = parse_list(key, v)?;
                d.garment_box = b
                    .try_into()
                    .map_err(|_| Error::InvalidArgument(format!("{key}: expected four numbers")))?;
            }
            "data.max_translate" => d.max_translate = parse_num(key, v)?,
            "data.scale_min" => d.scale_min = parse_num(key, v)?,
            "data.scale_max" => d.scale_max = parse_num(key, v)?,
            "data.max_rotation_deg" => d.max_rotation_deg = parse_num(key, v)?,
            "data.clothing_translate" => d.clothing_translate = parse_num(key, v)?,
            "data.clothing_scale" => d.clothing_scale = parse_num(key, v)?,
            "data.mask_margin" => d.mask_margin = parse_num(key, v)?,
            "data.families" => {
                d.families = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        TextureFamily::parse(s).ok_or_else(|| Error::InvalidArgument(format!("unknown texture family {s:?}")))
                    })
                    .collect::<Result<_>>()?
            }
            "optim.lr" => o.lr = parse_num(key, v)?,
            "optim.weight_decay" => o.weight_decay = parse_num(key, v)?,
            "optim.batch_size" => o.batch_size = parse_num(key, v)?,
            "optim.pretrain_iters" => o.pretrain_iters = parse_num(key, v)?,
            "optim.phase1_iters" => o.phase1_iters = parse_num(key, v)?,
            "optim.phase2_iters" => o.phase2_iters = parse_num(key, v)?,
            "optim.heldout_size" => o.heldout_size = parse_num(key, v)?,
            "eval.t_eval" => e.t_eval = parse_num(key, v)?,
            "eval.samples" => e.samples = parse_num(key, v)?,
            "eval.seed" => e.seed = parse_num(key, v)?,
            "eval.sample_steps" => e.sample_steps = parse_num(key, v)?,
            "eval.rmse_samples" => e.rmse_samples = parse_num(key, v)?,
            "eval.batch_size" => e.batch_size = parse_num(key, v)?,
            _ => return Err(Error::InvalidArgument(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let m = &self.model;
        let a = &self.augment;
        let d = &self.dataset;
        let o = &self.optim;
        let e = &self.eval;
        match key {
            "seed" => self.seed.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "precision" => self.precision.name().to_string(),
            "lambda_atv" => self.lambda_atv.to_string(),
            "model.base_width" => m.base_width.to_string(),
            "model.depth" => m.depth.to_string(),
            "model.width_mult" => m.width_mult.to_string(),
            "model.heads" => m.heads.to_string(),
            "model.latent_height" => m.latent_height.to_string(),
            "model.latent_width" => m.latent_width.to_string(),
            "model.attn_levels" => join(&m.attn_levels),
            "model.norm_groups" => m.norm_groups.to_string(),
            "model.ff_mult" => m.ff_mult.to_string(),
            "model.pos_enc" => m.pos_enc.to_string(),
            "model.max_tokens" => m.max_tokens.to_string(),
            "model.patch" => m.patch.to_string(),
            "schedule.steps" => self.schedule.steps.to_string(),
            "schedule.beta_start" => self.schedule.beta_start.to_string(),
            "schedule.beta_end" => self.schedule.beta_end.to_string(),
            "augment.flip_p" => a.flip_p.to_string(),
            "augment.shift_limit" => a.shift_limit.to_string(),
            "augment.shift_p" => a.shift_p.to_string(),
            "augment.scale_limit" => a.scale_limit.to_string(),
            "augment.scale_p" => a.scale_p.to_string(),
            "augment.hsv_limit" => a.hsv_limit.to_string(),
            "augment.hsv_p" => a.hsv_p.to_string(),
            "augment.contrast_limit" => a.contrast_limit.to_string(),
            "augment.contrast_p" => a.contrast_p.to_string(),
            "data.height" => d.height.to_string(),
            "data.width" => d.width.to_string(),
            "data.garment_box" => join(&d.garment_box),
            "data.max_translate" => d.max_translate.to_string(),
            "data.scale_min" => d.scale_min.to_string(),
            "data.scale_max" => d.scale_max.to_string(),
            "data.max_rotation_deg" => d.max_rotation_deg.to_string(),
            "data.clothing_translate" => d.clothing_translate.to_string(),
            "data.clothing_scale" => d.clothing_scale.to_string(),
            "data.mask_margin" => d.mask_margin.to_string(),
            "data.families" => d.families.iter().map(|f| f.name()).collect::<Vec<_>>().join(","),
            "optim.lr" => o.lr.to_string(),
            "optim.weight_decay" => o.weight_decay.to_string(),
            "optim.batch_size" => o.batch_size.to_string(),
            "optim.pretrain_iters" => o.pretrain_iters.to_string(),
            "optim.phase1_iters" => o.phase1_iters.to_string(),
            "optim.phase2_iters" => o.phase2_iters.to_string(),
            "optim.heldout_size" => o.heldout_size.to_string(),
            "eval.t_eval" => e.t_eval.to_string(),
            "eval.samples" => e.samples.to_string(),
            "eval.seed" => e.seed.to_string(),
            "eval.sample_steps" => e.sample_steps.to_string(),
            "eval.rmse_samples" => e.rmse_samples.to_string(),
            "eval.batch_size" => e.batch_size.to_string(),
            _ => unreachable!("key table and getter disagree on {key}"),
        }
    }

    /// Parse `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config { line: i + 1, msg: format!("expected key = value, got {line:?}") })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Config { line: i + 1, msg: e.to_string() })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key with its description as a comment, in table order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (key, doc) in KEYS {
            let _ = writeln!(s, "# {doc}\n{key} = {}", self.get(key));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.build()?;
        self.augment.validate()?;
        self.dataset.validate()?;
        if self.dataset.height != self.model.latent_height * self.model.patch
            || self.dataset.width != self.model.latent_width * self.model.patch
        {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} does not match latent {}x{} at patch {}",
                self.dataset.height, self.dataset.width, self.model.latent_height, self.model.latent_width, self.model.patch
            )));
        }
        if !(self.lambda_atv >= 0.0) {
            return Err(Error::InvalidArgument("lambda_atv must be non-negative".into()));
        }
        if !(self.optim.lr > 0.0) || self.optim.batch_size == 0 {
            return Err(Error::InvalidArgument("learning rate and batch size must be positive".into()));
        }
        if self.eval.t_eval > self.schedule.steps || self.eval.sample_steps == 0 || self.eval.sample_steps > self.schedule.steps {
            return Err(Error::InvalidArgument("evaluation steps outside the schedule".into()));
        }
        Ok(())
    }

    pub fn t_eval(&self) -> usize {
        if self.eval.t_eval == 0 {
            (self.schedule.steps / 2).max(1)
        } else {
            self.eval.t_eval
        }
    }
}
