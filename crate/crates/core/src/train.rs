//! Base pre-training, conditioning-branch training and the attention
//! total-variation finetune.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_pair, AugmentConfig};
use crate::codec;
use crate::config::ExperimentConfig;
use crate::diffusion::{forward_diffuse, gaussian_latent, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{stack_images_nhwc, AttentionCapture, ConditionBundle, ParamRole, TryOnModel};
use crate::objectives::{atv_loss_tensor, center_map_tensor, ldm_loss_tensor, normalized_grid};
use crate::synthetic::{generate_indexed, SyntheticSample};
use crate::tensor::{BinaryMask, LatentTensor};

/// Header of every per-iteration loss log.
pub const LOSS_CSV_HEADER: &str = "iter,loss_ldm,loss_atv,loss_total";
pub const HELDOUT_CSV_HEADER: &str = "iter,heldout_ldm";

// Stream offsets that keep training, held-out and noise draws disjoint.
const AUG_STREAM: u64 = 1 << 40;
const NOISE_STREAM: u64 = 2 << 40;
const HELDOUT_SEED_SALT: u64 = 0x5eed_0f_4e1d;

/// A sample reduced to what the denoiser consumes.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub z0: LatentTensor,
    pub bundle: ConditionBundle,
    pub garment_mask: BinaryMask,
}

impl PreparedSample {
    pub fn new(sample: &SyntheticSample, patch: usize) -> Result<Self> {
        Ok(Self {
            z0: codec::encode(&sample.person, patch)?,
            bundle: ConditionBundle::from_sample(sample, patch)?,
            garment_mask: sample.garment_mask.clone(),
        })
    }
}

/// One forward-ready batch with its noising draws.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(b, H, W, 13)` conditioned input.
    pub zeta: Tensor,
    /// `(b, H, W, 4)` noisy latent alone.
    pub z_t: Tensor,
    pub eps: Tensor,
    pub steps: Vec<usize>,
    pub clothing_lat: Tensor,
    pub clothing_img: Tensor,
    pub garment_masks: Vec<BinaryMask>,
}

/// Noise each sample at its own step. `steps` fixes the step per sample;
/// otherwise steps are drawn uniformly from `1..=T`.
pub fn make_batch<R: Rng + ?Sized>(
    samples: &[PreparedSample],
    sched: &NoiseSchedule,
    steps: Option<&[usize]>,
    rng: &mut R,
    dtype: DType,
    device: &Device,
) -> Result<Batch> {
    let mut zetas = Vec::with_capacity(samples.len());
    let mut zts = Vec::with_capacity(samples.len());
    let mut epss = Vec::with_capacity(samples.len());
    let mut ts = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let t = match steps {
            Some(v) => v[i],
            None => rng.random_range(1..=sched.steps()),
        };
        let (c, h, w) = s.z0.shape();
        let eps = gaussian_latent(rng, c, h, w);
        let z_t = forward_diffuse(&s.z0, t, &eps, sched)?;
        zetas.push(s.bundle.zeta(&z_t)?);
        zts.push(z_t);
        epss.push(eps);
        ts.push(t);
    }
    fn refs(v: &[LatentTensor]) -> Vec<&LatentTensor> {
        v.iter().collect()
    }
    let cl: Vec<&LatentTensor> = samples.iter().map(|s| &s.bundle.clothing_lat).collect();
    let imgs: Vec<_> = samples.iter().map(|s| &s.bundle.clothing).collect();
    Ok(Batch {
        zeta: LatentTensor::stack_nhwc(&refs(&zetas), dtype, device)?,
        z_t: LatentTensor::stack_nhwc(&refs(&zts), dtype, device)?,
        eps: LatentTensor::stack_nhwc(&refs(&epss), dtype, device)?,
        steps: ts,
        clothing_lat: LatentTensor::stack_nhwc(&cl, dtype, device)?,
        clothing_img: stack_images_nhwc(&imgs, dtype, device)?,
        garment_masks: samples.iter().map(|s| s.garment_mask.clone()).collect(),
    })
}

/// Garment masks nearest-resized to a query grid, `(b, H_q, W_q, 1)`.
pub fn query_masks(masks: &[BinaryMask], dims: (usize, usize), dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(masks.len() * dims.0 * dims.1);
    for m in masks {
        data.extend(m.resize_nearest(dims.0, dims.1).to_f64());
    }
    Ok(Tensor::from_vec(data, (masks.len(), dims.0, dims.1, 1), device)?.to_dtype(dtype)?)
}

/// Per-block ATV terms, each averaged over the batch.
pub fn atv_terms(captures: &[AttentionCapture], masks: &[BinaryMask]) -> Result<Vec<Tensor>> {
    captures
        .iter()
        .map(|cap| {
            let (b, _, _) = cap.weights.dims3()?;
            let (dtype, dev) = (cap.weights.dtype(), cap.weights.device());
            let grid = normalized_grid(cap.key_dims.0, cap.key_dims.1)?.to_tensor(dtype, dev)?;
            let f = center_map_tensor(&cap.weights, &grid)?.reshape((b, cap.query_dims.0, cap.query_dims.1, 2))?;
            let m = query_masks(masks, cap.query_dims, dtype, dev)?;
            Ok(atv_loss_tensor(&f, &m)?.mean_all()?)
        })
        .collect()
}

/// What a phase optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseKind {
    /// Unconditional denoising of the base model (no conditioning inputs).
    Pretrain,
    /// Conditioning branch with the denoising loss.
    Conditioning,
    /// Conditioning branch with the denoising loss plus weighted ATV terms.
    AtvFinetune,
}

impl PhaseKind {
    pub fn name(self) -> &'static str {
        match self {
            PhaseKind::Pretrain => "pretrain",
            PhaseKind::Conditioning => "phase1",
            PhaseKind::AtvFinetune => "phase2",
        }
    }

    fn trained_role(self) -> ParamRole {
        match self {
            PhaseKind::Pretrain => ParamRole::Base,
            _ => ParamRole::Adapter,
        }
    }

    fn frozen_role(self) -> ParamRole {
        match self.trained_role() {
            ParamRole::Base => ParamRole::Adapter,
            ParamRole::Adapter => ParamRole::Base,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PhaseSpec {
    pub kind: PhaseKind,
    pub iters: usize,
    pub lambda_atv: f64,
    pub augment: AugmentConfig,
    /// Offset into the training-sample index stream, so phases see fresh data.
    pub data_offset: u64,
    /// Reuse one fixed sample every iteration (overfitting smoke runs).
    pub single_sample: bool,
}

impl PhaseSpec {
    pub fn from_config(kind: PhaseKind, cfg: &ExperimentConfig) -> Self {
        let (iters, lambda, offset) = match kind {
            PhaseKind::Pretrain => (cfg.optim.pretrain_iters, 0.0, 0),
            PhaseKind::Conditioning => (cfg.optim.phase1_iters, 0.0, 1 << 32),
            PhaseKind::AtvFinetune => (cfg.optim.phase2_iters, cfg.lambda_atv, 2 << 32),
        };
        let augment = if kind == PhaseKind::Pretrain { AugmentConfig::disabled() } else { cfg.augment.clone() };
        Self { kind, iters, lambda_atv: lambda, augment, data_offset: offset, single_sample: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub ldm: f64,
    pub atv: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct PhaseReport {
    pub kind: PhaseKind,
    pub records: Vec<LossRecord>,
    pub heldout_initial: f64,
    pub heldout_final: f64,
    /// Largest absolute change of any parameter that the phase must not touch.
    pub frozen_max_change: f64,
}

/// Losses of one forward pass. Tensors keep the graph for backpropagation.
pub struct StepLoss {
    pub ldm: Tensor,
    pub atv: Option<Tensor>,
    pub total: Tensor,
}

/// Forward `batch` and build the loss for `kind`.
pub fn batch_loss(model: &TryOnModel, batch: &Batch, kind: PhaseKind, lambda_atv: f64) -> Result<StepLoss> {
    let out = match kind {
        PhaseKind::Pretrain => model.unet_forward(&batch.z_t, &batch.steps, None, None)?,
        _ => model.forward(&batch.zeta, &batch.steps, Some(&batch.clothing_lat), Some(&batch.clothing_img))?,
    };
    let ldm = ldm_loss_tensor(&batch.eps, &out.eps)?;
    if kind == PhaseKind::AtvFinetune {
        let terms = atv_terms(&out.attn, &batch.garment_masks)?;
        let atv = terms.iter().try_fold(Tensor::zeros((), ldm.dtype(), ldm.device())?, |acc, t| acc + t)?;
        let total = (&ldm + (&atv * lambda_atv)?)?;
        Ok(StepLoss { ldm, atv: Some(atv), total })
    } else {
        Ok(StepLoss { total: ldm.clone(), ldm, atv: None })
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Training samples for iteration `iter`, augmented per sample.
fn training_samples(cfg: &ExperimentConfig, spec: &PhaseSpec, iter: usize) -> Result<Vec<PreparedSample>> {
    let b = cfg.optim.batch_size;
    (0..b)
        .map(|j| {
            let index = if spec.single_sample { spec.data_offset } else { spec.data_offset + (iter * b + j) as u64 };
            let raw = generate_indexed(cfg.seed, index, &cfg.dataset)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(AUG_STREAM + index);
            let s = augment_pair(&raw, &spec.augment, &mut rng)?;
            PreparedSample::new(&s, cfg.model.patch)
        })
        .collect()
}

/// Fixed held-out batch: its own sample seed, steps and noise.
pub fn heldout_batch(cfg: &ExperimentConfig, sched: &NoiseSchedule, dtype: DType, device: &Device) -> Result<Batch> {
    let seed = cfg.seed ^ HELDOUT_SEED_SALT;
    let samples = (0..cfg.optim.heldout_size.max(1))
        .map(|i| PreparedSample::new(&generate_indexed(seed, i as u64, &cfg.dataset)?, cfg.model.patch))
        .collect::<Result<Vec<_>>>()?;
    let n = samples.len();
    let steps: Vec<usize> = (0..n).map(|i| 1 + (i * sched.steps()) / n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    make_batch(&samples, sched, Some(&steps), &mut rng, dtype, device)
}

fn write_nan_dump(dir: &Path, kind: PhaseKind, iter: usize, model: &TryOnModel, loss: &StepLoss) -> Result<PathBuf> {
    let mut s = String::new();
    let _ = writeln!(s, "phase = {}", kind.name());
    let _ = writeln!(s, "iter = {iter}");
    let _ = writeln!(s, "loss_ldm = {}", scalar(&loss.ldm).unwrap_or(f64::NAN));
    let _ = writeln!(s, "loss_atv = {}", loss.atv.as_ref().map_or(0.0, |a| scalar(a).unwrap_or(f64::NAN)));
    for e in model.store().entries() {
        let v = model.store().values(&e.name)?;
        let finite = v.iter().all(|x| x.is_finite());
        let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let _ = writeln!(s, "param {} finite={finite} max_abs={max}", e.name);
    }
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("nan_dump_{}.txt", kind.name()));
    fs::write(&path, s)?;
    Ok(path)
}

/// Run one training phase in place. Logs go to `log_dir/<phase>_loss.csv` and
/// `log_dir/<phase>_heldout.csv` when `log_dir` is given.
pub fn run_phase(
    model: &TryOnModel,
    sched: &NoiseSchedule,
    cfg: &ExperimentConfig,
    spec: &PhaseSpec,
    log_dir: Option<&Path>,
) -> Result<PhaseReport> {
    let dtype = model.dtype();
    let device = model.device().clone();
    let store = model.store();
    let trainable: Vec<Var> = store.vars_with_role(spec.kind.trained_role());
    let frozen_before = store.snapshot(spec.kind.frozen_role())?;
    let mut opt = AdamW::new(
        trainable,
        ParamsAdamW { lr: cfg.optim.lr, weight_decay: cfg.optim.weight_decay, ..Default::default() },
    )?;

    let mut loss_log = match log_dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            let mut f = fs::File::create(d.join(format!("{}_loss.csv", spec.kind.name())))?;
            writeln!(f, "{LOSS_CSV_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let heldout = heldout_batch(cfg, sched, dtype, &device)?;
    let heldout_loss = |m: &TryOnModel| -> Result<f64> {
        let kind = if spec.kind == PhaseKind::Pretrain { PhaseKind::Pretrain } else { PhaseKind::Conditioning };
        scalar(&batch_loss(m, &heldout, kind, 0.0)?.ldm)
    };
    let heldout_initial = heldout_loss(model)?;
    let mut heldout_rows = vec![(0usize, heldout_initial)];
    let heldout_every = (spec.iters / 20).max(1);

    let mut records = Vec::with_capacity(spec.iters);
    for iter in 0..spec.iters {
        let samples = training_samples(cfg, spec, iter)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(NOISE_STREAM + spec.data_offset + iter as u64);
        let batch = make_batch(&samples, sched, None, &mut rng, dtype, &device)?;
        let loss = batch_loss(model, &batch, spec.kind, spec.lambda_atv)?;
        let rec = LossRecord {
            iter,
            ldm: scalar(&loss.ldm)?,
            atv: loss.atv.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
            total: scalar(&loss.total)?,
        };
        if !(rec.ldm.is_finite() && rec.atv.is_finite() && rec.total.is_finite()) {
            let dump = write_nan_dump(log_dir.unwrap_or(&cfg.out_dir), spec.kind, iter, model, &loss)?;
            return Err(Error::NonFinite(format!(
                "{} loss at iteration {iter}; diagnostics in {}",
                spec.kind.name(),
                dump.display()
            )));
        }
        opt.backward_step(&loss.total)?;
        if let Some(f) = loss_log.as_mut() {
            writeln!(f, "{},{},{},{}", rec.iter, rec.ldm, rec.atv, rec.total)?;
        }
        records.push(rec);
        if (iter + 1) % heldout_every == 0 || iter + 1 == spec.iters {
            heldout_rows.push((iter + 1, heldout_loss(model)?));
        }
    }
    if let Some(d) = log_dir {
        let mut s = format!("{HELDOUT_CSV_HEADER}\n");
        for (i, l) in &heldout_rows {
            let _ = writeln!(s, "{i},{l}");
        }
        fs::write(d.join(format!("{}_heldout.csv", spec.kind.name())), s)?;
    }
    let frozen_max_change = store.max_change(&frozen_before)?;
    if frozen_max_change != 0.0 {
        return Err(Error::InvalidArgument(format!(
            "freeze audit failed after {}: frozen parameters moved by {frozen_max_change}",
            spec.kind.name()
        )));
    }
    Ok(PhaseReport {
        kind: spec.kind,
        records,
        heldout_initial,
        heldout_final: heldout_rows.last().map_or(heldout_initial, |r| r.1),
        frozen_max_change,
    })
}

/// Build a model from `cfg` and pre-train its base, then re-copy the encoder
/// into the spatial encoder so the conditioning branch starts from the trained weights.
pub fn pretrained_model(cfg: &ExperimentConfig, log_dir: Option<&Path>) -> Result<(TryOnModel, NoiseSchedule, PhaseReport)> {
    cfg.validate()?;
    let sched = cfg.schedule.build()?;
    let model = TryOnModel::new(&cfg.model, cfg.seed, cfg.precision.dtype(), &Device::Cpu)?;
    let report = run_phase(&model, &sched, cfg, &PhaseSpec::from_config(PhaseKind::Pretrain, cfg), log_dir)?;
    model.copy_encoder_to_spatial()?;
    Ok((model, sched, report))
}

/// Pre-train the base, then train the conditioning branch (`train` subcommand).
pub fn train_base(cfg: &ExperimentConfig, log_dir: Option<&Path>) -> Result<(TryOnModel, NoiseSchedule, Vec<PhaseReport>)> {
    let (model, sched, pre) = pretrained_model(cfg, log_dir)?;
    let p1 = run_phase(&model, &sched, cfg, &PhaseSpec::from_config(PhaseKind::Conditioning, cfg), log_dir)?;
    Ok((model, sched, vec![pre, p1]))
}

/// Continue a phase-1 model with the ATV-weighted objective.
pub fn finetune_atv(
    model: &TryOnModel,
    sched: &NoiseSchedule,
    cfg: &ExperimentConfig,
    log_dir: Option<&Path>,
) -> Result<PhaseReport> {
    run_phase(model, sched, cfg, &PhaseSpec::from_config(PhaseKind::AtvFinetune, cfg), log_dir)
}
