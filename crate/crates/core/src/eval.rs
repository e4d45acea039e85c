//! Correspondence, sharpness and reconstruction metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec;
use crate::config::ExperimentConfig;
use crate::diffusion::{sample, NoiseSchedule, RepaintInputs, StepKind};
use crate::error::{invalid, Result};
use crate::model::{ConditionBundle, TryOnModel};
use crate::objectives::{atv_loss, center_coordinate_map, normalized_grid, AttentionMap, QueryMask};
use crate::synthetic::{correspondence_truth, generate_indexed, SyntheticSample, NO_CORRESPONDENCE};
use crate::train::{make_batch, PreparedSample};

pub const METRICS_CSV_HEADER: &str = "metric,value";

#[derive(Debug, Clone, PartialEq)]
pub struct BlockMetrics {
    pub level: usize,
    pub query_dims: (usize, usize),
    pub key_dims: (usize, usize),
    /// Garment-region queries scored.
    pub queries: usize,
    pub acc_r0: f64,
    pub acc_r1: f64,
    /// Mean attention entropy (nats) over scored queries.
    pub mean_entropy: f64,
    /// Mean masked center-map total variation over samples.
    pub mean_tv: f64,
    pub samples: usize,
}

impl BlockMetrics {
    /// `1 / (h_k · w_k)`.
    pub fn chance(&self) -> f64 {
        1.0 / (self.key_dims.0 * self.key_dims.1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    /// Scored queries over all blocks.
    pub queries: usize,
    pub acc_r0: f64,
    pub acc_r1: f64,
    pub mean_entropy: f64,
    /// Mean over samples of the block-summed masked total variation.
    pub mean_tv: f64,
    pub blocks: Vec<BlockMetrics>,
    pub rmse: Option<f64>,
    pub rmse_samples: usize,
}

impl EvalReport {
    pub fn block(&self, level: usize) -> Option<&BlockMetrics> {
        self.blocks.iter().find(|b| b.level == level)
    }

    /// Query-weighted mean of the per-block chance levels, the chance level of `acc_r0`.
    pub fn pooled_chance(&self) -> f64 {
        if self.queries == 0 {
            return 0.0;
        }
        self.blocks.iter().map(|b| b.queries as f64 * b.chance()).sum::<f64>() / self.queries as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRICS_CSV_HEADER}\n");
        let _ = writeln!(s, "samples,{}", self.samples);
        let _ = writeln!(s, "queries,{}", self.queries);
        let _ = writeln!(s, "acc_r0,{}", self.acc_r0);
        let _ = writeln!(s, "acc_r1,{}", self.acc_r1);
        let _ = writeln!(s, "mean_entropy,{}", self.mean_entropy);
        let _ = writeln!(s, "mean_tv,{}", self.mean_tv);
        for b in &self.blocks {
            let p = format!("block{}", b.level);
            let _ = writeln!(s, "{p}.queries,{}", b.queries);
            let _ = writeln!(s, "{p}.chance,{}", b.chance());
            let _ = writeln!(s, "{p}.acc_r0,{}", b.acc_r0);
            let _ = writeln!(s, "{p}.acc_r1,{}", b.acc_r1);
            let _ = writeln!(s, "{p}.mean_entropy,{}", b.mean_entropy);
            let _ = writeln!(s, "{p}.mean_tv,{}", b.mean_tv);
        }
        let _ = writeln!(s, "rmse_samples,{}", self.rmse_samples);
        let _ = writeln!(s, "rmse,{}", self.rmse.map_or("nan".to_string(), |r| r.to_string()));
        s
    }
}

pub fn entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Default, Clone)]
struct BlockAccum {
    query_dims: (usize, usize),
    key_dims: (usize, usize),
    queries: usize,
    hits_r0: usize,
    hits_r1: usize,
    entropy: f64,
    tv: f64,
    samples: usize,
}

/// Accumulates attention-based metrics sample by sample.
#[derive(Debug, Default, Clone)]
pub struct CorrespondenceScorer {
    blocks: BTreeMap<usize, BlockAccum>,
    sample_tv: Vec<f64>,
}

impl CorrespondenceScorer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Score one sample's maps, given as `(level, map)` pairs.
    pub fn add_sample(&mut self, sample: &SyntheticSample, maps: &[(usize, AttentionMap)]) -> Result<()> {
        let mut tv_sum = 0.0;
        for (level, map) in maps {
            let (qd, kd) = (map.query_dims(), map.key_dims());
            let truth = correspondence_truth(sample, qd, kd)?;
            let acc = self.blocks.entry(*level).or_insert_with(|| BlockAccum { query_dims: qd, key_dims: kd, ..Default::default() });
            if acc.query_dims != qd || acc.key_dims != kd {
                return invalid(format!("block {level} changed dimensions between samples"));
            }
            for i in 0..qd.0 {
                for j in 0..qd.1 {
                    let t = truth[i * qd.1 + j];
                    if t == NO_CORRESPONDENCE {
                        continue;
                    }
                    let row = map.row(i, j);
                    let a = argmax(row);
                    let (ak, al) = (a / kd.1, a % kd.1);
                    let (tk, tl) = (t as usize / kd.1, t as usize % kd.1);
                    let cheb = ak.abs_diff(tk).max(al.abs_diff(tl));
                    acc.queries += 1;
                    acc.hits_r0 += usize::from(cheb == 0);
                    acc.hits_r1 += usize::from(cheb <= 1);
                    acc.entropy += entropy(row);
                }
            }
            let mask = QueryMask::new(qd, sample.garment_mask.resize_nearest(qd.0, qd.1).to_f64())?;
            let f = center_coordinate_map(map, &normalized_grid(kd.0, kd.1)?)?;
            let tv = atv_loss(&f, &mask)?;
            acc.tv += tv;
            acc.samples += 1;
            tv_sum += tv;
        }
        self.sample_tv.push(tv_sum);
        Ok(())
    }

    pub fn report(&self) -> EvalReport {
        let ratio = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
        let blocks: Vec<BlockMetrics> = self
            .blocks
            .iter()
            .map(|(&level, a)| BlockMetrics {
                level,
                query_dims: a.query_dims,
                key_dims: a.key_dims,
                queries: a.queries,
                acc_r0: ratio(a.hits_r0 as f64, a.queries),
                acc_r1: ratio(a.hits_r1 as f64, a.queries),
                mean_entropy: ratio(a.entropy, a.queries),
                mean_tv: ratio(a.tv, a.samples),
                samples: a.samples,
            })
            .collect();
        let queries: usize = self.blocks.values().map(|a| a.queries).sum();
        EvalReport {
            samples: self.sample_tv.len(),
            queries,
            acc_r0: ratio(self.blocks.values().map(|a| a.hits_r0 as f64).sum(), queries),
            acc_r1: ratio(self.blocks.values().map(|a| a.hits_r1 as f64).sum(), queries),
            mean_entropy: ratio(self.blocks.values().map(|a| a.entropy).sum(), queries),
            mean_tv: ratio(self.sample_tv.iter().sum(), self.sample_tv.len()),
            blocks,
            rmse: None,
            rmse_samples: 0,
        }
    }
}

/// The standard evaluation set: un-augmented samples from the eval seed.
pub fn evaluation_set(cfg: &ExperimentConfig) -> Result<Vec<SyntheticSample>> {
    (0..cfg.eval.samples).map(|i| generate_indexed(cfg.eval.seed, i as u64, &cfg.dataset)).collect()
}

/// Head-averaged attention maps of every block for each sample, with `z_t`
/// drawn at step `t_eval` from a stream fixed by `noise_seed`.
pub fn capture_attention(
    model: &TryOnModel,
    sched: &NoiseSchedule,
    samples: &[SyntheticSample],
    t_eval: usize,
    noise_seed: u64,
    batch_size: usize,
) -> Result<Vec<Vec<(usize, AttentionMap)>>> {
    sched.check_step(t_eval)?;
    let patch = model.config().patch;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let prepared = chunk.iter().map(|s| PreparedSample::new(s, patch)).collect::<Result<Vec<_>>>()?;
        let steps = vec![t_eval; prepared.len()];
        let batch = make_batch(&prepared, sched, Some(&steps), &mut rng, model.dtype(), model.device())?;
        let fwd = model.forward(&batch.zeta, &batch.steps, Some(&batch.clothing_lat), Some(&batch.clothing_img))?;
        let mut per_block = Vec::with_capacity(fwd.attn.len());
        for cap in &fwd.attn {
            per_block.push((cap.level, cap.to_maps()?));
        }
        for i in 0..prepared.len() {
            out.push(per_block.iter().map(|(l, maps)| (*l, maps[i].clone())).collect());
        }
    }
    Ok(out)
}

/// Score precomputed maps against the ground truth.
pub fn score_maps(samples: &[SyntheticSample], maps: &[Vec<(usize, AttentionMap)>]) -> Result<EvalReport> {
    if samples.len() != maps.len() {
        return invalid("one map set per sample required");
    }
    let mut scorer = CorrespondenceScorer::new();
    for (s, m) in samples.iter().zip(maps) {
        scorer.add_sample(s, m)?;
    }
    Ok(scorer.report())
}

/// Sample with known-region replacement and measure garment-region RMSE of the
/// decoded image against the person image.
pub fn reconstruction_rmse(
    model: &TryOnModel,
    sched: &NoiseSchedule,
    samples: &[SyntheticSample],
    steps: usize,
    seed: u64,
) -> Result<f64> {
    let patch = model.config().patch;
    let mut sq = 0.0;
    let mut n = 0usize;
    for (i, s) in samples.iter().enumerate() {
        let bundle = ConditionBundle::from_sample(s, patch)?;
        let known = bundle.known_mask();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let z = sample(
            model,
            &bundle,
            sched,
            steps,
            StepKind::Ancestral,
            Some(RepaintInputs { z0_known: &bundle.agnostic_lat, known_mask: &known }),
            &mut rng,
        )?;
        let img = codec::decode(&z, patch)?;
        for y in 0..img.height() {
            for x in 0..img.width() {
                if s.garment_mask.get(y, x) {
                    let (a, b) = (img.pixel(y, x), s.person.pixel(y, x));
                    for c in 0..3 {
                        sq += (a[c] - b[c]).powi(2);
                    }
                    n += 3;
                }
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { (sq / n as f64).sqrt() })
}

/// Full evaluation: attention metrics on `samples` plus RMSE on the first
/// `cfg.eval.rmse_samples` of them.
pub fn eval_correspondence(
    model: &TryOnModel,
    sched: &NoiseSchedule,
    cfg: &ExperimentConfig,
    samples: &[SyntheticSample],
    t_eval: usize,
) -> Result<EvalReport> {
    let maps = capture_attention(model, sched, samples, t_eval, cfg.eval.seed, cfg.eval.batch_size)?;
    let mut report = score_maps(samples, &maps)?;
    let k = cfg.eval.rmse_samples.min(samples.len());
    if k > 0 {
        report.rmse = Some(reconstruction_rmse(model, sched, &samples[..k], cfg.eval.sample_steps, cfg.eval.seed)?);
        report.rmse_samples = k;
    }
    Ok(report)
}

/// One-hot maps at the ground-truth key for garment queries, uniform elsewhere.
pub fn oracle_maps(sample: &SyntheticSample, dims: &[(usize, (usize, usize), (usize, usize))]) -> Result<Vec<(usize, AttentionMap)>> {
    dims.iter()
        .map(|&(level, qd, kd)| {
            let truth = correspondence_truth(sample, qd, kd)?;
            let nk = kd.0 * kd.1;
            let mut w = vec![1.0 / nk as f64; qd.0 * qd.1 * nk];
            for (q, &t) in truth.iter().enumerate() {
                if t != NO_CORRESPONDENCE {
                    let row = &mut w[q * nk..(q + 1) * nk];
                    row.fill(0.0);
                    row[t as usize] = 1.0;
                }
            }
            Ok((level, AttentionMap::new(qd, kd, w)?))
        })
        .collect()
}
