//! Inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tryon_core::augment::augment_pair;
use tryon_core::config::ExperimentConfig;
use tryon_core::objectives::AttentionMap;
use tryon_core::synthetic::generate_indexed;
use tryon_core::train::{make_batch, Batch, PreparedSample};
use tryon_core::{DType, Device, NoiseSchedule, Tensor, TryOnModel};

/// Uniform values in `[-1, 1)` with the given shape.
pub fn uniform(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).and_then(|t| t.to_dtype(dtype)).expect("valid shape")
}

/// Random row-stochastic attention over `(hq, wq) x (hk, wk)`.
pub fn random_attention(qd: (usize, usize), kd: (usize, usize), seed: u64) -> AttentionMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nk = kd.0 * kd.1;
    let mut w = Vec::with_capacity(qd.0 * qd.1 * nk);
    for _ in 0..qd.0 * qd.1 {
        let row: Vec<f64> = (0..nk).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = row.iter().sum();
        w.extend(row.iter().map(|v| v / s));
    }
    AttentionMap::new(qd, kd, w).expect("rows are distributions")
}

/// A model and one augmented training batch for `cfg`.
pub fn model_and_batch(cfg: &ExperimentConfig) -> (TryOnModel, NoiseSchedule, Batch) {
    let sched = cfg.schedule.build().expect("valid schedule");
    let model = TryOnModel::new(&cfg.model, cfg.seed, cfg.precision.dtype(), &Device::Cpu).expect("valid model");
    let samples: Vec<PreparedSample> = (0..cfg.optim.batch_size as u64)
        .map(|i| {
            let raw = generate_indexed(cfg.seed, i, &cfg.dataset).expect("valid dataset");
            let s = augment_pair(&raw, &cfg.augment, &mut ChaCha8Rng::seed_from_u64(i)).expect("valid augmentation");
            PreparedSample::new(&s, cfg.model.patch).expect("matching patch")
        })
        .collect();
    let batch = make_batch(&samples, &sched, None, &mut ChaCha8Rng::seed_from_u64(cfg.seed), model.dtype(), model.device())
        .expect("consistent batch");
    (model, sched, batch)
}
