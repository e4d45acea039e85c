#![allow(dead_code)]

pub mod checks;
pub mod fixtures;
pub mod oracle;
pub mod properties;

use tryon_core::config::ExperimentConfig;

/// Small model on the default 64x48 data, cheap enough for many short runs.
pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model.base_width = 8;
    cfg.model.heads = 2;
    cfg.model.norm_groups = 2;
    cfg.optim.batch_size = 2;
    cfg.optim.heldout_size = 4;
    cfg.optim.pretrain_iters = 2;
    cfg.optim.phase1_iters = 2;
    cfg.optim.phase2_iters = 2;
    cfg.eval.samples = 8;
    cfg.eval.rmse_samples = 0;
    cfg.eval.batch_size = 8;
    cfg.seed = 11;
    cfg
}

