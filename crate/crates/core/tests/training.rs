//! Training phases: freezing, degenerate budgets, overfitting, checkpoints and seeding.

mod common;

use std::fs;

use tryon_core::checkpoint;
use tryon_core::eval::{eval_correspondence, evaluation_set};
use tryon_core::model::ParamRole;
use tryon_core::train::{pretrained_model, run_phase, train_base, PhaseKind, PhaseSpec, LOSS_CSV_HEADER};
use tryon_core::{Device, Error, TryOnModel};

use common::tiny_config;

fn all_values(model: &TryOnModel) -> Vec<(String, Vec<f64>)> {
    model.store().entries().iter().map(|e| (e.name.clone(), model.store().values(&e.name).unwrap())).collect()
}

fn role_values(model: &TryOnModel, role: ParamRole) -> Vec<Vec<f64>> {
    model.store().entries().iter().filter(|e| e.role == role).map(|e| model.store().values(&e.name).unwrap()).collect()
}

#[test]
fn zero_iterations_keep_initialization() {
    let mut cfg = tiny_config();
    cfg.optim.pretrain_iters = 0;
    cfg.optim.phase1_iters = 0;
    let (model, _, reports) = train_base(&cfg, None).unwrap();
    let fresh = TryOnModel::new(&cfg.model, cfg.seed, cfg.precision.dtype(), &Device::Cpu).unwrap();
    assert_eq!(all_values(&model), all_values(&fresh));
    assert!(reports.iter().all(|r| r.records.is_empty() && r.frozen_max_change == 0.0));
}

#[test]
fn each_phase_leaves_the_other_role_untouched() {
    let mut cfg = tiny_config();
    cfg.optim.pretrain_iters = 3;
    cfg.optim.phase1_iters = 3;
    let fresh = TryOnModel::new(&cfg.model, cfg.seed, cfg.precision.dtype(), &Device::Cpu).unwrap();
    let (model, sched, pre) = pretrained_model(&cfg, None).unwrap();
    assert_eq!(pre.frozen_max_change, 0.0);
    // pretraining moves the base; only the spatial copy of the encoder follows it
    assert_ne!(role_values(&model, ParamRole::Base), role_values(&fresh, ParamRole::Base));
    for e in model.store().entries().iter().filter(|e| e.role == ParamRole::Adapter && !e.name.starts_with("spatial.")) {
        assert_eq!(model.store().values(&e.name).unwrap(), fresh.store().values(&e.name).unwrap(), "{}", e.name);
    }
    let base_before = role_values(&model, ParamRole::Base);
    let adapter_before = role_values(&model, ParamRole::Adapter);
    let p1 = run_phase(&model, &sched, &cfg, &PhaseSpec::from_config(PhaseKind::Conditioning, &cfg), None).unwrap();
    assert_eq!(p1.frozen_max_change, 0.0);
    assert_eq!(role_values(&model, ParamRole::Base), base_before);
    assert_ne!(role_values(&model, ParamRole::Adapter), adapter_before);
}

#[test]
fn overfits_a_single_sample() {
    let mut cfg = tiny_config();
    cfg.optim.batch_size = 4;
    cfg.optim.lr = 2e-3;
    let sched = cfg.schedule.build().unwrap();
    let model = TryOnModel::new(&cfg.model, cfg.seed, cfg.precision.dtype(), &Device::Cpu).unwrap();
    let mut spec = PhaseSpec::from_config(PhaseKind::Pretrain, &cfg);
    spec.iters = 500;
    spec.single_sample = true;
    let r = run_phase(&model, &sched, &cfg, &spec, None).unwrap();
    let mean = |s: &[tryon_core::train::LossRecord]| s.iter().map(|r| r.ldm).sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&r.records[..10]), mean(&r.records[450..]));
    assert!(last < 0.25 * first, "loss {first} -> {last}");
}

#[test]
fn pretraining_lowers_heldout_loss() {
    let mut cfg = tiny_config();
    cfg.optim.pretrain_iters = 60;
    cfg.optim.batch_size = 4;
    cfg.optim.lr = 1e-3;
    let (_, _, r) = pretrained_model(&cfg, None).unwrap();
    assert!(r.heldout_final < r.heldout_initial, "{} -> {}", r.heldout_initial, r.heldout_final);
}

#[test]
fn zero_weight_finetune_replays_continued_training() {
    let mut cfg = tiny_config();
    cfg.optim.phase2_iters = 4;
    cfg.lambda_atv = 0.0;
    let dir = tempfile::tempdir().unwrap();
    let (model, sched, _) = train_base(&cfg, None).unwrap();
    checkpoint::save(dir.path(), &model, &sched, &cfg, "phase1").unwrap();

    let a = checkpoint::load(dir.path(), &Device::Cpu).unwrap();
    let finetune = run_phase(&a.model, &a.schedule, &cfg, &PhaseSpec::from_config(PhaseKind::AtvFinetune, &cfg), None).unwrap();
    let b = checkpoint::load(dir.path(), &Device::Cpu).unwrap();
    let mut cont = PhaseSpec::from_config(PhaseKind::AtvFinetune, &cfg);
    cont.kind = PhaseKind::Conditioning;
    let continued = run_phase(&b.model, &b.schedule, &cfg, &cont, None).unwrap();

    let ldm = |r: &tryon_core::train::PhaseReport| r.records.iter().map(|x| x.ldm.to_bits()).collect::<Vec<_>>();
    assert_eq!(ldm(&finetune), ldm(&continued));
    assert!(finetune.records.iter().all(|r| r.atv.is_finite() && r.atv > 0.0 && r.total == r.ldm));
    assert_eq!(all_values(&a.model), all_values(&b.model));
}

#[test]
fn non_finite_loss_aborts_with_dump() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let sched = cfg.schedule.build().unwrap();
    let model = TryOnModel::new(&cfg.model, cfg.seed, cfg.precision.dtype(), &Device::Cpu).unwrap();
    let name = model.store().entries().iter().find(|e| e.role == ParamRole::Base).unwrap().name.clone();
    let mut v = model.store().values(&name).unwrap();
    v[0] = f64::NAN;
    model.store().set_values(&name, &v).unwrap();
    let err = run_phase(&model, &sched, &cfg, &PhaseSpec::from_config(PhaseKind::Pretrain, &cfg), Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let dump = fs::read_to_string(dir.path().join("nan_dump_pretrain.txt")).unwrap();
    assert!(dump.contains("iter = 0"));
    assert!(dump.contains(&format!("param {name} finite=false")));
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let (model, sched, _) = train_base(&cfg, None).unwrap();
    checkpoint::save(dir.path(), &model, &sched, &cfg, "phase1").unwrap();
    let ck = checkpoint::load(dir.path(), &Device::Cpu).unwrap();
    assert_eq!(ck.phase, "phase1");
    assert_eq!(ck.config, cfg);
    assert_eq!(ck.schedule, sched);
    assert_eq!(all_values(&ck.model), all_values(&model));
    let manifest = checkpoint::read_manifest(dir.path()).unwrap();
    for e in &manifest.params {
        let role = model.store().get(&e.name).unwrap().role;
        assert_eq!(e.frozen, role == ParamRole::Base, "{}", e.name);
    }
}

#[test]
fn same_seed_reproduces_logs_and_metrics() {
    let run = || {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let (model, sched, _) = train_base(&cfg, Some(dir.path())).unwrap();
        let samples = evaluation_set(&cfg).unwrap();
        let csv = eval_correspondence(&model, &sched, &cfg, &samples, cfg.t_eval()).unwrap().to_csv();
        let log = fs::read(dir.path().join("phase1_loss.csv")).unwrap();
        (csv, log)
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(String::from_utf8(a.1).unwrap().starts_with(LOSS_CSV_HEADER));
}
