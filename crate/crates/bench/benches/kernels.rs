use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use tryon_bench::{model_and_batch, random_attention, uniform};
use tryon_core::config::ExperimentConfig;
use tryon_core::model::{Conv3, ParamBuilder, ParamRole, ParamStore, ZeroCrossAttentionBlock};
use tryon_core::objectives::{atv_loss, center_coordinate_map, normalized_grid, QueryMask};
use tryon_core::train::{batch_loss, PhaseKind};
use tryon_core::{DType, Device};

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3");
    for ch in [16, 32, 64] {
        let mut store = ParamStore::new(DType::F32, Device::Cpu);
        let layer = Conv3::new(&mut ParamBuilder::new(&mut store, 0, ParamRole::Base), "conv", ch, ch).unwrap();
        let x = uniform(&[8, 16, 12, ch], 1, DType::F32);
        group.bench_with_input(BenchmarkId::from_parameter(ch), &x, |b, x| b.iter(|| layer.forward(x).unwrap()));
    }
    group.finish();
}

fn attention_block(c: &mut Criterion) {
    let mut group = c.benchmark_group("zero_cross_attention");
    for (hq, wq) in [(8, 6), (16, 12)] {
        let mut store = ParamStore::new(DType::F32, Device::Cpu);
        let block = ZeroCrossAttentionBlock::new(&mut ParamBuilder::new(&mut store, 0, ParamRole::Adapter), "zca", 32, 32, 4, 2, false, 1024).unwrap();
        let x = uniform(&[8, hq, wq, 32], 1, DType::F32);
        let kv = uniform(&[8, hq, wq, 32], 2, DType::F32);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{hq}x{wq}")), &(x, kv), |b, (x, kv)| {
            b.iter(|| block.forward(x, kv).unwrap())
        });
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let mut cfg = ExperimentConfig::default();
    cfg.model.base_width = 16;
    cfg.model.heads = 2;
    cfg.optim.batch_size = 8;
    let (model, _, batch) = model_and_batch(&cfg);
    let mut group = c.benchmark_group("loss_forward_backward");
    group.sample_size(10);
    for kind in [PhaseKind::Pretrain, PhaseKind::Conditioning, PhaseKind::AtvFinetune] {
        group.bench_function(kind.name(), |b| {
            b.iter(|| batch_loss(&model, &batch, kind, cfg.lambda_atv).unwrap().total.backward().unwrap())
        });
    }
    group.finish();
}

fn objectives(c: &mut Criterion) {
    let mut group = c.benchmark_group("center_map_and_atv");
    for (q, k) in [((8, 6), (8, 6)), ((16, 12), (16, 12))] {
        let map = random_attention(q, k, 3);
        let grid = normalized_grid(k.0, k.1).unwrap();
        let mask = QueryMask::ones(q);
        group.bench_function(format!("{}x{}", q.0, q.1), |b| {
            b.iter(|| atv_loss(&center_coordinate_map(&map, &grid).unwrap(), &mask).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv, attention_block, training_step, objectives);
criterion_main!(benches);
