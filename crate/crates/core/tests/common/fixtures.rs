//! Model fixtures shared by the property suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tryon_core::model::{ParamBuilder, ParamRole, ParamStore, ZeroCrossAttentionBlock, ZETA_CHANNELS};
use tryon_core::{DType, Device, Tensor, TryOnModel, UNetConfig};

pub fn uniform(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().to_dtype(DType::F64).unwrap().max_all().unwrap().to_scalar().unwrap()
}

/// Both zero-initialized paths are inert at construction.
pub fn dual_identity(dtype: DType) -> (f64, f64) {
    let cfg = UNetConfig::default();
    let model = TryOnModel::new(&cfg, 5, dtype, &Device::Cpu).unwrap();
    let (b, h, w) = (2, cfg.latent_height, cfg.latent_width);
    let (ih, iw) = cfg.image_dims();
    let zeta = uniform(&[b, h, w, ZETA_CHANNELS], 1, dtype);
    let zeroed = Tensor::cat(&[&zeta.narrow(3, 0, 4).unwrap(), &zeta.narrow(3, 4, 9).unwrap().zeros_like().unwrap()], 3).unwrap();
    let cl = uniform(&[b, h, w, 4], 2, dtype);
    let img = uniform(&[b, ih, iw, 3], 3, dtype).affine(0.5, 0.5).unwrap();
    let steps = [17, 640];

    // (a) arbitrary extra channels vs zeroed extra channels
    let full = model.forward(&zeta, &steps, Some(&cl), Some(&img)).unwrap();
    let zero_extra = model.forward(&zeroed, &steps, Some(&cl), Some(&img)).unwrap();
    // (b) conditioned vs pyramid-ablated; the bare base model sees only z_t
    let ablated = model.forward(&zeta, &steps, None, None).unwrap();
    let base = model.unet_forward(&zeta.narrow(3, 0, 4).unwrap(), &steps, None, None).unwrap();
    let a = max_abs_diff(&full.eps, &zero_extra.eps);
    let b_ = max_abs_diff(&full.eps, &ablated.eps).max(max_abs_diff(&full.eps, &base.eps));
    assert_eq!(full.attn.len(), cfg.attn_levels.len());
    (a, b_)
}

/// A block whose every parameter, including the zero-initialized output layer, is random.
pub fn random_block(seed: u64) -> (ParamStore, ZeroCrossAttentionBlock) {
    let mut store = ParamStore::new(DType::F64, Device::Cpu);
    let blk = {
        let mut pb = ParamBuilder::new(&mut store, seed, ParamRole::Adapter);
        ZeroCrossAttentionBlock::new(&mut pb, "zca", 8, 6, 2, 2, false, 4096).unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for e in store.entries() {
        let n = store.values(&e.name).unwrap().len();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-0.8..0.8)).collect();
        store.set_values(&e.name, &v).unwrap();
    }
    (store, blk)
}

pub fn attention_rows(attn: &Tensor) -> Vec<Vec<f64>> {
    attn.to_dtype(DType::F64).unwrap().squeeze(0).unwrap().to_vec2().unwrap()
}

