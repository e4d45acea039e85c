//! Property bodies shared by the proptest suites and the acceptance run.

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tryon_core::augment::{apply_draws, augment_pair, AugmentConfig, AugmentDraws};
use tryon_core::objectives::{center_coordinate_map, normalized_grid};
use tryon_core::synthetic::{generate_indexed, DatasetConfig};
use tryon_core::{AttentionMap, DType, Device, Tensor};

use super::fixtures::{attention_rows, max_abs_diff, random_block, uniform};

type Check = Result<(), TestCaseError>;

pub fn rows_are_distributions(seed: u64, nq: usize, nk: usize) -> Check {
    let (_s, blk) = random_block(seed);
    let r = blk.forward_tokens(&uniform(&[1, nq, 8], seed + 1, DType::F64), &uniform(&[1, nk, 6], seed + 2, DType::F64), None, None).unwrap();
    for row in attention_rows(&r.attn) {
        prop_assert!(row.iter().all(|&p| p >= 0.0));
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
    Ok(())
}

pub fn key_permutation_equivariance(seed: u64, nk: usize) -> Check {
    let (_s, blk) = random_block(seed);
    let x = uniform(&[1, 5, 8], seed + 1, DType::F64);
    let kv = uniform(&[1, nk, 6], seed + 2, DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<u32> = (0..nk as u32).collect();
    for i in (1..nk).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let idx = Tensor::from_vec(perm.clone(), nk, &Device::Cpu).unwrap();
    let kv_p = kv.index_select(&idx, 1).unwrap();
    let a = blk.forward_tokens(&x, &kv, None, None).unwrap();
    let b = blk.forward_tokens(&x, &kv_p, None, None).unwrap();
    prop_assert!(max_abs_diff(&a.out, &b.out) < 1e-12);
    let (ra, rb) = (attention_rows(&a.attn), attention_rows(&b.attn));
    for (row_a, row_b) in ra.iter().zip(&rb) {
        for (j, &p) in perm.iter().enumerate() {
            prop_assert!((row_b[j] - row_a[p as usize]).abs() < 1e-12);
        }
    }
    Ok(())
}

pub fn center_map_is_bounded(seed: u64, hk: usize, wk: usize) -> Check {
    let (_s, blk) = random_block(seed);
    let nk = hk * wk;
    let r = blk.forward_tokens(&uniform(&[1, 6, 8], seed + 1, DType::F64), &uniform(&[1, nk, 6], seed + 2, DType::F64), None, None).unwrap();
    let map = AttentionMap::new((2, 3), (hk, wk), attention_rows(&r.attn).concat()).unwrap();
    let f = center_coordinate_map(&map, &normalized_grid(hk, wk).unwrap()).unwrap();
    let bound = 1.0 / nk as f64;
    for v in f.values() {
        prop_assert!(v[0].abs() <= bound + 1e-15 && v[1].abs() <= bound + 1e-15);
    }
    Ok(())
}

pub fn disabled_augmentation_is_identity(seed: u64, index: u64) -> Check {
    let s = generate_indexed(seed, index, &DatasetConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    prop_assert_eq!(augment_pair(&s, &AugmentConfig::disabled(), &mut rng).unwrap(), s);
    Ok(())
}

pub fn flip_is_an_involution(seed: u64) -> Check {
    let s = generate_indexed(seed, 0, &DatasetConfig::default()).unwrap();
    let flip = AugmentDraws { flip: true, ..Default::default() };
    let back = apply_draws(&apply_draws(&s, &flip).unwrap(), &flip).unwrap();
    prop_assert_eq!(&back.person, &s.person);
    prop_assert_eq!(&back.clothing, &s.clothing);
    prop_assert_eq!(&back.agnostic, &s.agnostic);
    prop_assert_eq!(&back.garment_mask, &s.garment_mask);
    prop_assert_eq!(&back.agnostic_mask, &s.agnostic_mask);
    prop_assert_eq!(&back.pose, &s.pose);
    for k in 0..6 {
        prop_assert!((back.truth_transform.m[k] - s.truth_transform.m[k]).abs() < 1e-12);
    }
    Ok(())
}
