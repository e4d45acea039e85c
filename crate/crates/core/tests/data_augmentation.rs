//! Synthetic data and augmentation checked against hand-written remap oracles.

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tryon_core::augment::{annotation_residual, apply_draws, augment_pair, AugmentConfig, AugmentDraws};
use tryon_core::synthetic::{correspondence_truth, generate_indexed, DatasetConfig, NEUTRAL_GRAY, NO_CORRESPONDENCE};
use tryon_core::Affine2;

use common::oracle::{apply, bilinear, interior, invert, residual_oracle};
use common::properties;

#[test]
fn person_garment_matches_warped_clothing_for_100_samples() {
    let cfg = DatasetConfig::default();
    for i in 0..100 {
        let s = generate_indexed(77, i, &cfg).unwrap();
        let inv = invert(s.truth_transform.m);
        let pts = interior(&s.garment_mask);
        assert!(pts.len() > 100, "sample {i} has a tiny garment");
        for (y, x) in pts {
            let (cx, cy) = apply(inv, x as f64 + 0.5, y as f64 + 0.5);
            let want = bilinear(&s.clothing, cx, cy);
            let got = s.person.pixel(y, x);
            for c in 0..3 {
                assert!((want[c] - got[c]).abs() <= 0.05, "sample {i} pixel ({y},{x})");
            }
        }
    }
}

#[test]
fn jittered_clothing_frame_keeps_annotation() {
    let mut cfg = DatasetConfig { clothing_translate: 4.0, clothing_scale: 0.1, ..DatasetConfig::default() };
    let mut frames = Vec::new();
    for i in 0..30 {
        let s = generate_indexed(78, i, &cfg).unwrap();
        let inv = invert(s.truth_transform.m);
        for (y, x) in interior(&s.garment_mask) {
            let (cx, cy) = apply(inv, x as f64 + 0.5, y as f64 + 0.5);
            let want = bilinear(&s.clothing, cx, cy);
            let got = s.person.pixel(y, x);
            assert!((0..3).all(|c| (want[c] - got[c]).abs() <= 0.05), "sample {i} pixel ({y},{x})");
        }
        frames.push(s.garment_frame.m);
    }
    assert!(frames.windows(2).any(|w| w[0] != w[1]));
    cfg.clothing_translate = 20.0;
    assert!(generate_indexed(78, 0, &cfg).is_err());
}

#[test]
fn identity_placement_copies_the_clothing_crop() {
    let cfg = DatasetConfig::default().identity_placement();
    let s = generate_indexed(3, 4, &cfg).unwrap();
    let mut n = 0;
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            if s.garment_mask.get(y, x) {
                assert!(s.person.pixel(y, x).iter().zip(s.clothing.pixel(y, x)).all(|(a, b)| (a - b).abs() <= 1e-6));
                n += 1;
            }
        }
    }
    assert_eq!(n, 24 * 40);
}

#[test]
fn agnostic_and_mask_contract() {
    let cfg = DatasetConfig::default();
    for i in 0..20 {
        let s = generate_indexed(5, i, &cfg).unwrap();
        assert_eq!(s.agnostic_mask, s.garment_mask.dilate(cfg.mask_margin));
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let want = if s.agnostic_mask.get(y, x) { [NEUTRAL_GRAY; 3] } else { s.person.pixel(y, x) };
                assert_eq!(s.agnostic.pixel(y, x), want);
            }
        }
    }
}

#[test]
fn one_pitch_translation_shifts_truth_by_one_index() {
    let cfg = DatasetConfig::default().identity_placement();
    let s = generate_indexed(9, 1, &cfg).unwrap();
    let (qd, kd) = ((16, 12), (16, 12));
    let base = correspondence_truth(&s, qd, kd).unwrap();
    let mut moved = s.clone();
    // the garment moves 4 px (one cell) right and its mask with it
    moved.truth_transform = Affine2::translation(4.0, 0.0).compose(&s.truth_transform);
    moved.garment_mask = tryon_core::BinaryMask::from_fn(cfg.height, cfg.width, |y, x| x >= 4 && s.garment_mask.get(y, x - 4));
    let shifted = correspondence_truth(&moved, qd, kd).unwrap();
    for i in 0..qd.0 {
        for j in 0..qd.1 {
            let q = i * qd.1 + j;
            if j >= 1 && base[q - 1] != NO_CORRESPONDENCE {
                assert_eq!(shifted[q], base[q - 1]);
            } else {
                assert_eq!(shifted[q], NO_CORRESPONDENCE);
            }
        }
    }
}

#[test]
fn truth_is_consistent_across_resolutions() {
    let cfg = DatasetConfig::default().identity_placement();
    let s = generate_indexed(2, 7, &cfg).unwrap();
    let fine = correspondence_truth(&s, (16, 12), (16, 12)).unwrap();
    let coarse = correspondence_truth(&s, (8, 6), (8, 6)).unwrap();
    for i in 0..8 {
        for j in 0..6 {
            let c = coarse[i * 6 + j];
            // the coarse cell center is the shared corner of four fine cells; its
            // lower-right fine cell holds the same clothing point
            let f = fine[(2 * i + 1) * 12 + 2 * j + 1];
            if c != NO_CORRESPONDENCE && f != NO_CORRESPONDENCE {
                let (fk, fl) = (f as usize / 12, f as usize % 12);
                assert_eq!(c as usize, (fk / 2) * 6 + fl / 2);
            }
        }
    }
}

#[test]
fn shift_only_annotation_matches_pixel_remap() {
    let cfg = DatasetConfig::default();
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let (d1, d2) = ((3.0, -5.0), (-2.0, 4.0));
    for i in 0..10 {
        let s = generate_indexed(21, i, &cfg).unwrap();
        let draws = AugmentDraws {
            clothing_shift: Some((d1.0 / w, d1.1 / h)),
            condition_shift: Some((d2.0 / w, d2.1 / h)),
            ..Default::default()
        };
        let a = apply_draws(&s, &draws).unwrap();
        // brute-force remap: augmented pixel p came from original pixel p - d
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let (sy, sx) = (y as f64 - d2.1, x as f64 - d2.0);
                if sy >= 0.0 && sx >= 0.0 && sy < h && sx < w {
                    let orig = s.person.pixel(sy as usize, sx as usize);
                    assert!(a.person.pixel(y, x).iter().zip(orig).all(|(p, q)| (p - q).abs() < 1e-12));
                    assert_eq!(a.garment_mask.get(y, x), s.garment_mask.get(sy as usize, sx as usize));
                }
            }
        }
        let t1 = Affine2::translation(d1.0, d1.1);
        let t2 = Affine2::translation(d2.0, d2.1);
        let want = t2.compose(&s.truth_transform).compose(&t1.inverse().unwrap());
        for k in 0..6 {
            assert!((a.truth_transform.m[k] - want.m[k]).abs() < 1e-9);
        }
        // the annotation points every augmented garment pixel at matching clothing content
        let inv = invert(a.truth_transform.m);
        for (y, x) in interior(&a.garment_mask) {
            let (cx, cy) = apply(inv, x as f64 + 0.5, y as f64 + 0.5);
            let (cw, ch) = (cx - d1.0, cy - d1.1);
            if cw < 1.0 || ch < 1.0 || cw > w - 1.0 || ch > h - 1.0 {
                continue;
            }
            let want = bilinear(&a.clothing, cx, cy);
            let got = a.person.pixel(y, x);
            assert!(want.iter().zip(got).all(|(p, q)| (p - q).abs() < 1e-9), "sample {i} at ({y},{x})");
        }
    }
}

#[test]
fn default_augmentation_keeps_annotation_consistent() {
    let cfg = DatasetConfig::default();
    let aug = AugmentConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let s = augment_pair(&generate_indexed(13, i, &cfg).unwrap(), &aug, &mut rng).unwrap();
        let oracle = residual_oracle(&s);
        assert!((oracle - annotation_residual(&s).unwrap()).abs() < 1e-12);
        worst = worst.max(oracle);
    }
    assert!(worst <= 0.05, "worst residual {worst}");
}

#[test]
fn generation_is_deterministic() {
    let cfg = DatasetConfig::default();
    assert_eq!(generate_indexed(1, 2, &cfg).unwrap(), generate_indexed(1, 2, &cfg).unwrap());
    assert_ne!(generate_indexed(1, 2, &cfg).unwrap(), generate_indexed(1, 3, &cfg).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn disabled_augmentation_is_identity(seed in 0u64..500, index in 0u64..500) {
        properties::disabled_augmentation_is_identity(seed, index)?;
    }

    #[test]
    fn flip_is_an_involution(seed in 0u64..500) {
        properties::flip_is_an_involution(seed)?;
    }

    #[test]
    fn augmented_masks_stay_binary_and_seeded(seed in 0u64..500) {
        let s = generate_indexed(seed, 1, &DatasetConfig::default()).unwrap();
        let a = augment_pair(&s, &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = augment_pair(&s, &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.agnostic.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
