//! Fixed stand-in for a frozen image autoencoder: patch means down, nearest
//! neighbour up. Channel 3 of the latent is a constant zero so that the
//! conditioned U-Net input keeps four channels per encoded image.

use crate::error::{shape_err, Result};
use crate::tensor::{ImageTensor, LatentTensor};

pub const LATENT_CHANNELS: usize = 4;
pub const DEFAULT_PATCH: usize = 4;

pub fn encode(img: &ImageTensor, patch: usize) -> Result<LatentTensor> {
    let (h, w) = (img.height(), img.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return shape_err(format!("image {h}x{w} not divisible by patch {patch}"));
    }
    let (lh, lw) = (h / patch, w / patch);
    let mut data = vec![0.0; LATENT_CHANNELS * lh * lw];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                data[(c * lh + y / patch) * lw + x / patch] += img.get(c, y, x);
            }
        }
    }
    let norm = (patch * patch) as f64;
    data[..3 * lh * lw].iter_mut().for_each(|v| *v /= norm);
    LatentTensor::new(LATENT_CHANNELS, lh, lw, data)
}

pub fn decode(lat: &LatentTensor, patch: usize) -> Result<ImageTensor> {
    if lat.channels() != LATENT_CHANNELS {
        return shape_err(format!("decode expects {LATENT_CHANNELS} channels, got {}", lat.channels()));
    }
    if patch == 0 {
        return shape_err("patch factor must be positive");
    }
    let (h, w) = (lat.height() * patch, lat.width() * patch);
    Ok(ImageTensor::from_fn(h, w, |y, x| {
        let (ly, lx) = (y / patch, x / patch);
        [lat.get(0, ly, lx), lat.get(1, ly, lx), lat.get(2, ly, lx)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn constant_image() {
        let img = ImageTensor::filled(8, 12, [0.3, 0.3, 0.3]);
        let lat = encode(&img, 4).unwrap();
        assert_eq!(lat.shape(), (4, 2, 3));
        for c in 0..3 {
            assert!(lat.plane(c).iter().all(|&v| (v - 0.3).abs() < 1e-15));
        }
        assert!(lat.plane(3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_constant_roundtrip_is_exact() {
        // dyadic values keep the patch mean exact
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let small = ImageTensor::from_fn(4, 3, |_, _| [0, 0, 0].map(|_: i32| rng.random_range(0..64) as f64 / 64.0));
        let img = ImageTensor::from_fn(16, 12, |y, x| small.pixel(y / 4, x / 4));
        let back = decode(&encode(&img, 4).unwrap(), 4).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn patch_means_match_double_loop() {
        let img = random_image(16, 8, 3);
        let lat = encode(&img, 4).unwrap();
        for c in 0..3 {
            for by in 0..4 {
                for bx in 0..2 {
                    let mut s = 0.0;
                    for dy in 0..4 {
                        for dx in 0..4 {
                            s += img.get(c, by * 4 + dy, bx * 4 + dx);
                        }
                    }
                    assert!((lat.get(c, by, bx) - s / 16.0).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn decode_contracts() {
        let zero = LatentTensor::zeros(4, 2, 2);
        assert!(decode(&zero, 4).unwrap().data().iter().all(|&v| v == 0.0));
        let hot = LatentTensor::from_fn(4, 1, 1, |_, _, _| 1.5).unwrap();
        assert!(decode(&hot, 2).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(decode(&LatentTensor::zeros(3, 2, 2), 4).is_err());
    }

    #[test]
    fn non_divisible_rejected() {
        assert!(encode(&ImageTensor::filled(10, 8, [0.0; 3]), 4).is_err());
    }

    #[test]
    fn encode_is_linear() {
        let a = random_image(8, 8, 1);
        let b = random_image(8, 8, 2);
        let sum = ImageTensor::new(8, 8, a.data().iter().zip(b.data()).map(|(x, y)| 0.5 * (x + y)).collect())
            .unwrap();
        let (la, lb, ls) = (encode(&a, 4).unwrap(), encode(&b, 4).unwrap(), encode(&sum, 4).unwrap());
        for i in 0..ls.data().len() {
            assert!((ls.data()[i] - 0.5 * (la.data()[i] + lb.data()[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn roundtrip_error_bounded_by_patch_deviation() {
        let img = random_image(8, 12, 9);
        let back = decode(&encode(&img, 4).unwrap(), 4).unwrap();
        let lat = encode(&img, 4).unwrap();
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..12 {
                    let dev = (img.get(c, y, x) - lat.get(c, y / 4, x / 4)).abs();
                    assert!((img.get(c, y, x) - back.get(c, y, x)).abs() <= dev + 1e-15);
                }
            }
        }
    }
}
