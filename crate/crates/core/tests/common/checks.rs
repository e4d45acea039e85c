//! Oracle comparisons shared by the focused tests and the acceptance run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tryon_core::diffusion::{forward_diffuse, gaussian_latent, NoiseSchedule};
use tryon_core::objectives::{atv_loss, center_coordinate_map, normalized_grid, AttentionMap, CenterCoordinateMap, QueryMask};
use tryon_core::LatentTensor;

use super::oracle::{atv_oracle, center_oracle, random_attention};

/// Largest disagreement between library and loop oracles over `trials` random inputs.
pub fn center_and_atv_error(seed: u64, trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let qd = (rng.random_range(1..7), rng.random_range(1..7));
        let kd = (rng.random_range(1..6), rng.random_range(1..6));
        let a = random_attention(&mut rng, qd, kd);
        let f = center_coordinate_map(&a, &normalized_grid(kd.0, kd.1).unwrap()).unwrap();
        let oracle = center_oracle(&a);
        for (got, want) in f.values().iter().zip(&oracle) {
            worst = worst.max((got[0] - want[0]).abs()).max((got[1] - want[1]).abs());
        }
        let mask: Vec<f64> = (0..qd.0 * qd.1).map(|_| if rng.random_bool(0.6) { 1.0 } else { 0.0 }).collect();
        let l = atv_loss(&f, &QueryMask::new(qd, mask.clone()).unwrap()).unwrap();
        worst = worst.max((l - atv_oracle(&oracle, &mask, qd)).abs());
    }
    worst
}

/// Uniform rows center at exactly zero; a constant field has exactly zero variation.
pub fn degenerate_cases_exact() -> bool {
    let uniform_zero = [(1, 1), (2, 3), (4, 4), (5, 3), (7, 2)].into_iter().all(|kd: (usize, usize)| {
        let nk = kd.0 * kd.1;
        let a = AttentionMap::new((3, 4), kd, vec![1.0 / nk as f64; 12 * nk]).unwrap();
        let f = center_coordinate_map(&a, &normalized_grid(kd.0, kd.1).unwrap()).unwrap();
        f.values().iter().all(|v| v[0] == 0.0 && v[1] == 0.0)
    });
    let f = CenterCoordinateMap::new((4, 5), vec![[0.123, -0.071]; 20]).unwrap();
    uniform_zero && atv_loss(&f, &QueryMask::ones((4, 5))).unwrap() == 0.0
}

/// Standardized errors `(t, mean z, variance z)` of Monte Carlo forward-process moments.
pub fn forward_moment_scores(seed: u64, n: usize) -> Vec<(usize, f64, f64)> {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [(0.0, 1usize), (1.5, 10), (-0.7, 250), (2.0, 500), (0.3, 1000)]
        .into_iter()
        .map(|(z0v, t)| {
            let z0 = LatentTensor::new(1, 1, 1, vec![z0v]).unwrap();
            let draws: Vec<f64> = (0..n)
                .map(|_| forward_diffuse(&z0, t, &gaussian_latent(&mut rng, 1, 1, 1), &s).unwrap().data()[0])
                .collect();
            let ab = s.alpha_bar(t);
            let (mu, var) = (ab.sqrt() * z0v, 1.0 - ab);
            let mean = draws.iter().sum::<f64>() / n as f64;
            let svar = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se_mean = (var / n as f64).sqrt();
            // Gaussian sample variance has standard error var * sqrt(2 / (n - 1))
            let se_var = var * (2.0 / (n - 1) as f64).sqrt();
            (t, (mean - mu) / se_mean, (svar - var) / se_var)
        })
        .collect()
}
