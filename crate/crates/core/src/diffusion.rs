//! Noise schedule, closed-form forward process, reverse steps and the
//! strided sampling loop with optional known-region replacement.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::model::ConditionBundle;
use crate::tensor::LatentTensor;

/// Per-step variances and their cumulative products for `T` steps.
///
/// Step indices are 1-based (`1..=T`); index 0 denotes clean data with
/// `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear interpolation of beta from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return invalid("schedule needs at least one step");
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            ));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return invalid("schedule needs at least one step");
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return invalid(format!("beta {b} outside (0, 1)"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        if alpha_bar.last().copied().unwrap_or(0.0) <= 0.0 {
            return invalid("cumulative alpha underflows to zero");
        }
        Ok(Self { beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product up to `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange { t, max: self.steps() });
        }
        Ok(())
    }

    /// Evenly spaced ascending subset of `count` step indices ending at `T`.
    pub fn strided_steps(&self, count: usize) -> Result<Vec<usize>> {
        let total = self.steps();
        if count == 0 || count > total {
            return invalid(format!("sampling steps {count} must be in 1..={total}"));
        }
        Ok((1..=count).map(|i| i * total / count).collect())
    }
}

/// `z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_diffuse(
    z0: &LatentTensor,
    t: usize,
    eps: &LatentTensor,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    sched.check_step(t)?;
    z0.ensure_same_shape(eps, "forward_diffuse")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_with(eps, |z, e| a * z + b * e)
}

/// Reverse update flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepKind {
    /// Posterior mean plus posterior standard deviation times `noise`.
    #[default]
    Ancestral,
    /// Noise-free update that re-noises the clean estimate with `eps_hat`.
    Deterministic,
}

/// One ancestral step from `t` to `t - 1`.
pub fn ancestral_step(
    z_t: &LatentTensor,
    eps_hat: &LatentTensor,
    t: usize,
    sched: &NoiseSchedule,
    noise: &LatentTensor,
) -> Result<LatentTensor> {
    reverse_step(z_t, eps_hat, t, t.saturating_sub(1), sched, noise, StepKind::Ancestral)
}

/// Reverse step from `t` to any earlier `t_prev`, treating the jump as a
/// single transition with `beta = 1 - alpha_bar_t / alpha_bar_prev`.
pub fn reverse_step(
    z_t: &LatentTensor,
    eps_hat: &LatentTensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    noise: &LatentTensor,
    kind: StepKind,
) -> Result<LatentTensor> {
    sched.check_step(t)?;
    if t_prev >= t {
        return invalid(format!("t_prev {t_prev} must precede t {t}"));
    }
    z_t.ensure_same_shape(eps_hat, "reverse_step eps_hat")?;
    z_t.ensure_same_shape(noise, "reverse_step noise")?;

    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let sqrt_ab_t = ab_t.sqrt();
    let sqrt_1m_ab_t = (1.0 - ab_t).sqrt();
    let x0 = z_t.zip_with(eps_hat, |z, e| (z - sqrt_1m_ab_t * e) / sqrt_ab_t)?;

    match kind {
        StepKind::Deterministic => {
            let (a, b) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
            x0.zip_with(eps_hat, |x, e| a * x + b * e)
        }
        StepKind::Ancestral => {
            let alpha_step = ab_t / ab_prev;
            let beta_step = 1.0 - alpha_step;
            let c_x0 = ab_prev.sqrt() * beta_step / (1.0 - ab_t);
            let c_zt = alpha_step.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
            let mean = x0.zip_with(z_t, |x, z| c_x0 * x + c_zt * z)?;
            if t_prev == 0 {
                return Ok(mean);
            }
            let sigma = ((1.0 - ab_prev) / (1.0 - ab_t) * beta_step).sqrt();
            mean.zip_with(noise, |m, n| m + sigma * n)
        }
    }
}

/// Replace the known region of `z_next` by a freshly noised copy of `z0_known`
/// at level `t_next`. At `t_next = 0` the known region is copied verbatim.
pub fn repaint_blend(
    z_next: &LatentTensor,
    z0_known: &LatentTensor,
    known_mask: &LatentTensor,
    t_next: usize,
    sched: &NoiseSchedule,
    noise: &LatentTensor,
) -> Result<LatentTensor> {
    z_next.ensure_same_shape(z0_known, "repaint_blend known latent")?;
    let (c, h, w) = z_next.shape();
    if known_mask.height() != h || known_mask.width() != w {
        return Err(Error::Shape(format!(
            "known mask {:?} does not cover latent {:?}",
            known_mask.shape(),
            z_next.shape()
        )));
    }
    if known_mask.channels() != 1 && known_mask.channels() != c {
        return Err(Error::Shape("known mask must have 1 or latent-many channels".into()));
    }
    if known_mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return invalid("known mask must be binary");
    }
    let known = if t_next == 0 {
        z0_known.clone()
    } else {
        forward_diffuse(z0_known, t_next, noise, sched)?
    };
    let broadcast = known_mask.channels() == 1;
    LatentTensor::from_fn(c, h, w, |ch, y, x| {
        let m = known_mask.get(if broadcast { 0 } else { ch }, y, x);
        if m == 1.0 {
            known.get(ch, y, x)
        } else {
            z_next.get(ch, y, x)
        }
    })
}

/// Anything that predicts the noise component of `z_t`.
pub trait Denoiser {
    fn predict_noise(&self, z_t: &LatentTensor, t: usize, cond: &ConditionBundle) -> Result<LatentTensor>;
}

/// Known-region inputs for in-loop replacement.
#[derive(Debug, Clone, Copy)]
pub struct RepaintInputs<'a> {
    pub z0_known: &'a LatentTensor,
    /// Single-channel binary mask, 1 where the latent is known.
    pub known_mask: &'a LatentTensor,
}

pub fn gaussian_latent<R: Rng + ?Sized>(rng: &mut R, c: usize, h: usize, w: usize) -> LatentTensor {
    let data = (0..c * h * w).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    LatentTensor::new(c, h, w, data).expect("gaussian draws are finite")
}

/// Reverse loop from pure noise over `steps` evenly spaced steps.
pub fn sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    cond: &ConditionBundle,
    sched: &NoiseSchedule,
    steps: usize,
    kind: StepKind,
    repaint: Option<RepaintInputs<'_>>,
    rng: &mut R,
) -> Result<LatentTensor> {
    let schedule = sched.strided_steps(steps)?;
    cond.validate()?;
    let (c, h, w) = (cond.latent_channels(), cond.height(), cond.width());
    if let Some(rp) = &repaint {
        if rp.z0_known.shape() != (c, h, w) {
            return Err(Error::Shape("repaint latent does not match condition shape".into()));
        }
    }
    let mut z = gaussian_latent(rng, c, h, w);
    for (i, &t) in schedule.iter().enumerate().rev() {
        let t_prev = if i == 0 { 0 } else { schedule[i - 1] };
        let eps_hat = model.predict_noise(&z, t, cond)?;
        let noise = gaussian_latent(rng, c, h, w);
        z = reverse_step(&z, &eps_hat, t, t_prev, sched, &noise, kind)?;
        if let Some(rp) = &repaint {
            let fresh = gaussian_latent(rng, c, h, w);
            z = repaint_blend(&z, rp.z0_known, rp.known_mask, t_prev, sched, &fresh)?;
        }
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lat(c: usize, h: usize, w: usize, seed: u64) -> LatentTensor {
        gaussian_latent(&mut ChaCha8Rng::seed_from_u64(seed), c, h, w)
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn two_step_schedule() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        assert_eq!(s.alpha(2), 1.0 - s.beta(2));
    }

    #[test]
    fn schedule_rejects_bad_arguments() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn strided_steps_evenly_spaced() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let st = s.strided_steps(50).unwrap();
        assert_eq!(st.len(), 50);
        assert_eq!(st[0], 20);
        assert_eq!(*st.last().unwrap(), 1000);
        assert!(st.windows(2).all(|w| w[1] - w[0] == 20));
        assert!(s.strided_steps(1001).is_err());
        assert_eq!(s.strided_steps(1).unwrap(), vec![1000]);
    }

    #[test]
    fn forward_zero_noise() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let z0 = lat(4, 3, 2, 1);
        let zt = forward_diffuse(&z0, 40, &LatentTensor::zeros(4, 3, 2), &s).unwrap();
        let a = s.alpha_bar(40).sqrt();
        for (x, z) in zt.data().iter().zip(z0.data()) {
            assert_eq!(*x, a * z);
        }
    }

    #[test]
    fn forward_errors() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let z0 = lat(4, 3, 2, 1);
        assert!(forward_diffuse(&z0, 0, &z0, &s).is_err());
        assert!(forward_diffuse(&z0, 11, &z0, &s).is_err());
        assert!(forward_diffuse(&z0, 3, &lat(4, 2, 3, 2), &s).is_err());
    }

    #[test]
    fn forward_limit_approaches_noise() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let z0 = lat(4, 4, 4, 3);
        let eps = lat(4, 4, 4, 4);
        let zt = forward_diffuse(&z0, 1000, &eps, &s).unwrap();
        let ab = s.alpha_bar(1000);
        let bound = ab.sqrt() * z0.max_abs() + ((1.0 - ab).sqrt() - 1.0).abs() * eps.max_abs();
        let diff = zt.zip_with(&eps, |a, b| a - b).unwrap().max_abs();
        assert!(diff <= bound + 1e-15, "{diff} > {bound}");
    }

    #[test]
    fn terminal_step_is_noise_free() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.02).unwrap();
        let zt = lat(4, 2, 2, 5);
        let eps = lat(4, 2, 2, 6);
        let a = ancestral_step(&zt, &eps, 1, &s, &lat(4, 2, 2, 7)).unwrap();
        let b = ancestral_step(&zt, &eps, 1, &s, &LatentTensor::zeros(4, 2, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_inputs_map_to_zero() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.02).unwrap();
        let z = LatentTensor::zeros(4, 2, 2);
        for t in 1..=10 {
            let out = ancestral_step(&z, &z, t, &s, &z).unwrap();
            assert_eq!(out.max_abs(), 0.0);
        }
    }

    #[test]
    fn single_step_inversion_recovers_clean_latent() {
        let s = NoiseSchedule::linear(1, 0.3, 0.3).unwrap();
        let z0 = lat(4, 3, 3, 8);
        let eps = lat(4, 3, 3, 9);
        let zt = forward_diffuse(&z0, 1, &eps, &s).unwrap();
        let zero = LatentTensor::zeros(4, 3, 3);
        for kind in [StepKind::Ancestral, StepKind::Deterministic] {
            let back = reverse_step(&zt, &eps, 1, 0, &s, &zero, kind).unwrap();
            let err = back.zip_with(&z0, |a, b| a - b).unwrap().max_abs();
            assert!(err < 1e-10, "{kind:?}: {err}");
        }
    }

    #[test]
    fn repaint_all_ones_and_all_zeros() {
        let s = NoiseSchedule::linear(50, 1e-3, 0.02).unwrap();
        let (zn, z0, noise) = (lat(4, 3, 2, 1), lat(4, 3, 2, 2), lat(4, 3, 2, 3));
        let ones = LatentTensor::from_fn(1, 3, 2, |_, _, _| 1.0).unwrap();
        let zeros = LatentTensor::zeros(1, 3, 2);
        let out = repaint_blend(&zn, &z0, &ones, 20, &s, &noise).unwrap();
        assert_eq!(out, forward_diffuse(&z0, 20, &noise, &s).unwrap());
        let out = repaint_blend(&zn, &z0, &zeros, 20, &s, &noise).unwrap();
        assert_eq!(out, zn);
    }

    #[test]
    fn repaint_checkerboard_at_zero() {
        let s = NoiseSchedule::linear(50, 1e-3, 0.02).unwrap();
        let (zn, z0) = (lat(4, 4, 5, 1), lat(4, 4, 5, 2));
        let mask = LatentTensor::from_fn(1, 4, 5, |_, y, x| ((x + y) % 2) as f64).unwrap();
        let out = repaint_blend(&zn, &z0, &mask, 0, &s, &LatentTensor::zeros(4, 4, 5)).unwrap();
        for c in 0..4 {
            for y in 0..4 {
                for x in 0..5 {
                    let want = if (x + y) % 2 == 1 { z0.get(c, y, x) } else { zn.get(c, y, x) };
                    assert_eq!(out.get(c, y, x), want);
                }
            }
        }
    }

    #[test]
    fn repaint_rejects_soft_mask() {
        let s = NoiseSchedule::linear(5, 1e-3, 0.02).unwrap();
        let z = lat(4, 2, 2, 1);
        let mask = LatentTensor::from_fn(1, 2, 2, |_, _, _| 0.5).unwrap();
        assert!(repaint_blend(&z, &z, &mask, 1, &s, &z).is_err());
    }
}
