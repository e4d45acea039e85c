//! Central finite-difference verification of backpropagated gradients.

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::model::{ParamRole, TryOnModel, UNetConfig};
use crate::tensor::BinaryMask;
use crate::train::{batch_loss, Batch, PhaseKind};

pub const MAX_PARAMS: usize = 10_000;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub model: UNetConfig,
    pub lambda_atv: f64,
    pub seed: u64,
    pub step: f64,
    /// Entries checked per parameter tensor (all entries when the tensor is smaller).
    pub entries_per_tensor: usize,
    pub batch: usize,
    /// Gradients below this magnitude are compared on an absolute scale.
    pub floor: f64,
    pub tolerance: f64,
    /// Also check a state where every zero-initialized tensor has been randomized.
    pub perturbed_state: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            model: UNetConfig::miniature(),
            lambda_atv: 0.001,
            seed: 0,
            step: 1e-5,
            entries_per_tensor: 3,
            batch: 2,
            floor: 1e-6,
            tolerance: 1e-3,
            perturbed_state: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    /// `<state>:<layer>`, state being `init` or `perturbed`.
    pub group: String,
    pub frozen: bool,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Largest analytic gradient magnitude among the checked entries.
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub param_count: usize,
    pub groups: Vec<GroupResult>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("params = {}\ntolerance = {}\n", self.param_count, self.tolerance);
        for g in &self.groups {
            s.push_str(&format!(
                "group {} frozen={} checked={} max_rel_err={:.3e} max_abs_grad={:.3e}\n",
                g.group, g.frozen, g.checked, g.max_rel_err, g.max_abs_grad
            ));
        }
        s.push_str(&format!("max_rel_err = {:.3e}\npassed = {}\n", self.max_rel_err, self.passed()));
        s
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

/// Random inputs at the model's resolution; garment masks are random blobs.
fn random_batch(cfg: &UNetConfig, b: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let (h, w) = (cfg.latent_height, cfg.latent_width);
    let (ih, iw) = cfg.image_dims();
    let zeta = randn(rng, &[b, h, w, 13], 1.0)?;
    let imgs: Vec<f64> = (0..b * ih * iw * 3).map(|_| rng.random::<f64>()).collect();
    let masks = (0..b)
        .map(|_| {
            let (cy, cx) = (rng.random_range(0.3..0.7) * ih as f64, rng.random_range(0.3..0.7) * iw as f64);
            let (ry, rx) = (0.3 * ih as f64, 0.3 * iw as f64);
            BinaryMask::from_fn(ih, iw, |y, x| {
                let (dy, dx) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
                dy * dy + dx * dx <= 1.0
            })
        })
        .collect();
    Ok(Batch {
        z_t: zeta.narrow(3, 0, 4)?,
        zeta,
        eps: randn(rng, &[b, h, w, 4], 1.0)?,
        steps: (0..b).map(|i| 1 + 37 * i).collect(),
        clothing_lat: randn(rng, &[b, h, w, 4], 0.5)?,
        clothing_img: Tensor::from_vec(imgs, (b, ih, iw, 3), &Device::Cpu)?,
        garment_masks: masks,
    })
}

fn pick_entries(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut idx = vec![0, n - 1];
    while idx.len() < k {
        let i = rng.random_range(0..n);
        if !idx.contains(&i) {
            idx.push(i);
        }
    }
    idx
}

fn check_state(
    model: &TryOnModel,
    batch: &Batch,
    opts: &GradCheckOptions,
    state: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<GroupResult>> {
    let loss_of = |m: &TryOnModel| -> Result<f64> {
        Ok(batch_loss(m, batch, PhaseKind::AtvFinetune, opts.lambda_atv)?.total.to_scalar::<f64>()?)
    };
    let loss = batch_loss(model, batch, PhaseKind::AtvFinetune, opts.lambda_atv)?.total;
    let grads = loss.backward()?;
    let store = model.store();
    let mut groups: Vec<GroupResult> = Vec::new();
    for e in store.entries() {
        let n = e.var.elem_count();
        let analytic: Vec<f64> = match grads.get(e.var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1()?,
            None => vec![0.0; n],
        };
        let base = store.values(&e.name)?;
        let mut worst: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let picks = pick_entries(n, opts.entries_per_tensor, rng);
        for &i in &picks {
            let mut v = base.clone();
            v[i] = base[i] + opts.step;
            store.set_values(&e.name, &v)?;
            let up = loss_of(model)?;
            v[i] = base[i] - opts.step;
            store.set_values(&e.name, &v)?;
            let down = loss_of(model)?;
            store.set_values(&e.name, &base)?;
            let numeric = (up - down) / (2.0 * opts.step);
            worst = worst.max(relative_error(analytic[i], numeric, opts.floor));
            max_abs = max_abs.max(analytic[i].abs());
        }
        let name = format!("{state}:{}", e.group());
        match groups.iter_mut().find(|g| g.group == name) {
            Some(g) => {
                g.checked += picks.len();
                g.max_rel_err = g.max_rel_err.max(worst);
                g.max_abs_grad = g.max_abs_grad.max(max_abs);
            }
            None => groups.push(GroupResult {
                group: name,
                frozen: e.role == ParamRole::Base,
                checked: picks.len(),
                max_rel_err: worst,
                max_abs_grad: max_abs,
            }),
        }
    }
    Ok(groups)
}

/// Check every parameter group of the full finetune loss (denoising plus
/// weighted ATV terms) in 64-bit arithmetic.
pub fn grad_check(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let model = TryOnModel::new(&opts.model, opts.seed, DType::F64, &Device::Cpu)?;
    let param_count = model.store().param_count();
    if param_count > MAX_PARAMS {
        return invalid(format!("gradient checks need at most {MAX_PARAMS} parameters, model has {param_count}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let batch = random_batch(&opts.model, opts.batch.max(1), &mut rng)?;
    let mut groups = check_state(&model, &batch, opts, "init", &mut rng)?;
    if opts.perturbed_state {
        for e in model.store().entries() {
            let v = model.store().values(&e.name)?;
            if v.iter().all(|&x| x == 0.0) {
                let r: Vec<f64> = (0..v.len()).map(|_| 0.2 * rng.sample::<f64, _>(StandardNormal)).collect();
                model.store().set_values(&e.name, &r)?;
            }
        }
        groups.extend(check_state(&model, &batch, opts, "perturbed", &mut rng)?);
    }
    let max_rel_err = groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { param_count, groups, max_rel_err, tolerance: opts.tolerance })
}

/// Linear-layer micro-model `y = x W + b` with loss `mean((y - target)^2)`:
/// returns the largest relative error between backpropagated, finite-difference
/// and closed-form gradients.
pub fn linear_micro_check(seed: u64, step: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, din, dout) = (5, 4, 3);
    let x = randn(&mut rng, &[n, din], 1.0)?;
    let target = randn(&mut rng, &[n, dout], 1.0)?;
    let w = Var::from_tensor(&randn(&mut rng, &[din, dout], 1.0)?)?;
    let b = Var::from_tensor(&randn(&mut rng, &[dout], 1.0)?)?;
    let loss_fn = |w: &Tensor, b: &Tensor| -> Result<Tensor> {
        Ok(x.matmul(w)?.broadcast_add(b)?.sub(&target)?.sqr()?.mean_all()?)
    };
    let grads = loss_fn(w.as_tensor(), b.as_tensor())?.backward()?;
    let gw: Vec<f64> = grads.get(w.as_tensor()).ok_or_else(|| Error::InvalidArgument("no weight gradient".into()))?.flatten_all()?.to_vec1()?;
    let gb: Vec<f64> = grads.get(b.as_tensor()).ok_or_else(|| Error::InvalidArgument("no bias gradient".into()))?.to_vec1()?;

    // closed form: dL/dW = 2 X^T (Y - T) / (n dout), dL/db = column sums of 2 (Y - T) / (n dout)
    let xv: Vec<Vec<f64>> = x.to_vec2()?;
    let tv: Vec<Vec<f64>> = target.to_vec2()?;
    let wv: Vec<Vec<f64>> = w.as_tensor().to_vec2()?;
    let bv: Vec<f64> = b.as_tensor().to_vec1()?;
    let scale = 2.0 / (n * dout) as f64;
    let mut cw = vec![0.0; din * dout];
    let mut cb = vec![0.0; dout];
    for r in 0..n {
        for o in 0..dout {
            let y: f64 = (0..din).map(|i| xv[r][i] * wv[i][o]).sum::<f64>() + bv[o];
            let d = scale * (y - tv[r][o]);
            cb[o] += d;
            for i in 0..din {
                cw[i * dout + o] += xv[r][i] * d;
            }
        }
    }

    let mut worst: f64 = 0.0;
    let numeric = |is_weight: bool, idx: usize| -> Result<f64> {
        let var = if is_weight { &w } else { &b };
        let base: Vec<f64> = var.as_tensor().flatten_all()?.to_vec1()?;
        let shape = var.shape().clone();
        let eval = |delta: f64| -> Result<f64> {
            let mut v = base.clone();
            v[idx] += delta;
            let t = Tensor::from_vec(v, shape.clone(), &Device::Cpu)?;
            let l = if is_weight { loss_fn(&t, b.as_tensor())? } else { loss_fn(w.as_tensor(), &t)? };
            Ok(l.to_scalar::<f64>()?)
        };
        Ok((eval(step)? - eval(-step)?) / (2.0 * step))
    };
    for i in 0..din * dout {
        let fd = numeric(true, i)?;
        worst = worst.max(relative_error(gw[i], fd, 1e-12)).max(relative_error(gw[i], cw[i], 1e-12));
    }
    for o in 0..dout {
        let fd = numeric(false, o)?;
        worst = worst.max(relative_error(gb[o], fd, 1e-12)).max(relative_error(gb[o], cb[o], 1e-12));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert!((relative_error(1.0, 1.001, 1e-6) - 0.001 / 1.001).abs() < 1e-15);
    }

    #[test]
    fn miniature_fits_budget() {
        let m = TryOnModel::new(&UNetConfig::miniature(), 0, DType::F64, &Device::Cpu).unwrap();
        assert!(m.store().param_count() <= MAX_PARAMS, "{}", m.store().param_count());
    }
}
