//! Building blocks operating on channels-last tensors `(b, h, w, c)`.

use candle_core::{DType, Tensor, D};

use super::params::{Init, ParamBuilder};
use crate::error::{shape_err, Result};

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, din: usize, dout: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            let w = pb.param("weight", &[din, dout], Init::Normal((1.0 / din as f64).sqrt()))?;
            let b = pb.param("bias", &[dout], Init::Zeros)?;
            Ok(Self { w, b })
        })
    }

    pub fn zeros(pb: &mut ParamBuilder, name: &str, din: usize, dout: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            let w = pb.param("weight", &[din, dout], Init::Zeros)?;
            let b = pb.param("bias", &[dout], Init::Zeros)?;
            Ok(Self { w, b })
        })
    }

    pub fn in_dim(&self) -> usize {
        self.w.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.dims()[1]
    }

    /// Applies to the last axis of a tensor of any rank.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let din = *dims.last().unwrap_or(&0);
        if din != self.in_dim() {
            return shape_err(format!("linear expects last dim {}, got {dims:?}", self.in_dim()));
        }
        let rows = x.elem_count() / din.max(1);
        let y = x.reshape((rows, din))?.matmul(&self.w)?.broadcast_add(&self.b)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

/// 3×3 convolution, stride 1, zero padding 1. Weight layout `(9·cin, cout)`,
/// tap-major with taps in row-major `(dy, dx)` order.
#[derive(Debug, Clone)]
pub struct Conv3 {
    w: Tensor,
    b: Tensor,
    cin: usize,
    cout: usize,
}

impl Conv3 {
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Self::with_init(pb, name, cin, cout, Init::Normal((1.0 / (9 * cin) as f64).sqrt()))
    }

    pub fn zeros(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Self::with_init(pb, name, cin, cout, Init::Zeros)
    }

    fn with_init(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, init: Init) -> Result<Self> {
        pb.scope(name, |pb| {
            let w = pb.param("weight", &[9 * cin, cout], init)?;
            let b = pb.param("bias", &[cout], Init::Zeros)?;
            Ok(Self { w, b, cin, cout })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        if c != self.cin {
            return shape_err(format!("conv expects {} input channels, got {c}", self.cin));
        }
        let padded = x.pad_with_zeros(1, 1, 1)?.pad_with_zeros(2, 1, 1)?;
        let mut taps = Vec::with_capacity(9);
        for dy in 0..3 {
            let row = padded.narrow(1, dy, h)?;
            for dx in 0..3 {
                taps.push(row.narrow(2, dx, w)?);
            }
        }
        let cols = Tensor::cat(&taps, 3)?.reshape((b * h * w, 9 * c))?;
        let y = cols.matmul(&self.w)?.broadcast_add(&self.b)?;
        Ok(y.reshape((b, h, w, self.cout))?)
    }
}

/// Group normalization over `(h, w, c/groups)` per sample and group.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, max_groups: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            let gamma = pb.param("gamma", &[channels], Init::Ones)?;
            let beta = pb.param("beta", &[channels], Init::Zeros)?;
            Ok(Self { gamma, beta, groups: gcd(channels, max_groups.max(1)), eps: 1e-5 })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let g = self.groups;
        let xg = x.reshape((b, h * w, g, c / g))?;
        let mean = xg.mean_keepdim(3)?.mean_keepdim(1)?;
        let centered = xg.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(3)?.mean_keepdim(1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.reshape((b, h, w, c))?.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            let gamma = pb.param("gamma", &[dim], Init::Ones)?;
            let beta = pb.param("beta", &[dim], Init::Zeros)?;
            Ok(Self { gamma, beta, eps: 1e-5 })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Residual block with optional additive timestep conditioning.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv3,
    temb: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv3,
    skip: Option<Linear>,
}

impl ResBlock {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        temb_dim: Option<usize>,
        groups: usize,
    ) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(Self {
                norm1: GroupNorm::new(pb, "norm1", cin, groups)?,
                conv1: Conv3::new(pb, "conv1", cin, cout)?,
                temb: temb_dim.map(|d| Linear::new(pb, "temb", d, cout)).transpose()?,
                norm2: GroupNorm::new(pb, "norm2", cout, groups)?,
                conv2: Conv3::new(pb, "conv2", cout, cout)?,
                skip: if cin != cout { Some(Linear::new(pb, "skip", cin, cout)?) } else { None },
            })
        })
    }

    pub fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        if let (Some(proj), Some(t)) = (&self.temb, temb) {
            let (b, _, _, c) = h.dims4()?;
            let e = proj.forward(&t.silu()?)?.reshape((b, 1, 1, c))?;
            h = h.broadcast_add(&e)?;
        }
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// 2×2 average pooling on channels-last input.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("cannot pool {h}x{w} by 2"));
    }
    Ok(x.reshape((b, h / 2, 2, w / 2, 2, c))?.mean(4)?.mean(2)?)
}

/// Nearest-neighbour 2× upsampling on channels-last input.
pub fn upsample_nearest2(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape((b, h, 1, w, 1, c))?.broadcast_as((b, h, 2, w, 2, c))?.reshape((b, 2 * h, 2 * w, c))?)
}

#[derive(Debug, Clone)]
pub struct Downsample {
    conv: Conv3,
}

impl Downsample {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        Ok(Self { conv: pb.scope(name, |pb| Conv3::new(pb, "conv", channels, channels))? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(&avg_pool2(x)?)
    }
}

#[derive(Debug, Clone)]
pub struct Upsample {
    conv: Conv3,
}

impl Upsample {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        Ok(Self { conv: pb.scope(name, |pb| Conv3::new(pb, "conv", channels, channels))? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(&upsample_nearest2(x)?)
    }
}

/// Sinusoidal features of the step index, `(b, dim)` with cosines first.
pub fn timestep_features(steps: &[usize], dim: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        let t = t as f64;
        for i in 0..half {
            let f = (-(10000f64).ln() * i as f64 / half as f64).exp();
            data.push((t * f).cos());
        }
        for i in 0..half {
            let f = (-(10000f64).ln() * i as f64 / half as f64).exp();
            data.push((t * f).sin());
        }
        for _ in 2 * half..dim {
            data.push(0.0);
        }
    }
    Ok(Tensor::from_vec(data, (steps.len(), dim), device)?.to_dtype(dtype)?)
}
