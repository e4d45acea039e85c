use candle_core::{DType, Device, Tensor};

use super::attention::ZeroCrossAttentionBlock;
use super::layers::{avg_pool2, timestep_features, Conv3, Downsample, GroupNorm, Linear, ResBlock, Upsample};
use super::params::{ParamBuilder, ParamRole, ParamStore};
use super::{ConditionBundle, ZETA_CHANNELS};
use crate::codec::LATENT_CHANNELS;
use crate::diffusion::Denoiser;
use crate::error::{invalid, shape_err, Error, Result};
use crate::objectives::AttentionMap;
use crate::tensor::{ImageTensor, LatentTensor};

const ENCODER_PREFIX: &str = "unet.enc";
const SPATIAL_PREFIX: &str = "spatial";

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub base_width: usize,
    /// Number of downsampling stages; the pyramid has `depth + 1` levels.
    pub depth: usize,
    /// Width multiplier applied to every level below the finest.
    pub width_mult: usize,
    pub heads: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    /// Pyramid levels (0 = finest) that carry a zero cross-attention block.
    pub attn_levels: Vec<usize>,
    pub norm_groups: usize,
    pub ff_mult: usize,
    /// Add fixed grid-position features to cross-attention queries and keys.
    pub pos_enc: bool,
    pub max_tokens: usize,
    /// Image pixels per latent cell along each axis.
    pub patch: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            depth: 2,
            width_mult: 2,
            heads: 4,
            latent_height: 16,
            latent_width: 12,
            attn_levels: vec![0, 1],
            norm_groups: 8,
            ff_mult: 2,
            pos_enc: false,
            max_tokens: 1024,
            patch: 4,
        }
    }
}

impl UNetConfig {
    /// Small configuration used for gradient checks and fast tests.
    pub fn miniature() -> Self {
        Self {
            base_width: 4,
            depth: 2,
            width_mult: 1,
            heads: 2,
            latent_height: 8,
            latent_width: 4,
            attn_levels: vec![0, 1],
            norm_groups: 2,
            ff_mult: 1,
            pos_enc: false,
            max_tokens: 1024,
            patch: 2,
        }
    }

    pub fn level_width(&self, level: usize) -> usize {
        if level == 0 {
            self.base_width
        } else {
            self.base_width * self.width_mult
        }
    }

    pub fn level_dims(&self, level: usize) -> (usize, usize) {
        (self.latent_height >> level, self.latent_width >> level)
    }

    pub fn temb_dim(&self) -> usize {
        2 * self.base_width
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.latent_height * self.patch, self.latent_width * self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.width_mult == 0 || self.heads == 0 || self.ff_mult == 0 {
            return invalid("widths, multipliers and head count must be positive");
        }
        if self.depth == 0 {
            return invalid("depth must be at least 1");
        }
        let div = 1usize << self.depth;
        if self.latent_height == 0 || self.latent_height % div != 0 || self.latent_width == 0 || self.latent_width % div != 0 {
            return invalid(format!(
                "latent {}x{} not divisible by 2^depth = {div}",
                self.latent_height, self.latent_width
            ));
        }
        for l in 0..=self.depth {
            if self.level_width(l) % self.heads != 0 {
                return invalid(format!("level {l} width {} not divisible by {} heads", self.level_width(l), self.heads));
            }
        }
        for &l in &self.attn_levels {
            if l >= self.depth {
                return invalid(format!("attention level {l} must be finer than the coarsest level {}", self.depth));
            }
        }
        if !self.patch.is_power_of_two() || self.patch < 2 {
            return invalid("patch must be a power of two, at least 2");
        }
        let n = self.latent_height * self.latent_width;
        if n > self.max_tokens {
            return invalid(format!("{n} tokens exceed max_tokens {}", self.max_tokens));
        }
        Ok(())
    }
}

/// Encoder feature maps, finest to coarsest.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        for pair in levels.windows(2) {
            let (_, h0, w0, _) = pair[0].dims4()?;
            let (_, h1, w1, _) = pair[1].dims4()?;
            if h1 * 2 != h0 || w1 * 2 != w0 {
                return shape_err("pyramid levels must halve in resolution");
            }
        }
        Ok(Self { levels })
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    conv_in: Conv3,
    levels: Vec<(ResBlock, Option<Downsample>)>,
}

impl Encoder {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &UNetConfig, temb_dim: Option<usize>) -> Result<Self> {
        pb.scope(name, |pb| {
            let conv_in = Conv3::new(pb, "conv_in", LATENT_CHANNELS, cfg.level_width(0))?;
            let mut levels = Vec::new();
            for l in 0..=cfg.depth {
                let cin = cfg.level_width(l.saturating_sub(1));
                let cout = cfg.level_width(l);
                let res = ResBlock::new(pb, &format!("{l}.res"), cin, cout, temb_dim, cfg.norm_groups)?;
                let down =
                    if l < cfg.depth { Some(Downsample::new(pb, &format!("{l}.down"), cout)?) } else { None };
                levels.push((res, down));
            }
            Ok(Self { conv_in, levels })
        })
    }

    /// Per-level outputs; `stem_extra` is added after the input convolution.
    fn run(&self, x: &Tensor, stem_extra: Option<&Tensor>, temb: Option<&Tensor>) -> Result<Vec<Tensor>> {
        let mut h = self.conv_in.forward(x)?;
        if let Some(e) = stem_extra {
            h = (h + e)?;
        }
        let mut out = Vec::with_capacity(self.levels.len());
        for (res, down) in &self.levels {
            let y = res.forward(&h, temb)?;
            h = match down {
                Some(d) => d.forward(&y)?,
                None => y.clone(),
            };
            out.push(y);
        }
        Ok(out)
    }

    pub fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<FeaturePyramid> {
        FeaturePyramid::new(self.run(x, None, temb)?)
    }
}

/// Global exemplar embedding: pooled convolutional tower, global average pool,
/// zero-initialized projection to the timestep-embedding width.
#[derive(Debug, Clone)]
pub struct ExemplarEmbedder {
    conv1: Conv3,
    conv2: Conv3,
    proj: Linear,
    pool_steps: usize,
    image_dims: (usize, usize),
}

impl ExemplarEmbedder {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &UNetConfig) -> Result<Self> {
        let c1 = (cfg.base_width / 2).max(2);
        let c2 = cfg.base_width;
        pb.scope(name, |pb| {
            Ok(Self {
                conv1: Conv3::new(pb, "conv1", 3, c1)?,
                conv2: Conv3::new(pb, "conv2", c1, c2)?,
                proj: Linear::zeros(pb, "proj", c2, cfg.temb_dim())?,
                pool_steps: cfg.patch.trailing_zeros() as usize,
                image_dims: cfg.image_dims(),
            })
        })
    }

    pub fn out_dim(&self) -> usize {
        self.proj.out_dim()
    }

    /// `img` (b, H, W, 3) → (b, out_dim).
    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        let (_, h, w, c) = img.dims4()?;
        if (h, w) != self.image_dims || c != 3 {
            return shape_err(format!("exemplar must be {:?}x3, got {:?}", self.image_dims, img.dims()));
        }
        let mut x = img.clone();
        for _ in 0..self.pool_steps {
            x = avg_pool2(&x)?;
        }
        let x = self.conv1.forward(&x)?.silu()?;
        let x = self.conv2.forward(&avg_pool2(&x)?)?.silu()?;
        self.proj.forward(&x.mean(2)?.mean(1)?)
    }
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    res: ResBlock,
    zca: Option<ZeroCrossAttentionBlock>,
    up: Option<Upsample>,
}

/// Attention weights captured from one zero cross-attention block.
#[derive(Debug, Clone)]
pub struct AttentionCapture {
    pub level: usize,
    pub query_dims: (usize, usize),
    pub key_dims: (usize, usize),
    /// `(b, H_q·W_q, h_k·w_k)`, head-averaged.
    pub weights: Tensor,
}

impl AttentionCapture {
    pub fn to_maps(&self) -> Result<Vec<AttentionMap>> {
        let b = self.weights.dims3()?.0;
        (0..b)
            .map(|i| AttentionMap::from_tensor(&self.weights.get(i)?, self.query_dims, self.key_dims))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `(b, H, W, 4)`.
    pub eps: Tensor,
    /// One entry per zero cross-attention block, finest level first.
    pub attn: Vec<AttentionCapture>,
}

/// Frozen base denoiser plus the trainable conditioning branch.
#[derive(Debug, Clone)]
pub struct TryOnModel {
    cfg: UNetConfig,
    store: ParamStore,
    time_in: Linear,
    time_out: Linear,
    encoder: Encoder,
    conv_in_extra: Conv3,
    mid: ResBlock,
    decoder: Vec<DecoderLevel>,
    out_norm: GroupNorm,
    out_conv: Conv3,
    spatial: Encoder,
    exemplar: ExemplarEmbedder,
}

impl TryOnModel {
    pub fn new(cfg: &UNetConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, device.clone());
        let temb = cfg.temb_dim();
        let mut pb = ParamBuilder::new(&mut store, seed, ParamRole::Base);
        let time_in = pb.scope("time", |pb| Linear::new(pb, "in", cfg.base_width, temb))?;
        let time_out = pb.scope("time", |pb| Linear::new(pb, "out", temb, temb))?;
        let encoder = Encoder::new(&mut pb, ENCODER_PREFIX, cfg, Some(temb))?;
        let mid = pb.scope("unet", |pb| ResBlock::new(pb, "mid", cfg.level_width(cfg.depth), cfg.level_width(cfg.depth), Some(temb), cfg.norm_groups))?;
        let mut decoder = Vec::new();
        for l in (0..=cfg.depth).rev() {
            let cur = cfg.level_width((l + 1).min(cfg.depth));
            let wl = cfg.level_width(l);
            let level = pb.scope("unet.dec", |pb| {
                pb.scope(&l.to_string(), |pb| {
                    let res = ResBlock::new(pb, "res", cur + wl, wl, Some(temb), cfg.norm_groups)?;
                    let up = if l > 0 { Some(Upsample::new(pb, "up", wl)?) } else { None };
                    Ok((res, up))
                })
            })?;
            decoder.push(DecoderLevel { res: level.0, zca: None, up: level.1 });
        }
        let (out_norm, out_conv) = pb.scope("unet.out", |pb| {
            Ok((GroupNorm::new(pb, "norm", cfg.level_width(0), cfg.norm_groups)?, Conv3::new(pb, "conv", cfg.level_width(0), LATENT_CHANNELS)?))
        })?;

        let (conv_in_extra, spatial, exemplar) = pb.with_role(ParamRole::Adapter, |pb| {
            let extra = pb.scope("unet", |pb| {
                Conv3::zeros(pb, "conv_in_extra", ZETA_CHANNELS - LATENT_CHANNELS, cfg.level_width(0))
            })?;
            let spatial = Encoder::new(pb, SPATIAL_PREFIX, cfg, None)?;
            for (i, dl) in decoder.iter_mut().enumerate() {
                let l = cfg.depth - i;
                if cfg.attn_levels.contains(&l) {
                    let w = cfg.level_width(l);
                    dl.zca = Some(ZeroCrossAttentionBlock::new(
                        pb,
                        &format!("zca.{l}"),
                        w,
                        w,
                        cfg.heads,
                        cfg.ff_mult,
                        cfg.pos_enc,
                        cfg.max_tokens,
                    )?);
                }
            }
            let exemplar = ExemplarEmbedder::new(pb, "exemplar", cfg)?;
            Ok((extra, spatial, exemplar))
        })?;
        let model = Self {
            cfg: cfg.clone(),
            store,
            time_in,
            time_out,
            encoder,
            conv_in_extra,
            mid,
            decoder,
            out_norm,
            out_conv,
            spatial,
            exemplar,
        };
        model.copy_encoder_to_spatial()?;
        Ok(model)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Independent model with identical parameter values.
    pub fn duplicate(&self) -> Result<Self> {
        let copy = Self::new(&self.cfg, 0, self.dtype(), self.device())?;
        for e in self.store.entries() {
            copy.store.set_values(&e.name, &self.store.values(&e.name)?)?;
        }
        Ok(copy)
    }

    /// Overwrite every spatial-encoder parameter with its U-Net encoder counterpart.
    pub fn copy_encoder_to_spatial(&self) -> Result<()> {
        for e in self.store.entries() {
            if let Some(rest) = e.name.strip_prefix(SPATIAL_PREFIX) {
                let src = format!("{ENCODER_PREFIX}{rest}");
                let v = self.store.values(&src)?;
                self.store.set_values(&e.name, &v)?;
            }
        }
        Ok(())
    }

    /// Largest absolute difference between spatial-encoder parameters and their
    /// U-Net encoder counterparts. Errors if a spatial parameter has no counterpart.
    pub fn spatial_copy_difference(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        let mut matched = 0;
        for e in self.store.entries() {
            if let Some(rest) = e.name.strip_prefix(SPATIAL_PREFIX) {
                let src = format!("{ENCODER_PREFIX}{rest}");
                let a = self.store.values(&e.name)?;
                let b = self.store.values(&src)?;
                if a.len() != b.len() {
                    return shape_err(format!("{} and {src} differ in shape", e.name));
                }
                for (x, y) in a.iter().zip(&b) {
                    worst = worst.max((x - y).abs());
                }
                matched += 1;
            }
        }
        if matched == 0 {
            return invalid("model has no spatial encoder parameters");
        }
        Ok(worst)
    }

    pub fn time_embedding(&self, steps: &[usize]) -> Result<Tensor> {
        let f = timestep_features(steps, self.cfg.base_width, self.dtype(), self.device())?;
        self.time_out.forward(&self.time_in.forward(&f)?.silu()?)
    }

    pub fn exemplar_embed(&self, img: &Tensor) -> Result<Tensor> {
        self.exemplar.forward(img)
    }

    /// `clothing_lat` (b, H, W, 4) → one feature map per encoder level.
    pub fn spatial_pyramid(&self, clothing_lat: &Tensor) -> Result<FeaturePyramid> {
        let (_, h, w, c) = clothing_lat.dims4()?;
        if (h, w) != (self.cfg.latent_height, self.cfg.latent_width) || c != LATENT_CHANNELS {
            return shape_err(format!(
                "clothing latent must be ({}, {}, {LATENT_CHANNELS}), got {:?}",
                self.cfg.latent_height,
                self.cfg.latent_width,
                clothing_lat.dims()
            ));
        }
        self.spatial.forward(clothing_lat, None)
    }

    /// Denoiser forward. `x` is either the 13-channel conditioned input or a bare
    /// 4-channel `z_t` (the unconditioned base model). Without a pyramid the zero
    /// cross-attention blocks are skipped.
    pub fn unet_forward(
        &self,
        x: &Tensor,
        steps: &[usize],
        exemplar: Option<&Tensor>,
        pyramid: Option<&FeaturePyramid>,
    ) -> Result<ForwardOutput> {
        let (b, h, w, c) = x.dims4()?;
        if (h, w) != (self.cfg.latent_height, self.cfg.latent_width) {
            return shape_err(format!("latent must be {}x{}, got {h}x{w}", self.cfg.latent_height, self.cfg.latent_width));
        }
        if steps.len() != b {
            return shape_err(format!("{} step indices for batch of {b}", steps.len()));
        }
        let mut temb = self.time_embedding(steps)?;
        if let Some(e) = exemplar {
            temb = (temb + e)?;
        }
        let (base_in, extra) = match c {
            LATENT_CHANNELS => (x.clone(), None),
            ZETA_CHANNELS => (
                x.narrow(3, 0, LATENT_CHANNELS)?,
                Some(self.conv_in_extra.forward(&x.narrow(3, LATENT_CHANNELS, ZETA_CHANNELS - LATENT_CHANNELS)?)?),
            ),
            _ => return shape_err(format!("denoiser input must have {LATENT_CHANNELS} or {ZETA_CHANNELS} channels, got {c}")),
        };
        if let Some(p) = pyramid {
            for &l in &self.cfg.attn_levels {
                let lv = p.levels.get(l).ok_or_else(|| Error::Shape(format!("pyramid lacks level {l}")))?;
                let (pb, ph, pw, _) = lv.dims4()?;
                if pb != b || (ph, pw) != self.cfg.level_dims(l) {
                    return shape_err(format!("pyramid level {l} has shape {:?}", lv.dims()));
                }
            }
        }
        let skips = self.encoder.run(&base_in, extra.as_ref(), Some(&temb))?;
        let mut hcur = self.mid.forward(skips.last().expect("at least one level"), Some(&temb))?;
        let mut attn = Vec::new();
        for (i, dl) in self.decoder.iter().enumerate() {
            let l = self.cfg.depth - i;
            let cat = Tensor::cat(&[&hcur, &skips[l]], 3)?;
            hcur = dl.res.forward(&cat, Some(&temb))?;
            if let (Some(zca), Some(p)) = (&dl.zca, pyramid) {
                let kv = &p.levels[l];
                let r = zca.forward(&hcur, kv)?;
                let (_, hk, wk, _) = kv.dims4()?;
                attn.push(AttentionCapture {
                    level: l,
                    query_dims: self.cfg.level_dims(l),
                    key_dims: (hk, wk),
                    weights: r.attn,
                });
                hcur = r.out;
            }
            if let Some(up) = &dl.up {
                hcur = up.forward(&hcur)?;
            }
        }
        let eps = self.out_conv.forward(&self.out_norm.forward(&hcur)?.silu()?)?;
        attn.reverse();
        Ok(ForwardOutput { eps, attn })
    }

    /// Full conditioned forward: spatial pyramid from `clothing_lat` and exemplar
    /// embedding from `clothing_img`, either of which may be ablated.
    pub fn forward(
        &self,
        zeta: &Tensor,
        steps: &[usize],
        clothing_lat: Option<&Tensor>,
        clothing_img: Option<&Tensor>,
    ) -> Result<ForwardOutput> {
        let pyramid = clothing_lat.map(|c| self.spatial_pyramid(c)).transpose()?;
        let exemplar = clothing_img.map(|i| self.exemplar_embed(i)).transpose()?;
        self.unet_forward(zeta, steps, exemplar.as_ref(), pyramid.as_ref())
    }
}

/// Stack images into a channels-last `(b, H, W, 3)` tensor.
pub fn stack_images_nhwc(items: &[&ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(items.len() * h * w * 3);
    for img in items {
        if (img.height(), img.width()) != (h, w) {
            return shape_err("images in a batch must share a resolution");
        }
        for y in 0..h {
            for x in 0..w {
                data.extend_from_slice(&img.pixel(y, x));
            }
        }
    }
    Ok(Tensor::from_vec(data, (items.len(), h, w, 3), device)?.to_dtype(dtype)?)
}

impl Denoiser for TryOnModel {
    fn predict_noise(&self, z_t: &LatentTensor, t: usize, cond: &ConditionBundle) -> Result<LatentTensor> {
        let zeta = cond.zeta(z_t)?;
        let (dtype, dev) = (self.dtype(), self.device());
        let x = LatentTensor::stack_nhwc(&[&zeta], dtype, dev)?;
        let cl = LatentTensor::stack_nhwc(&[&cond.clothing_lat], dtype, dev)?;
        let img = stack_images_nhwc(&[&cond.clothing], dtype, dev)?;
        let out = self.forward(&x, &[t], Some(&cl), Some(&img))?;
        let mut v = LatentTensor::unstack_nhwc(&out.eps)?;
        Ok(v.remove(0))
    }
}
