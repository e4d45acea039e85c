//! Conditioned denoising network.

mod attention;
mod layers;
mod params;
mod unet;

pub use attention::{grid_position_features, BlockOutput, MultiHeadAttention, ZeroCrossAttentionBlock};
pub use layers::{avg_pool2, timestep_features, upsample_nearest2, Conv3, GroupNorm, LayerNorm, Linear, ResBlock};
pub use params::{Init, ParamBuilder, ParamEntry, ParamRole, ParamStore};
pub use unet::{
    stack_images_nhwc, AttentionCapture, Encoder, ExemplarEmbedder, FeaturePyramid, ForwardOutput, TryOnModel, UNetConfig,
};

use crate::codec;
use crate::error::{shape_err, Result};
use crate::synthetic::SyntheticSample;
use crate::tensor::{ImageTensor, LatentTensor};

/// Number of channels of the assembled denoiser input.
pub const ZETA_CHANNELS: usize = 13;

/// The four parts of the denoiser input, in their fixed concatenation order.
#[derive(Debug, Clone)]
pub struct ZetaInput<'a> {
    pub z_t: &'a LatentTensor,
    pub agnostic_lat: &'a LatentTensor,
    /// Single channel, values in `[0, 1]`.
    pub mask_resized: &'a LatentTensor,
    pub pose_lat: &'a LatentTensor,
}

/// Concatenate `[z_t; agnostic; mask; pose]` along channels.
pub fn assemble_zeta(z: &ZetaInput) -> Result<LatentTensor> {
    let (h, w) = (z.z_t.height(), z.z_t.width());
    for (name, part, ch) in [
        ("z_t", z.z_t, codec::LATENT_CHANNELS),
        ("agnostic", z.agnostic_lat, codec::LATENT_CHANNELS),
        ("mask", z.mask_resized, 1),
        ("pose", z.pose_lat, codec::LATENT_CHANNELS),
    ] {
        if part.shape() != (ch, h, w) {
            return shape_err(format!("{name} has shape {:?}, expected ({ch}, {h}, {w})", part.shape()));
        }
    }
    if z.mask_resized.data().iter().any(|&m| !(0.0..=1.0).contains(&m)) {
        return shape_err("mask values must lie in [0, 1]");
    }
    let mut data = Vec::with_capacity(ZETA_CHANNELS * h * w);
    for part in [z.z_t, z.agnostic_lat, z.mask_resized, z.pose_lat] {
        data.extend_from_slice(part.data());
    }
    LatentTensor::new(ZETA_CHANNELS, h, w, data)
}

/// Everything the denoiser is conditioned on besides `z_t`.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    pub agnostic_lat: LatentTensor,
    /// Erased-region mask at latent resolution (area fraction per cell).
    pub mask_lat: LatentTensor,
    pub pose_lat: LatentTensor,
    pub clothing_lat: LatentTensor,
    pub clothing: ImageTensor,
}

impl ConditionBundle {
    pub fn from_sample(sample: &SyntheticSample, patch: usize) -> Result<Self> {
        let agnostic_lat = codec::encode(&sample.agnostic, patch)?;
        let (h, w) = (agnostic_lat.height(), agnostic_lat.width());
        let mask_lat = LatentTensor::new(1, h, w, sample.agnostic_mask.area_downsample(patch)?)?;
        Ok(Self {
            agnostic_lat,
            mask_lat,
            pose_lat: codec::encode(&sample.pose, patch)?,
            clothing_lat: codec::encode(&sample.clothing, patch)?,
            clothing: sample.clothing.clone(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.agnostic_lat.shape();
        if c != codec::LATENT_CHANNELS
            || self.pose_lat.shape() != (c, h, w)
            || self.clothing_lat.shape() != (c, h, w)
            || self.mask_lat.shape() != (1, h, w)
        {
            return shape_err("condition latents disagree in shape");
        }
        Ok(())
    }

    pub fn latent_channels(&self) -> usize {
        self.agnostic_lat.channels()
    }

    pub fn height(&self) -> usize {
        self.agnostic_lat.height()
    }

    pub fn width(&self) -> usize {
        self.agnostic_lat.width()
    }

    pub fn zeta(&self, z_t: &LatentTensor) -> Result<LatentTensor> {
        assemble_zeta(&ZetaInput {
            z_t,
            agnostic_lat: &self.agnostic_lat,
            mask_resized: &self.mask_lat,
            pose_lat: &self.pose_lat,
        })
    }

    /// Binary mask of latent cells untouched by the erased region.
    pub fn known_mask(&self) -> LatentTensor {
        let (h, w) = (self.height(), self.width());
        LatentTensor::from_fn(1, h, w, |_, y, x| if self.mask_lat.get(0, y, x) > 0.0 { 0.0 } else { 1.0 })
            .expect("binary values are finite")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeta_channel_count_and_order() {
        let parts: Vec<LatentTensor> = (0..3)
            .map(|i| LatentTensor::from_fn(4, 2, 3, |c, _, _| (i * 10 + c) as f64).unwrap())
            .collect();
        let mask = LatentTensor::from_fn(1, 2, 3, |_, y, _| y as f64).unwrap();
        let z = assemble_zeta(&ZetaInput {
            z_t: &parts[0],
            agnostic_lat: &parts[1],
            mask_resized: &mask,
            pose_lat: &parts[2],
        })
        .unwrap();
        assert_eq!(z.channels(), 4 + 4 + 1 + 4);
        assert_eq!(z.get(3, 0, 0), 3.0);
        assert_eq!(z.get(4, 0, 0), 10.0);
        assert_eq!(z.get(8, 1, 2), 1.0);
        assert_eq!(z.get(9, 0, 0), 20.0);
    }

    #[test]
    fn zeta_all_zero() {
        let zl = LatentTensor::zeros(4, 2, 2);
        let m = LatentTensor::zeros(1, 2, 2);
        let z = assemble_zeta(&ZetaInput { z_t: &zl, agnostic_lat: &zl, mask_resized: &m, pose_lat: &zl }).unwrap();
        assert_eq!(z.shape(), (13, 2, 2));
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeta_shape_mismatch() {
        let zl = LatentTensor::zeros(4, 2, 2);
        let other = LatentTensor::zeros(4, 2, 3);
        let m = LatentTensor::zeros(1, 2, 2);
        assert!(assemble_zeta(&ZetaInput { z_t: &zl, agnostic_lat: &other, mask_resized: &m, pose_lat: &zl }).is_err());
        let bad_mask = LatentTensor::zeros(2, 2, 2);
        assert!(assemble_zeta(&ZetaInput { z_t: &zl, agnostic_lat: &zl, mask_resized: &bad_mask, pose_lat: &zl }).is_err());
    }
}
