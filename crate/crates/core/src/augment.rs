//! Misalignment-inducing augmentation.
//!
//! Two geometric streams are transformed: the clothing image, and the U-Net
//! side (person, agnostic image and mask, pose, garment mask). Flip uses one
//! draw for both streams; shift and scale draw independently per stream, which
//! is what breaks the pixel alignment between garment and body. Photometric
//! jitter is shared by the clothing and the person image.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::geometry::Affine2;
use crate::synthetic::{make_agnostic, SyntheticSample, CLOTHING_BACKGROUND};
use crate::tensor::{BinaryMask, ImageTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub flip_p: f64,
    /// Maximum shift as a fraction of the image extent.
    pub shift_limit: f64,
    pub shift_p: f64,
    /// Maximum relative scale change.
    pub scale_limit: f64,
    pub scale_p: f64,
    /// Maximum hue rotation in degrees.
    pub hsv_limit: f64,
    pub hsv_p: f64,
    /// Maximum relative contrast change.
    pub contrast_limit: f64,
    pub contrast_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_p: 0.5,
            shift_limit: 0.2,
            shift_p: 0.5,
            scale_limit: 0.2,
            scale_p: 0.5,
            hsv_limit: 5.0,
            hsv_p: 0.5,
            contrast_limit: 0.3,
            contrast_p: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Every probability zero: augmentation is the identity.
    pub fn disabled() -> Self {
        Self { flip_p: 0.0, shift_p: 0.0, scale_p: 0.0, hsv_p: 0.0, contrast_p: 0.0, ..Self::default() }
    }

    pub fn is_identity(&self) -> bool {
        [self.flip_p, self.shift_p, self.scale_p, self.hsv_p, self.contrast_p].iter().all(|&p| p == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_p", self.flip_p),
            ("shift_p", self.shift_p),
            ("scale_p", self.scale_p),
            ("hsv_p", self.hsv_p),
            ("contrast_p", self.contrast_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return invalid(format!("{name} = {p} is not a probability"));
            }
        }
        for (name, l) in [
            ("shift_limit", self.shift_limit),
            ("scale_limit", self.scale_limit),
            ("hsv_limit", self.hsv_limit),
            ("contrast_limit", self.contrast_limit),
        ] {
            if !(l >= 0.0) {
                return invalid(format!("{name} = {l} must be non-negative"));
            }
        }
        if self.shift_limit >= 0.5 {
            return invalid("shift_limit >= 0.5 can move the content entirely off the canvas");
        }
        if self.scale_limit >= 1.0 {
            return invalid("scale_limit >= 1 can collapse the image to nothing");
        }
        if self.contrast_limit >= 1.0 {
            return invalid("contrast_limit >= 1 can flatten the image");
        }
        Ok(())
    }
}

/// Concrete draws for one call, exposed so tests can replay them.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentDraws {
    pub flip: bool,
    /// `(dx, dy)` as fractions of width and height.
    pub clothing_shift: Option<(f64, f64)>,
    pub condition_shift: Option<(f64, f64)>,
    pub clothing_scale: Option<f64>,
    pub condition_scale: Option<f64>,
    pub hue_deg: Option<f64>,
    pub contrast: Option<f64>,
}

impl AugmentDraws {
    pub fn draw<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let mut hit = |p: f64| rng.random::<f64>() < p;
        let flip = hit(cfg.flip_p);
        let cs = hit(cfg.shift_p);
        let ds = hit(cfg.shift_p);
        let cz = hit(cfg.scale_p);
        let dz = hit(cfg.scale_p);
        let hue = hit(cfg.hsv_p);
        let con = hit(cfg.contrast_p);
        let mut sym = |limit: f64| limit * (2.0 * rng.random::<f64>() - 1.0);
        let clothing_shift = if cs { Some((sym(cfg.shift_limit), sym(cfg.shift_limit))) } else { None };
        let condition_shift = if ds { Some((sym(cfg.shift_limit), sym(cfg.shift_limit))) } else { None };
        let clothing_scale = if cz { Some(1.0 + sym(cfg.scale_limit)) } else { None };
        let condition_scale = if dz { Some(1.0 + sym(cfg.scale_limit)) } else { None };
        let hue_deg = if hue { Some(sym(cfg.hsv_limit)) } else { None };
        let contrast = if con { Some(1.0 + sym(cfg.contrast_limit)) } else { None };
        Self { flip, clothing_shift, condition_shift, clothing_scale, condition_scale, hue_deg, contrast }
    }

    /// Geometric map for one stream: flip, then scale about the center, then shift.
    fn stream_transform(&self, shift: Option<(f64, f64)>, scale: Option<f64>, h: usize, w: usize) -> Affine2 {
        let (wf, hf) = (w as f64, h as f64);
        let mut t = if self.flip { Affine2::flip_horizontal(wf) } else { Affine2::IDENTITY };
        if let Some(s) = scale {
            t = Affine2::scale_about(wf / 2.0, hf / 2.0, s, s).compose(&t);
        }
        if let Some((dx, dy)) = shift {
            t = Affine2::translation(dx * wf, dy * hf).compose(&t);
        }
        t
    }

    pub fn clothing_transform(&self, h: usize, w: usize) -> Affine2 {
        self.stream_transform(self.clothing_shift, self.clothing_scale, h, w)
    }

    pub fn condition_transform(&self, h: usize, w: usize) -> Affine2 {
        self.stream_transform(self.condition_shift, self.condition_scale, h, w)
    }
}

/// Resample `img` under the forward map `t` (bilinear). Samples that fall
/// outside the source take `fill`, or the nearest border pixel when `None`.
pub fn warp_image(img: &ImageTensor, t: &Affine2, fill: Option<[f64; 3]>) -> Result<ImageTensor> {
    if *t == Affine2::IDENTITY {
        return Ok(img.clone());
    }
    let inv = t.inverse()?;
    let (h, w) = (img.height(), img.width());
    Ok(ImageTensor::from_fn(h, w, |y, x| {
        let (sx, sy) = inv.apply(x as f64 + 0.5, y as f64 + 0.5);
        match fill {
            Some(f) if sx < 0.0 || sy < 0.0 || sx > w as f64 || sy > h as f64 => f,
            _ => img.sample_bilinear(sx, sy),
        }
    }))
}

/// Nearest-neighbour resample of a mask under the forward map `t`; outside is unset.
pub fn warp_mask(mask: &BinaryMask, t: &Affine2) -> Result<BinaryMask> {
    if *t == Affine2::IDENTITY {
        return Ok(mask.clone());
    }
    let inv = t.inverse()?;
    let (h, w) = (mask.height(), mask.width());
    Ok(BinaryMask::from_fn(h, w, |y, x| {
        let (sx, sy) = inv.apply(x as f64 + 0.5, y as f64 + 0.5);
        if sx < 0.0 || sy < 0.0 {
            return false;
        }
        let (ix, iy) = (sx.floor() as usize, sy.floor() as usize);
        ix < w && iy < h && mask.get(iy, ix)
    }))
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Hue rotation followed by a contrast stretch about 0.5.
pub fn photometric(img: &ImageTensor, hue_deg: Option<f64>, contrast: Option<f64>) -> ImageTensor {
    if hue_deg.is_none() && contrast.is_none() {
        return img.clone();
    }
    ImageTensor::from_fn(img.height(), img.width(), |y, x| {
        let mut px = img.pixel(y, x);
        if let Some(dh) = hue_deg {
            let [h, s, v] = rgb_to_hsv(px);
            px = hsv_to_rgb([h + dh, s, v]);
        }
        if let Some(c) = contrast {
            px = px.map(|v| 0.5 + c * (v - 0.5));
        }
        px
    })
}

/// Apply concrete draws to a sample.
pub fn apply_draws(sample: &SyntheticSample, draws: &AugmentDraws) -> Result<SyntheticSample> {
    let (h, w) = (sample.person.height(), sample.person.width());
    let tc = draws.clothing_transform(h, w);
    let td = draws.condition_transform(h, w);

    let clothing = warp_image(&sample.clothing, &tc, Some(CLOTHING_BACKGROUND))?;
    let person = warp_image(&sample.person, &td, None)?;
    let pose = warp_image(&sample.pose, &td, Some([0.0; 3]))?;
    let garment_mask = warp_mask(&sample.garment_mask, &td)?;
    let agnostic_mask = warp_mask(&sample.agnostic_mask, &td)?;

    let clothing = photometric(&clothing, draws.hue_deg, draws.contrast);
    let person = photometric(&person, draws.hue_deg, draws.contrast);
    let agnostic = if tc == Affine2::IDENTITY
        && td == Affine2::IDENTITY
        && draws.hue_deg.is_none()
        && draws.contrast.is_none()
    {
        sample.agnostic.clone()
    } else {
        make_agnostic(&person, &agnostic_mask)
    };

    Ok(SyntheticSample {
        person,
        clothing,
        agnostic,
        agnostic_mask,
        pose,
        garment_mask,
        truth_transform: td.compose(&sample.truth_transform).compose(&tc.inverse()?),
        garment_frame: tc.compose(&sample.garment_frame),
        family: sample.family,
        mask_margin: sample.mask_margin,
    })
}

pub fn augment_pair<R: Rng + ?Sized>(
    sample: &SyntheticSample,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<SyntheticSample> {
    cfg.validate()?;
    let draws = AugmentDraws::draw(cfg, rng);
    apply_draws(sample, &draws)
}

/// Largest per-channel error between the person image and the clothing image
/// rendered through `truth_transform`. Only pixels at least two pixels inside
/// the person garment whose source lies inside the clothing garment are scored;
/// the rest mix in background under bilinear sampling.
pub fn annotation_residual(sample: &SyntheticSample) -> Result<f64> {
    let inv = sample.truth_transform.inverse()?;
    let m = &sample.garment_mask;
    let (h, w) = (m.height(), m.width());
    // garment box in the clothing image, shrunk so the bilinear footprint stays on cloth
    let f = &sample.garment_frame;
    let (x0, y0) = f.apply(0.0, 0.0);
    let (x1, y1) = f.apply(1.0, 1.0);
    let inset = 1.5;
    let (lx, hx) = (x0.min(x1) + inset, x0.max(x1) - inset);
    let (ly, hy) = (y0.min(y1) + inset, y0.max(y1) - inset);
    let mut worst: f64 = 0.0;
    for y in 2..h.saturating_sub(2) {
        for x in 2..w.saturating_sub(2) {
            let interior = (0..5).all(|dy| (0..5).all(|dx| m.get(y + dy - 2, x + dx - 2)));
            if !interior {
                continue;
            }
            let (cx, cy) = inv.apply(x as f64 + 0.5, y as f64 + 0.5);
            if cx < lx || cx > hx || cy < ly || cy > hy {
                continue;
            }
            let want = sample.clothing.sample_bilinear(cx, cy);
            let got = sample.person.pixel(y, x);
            for c in 0..3 {
                worst = worst.max((want[c] - got[c]).abs());
            }
        }
    }
    Ok(worst)
}
