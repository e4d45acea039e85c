//! Procedural try-on triplets with exact garment-to-person correspondence.
//!
//! A flat garment texture is drawn into a fixed box of the clothing image and
//! then warped into the person image by a random affine `truth_transform`
//! (clothing-image pixel coordinates to person-image pixel coordinates). Every
//! other view (agnostic image, masks, pose field) is derived from that map.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::geometry::Affine2;
use crate::tensor::{BinaryMask, ImageTensor};

/// Fill value of the erased region in the agnostic image.
pub const NEUTRAL_GRAY: f64 = 0.5;
/// Background of the flat clothing image.
pub const CLOTHING_BACKGROUND: [f64; 3] = [0.92, 0.92, 0.92];

/// Marks queries outside the garment in correspondence maps.
pub const NO_CORRESPONDENCE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TextureFamily {
    Stripes,
    Checkers,
    Glyphs,
    ColorField,
}

impl TextureFamily {
    pub const ALL: [TextureFamily; 4] =
        [TextureFamily::Stripes, TextureFamily::Checkers, TextureFamily::Glyphs, TextureFamily::ColorField];

    pub fn name(self) -> &'static str {
        match self {
            TextureFamily::Stripes => "stripes",
            TextureFamily::Checkers => "checkers",
            TextureFamily::Glyphs => "glyphs",
            TextureFamily::ColorField => "color_field",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub height: usize,
    pub width: usize,
    /// Garment box in the clothing image, `[x0, y0, x1, y1]` in pixels.
    pub garment_box: [f64; 4],
    pub max_translate: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub max_rotation_deg: f64,
    /// Largest shift of the garment inside the clothing image, pixels.
    pub clothing_translate: f64,
    /// Largest relative size change of the garment inside the clothing image.
    pub clothing_scale: f64,
    /// Dilation (pixels) of the garment mask that yields the agnostic mask.
    pub mask_margin: usize,
    pub families: Vec<TextureFamily>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 48,
            garment_box: [12.0, 12.0, 36.0, 52.0],
            max_translate: 6.0,
            scale_min: 0.85,
            scale_max: 1.1,
            max_rotation_deg: 10.0,
            clothing_translate: 0.0,
            clothing_scale: 0.0,
            mask_margin: 2,
            families: TextureFamily::ALL.to_vec(),
        }
    }
}

impl DatasetConfig {
    /// No random placement: the garment lands where it sits in the clothing image.
    pub fn identity_placement(mut self) -> Self {
        self.max_translate = 0.0;
        self.scale_min = 1.0;
        self.scale_max = 1.0;
        self.max_rotation_deg = 0.0;
        self.clothing_translate = 0.0;
        self.clothing_scale = 0.0;
        self
    }

    fn box_center(&self) -> (f64, f64) {
        let b = &self.garment_box;
        ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0)
    }

    /// Unit texture square to clothing pixels.
    pub fn garment_frame(&self) -> Affine2 {
        let b = &self.garment_box;
        Affine2::new([b[2] - b[0], 0.0, b[0], 0.0, b[3] - b[1], b[1]])
    }

    /// Garment frame inside the clothing image after a shift and resize about the box center.
    pub fn clothing_frame(&self, tx: f64, ty: f64, scale: f64) -> Affine2 {
        let (cx, cy) = self.box_center();
        Affine2::translation(tx, ty).compose(&Affine2::scale_about(cx, cy, scale, scale)).compose(&self.garment_frame())
    }

    pub fn placement(&self, tx: f64, ty: f64, scale: f64, rot_deg: f64) -> Affine2 {
        let (cx, cy) = self.box_center();
        Affine2::translation(tx, ty)
            .compose(&Affine2::rotation_about(cx, cy, rot_deg.to_radians()))
            .compose(&Affine2::scale_about(cx, cy, scale, scale))
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return invalid("image size must be positive");
        }
        let b = &self.garment_box;
        if !(b[0] >= 0.0 && b[1] >= 0.0 && b[2] <= self.width as f64 && b[3] <= self.height as f64)
            || b[2] - b[0] < 2.0
            || b[3] - b[1] < 2.0
        {
            return invalid(format!("garment box {b:?} does not fit the canvas"));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return invalid("need 0 < scale_min <= scale_max");
        }
        if self.max_translate < 0.0 || !(0.0..=45.0).contains(&self.max_rotation_deg) {
            return invalid("translation must be non-negative and rotation within 0..=45 degrees");
        }
        if self.clothing_translate < 0.0 || !(0.0..1.0).contains(&self.clothing_scale) {
            return invalid("clothing jitter must be non-negative with scale below 1");
        }
        for &tx in &[-self.clothing_translate, self.clothing_translate] {
            for &ty in &[-self.clothing_translate, self.clothing_translate] {
                let f = self.clothing_frame(tx, ty, 1.0 + self.clothing_scale);
                for (u, v) in [(0.0, 0.0), (1.0, 1.0)] {
                    let (px, py) = f.apply(u, v);
                    if px < 0.0 || py < 0.0 || px > self.width as f64 || py > self.height as f64 {
                        return invalid("clothing jitter pushes the garment off the clothing canvas");
                    }
                }
            }
        }
        if self.families.is_empty() {
            return invalid("at least one texture family is required");
        }
        // worst-case corners of the placed garment must stay on the canvas
        let corners = [(b[0], b[1]), (b[2], b[1]), (b[0], b[3]), (b[2], b[3])];
        let steps = 8;
        for si in 0..=1 {
            let s = if si == 0 { self.scale_min } else { self.scale_max };
            for ri in 0..=steps {
                let r = -self.max_rotation_deg + 2.0 * self.max_rotation_deg * ri as f64 / steps as f64;
                for &tx in &[-self.max_translate, self.max_translate] {
                    for &ty in &[-self.max_translate, self.max_translate] {
                        let t = self.placement(tx, ty, s, r);
                        for &(x, y) in &corners {
                            let (px, py) = t.apply(x, y);
                            if px < 0.0 || py < 0.0 || px > self.width as f64 || py > self.height as f64 {
                                return invalid(format!(
                                    "placement ranges push the garment off-canvas (corner at {px:.1}, {py:.1})"
                                ));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// One training triplet plus ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub person: ImageTensor,
    pub clothing: ImageTensor,
    pub agnostic: ImageTensor,
    pub agnostic_mask: BinaryMask,
    pub pose: ImageTensor,
    pub garment_mask: BinaryMask,
    /// Clothing-image pixel coordinates to person-image pixel coordinates.
    pub truth_transform: Affine2,
    /// Unit texture square to clothing-image pixel coordinates.
    pub garment_frame: Affine2,
    pub family: TextureFamily,
    pub mask_margin: usize,
}

#[derive(Debug, Clone)]
enum Texture {
    Stripes { angle: f64, period: f64, phase: f64, colors: [[f64; 3]; 2] },
    Checkers { period: f64, phase: (f64, f64), colors: [[f64; 3]; 2] },
    Glyphs { cells: (usize, usize), bits: Vec<[bool; 4]>, ink: Vec<[f64; 3]>, paper: [f64; 3] },
    ColorField { corners: [[f64; 3]; 4], freq: (f64, f64), phase: f64 },
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

fn distinct_colors<R: Rng>(rng: &mut R) -> [[f64; 3]; 2] {
    loop {
        let a = random_color(rng);
        let b = random_color(rng);
        let d: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        if d > 0.6 {
            return [a, b];
        }
    }
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Wave in `[0, 1]`, flattened near the extremes but smooth at pixel scale.
fn soft_wave(x: f64) -> f64 {
    let v = x.sin();
    0.5 + 0.25 * v * (3.0 - v * v)
}

impl Texture {
    fn random<R: Rng>(family: TextureFamily, rng: &mut R) -> Self {
        match family {
            TextureFamily::Stripes => Texture::Stripes {
                angle: [0.0, PI / 2.0, PI / 4.0, -PI / 4.0][rng.random_range(0..4)],
                period: rng.random_range(12.0..18.0),
                phase: rng.random_range(0.0..2.0 * PI),
                colors: distinct_colors(rng),
            },
            TextureFamily::Checkers => Texture::Checkers {
                period: rng.random_range(14.0..20.0),
                phase: (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)),
                colors: distinct_colors(rng),
            },
            TextureFamily::Glyphs => {
                let cells = (3, 4);
                let n = cells.0 * cells.1;
                Texture::Glyphs {
                    cells,
                    bits: (0..n).map(|_| std::array::from_fn(|_| rng.random_bool(0.5))).collect(),
                    ink: (0..n).map(|_| random_color(rng)).collect(),
                    paper: random_color(rng),
                }
            }
            TextureFamily::ColorField => Texture::ColorField {
                corners: std::array::from_fn(|_| random_color(rng)),
                freq: (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)),
                phase: rng.random_range(0.0..2.0 * PI),
            },
        }
    }

    /// Color at texture coordinates `(s, t)` in `[0, 1]^2`; `size` is the
    /// garment box size in pixels so patterns have pixel-scale periods.
    fn color(&self, s: f64, t: f64, size: (f64, f64)) -> [f64; 3] {
        let (px, py) = (s * size.0, t * size.1);
        let base = match self {
            Texture::Stripes { angle, period, phase, colors } => {
                let u = px * angle.cos() + py * angle.sin();
                mix(colors[0], colors[1], soft_wave(2.0 * PI * u / period + phase))
            }
            Texture::Checkers { period, phase, colors } => {
                let a = (2.0 * PI * px / period + phase.0).sin();
                let b = (2.0 * PI * py / period + phase.1).sin();
                let v = a * b;
                mix(colors[0], colors[1], 0.5 + 0.25 * v * (3.0 - v * v))
            }
            Texture::Glyphs { cells, bits, ink, paper } => {
                let (cw, ch) = (1.0 / cells.0 as f64, 1.0 / cells.1 as f64);
                let cx = ((s / cw) as usize).min(cells.0 - 1);
                let cy = ((t / ch) as usize).min(cells.1 - 1);
                let idx = cy * cells.0 + cx;
                // 2x2 dot glyph with gaussian blobs inside each cell
                let (lx, ly) = ((s - cx as f64 * cw) / cw, (t - cy as f64 * ch) / ch);
                let sigma = 0.15;
                let mut ink_amount: f64 = 0.0;
                for gy in 0..2 {
                    for gx in 0..2 {
                        if bits[idx][gy * 2 + gx] {
                            let dx = lx - (gx as f64 + 0.5) / 2.0;
                            let dy = ly - (gy as f64 + 0.5) / 2.0;
                            ink_amount += (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                        }
                    }
                }
                // fade to paper at the cell border so neighbouring cells join smoothly
                let window = ((PI * lx).sin() * (PI * ly).sin()).powi(2);
                mix(*paper, ink[idx], (0.5 * ink_amount).tanh() * window)
            }
            Texture::ColorField { corners, freq, phase } => {
                let top = mix(corners[0], corners[1], s);
                let bot = mix(corners[2], corners[3], s);
                let c = mix(top, bot, t);
                let wave = 0.08 * (2.0 * PI * (freq.0 * s + freq.1 * t) + phase).sin();
                [c[0] + wave, c[1] + wave, c[2] + wave]
            }
        };
        // slow vertical shading so positions inside a periodic pattern differ
        let shade = 0.85 + 0.15 * t;
        [base[0] * shade, base[1] * shade, base[2] * shade]
    }
}

fn inside_unit(s: f64, t: f64) -> bool {
    (0.0..1.0).contains(&s) && (0.0..1.0).contains(&t)
}

/// Draw a sample from `rng`.
pub fn generate_sample<R: Rng>(rng: &mut R, cfg: &DatasetConfig) -> Result<SyntheticSample> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let family = cfg.families[rng.random_range(0..cfg.families.len())];
    let texture = Texture::random(family, rng);

    let jitter = cfg.clothing_translate > 0.0 || cfg.clothing_scale > 0.0;
    let frame = if jitter {
        let jx = rng.random_range(-1.0..=1.0) * cfg.clothing_translate;
        let jy = rng.random_range(-1.0..=1.0) * cfg.clothing_translate;
        let js = 1.0 + rng.random_range(-1.0..=1.0) * cfg.clothing_scale;
        cfg.clothing_frame(jx, jy, js)
    } else {
        cfg.garment_frame()
    };
    let frame_inv = frame.inverse()?;
    let size = (cfg.garment_box[2] - cfg.garment_box[0], cfg.garment_box[3] - cfg.garment_box[1]);
    let clothing = ImageTensor::from_fn(h, w, |y, x| {
        let (s, t) = frame_inv.apply(x as f64 + 0.5, y as f64 + 0.5);
        if inside_unit(s, t) {
            texture.color(s, t, size)
        } else {
            CLOTHING_BACKGROUND
        }
    });

    let tx = rng.random_range(-1.0..=1.0) * cfg.max_translate;
    let ty = rng.random_range(-1.0..=1.0) * cfg.max_translate;
    let scale = rng.random_range(cfg.scale_min..=cfg.scale_max);
    let rot = rng.random_range(-1.0..=1.0) * cfg.max_rotation_deg;
    // texture square to person pixels does not depend on where the clothing photo put the garment
    let placement = cfg.placement(tx, ty, scale, rot);
    let on_body = placement.compose(&cfg.garment_frame());
    let truth = if jitter { on_body.compose(&frame_inv) } else { placement };

    let bg_top = random_color(rng);
    let bg_bottom = random_color(rng);
    let skin = mix([0.55, 0.38, 0.28], [0.95, 0.8, 0.68], rng.random());
    let head_r = rng.random_range(5.0..7.5);
    // torso outline slightly larger than the garment, head above it
    let torso = on_body.compose(&Affine2::scale_about(0.5, 0.5, 1.12, 1.04));
    let torso_inv = torso.inverse()?;
    let (head_x, head_y) = on_body.apply(0.5, -0.02);
    let head_y = head_y - head_r;

    let garment_map = on_body.inverse()?;
    let truth_inv = truth.inverse()?;
    let mut garment_bits = Vec::with_capacity(h * w);
    let person = ImageTensor::from_fn(h, w, |y, x| {
        let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
        let (s, t) = garment_map.apply(cx, cy);
        let in_garment = inside_unit(s, t);
        garment_bits.push(in_garment);
        if in_garment {
            let (qx, qy) = truth_inv.apply(cx, cy);
            return clothing.sample_bilinear(qx, qy);
        }
        let (ts, tt) = torso_inv.apply(cx, cy);
        let d_head = ((cx - head_x).powi(2) + (cy - head_y).powi(2)).sqrt();
        if inside_unit(ts, tt) || d_head < head_r {
            skin
        } else {
            mix(bg_top, bg_bottom, cy / h as f64)
        }
    });
    let garment_mask = BinaryMask::new(h, w, garment_bits)?;
    let agnostic_mask = garment_mask.dilate(cfg.mask_margin);
    let agnostic = make_agnostic(&person, &agnostic_mask);
    let pose = render_pose(&garment_map, h, w);

    Ok(SyntheticSample {
        person,
        clothing,
        agnostic,
        agnostic_mask,
        pose,
        garment_mask,
        truth_transform: truth,
        garment_frame: frame,
        family,
        mask_margin: cfg.mask_margin,
    })
}

/// Deterministic per-index sample: the stream is seeded from `(seed, index)`.
pub fn generate_indexed(seed: u64, index: u64, cfg: &DatasetConfig) -> Result<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    generate_sample(&mut rng, cfg)
}

pub fn make_agnostic(person: &ImageTensor, mask: &BinaryMask) -> ImageTensor {
    ImageTensor::from_fn(person.height(), person.width(), |y, x| {
        if mask.get(y, x) {
            [NEUTRAL_GRAY; 3]
        } else {
            person.pixel(y, x)
        }
    })
}

/// Garment texture coordinates rendered as `(u, v, 1)` inside the garment,
/// zero elsewhere. `person_to_texture` maps person pixels to the unit square.
pub fn render_pose(person_to_texture: &Affine2, h: usize, w: usize) -> ImageTensor {
    ImageTensor::from_fn(h, w, |y, x| {
        let (s, t) = person_to_texture.apply(x as f64 + 0.5, y as f64 + 0.5);
        if inside_unit(s, t) {
            [s, t, 1.0]
        } else {
            [0.0; 3]
        }
    })
}

/// Key index (row-major on the `k_dims` clothing grid) for each query cell of
/// the `q_dims` person grid whose center lies in the garment region, else
/// [`NO_CORRESPONDENCE`].
pub fn correspondence_truth(
    sample: &SyntheticSample,
    q_dims: (usize, usize),
    k_dims: (usize, usize),
) -> Result<Vec<u32>> {
    let (h, w) = (sample.person.height(), sample.person.width());
    let (ch, cw) = (sample.clothing.height(), sample.clothing.width());
    if q_dims.0 == 0 || q_dims.1 == 0 || k_dims.0 == 0 || k_dims.1 == 0 {
        return invalid("grid dimensions must be positive");
    }
    let inv = sample.truth_transform.inverse()?;
    let region = sample.garment_mask.resize_nearest(q_dims.0, q_dims.1);
    let mut out = Vec::with_capacity(q_dims.0 * q_dims.1);
    for i in 0..q_dims.0 {
        for j in 0..q_dims.1 {
            if !region.get(i, j) {
                out.push(NO_CORRESPONDENCE);
                continue;
            }
            let px = (j as f64 + 0.5) * w as f64 / q_dims.1 as f64;
            let py = (i as f64 + 0.5) * h as f64 / q_dims.0 as f64;
            let (cx, cy) = inv.apply(px, py);
            let kl = ((cx / cw as f64 * k_dims.1 as f64).floor().max(0.0) as usize).min(k_dims.1 - 1);
            let kk = ((cy / ch as f64 * k_dims.0 as f64).floor().max(0.0) as usize).min(k_dims.0 - 1);
            out.push((kk * k_dims.1 + kl) as u32);
        }
    }
    Ok(out)
}
