//! Plain channel-major arrays used at the API boundary: latents, images and
//! binary masks. Batched model code converts these to device tensors.

use candle_core::{DType, Device, Tensor};

use crate::error::{invalid, shape_err, Error, Result};

/// A real `(channels, height, width)` array with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LatentTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return invalid("latent dimensions must be positive");
        }
        if data.len() != channels * height * width {
            return shape_err(format!(
                "latent data length {} does not match ({channels}, {height}, {width})",
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("latent entry {i} is {}", data[i])));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub(crate) fn ensure_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape(), other.shape()));
        }
        Ok(())
    }

    /// Elementwise combination of two same-shaped latents.
    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_shape(other, "zip_with")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self::new(self.channels, self.height, self.width, data)
    }

    /// Stack latents into a `(batch, height, width, channels)` tensor.
    pub fn stack_nhwc(items: &[&LatentTensor], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let (c, h, w) = first.shape();
        let mut buf = Vec::with_capacity(items.len() * c * h * w);
        for item in items {
            if item.shape() != (c, h, w) {
                return shape_err("batch members differ in shape");
            }
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        buf.push(item.get(ch, y, x));
                    }
                }
            }
        }
        Ok(Tensor::from_vec(buf, (items.len(), h, w, c), device)?.to_dtype(dtype)?)
    }

    /// Split a `(batch, height, width, channels)` tensor back into latents.
    pub fn unstack_nhwc(t: &Tensor) -> Result<Vec<LatentTensor>> {
        let (b, h, w, c) = t.dims4()?;
        let flat: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        (0..b)
            .map(|i| {
                let base = i * h * w * c;
                LatentTensor::from_fn(c, h, w, |ch, y, x| flat[base + (y * w + x) * c + ch])
            })
            .collect()
    }
}

/// RGB image `(3, height, width)` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    /// Builds an image, clamping every value into `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return invalid("image dimensions must be positive");
        }
        if data.len() != 3 * height * width {
            return shape_err(format!(
                "image data length {} does not match (3, {height}, {width})",
                data.len()
            ));
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("NaN in image".into()));
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for v in rgb {
            data.extend(std::iter::repeat_n(v.clamp(0.0, 1.0), height * width));
        }
        Self { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let n = height * width;
        let mut data = vec![0.0; 3 * n];
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                for c in 0..3 {
                    data[c * n + y * width + x] = px[c].clamp(0.0, 1.0);
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let n = self.height * self.width;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * n + y * self.width + x] = v.clamp(0.0, 1.0);
        }
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at `i + 0.5`),
    /// clamping to the border.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = fx - x0 as f64;
        let ay = fy - y0 as f64;
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let top = self.get(c, y0, x0) * (1.0 - ax) + self.get(c, y0, x1) * ax;
            let bot = self.get(c, y1, x0) * (1.0 - ax) + self.get(c, y1, x1) * ax;
            *o = top * (1.0 - ay) + bot * ay;
        }
        out
    }
}

/// Binary `(height, width)` mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return shape_err(format!("mask length {} vs {height}x{width}", data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Chebyshev dilation by `radius` pixels.
    pub fn dilate(&self, radius: usize) -> Self {
        let r = radius as isize;
        Self::from_fn(self.height, self.width, |y, x| {
            (-r..=r).any(|dy| {
                (-r..=r).any(|dx| {
                    let yy = y as isize + dy;
                    let xx = x as isize + dx;
                    yy >= 0
                        && xx >= 0
                        && (yy as usize) < self.height
                        && (xx as usize) < self.width
                        && self.get(yy as usize, xx as usize)
                })
            })
        })
    }

    /// Nearest-neighbour resample onto a `(height, width)` grid by sampling cell centers.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |y, x| {
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
            self.get(sy, sx)
        })
    }

    /// Fraction of set pixels inside each `patch x patch` block.
    pub fn area_downsample(&self, patch: usize) -> Result<Vec<f64>> {
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return shape_err(format!("mask {}x{} not divisible by {patch}", self.height, self.width));
        }
        let (h, w) = (self.height / patch, self.width / patch);
        let norm = (patch * patch) as f64;
        let mut out = vec![0.0; h * w];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    out[(y / patch) * w + x / patch] += 1.0;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= norm);
        Ok(out)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}
