use crate::error::{invalid, Result};

/// Planar affine map `(x, y) -> (a x + b y + c, d x + e y + f)` on continuous
/// pixel coordinates (pixel `(i, j)` has its center at `(j + 0.5, i + 0.5)`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2 {
    pub m: [f64; 6],
}

impl Affine2 {
    pub const IDENTITY: Self = Self { m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0] };

    pub fn new(m: [f64; 6]) -> Self {
        Self { m }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self { m: [1.0, 0.0, dx, 0.0, 1.0, dy] }
    }

    pub fn scale_about(cx: f64, cy: f64, sx: f64, sy: f64) -> Self {
        Self { m: [sx, 0.0, cx - sx * cx, 0.0, sy, cy - sy * cy] }
    }

    pub fn rotation_about(cx: f64, cy: f64, radians: f64) -> Self {
        let (s, c) = radians.sin_cos();
        Self { m: [c, -s, cx - c * cx + s * cy, s, c, cy - s * cx - c * cy] }
    }

    /// Mirror across the vertical center line of an image `width` pixels wide.
    pub fn flip_horizontal(width: f64) -> Self {
        Self { m: [-1.0, 0.0, width, 0.0, 1.0, 0.0] }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5])
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn compose(&self, inner: &Self) -> Self {
        let a = &self.m;
        let b = &inner.m;
        Self {
            m: [
                a[0] * b[0] + a[1] * b[3],
                a[0] * b[1] + a[1] * b[4],
                a[0] * b[2] + a[1] * b[5] + a[2],
                a[3] * b[0] + a[4] * b[3],
                a[3] * b[1] + a[4] * b[4],
                a[3] * b[2] + a[4] * b[5] + a[5],
            ],
        }
    }

    pub fn determinant(&self) -> f64 {
        self.m[0] * self.m[4] - self.m[1] * self.m[3]
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.determinant();
        if det.abs() < 1e-12 || !det.is_finite() {
            return invalid(format!("affine map is not invertible (det = {det})"));
        }
        let m = &self.m;
        let (ia, ib, id, ie) = (m[4] / det, -m[1] / det, -m[3] / det, m[0] / det);
        Ok(Self { m: [ia, ib, -(ia * m[2] + ib * m[5]), id, ie, -(id * m[2] + ie * m[5])] })
    }

    pub fn is_axis_aligned(&self) -> bool {
        self.m[1] == 0.0 && self.m[3] == 0.0
    }
}

impl Default for Affine2 {
    fn default() -> Self {
        Self::IDENTITY
    }
}
