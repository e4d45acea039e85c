//! Reference computations written independently of the library.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tryon_core::objectives::AttentionMap;
use tryon_core::synthetic::SyntheticSample;
use tryon_core::{BinaryMask, ImageTensor};

/// Softmax rows of random logits, `(hq, wq, hk, wk)` row-major.
pub fn random_attention(rng: &mut ChaCha8Rng, qd: (usize, usize), kd: (usize, usize)) -> AttentionMap {
    let nk = kd.0 * kd.1;
    let mut w = Vec::with_capacity(qd.0 * qd.1 * nk);
    for _ in 0..qd.0 * qd.1 {
        let logits: Vec<f64> = (0..nk).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        w.extend(e.iter().map(|v| v / s));
    }
    AttentionMap::new(qd, kd, w).unwrap()
}

/// Quadruple loop over queries and keys with the grid written out by hand.
pub fn center_oracle(a: &AttentionMap) -> Vec<[f64; 2]> {
    let (qd, kd) = (a.query_dims(), a.key_dims());
    let coord = |idx: usize, len: usize| if len == 1 { 0.0 } else { -1.0 + 2.0 * idx as f64 / (len - 1) as f64 };
    let mut out = Vec::new();
    for i in 0..qd.0 {
        for j in 0..qd.1 {
            let (mut fx, mut fy) = (0.0, 0.0);
            for k in 0..kd.0 {
                for l in 0..kd.1 {
                    let w = a.get(i, j, k, l);
                    fx += w * coord(l, kd.1);
                    fy += w * coord(k, kd.0);
                }
            }
            let n = (kd.0 * kd.1) as f64;
            out.push([fx / n, fy / n]);
        }
    }
    out
}

pub fn atv_oracle(f: &[[f64; 2]], mask: &[f64], dims: (usize, usize)) -> f64 {
    let (h, w) = dims;
    let at = |i: usize, j: usize, c: usize| mask[i * w + j] * f[i * w + j][c];
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            for c in 0..2 {
                if i + 1 < h {
                    total += (at(i + 1, j, c) - at(i, j, c)).abs();
                }
                if j + 1 < w {
                    total += (at(i, j + 1, c) - at(i, j, c)).abs();
                }
            }
        }
    }
    total
}

/// Inverse of `[a b c; d e f]` by Cramer's rule.
pub fn invert(m: [f64; 6]) -> [f64; 6] {
    let det = m[0] * m[4] - m[1] * m[3];
    let (a, b, d, e) = (m[4] / det, -m[1] / det, -m[3] / det, m[0] / det);
    [a, b, -(a * m[2] + b * m[5]), d, e, -(d * m[2] + e * m[5])]
}

pub fn apply(m: [f64; 6], x: f64, y: f64) -> (f64, f64) {
    (m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5])
}

/// Bilinear lookup with pixel centers at half-integers and edge clamping.
pub fn bilinear(img: &ImageTensor, x: f64, y: f64) -> [f64; 3] {
    let (h, w) = (img.height() as f64, img.width() as f64);
    let u = (x - 0.5).max(0.0).min(w - 1.0);
    let v = (y - 0.5).max(0.0).min(h - 1.0);
    let (i0, j0) = (v.floor(), u.floor());
    let (fi, fj) = (v - i0, u - j0);
    let (i1, j1) = ((i0 + 1.0).min(h - 1.0), (j0 + 1.0).min(w - 1.0));
    let px = |i: f64, j: f64| img.pixel(i as usize, j as usize);
    let (p00, p01, p10, p11) = (px(i0, j0), px(i0, j1), px(i1, j0), px(i1, j1));
    let mut out = [0.0; 3];
    for c in 0..3 {
        out[c] = (1.0 - fi) * ((1.0 - fj) * p00[c] + fj * p01[c]) + fi * ((1.0 - fj) * p10[c] + fj * p11[c]);
    }
    out
}

/// Garment pixels whose 3x3 neighbourhood is all garment.
pub fn interior(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::new();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            if (0..3).all(|dy| (0..3).all(|dx| mask.get(y + dy - 1, x + dx - 1))) {
                out.push((y, x));
            }
        }
    }
    out
}

/// Worst per-channel error over person pixels two pixels inside the garment whose
/// clothing source sits 1.5 px inside the clothing garment box.
pub fn residual_oracle(s: &SyntheticSample) -> f64 {
    let inv = invert(s.truth_transform.m);
    let corners = [apply(s.garment_frame.m, 0.0, 0.0), apply(s.garment_frame.m, 1.0, 1.0)];
    let (lx, hx) = (corners[0].0.min(corners[1].0) + 1.5, corners[0].0.max(corners[1].0) - 1.5);
    let (ly, hy) = (corners[0].1.min(corners[1].1) + 1.5, corners[0].1.max(corners[1].1) - 1.5);
    let m = &s.garment_mask;
    let mut worst: f64 = 0.0;
    for y in 2..m.height() - 2 {
        for x in 2..m.width() - 2 {
            if !(y - 2..=y + 2).all(|yy| (x - 2..=x + 2).all(|xx| m.get(yy, xx))) {
                continue;
            }
            let (cx, cy) = apply(inv, x as f64 + 0.5, y as f64 + 0.5);
            if cx < lx || cx > hx || cy < ly || cy > hy {
                continue;
            }
            let want = bilinear(&s.clothing, cx, cy);
            for (a, b) in want.iter().zip(s.person.pixel(y, x)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

