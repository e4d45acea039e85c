//! Attention dumps: raw blobs with a manifest plus PPM renderings.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::capture_attention;
use crate::diffusion::NoiseSchedule;
use crate::model::TryOnModel;
use crate::objectives::{center_coordinate_map, normalized_grid, AttentionMap, CenterCoordinateMap};
use crate::pnm::encode_ppm;
use crate::synthetic::SyntheticSample;
use crate::tensor::ImageTensor;

/// Pixels per query cell in the center-map rendering.
pub const CENTER_CELL_PX: usize = 8;

fn le_f32(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| (v as f32).to_le_bytes()).collect()
}

/// Mean clothing color over each key cell.
fn key_cell_colors(clothing: &ImageTensor, kd: (usize, usize)) -> Vec<[f64; 3]> {
    let (h, w) = (clothing.height(), clothing.width());
    let mut out = Vec::with_capacity(kd.0 * kd.1);
    for k in 0..kd.0 {
        for l in 0..kd.1 {
            let (y0, y1) = (k * h / kd.0, ((k + 1) * h / kd.0).max(k * h / kd.0 + 1));
            let (x0, x1) = (l * w / kd.1, ((l + 1) * w / kd.1).max(l * w / kd.1 + 1));
            let mut acc = [0.0; 3];
            let mut n = 0.0f64;
            for y in y0..y1.min(h) {
                for x in x0..x1.min(w) {
                    let p = clothing.pixel(y, x);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                    n += 1.0;
                }
            }
            out.push(acc.map(|v| v / n.max(1.0)));
        }
    }
    out
}

/// Flat mosaic of `(H_q·h_k) × (W_q·w_k)` pixels: tile `(i, j)` shows query
/// `(i, j)`'s attention row over a dimmed copy of the garment at key resolution,
/// each row normalized by its own maximum.
pub fn attention_mosaic(map: &AttentionMap, clothing: &ImageTensor) -> ImageTensor {
    let (qd, kd) = (map.query_dims(), map.key_dims());
    let base = key_cell_colors(clothing, kd);
    let mut img = ImageTensor::filled(qd.0 * kd.0, qd.1 * kd.1, [0.0; 3]);
    for i in 0..qd.0 {
        for j in 0..qd.1 {
            let row = map.row(i, j);
            let peak = row.iter().cloned().fold(0.0, f64::max).max(1e-12);
            for k in 0..kd.0 {
                for l in 0..kd.1 {
                    let a = row[k * kd.1 + l] / peak;
                    let g = base[k * kd.1 + l];
                    let px = [0.35 * g[0] + 0.65 * a, 0.35 * g[1] + 0.65 * a * a, 0.35 * g[2]];
                    img.set_pixel(i * kd.0 + k, j * kd.1 + l, px);
                }
            }
        }
    }
    img
}

/// Center map as color: red/green encode the horizontal/vertical coordinate
/// rescaled to `[0, 1]`, blue marks queries inside `mask`.
pub fn center_map_image(f: &CenterCoordinateMap, key_cells: usize, mask: Option<&[f64]>) -> ImageTensor {
    let (h, w) = f.dims();
    let scale = key_cells as f64;
    ImageTensor::from_fn(h * CENTER_CELL_PX, w * CENTER_CELL_PX, |y, x| {
        let (i, j) = (y / CENTER_CELL_PX, x / CENTER_CELL_PX);
        let [fx, fy] = f.get(i, j);
        let m = mask.map_or(1.0, |m| m[i * w + j]);
        [0.5 + 0.5 * fx * scale, 0.5 + 0.5 * fy * scale, 0.25 + 0.5 * m]
    })
}

/// Files written by [`dump_attention`].
#[derive(Debug, Clone)]
pub struct DumpFiles {
    pub manifest: PathBuf,
    pub files: Vec<PathBuf>,
}

/// Write per-block attention blobs, center-map blobs, mosaics and renderings.
pub fn dump_maps(sample: &SyntheticSample, maps: &[(usize, AttentionMap)], t_eval: usize, out_dir: &Path) -> Result<DumpFiles> {
    fs::create_dir_all(out_dir).map_err(|e| Error::Format { path: out_dir.to_path_buf(), msg: e.to_string() })?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "step = {t_eval}");
    let _ = writeln!(manifest, "layout = little-endian f32, row-major (H_q, W_q, h_k, w_k) and (H_q, W_q, 2)");
    let mut files = Vec::new();
    for (level, map) in maps {
        let (qd, kd) = (map.query_dims(), map.key_dims());
        let f = center_coordinate_map(map, &normalized_grid(kd.0, kd.1)?)?;
        let mask = sample.garment_mask.resize_nearest(qd.0, qd.1).to_f64();
        let stem = format!("block{level}");
        let outputs: [(String, Vec<u8>); 4] = [
            (format!("{stem}_attn.f32"), le_f32(map.weights().iter().copied())),
            (format!("{stem}_center.f32"), le_f32(f.values().iter().flat_map(|v| v.iter().copied()))),
            (format!("{stem}_mosaic.ppm"), encode_ppm(&attention_mosaic(map, &sample.clothing))),
            (format!("{stem}_center.ppm"), encode_ppm(&center_map_image(&f, kd.0 * kd.1, Some(&mask)))),
        ];
        for (name, bytes) in outputs {
            let path = out_dir.join(&name);
            fs::write(&path, bytes)?;
            files.push(path);
        }
        let _ = writeln!(
            manifest,
            "block = {level} query={}x{} key={}x{} attn={stem}_attn.f32 center={stem}_center.f32 mosaic={stem}_mosaic.ppm center_image={stem}_center.ppm",
            qd.0, qd.1, kd.0, kd.1
        );
    }
    let manifest_path = out_dir.join("attention_manifest.txt");
    fs::write(&manifest_path, manifest)?;
    Ok(DumpFiles { manifest: manifest_path, files })
}

/// Capture attention for one sample at `t_eval` and dump it.
pub fn dump_attention(
    model: &TryOnModel,
    sched: &NoiseSchedule,
    sample: &SyntheticSample,
    t_eval: usize,
    noise_seed: u64,
    out_dir: &Path,
) -> Result<DumpFiles> {
    let maps = capture_attention(model, sched, std::slice::from_ref(sample), t_eval, noise_seed, 1)?;
    dump_maps(sample, &maps[0], t_eval, out_dir)
}
