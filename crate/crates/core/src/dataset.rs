//! On-disk sample sets: PPM/PGM images, one annotation file per sample and a
//! CSV index.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::pnm::{write_pgm, write_ppm};
use crate::synthetic::{generate_indexed, DatasetConfig, SyntheticSample};

pub const INDEX_CSV_HEADER: &str = "index,family,person,clothing,agnostic,agnostic_mask,pose,garment_mask,annotation";

const IMAGE_FILES: [&str; 7] = ["person", "clothing", "agnostic", "agnostic_mask", "pose", "garment_mask", "annotation"];

fn file_names(index: u64) -> [String; 7] {
    IMAGE_FILES.map(|stem| {
        let ext = match stem {
            "agnostic_mask" | "garment_mask" => "pgm",
            "annotation" => "txt",
            _ => "ppm",
        };
        format!("{index:05}_{stem}.{ext}")
    })
}

/// Text annotation: transform coefficients and the file names of the sample.
pub fn annotation_text(index: u64, sample: &SyntheticSample) -> String {
    let names = file_names(index);
    let mut s = String::new();
    let _ = writeln!(s, "index = {index}");
    let _ = writeln!(s, "family = {}", sample.family.name());
    let fmt = |m: &[f64; 6]| m.iter().map(|v| format!("{v:.17e}")).collect::<Vec<_>>().join(" ");
    let _ = writeln!(s, "truth_transform = {}", fmt(&sample.truth_transform.m));
    let _ = writeln!(s, "garment_frame = {}", fmt(&sample.garment_frame.m));
    let _ = writeln!(s, "mask_margin = {}", sample.mask_margin);
    for (stem, name) in IMAGE_FILES.iter().zip(&names).take(6) {
        let _ = writeln!(s, "{stem} = {name}");
    }
    s
}

/// Write one sample into `dir` and return its index row.
pub fn write_sample(dir: &Path, index: u64, sample: &SyntheticSample) -> Result<String> {
    let n = file_names(index);
    write_ppm(&dir.join(&n[0]), &sample.person)?;
    write_ppm(&dir.join(&n[1]), &sample.clothing)?;
    write_ppm(&dir.join(&n[2]), &sample.agnostic)?;
    write_pgm(&dir.join(&n[3]), &sample.agnostic_mask)?;
    write_ppm(&dir.join(&n[4]), &sample.pose)?;
    write_pgm(&dir.join(&n[5]), &sample.garment_mask)?;
    fs::write(dir.join(&n[6]), annotation_text(index, sample))?;
    Ok(format!("{index},{},{}", sample.family.name(), n.join(",")))
}

/// Generate `count` samples from `seed` and write them with an `index.csv`.
pub fn write_dataset(dir: &Path, seed: u64, count: usize, cfg: &DatasetConfig) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut index = format!("{INDEX_CSV_HEADER}\n");
    for i in 0..count as u64 {
        let sample = generate_indexed(seed, i, cfg)?;
        index.push_str(&write_sample(dir, i, &sample)?);
        index.push('\n');
    }
    let path = dir.join("index.csv");
    fs::write(&path, index)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pnm::{read_pgm_mask, read_ppm};

    #[test]
    fn written_files_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig::default();
        let index = write_dataset(dir.path(), 5, 2, &cfg).unwrap();
        let text = fs::read_to_string(index).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0], INDEX_CSV_HEADER);
        let s = generate_indexed(5, 1, &cfg).unwrap();
        let mask = read_pgm_mask(&dir.path().join("00001_garment_mask.pgm")).unwrap();
        assert_eq!(mask, s.garment_mask);
        let person = read_ppm(&dir.path().join("00001_person.ppm")).unwrap();
        assert_eq!((person.height(), person.width()), (s.person.height(), s.person.width()));
        let ann = fs::read_to_string(dir.path().join("00001_annotation.txt")).unwrap();
        assert!(ann.contains("truth_transform = "));
    }
}
