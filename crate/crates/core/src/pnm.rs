//! Binary PPM (P6) and PGM (P5) reading and writing, 8 bits per sample.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{BinaryMask, ImageTensor};

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &ImageTensor) -> Vec<u8> {
    let (h, w) = (img.height(), img.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            out.extend(img.pixel(y, x).map(to_byte));
        }
    }
    out
}

pub fn encode_pgm(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.data().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

pub fn write_ppm(path: &Path, img: &ImageTensor) -> Result<()> {
    fs::write(path, encode_ppm(img))?;
    Ok(())
}

pub fn write_pgm(path: &Path, mask: &BinaryMask) -> Result<()> {
    fs::write(path, encode_pgm(mask))?;
    Ok(())
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    body: usize,
}

fn parse_header(bytes: &[u8]) -> Option<Header> {
    let magic = [*bytes.first()?, *bytes.get(1)?];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos)? {
                b'#' => {
                    while *bytes.get(pos)? != b'\n' {
                        pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos)?.is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos]).ok()?.parse().ok()?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos)?.is_ascii_whitespace() || fields[2] != 255 {
        return None;
    }
    Some(Header { magic, width: fields[0], height: fields[1], body: pos + 1 })
}

fn format_err(path: &Path, msg: &str) -> Error {
    Error::Format { path: path.to_path_buf(), msg: msg.to_string() }
}

pub fn read_ppm(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path)?;
    let hdr = parse_header(&bytes).ok_or_else(|| format_err(path, "bad PPM header"))?;
    if &hdr.magic != b"P6" {
        return Err(format_err(path, "not a binary PPM"));
    }
    let body = &bytes[hdr.body..];
    if body.len() < 3 * hdr.width * hdr.height {
        return Err(format_err(path, "truncated raster"));
    }
    Ok(ImageTensor::from_fn(hdr.height, hdr.width, |y, x| {
        let i = 3 * (y * hdr.width + x);
        [body[i] as f64 / 255.0, body[i + 1] as f64 / 255.0, body[i + 2] as f64 / 255.0]
    }))
}

pub fn read_pgm_mask(path: &Path) -> Result<BinaryMask> {
    let bytes = fs::read(path)?;
    let hdr = parse_header(&bytes).ok_or_else(|| format_err(path, "bad PGM header"))?;
    if &hdr.magic != b"P5" {
        return Err(format_err(path, "not a binary PGM"));
    }
    let body = &bytes[hdr.body..];
    if body.len() < hdr.width * hdr.height {
        return Err(format_err(path, "truncated raster"));
    }
    Ok(BinaryMask::from_fn(hdr.height, hdr.width, |y, x| body[y * hdr.width + x] >= 128))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_on_byte_grid() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::from_fn(5, 7, |y, x| {
            [(y * 40) as f64 / 255.0, (x * 30) as f64 / 255.0, 128.0 / 255.0]
        });
        let p = dir.path().join("a.ppm");
        write_ppm(&p, &img).unwrap();
        let back = read_ppm(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let m = BinaryMask::from_fn(4, 3, |y, x| (x + y) % 3 == 0);
        let p = dir.path().join("m.pgm");
        write_pgm(&p, &m).unwrap();
        assert_eq!(read_pgm_mask(&p).unwrap(), m);
    }

    #[test]
    fn header_layout() {
        let img = ImageTensor::filled(2, 3, [1.0, 0.0, 0.0]);
        let bytes = encode_ppm(&img);
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 18);
    }
}
