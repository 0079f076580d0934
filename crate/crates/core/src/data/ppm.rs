//! Binary netpbm images: P6 colour for samples, P5 grey for heatmaps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_netpbm(path: &Path, magic: &str, w: usize, h: usize, body: &[u8]) -> Result<()> {
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(body);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes a `[3, H, W]` tensor with values in `[0, 1]`.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::mismatch("write_ppm", s, &[3, 0, 0]));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let mut body = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            body.push(to_byte(d[c * h * w + p]));
        }
    }
    write_netpbm(path, "P6", w, h, &body)
}

/// Writes an `[H, W]` map with values in `[0, 1]`.
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::mismatch("write_pgm", s, &[0, 0]));
    }
    let body: Vec<u8> = map.data().iter().map(|&v| to_byte(v)).collect();
    write_netpbm(path, "P5", s[1], s[0], &body)
}

fn parse_header<'a>(path: &Path, bytes: &'a [u8], magic: &[u8]) -> Result<(usize, usize, &'a [u8])> {
    let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
    if !bytes.starts_with(magic) {
        return Err(bad("wrong netpbm magic"));
    }
    let mut fields = Vec::with_capacity(3);
    let mut pos = magic.len();
    while fields.len() < 3 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        let v: usize = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("malformed header"))?;
        fields.push(v);
    }
    if fields[2] != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    Ok((fields[0], fields[1], bytes.get(pos + 1..).unwrap_or_default()))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, body) = parse_header(path, &bytes, b"P6")?;
    if body.len() != 3 * w * h || w == 0 || h == 0 {
        return Err(Error::Data(format!("{}: truncated raster", path.display())));
    }
    let mut data = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            data[c * h * w + p] = f64::from(body[3 * p + c]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, body) = parse_header(path, &bytes, b"P5")?;
    if body.len() != w * h || w == 0 || h == 0 {
        return Err(Error::Data(format!("{}: truncated raster", path.display())));
    }
    Tensor::new(&[h, w], body.iter().map(|&b| f64::from(b) / 255.0).collect())
}
