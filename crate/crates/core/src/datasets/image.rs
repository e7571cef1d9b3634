//! PFM (linear HDR) and PPM (gamma-encoded preview) writers.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Little-endian PFM: header `PF\n{W} {H}\n-1.0\n`, rows stored bottom to top.
/// `pixels` are row-major, top row first.
pub fn encode_pfm(width: usize, height: usize, pixels: &[[f64; 3]]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count");
    let mut out = format!("PF\n{width} {height}\n-1.0\n").into_bytes();
    for row in (0..height).rev() {
        for p in &pixels[row * width..(row + 1) * width] {
            for &v in p {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    out
}

/// Binary PPM with maxval 255 and a 1/2.2 gamma encode; values are clamped.
pub fn encode_ppm(width: usize, height: usize, pixels: &[[f64; 3]]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for p in pixels {
        for &v in p {
            let g = v.max(0.0).powf(1.0 / 2.2) * 255.0;
            out.push(g.round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

pub fn write_pfm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[[f64; 3]]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pfm(width, height, pixels)).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[[f64; 3]]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(width, height, pixels)).map_err(|e| Error::io(path, e))
}

/// Decoded PFM, top row first.
#[derive(Clone, Debug, PartialEq)]
pub struct PfmImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f32; 3]>,
}

/// Reads a color PFM written by [`encode_pfm`] (or any color PFM).
pub fn read_pfm(bytes: &[u8]) -> Result<PfmImage> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse {
                offset: pos as u64,
                message: "truncated PFM header".into(),
            });
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let bad = |message: &str| Error::Parse {
        offset: 0,
        message: message.into(),
    };
    if fields[0] != "PF" {
        return Err(bad("not a color PFM"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = fields[3].parse().map_err(|_| bad("bad scale"))?;
    let little = scale < 0.0;
    let need = width * height * 12;
    if bytes.len() < pos + need {
        return Err(Error::Parse {
            offset: bytes.len() as u64,
            message: "truncated PFM payload".into(),
        });
    }
    let mut rows: Vec<Vec<[f32; 3]>> = bytes[pos..pos + need]
        .chunks_exact(width * 12)
        .map(|row| {
            row.chunks_exact(12)
                .map(|px| {
                    let f = |k: usize| {
                        let b: [u8; 4] = px[k * 4..k * 4 + 4].try_into().unwrap();
                        if little {
                            f32::from_le_bytes(b)
                        } else {
                            f32::from_be_bytes(b)
                        }
                    };
                    [f(0), f(1), f(2)]
                })
                .collect()
        })
        .collect();
    rows.reverse();
    Ok(PfmImage {
        width,
        height,
        pixels: rows.into_iter().flatten().collect(),
    })
}
