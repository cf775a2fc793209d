//! Binary PGM (P5) grayscale images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Maps a value in `range` to 0..=255, rounding half up and clamping.
pub fn to_gray(value: f64, range: (f64, f64)) -> u8 {
    let (lo, hi) = range;
    let scaled = (value - lo) / (hi - lo) * 255.0;
    (scaled + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Renders a `[1, H, W]` or `[H, W]` tensor whose values lie in `range`.
pub fn tensor_to_image(t: &Tensor, range: (f64, f64)) -> Result<GrayImage> {
    let (height, width) = match t.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        other => return Err(Error::Shape(format!("cannot render tensor of shape {other:?} as an image"))),
    };
    let pixels = t.data().iter().map(|&v| to_gray(v, range)).collect();
    Ok(GrayImage { width, height, pixels })
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::Format(format!("expected P5, found {}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM header field {s}")));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
    }
    pos += 1;
    let pixels = bytes.get(pos..pos + width * height).ok_or_else(|| Error::Format("truncated PGM data".into()))?;
    Ok(GrayImage { width, height, pixels: pixels.to_vec() })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
