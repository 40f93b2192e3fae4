//! 8-bit grayscale PGM (P5) rendering of matrices.

use std::path::Path;

use crate::data::write_atomic;
use crate::error::Result;
use crate::tensor::Tensor;

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: &Path, m: &Tensor<f32>, pixels: &[u8]) -> Result<()> {
    write_atomic(path, &encode_pgm(m.cols(), m.rows(), pixels))
}

/// Min-max scaling to 0..=255. Values are rounded up, so a pixel is 0
/// exactly when its value equals the minimum. A constant matrix is all 0.
pub fn grayscale(m: &Tensor<f32>) -> Vec<u8> {
    let data = m.data();
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
    let span = hi - lo;
    data.iter()
        .map(|&v| {
            if !(span > 0.0) {
                0
            } else {
                ((v as f64 - lo) / span * 255.0).ceil().clamp(0.0, 255.0) as u8
            }
        })
        .collect()
}

/// Signed difference `after − before` centered at 128; identical inputs
/// give a uniform 128 image.
pub fn diff_grayscale(before: &Tensor<f32>, after: &Tensor<f32>) -> Vec<u8> {
    let d: Vec<f64> = after
        .data()
        .iter()
        .zip(before.data())
        .map(|(&a, &b)| a as f64 - b as f64)
        .collect();
    let max = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    d.iter()
        .map(|&v| {
            if max == 0.0 {
                128
            } else {
                (128.0 + (v / max * 127.0).round()) as u8
            }
        })
        .collect()
}

/// Parse a P5 image back into `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Option<(usize, usize, Vec<u8>)> {
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
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return None;
    }
    let (w, h): (usize, usize) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
    let pixels = bytes.get(pos + 1..)?;
    (pixels.len() == w * h).then(|| (w, h, pixels.to_vec()))
}
