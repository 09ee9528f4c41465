//! Binary PGM (P5, maxval 255) export.

use std::path::Path;

use crate::error::{Error, Result};

/// Encodes `values` (row-major, clamped to `[0, 1]`) as a P5 image.
pub fn encode_pgm(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), width * height, "pgm dimensions");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(
        values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    std::fs::write(path, encode_pgm(width, height, values)).map_err(|e| Error::io(path, e))
}

/// Splits a signed map into positive and negative intensity channels, both
/// scaled by the largest magnitude.
pub fn signed_channels(values: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let peak = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    let pos = values.iter().map(|v| v.max(0.0) * scale).collect();
    let neg = values.iter().map(|v| (-v).max(0.0) * scale).collect();
    (pos, neg)
}

/// Best-effort `(width, height)` for a per-sample shape: the last two axes of
/// an image, or a single row otherwise.
pub fn image_dims(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (shape[0], 1),
        _ => {
            let w = shape[shape.len() - 1];
            let h: usize = shape[..shape.len() - 1].iter().product();
            (w, h)
        }
    }
}
