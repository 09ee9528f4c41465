//! IDX (MNIST family) reader and writer.
//!
//! ```text
//! images: 00 00 08 03 | N u32be | rows u32be | cols u32be | N·rows·cols u8
//! labels: 00 00 08 01 | N u32be | N u8
//! ```

use std::path::Path;

use crate::data::{LabeledDataset, Normalization};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

const FMT: &str = "idx";

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(FMT, format!("truncated header at byte {at}")))
}

/// Decodes an image file into `(count, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(
            FMT,
            format!("bad image magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}"),
        ));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::format(FMT, "image dimensions overflow"))?;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::format(
            FMT,
            format!(
                "truncated image payload: {} bytes, need {need}",
                payload.len()
            ),
        ));
    }
    Ok((n, rows, cols, &payload[..need]))
}

pub fn parse_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(Error::format(
            FMT,
            format!("bad label magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}"),
        ));
    }
    let n = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(Error::format(
            FMT,
            format!("truncated label payload: {} bytes, need {n}", payload.len()),
        ));
    }
    Ok(&payload[..n])
}

/// Builds a dataset from in-memory IDX files. Pixels are scaled to `[0, 1]`
/// and samples shaped `N × 1 × rows × cols`.
pub fn decode_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<LabeledDataset> {
    let (n, rows, cols, pixels) = parse_images(image_bytes)?;
    let labels = parse_labels(label_bytes)?;
    if labels.len() != n {
        return Err(Error::format(
            FMT,
            format!("count mismatch: {n} images but {} labels", labels.len()),
        ));
    }
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let features = Tensor::new(vec![n, 1, rows, cols], data)?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(
        features,
        labels,
        classes,
        None,
        Normalization::uniform(rows * cols, 255.0, 0.0),
    )
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let ib = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lb = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    decode_idx(&ib, &lb)
}

pub fn encode_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_image_fixture() {
        let pixels: Vec<u8> = (0..4 * 9).map(|i| (i * 7) as u8).collect();
        let ds = decode_idx(&encode_images(3, 3, &pixels), &encode_labels(&[0, 1, 2, 1])).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.features.shape(), &[4, 1, 3, 3]);
        assert!(ds.features.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(ds.num_classes, 3);
    }

    #[test]
    fn count_mismatch() {
        let pixels = vec![0u8; 4 * 4];
        let err = decode_idx(&encode_images(2, 2, &pixels), &encode_labels(&[0, 1, 0])).unwrap_err();
        assert!(err.to_string().contains("count mismatch"), "{err}");
    }

    #[test]
    fn hand_encoded_two_by_two() {
        // magic, N=1, rows=2, cols=2 written byte by byte, pixels 0, 51, 102, 255
        let img = [
            0x00, 0x00, 0x08, 0x03, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 51, 102, 255,
        ];
        let lab = [0x00, 0x00, 0x08, 0x01, 0, 0, 0, 1, 7];
        let ds = decode_idx(&img, &lab).unwrap();
        assert_eq!(ds.features.shape(), &[1, 1, 2, 2]);
        assert_eq!(ds.features.data(), &[0.0, 0.2, 0.4, 1.0]);
        assert_eq!(ds.labels, vec![7]);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut img = encode_images(2, 2, &[1, 2, 3, 4]);
        let lab = encode_labels(&[0]);
        assert!(decode_idx(&img[..18], &lab).unwrap_err().to_string().contains("truncated"));
        img[3] = 0x01;
        assert!(decode_idx(&img, &lab).unwrap_err().to_string().contains("magic"));
    }
}
