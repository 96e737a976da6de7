//! Big-endian IDX files as used by the MNIST family of datasets.

use std::fs;
use std::path::Path;

use faer::Mat;

use super::RawImageSet;
use crate::error::{QfdaError, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| QfdaError::Format(format!("{what}: truncated header")))
}

/// Parses an IDX image file (`0x00000803`), returning `(count, rows, cols, payload)`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32(bytes, 0, "images")?;
    if magic != IMAGES_MAGIC {
        return Err(QfdaError::Format(format!(
            "images: expected magic {IMAGES_MAGIC:#010x}, found {magic:#010x}"
        )));
    }
    let count = read_u32(bytes, 4, "images")? as usize;
    let rows = read_u32(bytes, 8, "images")? as usize;
    let cols = read_u32(bytes, 12, "images")? as usize;
    let expected = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(QfdaError::Format(format!(
            "images: header announces {expected} pixel bytes, file has {}",
            payload.len()
        )));
    }
    Ok((count, rows, cols, payload))
}

pub fn parse_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32(bytes, 0, "labels")?;
    if magic != LABELS_MAGIC {
        return Err(QfdaError::Format(format!(
            "labels: expected magic {LABELS_MAGIC:#010x}, found {magic:#010x}"
        )));
    }
    let count = read_u32(bytes, 4, "labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(QfdaError::Format(format!(
            "labels: header announces {count} labels, file has {}",
            payload.len()
        )));
    }
    Ok(payload)
}

/// Loads an IDX image/label pair. Pixels keep their raw `0..=255` values.
pub fn load_idx(images: &Path, labels: &Path) -> Result<RawImageSet> {
    let image_bytes = fs::read(images).map_err(|e| QfdaError::io(images, e))?;
    let label_bytes = fs::read(labels).map_err(|e| QfdaError::io(labels, e))?;
    let (count, rows, cols, pixels) = parse_images(&image_bytes)?;
    let label_payload = parse_labels(&label_bytes)?;
    if label_payload.len() != count {
        return Err(QfdaError::Consistency(format!(
            "{count} images but {} labels",
            label_payload.len()
        )));
    }
    let d = rows * cols;
    let matrix = Mat::from_fn(d, count, |i, j| pixels[j * d + i] as f64);
    let labels = label_payload.iter().map(|&l| l as usize).collect();
    RawImageSet::new(matrix, rows, cols, labels)
}

/// Serializes a set back to an IDX pair. Pixel values are rounded and
/// clamped to `0..=255`; labels must fit in a byte.
pub fn write_idx(set: &RawImageSet, images: &Path, labels: &Path) -> Result<()> {
    let n = set.len();
    let d = set.dim();
    let mut out = Vec::with_capacity(16 + n * d);
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(set.height as u32).to_be_bytes());
    out.extend_from_slice(&(set.width as u32).to_be_bytes());
    for j in 0..n {
        for i in 0..d {
            out.push(set.pixels[(i, j)].round().clamp(0.0, 255.0) as u8);
        }
    }
    fs::write(images, &out).map_err(|e| QfdaError::io(images, e))?;

    let mut out = Vec::with_capacity(8 + n);
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in &set.labels {
        let byte = u8::try_from(l)
            .map_err(|_| QfdaError::Value(format!("label {l} does not fit in an IDX byte")))?;
        out.push(byte);
    }
    fs::write(labels, &out).map_err(|e| QfdaError::io(labels, e))
}
