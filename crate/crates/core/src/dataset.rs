//! IDX (MNIST) ingestion and export.
//!
//! Files are big-endian: magic `2051` for `u8` image stacks
//! (`count, rows, cols` follow) and `2049` for `u8` label vectors. Gzipped
//! files are detected by their header and decompressed transparently.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::image::Image;

pub const IMAGES_MAGIC: u32 = 2051;
pub const LABELS_MAGIC: u32 = 2049;

/// Images with their class labels, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The first `n` samples (or all of them).
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
}

/// Parses an in-memory IDX image stack into single-channel images in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> std::result::Result<Vec<Image>, String> {
    let magic = be_u32(bytes, 0).ok_or("truncated header")?;
    if magic != IMAGES_MAGIC {
        return Err(format!("bad magic {magic} (expected {IMAGES_MAGIC} for images)"));
    }
    let (count, rows, cols) = match (be_u32(bytes, 4), be_u32(bytes, 8), be_u32(bytes, 12)) {
        (Some(n), Some(r), Some(c)) => (n as usize, r as usize, c as usize),
        _ => return Err("truncated header".into()),
    };
    let size = rows * cols;
    let payload = &bytes[16..];
    if payload.len() < count * size {
        return Err(format!(
            "truncated payload: {count} images of {rows}x{cols} need {} bytes, found {}",
            count * size,
            payload.len()
        ));
    }
    payload
        .chunks_exact(size.max(1))
        .take(count)
        .map(|px| {
            let data = px.iter().map(|&b| b as f64 / 255.0).collect();
            Image::new(rows, cols, 1, data).map_err(|e| e.to_string())
        })
        .collect()
}

pub fn parse_idx_labels(bytes: &[u8]) -> std::result::Result<Vec<usize>, String> {
    let magic = be_u32(bytes, 0).ok_or("truncated header")?;
    if magic != LABELS_MAGIC {
        return Err(format!("bad magic {magic} (expected {LABELS_MAGIC} for labels)"));
    }
    let count = be_u32(bytes, 4).ok_or("truncated header")? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(format!(
            "truncated payload: {count} labels declared, {} bytes present",
            payload.len()
        ));
    }
    Ok(payload[..count].iter().map(|&b| b as usize).collect())
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Vec<Image>> {
    let path = path.as_ref();
    parse_idx_images(&read_file(path)?).map_err(|m| Error::format(path, m))
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    parse_idx_labels(&read_file(path)?).map_err(|m| Error::format(path, m))
}

/// Loads a paired image/label IDX set.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let imgs = load_idx_images(images.as_ref())?;
    let lbls = load_idx_labels(labels.as_ref())?;
    if imgs.len() != lbls.len() {
        return Err(Error::format(
            labels.as_ref(),
            format!("{} labels for {} images", lbls.len(), imgs.len()),
        ));
    }
    Ok(Dataset {
        images: imgs,
        labels: lbls,
    })
}

/// Encodes single-channel images as an IDX stack; intensities are rounded to `u8`.
pub fn encode_idx_images(images: &[Image]) -> Result<Vec<u8>> {
    let (rows, cols) = match images.first() {
        Some(img) => (img.height(), img.width()),
        None => (0, 0),
    };
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        if img.shape() != (rows, cols, 1) {
            return Err(Error::Dimension(format!(
                "IDX stacks hold {rows}x{cols} single-channel images, got {:?}",
                img.shape()
            )));
        }
        out.extend(img.data().iter().map(|v| to_u8(*v)));
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::Domain(format!("label {l} exceeds u8")))?);
    }
    Ok(out)
}

pub fn save_idx(dataset: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    fs::write(ip, encode_idx_images(&dataset.images)?).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, encode_idx_labels(&dataset.labels)?).map_err(|e| Error::io(lp, e))
}

/// `[0, 1]` → `0..=255`, rounding half up.
pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}
