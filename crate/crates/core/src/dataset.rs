//! Image datasets: IDX (the MNIST container), a CSV fallback and a small
//! synthetic generator.
//!
//! CSV layout: one image per row, label first, then `height × width` pixel
//! values row-major. Images are square unless the caller supplies a height.
//! Blank lines and lines starting with `#` are skipped.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::segmentation::Image;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("dataset is empty after filtering")]
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<u32>,
}

fn read(path: &Path) -> Result<Vec<u8>, DatasetError> {
    fs::read(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn format_err(path: &Path, message: impl Into<String>) -> DatasetError {
    DatasetError::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Parses an unsigned-byte IDX tensor, returning its dimensions and data.
fn parse_idx(path: &Path, bytes: &[u8]) -> Result<(Vec<usize>, Vec<u8>), DatasetError> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(path, "bad IDX magic"));
    }
    if bytes[2] != 0x08 {
        return Err(format_err(
            path,
            format!("unsupported IDX element type {:#04x}", bytes[2]),
        ));
    }
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(format_err(path, "truncated IDX header"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    match count {
        Some(n) if bytes.len() - header == n => Ok((dims, bytes[header..].to_vec())),
        _ => Err(format_err(path, "IDX payload size does not match its dimensions")),
    }
}

/// Loads an IDX image file (`n × rows × cols`) and its label file (`n`).
/// Pixels are scaled by 1/255.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset, DatasetError> {
    let (idims, pix) = parse_idx(images, &read(images)?)?;
    let (ldims, labs) = parse_idx(labels, &read(labels)?)?;
    if idims.len() != 3 {
        return Err(format_err(images, "expected a 3-d image tensor"));
    }
    if ldims.len() != 1 || ldims[0] != idims[0] {
        return Err(format_err(labels, "label count does not match image count"));
    }
    let (rows, cols) = (idims[1], idims[2]);
    let images = pix
        .chunks_exact(rows * cols)
        .map(|c| Image::new(rows, cols, c.iter().map(|&p| p as f64 / 255.0).collect()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| format_err(images, e.to_string()))?;
    Ok(Dataset {
        images,
        labels: labs.into_iter().map(u32::from).collect(),
    })
}

pub fn load_csv(path: &Path, height: Option<usize>) -> Result<Dataset, DatasetError> {
    let text = String::from_utf8(read(path)?).map_err(|_| format_err(path, "not UTF-8"))?;
    let mut ds = Dataset {
        images: Vec::new(),
        labels: Vec::new(),
    };
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let label: u32 = fields
            .next()
            .and_then(|l| l.parse().ok())
            .ok_or_else(|| format_err(path, format!("line {}: bad label", lineno + 1)))?;
        let pixels: Vec<f64> = fields
            .map(|v| v.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| format_err(path, format!("line {}: bad pixel value", lineno + 1)))?;
        let n = pixels.len();
        let (h, w) = match height {
            Some(h) if h > 0 && n.is_multiple_of(h) => (h, n / h),
            Some(h) => {
                return Err(format_err(
                    path,
                    format!("line {}: {n} pixels not divisible by height {h}", lineno + 1),
                ))
            }
            None => {
                let side = (n as f64).sqrt().round() as usize;
                if side * side != n {
                    return Err(format_err(
                        path,
                        format!("line {}: {n} pixels is not a square image", lineno + 1),
                    ));
                }
                (side, side)
            }
        };
        ds.images
            .push(Image::new(h, w, pixels).map_err(|e| format_err(path, e.to_string()))?);
        ds.labels.push(label);
    }
    Ok(ds)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Keeps samples whose label is in `labels`, at most `limit` of them, in
    /// file order.
    pub fn select(&self, labels: &[u32], limit: Option<usize>) -> Result<Dataset, DatasetError> {
        let mut out = Dataset {
            images: Vec::new(),
            labels: Vec::new(),
        };
        for (img, &lab) in self.images.iter().zip(&self.labels) {
            if limit.is_some_and(|n| out.len() >= n) {
                break;
            }
            if labels.contains(&lab) {
                out.images.push(img.clone());
                out.labels.push(lab);
            }
        }
        if out.is_empty() {
            return Err(DatasetError::Empty);
        }
        Ok(out)
    }

    /// Min-max scales every pixel to `[0, 1]` using the dataset-wide range.
    pub fn normalize(&mut self) {
        let (lo, hi) = self
            .images
            .iter()
            .flat_map(|i| i.pixels().iter().copied())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p), hi.max(p)));
        let span = hi - lo;
        for img in &mut self.images {
            for p in img.pixels_mut() {
                *p = if span > 0.0 { (*p - lo) / span } else { 0.0 };
            }
        }
    }
}

/// Two-class "bars" set: label `labels[0]` images are bright in the left
/// half, `labels[1]` in the right half, with uniform noise of amplitude
/// `noise`. Classes alternate so any prefix is balanced.
pub fn synthetic_bars(n: usize, side: usize, labels: [u32; 2], noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset {
        images: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
    };
    for k in 0..n {
        let class = k % 2;
        let pixels = (0..side * side)
            .map(|idx| {
                let col = idx % side;
                let bright = (col < side / 2) == (class == 0);
                let base = if bright { 1.0 - noise } else { 0.0 };
                (base + rng.gen::<f64>() * noise).clamp(0.0, 1.0)
            })
            .collect();
        ds.images.push(Image::new(side, side, pixels).expect("square image"));
        ds.labels.push(labels[class]);
    }
    ds
}
