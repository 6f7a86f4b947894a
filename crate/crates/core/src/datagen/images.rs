use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::cama::LabeledBatch;
use crate::ndgrad::Tensor;
use crate::stochastics::RngStream;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    /// `[n, side * side]`, intensities in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub side: usize,
}

impl ImageDataset {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            side: self.side,
        }
    }

    pub fn head(&self, n: usize) -> Self {
        self.select_rows(&(0..n.min(self.rows())).collect::<Vec<_>>())
    }
}

/// Reads a whole file, transparently inflating gzip.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32, DataError> {
    let b = bytes
        .get(at..at + 4)
        .ok_or_else(|| DataError::Format(format!("{what}: header truncated")))?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses IDX image bytes into `(images, rows, cols)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Tensor, usize, usize), DataError> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::Format(format!("image magic {magic} != {IMAGE_MAGIC}")));
    }
    let n = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(DataError::Format(format!("images truncated: {} of {need} pixel bytes", body.len())));
    }
    if n == 0 || rows * cols == 0 {
        return Err(DataError::Format("empty image file".into()));
    }
    let data = body[..need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((Tensor::new(vec![n, rows * cols], data)?, rows, cols))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, DataError> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != LABEL_MAGIC {
        return Err(DataError::Format(format!("label magic {magic} != {LABEL_MAGIC}")));
    }
    let n = be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(DataError::Format(format!("labels truncated: {} of {n} bytes", body.len())));
    }
    Ok(body[..n].iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label pair (optionally gzipped).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<ImageDataset, DataError> {
    let (images, rows, cols) = parse_idx_images(&read_maybe_gz(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path.as_ref())?)?;
    if labels.len() != images.rows() {
        return Err(DataError::Format(format!(
            "{} images but {} labels",
            images.rows(),
            labels.len()
        )));
    }
    if rows != cols {
        return Err(DataError::Format(format!("images are {rows}x{cols}, expected square")));
    }
    Ok(ImageDataset { images, labels, side: rows })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Positive shifts move content down.
    Vertical,
    /// Positive shifts move content right.
    Horizontal,
}

impl Axis {
    pub fn as_str(&self) -> &'static str {
        match self {
            Axis::Vertical => "vertical",
            Axis::Horizontal => "horizontal",
        }
    }
}

fn shift_one(src: &[f64], dst: &mut [f64], side: usize, pixels: isize, axis: Axis) {
    dst.fill(0.0);
    for r in 0..side {
        for c in 0..side {
            let (tr, tc) = match axis {
                Axis::Vertical => (r as isize + pixels, c as isize),
                Axis::Horizontal => (r as isize, c as isize + pixels),
            };
            if (0..side as isize).contains(&tr) && (0..side as isize).contains(&tc) {
                dst[tr as usize * side + tc as usize] = src[r * side + c];
            }
        }
    }
}

fn shift_pixels(s: f64, side: usize) -> Result<isize, DataError> {
    if !(-1.0..=1.0).contains(&s) {
        return Err(DataError::Invalid(format!("shift fraction {s} outside [-1, 1]")));
    }
    let p = (s.abs() * side as f64).round() as isize;
    Ok(if s < 0.0 { -p } else { p })
}

/// Translates every `side x side` image by `round(|s| * side)` pixels along
/// `axis`, in the direction of the sign of `s`, filling with zeros.
pub fn shift_image(images: &Tensor, side: usize, s: f64, axis: Axis) -> Result<Tensor, DataError> {
    if images.rank() != 2 || images.cols() != side * side {
        return Err(DataError::Invalid(format!("images {:?} are not {side}x{side}", images.shape())));
    }
    let pixels = shift_pixels(s, side)?;
    if pixels == 0 {
        return Ok(images.clone());
    }
    let mut out = Tensor::zeros(images.shape());
    for i in 0..images.rows() {
        shift_one(images.row(i), out.row_mut(i), side, pixels, axis);
    }
    Ok(out)
}

/// Originals flagged clean, followed by one shifted copy of each flagged
/// manipulated, with shifts drawn uniformly from `[-r, r]`. Returns the
/// batch and the drawn shifts.
pub fn augment_shift_range(
    data: &ImageDataset,
    r: f64,
    axis: Axis,
    rng: &mut RngStream,
) -> Result<(LabeledBatch, Vec<f64>), DataError> {
    if !(0.0..=1.0).contains(&r) {
        return Err(DataError::Invalid(format!("shift range {r} outside [0, 1]")));
    }
    let n = data.rows();
    let side = data.side;
    let mut shifted = data.images.clone();
    let mut shifts = Vec::with_capacity(n);
    for i in 0..n {
        let s = rng.uniform(-r, r);
        shifts.push(s);
        let p = shift_pixels(s, side)?;
        if p != 0 {
            let src = data.images.row(i).to_vec();
            shift_one(&src, shifted.row_mut(i), side, p, axis);
        }
    }
    let x = Tensor::vstack(&[&data.images, &shifted]);
    let mut y = data.labels.clone();
    y.extend_from_slice(&data.labels);
    let mut clean = vec![true; n];
    clean.extend(std::iter::repeat_n(false, n));
    Ok((LabeledBatch::new(x, y, clean), shifts))
}
