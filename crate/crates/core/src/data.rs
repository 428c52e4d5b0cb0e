//! Datasets of `[0, 1]`-valued rows, pixel warping, binarization and IDX I/O.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};

use crate::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;

/// `N × D` matrix of values in `[0, 1]` with optional integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: Array2<f64>,
    labels: Option<Vec<u32>>,
    image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(values: Array2<f64>, labels: Option<Vec<u32>>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("dataset entries must lie in [0, 1], found {bad}")));
        }
        if let Some(l) = &labels {
            if l.len() != values.nrows() {
                return Err(Error::Dimension { expected: values.nrows(), got: l.len() });
            }
        }
        Ok(Self { values, labels, image_shape: None })
    }

    pub fn empty(dim: usize) -> Self {
        Self { values: Array2::zeros((0, dim)), labels: None, image_shape: None }
    }

    /// Records the `rows × cols` layout of each (flattened) image.
    pub fn with_image_shape(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: rows * cols });
        }
        self.image_shape = Some((rows, cols));
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::Dimension { expected: self.len(), got: labels.len() });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.image_shape
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            values: self.values.select(Axis(0), indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            image_shape: self.image_shape,
        }
    }

    /// First `n` rows (all rows if `n` exceeds the size).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Column means.
    pub fn column_means(&self) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Err(Error::Empty("column means of an empty dataset"));
        }
        Ok(self.values.mean_axis(Axis(0)).expect("non-empty").to_vec())
    }

    fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { values: self.values.mapv(f), labels: self.labels.clone(), image_shape: self.image_shape }
    }
}

/// Warping parameter `γ ∈ [−½, ½]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpGamma(f64);

impl WarpGamma {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(-0.5..=0.5).contains(&gamma) {
            return Err(Error::Domain(format!("warp gamma must lie in [-0.5, 0.5], got {gamma}")));
        }
        Ok(Self(gamma))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Pixel warp `f_γ`: full binarization at `γ = −½`, clipped contrast stretch for
/// `γ ∈ (−½, 0)`, identity at `0`, and contraction towards `½` for `γ > 0`.
pub fn warp(x: f64, gamma: WarpGamma) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("warp input must lie in [0, 1], got {x}")));
    }
    Ok(warp_unchecked(x, gamma.0))
}

fn warp_unchecked(x: f64, g: f64) -> f64 {
    if g == -0.5 {
        if x >= 0.5 {
            1.0
        } else {
            0.0
        }
    } else if g < 0.0 {
        ((x + g) / (1.0 + 2.0 * g)).clamp(0.0, 1.0)
    } else {
        g + (1.0 - 2.0 * g) * x
    }
}

pub fn warp_dataset(data: &Dataset, gamma: WarpGamma) -> Dataset {
    data.map_values(|x| warp_unchecked(x, gamma.0))
}

/// `1(x ≥ threshold)` elementwise.
pub fn binarize(data: &Dataset, threshold: f64) -> Result<Dataset> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Domain(format!("binarization threshold must lie in (0, 1), got {threshold}")));
    }
    Ok(data.map_values(|x| if x >= threshold { 1.0 } else { 0.0 }))
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), reason: reason.into() }
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses an IDX3 image file (already in memory); pixels are scaled by `1/255`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let magic = be_u32(bytes, 0).ok_or_else(|| format_err(path, "truncated header"))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(path, format!("bad magic {magic}, expected {IDX_IMAGES_MAGIC}")));
    }
    let dims: Vec<usize> =
        (0..3).map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize)).collect::<Option<_>>().ok_or_else(|| format_err(path, "truncated header"))?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let d = rows.checked_mul(cols).ok_or_else(|| format_err(path, "dimension overflow"))?;
    let total = n.checked_mul(d).ok_or_else(|| format_err(path, "dimension overflow"))?;
    let body = &bytes[16..];
    if body.len() != total {
        return Err(format_err(path, format!("expected {total} pixel bytes, found {}", body.len())));
    }
    let values = Array2::from_shape_fn((n, d), |(i, j)| f64::from(body[i * d + j]) / 255.0);
    Dataset::new(values, None)?.with_image_shape(rows, cols)
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u32>> {
    let magic = be_u32(bytes, 0).ok_or_else(|| format_err(path, "truncated header"))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(path, format!("bad magic {magic}, expected {IDX_LABELS_MAGIC}")));
    }
    let n = be_u32(bytes, 4).ok_or_else(|| format_err(path, "truncated header"))? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(format_err(path, format!("expected {n} label bytes, found {}", body.len())));
    }
    Ok(body.iter().map(|b| u32::from(*b)).collect())
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    parse_idx_images(&fs::read(path)?, path)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let path = path.as_ref();
    parse_idx_labels(&fs::read(path)?, path)
}

/// Images and labels from a matching pair of IDX files.
pub fn load_idx_pair(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    load_idx_images(images)?.with_labels(load_idx_labels(labels)?)
}

/// IDX3 encoding with bytes `round(255·x)`. A dataset without an image shape is
/// written as `N × 1 × D`.
pub fn idx_images_bytes(data: &Dataset) -> Vec<u8> {
    let (rows, cols) = data.image_shape.unwrap_or((1, data.dim()));
    let mut out = Vec::with_capacity(16 + data.values.len());
    for v in [IDX_IMAGES_MAGIC, data.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(data.values.iter().map(|x| (255.0 * x).round() as u8));
    out
}

pub fn idx_labels_bytes(labels: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for l in labels {
        out.push(u8::try_from(*l).map_err(|_| Error::Domain(format!("label {l} does not fit in a byte")))?);
    }
    Ok(out)
}

pub fn write_idx_images(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    fs::write(path, idx_images_bytes(data))?;
    Ok(())
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u32]) -> Result<()> {
    fs::write(path, idx_labels_bytes(labels)?)?;
    Ok(())
}
