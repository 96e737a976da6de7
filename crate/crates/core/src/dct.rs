//! 8x8 block DCT of zero-padded images.
//!
//! A `d`-pixel image is padded at the bottom/right to whole blocks, giving
//! `d'` = padded height x padded width. Each block's 64 coefficients are
//! stored contiguously, `k = 8 * alpha + beta`, and blocks follow row-major
//! order across the image, so coefficient `k` of block `b` sits at row
//! `64 * b + k` of a spectrum column.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use faer::Mat;
use rayon::prelude::*;

use crate::data::CenteredImageSet;
use crate::error::{QfdaError, Result};

pub const BLOCK: usize = 8;
pub const FREQUENCIES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BlockLayout {
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    pub blocks_per_image: usize,
    pub d_prime: usize,
}

impl BlockLayout {
    pub fn new(height: usize, width: usize) -> Self {
        let padded_height = height.div_ceil(BLOCK) * BLOCK;
        let padded_width = width.div_ceil(BLOCK) * BLOCK;
        Self {
            height,
            width,
            padded_height,
            padded_width,
            blocks_per_image: padded_height * padded_width / FREQUENCIES,
            d_prime: padded_height * padded_width,
        }
    }

    pub fn blocks_across(&self) -> usize {
        self.padded_width / BLOCK
    }

    /// Row of coefficient `k` of block `b` within a spectrum column.
    pub fn row(&self, block: usize, k: usize) -> usize {
        block * FREQUENCIES + k
    }
}

/// Block-DCT coefficients, one image per column.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumSet {
    pub coeffs: Mat<f64>,
    pub layout: BlockLayout,
    pub labels: Vec<usize>,
}

impl SpectrumSet {
    pub fn new(coeffs: Mat<f64>, layout: BlockLayout, labels: Vec<usize>) -> Result<Self> {
        if coeffs.nrows() != layout.d_prime {
            return Err(QfdaError::Consistency(format!(
                "{} coefficient rows for d' = {}",
                coeffs.nrows(),
                layout.d_prime
            )));
        }
        if coeffs.ncols() != labels.len() {
            return Err(QfdaError::Consistency(format!(
                "{} spectra but {} labels",
                coeffs.ncols(),
                labels.len()
            )));
        }
        Ok(Self {
            coeffs,
            layout,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.coeffs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_prime(&self) -> usize {
        self.layout.d_prime
    }

    pub fn num_classes(&self) -> usize {
        crate::data::num_classes(&self.labels)
    }

    /// Columns at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            coeffs: Mat::from_fn(self.d_prime(), indices.len(), |i, j| {
                self.coeffs[(i, indices[j])]
            }),
            layout: self.layout,
            labels: indices.iter().map(|&j| self.labels[j]).collect(),
        }
    }
}

/// Orthonormal DCT-II basis: `T[alpha][a] = c(alpha)/2 * cos((2a+1) alpha pi / 16)`,
/// so that a block transforms as `F = T f T^T`.
fn basis() -> [[f64; BLOCK]; BLOCK] {
    let mut t = [[0.0; BLOCK]; BLOCK];
    for (alpha, row) in t.iter_mut().enumerate() {
        let c = if alpha == 0 { 1.0 / 2f64.sqrt() } else { 1.0 };
        for (a, v) in row.iter_mut().enumerate() {
            *v = 0.5 * c * ((2 * a + 1) as f64 * alpha as f64 * PI / 16.0).cos();
        }
    }
    t
}

/// `out = T x T^T` (forward) or `out = T^T x T` (inverse) for one block.
fn transform_block(t: &[[f64; BLOCK]; BLOCK], x: &[f64; 64], inverse: bool) -> [f64; 64] {
    let m = |r: usize, c: usize| if inverse { t[c][r] } else { t[r][c] };
    let mut tmp = [0.0; 64];
    for r in 0..BLOCK {
        for c in 0..BLOCK {
            tmp[r * BLOCK + c] = (0..BLOCK).map(|s| m(r, s) * x[s * BLOCK + c]).sum();
        }
    }
    let mut out = [0.0; 64];
    for r in 0..BLOCK {
        for c in 0..BLOCK {
            out[r * BLOCK + c] = (0..BLOCK).map(|s| tmp[r * BLOCK + s] * m(c, s)).sum();
        }
    }
    out
}

fn forward_image(t: &[[f64; BLOCK]; BLOCK], layout: &BlockLayout, pixels: &[f64]) -> Vec<f64> {
    let across = layout.blocks_across();
    let mut out = vec![0.0; layout.d_prime];
    for b in 0..layout.blocks_per_image {
        let (by, bx) = (b / across, b % across);
        let mut block = [0.0; 64];
        for a in 0..BLOCK {
            let y = by * BLOCK + a;
            if y >= layout.height {
                break;
            }
            for c in 0..BLOCK {
                let x = bx * BLOCK + c;
                if x < layout.width {
                    block[a * BLOCK + c] = pixels[y * layout.width + x];
                }
            }
        }
        let coeffs = transform_block(t, &block, false);
        out[b * FREQUENCIES..(b + 1) * FREQUENCIES].copy_from_slice(&coeffs);
    }
    out
}

/// Inverse transform over the full padded canvas, row-major.
fn inverse_image_padded(t: &[[f64; BLOCK]; BLOCK], layout: &BlockLayout, coeffs: &[f64]) -> Vec<f64> {
    let across = layout.blocks_across();
    let pw = layout.padded_width;
    let mut out = vec![0.0; layout.d_prime];
    for b in 0..layout.blocks_per_image {
        let (by, bx) = (b / across, b % across);
        let mut block = [0.0; 64];
        block.copy_from_slice(&coeffs[b * FREQUENCIES..(b + 1) * FREQUENCIES]);
        let pixels = transform_block(t, &block, true);
        for a in 0..BLOCK {
            for c in 0..BLOCK {
                out[(by * BLOCK + a) * pw + bx * BLOCK + c] = pixels[a * BLOCK + c];
            }
        }
    }
    out
}

fn columns_to_mat(rows: usize, cols: Vec<Vec<f64>>) -> Mat<f64> {
    Mat::from_fn(rows, cols.len(), |i, j| cols[j][i])
}

pub fn forward_dct(set: &CenteredImageSet) -> SpectrumSet {
    let layout = BlockLayout::new(set.height, set.width);
    let t = basis();
    let columns: Vec<Vec<f64>> = (0..set.len())
        .into_par_iter()
        .map(|j| {
            let pixels: Vec<f64> = set.pixels.col(j).iter().copied().collect();
            forward_image(&t, &layout, &pixels)
        })
        .collect();
    SpectrumSet {
        coeffs: columns_to_mat(layout.d_prime, columns),
        layout,
        labels: set.labels.clone(),
    }
}

/// Inverse transform cropped to the original image size. The returned set
/// has a zero mean image; callers that need pixel values add their own.
pub fn inverse_dct(spectrum: &SpectrumSet) -> CenteredImageSet {
    let layout = spectrum.layout;
    let padded = inverse_dct_padded(spectrum);
    let pw = layout.padded_width;
    let pixels = Mat::from_fn(layout.height * layout.width, spectrum.len(), |i, j| {
        let (y, x) = (i / layout.width, i % layout.width);
        padded[(y * pw + x, j)]
    });
    CenteredImageSet {
        pixels,
        mean_image: vec![0.0; layout.height * layout.width],
        height: layout.height,
        width: layout.width,
        labels: spectrum.labels.clone(),
        provenance: "inverse_dct".into(),
    }
}

/// Inverse transform without cropping: `padded_height * padded_width` rows.
pub fn inverse_dct_padded(spectrum: &SpectrumSet) -> Mat<f64> {
    let layout = spectrum.layout;
    let t = basis();
    let columns: Vec<Vec<f64>> = (0..spectrum.len())
        .into_par_iter()
        .map(|j| {
            let coeffs: Vec<f64> = spectrum.coeffs.col(j).iter().copied().collect();
            inverse_image_padded(&t, &layout, &coeffs)
        })
        .collect();
    columns_to_mat(layout.d_prime, columns)
}

/// All block-`k` coefficients, image-major then block-major.
pub fn frequency_view(set: &SpectrumSet, k: usize) -> Result<Vec<f64>> {
    if k >= FREQUENCIES {
        return Err(QfdaError::Index {
            index: k,
            max: FREQUENCIES - 1,
        });
    }
    let blocks = set.layout.blocks_per_image;
    Ok((0..set.len())
        .flat_map(|j| (0..blocks).map(move |b| (j, b)))
        .map(|(j, b)| set.coeffs[(set.layout.row(b, k), j)])
        .collect())
}

const SPECTRUM_MAGIC: &[u8; 4] = b"QSPC";
const SPECTRUM_VERSION: u32 = 1;

/// Little-endian: magic, version, d', n, height, width, padded height,
/// padded width, blocks per image (u64 each after the version), then the
/// column-major f64 payload and one u32 label per column.
pub fn encode_spectrum(set: &SpectrumSet) -> Vec<u8> {
    let l = &set.layout;
    let mut out = Vec::with_capacity(72 + 8 * set.d_prime() * set.len() + 4 * set.len());
    out.extend_from_slice(SPECTRUM_MAGIC);
    out.extend_from_slice(&SPECTRUM_VERSION.to_le_bytes());
    for v in [
        l.d_prime,
        set.len(),
        l.height,
        l.width,
        l.padded_height,
        l.padded_width,
        l.blocks_per_image,
    ] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for j in 0..set.len() {
        for &v in set.coeffs.col(j).iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &label in &set.labels {
        out.extend_from_slice(&(label as u32).to_le_bytes());
    }
    out
}

pub fn decode_spectrum(bytes: &[u8]) -> Result<SpectrumSet> {
    let err = |m: &str| QfdaError::Format(format!("spectrum file: {m}"));
    if bytes.len() < 64 || &bytes[..4] != SPECTRUM_MAGIC {
        return Err(err("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != SPECTRUM_VERSION {
        return Err(err(&format!("unsupported version {version}")));
    }
    let field = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize;
    let (d_prime, n) = (field(0), field(1));
    let layout = BlockLayout::new(field(2), field(3));
    if layout.d_prime != d_prime
        || layout.padded_height != field(4)
        || layout.padded_width != field(5)
        || layout.blocks_per_image != field(6)
    {
        return Err(err("inconsistent layout header"));
    }
    let payload = 64;
    let labels_at = payload + 8 * d_prime * n;
    if bytes.len() != labels_at + 4 * n {
        return Err(err("truncated payload"));
    }
    let value = |i: usize| f64::from_le_bytes(bytes[payload + 8 * i..payload + 8 * i + 8].try_into().unwrap());
    let coeffs = Mat::from_fn(d_prime, n, |i, j| value(j * d_prime + i));
    let labels = (0..n)
        .map(|j| u32::from_le_bytes(bytes[labels_at + 4 * j..labels_at + 4 * j + 4].try_into().unwrap()) as usize)
        .collect();
    SpectrumSet::new(coeffs, layout, labels)
}

pub fn write_spectrum(path: &Path, set: &SpectrumSet) -> Result<()> {
    fs::write(path, encode_spectrum(set)).map_err(|e| QfdaError::io(path, e))
}

pub fn read_spectrum(path: &Path) -> Result<SpectrumSet> {
    let bytes = fs::read(path).map_err(|e| QfdaError::io(path, e))?;
    decode_spectrum(&bytes)
}
