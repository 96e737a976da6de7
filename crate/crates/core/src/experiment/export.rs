//! PGM renderings of subspace directions and quantized reconstructions.

use std::fs;
use std::path::{Path, PathBuf};

use faer::Mat;

use crate::data::pgm::{write_pgm, GrayImage};
use crate::dct::{inverse_dct, BlockLayout, SpectrumSet};
use crate::discriminant::Subspace;
use crate::error::{QfdaError, Result};
use crate::quantizer::{quantize, BoundVector, LevelVector, QuantizerSpec};

/// Min-max scaling to `0..=255`; a constant image maps to zeros.
pub fn normalize_to_gray(values: &[f64], height: usize, width: usize) -> GrayImage {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pixels = values
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    GrayImage { width, height, pixels }
}

/// Rounds and clamps pixel values to `0..=255`.
pub fn clamp_to_gray(values: &[f64], height: usize, width: usize) -> GrayImage {
    let pixels = values.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
    GrayImage { width, height, pixels }
}

fn side_by_side(panels: &[&GrayImage]) -> GrayImage {
    let height = panels[0].height;
    let width: usize = panels.iter().map(|p| p.width).sum();
    let mut pixels = Vec::with_capacity(width * height);
    for y in 0..height {
        for p in panels {
            pixels.extend_from_slice(&p.pixels[y * p.width..(y + 1) * p.width]);
        }
    }
    GrayImage { width, height, pixels }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| QfdaError::io(dir, e))
}

/// Pixel-domain image of each column of `coeffs`, cropped to the layout.
fn render(coeffs: Mat<f64>, layout: BlockLayout) -> Result<Mat<f64>> {
    let n = coeffs.ncols();
    let spectrum = SpectrumSet::new(coeffs, layout, vec![0; n])?;
    Ok(inverse_dct(&spectrum).pixels)
}

/// Writes the first `count` directions as `eigenface_00.pgm, ...`.
pub fn export_eigenfaces(subspace: &Subspace, layout: BlockLayout, count: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    if count > subspace.p() {
        return Err(QfdaError::Dimension(format!(
            "asked for {count} eigenfaces, subspace has {}",
            subspace.p()
        )));
    }
    if subspace.d_prime() != layout.d_prime {
        return Err(QfdaError::Dimension(format!(
            "subspace has d' = {}, layout {}",
            subspace.d_prime(),
            layout.d_prime
        )));
    }
    create_dir(dir)?;
    let images = render(subspace.u.subcols(0, count).to_owned(), layout)?;
    (0..count)
        .map(|i| {
            let values: Vec<f64> = images.col(i).iter().copied().collect();
            let path = dir.join(format!("eigenface_{i:02}.pgm"));
            write_pgm(&path, &normalize_to_gray(&values, layout.height, layout.width))?;
            Ok(path)
        })
        .collect()
}

/// Files written for one sample by [`export_quantized_images`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedExport {
    pub original: PathBuf,
    pub centered: PathBuf,
    pub quantized: PathBuf,
    /// The three panels above, left to right.
    pub combined: PathBuf,
}

/// For the first `count` samples of `train`, writes the original image, the
/// centered image (min-max scaled), and the reconstruction from coefficients
/// quantized with `levels`, each as its own PGM and side by side.
pub fn export_quantized_images(
    train: &SpectrumSet,
    levels: &LevelVector,
    bounds: &BoundVector,
    mean_image: &[f64],
    count: usize,
    dir: &Path,
) -> Result<Vec<QuantizedExport>> {
    let layout = train.layout;
    let (h, w) = (layout.height, layout.width);
    if mean_image.len() != h * w {
        return Err(QfdaError::Dimension(format!(
            "mean image has {} pixels, images {}",
            mean_image.len(),
            h * w
        )));
    }
    let count = count.min(train.len());
    let picked = train.select(&(0..count).collect::<Vec<_>>());
    let spec = QuantizerSpec::new(bounds.clone(), *levels)?;
    let centered = inverse_dct(&picked).pixels;
    let quantized = inverse_dct(&quantize(&picked, &spec)).pixels;
    create_dir(dir)?;

    (0..count)
        .map(|j| {
            let col = |m: &Mat<f64>, add_mean: bool| -> Vec<f64> {
                (0..h * w)
                    .map(|i| m[(i, j)] + if add_mean { mean_image[i] } else { 0.0 })
                    .collect()
            };
            let original = clamp_to_gray(&col(&centered, true), h, w);
            let centered_img = normalize_to_gray(&col(&centered, false), h, w);
            let quantized_img = clamp_to_gray(&col(&quantized, true), h, w);
            let stem = format!("sample_{j:02}");
            let out = QuantizedExport {
                original: dir.join(format!("{stem}_original.pgm")),
                centered: dir.join(format!("{stem}_centered.pgm")),
                quantized: dir.join(format!("{stem}_quantized.pgm")),
                combined: dir.join(format!("{stem}.pgm")),
            };
            write_pgm(&out.original, &original)?;
            write_pgm(&out.centered, &centered_img)?;
            write_pgm(&out.quantized, &quantized_img)?;
            write_pgm(&out.combined, &side_by_side(&[&original, &centered_img, &quantized_img]))?;
            Ok(out)
        })
        .collect()
}
