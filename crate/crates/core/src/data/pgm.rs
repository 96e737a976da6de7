//! Binary PGM (P5) reading and writing, plus directory-per-class corpora.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use faer::Mat;

use super::RawImageSet;
use crate::error::{QfdaError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major samples scaled to `0..=255`.
    pub pixels: Vec<u8>,
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = next_token(bytes, pos)
        .ok_or_else(|| QfdaError::Format(format!("PGM header missing {what}")))?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| QfdaError::Format(format!("PGM header has invalid {what}")))
}

pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 0;
    match next_token(bytes, &mut pos) {
        Some(b"P5") => {}
        other => {
            return Err(QfdaError::Format(format!(
                "expected binary PGM magic P5, found {:?}",
                other.map(String::from_utf8_lossy)
            )))
        }
    }
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(QfdaError::Format(format!(
            "unsupported PGM maxval {maxval} (8-bit only)"
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes
        .get(pos..pos + width * height)
        .ok_or_else(|| QfdaError::Format("PGM raster truncated".into()))?;
    let pixels = if maxval == 255 {
        raster.to_vec()
    } else {
        raster
            .iter()
            .map(|&v| ((v as f64) * 255.0 / maxval as f64).round() as u8)
            .collect()
    };
    Ok(GrayImage {
        width,
        height,
        pixels,
    })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| QfdaError::io(path, e))?;
    parse_pgm(&bytes).map_err(|e| match e {
        QfdaError::Format(msg) => QfdaError::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    fs::write(path, encode_pgm(image)).map_err(|e| QfdaError::io(path, e))
}

/// Maps class subdirectory names to class ids, e.g. `s12 = 1`.
///
/// Lines are `name = id`; `#` starts a comment. Subdirectories absent from
/// the map are skipped when the map is applied.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassMap {
    pub entries: BTreeMap<String, usize>,
}

impl ClassMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (name, id) = line.split_once('=').ok_or_else(|| {
                QfdaError::Config(format!("class map line {}: expected `name = id`", lineno + 1))
            })?;
            let id = id.trim().parse().map_err(|_| {
                QfdaError::Config(format!("class map line {}: invalid class id", lineno + 1))
            })?;
            entries.insert(name.trim().to_string(), id);
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| QfdaError::io(path, e))?;
        Self::parse(&text)
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| QfdaError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| QfdaError::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Loads a directory with one subdirectory per class. Classes are numbered
/// by sorted subdirectory name and images ordered by (class, filename).
pub fn load_pgm_dir(dir: &Path) -> Result<RawImageSet> {
    load_pgm_dir_inner(dir, None)
}

/// Like [`load_pgm_dir`], but relabels subdirectories through `map`.
pub fn load_pgm_dir_with_map(dir: &Path, map: &ClassMap) -> Result<RawImageSet> {
    load_pgm_dir_inner(dir, Some(map))
}

fn load_pgm_dir_inner(dir: &Path, map: Option<&ClassMap>) -> Result<RawImageSet> {
    let class_dirs: Vec<PathBuf> = sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();

    let mut images: Vec<(usize, GrayImage)> = Vec::new();
    for (position, class_dir) in class_dirs.iter().enumerate() {
        let name = class_dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let class = match map {
            Some(map) => match map.entries.get(&name) {
                Some(&id) => id,
                None => continue,
            },
            None => position,
        };
        for file in sorted_entries(class_dir)? {
            if file.is_file() {
                images.push((class, read_pgm(&file)?));
            }
        }
    }
    if images.is_empty() {
        return Err(QfdaError::Consistency(format!(
            "{}: no PGM images found",
            dir.display()
        )));
    }
    // a class map may interleave classes across directories
    images.sort_by_key(|(class, _)| *class);

    let (height, width) = (images[0].1.height, images[0].1.width);
    if let Some((_, bad)) = images
        .iter()
        .find(|(_, im)| im.height != height || im.width != width)
    {
        return Err(QfdaError::Consistency(format!(
            "mixed image sizes: {height}x{width} and {}x{}",
            bad.height, bad.width
        )));
    }
    let d = height * width;
    let pixels = Mat::from_fn(d, images.len(), |i, j| images[j].1.pixels[i] as f64);
    let labels = images.iter().map(|(c, _)| *c).collect();
    RawImageSet::new(pixels, height, width, labels)
}
