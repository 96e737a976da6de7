//! Image corpora: loading, resampling, stratified splitting and centering.

pub mod idx;
pub mod pgm;

use std::fs;
use std::path::Path;

use faer::Mat;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{QfdaError, Result};

pub use idx::{load_idx, write_idx};
pub use pgm::{load_pgm_dir, load_pgm_dir_with_map, ClassMap, GrayImage};

/// Grayscale images stored one per column, row-major inside each column.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImageSet {
    pub pixels: Mat<f64>,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
}

impl RawImageSet {
    /// Checks the shape and that labels cover `0..c` with no empty class.
    pub fn new(pixels: Mat<f64>, height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if pixels.nrows() != height * width {
            return Err(QfdaError::Consistency(format!(
                "{} rows for a {height}x{width} image",
                pixels.nrows()
            )));
        }
        if pixels.ncols() != labels.len() {
            return Err(QfdaError::Consistency(format!(
                "{} images but {} labels",
                pixels.ncols(),
                labels.len()
            )));
        }
        check_labels(&labels)?;
        Ok(Self {
            pixels,
            height,
            width,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn num_classes(&self) -> usize {
        num_classes(&self.labels)
    }

    /// Columns at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let pixels = Mat::from_fn(self.dim(), indices.len(), |i, j| self.pixels[(i, indices[j])]);
        let labels = indices.iter().map(|&j| self.labels[j]).collect();
        Self::new(pixels, self.height, self.width, labels)
    }

    /// Keeps only `classes`, relabelled to their position in the slice.
    pub fn select_classes(&self, classes: &[usize]) -> Result<Self> {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&j| classes.contains(&self.labels[j]))
            .collect();
        let pixels = Mat::from_fn(self.dim(), keep.len(), |i, j| self.pixels[(i, keep[j])]);
        let labels = keep
            .iter()
            .map(|&j| classes.iter().position(|&c| c == self.labels[j]).unwrap())
            .collect();
        Self::new(pixels, self.height, self.width, labels)
    }
}

pub(crate) fn num_classes(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |&m| m + 1)
}

pub(crate) fn check_labels(labels: &[usize]) -> Result<()> {
    let c = num_classes(labels);
    let mut counts = vec![0usize; c];
    for &l in labels {
        counts[l] += 1;
    }
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(QfdaError::Consistency(format!(
            "class {empty} has no members (labels must cover 0..{c})"
        )));
    }
    Ok(())
}

/// Bilinear resampling by `factor`; output dims are `round(factor * dim)`.
///
/// Sample positions use pixel centres, so a factor of one half averages each
/// 2x2 neighbourhood.
pub fn resample(set: &RawImageSet, factor: f64) -> Result<RawImageSet> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(QfdaError::Value(format!(
            "resample factor must be in (0, 1], got {factor}"
        )));
    }
    let new_h = (factor * set.height as f64).round() as usize;
    let new_w = (factor * set.width as f64).round() as usize;
    if new_h < 8 || new_w < 8 {
        return Err(QfdaError::Size(format!(
            "resampled image {new_h}x{new_w} is smaller than one 8x8 block"
        )));
    }
    if new_h == set.height && new_w == set.width {
        return Ok(set.clone());
    }

    let axis = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / out as f64;
        (0..out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let rows = axis(new_h, set.height);
    let cols = axis(new_w, set.width);
    let w = set.width;
    let pixels = Mat::from_fn(new_h * new_w, set.len(), |i, j| {
        let (y0, y1, ty) = rows[i / new_w];
        let (x0, x1, tx) = cols[i % new_w];
        let p = |y: usize, x: usize| set.pixels[(y * w + x, j)];
        let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
        let bottom = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
        top * (1.0 - ty) + bottom * ty
    });
    RawImageSet::new(pixels, new_h, new_w, set.labels.clone())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            train_fraction: train,
            val_fraction: val,
            test_fraction: test,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_fraction, self.val_fraction, self.test_fraction];
        if fr.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(QfdaError::Split(format!("fractions must lie in (0,1): {fr:?}")));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(QfdaError::Split(format!("fractions must sum to 1: {fr:?}")));
        }
        Ok(())
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.6,
            val_fraction: 0.2,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Column indices of each split, ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    /// Writes `split_{train,val,test}.txt`, one index per line.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, idx) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            let path = dir.join(format!("split_{name}.txt"));
            let text: String = idx.iter().map(|i| format!("{i}\n")).collect();
            fs::write(&path, text).map_err(|e| QfdaError::io(&path, e))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<Vec<usize>> {
            let path = dir.join(format!("split_{name}.txt"));
            let text = fs::read_to_string(&path).map_err(|e| QfdaError::io(&path, e))?;
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| {
                    l.trim()
                        .parse()
                        .map_err(|_| QfdaError::Format(format!("{}: bad index {l:?}", path.display())))
                })
                .collect()
        };
        Ok(Self {
            train: read("train")?,
            val: read("val")?,
            test: read("test")?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: RawImageSet,
    pub val: RawImageSet,
    pub test: RawImageSet,
    pub indices: SplitIndices,
}

/// Per-class seeded shuffle, then each class is cut by the split fractions.
/// Validation and test receive at least one sample per class.
pub fn stratified_split(set: &RawImageSet, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut indices = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for class in 0..set.num_classes() {
        let mut members: Vec<usize> = (0..set.len()).filter(|&j| set.labels[j] == class).collect();
        let n = members.len();
        if n < 3 {
            return Err(QfdaError::Split(format!(
                "class {class} has {n} members, need at least 3"
            )));
        }
        members.shuffle(&mut rng);
        let n_val = ((spec.val_fraction * n as f64).round() as usize).max(1);
        let n_test = ((spec.test_fraction * n as f64).round() as usize).max(1);
        if n_val + n_test >= n {
            return Err(QfdaError::Split(format!(
                "class {class} with {n} members leaves no training samples"
            )));
        }
        let n_train = n - n_val - n_test;
        indices.train.extend_from_slice(&members[..n_train]);
        indices.val.extend_from_slice(&members[n_train..n_train + n_val]);
        indices.test.extend_from_slice(&members[n_train + n_val..]);
    }
    indices.train.sort_unstable();
    indices.val.sort_unstable();
    indices.test.sort_unstable();
    Ok(Split {
        train: set.select(&indices.train)?,
        val: set.select(&indices.val)?,
        test: set.select(&indices.test)?,
        indices,
    })
}

/// Deterministic stratified subsample of at most `max` columns; classes keep
/// their relative sizes (each keeps at least one member).
pub fn limit_samples(set: &RawImageSet, max: usize, seed: u64) -> Result<RawImageSet> {
    set.select(&limit_indices(&set.labels, max, seed))
}

/// The ascending column indices [`limit_samples`] keeps.
pub fn limit_indices(labels: &[usize], max: usize, seed: u64) -> Vec<usize> {
    let n = labels.len();
    if n <= max {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(max);
    for class in 0..num_classes(labels) {
        let mut members: Vec<usize> = (0..n).filter(|&j| labels[j] == class).collect();
        let quota = ((members.len() * max) as f64 / n as f64).floor().max(1.0) as usize;
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..quota.min(members.len())]);
    }
    keep.sort_unstable();
    keep
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenteredImageSet {
    pub pixels: Mat<f64>,
    pub mean_image: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
    /// Where the data came from, e.g. `"train"`.
    pub provenance: String,
}

impl CenteredImageSet {
    pub fn len(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds the mean image back to every column.
    pub fn uncentered(&self) -> Mat<f64> {
        Mat::from_fn(self.pixels.nrows(), self.len(), |i, j| {
            self.pixels[(i, j)] + self.mean_image[i]
        })
    }
}

pub fn column_mean(pixels: &Mat<f64>) -> Vec<f64> {
    let n = pixels.ncols() as f64;
    (0..pixels.nrows())
        .map(|i| (0..pixels.ncols()).map(|j| pixels[(i, j)]).sum::<f64>() / n)
        .collect()
}

/// Subtracts the set's own mean image from every column.
pub fn center(set: &RawImageSet) -> CenteredImageSet {
    let mean = column_mean(&set.pixels);
    center_with(set, &mean, "train")
}

/// Centers with an externally supplied mean, e.g. the training mean for
/// validation and test data.
pub fn center_with(set: &RawImageSet, mean: &[f64], provenance: &str) -> CenteredImageSet {
    assert_eq!(mean.len(), set.dim(), "mean image dimension mismatch");
    CenteredImageSet {
        pixels: Mat::from_fn(set.dim(), set.len(), |i, j| set.pixels[(i, j)] - mean[i]),
        mean_image: mean.to_vec(),
        height: set.height,
        width: set.width,
        labels: set.labels.clone(),
        provenance: provenance.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labelled(n_per_class: usize, classes: usize) -> RawImageSet {
        let n = n_per_class * classes;
        let pixels = Mat::from_fn(64, n, |i, j| (i * 7 + j * 13) as f64 % 255.0);
        let labels = (0..n).map(|j| j % classes).collect();
        RawImageSet::new(pixels, 8, 8, labels).unwrap()
    }

    #[test]
    fn constructor_rejects_missing_class() {
        let pixels = Mat::<f64>::zeros(4, 2);
        assert!(RawImageSet::new(pixels, 2, 2, vec![0, 2]).is_err());
    }

    #[test]
    fn resample_halves_att_faces() {
        let pixels = Mat::from_fn(112 * 92, 1, |i, _| (i % 256) as f64);
        let set = RawImageSet::new(pixels, 112, 92, vec![0]).unwrap();
        let small = resample(&set, 0.5).unwrap();
        assert_eq!((small.height, small.width), (56, 46));
        assert_eq!(small.dim(), 56 * 46);
    }

    #[test]
    fn resample_identity_and_constant() {
        let set = labelled(2, 2);
        assert_eq!(resample(&set, 1.0).unwrap(), set);

        let pixels = Mat::from_fn(16 * 16, 1, |_, _| 42.5);
        let flat = RawImageSet::new(pixels, 16, 16, vec![0]).unwrap();
        let half = resample(&flat, 0.5).unwrap();
        for i in 0..half.dim() {
            assert!((half.pixels[(i, 0)] - 42.5).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_below_one_block_is_size_error() {
        let set = labelled(1, 1);
        assert!(matches!(resample(&set, 0.5), Err(QfdaError::Size(_))));
    }

    #[test]
    fn split_ten_per_class() {
        let set = labelled(10, 3);
        let split = stratified_split(&set, &SplitSpec::new(0.6, 0.2, 0.2, 7).unwrap()).unwrap();
        for class in 0..3 {
            let count = |s: &RawImageSet| s.labels.iter().filter(|&&l| l == class).count();
            assert_eq!(count(&split.train), 6);
            assert_eq!(count(&split.val), 2);
            assert_eq!(count(&split.test), 2);
        }
        let again = stratified_split(&set, &SplitSpec::new(0.6, 0.2, 0.2, 7).unwrap()).unwrap();
        assert_eq!(split.indices, again.indices);
    }

    #[test]
    fn split_att_sized_corpus() {
        let set = labelled(10, 40);
        let split = stratified_split(&set, &SplitSpec::default()).unwrap();
        assert_eq!(
            (split.train.len(), split.val.len(), split.test.len()),
            (240, 80, 80)
        );
    }

    #[test]
    fn split_rejects_tiny_class() {
        let pixels = Mat::<f64>::zeros(64, 5);
        let set = RawImageSet::new(pixels, 8, 8, vec![0, 0, 0, 1, 1]).unwrap();
        assert!(matches!(
            stratified_split(&set, &SplitSpec::default()),
            Err(QfdaError::Split(_))
        ));
    }

    #[test]
    fn split_indices_roundtrip_through_text() {
        let set = labelled(5, 2);
        let split = stratified_split(&set, &SplitSpec::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        split.indices.write(dir.path()).unwrap();
        assert_eq!(SplitIndices::read(dir.path()).unwrap(), split.indices);
    }

    #[test]
    fn center_two_columns() {
        let pixels = Mat::from_fn(2, 2, |i, j| if i == j { 1.0 } else { 3.0 });
        let set = RawImageSet::new(pixels, 1, 2, vec![0, 0]).unwrap();
        let c = center(&set);
        assert_eq!(c.mean_image, vec![2.0, 2.0]);
        assert_eq!(c.pixels[(0, 0)], -1.0);
        assert_eq!(c.pixels[(1, 0)], 1.0);
        assert_eq!(c.pixels[(0, 1)], 1.0);
        assert_eq!(c.pixels[(1, 1)], -1.0);
    }

    #[test]
    fn center_single_image_is_zero() {
        let set = labelled(1, 1);
        let c = center(&set);
        assert!((0..64).all(|i| c.pixels[(i, 0)] == 0.0));
    }

    #[test]
    fn limit_samples_keeps_strata() {
        let set = labelled(50, 2);
        let small = limit_samples(&set, 20, 3).unwrap();
        assert_eq!(small.len(), 20);
        assert_eq!(small.labels.iter().filter(|&&l| l == 0).count(), 10);
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n_per_class in 3usize..20, classes in 1usize..5, seed in any::<u64>()) {
            let set = labelled(n_per_class, classes);
            let split = stratified_split(&set, &SplitSpec { seed, ..SplitSpec::default() }).unwrap();
            let mut all: Vec<usize> = split.indices.train.iter()
                .chain(&split.indices.val).chain(&split.indices.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..set.len()).collect::<Vec<_>>());
            for class in 0..classes {
                let count = |s: &RawImageSet| s.labels.iter().filter(|&&l| l == class).count() as f64;
                let n = n_per_class as f64;
                prop_assert!((count(&split.train) - 0.6 * n).abs() <= 1.0 + 1e-9);
                prop_assert!(count(&split.val) >= 1.0 && count(&split.test) >= 1.0);
            }
        }

        #[test]
        fn centering_zeroes_the_mean(values in proptest::collection::vec(0.0f64..255.0, 64 * 5)) {
            let pixels = Mat::from_fn(64, 5, |i, j| values[j * 64 + i]);
            let set = RawImageSet::new(pixels, 8, 8, vec![0; 5]).unwrap();
            let c = center(&set);
            for m in column_mean(&c.pixels) {
                prop_assert!(m.abs() <= 1e-9 * 255.0);
            }
            let back = c.uncentered();
            for i in 0..64 { for j in 0..5 {
                prop_assert!((back[(i, j)] - set.pixels[(i, j)]).abs() <= 1e-12 * 255.0);
            }}
            let recentered = center(&RawImageSet::new(c.pixels.clone(), 8, 8, vec![0; 5]).unwrap());
            for i in 0..64 { for j in 0..5 {
                prop_assert!((recentered.pixels[(i, j)] - c.pixels[(i, j)]).abs() <= 1e-12);
            }}
        }
    }
}
