#![allow(dead_code)]

use std::path::{Path, PathBuf};

use faer::Mat;
use qfda::dct::{BlockLayout, SpectrumSet};
use qfda::optimizer::{evaluate_cost, CostContext, SubspaceSettings};
use qfda::data::{write_idx, RawImageSet};
use qfda::experiment::{DatasetSource, ExperimentConfig};
use qfda::quantizer::{estimate_bounds, LevelVector};
use qfda::rate::fit_density;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

pub fn fixture_images() -> PathBuf {
    data_dir().join("fashion-01-200-images-idx3-ubyte")
}

pub fn fixture_labels() -> PathBuf {
    data_dir().join("fashion-01-200-labels-idx1-ubyte")
}

/// Two-class spectra on 8x16 images (d' = 128) where only frequencies 0
/// and 1 exceed the smallest bound; all other coefficients stay below 0.5
/// so their bound is 2 and the search space is `{2..l_0} x {2..l_1}`.
pub fn toy_spectra(seed: u64, n: usize) -> SpectrumSet {
    let layout = BlockLayout::new(8, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|j| j % 2).collect();
    let noise = Normal::new(0.0, 2.0).unwrap();
    let mut coeffs = Mat::zeros(layout.d_prime, n);
    for j in 0..n {
        let shift = if labels[j] == 0 { -1.0 } else { 1.0 };
        for b in 0..layout.blocks_per_image {
            for k in 0..64 {
                let v: f64 = match k {
                    0 => shift + noise.sample(&mut rng),
                    1 => 0.6 * shift + noise.sample(&mut rng),
                    _ => rng.random_range(-0.45..0.45),
                };
                coeffs[(layout.row(b, k), j)] = v.clamp(-7.4, 7.4);
            }
        }
    }
    SpectrumSet::new(coeffs, layout, labels).unwrap()
}

pub const TOY_GAMMA: f64 = 0.02;

pub fn toy_context(seed: u64) -> CostContext {
    let n = 400;
    let train = toy_spectra(seed, n);
    let bounds = estimate_bounds(&train, n, seed).unwrap();
    let density = fit_density(&train, n, seed).unwrap();
    let settings = SubspaceSettings {
        epsilon: 1e-7,
        p: 4,
        p_eval: 1,
    };
    CostContext::new(train, bounds, density, settings, TOY_GAMMA, 0.0).unwrap()
}

/// Exhaustive minimum over the active `(m_0, m_1)` lattice.
pub fn exhaustive_optimum(ctx: &CostContext) -> (f64, LevelVector) {
    let mut best = (f64::INFINITY, LevelVector::uniform(2));
    for m0 in 2..=ctx.bounds.ell[0] {
        for m1 in 2..=ctx.bounds.ell[1] {
            let mut m = LevelVector::uniform(2);
            m.m[0] = m0;
            m.m[1] = m1;
            let c = evaluate_cost(&m, ctx).unwrap();
            if c.total < best.0 {
                best = (c.total, m);
            }
        }
    }
    best
}

/// Two classes of 8x8 images: a shared random pattern, plus `separation`
/// noise standard deviations along a fixed unit direction for class 1, plus
/// Gaussian noise of sd 5 along each of `rank` orthonormal pixel directions
/// (isotropic for rank 64). Pixels are rounded to bytes.
pub fn gaussian_images(seed: u64, n: usize, separation: f64, rank: usize) -> RawImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = 5.0;
    let noise = Normal::new(0.0, sd).unwrap();
    let base: Vec<f64> = (0..64).map(|_| rng.random_range(90.0..160.0)).collect();
    let unit = |rng: &mut ChaCha8Rng, against: &[Vec<f64>]| -> Vec<f64> {
        let mut v: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        for b in against {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    };
    let direction = unit(&mut rng, &[]);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for _ in 0..rank {
        let b = unit(&mut rng, &basis);
        basis.push(b);
    }
    let labels: Vec<usize> = (0..n).map(|j| j % 2).collect();
    let mut pixels = Mat::zeros(64, n);
    for j in 0..n {
        let z: Vec<f64> = (0..rank).map(|_| noise.sample(&mut rng)).collect();
        for i in 0..64 {
            let shift = labels[j] as f64 * separation * sd * direction[i];
            let e: f64 = (0..rank).map(|r| z[r] * basis[r][i]).sum();
            pixels[(i, j)] = (base[i] + shift + e).round().clamp(0.0, 255.0);
        }
    }
    RawImageSet::new(pixels, 8, 8, labels).unwrap()
}

/// Writes `set` as IDX files in `dir` and returns a config reading them,
/// with outputs under `dir/out`.
pub fn idx_config(set: &RawImageSet, dir: &Path) -> ExperimentConfig {
    let images = dir.join("images.idx");
    let labels = dir.join("labels.idx");
    write_idx(set, &images, &labels).unwrap();
    ExperimentConfig {
        dataset: DatasetSource::Idx { images, labels },
        output_dir: dir.join("out"),
        ..ExperimentConfig::default()
    }
}

pub fn fixture_config(output_dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSource::Idx {
            images: fixture_images(),
            labels: fixture_labels(),
        },
        output_dir: output_dir.to_path_buf(),
        ..ExperimentConfig::default()
    }
}
