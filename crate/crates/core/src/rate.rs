//! Entropy-approximated rate of a quantizer under per-frequency Gaussian KDEs.
//!
//! The probability of each quantization level is the KDE mass over the
//! level's preimage interval, obtained in closed form from the kernel CDFs.
//! The rate of frequency `k` is the entropy of those masses in bits and the
//! overall rate is their plain average over the 64 frequencies.

use std::fmt::Write as _;

use crate::dct::{frequency_view, SpectrumSet, FREQUENCIES};
use crate::error::{QfdaError, Result};
use crate::quantizer::{bootstrap_indices, QuantizerSpec};

pub const MIN_BANDWIDTH: f64 = 1e-6;

/// Past this many bandwidths from a sample, its kernel CDF is 0 or 1 to
/// double precision.
const KERNEL_REACH: f64 = 9.0;

/// One Gaussian KDE per frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyDensity {
    /// Sorted ascending per frequency.
    samples: Vec<Vec<f64>>,
    bandwidth: [f64; FREQUENCIES],
    pub seed: u64,
    pub bootstrap_size: usize,
}

impl FrequencyDensity {
    /// Builds a density from explicit samples and bandwidths.
    pub fn from_parts(samples: Vec<Vec<f64>>, bandwidth: [f64; FREQUENCIES]) -> Result<Self> {
        if samples.len() != FREQUENCIES {
            return Err(QfdaError::Value(format!("expected 64 sample sets, got {}", samples.len())));
        }
        if let Some(k) = samples.iter().position(Vec::is_empty) {
            return Err(QfdaError::Value(format!("frequency {k} has no samples")));
        }
        if let Some(k) = bandwidth.iter().position(|h| !(*h > 0.0 && h.is_finite())) {
            return Err(QfdaError::Value(format!("bandwidth {k} must be positive")));
        }
        let samples = samples
            .into_iter()
            .map(|mut v| {
                v.sort_by(f64::total_cmp);
                v
            })
            .collect();
        Ok(Self {
            samples,
            bandwidth,
            seed: 0,
            bootstrap_size: 0,
        })
    }

    pub fn samples(&self, k: usize) -> &[f64] {
        &self.samples[k]
    }

    pub fn bandwidth(&self, k: usize) -> f64 {
        self.bandwidth[k]
    }

    pub fn pdf(&self, k: usize, x: f64) -> f64 {
        let h = self.bandwidth[k];
        let s = &self.samples[k];
        let norm = 1.0 / (s.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
        s.iter()
            .map(|&xi| {
                let z = (x - xi) / h;
                (-0.5 * z * z).exp()
            })
            .sum::<f64>()
            * norm
    }

    /// Mixture CDF at `x`; exact 0/1 at the infinities.
    pub fn cdf(&self, k: usize, x: f64) -> f64 {
        if x == f64::NEG_INFINITY {
            return 0.0;
        }
        if x == f64::INFINITY {
            return 1.0;
        }
        let h = self.bandwidth[k];
        let s = &self.samples[k];
        let reach = KERNEL_REACH * h;
        // samples below x - reach contribute 1, above x + reach contribute 0
        let lo = s.partition_point(|&xi| xi < x - reach);
        let hi = s.partition_point(|&xi| xi <= x + reach);
        let mid: f64 = s[lo..hi].iter().map(|&xi| normal_cdf((x - xi) / h)).sum();
        (lo as f64 + mid) / s.len() as f64
    }
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Silverman's rule `0.9 min(sigma, IQR / 1.34) N^(-1/5)`, using sigma
/// alone when the IQR vanishes, floored at [`MIN_BANDWIDTH`].
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    if samples.len() < 2 {
        return MIN_BANDWIDTH;
    }
    let mean = samples.iter().sum::<f64>() / n;
    let sigma = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 { sigma.min(iqr / 1.34) } else { sigma };
    (0.9 * spread * n.powf(-0.2)).max(MIN_BANDWIDTH)
}

/// Fits one KDE per frequency over every block of `s` bootstrapped training
/// images (the same draw as [`crate::quantizer::estimate_bounds`]).
pub fn fit_density(train: &SpectrumSet, s: usize, seed: u64) -> Result<FrequencyDensity> {
    if train.is_empty() || s == 0 {
        return Err(QfdaError::Data("density needs a nonempty training set and s >= 1".into()));
    }
    let picked = train.select(&bootstrap_indices(train.len(), s, seed));
    let mut samples = Vec::with_capacity(FREQUENCIES);
    let mut bandwidth = [0.0; FREQUENCIES];
    for (k, h) in bandwidth.iter_mut().enumerate() {
        let values = frequency_view(&picked, k)?;
        *h = silverman_bandwidth(&values);
        samples.push(values);
    }
    let mut density = FrequencyDensity::from_parts(samples, bandwidth)?;
    density.seed = seed;
    density.bootstrap_size = s;
    Ok(density)
}

/// Preimage of one quantization level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

/// The `m_k` level preimages of frequency `k`, ascending. The outer two are
/// unbounded because clipping folds the tails into the extreme levels.
pub fn interval_partition(spec: &QuantizerSpec, k: usize) -> Vec<Interval> {
    let stair = spec.staircase(k);
    let mut edges = vec![f64::NEG_INFINITY];
    edges.extend(stair.breakpoints());
    edges.push(f64::INFINITY);
    edges
        .windows(2)
        .zip(stair.alphabet())
        .map(|(w, level)| Interval {
            lower: w[0],
            upper: w[1],
            level,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub per_frequency: [f64; FREQUENCIES],
    pub average: f64,
    pub levels: [u32; FREQUENCIES],
    /// Interior interval boundaries per frequency.
    pub intervals_used: Vec<Vec<f64>>,
    /// Level probabilities per frequency, in interval order.
    pub probabilities: Vec<Vec<f64>>,
}

impl RateReport {
    /// 64 rows `k,m_k,r_k` and a final `mean,,r_bar` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,m_k,r_k\n");
        for k in 0..FREQUENCIES {
            let _ = writeln!(out, "{k},{},{}", self.levels[k], self.per_frequency[k]);
        }
        let _ = writeln!(out, "mean,,{}", self.average);
        out
    }
}

/// `-sum p log2 p` with `0 log 0 = 0`.
pub fn entropy_bits(probabilities: &[f64]) -> f64 {
    -probabilities
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.log2())
        .sum::<f64>()
}

pub fn rate(density: &FrequencyDensity, spec: &QuantizerSpec) -> RateReport {
    let mut per_frequency = [0.0; FREQUENCIES];
    let mut intervals_used = Vec::with_capacity(FREQUENCIES);
    let mut probabilities = Vec::with_capacity(FREQUENCIES);
    for k in 0..FREQUENCIES {
        let breaks = spec.staircase(k).breakpoints();
        let mut cdf = Vec::with_capacity(breaks.len() + 2);
        cdf.push(0.0);
        cdf.extend(breaks.iter().map(|&b| density.cdf(k, b)));
        cdf.push(1.0);
        // differences of one monotone CDF sequence telescope to exactly 1
        let p: Vec<f64> = cdf.windows(2).map(|w| (w[1] - w[0]).max(0.0)).collect();
        per_frequency[k] = entropy_bits(&p);
        intervals_used.push(breaks);
        probabilities.push(p);
    }
    RateReport {
        average: per_frequency.iter().sum::<f64>() / FREQUENCIES as f64,
        per_frequency,
        levels: spec.levels.m,
        intervals_used,
        probabilities,
    }
}
