//! Uniform per-frequency quantization of block-DCT spectra.
//!
//! Frequency `k` is clipped to `[-l_k, l_k]` and mapped onto a staircase
//! with `m_k` output values. With `t1 = (m_k + 2) / 2` for even `m_k` and
//! `(m_k + 1) / 2` for odd `m_k`, inputs fall into level `j = floor(t1 |x| / l_k)`
//! (capped at `t1 - 1`) and map to `sign(x) * j * l_k / (t1 - 1)`. For even
//! `m_k` the negative side stops one level short, at `-t2` with
//! `t2 = l_k (t1 - 2) / t1`, which makes the alphabet asymmetric.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dct::{SpectrumSet, FREQUENCIES};
use crate::error::{QfdaError, Result};

/// Per-frequency upper bounds on the number of levels, `l_k >= 2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundVector {
    pub ell: [u32; FREQUENCIES],
    pub bootstrap_seed: u64,
    pub bootstrap_size: usize,
}

/// Number of quantization levels per frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LevelVector {
    pub m: [u32; FREQUENCIES],
}

fn csv_line(values: &[u32; FREQUENCIES]) -> String {
    values.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
}

fn parse_csv_line(s: &str) -> Result<[u32; FREQUENCIES]> {
    let values: Vec<u32> = s
        .trim()
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| QfdaError::Format(format!("invalid level entry {v:?}")))
        })
        .collect::<Result<_>>()?;
    values
        .try_into()
        .map_err(|v: Vec<u32>| QfdaError::Format(format!("expected 64 entries, found {}", v.len())))
}

impl BoundVector {
    pub fn from_ell(ell: [u32; FREQUENCIES]) -> Result<Self> {
        if let Some(k) = ell.iter().position(|&l| l < 2) {
            return Err(QfdaError::Value(format!("bound l_{k} = {} is below 2", ell[k])));
        }
        Ok(Self {
            ell,
            bootstrap_seed: 0,
            bootstrap_size: 0,
        })
    }

    pub fn to_csv_line(&self) -> String {
        csv_line(&self.ell)
    }

    pub fn parse_csv_line(s: &str) -> Result<Self> {
        Self::from_ell(parse_csv_line(s)?)
    }

    /// The finest admissible level vector, `m_k = l_k`.
    pub fn finest(&self) -> LevelVector {
        LevelVector { m: self.ell }
    }
}

impl LevelVector {
    pub fn uniform(m: u32) -> Self {
        Self { m: [m; FREQUENCIES] }
    }

    pub fn check(&self, bounds: &BoundVector) -> Result<()> {
        for k in 0..FREQUENCIES {
            if self.m[k] < 2 || self.m[k] > bounds.ell[k] {
                return Err(QfdaError::Value(format!(
                    "m_{k} = {} outside [2, {}]",
                    self.m[k], bounds.ell[k]
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for LevelVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&csv_line(&self.m))
    }
}

impl FromStr for LevelVector {
    type Err = QfdaError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(Self {
            m: parse_csv_line(s)?,
        })
    }
}

/// Staircase parameters for one frequency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Staircase {
    pub ell: f64,
    pub m: u32,
    pub t1: u32,
}

impl Staircase {
    pub fn new(ell: u32, m: u32) -> Self {
        let t1 = if m % 2 == 0 { (m + 2) / 2 } else { (m + 1) / 2 };
        Self {
            ell: ell as f64,
            m,
            t1,
        }
    }

    pub fn t2(&self) -> f64 {
        self.ell * (self.t1 as f64 - 2.0) / self.t1 as f64
    }

    /// Output spacing `l / (t1 - 1)`.
    pub fn step(&self) -> f64 {
        self.ell / (self.t1 as f64 - 1.0)
    }

    /// Highest level index on the negative side.
    pub fn negative_levels(&self) -> u32 {
        if self.m % 2 == 0 {
            self.t1 - 2
        } else {
            self.t1 - 1
        }
    }

    pub fn positive_levels(&self) -> u32 {
        self.t1 - 1
    }

    /// Signed level index of `x`, in `-negative_levels()..=positive_levels()`.
    pub fn level_index(&self, x: f64) -> i64 {
        if x == 0.0 || x.is_nan() {
            return 0;
        }
        let clipped = x.clamp(-self.ell, self.ell);
        if self.m % 2 == 0 && clipped <= -self.t2() {
            return -(self.negative_levels() as i64);
        }
        let j = (self.t1 as f64 * clipped.abs() / self.ell).floor() as i64;
        let j = j.min(self.t1 as i64 - 1);
        if clipped < 0.0 {
            -j
        } else {
            j
        }
    }

    pub fn level_value(&self, index: i64) -> f64 {
        if index == 0 {
            return 0.0;
        }
        // multiply before dividing so the top level lands exactly on l
        index as f64 * self.ell / (self.t1 as f64 - 1.0)
    }

    pub fn quantize(&self, x: f64) -> f64 {
        self.level_value(self.level_index(x))
    }

    /// All output values, ascending.
    pub fn alphabet(&self) -> Vec<f64> {
        (-(self.negative_levels() as i64)..=self.positive_levels() as i64)
            .map(|j| self.level_value(j))
            .collect()
    }

    /// Interior breakpoints between consecutive levels, ascending. Level
    /// `j > 0` starts at `j l / t1`; level `-j` ends at `-j l / t1`.
    pub fn breakpoints(&self) -> Vec<f64> {
        let edge = |j: u32| j as f64 * self.ell / self.t1 as f64;
        let mut out: Vec<f64> = (1..=self.negative_levels()).rev().map(|j| -edge(j)).collect();
        out.extend((1..=self.positive_levels()).map(edge));
        out
    }
}

/// Immutable quantizer: bounds plus levels, validated together.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerSpec {
    pub bounds: BoundVector,
    pub levels: LevelVector,
}

impl QuantizerSpec {
    pub fn new(bounds: BoundVector, levels: LevelVector) -> Result<Self> {
        levels.check(&bounds)?;
        Ok(Self { bounds, levels })
    }

    pub fn staircase(&self, k: usize) -> Staircase {
        Staircase::new(self.bounds.ell[k], self.levels.m[k])
    }
}

/// With-replacement draw of `s` column indices out of `n`.
///
/// Bound estimation and density fitting both call this with the same seed so
/// they see the same images.
pub fn bootstrap_indices(n: usize, s: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..s).map(|_| rng.random_range(0..n)).collect()
}

/// `l_k = max(2, round(max |F'(k)|))` over all blocks of `s` bootstrapped images.
pub fn estimate_bounds(train: &SpectrumSet, s: usize, seed: u64) -> Result<BoundVector> {
    if train.is_empty() {
        return Err(QfdaError::Data("cannot estimate bounds from an empty training set".into()));
    }
    if s == 0 {
        return Err(QfdaError::Data("bootstrap size must be at least 1".into()));
    }
    let mut max_abs = [0.0f64; FREQUENCIES];
    for j in bootstrap_indices(train.len(), s, seed) {
        let col = train.coeffs.col(j);
        for b in 0..train.layout.blocks_per_image {
            for (k, slot) in max_abs.iter_mut().enumerate() {
                *slot = slot.max(col[train.layout.row(b, k)].abs());
            }
        }
    }
    let mut ell = [0u32; FREQUENCIES];
    for k in 0..FREQUENCIES {
        ell[k] = (max_abs[k].round() as u32).max(2);
    }
    Ok(BoundVector {
        ell,
        bootstrap_seed: seed,
        bootstrap_size: s,
    })
}

pub fn quantize(spectrum: &SpectrumSet, spec: &QuantizerSpec) -> SpectrumSet {
    let stairs: Vec<Staircase> = (0..FREQUENCIES).map(|k| spec.staircase(k)).collect();
    let mut out = spectrum.clone();
    for j in 0..out.len() {
        for (i, v) in out.coeffs.col_mut(j).iter_mut().enumerate() {
            *v = stairs[i % FREQUENCIES].quantize(*v);
        }
    }
    out
}

/// Rounds a continuous position onto the admissible lattice `{2..l_k}`:
/// above `l_k` gives `l_k`, below 2 gives 2, otherwise `ceil(m - 0.5)`.
pub fn project_levels(raw: &[f64; FREQUENCIES], bounds: &BoundVector) -> Result<LevelVector> {
    let mut m = [0u32; FREQUENCIES];
    for k in 0..FREQUENCIES {
        let x = raw[k];
        if !x.is_finite() {
            return Err(QfdaError::Value(format!("level position {k} is not finite: {x}")));
        }
        let ell = bounds.ell[k];
        m[k] = if x > ell as f64 {
            ell
        } else if x < 2.0 {
            2
        } else {
            (x - 0.5).ceil() as u32
        };
    }
    Ok(LevelVector { m })
}
