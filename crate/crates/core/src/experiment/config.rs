//! Line-oriented `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SplitSpec;
use crate::error::{QfdaError, Result};
use crate::optimizer::PsoConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Idx { images: PathBuf, labels: PathBuf },
    /// One subdirectory per class.
    Pgm { dir: PathBuf, class_map: Option<PathBuf> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// Original class ids to keep, relabelled `0..c` in this order. Empty
    /// keeps every class.
    pub classes: Vec<usize>,
    pub resample_factor: f64,
    pub split: SplitSpec,
    /// Training images kept after the split (stratified subsample).
    pub max_train_samples: usize,
    pub gamma_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub k_nn: usize,
    pub max_dims: usize,
    pub epsilon: f64,
    /// Swarm settings; `gamma` and `lambda` are used by single runs and
    /// replaced per cell in a grid.
    pub pso: PsoConfig,
    /// Bootstrap size `s`; `None` means `min(100, n_train)`.
    pub bootstrap_size: Option<usize>,
    pub bootstrap_seed: u64,
    /// Directions solved for; `None` means `min(max_dims, d')`.
    pub p: Option<usize>,
    /// Directions in the criterion; `None` means `p`.
    pub p_eval: Option<usize>,
    pub export_count: usize,
    pub output_dir: PathBuf,
}

const PATH_KEYS: [&str; 5] = ["images", "labels", "pgm_dir", "class_map", "output_dir"];

const KEYS: &[&str] = &[
    "dataset",
    "images",
    "labels",
    "pgm_dir",
    "class_map",
    "classes",
    "resample_factor",
    "train_fraction",
    "val_fraction",
    "test_fraction",
    "seed",
    "split_seed",
    "bootstrap_seed",
    "pso_seed",
    "max_train_samples",
    "gamma_grid",
    "lambda_grid",
    "gamma",
    "lambda",
    "k_nn",
    "max_dims",
    "epsilon",
    "particles",
    "iterations",
    "inertia",
    "cognitive",
    "social",
    "bootstrap_size",
    "p",
    "p_eval",
    "export_count",
    "output_dir",
];

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// a repeated key keeps its last value.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| QfdaError::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
        let key = key.trim();
        check_key(key)?;
        map.insert(key.to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn check_key(key: &str) -> Result<()> {
    if KEYS.contains(&key) {
        Ok(())
    } else {
        Err(QfdaError::Config(format!("unknown key {key:?}")))
    }
}

/// Parses a `key=value` override as given on the command line.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| QfdaError::Config(format!("override {s:?} is not key=value")))?;
    let k = k.trim();
    check_key(k)?;
    Ok((k.to_string(), v.trim().to_string()))
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| QfdaError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn format_list<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Idx {
                images: PathBuf::from("train-images-idx3-ubyte"),
                labels: PathBuf::from("train-labels-idx1-ubyte"),
            },
            classes: Vec::new(),
            resample_factor: 1.0,
            split: SplitSpec::default(),
            max_train_samples: 2000,
            gamma_grid: vec![0.1, 1.0, 10.0],
            lambda_grid: vec![0.5, 1.0, 2.0],
            k_nn: 10,
            max_dims: 20,
            epsilon: 1e-7,
            pso: PsoConfig::default(),
            bootstrap_size: None,
            bootstrap_seed: 0,
            p: None,
            p_eval: None,
            export_count: 18,
            output_dir: PathBuf::from("qfda-out"),
        }
    }
}

impl ExperimentConfig {
    /// Builds a config from defaults plus `pairs`. `seed` sets the split,
    /// bootstrap and swarm seeds together; the specific seed keys win.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        let get = |k: &str| pairs.get(k).map(String::as_str);

        if let Some(v) = get("seed") {
            let seed: u64 = parse("seed", v)?;
            cfg.split.seed = seed;
            cfg.bootstrap_seed = seed;
            cfg.pso.seed = seed;
        }

        let kind = get("dataset").unwrap_or("idx");
        cfg.dataset = match kind {
            "idx" => {
                let DatasetSource::Idx { images, labels } = cfg.dataset else { unreachable!() };
                DatasetSource::Idx {
                    images: get("images").map(PathBuf::from).unwrap_or(images),
                    labels: get("labels").map(PathBuf::from).unwrap_or(labels),
                }
            }
            "pgm" => DatasetSource::Pgm {
                dir: PathBuf::from(
                    get("pgm_dir").ok_or_else(|| QfdaError::Config("dataset = pgm needs pgm_dir".into()))?,
                ),
                class_map: get("class_map").map(PathBuf::from),
            },
            other => return Err(QfdaError::Config(format!("dataset must be idx or pgm, got {other:?}"))),
        };

        for (key, value) in pairs {
            let v = value.as_str();
            match key.as_str() {
                "classes" => cfg.classes = parse_list(key, v)?,
                "resample_factor" => cfg.resample_factor = parse(key, v)?,
                "train_fraction" => cfg.split.train_fraction = parse(key, v)?,
                "val_fraction" => cfg.split.val_fraction = parse(key, v)?,
                "test_fraction" => cfg.split.test_fraction = parse(key, v)?,
                "split_seed" => cfg.split.seed = parse(key, v)?,
                "bootstrap_seed" => cfg.bootstrap_seed = parse(key, v)?,
                "pso_seed" => cfg.pso.seed = parse(key, v)?,
                "max_train_samples" => cfg.max_train_samples = parse(key, v)?,
                "gamma_grid" => cfg.gamma_grid = parse_list(key, v)?,
                "lambda_grid" => cfg.lambda_grid = parse_list(key, v)?,
                "gamma" => cfg.pso.gamma = parse(key, v)?,
                "lambda" => cfg.pso.lambda = parse(key, v)?,
                "k_nn" => cfg.k_nn = parse(key, v)?,
                "max_dims" => cfg.max_dims = parse(key, v)?,
                "epsilon" => cfg.epsilon = parse(key, v)?,
                "particles" => cfg.pso.particles = parse(key, v)?,
                "iterations" => cfg.pso.iterations = parse(key, v)?,
                "inertia" => cfg.pso.inertia = parse(key, v)?,
                "cognitive" => cfg.pso.cognitive = parse(key, v)?,
                "social" => cfg.pso.social = parse(key, v)?,
                "bootstrap_size" => cfg.bootstrap_size = Some(parse(key, v)?),
                "p" => cfg.p = Some(parse(key, v)?),
                "p_eval" => cfg.p_eval = Some(parse(key, v)?),
                "export_count" => cfg.export_count = parse(key, v)?,
                "output_dir" => cfg.output_dir = PathBuf::from(v),
                _ => {}
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, resolving relative paths in it against the file's
    /// directory, then applies `overrides` (taken as written).
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| QfdaError::io(path, e))?;
        let mut pairs = parse_config_text(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for key in PATH_KEYS {
            if let Some(v) = pairs.get_mut(key) {
                if Path::new(v.as_str()).is_relative() {
                    *v = base.join(&*v).to_string_lossy().into_owned();
                }
            }
        }
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma_grid.is_empty() || self.lambda_grid.is_empty() {
            return Err(QfdaError::Config("gamma_grid and lambda_grid must be nonempty".into()));
        }
        if let Some(bad) = self
            .gamma_grid
            .iter()
            .chain(&self.lambda_grid)
            .find(|v| !(**v >= 0.0 && v.is_finite()))
        {
            return Err(QfdaError::Config(format!("grid values must be finite and nonnegative, got {bad}")));
        }
        if self.k_nn == 0 || self.max_dims == 0 {
            return Err(QfdaError::Config("k_nn and max_dims must be at least 1".into()));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(QfdaError::Config(format!("epsilon must be nonnegative, got {}", self.epsilon)));
        }
        if self.max_train_samples == 0 {
            return Err(QfdaError::Config("max_train_samples must be at least 1".into()));
        }
        if self.bootstrap_size == Some(0) || self.p == Some(0) || self.p_eval == Some(0) {
            return Err(QfdaError::Config("bootstrap_size, p and p_eval must be at least 1".into()));
        }
        self.split.validate().map_err(|e| QfdaError::Config(e.to_string()))?;
        self.pso.validate()
    }

    /// The config as `key = value` text that parses back to itself.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        match &self.dataset {
            DatasetSource::Idx { images, labels } => {
                line("dataset", "idx".into());
                line("images", images.display().to_string());
                line("labels", labels.display().to_string());
            }
            DatasetSource::Pgm { dir, class_map } => {
                line("dataset", "pgm".into());
                line("pgm_dir", dir.display().to_string());
                if let Some(m) = class_map {
                    line("class_map", m.display().to_string());
                }
            }
        }
        if !self.classes.is_empty() {
            line("classes", format_list(&self.classes));
        }
        line("resample_factor", self.resample_factor.to_string());
        line("train_fraction", self.split.train_fraction.to_string());
        line("val_fraction", self.split.val_fraction.to_string());
        line("test_fraction", self.split.test_fraction.to_string());
        line("split_seed", self.split.seed.to_string());
        line("bootstrap_seed", self.bootstrap_seed.to_string());
        line("pso_seed", self.pso.seed.to_string());
        line("max_train_samples", self.max_train_samples.to_string());
        line("gamma_grid", format_list(&self.gamma_grid));
        line("lambda_grid", format_list(&self.lambda_grid));
        line("gamma", self.pso.gamma.to_string());
        line("lambda", self.pso.lambda.to_string());
        line("k_nn", self.k_nn.to_string());
        line("max_dims", self.max_dims.to_string());
        line("epsilon", self.epsilon.to_string());
        line("particles", self.pso.particles.to_string());
        line("iterations", self.pso.iterations.to_string());
        line("inertia", self.pso.inertia.to_string());
        line("cognitive", self.pso.cognitive.to_string());
        line("social", self.pso.social.to_string());
        if let Some(s) = self.bootstrap_size {
            line("bootstrap_size", s.to_string());
        }
        if let Some(p) = self.p {
            line("p", p.to_string());
        }
        if let Some(p) = self.p_eval {
            line("p_eval", p.to_string());
        }
        line("export_count", self.export_count.to_string());
        line("output_dir", self.output_dir.display().to_string());
        out
    }
}
