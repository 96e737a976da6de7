//! End-to-end experiment: ingest, split, transform, optimize, evaluate and
//! report.

mod config;
mod eval;
mod export;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{parse_config_text, parse_override, DatasetSource, ExperimentConfig};
pub use eval::{evaluate_subspace, knn_error, EvalReport, Method, SplitName};
pub use export::{clamp_to_gray, export_eigenfaces, export_quantized_images, normalize_to_gray, QuantizedExport};

use crate::data::{
    center, center_with, limit_indices, load_idx, load_pgm_dir, load_pgm_dir_with_map, resample, stratified_split,
    ClassMap, RawImageSet, SplitIndices,
};
use crate::dct::{forward_dct, write_spectrum, BlockLayout, SpectrumSet, FREQUENCIES};
use crate::discriminant::{plain_scatters, quantized_scatters, read_subspace, solve_subspace, write_subspace, Subspace};
use crate::error::{QfdaError, Result};
use crate::optimizer::{run_pso, trace_csv, CostBreakdown, CostContext, PsoConfig, PsoResult, SubspaceSettings};
use crate::quantizer::{estimate_bounds, quantize, BoundVector, LevelVector, QuantizerSpec};
use crate::rate::{fit_density, rate, FrequencyDensity};

/// Everything derived from the raw data before any optimization.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: SpectrumSet,
    pub val: SpectrumSet,
    pub test: SpectrumSet,
    /// Training mean image, subtracted from every split before the DCT.
    pub mean_image: Vec<f64>,
    /// Indices into the loaded (class-filtered, resampled) dataset.
    pub indices: SplitIndices,
    pub bounds: BoundVector,
    pub density: FrequencyDensity,
}

/// Loads the configured dataset, keeps the configured classes and resamples.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<RawImageSet> {
    let raw = match &cfg.dataset {
        DatasetSource::Idx { images, labels } => load_idx(images, labels)?,
        DatasetSource::Pgm { dir, class_map: None } => load_pgm_dir(dir)?,
        DatasetSource::Pgm {
            dir,
            class_map: Some(map),
        } => load_pgm_dir_with_map(dir, &ClassMap::load(map)?)?,
    };
    let raw = if cfg.classes.is_empty() {
        raw
    } else {
        raw.select_classes(&cfg.classes)?
    };
    resample(&raw, cfg.resample_factor)
}

/// Split, subsample the training part, center on the training mean, DCT,
/// and estimate bounds and densities from the training spectra.
///
/// Also switches faer to sequential kernels so that results do not depend
/// on the thread count; parallelism comes from running swarm particles and
/// grid cells concurrently.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    faer::set_global_parallelism(faer::Par::Seq);
    let data = load_dataset(cfg)?;
    let split = stratified_split(&data, &cfg.split)?;
    let keep = limit_indices(&split.train.labels, cfg.max_train_samples, cfg.split.seed);
    let train_raw = split.train.select(&keep)?;
    let mut indices = split.indices;
    indices.train = keep.iter().map(|&i| indices.train[i]).collect();

    let centered = center(&train_raw);
    let mean_image = centered.mean_image.clone();
    let train = forward_dct(&centered);
    let val = forward_dct(&center_with(&split.val, &mean_image, "val"));
    let test = forward_dct(&center_with(&split.test, &mean_image, "test"));

    let s = cfg.bootstrap_size.unwrap_or_else(|| train.len().min(100));
    let bounds = estimate_bounds(&train, s, cfg.bootstrap_seed)?;
    let density = fit_density(&train, s, cfg.bootstrap_seed)?;
    log::info!(
        "prepared {} train / {} val / {} test images, d' = {}",
        train.len(),
        val.len(),
        test.len(),
        train.d_prime()
    );
    Ok(Prepared {
        train,
        val,
        test,
        mean_image,
        indices,
        bounds,
        density,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| QfdaError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| QfdaError::io(dir, e))
}

/// Writes the split indices, the three spectra, the mean image and the
/// bounds into `dir`.
pub fn write_prepared(prep: &Prepared, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    prep.indices.write(dir)?;
    for (name, set) in [("train", &prep.train), ("val", &prep.val), ("test", &prep.test)] {
        write_spectrum(&dir.join(format!("spectrum_{name}.qspc")), set)?;
    }
    let mean: String = prep.mean_image.iter().map(|v| format!("{v}\n")).collect();
    write_text(&dir.join("mean_image.txt"), &mean)?;
    let mut bounds = String::from("k,ell_k\n");
    for (k, l) in prep.bounds.ell.iter().enumerate() {
        let _ = writeln!(bounds, "{k},{l}");
    }
    write_text(&dir.join("bounds.csv"), &bounds)
}

/// `k,m_k` rows.
pub fn levels_csv(m: &LevelVector) -> String {
    let mut out = String::from("k,m_k\n");
    for (k, v) in m.m.iter().enumerate() {
        let _ = writeln!(out, "{k},{v}");
    }
    out
}

pub fn parse_levels_csv(text: &str) -> Result<LevelVector> {
    let values: Vec<u32> = text
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .nth(1)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| QfdaError::Format(format!("bad levels row {l:?}")))
        })
        .collect::<Result<_>>()?;
    let m: [u32; FREQUENCIES] = values
        .try_into()
        .map_err(|v: Vec<u32>| QfdaError::Format(format!("expected 64 level rows, got {}", v.len())))?;
    Ok(LevelVector { m })
}

/// Subspace sizes for a `d'`-dimensional problem under `cfg`.
pub fn subspace_settings(cfg: &ExperimentConfig, d_prime: usize) -> SubspaceSettings {
    let p = cfg.p.unwrap_or_else(|| cfg.max_dims.min(d_prime));
    SubspaceSettings {
        epsilon: cfg.epsilon,
        p,
        p_eval: cfg.p_eval.unwrap_or(p),
    }
}

/// One (γ, λ) pair of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub gamma: f64,
    pub lambda: f64,
    pub val_report: EvalReport,
    pub best_m: LevelVector,
    pub cost: CostBreakdown,
}

#[derive(Debug, Clone)]
pub struct CellRun {
    pub cell: GridCell,
    pub pso: PsoResult,
    pub subspace: Subspace,
}

#[derive(Serialize)]
struct CellSummary<'a> {
    gamma: f64,
    lambda: f64,
    cost: CostBreakdown,
    val_mean_error: f64,
    val_std_error: f64,
    levels: &'a [u32],
}

/// Runs the swarm for one (γ, λ) and scores its best level vector on the
/// validation split.
pub fn optimize_cell(prep: &Prepared, cfg: &ExperimentConfig, gamma: f64, lambda: f64) -> Result<CellRun> {
    let settings = subspace_settings(cfg, prep.train.d_prime());
    let ctx = CostContext::new(
        prep.train.clone(),
        prep.bounds.clone(),
        prep.density.clone(),
        settings,
        gamma,
        lambda,
    )?;
    let pso_cfg = PsoConfig {
        gamma,
        lambda,
        ..cfg.pso.clone()
    };
    let pso = run_pso(&ctx, &pso_cfg)?;
    let (_, subspace) = ctx.subspace_for(&pso.best)?;
    let val_report = evaluate_subspace(
        &subspace,
        &prep.train,
        &prep.val,
        cfg.k_nn,
        cfg.max_dims,
        SplitName::Val,
        Method::Qfda,
    )?;
    log::info!(
        "cell gamma = {gamma}, lambda = {lambda}: cost {}, {} evaluations, val error {:.4}",
        pso.breakdown.total,
        ctx.evaluations(),
        val_report.mean
    );
    Ok(CellRun {
        cell: GridCell {
            gamma,
            lambda,
            val_report,
            best_m: pso.best,
            cost: pso.breakdown,
        },
        pso,
        subspace,
    })
}

pub fn cell_dir(output_dir: &Path, gamma: f64, lambda: f64) -> PathBuf {
    output_dir.join("cells").join(format!("gamma_{gamma}_lambda_{lambda}"))
}

fn write_cell(dir: &Path, run: &CellRun) -> Result<()> {
    create_dir(dir)?;
    let cell = &run.cell;
    write_text(&dir.join("trace.csv"), &trace_csv(&run.pso.trace))?;
    write_text(&dir.join("levels.csv"), &levels_csv(&cell.best_m))?;
    write_text(&dir.join(cell.val_report.file_name()), &cell.val_report.to_csv())?;
    let summary = CellSummary {
        gamma: cell.gamma,
        lambda: cell.lambda,
        cost: cell.cost,
        val_mean_error: cell.val_report.mean,
        val_std_error: cell.val_report.std,
        levels: &cell.best_m.m,
    };
    write_json(&dir.join("cell.json"), &summary)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| QfdaError::Format(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub split: SplitName,
    pub mean: f64,
    pub std: f64,
    pub truncated: bool,
}

/// Structured description of a trained model; the directions themselves
/// live in `subspace_file` next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub method: Method,
    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    pub epsilon: f64,
    pub p: usize,
    pub d_prime: usize,
    pub layout: BlockLayout,
    pub route: String,
    pub bounds: Vec<u32>,
    pub bootstrap_seed: u64,
    pub bootstrap_size: usize,
    pub levels: Option<Vec<u32>>,
    pub cost: Option<CostBreakdown>,
    pub average_rate: Option<f64>,
    pub eigenvalues: Vec<f64>,
    pub subspace_file: String,
    pub errors: Vec<ErrorSummary>,
}

impl ModelFile {
    pub fn levels(&self) -> Result<Option<LevelVector>> {
        self.levels
            .as_ref()
            .map(|v| {
                let m: [u32; FREQUENCIES] = v
                    .clone()
                    .try_into()
                    .map_err(|_| QfdaError::Format(format!("model has {} levels, expected 64", v.len())))?;
                Ok(LevelVector { m })
            })
            .transpose()
    }

    pub fn bound_vector(&self) -> Result<BoundVector> {
        let ell: [u32; FREQUENCIES] = self
            .bounds
            .clone()
            .try_into()
            .map_err(|_| QfdaError::Format(format!("model has {} bounds, expected 64", self.bounds.len())))?;
        Ok(BoundVector {
            ell,
            bootstrap_seed: self.bootstrap_seed,
            bootstrap_size: self.bootstrap_size,
        })
    }
}

pub const MODEL_FILE: &str = "model.json";
pub const SUBSPACE_FILE: &str = "subspace.bin";

/// A trained subspace with its evaluation on every split.
#[derive(Debug, Clone)]
pub struct FinalModel {
    pub model: ModelFile,
    pub subspace: Subspace,
    pub reports: Vec<EvalReport>,
}

fn evaluate_all(cfg: &ExperimentConfig, prep: &Prepared, subspace: &Subspace, method: Method) -> Result<Vec<EvalReport>> {
    SplitName::ALL
        .iter()
        .map(|&split| {
            let eval = match split {
                SplitName::Train => &prep.train,
                SplitName::Val => &prep.val,
                SplitName::Test => &prep.test,
            };
            evaluate_subspace(subspace, &prep.train, eval, cfg.k_nn, cfg.max_dims, split, method)
        })
        .collect()
}

fn write_model(dir: &Path, model: &FinalModel) -> Result<()> {
    create_dir(dir)?;
    write_subspace(&dir.join(&model.model.subspace_file), &model.subspace)?;
    write_json(&dir.join(MODEL_FILE), &model.model)
}

fn write_reports(dir: &Path, reports: &[EvalReport]) -> Result<()> {
    for r in reports {
        write_text(&dir.join(r.file_name()), &r.to_csv())?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn model_file(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    subspace: &Subspace,
    method: Method,
    gamma_lambda: Option<(f64, f64)>,
    levels: Option<&LevelVector>,
    cost: Option<CostBreakdown>,
    average_rate: Option<f64>,
    reports: &[EvalReport],
) -> ModelFile {
    ModelFile {
        method,
        gamma: gamma_lambda.map(|g| g.0),
        lambda: gamma_lambda.map(|g| g.1),
        epsilon: cfg.epsilon,
        p: subspace.p(),
        d_prime: subspace.d_prime(),
        layout: prep.train.layout,
        route: format!("{:?}", subspace.route).to_lowercase(),
        bounds: prep.bounds.ell.to_vec(),
        bootstrap_seed: prep.bounds.bootstrap_seed,
        bootstrap_size: prep.bounds.bootstrap_size,
        levels: levels.map(|m| m.m.to_vec()),
        cost,
        average_rate,
        eigenvalues: subspace.eigenvalues.clone(),
        subspace_file: SUBSPACE_FILE.into(),
        errors: reports
            .iter()
            .map(|r| ErrorSummary {
                split: r.split,
                mean: r.mean,
                std: r.std,
                truncated: r.truncated,
            })
            .collect(),
    }
}

/// Retrains the QFDA subspace for `levels` on the training split, evaluates
/// it on all splits and writes the model, errors, levels, rate and `trace`
/// into `dir`.
pub fn finalize_qfda(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    levels: &LevelVector,
    gamma: f64,
    lambda: f64,
    pso: &PsoResult,
    dir: &Path,
) -> Result<FinalModel> {
    let spec = QuantizerSpec::new(prep.bounds.clone(), *levels)?;
    let quantized = quantize(&prep.train, &spec);
    let pair = quantized_scatters(&prep.train, &quantized, lambda)?;
    let settings = subspace_settings(cfg, prep.train.d_prime());
    let subspace = solve_subspace(&pair, settings.p, settings.epsilon)?;
    let reports = evaluate_all(cfg, prep, &subspace, Method::Qfda)?;
    let rate_report = rate(&prep.density, &spec);
    let model = FinalModel {
        model: model_file(
            cfg,
            prep,
            &subspace,
            Method::Qfda,
            Some((gamma, lambda)),
            Some(levels),
            Some(pso.breakdown),
            Some(rate_report.average),
            &reports,
        ),
        subspace,
        reports,
    };
    create_dir(dir)?;
    write_model(dir, &model)?;
    write_reports(dir, &model.reports)?;
    write_text(&dir.join("levels.csv"), &levels_csv(levels))?;
    write_text(&dir.join("rate.csv"), &rate_report.to_csv())?;
    write_text(&dir.join("trace.csv"), &trace_csv(&pso.trace))?;
    Ok(model)
}

/// Swarm search for the configured (γ, λ), then the final model in
/// `cfg.output_dir`.
pub fn run_optimize(cfg: &ExperimentConfig, prep: &Prepared) -> Result<FinalModel> {
    let (gamma, lambda) = (cfg.pso.gamma, cfg.pso.lambda);
    let run = optimize_cell(prep, cfg, gamma, lambda)?;
    finalize_qfda(cfg, prep, &run.cell.best_m, gamma, lambda, &run.pso, &cfg.output_dir)
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    /// Row-major over (γ, λ) in configuration order.
    pub cells: Vec<GridCell>,
    pub chosen: (f64, f64),
    pub model: FinalModel,
}

/// Index of the cell with the lowest validation mean error; ties go to the
/// smaller γ, then the smaller λ.
pub fn choose_cell(cells: &[GridCell]) -> Option<usize> {
    (0..cells.len()).min_by(|&a, &b| {
        let (x, y) = (&cells[a], &cells[b]);
        x.val_report
            .mean
            .total_cmp(&y.val_report.mean)
            .then(x.gamma.total_cmp(&y.gamma))
            .then(x.lambda.total_cmp(&y.lambda))
    })
}

/// Rows are γ values, columns λ values; failed cells are `NA`.
fn grid_table(cfg: &ExperimentConfig, cells: &[Option<&GridCell>], value: impl Fn(&GridCell) -> f64) -> String {
    let mut out = String::from("gamma\\lambda");
    for l in &cfg.lambda_grid {
        let _ = write!(out, ",{l}");
    }
    out.push('\n');
    for (i, g) in cfg.gamma_grid.iter().enumerate() {
        let _ = write!(out, "{g}");
        for j in 0..cfg.lambda_grid.len() {
            match cells[i * cfg.lambda_grid.len() + j] {
                Some(c) => {
                    let _ = write!(out, ",{}", value(c));
                }
                None => out.push_str(",NA"),
            }
        }
        out.push('\n');
    }
    out
}

/// Runs every (γ, λ) cell, picks the best on validation and retrains it as
/// the final model. Cell outputs land in per-cell subdirectories; the grid
/// tables are written even when some cells fail.
pub fn run_grid(cfg: &ExperimentConfig, prep: &Prepared) -> Result<GridOutcome> {
    let out = &cfg.output_dir;
    create_dir(out)?;
    let pairs: Vec<(f64, f64)> = cfg
        .gamma_grid
        .iter()
        .flat_map(|&g| cfg.lambda_grid.iter().map(move |&l| (g, l)))
        .collect();
    let runs: Vec<Result<CellRun>> = pairs
        .par_iter()
        .map(|&(g, l)| {
            let run = optimize_cell(prep, cfg, g, l)?;
            write_cell(&cell_dir(out, g, l), &run)?;
            Ok(run)
        })
        .collect();

    let ok: Vec<Option<&GridCell>> = runs.iter().map(|r| r.as_ref().ok().map(|r| &r.cell)).collect();
    write_text(&out.join("grid.csv"), &grid_table(cfg, &ok, |c| c.val_report.mean))?;
    write_text(&out.join("grid_std.csv"), &grid_table(cfg, &ok, |c| c.val_report.std))?;

    let mut done = Vec::with_capacity(runs.len());
    for (run, (g, l)) in runs.into_iter().zip(&pairs) {
        match run {
            Ok(r) => done.push(r),
            Err(e) => {
                return Err(QfdaError::Optimization(format!(
                    "grid cell gamma = {g}, lambda = {l} failed: {e}"
                )))
            }
        }
    }
    let cells: Vec<GridCell> = done.iter().map(|r| r.cell.clone()).collect();
    let best = choose_cell(&cells).expect("grids are nonempty");
    let chosen = &done[best];
    let (g, l) = (chosen.cell.gamma, chosen.cell.lambda);
    log::info!("chose gamma = {g}, lambda = {l}");
    let model = finalize_qfda(cfg, prep, &chosen.cell.best_m, g, l, &chosen.pso, out)?;
    Ok(GridOutcome {
        cells,
        chosen: (g, l),
        model,
    })
}

pub const BASELINE_DIR: &str = "fda";

/// FDA on the non-quantized training spectra, evaluated on all splits.
/// Errors go to `cfg.output_dir`, the model to its `fda` subdirectory.
pub fn run_baseline_fda(cfg: &ExperimentConfig, prep: &Prepared) -> Result<FinalModel> {
    let pair = plain_scatters(&prep.train)?;
    let settings = subspace_settings(cfg, prep.train.d_prime());
    let subspace = solve_subspace(&pair, settings.p, settings.epsilon)?;
    let reports = evaluate_all(cfg, prep, &subspace, Method::Fda)?;
    let model = FinalModel {
        model: model_file(cfg, prep, &subspace, Method::Fda, None, None, None, None, &reports),
        subspace,
        reports,
    };
    create_dir(&cfg.output_dir)?;
    write_reports(&cfg.output_dir, &model.reports)?;
    write_model(&cfg.output_dir.join(BASELINE_DIR), &model)?;
    Ok(model)
}

pub fn load_model(dir: &Path) -> Result<(ModelFile, Subspace)> {
    let path = dir.join(MODEL_FILE);
    let text = fs::read_to_string(&path).map_err(|e| QfdaError::io(&path, e))?;
    let model: ModelFile =
        serde_json::from_str(&text).map_err(|e| QfdaError::Format(format!("{}: {e}", path.display())))?;
    let subspace = read_subspace(&dir.join(&model.subspace_file))?;
    if subspace.d_prime() != model.d_prime || subspace.p() != model.p {
        return Err(QfdaError::Consistency(format!(
            "{}: subspace is {}x{}, model says {}x{}",
            dir.display(),
            subspace.d_prime(),
            subspace.p(),
            model.d_prime,
            model.p
        )));
    }
    Ok((model, subspace))
}

/// Evaluates a saved model on all splits of `prep`.
pub fn evaluate_model(cfg: &ExperimentConfig, prep: &Prepared, dir: &Path) -> Result<Vec<EvalReport>> {
    let (model, subspace) = load_model(dir)?;
    if model.d_prime != prep.train.d_prime() {
        return Err(QfdaError::Dimension(format!(
            "model has d' = {}, data {}",
            model.d_prime,
            prep.train.d_prime()
        )));
    }
    evaluate_all(cfg, prep, &subspace, model.method)
}

/// Plain-text summary of whatever results exist in `dir`.
pub fn render_report(dir: &Path) -> Result<String> {
    let mut out = String::new();
    let grid = dir.join("grid.csv");
    if grid.exists() {
        let text = fs::read_to_string(&grid).map_err(|e| QfdaError::io(&grid, e))?;
        let _ = writeln!(out, "validation mean error (rows gamma, columns lambda)");
        for line in text.lines() {
            let cells: Vec<String> = line.split(',').map(|c| format!("{c:>12}")).collect();
            let _ = writeln!(out, "{}", cells.join(" "));
        }
        out.push('\n');
    }
    let mut found = false;
    for model_dir in [dir.to_path_buf(), dir.join(BASELINE_DIR)] {
        if !model_dir.join(MODEL_FILE).exists() {
            continue;
        }
        found = true;
        let (model, _) = load_model(&model_dir)?;
        let _ = write!(out, "{}", model.method.as_str());
        if let (Some(g), Some(l)) = (model.gamma, model.lambda) {
            let _ = write!(out, " (gamma = {g}, lambda = {l})");
        }
        let _ = writeln!(out, ": p = {}, route {}", model.p, model.route);
        for e in &model.errors {
            let _ = writeln!(
                out,
                "  {:<5} {:.4} +- {:.4}{}",
                e.split.as_str(),
                e.mean,
                e.std,
                if e.truncated { " (truncated)" } else { "" }
            );
        }
        if let Some(levels) = model.levels()? {
            let mean = |r: std::ops::Range<usize>| {
                let n = r.len() as f64;
                r.map(|k| levels.m[k] as f64).sum::<f64>() / n
            };
            let _ = writeln!(
                out,
                "  mean levels: frequencies 0-7 {:.2}, 56-63 {:.2}",
                mean(0..8),
                mean(56..64)
            );
        }
        if let Some(c) = model.cost {
            let _ = writeln!(out, "  cost {} (criterion {}, rate {})", c.total, c.criterion, c.rate);
        }
    }
    if !found && !grid.exists() {
        return Err(QfdaError::Data(format!("{}: no results to report", dir.display())));
    }
    Ok(out)
}
