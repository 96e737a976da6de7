use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use qfda::experiment::{
    evaluate_model, export_eigenfaces, export_quantized_images, load_model, parse_override, prepare, render_report,
    run_baseline_fda, run_grid, run_optimize, write_prepared, EvalReport, ExperimentConfig,
};

#[derive(Parser, Debug)]
#[command(name = "qfda", version, about = "Quantized Fisher discriminant analysis experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Sets the split, bootstrap and swarm seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load, split and transform the data; write the cache.
    Prepare,
    /// Swarm search for one (gamma, lambda) and the resulting model.
    Optimize {
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Search the gamma x lambda grid and retrain the best cell.
    Grid,
    /// Plain FDA on the non-quantized spectra.
    Baseline,
    /// Re-evaluate a saved model on all splits.
    Evaluate {
        /// Directory holding model.json (default: the output directory).
        #[arg(long)]
        model_dir: Option<PathBuf>,
    },
    /// Render the leading directions of a saved model as PGM images.
    ExportEigenfaces {
        #[arg(long)]
        model_dir: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Write original, centered and quantized training images.
    ExportQuantized {
        #[arg(long)]
        model_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Summarize results in the output directory.
    Report,
}

fn load_config(global: &Global, extra: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut overrides = Vec::new();
    if let Some(seed) = global.seed {
        overrides.push(("seed".to_string(), seed.to_string()));
    }
    if let Some(dir) = &global.output_dir {
        overrides.push(("output_dir".to_string(), dir.display().to_string()));
    }
    for s in &global.set {
        overrides.push(parse_override(s)?);
    }
    overrides.extend_from_slice(extra);
    let cfg = match &global.config {
        Some(path) => ExperimentConfig::load(path, &overrides)?,
        None => ExperimentConfig::from_pairs(&overrides.into_iter().collect())?,
    };
    Ok(cfg)
}

fn save_config(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let path = cfg.output_dir.join("config.txt");
    fs::write(&path, cfg.to_text()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn print_reports(reports: &[EvalReport]) {
    for r in reports {
        println!(
            "{:<5} {:<5} mean {:.4} std {:.4}{}",
            r.method.as_str(),
            r.split.as_str(),
            r.mean,
            r.std,
            if r.truncated { " (truncated)" } else { "" }
        );
    }
}

fn model_dir(arg: &Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    arg.clone().unwrap_or_else(|| cfg.output_dir.clone())
}

fn write_reports(dir: &Path, reports: &[EvalReport]) -> Result<()> {
    for r in reports {
        let path = dir.join(r.file_name());
        fs::write(&path, r.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut extra = Vec::new();
    if let Command::Optimize { gamma, lambda } = &cli.command {
        if let Some(g) = gamma {
            extra.push(("gamma".to_string(), g.to_string()));
        }
        if let Some(l) = lambda {
            extra.push(("lambda".to_string(), l.to_string()));
        }
    }
    let cfg = load_config(&cli.global, &extra)?;
    if let Some(n) = cli.global.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }

    match &cli.command {
        Command::Prepare => {
            let prep = prepare(&cfg)?;
            save_config(&cfg)?;
            write_prepared(&prep, &cfg.output_dir)?;
            println!(
                "{} train / {} val / {} test images, d' = {}",
                prep.train.len(),
                prep.val.len(),
                prep.test.len(),
                prep.train.d_prime()
            );
        }
        Command::Optimize { .. } => {
            let prep = prepare(&cfg)?;
            save_config(&cfg)?;
            let model = run_optimize(&cfg, &prep)?;
            print_reports(&model.reports);
        }
        Command::Grid => {
            let prep = prepare(&cfg)?;
            save_config(&cfg)?;
            let outcome = run_grid(&cfg, &prep)?;
            println!("chose gamma = {}, lambda = {}", outcome.chosen.0, outcome.chosen.1);
            print_reports(&outcome.model.reports);
        }
        Command::Baseline => {
            let prep = prepare(&cfg)?;
            save_config(&cfg)?;
            let model = run_baseline_fda(&cfg, &prep)?;
            print_reports(&model.reports);
        }
        Command::Evaluate { model_dir: dir } => {
            let prep = prepare(&cfg)?;
            let dir = model_dir(dir, &cfg);
            let reports = evaluate_model(&cfg, &prep, &dir)?;
            write_reports(&dir, &reports)?;
            print_reports(&reports);
        }
        Command::ExportEigenfaces { model_dir: dir, count } => {
            let dir = model_dir(dir, &cfg);
            let (model, subspace) = load_model(&dir)?;
            let count = count.unwrap_or(cfg.export_count).min(subspace.p());
            let out = cfg.output_dir.join("eigenfaces");
            let files = export_eigenfaces(&subspace, model.layout, count, &out)?;
            println!("wrote {} images to {}", files.len(), out.display());
        }
        Command::ExportQuantized { model_dir: dir, count } => {
            let prep = prepare(&cfg)?;
            let dir = model_dir(dir, &cfg);
            let (model, _) = load_model(&dir)?;
            let Some(levels) = model.levels()? else {
                bail!("{} holds an FDA model without quantization levels", dir.display());
            };
            let out = cfg.output_dir.join("quantized");
            let files =
                export_quantized_images(&prep.train, &levels, &model.bound_vector()?, &prep.mean_image, *count, &out)?;
            println!("wrote {} samples to {}", files.len(), out.display());
        }
        Command::Report => {
            let text = render_report(&cfg.output_dir)?;
            let path = cfg.output_dir.join("report.txt");
            fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
