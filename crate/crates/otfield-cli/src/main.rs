//! Command-line front end for the surrogate pipeline: build a reference
//! measure, train a model archive, predict with uncertainties, evaluate
//! stage-wise errors, rank hyperparameters, and export plot-ready files.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod config;
mod export;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use otfield::cache::PlanCache;
use otfield::dataset::{load_dataset, write_atomic, Dataset};
use otfield::persist::{load_model, load_reference, save_model, save_reference};
use otfield::pipeline::{self, ErrorDecomposition, GridSpec, PredictOptions, TrainedSurrogate};
use otfield::{Error, ErrorCategory, Result};
use rayon::prelude::*;
use serde::Serialize;

use config::{load_config, FileConfig, Overrides};
use export::ExportData;

#[derive(Parser)]
#[command(
    name = "otfield",
    version,
    about = "Field surrogates on variable-size graphs via transport to a reference measure"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and save the reference measure for a training dataset
    BuildReference(BuildReferenceArgs),
    /// Fit a surrogate on a labelled dataset and save the model archive
    Train(TrainArgs),
    /// Predict signals with per-node uncertainties for every sample
    Predict(PredictArgs),
    /// Report stage-wise errors of a model on a labelled dataset
    Evaluate(EvaluateArgs),
    /// Rank hyperparameter cells by the train reconstruction criterion
    GridSearch(GridSearchArgs),
    /// Write one prediction file per sample in a plotting-friendly format
    Export(ExportArgs),
}

#[derive(Args)]
struct BuildReferenceArgs {
    /// Dataset manifest (JSON)
    #[arg(long)]
    manifest: PathBuf,
    /// Run-config file; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Feature-propagation rounds before embedding
    #[arg(long)]
    wl_iters: Option<usize>,
    /// Seed for projection directions
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads
    #[arg(long)]
    jobs: Option<usize>,
    /// Output reference archive path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest (JSON)
    #[arg(long)]
    manifest: PathBuf,
    /// Run-config file; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Prebuilt reference archive; built from the config when omitted
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Signal field to train (defaults to the dataset's only field)
    #[arg(long)]
    field: Option<String>,
    #[command(flatten)]
    overrides: Overrides,
    /// Directory for cached transport plans
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Worker threads
    #[arg(long)]
    jobs: Option<usize>,
    /// Output model archive path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Trained model archive
    #[arg(long)]
    model: PathBuf,
    /// Dataset manifest (signals optional)
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for cached transport plans
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Also emit the full node covariance per sample (quadratic size)
    #[arg(long)]
    full_covariance: bool,
    /// Worker threads
    #[arg(long)]
    jobs: Option<usize>,
    /// Output JSON path; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Trained model archive
    #[arg(long)]
    model: PathBuf,
    /// Labelled dataset manifest
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for cached transport plans
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Worker threads
    #[arg(long)]
    jobs: Option<usize>,
    /// Optional JSON report path
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridSearchArgs {
    /// Labelled dataset manifest
    #[arg(long)]
    manifest: PathBuf,
    /// Run-config file holding the grid axes
    #[arg(long)]
    config: Option<PathBuf>,
    /// Signal field to score (defaults to the dataset's only field)
    #[arg(long)]
    field: Option<String>,
    /// Seed for projection directions
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for cached transport plans
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Worker threads
    #[arg(long)]
    jobs: Option<usize>,
    /// Optional JSON path for the ranked cells
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Trained model archive
    #[arg(long)]
    model: PathBuf,
    /// Dataset manifest (truth columns appear when it carries the field)
    #[arg(long)]
    manifest: PathBuf,
    /// Output file format
    #[arg(long, value_enum)]
    format: ExportFormat,
    /// Directory for cached transport plans
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Worker threads
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory (one file per sample)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExportFormat {
    /// Tab-separated table: node, coordinates, truth?, prediction, abs_error?, std
    Tabular,
    /// Legacy-ASCII unstructured grid with vertex cells and point data
    GridLegacy,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let code = match e.category() {
            ErrorCategory::Usage => 1,
            ErrorCategory::Data => 2,
            ErrorCategory::Numerical => 3,
        };
        std::process::exit(code);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildReference(args) => cmd_build_reference(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::GridSearch(args) => cmd_grid_search(args),
        Command::Export(args) => cmd_export(args),
    }
}

fn load_config_opt(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(FileConfig::default()),
    }
}

fn setup_jobs(flag: Option<usize>, config: Option<usize>) -> Result<()> {
    if let Some(n) = flag.or(config) {
        if n == 0 {
            return Err(Error::InvalidParameter("--jobs must be at least 1".into()));
        }
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_err()
        {
            log::warn!("worker pool already initialized; --jobs ignored");
        }
    }
    Ok(())
}

fn open_cache(dir: Option<&Path>) -> Result<Option<PlanCache>> {
    dir.map(PlanCache::new).transpose()
}

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

fn resolve_field(flag: Option<String>, config: &FileConfig, dataset: &Dataset) -> Result<String> {
    if let Some(field) = flag.or_else(|| config.field.clone()) {
        if !dataset.fields.contains(&field) {
            return Err(Error::Data {
                sample: None,
                message: format!(
                    "field '{field}' is not in the dataset (available: {})",
                    dataset.fields.join(", ")
                ),
            });
        }
        return Ok(field);
    }
    match dataset.fields.as_slice() {
        [only] => Ok(only.clone()),
        [] => Err(Error::Data {
            sample: None,
            message: "dataset declares no signal fields".into(),
        }),
        many => Err(Error::InvalidParameter(format!(
            "--field is required when the dataset has several fields (available: {})",
            many.join(", ")
        ))),
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("report serialization cannot fail");
    text.push('\n');
    text
}

fn cmd_build_reference(args: BuildReferenceArgs) -> Result<()> {
    let mut config = load_config_opt(args.config.as_deref())?;
    if let Some(h) = args.wl_iters {
        config.train.wl_iterations = h;
    }
    if let Some(seed) = args.seed {
        config.train.swwl.seed = seed;
    }
    setup_jobs(args.jobs, config.jobs)?;
    let dataset = load_dataset(&args.manifest)?;
    let reference = pipeline::prepare_reference(
        &dataset,
        &config.reference,
        config.train.wl_iterations,
        config.train.swwl,
        parent_dir(&args.manifest),
    )?;
    save_reference(&reference, &args.out)?;
    println!(
        "reference '{}': {} support points of dimension {} -> {}",
        reference.provenance().strategy,
        reference.len(),
        reference.dim(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut config = load_config_opt(args.config.as_deref())?;
    args.overrides.apply(&mut config);
    setup_jobs(args.jobs, config.jobs)?;
    let dataset = load_dataset(&args.manifest)?;
    let field = resolve_field(args.field, &config, &dataset)?;
    let cache = open_cache(args.cache_dir.as_deref())?;
    let reference = match &args.reference {
        Some(path) => load_reference(path)?,
        None => pipeline::prepare_reference(
            &dataset,
            &config.reference,
            config.train.wl_iterations,
            config.train.swwl,
            parent_dir(&args.manifest),
        )?,
    };
    let output = pipeline::train(&dataset, &field, &reference, &config.train, cache.as_ref())?;
    save_model(&output.surrogate, &args.out)?;
    let diagnostics = &output.diagnostics;
    println!(
        "trained field '{field}' on {} samples ({} skipped)",
        dataset.len() - diagnostics.skipped.len(),
        diagnostics.skipped.len()
    );
    println!("latent components: {}", output.surrogate.latent_dim());
    println!(
        "train approximation rrmse: {:.6e}",
        diagnostics.approximation.total
    );
    println!("model written to {}", args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct SamplePrediction {
    index: usize,
    signal: Vec<f64>,
    node_std: Vec<f64>,
    coeff_means: Vec<f64>,
    coeff_stds: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    full_covariance: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize)]
struct PredictReport<'a> {
    field: &'a str,
    samples: Vec<SamplePrediction>,
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    setup_jobs(args.jobs, None)?;
    let surrogate = load_model(&args.model)?;
    let dataset = load_dataset(&args.manifest)?;
    let cache = open_cache(args.cache_dir.as_deref())?;
    let options = PredictOptions {
        full_covariance: args.full_covariance,
        cache: cache.as_ref(),
    };
    let samples: Result<Vec<SamplePrediction>> = dataset
        .samples
        .par_iter()
        .enumerate()
        .map(|(index, sample)| {
            let pred = surrogate
                .predict(&sample.graph, &sample.scalars, &options)
                .map_err(|e| e.with_sample(index))?;
            Ok(SamplePrediction {
                index,
                signal: pred.signal.iter().copied().collect(),
                node_std: pred.node_std.iter().copied().collect(),
                coeff_means: pred.coeff_means.iter().copied().collect(),
                coeff_stds: pred.coeff_stds.iter().copied().collect(),
                full_covariance: pred.full_covariance.map(|m| {
                    m.row_iter()
                        .map(|row| row.iter().copied().collect())
                        .collect()
                }),
            })
        })
        .collect();
    let report = PredictReport {
        field: surrogate.field(),
        samples: samples?,
    };
    let json = to_json(&report);
    match &args.out {
        Some(path) => {
            write_atomic(path, json.as_bytes())?;
            println!(
                "predicted {} samples -> {}",
                report.samples.len(),
                path.display()
            );
        }
        None => print!("{json}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct EvaluateReport<'a> {
    field: &'a str,
    #[serde(flatten)]
    decomposition: &'a ErrorDecomposition,
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    setup_jobs(args.jobs, None)?;
    let surrogate = load_model(&args.model)?;
    let dataset = load_dataset(&args.manifest)?;
    let cache = open_cache(args.cache_dir.as_deref())?;
    let decomposition = pipeline::error_decomposition(&surrogate, &dataset, cache.as_ref())?;
    println!("field '{}' on {} samples", surrogate.field(), dataset.len());
    println!(
        "approximation rrmse:          {:.6e}",
        decomposition.approximation.total
    );
    println!(
        "transferred-prediction rrmse: {:.6e}",
        decomposition.transferred_prediction.total
    );
    println!(
        "total rrmse:                  {:.6e}",
        decomposition.total.total
    );
    if let Some(path) = &args.out {
        let report = EvaluateReport {
            field: surrogate.field(),
            decomposition: &decomposition,
        };
        write_atomic(path, to_json(&report).as_bytes())?;
    }
    Ok(())
}

fn cmd_grid_search(args: GridSearchArgs) -> Result<()> {
    let mut config = load_config_opt(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.train.swwl.seed = seed;
    }
    setup_jobs(args.jobs, config.jobs)?;
    let dataset = load_dataset(&args.manifest)?;
    let field = resolve_field(args.field, &config, &dataset)?;
    let cache = open_cache(args.cache_dir.as_deref())?;
    let spec = config.grid.clone().unwrap_or_else(|| GridSpec {
        lambdas: vec![1e-4, 1e-3, 1e-2],
        wl_iterations: vec![config.train.wl_iterations],
        references: vec![config.reference.clone()],
    });
    let cells = pipeline::grid_search(
        &dataset,
        &field,
        &spec,
        &config.train.sinkhorn,
        config.train.swwl,
        parent_dir(&args.manifest),
        cache.as_ref(),
    )?;
    println!(
        "{:<5} {:<10} {:<4} {:<36} criterion",
        "rank", "lambda", "wl", "reference"
    );
    for (rank, cell) in cells.iter().enumerate() {
        let score = match (&cell.criterion, &cell.failure) {
            (Some(c), _) => format!("{c:.6e}"),
            (None, Some(reason)) => format!("failed: {reason}"),
            (None, None) => "failed".into(),
        };
        println!(
            "{:<5} {:<10} {:<4} {:<36} {score}",
            rank + 1,
            format!("{:e}", cell.lambda),
            cell.wl_iterations,
            cell.reference
        );
    }
    if let Some(path) = &args.out {
        write_atomic(path, to_json(&cells).as_bytes())?;
    }
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<()> {
    setup_jobs(args.jobs, None)?;
    let surrogate = load_model(&args.model)?;
    let dataset = load_dataset(&args.manifest)?;
    let cache = open_cache(args.cache_dir.as_deref())?;
    fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    let options = PredictOptions {
        full_covariance: false,
        cache: cache.as_ref(),
    };
    let files: Result<Vec<PathBuf>> = dataset
        .samples
        .par_iter()
        .enumerate()
        .map(|(index, sample)| {
            let path = export_one(&surrogate, &options, args.format, &args.out, index, sample)?;
            Ok(path)
        })
        .collect();
    let files = files?;
    println!("wrote {} files to {}", files.len(), args.out.display());
    Ok(())
}

fn export_one(
    surrogate: &TrainedSurrogate,
    options: &PredictOptions<'_>,
    format: ExportFormat,
    out_dir: &Path,
    index: usize,
    sample: &otfield::dataset::Sample,
) -> Result<PathBuf> {
    let pred = surrogate
        .predict(&sample.graph, &sample.scalars, options)
        .map_err(|e| e.with_sample(index))?;
    let truth = sample
        .signals
        .get(surrogate.field())
        .map(|signal| signal.values());
    let data = ExportData {
        coords: sample.graph.features(),
        truth,
        signal: &pred.signal,
        std: &pred.node_std,
    };
    let (name, text) = match format {
        ExportFormat::Tabular => (format!("sample_{index}.tsv"), export::tabular(&data)),
        ExportFormat::GridLegacy => (
            format!("sample_{index}.vtk"),
            export::grid_legacy(&data, &format!("{} sample {index}", surrogate.field())),
        ),
    };
    let path = out_dir.join(name);
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}
