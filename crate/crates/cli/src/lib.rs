//! The `graformer` command line: synthetic data generation, training,
//! evaluation, parameter inspection and heatmap export.
//!
//! Commands write their human-readable report to the supplied writer so the
//! same entry point serves the binary and the tests.

pub mod config;
pub mod viz;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use graformer::data::{generate_synthetic, read_header, Dataset, SyntheticCamera};
use graformer::graph::{chebyshev_basis, normalized_adjacency};
use graformer::training::{evaluate_per_sample, mpjpe, train_with, TrainOutputs};
use graformer::{DenseMatrix, Error, GraFormer, SkeletonGraph};
use serde::Serialize;

use config::{resolve_skeleton, ConfigFile, ModelOverrides, RunConfig, TrainOverrides};

/// Exit status and message of a failed command.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub const USAGE: i32 = 2;
    pub const NUMERICAL: i32 = 3;

    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: Self::USAGE,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } => Self {
                code: Self::NUMERICAL,
                message: format!("numerical failure: {e}"),
            },
            other => Self::usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::usage(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "graformer", version, about = "GraFormer 2D-to-3D pose lifting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    Gen(GenArgs),
    /// Train a model; writes checkpoints, a log and the effective config.
    Train(TrainArgs),
    /// Report MPJPE of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Print trainable parameter counts.
    Inspect(InspectArgs),
    /// Export adjacency and Chebyshev matrices as CSV and PGM heatmaps.
    #[command(name = "export-viz")]
    ExportViz(ExportVizArgs),
}

/// Flags accepted by every command.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON file with settings; explicit flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file (gen, eval, inspect) or directory (train, export-viz).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value = "human16")]
    pub skeleton: String,
    #[arg(long)]
    pub count: usize,
    /// Focal length in pixels.
    #[arg(long, default_value_t = 1000.0)]
    pub focal: f64,
    /// Root depth in millimeters.
    #[arg(long, default_value_t = 5000.0)]
    pub depth: f64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelOverrides,
    #[command(flatten)]
    pub train: TrainOverrides,
    /// Print only the final summary.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Score the targets against themselves instead of model predictions.
    #[arg(long)]
    pub identity_check: bool,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Inspect a saved model instead of a configuration.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelOverrides,
}

#[derive(Debug, Clone, Args)]
pub struct ExportVizArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Saved model; a freshly initialized one is used when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelOverrides,
    /// Heatmap pixels per matrix cell.
    #[arg(long, default_value_t = 8)]
    pub cell_size: usize,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                write!(out, "{e}")?;
                return Ok(());
            }
            return Err(CliError::usage(e.render().to_string()));
        }
    };
    match cli.command {
        Command::Gen(a) => cmd_gen(&a, out),
        Command::Train(a) => cmd_train(&a, out).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a, out).map(|_| ()),
        Command::Inspect(a) => cmd_inspect(&a, out).map(|_| ()),
        Command::ExportViz(a) => cmd_export_viz(&a, out).map(|_| ()),
    }
}

fn seed_of(common: &CommonArgs, file: &ConfigFile) -> u64 {
    common.seed.or(file.seed).unwrap_or(0)
}

pub fn cmd_gen(args: &GenArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if args.count == 0 {
        return Err(CliError::usage("--count must be at least 1"));
    }
    let file = ConfigFile::load_optional(args.common.config.as_deref())?;
    let path = args
        .common
        .out
        .clone()
        .ok_or_else(|| CliError::usage("gen requires --out <file>"))?;
    let skeleton = resolve_skeleton(&args.skeleton)?;
    let camera = SyntheticCamera {
        focal: args.focal,
        depth_mm: args.depth,
        ..SyntheticCamera::default()
    };
    let data = generate_synthetic(&skeleton, args.count, seed_of(&args.common, &file), &camera)?;
    data.save(&path)
        .map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))?;
    writeln!(out, "wrote {} samples to {}", data.len(), path.display())?;
    Ok(())
}

/// Loads a dataset and checks it against `skeleton` (or the header's preset).
fn load_dataset(path: &Path, skeleton: Option<&SkeletonGraph>) -> Result<Dataset, CliError> {
    let (j, name) = read_header(path)?;
    let skeleton = match skeleton {
        Some(s) => s.clone(),
        None => SkeletonGraph::preset(&name).ok_or_else(|| {
            CliError::usage(format!(
                "{}: skeleton `{name}` is not a preset; pass --skeleton <file>",
                path.display()
            ))
        })?,
    };
    if skeleton.joint_count() != j {
        return Err(CliError::usage(format!(
            "{}: dataset has {j} joints but skeleton `{}` has {}",
            path.display(),
            skeleton.name(),
            skeleton.joint_count()
        )));
    }
    Ok(Dataset::load(path, &skeleton)?)
}

/// Worker threads allowed by `GRFK_THREADS`; batch prefetch needs two.
fn prefetch_depth() -> usize {
    let threads = std::env::var("GRFK_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads >= 2 {
        2
    } else {
        0
    }
}

/// Result of a training command.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub run: RunConfig,
    pub final_loss: f64,
    pub final_eval_mpjpe_mm: f64,
    pub best_eval_mpjpe_mm: Option<f64>,
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<TrainSummary, CliError> {
    let file = ConfigFile::load_optional(args.common.config.as_deref())?;
    let model_o = args.model.over(&file.model);
    let train_o = args.train.over(&file.train);
    let seed = seed_of(&args.common, &file);
    let data_path = train_o
        .data
        .clone()
        .ok_or_else(|| CliError::usage("train requires --data <file>"))?;
    let skeleton = model_o
        .skeleton
        .as_deref()
        .map(resolve_skeleton)
        .transpose()?;
    let full = load_dataset(&data_path, skeleton.as_ref())?;
    let model_config = model_o.resolve(full.skeleton.clone())?;
    let train_config = train_o.resolve(seed)?;
    let holdout = train_o.holdout.unwrap_or(0);
    let (train_set, eval_set) = match (&train_o.eval_data, holdout) {
        (Some(p), _) => (full, Some(load_dataset(p, Some(&model_config.skeleton))?)),
        (None, 0) => (full, None),
        (None, n) => {
            let (t, e) = full.split_holdout(n, seed)?;
            (t, Some(e))
        }
    };
    let dir = args
        .common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("run"));
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))?;
    let run = RunConfig {
        model: model_config.clone(),
        train: train_config.clone(),
        data: data_path,
        eval_data: train_o.eval_data.clone(),
        holdout,
        out: dir.clone(),
    };
    std::fs::write(
        dir.join("run_config.json"),
        serde_json::to_string_pretty(&run).expect("serializable") + "\n",
    )?;

    let model = GraFormer::new(model_config, seed)?;
    writeln!(
        out,
        "training {} parameters on {} samples ({} eval) for {} epochs",
        model.count_parameters(),
        train_set.len(),
        eval_set.as_ref().map_or(0, Dataset::len),
        train_config.epochs
    )?;
    let outputs = TrainOutputs { dir: dir.clone() };
    let epochs = train_config.epochs;
    let quiet = args.quiet;
    let report = train_with(
        model,
        &train_set,
        eval_set.as_ref(),
        &train_config,
        Some(&outputs),
        prefetch_depth(),
        |row| {
            if !quiet {
                let _ = writeln!(
                    out,
                    "epoch {}/{epochs} step {} lr {:.3e} loss {:.4} eval {:.2} mm",
                    row.epoch,
                    row.step,
                    row.lr,
                    row.train_loss,
                    row.eval_mpjpe_mm.unwrap_or(f64::NAN)
                );
            }
        },
    )?;
    let final_eval = match report.log.last().and_then(|r| r.eval_mpjpe_mm) {
        Some(v) => v,
        None => {
            let eval = eval_set.as_ref().unwrap_or(&train_set);
            mean(&evaluate_per_sample(&report.model, eval)?)
        }
    };
    let summary = TrainSummary {
        run,
        final_loss: report.log.last().map_or(f64::NAN, |r| r.train_loss),
        final_eval_mpjpe_mm: final_eval,
        best_eval_mpjpe_mm: report.best.as_ref().map(|(s, _)| *s),
    };
    writeln!(
        out,
        "final eval MPJPE {:.2} mm; checkpoints in {}",
        final_eval,
        dir.display()
    )?;
    Ok(summary)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// MPJPE report of `eval`.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub mpjpe_mm: f64,
    pub per_action: BTreeMap<String, (usize, f64)>,
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<EvalReport, CliError> {
    let model = GraFormer::load(&args.checkpoint)
        .map_err(|e| CliError::usage(format!("cannot load {}: {e}", args.checkpoint.display())))?;
    let data = load_dataset(&args.data, Some(model.skeleton()))?;
    let errors = if args.identity_check {
        let root = data.skeleton.root_index();
        let (_, y) = data.all();
        let chunk = y.numel() / data.len();
        (0..data.len())
            .map(|i| {
                let t = graformer::Tensor::new(
                    vec![1, data.joint_count(), 3],
                    y.data()[i * chunk..(i + 1) * chunk].to_vec(),
                )?;
                mpjpe(&t, &t, root)
            })
            .collect::<graformer::Result<Vec<f64>>>()?
    } else {
        evaluate_per_sample(&model, &data)?
    };
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (s, e) in data.samples.iter().zip(&errors) {
        if let Some(a) = &s.action {
            groups.entry(a.clone()).or_default().push(*e);
        }
    }
    let report = EvalReport {
        samples: data.len(),
        mpjpe_mm: mean(&errors),
        per_action: groups
            .iter()
            .map(|(a, v)| (a.clone(), (v.len(), mean(v))))
            .collect(),
    };
    if !report.per_action.is_empty() {
        writeln!(out, "{:<16} {:>8} {:>10}", "action", "samples", "MPJPE")?;
        for (a, (n, e)) in &report.per_action {
            writeln!(out, "{a:<16} {n:>8} {e:>10.2}")?;
        }
    }
    writeln!(
        out,
        "MPJPE {:.2} mm over {} samples",
        report.mpjpe_mm, report.samples
    )?;
    if let Some(path) = &args.common.out {
        std::fs::write(
            path,
            serde_json::to_string_pretty(&report).expect("serializable"),
        )?;
    }
    Ok(report)
}

/// Parameter counts reported by `inspect`.
#[derive(Debug, Clone, Serialize)]
pub struct InspectReport {
    pub total: usize,
    pub breakdown: Vec<(String, usize)>,
}

/// Model from `--checkpoint`, or built from config, preset and seed.
fn model_from(
    checkpoint: Option<&Path>,
    common: &CommonArgs,
    overrides: &ModelOverrides,
) -> Result<GraFormer, CliError> {
    if let Some(path) = checkpoint {
        return GraFormer::load(path)
            .map_err(|e| CliError::usage(format!("cannot load {}: {e}", path.display())));
    }
    let file = ConfigFile::load_optional(common.config.as_deref())?;
    let o = overrides.over(&file.model);
    let skeleton = resolve_skeleton(o.skeleton.as_deref().unwrap_or("human16"))?;
    Ok(GraFormer::new(
        o.resolve(skeleton)?,
        seed_of(common, &file),
    )?)
}

pub fn cmd_inspect(args: &InspectArgs, out: &mut dyn Write) -> Result<InspectReport, CliError> {
    let model = model_from(args.checkpoint.as_deref(), &args.common, &args.model)?;
    let report = InspectReport {
        total: model.count_parameters(),
        breakdown: model.parameter_breakdown(),
    };
    let c = model.config();
    writeln!(
        out,
        "skeleton {} (j={}), blocks {}, dim {}, heads {}, Chebyshev terms {}",
        c.skeleton.name(),
        c.skeleton.joint_count(),
        c.blocks,
        c.dim,
        c.heads,
        c.cheb_order
    )?;
    for (name, n) in &report.breakdown {
        writeln!(out, "  {name:<20} {n:>9}")?;
    }
    writeln!(
        out,
        "total trainable parameters: {} ({:.2}M)",
        report.total,
        report.total as f64 / 1e6
    )?;
    if let Some(path) = &args.common.out {
        std::fs::write(
            path,
            serde_json::to_string_pretty(&report).expect("serializable"),
        )?;
    }
    Ok(report)
}

pub fn cmd_export_viz(args: &ExportVizArgs, out: &mut dyn Write) -> Result<Vec<PathBuf>, CliError> {
    let model = model_from(args.checkpoint.as_deref(), &args.common, &args.model)?;
    let dir = args
        .common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("viz"));
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))?;
    let mut matrices: Vec<(String, DenseMatrix)> = model
        .learned_adjacencies()
        .into_iter()
        .map(|(name, m)| (format!("adjacency_{}", name.replace('.', "_")), m))
        .collect();
    matrices.push((
        "normalized_adjacency".into(),
        normalized_adjacency(model.skeleton()),
    ));
    let lt = model.rescaled_laplacian();
    let identity = DenseMatrix::identity(lt.rows());
    for (k, t) in chebyshev_basis(lt, &identity, 3)?.into_iter().enumerate() {
        matrices.push((format!("chebyshev_T{k}"), t));
    }
    let mut written = Vec::new();
    for (stem, m) in &matrices {
        written.extend(viz::write_heatmap(&dir, stem, m, args.cell_size)?);
    }
    writeln!(
        out,
        "wrote {} matrices to {}",
        matrices.len(),
        dir.display()
    )?;
    Ok(written)
}
