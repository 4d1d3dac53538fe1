use std::path::{Path, PathBuf};

use clap::Args;
use graformer::training::{LrSchedule, TrainConfig};
use graformer::{ModelConfig, SkeletonGraph};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Architecture settings shared by `train`, `inspect` and `export-viz`.
/// Every field is optional so flags can be layered over a config file.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelOverrides {
    /// Base preset: `default` or `small`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Skeleton preset name (`human16`, `hand21`) or path to a skeleton file.
    #[arg(long)]
    pub skeleton: Option<String>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Number of Chebyshev terms per graph convolution.
    #[arg(long)]
    pub cheb_order: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub gcn_hidden_mult: Option<usize>,
    /// Include the GraAttention half of every stage.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub graattention: Option<bool>,
    /// Include the ChebGConv block half of every stage.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub cheb_block: Option<bool>,
    #[arg(long)]
    pub output_scale: Option<f64>,
}

/// Optimizer and data settings for `train`.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOverrides {
    /// Training dataset file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out dataset file.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Hold out this many training samples for evaluation instead.
    #[arg(long)]
    pub holdout: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning-rate decay clock: `step` or `epoch`.
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub decay_every: Option<usize>,
    #[arg(long)]
    pub decay_factor: Option<f64>,
    /// Evaluate every this many epochs (the last epoch always is).
    #[arg(long)]
    pub eval_every: Option<usize>,
}

/// Contents of a `--config` file: any subset of the long flag names, with
/// dashes replaced by underscores.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfigFile {
    #[serde(flatten)]
    pub model: ModelOverrides,
    #[serde(flatten)]
    pub train: TrainOverrides,
    pub seed: Option<u64>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let known = serde_json::to_value(ConfigFile::default()).expect("serializable");
        if let (Some(map), Some(known)) = (value.as_object(), known.as_object()) {
            if let Some(key) = map.keys().find(|k| !known.contains_key(*k)) {
                return Err(CliError::usage(format!(
                    "{}: unknown setting `{key}`",
                    path.display()
                )));
            }
        }
        serde_json::from_value(value)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    pub fn load_optional(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

impl ModelOverrides {
    /// Fields set here win over `base`.
    pub fn over(&self, base: &ModelOverrides) -> ModelOverrides {
        ModelOverrides {
            preset: self.preset.clone().or_else(|| base.preset.clone()),
            skeleton: self.skeleton.clone().or_else(|| base.skeleton.clone()),
            blocks: self.blocks.or(base.blocks),
            dim: self.dim.or(base.dim),
            heads: self.heads.or(base.heads),
            cheb_order: self.cheb_order.or(base.cheb_order),
            dropout: self.dropout.or(base.dropout),
            gcn_hidden_mult: self.gcn_hidden_mult.or(base.gcn_hidden_mult),
            graattention: self.graattention.or(base.graattention),
            cheb_block: self.cheb_block.or(base.cheb_block),
            output_scale: self.output_scale.or(base.output_scale),
        }
    }

    /// Preset values with every set field applied on top.
    pub fn resolve(&self, skeleton: SkeletonGraph) -> Result<ModelConfig, CliError> {
        let preset = self.preset.as_deref().unwrap_or("default");
        let mut c = ModelConfig::preset(preset, skeleton)
            .ok_or_else(|| CliError::usage(format!("unknown preset `{preset}`")))?;
        c.blocks = self.blocks.unwrap_or(c.blocks);
        c.dim = self.dim.unwrap_or(c.dim);
        c.heads = self.heads.unwrap_or(c.heads);
        c.cheb_order = self.cheb_order.unwrap_or(c.cheb_order);
        c.dropout = self.dropout.unwrap_or(c.dropout);
        c.gcn_hidden_mult = self.gcn_hidden_mult.unwrap_or(c.gcn_hidden_mult);
        c.use_graattention = self.graattention.unwrap_or(c.use_graattention);
        c.use_cheb_block = self.cheb_block.unwrap_or(c.use_cheb_block);
        c.output_scale = self.output_scale.unwrap_or(c.output_scale);
        c.validate()?;
        Ok(c)
    }
}

impl TrainOverrides {
    pub fn over(&self, base: &TrainOverrides) -> TrainOverrides {
        TrainOverrides {
            data: self.data.clone().or_else(|| base.data.clone()),
            eval_data: self.eval_data.clone().or_else(|| base.eval_data.clone()),
            holdout: self.holdout.or(base.holdout),
            lr: self.lr.or(base.lr),
            batch_size: self.batch_size.or(base.batch_size),
            epochs: self.epochs.or(base.epochs),
            schedule: self.schedule.clone().or_else(|| base.schedule.clone()),
            decay_every: self.decay_every.or(base.decay_every),
            decay_factor: self.decay_factor.or(base.decay_factor),
            eval_every: self.eval_every.or(base.eval_every),
        }
    }

    pub fn resolve(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let defaults = TrainConfig::default();
        let base = match self.schedule.as_deref().unwrap_or("step") {
            "step" => LrSchedule::steps(),
            "epoch" => LrSchedule::epochs(),
            other => return Err(CliError::usage(format!("unknown schedule `{other}`"))),
        };
        let schedule = match base {
            LrSchedule::Step { every, factor } => LrSchedule::Step {
                every: self.decay_every.unwrap_or(every),
                factor: self.decay_factor.unwrap_or(factor),
            },
            LrSchedule::Epoch { every, factor } => LrSchedule::Epoch {
                every: self.decay_every.unwrap_or(every),
                factor: self.decay_factor.unwrap_or(factor),
            },
        };
        let config = TrainConfig {
            learning_rate: self.lr.unwrap_or(defaults.learning_rate),
            batch_size: self.batch_size.unwrap_or(defaults.batch_size),
            epochs: self.epochs.unwrap_or(defaults.epochs),
            eval_every: self.eval_every.unwrap_or(defaults.eval_every),
            schedule,
            seed,
            ..defaults
        };
        config.validate()?;
        Ok(config)
    }
}

/// Skeleton from a preset name or a skeleton file path.
pub fn resolve_skeleton(name: &str) -> Result<SkeletonGraph, CliError> {
    if let Some(g) = SkeletonGraph::preset(name) {
        return Ok(g);
    }
    let path = Path::new(name);
    if path.exists() {
        return Ok(SkeletonGraph::load(path)?);
    }
    Err(CliError::usage(format!(
        "unknown skeleton `{name}` (expected human16, hand21 or a skeleton file)"
    )))
}

/// Effective settings of a training run, echoed into its output directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: PathBuf,
    pub eval_data: Option<PathBuf>,
    pub holdout: usize,
    pub out: PathBuf,
}
