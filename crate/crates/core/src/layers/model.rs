use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::blocks::{ChebGConvBlock, GraAttention};
use super::conv::ChebGConv;
use super::params::{Forward, ParamStore};
use crate::autodiff::snapshot::{read_snapshot, write_snapshot};
use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{rescaled_laplacian, DenseMatrix, SkeletonGraph};
use crate::rng::{self, stream};

/// Architecture hyperparameters. Serialized next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub skeleton: SkeletonGraph,
    /// Number of stacked (GraAttention, ChebGConv block) pairs.
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    /// Number of Chebyshev terms per graph convolution.
    pub cheb_order: usize,
    pub dropout: f64,
    /// Width of the hidden layer between the two LAM-GConv layers, as a
    /// multiple of `dim`.
    pub gcn_hidden_mult: usize,
    pub use_graattention: bool,
    pub use_cheb_block: bool,
    /// Fixed factor applied to the 3D head output (millimeters per unit).
    pub output_scale: f64,
}

impl ModelConfig {
    /// N = 5, dim = 96, 4 heads, K = 2, dropout 0.25.
    pub fn default_preset(skeleton: SkeletonGraph) -> Self {
        Self {
            skeleton,
            blocks: 5,
            dim: 96,
            heads: 4,
            cheb_order: 2,
            dropout: 0.25,
            gcn_hidden_mult: 2,
            use_graattention: true,
            use_cheb_block: true,
            output_scale: 1000.0,
        }
    }

    /// N = 2, dim = 64, 4 heads, K = 2, dropout 0.1.
    pub fn small_preset(skeleton: SkeletonGraph) -> Self {
        Self {
            blocks: 2,
            dim: 64,
            dropout: 0.1,
            ..Self::default_preset(skeleton)
        }
    }

    pub fn preset(name: &str, skeleton: SkeletonGraph) -> Option<Self> {
        match name {
            "default" => Some(Self::default_preset(skeleton)),
            "small" => Some(Self::small_preset(skeleton)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.blocks == 0 {
            return bad("at least one block is required".into());
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            ));
        }
        if self.cheb_order == 0 {
            return bad("Chebyshev order must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if self.gcn_hidden_mult == 0 {
            return bad("gcn_hidden_mult must be positive".into());
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return bad(format!(
                "output_scale {} must be positive",
                self.output_scale
            ));
        }
        Ok(())
    }
}

/// One stacked stage. Either half may be disabled for ablations.
#[derive(Debug, Clone)]
pub struct Stage {
    pub graattention: Option<GraAttention>,
    pub cheb_block: Option<ChebGConvBlock>,
}

/// Embedding convolution, `N` stages, 3D output convolution.
#[derive(Debug, Clone)]
pub struct GraFormer {
    config: ModelConfig,
    params: ParamStore,
    rescaled: DenseMatrix,
    embed: ChebGConv,
    stages: Vec<Stage>,
    head: ChebGConv,
}

impl GraFormer {
    /// Builds a model with seeded initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rescaled = rescaled_laplacian(&config.skeleton)?;
        let mut rng = rng::seeded(seed, stream::INIT);
        let mut params = ParamStore::new();
        let (dim, k) = (config.dim, config.cheb_order);
        let embed = ChebGConv::new(&mut params, "embed", 2, dim, k, true, &mut rng)?;
        let mut stages = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let graattention = if config.use_graattention {
                Some(GraAttention::new(
                    &mut params,
                    &format!("blocks.{i}.graatt"),
                    &config.skeleton,
                    dim,
                    dim * config.gcn_hidden_mult,
                    config.heads,
                    config.dropout,
                    &mut rng,
                )?)
            } else {
                None
            };
            let cheb_block = if config.use_cheb_block {
                Some(ChebGConvBlock::new(
                    &mut params,
                    &format!("blocks.{i}.cheb"),
                    dim,
                    k,
                    config.dropout,
                    &mut rng,
                )?)
            } else {
                None
            };
            stages.push(Stage {
                graattention,
                cheb_block,
            });
        }
        let head = ChebGConv::new(&mut params, "head", dim, 3, k, true, &mut rng)?;
        Ok(Self {
            config,
            params,
            rescaled,
            embed,
            stages,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn skeleton(&self) -> &SkeletonGraph {
        &self.config.skeleton
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn rescaled_laplacian(&self) -> &DenseMatrix {
        &self.rescaled
    }

    pub fn embed(&self) -> &ChebGConv {
        &self.embed
    }

    pub fn head(&self) -> &ChebGConv {
        &self.head
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count()
    }

    /// Parameter counts grouped as `embed`, `blocks.{i}.graatt`,
    /// `blocks.{i}.cheb` and `head`, in model order.
    pub fn parameter_breakdown(&self) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for p in self.params.iter() {
            let mut parts = p.name.split('.');
            let first = parts.next().unwrap_or_default();
            let key = if first == "blocks" {
                let i = parts.next().unwrap_or_default();
                let kind = parts.next().unwrap_or_default();
                format!("blocks.{i}.{kind}")
            } else {
                first.to_string()
            };
            match groups.last_mut() {
                Some((k, n)) if *k == key => *n += p.value.numel(),
                _ => groups.push((key, p.value.numel())),
            }
        }
        groups
    }

    /// Adds the rescaled Laplacian to the tape as a constant.
    pub fn laplacian_input(&self, f: &mut Forward) -> Var {
        f.input(Tensor::from_matrix(&self.rescaled))
    }

    /// Embedding output, before any stage.
    pub fn embed_forward(&self, f: &mut Forward, rescaled: Var, x: Var) -> Result<Var> {
        self.check_input(f.tape.shape(x))?;
        self.embed.forward(f, rescaled, x)
    }

    /// Head output including the fixed output scale.
    pub fn head_forward(&self, f: &mut Forward, rescaled: Var, h: Var) -> Result<Var> {
        let y = self.head.forward(f, rescaled, h)?;
        Ok(f.tape.scale(y, self.config.output_scale))
    }

    /// `[batch, j, 2]` (or `[j, 2]`) to `[batch, j, 3]` (or `[j, 3]`).
    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let rescaled = self.laplacian_input(f);
        let mut h = self.embed_forward(f, rescaled, x)?;
        for stage in &self.stages {
            if let Some(att) = &stage.graattention {
                h = att.forward(f, h)?;
            }
            if let Some(cb) = &stage.cheb_block {
                h = cb.forward(f, rescaled, h)?;
            }
        }
        self.head_forward(f, rescaled, h)
    }

    /// Eval-mode prediction without gradient bookkeeping.
    pub fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut f = Forward::eval(&self.params);
        let x = f.input(inputs.clone());
        let y = self.forward(&mut f, x)?;
        Ok(f.tape.value(y).clone())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let j = self.config.skeleton.joint_count();
        let ok = matches!(shape, [.., jj, 2] if *jj == j) && (2..=3).contains(&shape.len());
        if ok {
            Ok(())
        } else {
            Err(Error::Shape {
                op: "model_forward",
                lhs: vec![j, 2],
                rhs: shape.to_vec(),
            })
        }
    }

    /// Copy with a different fixed head scale and identical parameters.
    pub fn with_output_scale(&self, output_scale: f64) -> Self {
        let mut m = self.clone();
        m.config.output_scale = output_scale;
        m
    }

    /// Path of the JSON config stored next to checkpoint `path`.
    pub fn config_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes the parameter container to `path` and the config to
    /// `path` + `.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_snapshot(BufWriter::new(File::create(path)?), &self.params.entries())?;
        let cfg = serde_json::to_string_pretty(&self.config)?;
        std::fs::write(Self::config_path(path), cfg + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg_text = std::fs::read_to_string(Self::config_path(path))?;
        let config: ModelConfig = serde_json::from_str(&cfg_text)?;
        let mut model = Self::new(config, 0)?;
        let entries = read_snapshot(BufReader::new(File::open(path)?))?;
        model.params.load_entries(entries)?;
        Ok(model)
    }

    /// Effective aggregation matrices of every LAM-GConv layer, by name.
    pub fn learned_adjacencies(&self) -> Vec<(String, DenseMatrix)> {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(att) = &stage.graattention {
                for (tag, layer) in [("gcn1", &att.gcn1), ("gcn2", &att.gcn2)] {
                    out.push((
                        format!("blocks.{i}.graatt.{tag}"),
                        layer.effective_adjacency(&self.params),
                    ));
                }
            }
        }
        out
    }
}
