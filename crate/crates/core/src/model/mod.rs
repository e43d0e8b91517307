//! The prompted window-attention backbone, prompt decoding and task heads.
//!
//! Token layout convention: patch tokens of a batch are rows of a
//! `[B·N × C]` matrix in raster order (image-major), spatial prompts are
//! `[B × T × C]`. Window-ordered copies exist only inside attention.

pub mod backbone;
pub mod decoding;
pub mod heads;
pub mod params;
pub mod windows;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{BnBatchStats, Graph, Real, Tensor, Var};

pub use backbone::{BackboneConfig, LayerRecord, StageOutput};
pub use heads::{DetVars, HeadOutputs};
pub use params::{Bound, ParamStore};

/// The three tasks, in prompt order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Det,
    Semseg,
    Depth,
}

pub const NUM_TASKS: usize = 3;

impl Task {
    pub const ALL: [Task; NUM_TASKS] = [Task::Det, Task::Semseg, Task::Depth];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Det => "det",
            Task::Semseg => "semseg",
            Task::Depth => "depth",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Width of the fused per-task feature maps.
    pub decoder_channels: usize,
    pub num_semseg_classes: usize,
    pub num_det_classes: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            decoder_channels: 64,
            num_semseg_classes: 7,
            num_det_classes: 3,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.decoder_channels == 0 || self.num_semseg_classes == 0 || self.num_det_classes == 0 {
            return Err(Error::Config("decoder width and class counts must be positive".into()));
        }
        if !(self.bn_eps > 0.0 && self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config(
                "bn_eps must be positive and bn_momentum in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Grid of the task feature maps (stage-1 token resolution).
    pub fn feature_grid(&self) -> (usize, usize) {
        self.backbone.stage_grid(0)
    }

    /// Image pixels per feature-map cell.
    pub fn stride(&self) -> usize {
        self.backbone.patch_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch-statistics batch norm; statistics are reported for the running update.
    Train,
    /// Running-statistics batch norm.
    Eval,
}

/// Everything one forward pass produces.
pub struct ForwardOutput {
    pub stages: Vec<StageOutput>,
    /// Fused `[B × D × H₁ × W₁]` map per task, in [`Task::ALL`] order.
    pub features: Vec<Var>,
    pub heads: HeadOutputs,
    /// Batch statistics of every train-mode batch norm, keyed by layer prefix.
    pub bn_stats: Vec<(String, BnBatchStats)>,
}

/// Runs backbone, decoding and heads on `[B×3×H×W]` images.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    params: &ParamStore,
    bound: &Bound,
    images: Var,
    mode: Mode,
) -> Result<ForwardOutput> {
    let stages = backbone::forward_backbone(g, &cfg.backbone, bound, images)?;
    let features = Task::ALL
        .iter()
        .map(|&t| decoding::decode_task(g, cfg, bound, &stages, t))
        .collect::<Result<Vec<_>>>()?;
    let mut bn_stats = Vec::new();
    let heads = heads::forward_heads(g, cfg, params, bound, &features, mode, &mut bn_stats)?;
    Ok(ForwardOutput {
        stages,
        features,
        heads,
        bn_stats,
    })
}

/// Stacks `[3×H×W]` images into one `[B×3×H×W]` tensor.
pub fn stack_images<T: Real>(images: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("empty image batch".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for im in images {
        if im.shape() != shape.as_slice() {
            return Err(Error::shape("stack_images", &shape, im.shape()));
        }
        data.extend(im.data().iter().map(|&v| T::of(v as f64)));
    }
    let mut out_shape = vec![images.len()];
    out_shape.extend(shape);
    Tensor::new(&out_shape, data)
}
