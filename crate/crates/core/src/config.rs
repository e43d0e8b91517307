//! Run configuration: a strict JSON file plus two named presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{BackboneConfig, ModelConfig};
use crate::numerics::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub nms_iou: f64,
    pub score_thresh: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Dataset directory; the CLI flag takes precedence.
    pub data_root: Option<PathBuf>,
    /// Iterations between intermediate checkpoints.
    pub eval_interval: usize,
}

impl Default for RunConfig {
    /// The desk-scale configuration.
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 8,
            iterations: 2000,
            nms_iou: 0.3,
            score_thresh: 0.3,
            loss_weights: LossWeights::default(),
            seed: 0,
            data_root: None,
            eval_interval: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected desk or paper)"
            ))),
        }
    }
}

impl RunConfig {
    /// Full-scale settings: Swin-Base-like backbone at 768×1536, 19 semantic
    /// and 8 detection classes. Far beyond a CPU; kept for reference.
    pub fn paper() -> Self {
        Self {
            model: ModelConfig {
                backbone: BackboneConfig {
                    image_size: [768, 1536],
                    patch_size: 4,
                    stage_depths: vec![2, 2, 18, 2],
                    stage_heads: vec![4, 8, 16, 32],
                    base_channels: 128,
                    window_size: 12,
                    mlp_ratio: 4,
                },
                num_semseg_classes: 19,
                num_det_classes: 8,
                ..ModelConfig::default()
            },
            lr: 2e-5,
            weight_decay: 0.0,
            batch_size: 2,
            iterations: 40_000,
            nms_iou: 0.3,
            score_thresh: 0.3,
            loss_weights: LossWeights {
                semseg: 100.0,
                depth: 1.0,
                det: 1.0,
            },
            seed: 0,
            data_root: None,
            eval_interval: 5000,
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::default(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return bad("batch_size and eval_interval must be positive");
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return bad("nms_iou must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.score_thresh) {
            return bad("score_thresh must lie in [0, 1)");
        }
        let w = self.loss_weights;
        if [w.semseg, w.depth, w.det].iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
            return bad("loss weights must be finite and non-negative");
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// CRC32 of the model configuration's canonical JSON.
    pub fn model_hash(&self) -> Result<u32> {
        Ok(crc32fast::hash(&serde_json::to_vec(&self.model)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_preset_matches_reported_values() {
        let p = RunConfig::preset("paper".parse().unwrap());
        assert_eq!(p.lr, 2e-5);
        assert_eq!(p.batch_size, 2);
        assert_eq!(p.iterations, 40_000);
        assert_eq!(p.nms_iou, 0.3);
        assert_eq!(
            p.loss_weights,
            LossWeights {
                semseg: 100.0,
                depth: 1.0,
                det: 1.0
            }
        );
        assert_eq!(p.weight_decay, 0.0);
        assert_eq!(p.model.backbone.image_size, [768, 1536]);
        p.validate().unwrap();
    }

    #[test]
    fn desk_defaults() {
        let d = RunConfig::preset(Preset::Desk);
        assert_eq!((d.lr, d.batch_size, d.iterations), (1e-3, 8, 2000));
        assert_eq!((d.nms_iou, d.score_thresh), (0.3, 0.3));
        d.validate().unwrap();
        assert!("gpu".parse::<Preset>().is_err());
    }

    #[test]
    fn json_is_strict_and_round_trips() {
        let d = RunConfig::default();
        assert_eq!(RunConfig::from_json(&d.to_json().unwrap()).unwrap(), d);
        assert_eq!(RunConfig::from_json(r#"{"iterations": 5}"#).unwrap().iterations, 5);
        assert!(matches!(
            RunConfig::from_json(r#"{"iteratons": 5}"#),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::from_json(r#"{"model": {"backbone": {"depth": 1}}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"lr": -1.0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"nms_iou": 0.0}"#).is_err());
    }

    #[test]
    fn model_hash_tracks_model_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.lr = 0.5;
        assert_eq!(a.model_hash().unwrap(), b.model_hash().unwrap());
        b.model.decoder_channels = 32;
        assert_ne!(a.model_hash().unwrap(), b.model_hash().unwrap());
    }
}
