//! Inference and dataset evaluation. Parameters enter the graph as constants
//! and batch norm uses running statistics, so nothing is recorded for backward.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::{decode_detections, nms, Box3D, CameraIntrinsics};
use crate::metrics::{EvalAccumulator, EvalReport};
use crate::model::heads::{dense_det_output, image_slice};
use crate::model::{forward, stack_images, Mode};
use crate::numerics::{Graph, Tensor};
use crate::scene::{SceneSample, IGNORE, VEHICLE_NAMES};

/// Fails unless every sample fits the model configuration.
pub fn check_compatible(cfg: &RunConfig, samples: &[SceneSample]) -> Result<()> {
    let m = &cfg.model;
    let [h, w] = m.backbone.image_size;
    if samples.is_empty() {
        return Err(Error::Compatibility("dataset is empty".into()));
    }
    for s in samples {
        if (s.height(), s.width()) != (h, w) || s.image.shape()[0] != 3 {
            return Err(Error::Compatibility(format!(
                "{}: image {:?}, model expects [3, {h}, {w}]",
                s.id,
                s.image.shape()
            )));
        }
        if let Some(&c) = s
            .semseg
            .iter()
            .find(|&&c| c != IGNORE && c as usize >= m.num_semseg_classes)
        {
            return Err(Error::Compatibility(format!(
                "{}: semseg class {c} but the model has {} classes",
                s.id, m.num_semseg_classes
            )));
        }
        if let Some(b) = s.boxes.iter().find(|b| b.class_id >= m.num_det_classes) {
            return Err(Error::Compatibility(format!(
                "{}: box class {} but the model has {} detection classes",
                s.id, b.class_id, m.num_det_classes
            )));
        }
    }
    Ok(())
}

/// Full-resolution predictions for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub semseg: Vec<u8>,
    pub depth: Vec<f32>,
    /// After score threshold and NMS, by descending score.
    pub boxes: Vec<Box3D>,
}

/// Runs the model on a batch of `[3×H×W]` images.
pub fn predict(ck: &Checkpoint, images: &[&Tensor<f32>], intrinsics: &[CameraIntrinsics]) -> Result<Vec<Prediction>> {
    if images.len() != intrinsics.len() {
        return Err(Error::shape("predict", &[images.len()], &[intrinsics.len()]));
    }
    let cfg = &ck.config;
    let m = &cfg.model;
    let [h, w] = m.backbone.image_size;
    let mut g = Graph::<f32>::new();
    let bound = ck.params.bind(&mut g, false);
    let x = g.constant(stack_images(images)?);
    if g.shape(x)[1..] != [3, h, w] {
        return Err(Error::Compatibility(format!(
            "image {:?}, model expects [3, {h}, {w}]",
            &g.shape(x)[1..]
        )));
    }
    let out = forward(&mut g, m, &ck.params, &bound, x, Mode::Eval)?;
    let sem = g.upsample_bilinear(out.heads.semseg, h, w)?;
    let dep = g.upsample_bilinear(out.heads.depth_log, h, w)?;
    let k = m.num_semseg_classes;
    (0..images.len())
        .map(|b| {
            let logits = image_slice(&g, sem, b);
            let semseg = (0..h * w)
                .map(|p| {
                    (0..k)
                        .max_by(|&i, &j| logits[i * h * w + p].total_cmp(&logits[j * h * w + p]).then(j.cmp(&i)))
                        .unwrap() as u8
                })
                .collect();
            let depth = image_slice(&g, dep, b).into_iter().map(f32::exp).collect();
            let dense = dense_det_output(&g, &out.heads.det, b);
            let raw = decode_detections(&dense, &intrinsics[b], m.stride() as f64, cfg.score_thresh);
            Ok(Prediction {
                semseg,
                depth,
                boxes: nms(&raw, cfg.nms_iou),
            })
        })
        .collect()
}

pub fn predict_sample(ck: &Checkpoint, s: &SceneSample) -> Result<Prediction> {
    Ok(predict(ck, &[&s.image], &[s.intrinsics])?.remove(0))
}

/// Evaluates every sample, in parallel over images with an ordered merge.
pub fn evaluate(ck: &Checkpoint, samples: &[SceneSample]) -> Result<EvalReport> {
    check_compatible(&ck.config, samples)?;
    let m = &ck.config.model;
    let names = &VEHICLE_NAMES[..m.num_det_classes.min(VEHICLE_NAMES.len())];
    let mut class_names: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    class_names.extend((class_names.len()..m.num_det_classes).map(|c| format!("class{c}")));
    let class_refs: Vec<&str> = class_names.iter().map(String::as_str).collect();
    let parts = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let p = predict_sample(ck, s)?;
            let mut acc = EvalAccumulator::new(m.num_semseg_classes, &class_refs);
            acc.add_image(i, &p.semseg, &s.semseg, IGNORE, &p.depth, &s.depth, &p.boxes, &s.boxes)?;
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = EvalAccumulator::new(m.num_semseg_classes, &class_refs);
    for p in parts {
        total.merge(p);
    }
    total.finish()
}

/// Box as written to `boxes.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRecord {
    pub class: String,
    pub score: f64,
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl From<&Box3D> for BoxRecord {
    fn from(b: &Box3D) -> Self {
        Self {
            class: VEHICLE_NAMES
                .get(b.class_id)
                .map_or_else(|| format!("class{}", b.class_id), |s| s.to_string()),
            score: b.score,
            center: b.center,
            dims: b.dims,
            yaw: b.yaw,
            pitch: b.pitch,
            roll: b.roll,
        }
    }
}
