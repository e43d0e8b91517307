//! Segmentation mIoU, depth RMSE and a detection score built on AP.
//!
//! The detection score is a documented reconstruction, not the official
//! Cityscapes-3D evaluation: detections are matched greedily by BEV IoU ≥ 0.5,
//! AP uses 101-point interpolation, and each class's AP is multiplied by the
//! mean similarity (center, size, orientation) of its true positives.

use std::cmp::Ordering;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bev_iou, Box3D};

/// Results of the full-scale model on the real benchmark (×100 for mDS and
/// mIoU, metres for RMSE). Kept for reference only; nothing here reproduces them.
pub mod reference {
    pub const MDS: f64 = 32.94;
    pub const MIOU: f64 = 77.72;
    pub const DEPTH_RMSE: f64 = 6.78;
}

pub const MATCH_IOU: f64 = 0.5;
/// Center distance (metres) at which the center similarity reaches 0.
pub const CENTER_CAP: f64 = 4.0;

/// Dataset-level confusion matrix, `m[gt][pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub k: usize,
    pub m: Vec<u64>,
}

impl Confusion {
    pub fn new(k: usize) -> Self {
        Self { k, m: vec![0; k * k] }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.m[gt * self.k + pred]
    }

    /// Tallies one map pair, skipping pixels whose ground truth is `ignore`.
    pub fn add(&mut self, pred: &[u8], gt: &[u8], ignore: u8) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("confusion", &[pred.len()], &[gt.len()]));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.k || g >= self.k {
                return Err(Error::Contract(format!(
                    "class id {} out of range for {} classes",
                    p.max(g),
                    self.k
                )));
            }
            self.m[g * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.m.iter_mut().zip(&other.m) {
            *a += b;
        }
    }

    /// Per-class IoU; `None` for classes absent from both maps.
    pub fn ious(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.k).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..self.k).map(|i| self.get(i, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        let present: Vec<f64> = self.ious().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::UndefinedMetric("mIoU over an empty set of pixels".into()));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Confusion matrix of one map pair and its mIoU.
pub fn confusion_and_miou(pred: &[u8], gt: &[u8], k: usize, ignore: u8) -> Result<(Confusion, f64)> {
    let mut c = Confusion::new(k);
    c.add(pred, gt, ignore)?;
    let miou = c.miou()?;
    Ok((c, miou))
}

/// Running sum of squared depth errors over valid pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DepthError {
    pub sse: f64,
    pub count: u64,
}

impl DepthError {
    pub fn add(&mut self, pred: &[f32], gt: &[f32]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("depth_rmse", &[pred.len()], &[gt.len()]));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g > 0.0 {
                let d = p as f64 - g as f64;
                self.sse += d * d;
                self.count += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &DepthError) {
        self.sse += other.sse;
        self.count += other.count;
    }

    pub fn rmse(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::UndefinedMetric("depth RMSE without valid pixels".into()));
        }
        Ok((self.sse / self.count as f64).sqrt())
    }
}

pub fn depth_rmse(pred: &[f32], gt: &[f32]) -> Result<f64> {
    let mut e = DepthError::default();
    e.add(pred, gt)?;
    e.rmse()
}

/// Similarity of a true positive to its ground truth, in `[0, 1]`.
pub fn tp_similarity(det: &Box3D, gt: &Box3D) -> f64 {
    let dist = (0..3)
        .map(|i| (det.center[i] - gt.center[i]).powi(2))
        .sum::<f64>()
        .sqrt();
    let center = (1.0 - dist / CENTER_CAP).max(0.0);
    let size: f64 = (0..3)
        .map(|i| det.dims[i].min(gt.dims[i]) / det.dims[i].max(gt.dims[i]))
        .product();
    let orient = [det.yaw - gt.yaw, det.pitch - gt.pitch, det.roll - gt.roll]
        .iter()
        .map(|d| (1.0 + d.cos()) / 2.0)
        .sum::<f64>()
        / 3.0;
    (center + size + orient) / 3.0
}

/// Deterministic ranking: score descending, then position.
fn rank_order(a: &Box3D, b: &Box3D) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.center[0].total_cmp(&b.center[0]))
        .then(a.center[2].total_cmp(&b.center[2]))
        .then(a.center[1].total_cmp(&b.center[1]))
}

/// Outcome of one ranked detection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankedDet {
    pub score: f64,
    /// Index of the matched ground truth, if any.
    pub matched: Option<usize>,
    pub similarity: f64,
}

/// Greedy matching of class-`class` detections against ground truth of the
/// same class. Returns the detections in rank order with their outcome.
pub fn match_detections(dets: &[Box3D], gts: &[Box3D], class: usize) -> Vec<RankedDet> {
    let mut ds: Vec<&Box3D> = dets.iter().filter(|d| d.class_id == class).collect();
    ds.sort_by(|a, b| rank_order(a, b));
    let gs: Vec<(usize, &Box3D)> = gts.iter().enumerate().filter(|(_, g)| g.class_id == class).collect();
    let mut used = vec![false; gs.len()];
    ds.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, (_, g)) in gs.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let iou = bev_iou(d, g);
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, iou)) if iou >= MATCH_IOU => {
                    used[j] = true;
                    RankedDet {
                        score: d.score,
                        matched: Some(gs[j].0),
                        similarity: tp_similarity(d, gs[j].1),
                    }
                }
                _ => RankedDet {
                    score: d.score,
                    matched: None,
                    similarity: 0.0,
                },
            }
        })
        .collect()
}

/// Precision/recall after each ranked detection.
pub fn pr_curve(ranked: &[RankedDet], num_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    ranked
        .iter()
        .enumerate()
        .map(|(i, r)| {
            tp += usize::from(r.matched.is_some());
            let recall = if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };
            (tp as f64 / (i + 1) as f64, recall)
        })
        .collect()
}

/// 101-point interpolated average precision.
pub fn average_precision(ranked: &[RankedDet], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let pr = pr_curve(ranked, num_gt);
    (0..=100)
        .map(|i| {
            let r = i as f64 / 100.0;
            pr.iter()
                .filter(|(_, rec)| *rec >= r - 1e-12)
                .map(|(p, _)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

/// Per-class detection records pooled over a dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassRecord {
    /// `(image, rank within image, outcome)`.
    pub dets: Vec<(usize, usize, RankedDet)>,
    pub num_gt: usize,
}

impl ClassRecord {
    fn ranked(&self) -> Vec<RankedDet> {
        let mut d = self.dets.clone();
        d.sort_by(|a, b| b.2.score.total_cmp(&a.2.score).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        d.into_iter().map(|(_, _, r)| r).collect()
    }

    pub fn ap(&self) -> f64 {
        average_precision(&self.ranked(), self.num_gt)
    }

    /// AP times the mean true-positive similarity.
    pub fn detection_score(&self) -> f64 {
        let sims: Vec<f64> = self
            .dets
            .iter()
            .filter(|(_, _, r)| r.matched.is_some())
            .map(|(_, _, r)| r.similarity)
            .collect();
        if sims.is_empty() {
            return 0.0;
        }
        self.ap() * sims.iter().sum::<f64>() / sims.len() as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub images: usize,
    pub gt_boxes: usize,
    pub detections: usize,
}

/// Accumulates all metrics image by image; merging is in call order.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalAccumulator {
    pub class_names: Vec<String>,
    pub confusion: Confusion,
    pub depth: DepthError,
    pub det: Vec<ClassRecord>,
    pub counts: Counts,
}

impl EvalAccumulator {
    pub fn new(num_semseg_classes: usize, det_class_names: &[&str]) -> Self {
        Self {
            class_names: det_class_names.iter().map(|s| s.to_string()).collect(),
            confusion: Confusion::new(num_semseg_classes),
            depth: DepthError::default(),
            det: vec![ClassRecord::default(); det_class_names.len()],
            counts: Counts::default(),
        }
    }

    /// Adds one image. `image` orders ties between images deterministically.
    #[allow(clippy::too_many_arguments)]
    pub fn add_image(
        &mut self,
        image: usize,
        pred_sem: &[u8],
        gt_sem: &[u8],
        ignore: u8,
        pred_depth: &[f32],
        gt_depth: &[f32],
        dets: &[Box3D],
        gts: &[Box3D],
    ) -> Result<()> {
        self.confusion.add(pred_sem, gt_sem, ignore)?;
        self.depth.add(pred_depth, gt_depth)?;
        self.add_detections(image, dets, gts);
        Ok(())
    }

    pub fn add_detections(&mut self, image: usize, dets: &[Box3D], gts: &[Box3D]) {
        for (c, rec) in self.det.iter_mut().enumerate() {
            rec.num_gt += gts.iter().filter(|g| g.class_id == c).count();
            for (rank, r) in match_detections(dets, gts, c).into_iter().enumerate() {
                rec.dets.push((image, rank, r));
            }
        }
        self.counts.images += 1;
        self.counts.gt_boxes += gts.len();
        self.counts.detections += dets.len();
    }

    pub fn merge(&mut self, other: EvalAccumulator) {
        self.confusion.merge(&other.confusion);
        self.depth.merge(&other.depth);
        for (a, b) in self.det.iter_mut().zip(other.det) {
            a.dets.extend(b.dets);
            a.num_gt += b.num_gt;
        }
        self.counts.images += other.counts.images;
        self.counts.gt_boxes += other.counts.gt_boxes;
        self.counts.detections += other.counts.detections;
    }

    /// Mean detection score over classes with ground truth; 0 when none has any.
    pub fn mds(&self) -> f64 {
        let with_gt: Vec<f64> = self
            .det
            .iter()
            .filter(|r| r.num_gt > 0)
            .map(ClassRecord::detection_score)
            .collect();
        if with_gt.is_empty() {
            0.0
        } else {
            with_gt.iter().sum::<f64>() / with_gt.len() as f64
        }
    }

    pub fn finish(&self) -> Result<EvalReport> {
        let per_class_ds = self
            .class_names
            .iter()
            .zip(&self.det)
            .filter(|(_, r)| r.num_gt > 0)
            .map(|(n, r)| (n.clone(), r.detection_score()))
            .collect();
        Ok(EvalReport {
            mds: self.mds(),
            per_class_ds,
            miou: self.confusion.miou()?,
            depth_rmse: self.depth.rmse()?,
            counts: self.counts,
        })
    }
}

/// Aggregated metrics. `mds`, `per_class_ds` and `miou` are fractions here
/// and percentages in the JSON form.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mds: f64,
    pub per_class_ds: IndexMap<String, f64>,
    pub miou: f64,
    pub depth_rmse: f64,
    pub counts: Counts,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportJson {
    mds: f64,
    per_class_ds: IndexMap<String, f64>,
    miou: f64,
    depth_rmse: f64,
    counts: Counts,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let j = ReportJson {
            mds: 100.0 * self.mds,
            per_class_ds: self.per_class_ds.iter().map(|(k, v)| (k.clone(), 100.0 * v)).collect(),
            miou: 100.0 * self.miou,
            depth_rmse: self.depth_rmse,
            counts: self.counts,
        };
        Ok(serde_json::to_string_pretty(&j)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: ReportJson = serde_json::from_str(s)?;
        Ok(Self {
            mds: j.mds / 100.0,
            per_class_ds: j.per_class_ds.into_iter().map(|(k, v)| (k, v / 100.0)).collect(),
            miou: j.miou / 100.0,
            depth_rmse: j.depth_rmse,
            counts: j.counts,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x: f64, z: f64, class_id: usize, score: f64) -> Box3D {
        Box3D {
            center: [x, 1.0, z],
            dims: [4.0, 1.8, 1.5],
            yaw: 0.3,
            pitch: 0.0,
            roll: 0.0,
            class_id,
            score,
        }
    }

    #[test]
    fn miou_examples() {
        let gt = [0u8, 1, 2, 1, 255];
        assert_eq!(confusion_and_miou(&gt, &gt, 3, 255).unwrap().1, 1.0);
        let gt = [0u8, 0, 1, 1];
        let pred = [0u8; 4];
        let (c, miou) = confusion_and_miou(&pred, &gt, 2, 255).unwrap();
        assert_eq!(c.get(1, 0), 2);
        assert!((miou - 0.25).abs() < 1e-15);
        assert!(confusion_and_miou(&pred, &gt[..3], 2, 255).is_err());
    }

    /// Brute force: one pass per class over all pixels.
    fn brute_miou(pred: &[u8], gt: &[u8], k: usize) -> f64 {
        let mut ious = Vec::new();
        for c in 0..k as u8 {
            let (mut inter, mut uni) = (0u64, 0u64);
            for (&p, &g) in pred.iter().zip(gt) {
                if g == 255 {
                    continue;
                }
                inter += u64::from(p == c && g == c);
                uni += u64::from(p == c || g == c);
            }
            if uni > 0 {
                ious.push(inter as f64 / uni as f64);
            }
        }
        ious.iter().sum::<f64>() / ious.len() as f64
    }

    #[test]
    fn miou_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let n = rng.random_range(1..400);
            let gt: Vec<u8> = (0..n)
                .map(|_| {
                    if rng.random_bool(0.1) {
                        255
                    } else {
                        rng.random_range(0..7)
                    }
                })
                .collect();
            let pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..7)).collect();
            if gt.iter().all(|&g| g == 255) {
                continue;
            }
            let (_, m) = confusion_and_miou(&pred, &gt, 7, 255).unwrap();
            assert_eq!(m, brute_miou(&pred, &gt, 7));
        }
    }

    #[test]
    fn rmse_examples() {
        let gt = [1.0f32, 2.0, 0.0, 4.0];
        assert_eq!(depth_rmse(&gt, &gt).unwrap(), 0.0);
        let pred: Vec<f32> = gt.iter().map(|g| g + 2.0).collect();
        assert!((depth_rmse(&pred, &gt).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(depth_rmse(&[1.0], &[0.0]), Err(Error::UndefinedMetric(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt: Vec<f32> = (0..500).map(|_| rng.random_range(0.0..30.0)).collect();
        let pred: Vec<f32> = (0..500).map(|_| rng.random_range(0.0..30.0)).collect();
        let want = {
            let (s, n) = gt
                .iter()
                .zip(&pred)
                .filter(|(g, _)| **g > 0.0)
                .fold((0.0f64, 0usize), |(s, n), (g, p)| {
                    (s + (*p as f64 - *g as f64).powi(2), n + 1)
                });
            (s / n as f64).sqrt()
        };
        assert!((depth_rmse(&pred, &gt).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn perfect_and_empty_detection() {
        let gts = vec![bx(0.0, 10.0, 0, 1.0), bx(5.0, 20.0, 1, 1.0), bx(-4.0, 30.0, 0, 1.0)];
        let mut acc = EvalAccumulator::new(7, &["car", "truck", "bus"]);
        acc.add_detections(0, &gts, &gts);
        assert_eq!(acc.mds(), 1.0);
        let rep = acc.finish_det_only();
        assert_eq!(rep.len(), 2);
        let mut empty = EvalAccumulator::new(7, &["car", "truck", "bus"]);
        empty.add_detections(0, &[], &gts);
        assert_eq!(empty.mds(), 0.0);
        let ranked = match_detections(&[], &gts, 0);
        assert_eq!(pr_curve(&ranked, 2).last().map(|p| p.1).unwrap_or(0.0), 0.0);
    }

    impl EvalAccumulator {
        fn finish_det_only(&self) -> Vec<f64> {
            self.det
                .iter()
                .filter(|r| r.num_gt > 0)
                .map(ClassRecord::detection_score)
                .collect()
        }
    }

    #[test]
    fn center_offset_example() {
        let gt = bx(0.0, 10.0, 0, 1.0);
        let mut det = gt.clone();
        det.center[0] += 2.0 * 0.6;
        det.center[2] += 2.0 * 0.8;
        let s = tp_similarity(&det, &gt);
        assert!((s - (0.5 + 1.0 + 1.0) / 3.0).abs() < 1e-12);
        let mut acc = EvalAccumulator::new(7, &["car"]);
        acc.add_detections(0, &[det], &[gt]);
        let ap = acc.det[0].ap();
        assert!((acc.mds() - ap * 0.833_333_333_333_333_4).abs() < 1e-12);
    }

    /// Every assignment of the 3 detections to distinct GTs (or none) that the
    /// greedy rule can produce, computed by brute force in rank order.
    #[test]
    fn crafted_three_dets_two_gts() {
        let gts = vec![bx(0.0, 10.0, 0, 1.0), bx(10.0, 10.0, 0, 1.0)];
        let dets = vec![
            bx(0.3, 10.0, 0, 0.9), // near gt 0
            bx(0.1, 10.2, 0, 0.8), // also near gt 0, which is taken
            bx(10.2, 9.9, 0, 0.7), // near gt 1
        ];
        let ranked = match_detections(&dets, &gts, 0);
        // brute force: walk in score order, take the best free GT above threshold
        let mut free = [true, true];
        let mut want = Vec::new();
        for d in &dets {
            let cands: Vec<(usize, f64)> = (0..2).filter(|&j| free[j]).map(|j| (j, bev_iou(d, &gts[j]))).collect();
            let best = cands.into_iter().max_by(|a, b| a.1.total_cmp(&b.1));
            match best {
                Some((j, iou)) if iou >= 0.5 => {
                    free[j] = false;
                    want.push(Some(j));
                }
                _ => want.push(None),
            }
        }
        assert_eq!(ranked.iter().map(|r| r.matched).collect::<Vec<_>>(), want);
        assert_eq!(want, vec![Some(0), None, Some(1)]);
        let pr = pr_curve(&ranked, 2);
        assert_eq!(pr, vec![(1.0, 0.5), (0.5, 0.5), (2.0 / 3.0, 1.0)]);
        let ap = average_precision(&ranked, 2);
        let want_ap = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((ap - want_ap).abs() < 1e-12);
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (-10.0..10.0f64, 5.0..30.0f64, 0..2usize, 0.01..1.0f64, -3.0..3.0f64).prop_map(|(x, z, c, s, yaw)| Box3D {
            center: [x, 1.0, z],
            dims: [4.0, 1.8, 1.5],
            yaw,
            pitch: 0.0,
            roll: 0.0,
            class_id: c,
            score: s,
        })
    }

    proptest! {
        #[test]
        fn ds_bounded_by_ap_and_order_free(
            gts in prop::collection::vec(arb_box(), 1..6),
            dets in prop::collection::vec(arb_box(), 0..10),
            rot in 0usize..10,
        ) {
            let mut a = EvalAccumulator::new(7, &["car", "truck"]);
            a.add_detections(0, &dets, &gts);
            for r in &a.det {
                let (ap, ds) = (r.ap(), r.detection_score());
                prop_assert!((0.0..=1.0).contains(&ap));
                prop_assert!(ds >= 0.0 && ds <= ap + 1e-12);
            }
            let mut shuffled = dets.clone();
            if !shuffled.is_empty() {
                let k = rot % shuffled.len();
                shuffled.rotate_left(k);
                shuffled.reverse();
            }
            let mut b = EvalAccumulator::new(7, &["car", "truck"]);
            b.add_detections(0, &shuffled, &gts);
            prop_assert_eq!(a.mds(), b.mds());
        }

        #[test]
        fn low_score_detection_keeps_existing_matches(
            gts in prop::collection::vec(arb_box(), 1..6),
            dets in prop::collection::vec(arb_box(), 1..10),
            extra in arb_box(),
        ) {
            let before = match_detections(&dets, &gts, 0);
            let mut more = dets.clone();
            let mut low = extra;
            low.class_id = 0;
            low.score = dets.iter().map(|d| d.score).fold(1.0, f64::min) / 2.0;
            more.push(low);
            let after = match_detections(&more, &gts, 0);
            prop_assert_eq!(&after[..before.len()], &before[..]);
        }
    }

    #[test]
    fn report_json_has_fixed_keys_and_round_trips() {
        let rep = EvalReport {
            mds: 0.5,
            per_class_ds: [("car".to_string(), 0.25)].into_iter().collect(),
            miou: 0.75,
            depth_rmse: 1.5,
            counts: Counts {
                images: 2,
                gt_boxes: 3,
                detections: 4,
            },
        };
        let s = rep.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, ["counts", "depth_rmse", "mds", "miou", "per_class_ds"]);
        assert_eq!(v["mds"], 50.0);
        assert_eq!(v["miou"], 75.0);
        assert_eq!(v["per_class_ds"]["car"], 25.0);
        assert_eq!(EvalReport::from_json(&s).unwrap(), rep);
    }
}
