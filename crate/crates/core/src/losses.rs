//! Dense detection targets and the weighted multi-task loss.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cell_center, encode_box, Box3D, BoxEncoding, CameraIntrinsics};
use crate::model::HeadOutputs;
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::scene::{SceneSample, IGNORE};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub semseg: f64,
    pub depth: f64,
    pub det: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            semseg: 100.0,
            depth: 1.0,
            det: 1.0,
        }
    }
}

/// Focal loss of one probability; `p` is clamped to `[1e-6, 1 − 1e-6]`.
pub fn focal_loss(p: f64, y: bool, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    let (pt, at) = if y { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
    -at * (1.0 - pt).powf(gamma) * pt.ln()
}

pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        0.5 * x * x / beta
    } else {
        x.abs() - 0.5 * beta
    }
}

/// Per-cell detection targets of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DetTargets {
    pub h: usize,
    pub w: usize,
    pub num_classes: usize,
    /// Index into the box list of the box each cell is positive for.
    pub owner: Vec<Option<usize>>,
    /// `[K × h × w]` one-hot class targets.
    pub cls: Vec<f64>,
    pub centerness: Vec<f64>,
    pub encodings: Vec<Option<BoxEncoding>>,
}

impl DetTargets {
    pub fn num_positive(&self) -> usize {
        self.owner.iter().flatten().count()
    }

    pub fn positive_cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.owner
            .iter()
            .enumerate()
            .filter(|(_, o)| o.is_some())
            .map(|(p, _)| p)
    }
}

/// Marks the cell holding each box's projected center and its 8 neighbours
/// positive for that box; the nearer box wins contested cells.
pub fn assign_targets(
    boxes: &[Box3D],
    k: &CameraIntrinsics,
    grid: (usize, usize),
    stride: usize,
    num_classes: usize,
) -> Result<DetTargets> {
    let (h, w) = grid;
    let hw = h * w;
    let sf = stride as f64;
    let mut owner: Vec<Option<usize>> = vec![None; hw];
    let mut centers = Vec::with_capacity(boxes.len());
    for (i, b) in boxes.iter().enumerate() {
        if b.class_id >= num_classes {
            return Err(Error::Assignment(format!(
                "box {i} has class {} of {num_classes}",
                b.class_id
            )));
        }
        if b.dims.iter().any(|&d| d <= 0.0) {
            return Err(Error::Assignment(format!("box {i} has non-positive dimensions")));
        }
        let (u, v) = k
            .project(b.center)
            .map_err(|_| Error::Assignment(format!("box {i} is behind the camera (Z = {})", b.center[2])))?;
        centers.push((u, v));
        let (col, row) = ((u / sf).floor() as i64, (v / sf).floor() as i64);
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (r, c) = (row + dr, col + dc);
                if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
                    continue;
                }
                let p = r as usize * w + c as usize;
                let wins = match owner[p] {
                    None => true,
                    Some(j) => b.center[2] < boxes[j].center[2],
                };
                if wins {
                    owner[p] = Some(i);
                }
            }
        }
    }
    let mut cls = vec![0.0; num_classes * hw];
    let mut centerness = vec![0.0; hw];
    let mut encodings = vec![None; hw];
    for p in 0..hw {
        if let Some(i) = owner[p] {
            let (row, col) = (p / w, p % w);
            let b = &boxes[i];
            cls[b.class_id * hw + p] = 1.0;
            let (cu, cv) = cell_center(row, col, sf);
            let (u, v) = centers[i];
            let d2 = (u - cu).powi(2) + (v - cv).powi(2);
            centerness[p] = (-d2 / (2.0 * sf * sf)).exp();
            encodings[p] = Some(encode_box(b, k, row, col, sf)?);
        }
    }
    Ok(DetTargets {
        h,
        w,
        num_classes,
        owner,
        cls,
        centerness,
        encodings,
    })
}

/// Targets of a batch of images.
#[derive(Clone, Debug)]
pub struct BatchTargets {
    pub height: usize,
    pub width: usize,
    /// `B·H·W` class ids.
    pub semseg: Vec<u8>,
    /// `B·H·W` depths, 0 = invalid.
    pub depth: Vec<f32>,
    pub det: Vec<DetTargets>,
}

impl BatchTargets {
    pub fn from_samples(
        samples: &[&SceneSample],
        grid: (usize, usize),
        stride: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
        let (height, width) = (first.height(), first.width());
        let mut semseg = Vec::with_capacity(samples.len() * height * width);
        let mut depth = Vec::with_capacity(samples.len() * height * width);
        let mut det = Vec::with_capacity(samples.len());
        for s in samples {
            if (s.height(), s.width()) != (height, width) {
                return Err(Error::shape(
                    "batch targets",
                    &[height, width],
                    &[s.height(), s.width()],
                ));
            }
            semseg.extend_from_slice(&s.semseg);
            depth.extend_from_slice(&s.depth);
            det.push(
                assign_targets(&s.boxes, &s.intrinsics, grid, stride, num_classes)
                    .map_err(|e| Error::Assignment(format!("{}: {e}", s.id)))?,
            );
        }
        Ok(Self {
            height,
            width,
            semseg,
            depth,
            det,
        })
    }

    pub fn batch(&self) -> usize {
        self.det.len()
    }
}

/// Loss components and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub semseg_ce: f64,
    pub depth_l1: f64,
    pub det_cls_focal: f64,
    pub det_reg_smooth_l1: f64,
    pub det_dir_ce: f64,
    pub det_ctr_ce: f64,
    pub total: f64,
    /// Set when every semseg pixel of the batch carried the ignore label.
    #[serde(skip)]
    pub semseg_all_ignored: bool,
}

impl LossBreakdown {
    pub fn components(&self) -> [(&'static str, f64); 7] {
        [
            ("semseg_ce", self.semseg_ce),
            ("depth_l1", self.depth_l1),
            ("det_cls", self.det_cls_focal),
            ("det_reg", self.det_reg_smooth_l1),
            ("det_dir", self.det_dir_ce),
            ("det_ctr", self.det_ctr_ce),
            ("total", self.total),
        ]
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.components()
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

fn zero<T: Real>(g: &mut Graph<T>) -> Var {
    g.constant(Tensor::scalar(T::zero()))
}

/// `[B × c × h × w]` → `[B·h·w × c]`.
fn cells_by_channel<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let y = g.permute(x, &[0, 2, 3, 1])?;
    g.reshape(y, &[s[0] * s[2] * s[3], s[1]])
}

fn semseg_ce<T: Real>(g: &mut Graph<T>, logits: Var, t: &BatchTargets) -> Result<(Var, bool)> {
    let up = g.upsample_bilinear(logits, t.height, t.width)?;
    let rows = cells_by_channel(g, up)?;
    let labels: Vec<Option<usize>> = t.semseg.iter().map(|&c| (c != IGNORE).then_some(c as usize)).collect();
    let valid = labels.iter().flatten().count();
    if valid == 0 {
        warn!("every semseg pixel of the batch is ignored; semseg loss is 0");
        return Ok((zero(g), true));
    }
    let per = g.softmax_cross_entropy(rows, &labels)?;
    let s = g.sum_all(per);
    Ok((g.scale(s, 1.0 / valid as f64), false))
}

fn depth_l1<T: Real>(g: &mut Graph<T>, log_depth: Var, t: &BatchTargets) -> Result<Var> {
    let up = g.upsample_bilinear(log_depth, t.height, t.width)?;
    let pred = g.exp(up);
    let valid = t.depth.iter().filter(|&&d| d > 0.0).count();
    if valid == 0 {
        return Ok(zero(g));
    }
    let shape = g.shape(pred).to_vec();
    let gt = g.constant(Tensor::new(&shape, t.depth.iter().map(|&d| T::of(d as f64)).collect())?);
    let mask = g.constant(Tensor::new(
        &shape,
        t.depth
            .iter()
            .map(|&d| if d > 0.0 { T::one() } else { T::zero() })
            .collect(),
    )?);
    let diff = g.sub(pred, gt)?;
    let diff = g.abs(diff);
    let diff = g.mul(diff, mask)?;
    let s = g.sum_all(diff);
    Ok(g.scale(s, 1.0 / valid as f64))
}

struct DetLoss {
    cls: Var,
    reg: Var,
    dir: Var,
    ctr: Var,
}

fn det_losses<T: Real>(g: &mut Graph<T>, heads: &HeadOutputs, t: &BatchTargets) -> Result<DetLoss> {
    let d = heads.det;
    let s = g.shape(d.cls).to_vec();
    let (b, k, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    if t.det.len() != b || t.det.iter().any(|dt| dt.h != h || dt.w != w || dt.num_classes != k) {
        return Err(Error::shape("det targets", &s, &[t.det.len()]));
    }
    let cls_target: Vec<f64> = t.det.iter().flat_map(|dt| dt.cls.iter().copied()).collect();
    let num_pos: usize = t.det.iter().map(DetTargets::num_positive).sum();
    let focal = g.sigmoid_focal(d.cls, &cls_target, FOCAL_ALPHA, FOCAL_GAMMA)?;
    let focal = g.sum_all(focal);
    let cls = g.scale(focal, 1.0 / num_pos.max(1) as f64);
    if num_pos == 0 {
        let (reg, dir, ctr) = (zero(g), zero(g), zero(g));
        return Ok(DetLoss { cls, reg, dir, ctr });
    }

    let mut rows = Vec::with_capacity(num_pos);
    let mut reg_target = Vec::with_capacity(num_pos * 9);
    let mut dir_target = Vec::with_capacity(num_pos);
    let mut ctr_target = Vec::with_capacity(num_pos);
    for (bi, dt) in t.det.iter().enumerate() {
        for p in dt.positive_cells() {
            let e = dt.encodings[p].as_ref().expect("positive cells carry an encoding");
            rows.push(bi * hw + p);
            reg_target.extend(e.offset);
            reg_target.push(e.depth_raw);
            reg_target.extend(e.dims_raw);
            reg_target.extend(e.rot);
            dir_target.push(Some(e.dir));
            ctr_target.push(dt.centerness[p]);
        }
    }
    let reg_pred = g.concat(&[d.offset, d.depth, d.dims, d.rot], 1)?;
    let reg_pred = cells_by_channel(g, reg_pred)?;
    let reg_pred = g.index_select(reg_pred, 0, &rows)?;
    let reg_t = g.constant(Tensor::from_f64(&[num_pos, 9], &reg_target)?);
    let resid = g.sub(reg_pred, reg_t)?;
    let sl1 = g.smooth_l1(resid, SMOOTH_L1_BETA);
    let reg = g.mean_all(sl1);

    let dir_pred = cells_by_channel(g, d.dir)?;
    let dir_pred = g.index_select(dir_pred, 0, &rows)?;
    let dir = g.softmax_cross_entropy(dir_pred, &dir_target)?;
    let dir = g.mean_all(dir);

    let ctr_pred = g.reshape(d.ctr, &[b * hw])?;
    let ctr_pred = g.index_select(ctr_pred, 0, &rows)?;
    let ctr = g.bce_with_logits(ctr_pred, &ctr_target)?;
    let ctr = g.mean_all(ctr);
    Ok(DetLoss { cls, reg, dir, ctr })
}

/// Graph handles of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub semseg: Var,
    pub depth: Var,
    pub det_cls: Var,
    pub det_reg: Var,
    pub det_dir: Var,
    pub det_ctr: Var,
    pub total: Var,
}

/// `w_sem·CE + w_depth·L1 + w_det·(focal + smooth-L1 + dir CE + centerness BCE)`.
pub fn multitask_loss<T: Real>(
    g: &mut Graph<T>,
    heads: &HeadOutputs,
    targets: &BatchTargets,
    weights: &LossWeights,
) -> Result<(LossVars, LossBreakdown)> {
    let (semseg, all_ignored) = semseg_ce(g, heads.semseg, targets)?;
    let depth = depth_l1(g, heads.depth_log, targets)?;
    let det = det_losses(g, heads, targets)?;
    let det_sum = g.add(det.cls, det.reg)?;
    let det_sum = g.add(det_sum, det.dir)?;
    let det_sum = g.add(det_sum, det.ctr)?;
    let ws = g.scale(semseg, weights.semseg);
    let wd = g.scale(depth, weights.depth);
    let wt = g.scale(det_sum, weights.det);
    let total = g.add(ws, wd)?;
    let total = g.add(total, wt)?;
    let item = |v: Var| g.item(v).f64();
    let breakdown = LossBreakdown {
        semseg_ce: item(semseg),
        depth_l1: item(depth),
        det_cls_focal: item(det.cls),
        det_reg_smooth_l1: item(det.reg),
        det_dir_ce: item(det.dir),
        det_ctr_ce: item(det.ctr),
        total: item(total),
        semseg_all_ignored: all_ignored,
    };
    let vars = LossVars {
        semseg,
        depth,
        det_cls: det.cls,
        det_reg: det.reg,
        det_dir: det.dir,
        det_ctr: det.ctr,
        total,
    };
    Ok((vars, breakdown))
}
