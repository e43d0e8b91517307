//! Pinhole camera, 3D boxes, rotated bird's-eye-view IoU and NMS.
//!
//! Camera frame: X right, Y down, Z forward. A box's local frame has its
//! length along x, height along y and width along z; the box rotation is
//! `R = Ry(yaw) · Rz(pitch) · Rx(roll)`, so yaw turns the box about the
//! vertical axis and the BEV footprint depends on yaw only.

use std::cmp::Ordering;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Config(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Pixel coordinates of a camera-frame point.
    pub fn project(&self, p: [f64; 3]) -> Result<(f64, f64)> {
        if p[2] <= 0.0 {
            return Err(Error::BehindCamera(p[2]));
        }
        Ok((self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy))
    }

    /// Point at depth `z` along the ray through pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> [f64; 3] {
        [(u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z]
    }

    /// Direction `(x, y, 1)` of the ray through `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }
}

/// Wraps an angle to `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    /// Camera-frame center `[X, Y, Z]`.
    pub center: [f64; 3],
    /// `[length, width, height]`.
    pub dims: [f64; 3],
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub class_id: usize,
    pub score: f64,
}

impl Box3D {
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        rotation(self.yaw, self.pitch, self.roll)
    }

    /// The eight corners in camera coordinates.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let r = self.rotation();
        let [l, w, h] = self.dims;
        let mut out = [[0.0; 3]; 8];
        for (i, c) in out.iter_mut().enumerate() {
            let local = [
                if i & 1 == 0 { -l / 2.0 } else { l / 2.0 },
                if i & 2 == 0 { -h / 2.0 } else { h / 2.0 },
                if i & 4 == 0 { -w / 2.0 } else { w / 2.0 },
            ];
            let p = mat_vec(&r, local);
            *c = [p[0] + self.center[0], p[1] + self.center[1], p[2] + self.center[2]];
        }
        out
    }

    /// Footprint rectangle in the ground plane as `(X, Z)` corners,
    /// counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.dims[0] / 2.0, self.dims[1] / 2.0);
        // length axis (cos, -sin), width axis (sin, cos) in (X, Z)
        let ax = [c * hl, -s * hl];
        let az = [s * hw, c * hw];
        let [x, z] = [self.center[0], self.center[2]];
        let mut poly = [
            [x - ax[0] - az[0], z - ax[1] - az[1]],
            [x + ax[0] - az[0], z + ax[1] - az[1]],
            [x + ax[0] + az[0], z + ax[1] + az[1]],
            [x - ax[0] + az[0], z - ax[1] + az[1]],
        ];
        if signed_area(&poly) < 0.0 {
            poly.reverse();
        }
        poly
    }

    pub fn bev_area(&self) -> f64 {
        self.dims[0] * self.dims[1]
    }
}

pub fn rotation(yaw: f64, pitch: f64, roll: f64) -> [[f64; 3]; 3] {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sr, cr) = roll.sin_cos();
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cp, -sp, 0.0], [sp, cp, 0.0], [0.0, 0.0, 1.0]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]];
    mat_mul(&mat_mul(&ry, &rz), &rx)
}

pub(crate) fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub(crate) fn mat_vec(a: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

fn signed_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - a[1] * b[0]
        })
        .sum::<f64>()
        / 2.0
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland–Hodgman: clips `subject` against the convex CCW polygon `clip`.
pub fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (dc, dp) = (cross(a, b, cur), cross(a, b, prev));
            if dc >= 0.0 {
                if dp < 0.0 {
                    out.push(intersect(prev, cur, dp, dc));
                }
                out.push(cur);
            } else if dp >= 0.0 {
                out.push(intersect(prev, cur, dp, dc));
            }
        }
    }
    out
}

fn intersect(p: [f64; 2], q: [f64; 2], dp: f64, dq: f64) -> [f64; 2] {
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Rotated-rectangle IoU of the two boxes' ground-plane footprints.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let (aa, ab) = (a.bev_area(), b.bev_area());
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    let inter = signed_area(&clip_polygon(&a.bev_corners(), &b.bev_corners())).max(0.0);
    let union = aa + ab - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

fn nms_order(a: &Box3D, b: &Box3D) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.center[0].total_cmp(&b.center[0]))
        .then(a.center[2].total_cmp(&b.center[2]))
}

/// Greedy per-class NMS; output is sorted by descending score.
pub fn nms(boxes: &[Box3D], iou_thresh: f64) -> Vec<Box3D> {
    let mut sorted = boxes.to_vec();
    sorted.sort_by(nms_order);
    let mut keep: Vec<Box3D> = Vec::new();
    for b in sorted {
        let suppressed = keep
            .iter()
            .any(|k| k.class_id == b.class_id && bev_iou(k, &b) > iou_thresh);
        if !suppressed {
            keep.push(b);
        }
    }
    keep
}

/// Regression targets for one box seen from one grid cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxEncoding {
    /// Pixel offset from the cell center to the projected 3D center.
    pub offset: [f64; 2],
    pub depth_raw: f64,
    pub dims_raw: [f64; 3],
    /// Yaw folded into `(-π, 0]`, then pitch and roll.
    pub rot: [f64; 3],
    pub dir: usize,
}

pub fn cell_center(row: usize, col: usize, stride: f64) -> (f64, f64) {
    ((col as f64 + 0.5) * stride, (row as f64 + 0.5) * stride)
}

/// Direction bin of a yaw: 0 for `(-π, 0]`, 1 for `(0, π]`.
pub fn direction_class(yaw: f64) -> usize {
    if normalize_angle(yaw) <= 0.0 {
        0
    } else {
        1
    }
}

pub fn encode_box(b: &Box3D, k: &CameraIntrinsics, row: usize, col: usize, stride: f64) -> Result<BoxEncoding> {
    let (u, v) = k.project(b.center)?;
    let (cu, cv) = cell_center(row, col, stride);
    let yaw = normalize_angle(b.yaw);
    let dir = direction_class(yaw);
    let folded = if dir == 1 { yaw - PI } else { yaw };
    Ok(BoxEncoding {
        offset: [u - cu, v - cv],
        depth_raw: b.center[2].ln(),
        dims_raw: [b.dims[0].ln(), b.dims[1].ln(), b.dims[2].ln()],
        rot: [folded, normalize_angle(b.pitch), normalize_angle(b.roll)],
        dir,
    })
}

pub fn decode_box(
    e: &BoxEncoding,
    k: &CameraIntrinsics,
    row: usize,
    col: usize,
    stride: f64,
    class_id: usize,
    score: f64,
) -> Box3D {
    let (cu, cv) = cell_center(row, col, stride);
    let z = e.depth_raw.exp();
    let center = k.unproject(cu + e.offset[0], cv + e.offset[1], z);
    Box3D {
        center,
        dims: [e.dims_raw[0].exp(), e.dims_raw[1].exp(), e.dims_raw[2].exp()],
        yaw: normalize_angle(e.rot[0] + if e.dir == 1 { PI } else { 0.0 }),
        pitch: normalize_angle(e.rot[1]),
        roll: normalize_angle(e.rot[2]),
        class_id,
        score,
    }
}

/// Dense per-location detection outputs for one image, channel-major
/// (`[channels × h × w]`) like the network output.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseDetOutput {
    pub h: usize,
    pub w: usize,
    pub num_classes: usize,
    pub class_logits: Vec<f32>,
    pub centerness: Vec<f32>,
    pub offset: Vec<f32>,
    pub depth_raw: Vec<f32>,
    pub dims_raw: Vec<f32>,
    pub rot: Vec<f32>,
    pub dir_logits: Vec<f32>,
}

impl DenseDetOutput {
    pub fn zeros(h: usize, w: usize, num_classes: usize) -> Self {
        let hw = h * w;
        Self {
            h,
            w,
            num_classes,
            class_logits: vec![0.0; num_classes * hw],
            centerness: vec![0.0; hw],
            offset: vec![0.0; 2 * hw],
            depth_raw: vec![0.0; hw],
            dims_raw: vec![0.0; 3 * hw],
            rot: vec![0.0; 3 * hw],
            dir_logits: vec![0.0; 2 * hw],
        }
    }

    /// Writes `e` into location `(row, col)`.
    pub fn set_encoding(&mut self, row: usize, col: usize, e: &BoxEncoding) {
        let hw = self.h * self.w;
        let p = row * self.w + col;
        for c in 0..2 {
            self.offset[c * hw + p] = e.offset[c] as f32;
        }
        self.depth_raw[p] = e.depth_raw as f32;
        for c in 0..3 {
            self.dims_raw[c * hw + p] = e.dims_raw[c] as f32;
            self.rot[c * hw + p] = e.rot[c] as f32;
        }
        self.dir_logits[p] = if e.dir == 0 { 10.0 } else { -10.0 };
        self.dir_logits[hw + p] = -self.dir_logits[p];
    }

    fn encoding_at(&self, p: usize) -> BoxEncoding {
        let hw = self.h * self.w;
        let f = |v: &[f32], c: usize| v[c * hw + p] as f64;
        BoxEncoding {
            offset: [f(&self.offset, 0), f(&self.offset, 1)],
            depth_raw: f(&self.depth_raw, 0),
            dims_raw: [f(&self.dims_raw, 0), f(&self.dims_raw, 1), f(&self.dims_raw, 2)],
            rot: [f(&self.rot, 0), f(&self.rot, 1), f(&self.rot, 2)],
            dir: usize::from(self.dir_logits[hw + p] > self.dir_logits[p]),
        }
    }

    /// Detection score of location `p` and its best class.
    pub fn score_at(&self, p: usize) -> (f64, usize) {
        let hw = self.h * self.w;
        let (mut best, mut cls) = (f32::NEG_INFINITY, 0);
        for k in 0..self.num_classes {
            let v = self.class_logits[k * hw + p];
            if v > best {
                best = v;
                cls = k;
            }
        }
        let s = crate::numerics::sigmoid(best as f64) * crate::numerics::sigmoid(self.centerness[p] as f64);
        (s, cls)
    }
}

/// Turns dense outputs into boxes for every location scoring at least
/// `score_thresh`.
pub fn decode_detections(out: &DenseDetOutput, k: &CameraIntrinsics, stride: f64, score_thresh: f64) -> Vec<Box3D> {
    let mut boxes = Vec::new();
    for row in 0..out.h {
        for col in 0..out.w {
            let p = row * out.w + col;
            let (score, cls) = out.score_at(p);
            if score >= score_thresh && score > 0.0 {
                boxes.push(decode_box(&out.encoding_at(p), k, row, col, stride, cls, score));
            }
        }
    }
    boxes
}
