//! Procedural street scenes with mutually consistent RGB, semantic, depth and
//! 3D box labels.
//!
//! Every pixel is ray-cast against the vehicles (oriented cuboids), a far
//! wall of buildings and the ground plane; the nearest hit decides the label,
//! the depth (Z of the hit point) and the shaded colour.

use std::f64::consts::PI;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{mat_vec, Box3D, CameraIntrinsics};
use crate::numerics::Tensor;

pub const CLASS_NAMES: [&str; 7] = ["road", "sky", "building", "car", "truck", "bus", "background"];
pub const ROAD: u8 = 0;
pub const SKY: u8 = 1;
pub const BUILDING: u8 = 2;
pub const BACKGROUND: u8 = 6;
pub const IGNORE: u8 = 255;
/// Detection classes, indexed by `Box3D::class_id`.
pub const VEHICLE_NAMES: [&str; 3] = ["car", "truck", "bus"];
const VEHICLE_BASE_DIMS: [[f64; 3]; 3] = [[4.0, 1.8, 1.5], [6.5, 2.4, 2.8], [10.0, 2.6, 3.2]];
const VEHICLE_COLORS: [[f64; 3]; 3] = [[0.85, 0.15, 0.12], [0.15, 0.35, 0.85], [0.95, 0.8, 0.1]];

pub const CAMERA_HEIGHT: f64 = 1.6;
pub const WALL_Z: f64 = 45.0;
pub const ROAD_HALF_WIDTH: f64 = 6.0;
pub const MIN_Z: f64 = 2.0;
pub const MAX_Z: f64 = 40.0;
/// Grid stride used to keep box centers in distinct detection cells.
pub const CELL: usize = 4;

pub fn semseg_of_vehicle(class_id: usize) -> u8 {
    3 + class_id as u8
}

pub fn vehicle_of_semseg(c: u8) -> Option<usize> {
    (3..=5).contains(&c).then(|| (c - 3) as usize)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub seed: u64,
    pub num_scenes: usize,
    pub height: usize,
    pub width: usize,
    pub min_boxes: usize,
    pub max_boxes: usize,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_scenes: 8,
            height: 64,
            width: 128,
            min_boxes: 1,
            max_boxes: 4,
        }
    }
}

impl GenSpec {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        let f = 0.75 * self.width as f64;
        CameraIntrinsics {
            fx: f,
            fy: f,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(CELL) || !self.width.is_multiple_of(CELL)
        {
            return Err(Error::Config(format!(
                "image size {}x{} must be a positive multiple of {CELL}",
                self.height, self.width
            )));
        }
        if self.min_boxes > self.max_boxes {
            return Err(Error::Config("min_boxes exceeds max_boxes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: String,
    /// `[3×H×W]`, values are multiples of 1/255.
    pub image: Tensor<f32>,
    /// `H·W` class ids, 255 = ignore.
    pub semseg: Vec<u8>,
    /// `H·W` depths (Z of the visible surface), 0 = invalid.
    pub depth: Vec<f32>,
    pub boxes: Vec<Box3D>,
    pub intrinsics: CameraIntrinsics,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:05}")
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-scene seed; depends only on `(seed, index, attempt)`.
pub fn scene_seed(seed: u64, index: usize, attempt: u32) -> u64 {
    mix(mix(seed ^ mix(index as u64)) ^ attempt as u64)
}

#[derive(Clone, Debug)]
struct Building {
    x0: f64,
    x1: f64,
    height: f64,
    color: [f64; 3],
}

/// Everything needed to render: the sampled layout of one scene.
#[derive(Clone, Debug)]
struct Layout {
    boxes: Vec<Box3D>,
    buildings: Vec<Building>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Surface {
    Vehicle(usize),
    Wall(usize),
    Road,
    Verge,
    Sky,
}

/// Entry distance and entry-face normal (camera frame) of a ray from the
/// origin along `dir` into the box, using the slab method in box coordinates.
pub fn ray_box(dir: [f64; 3], b: &Box3D) -> Option<(f64, [f64; 3])> {
    let r = b.rotation();
    // local = Rᵀ (p - c)
    let rt = |v: [f64; 3]| {
        [
            r[0][0] * v[0] + r[1][0] * v[1] + r[2][0] * v[2],
            r[0][1] * v[0] + r[1][1] * v[1] + r[2][1] * v[2],
            r[0][2] * v[0] + r[1][2] * v[1] + r[2][2] * v[2],
        ]
    };
    let o = rt([-b.center[0], -b.center[1], -b.center[2]]);
    let d = rt(dir);
    let half = [b.dims[0] / 2.0, b.dims[2] / 2.0, b.dims[1] / 2.0];
    let (mut t_in, mut t_out) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut axis_in = (0, 1.0);
    for a in 0..3 {
        if d[a].abs() < 1e-12 {
            if o[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let t1 = (-half[a] - o[a]) / d[a];
        let t2 = (half[a] - o[a]) / d[a];
        let (near, far, sign) = if t1 < t2 { (t1, t2, -1.0) } else { (t2, t1, 1.0) };
        if near > t_in {
            t_in = near;
            axis_in = (a, sign);
        }
        t_out = t_out.min(far);
    }
    if t_in > t_out || t_in <= 0.0 {
        return None;
    }
    let mut n_local = [0.0; 3];
    n_local[axis_in.0] = axis_in.1;
    Some((t_in, mat_vec(&r, n_local)))
}

fn sample_layout(spec: &GenSpec, k: &CameraIntrinsics, rng: &mut ChaCha8Rng) -> Option<Layout> {
    let mut buildings = Vec::new();
    let mut x = -120.0;
    while x < 120.0 {
        let w = rng.random_range(6.0..16.0);
        let g = rng.random_range(0.35..0.65);
        buildings.push(Building {
            x0: x,
            x1: x + w,
            height: rng.random_range(4.0..22.0),
            color: [g + rng.random_range(0.0..0.15), g, g - rng.random_range(0.0..0.12)],
        });
        x += w;
    }
    let n = rng.random_range(spec.min_boxes..=spec.max_boxes);
    let mut boxes: Vec<Box3D> = Vec::with_capacity(n);
    let (w_img, h_img) = (spec.width as f64, spec.height as f64);
    for _ in 0..n {
        let mut placed = None;
        for _ in 0..100 {
            let class_id = match rng.random_range(0.0..1.0) {
                p if p < 0.6 => 0,
                p if p < 0.8 => 1,
                _ => 2,
            };
            let base = VEHICLE_BASE_DIMS[class_id];
            let dims = base.map(|d| d * rng.random_range(0.9..1.1));
            let z = rng.random_range(MIN_Z..MAX_Z);
            let x_lim = z * k.cx / k.fx;
            let cand = Box3D {
                center: [rng.random_range(-x_lim..x_lim), CAMERA_HEIGHT - dims[2] / 2.0, z],
                dims,
                yaw: rng.random_range(-PI..PI),
                pitch: rng.random_range(-0.1..0.1),
                roll: rng.random_range(-0.1..0.1),
                class_id,
                score: 1.0,
            };
            if placeable(&cand, &boxes, k, w_img, h_img) {
                placed = Some(cand);
                break;
            }
        }
        boxes.push(placed?);
    }
    Some(Layout { boxes, buildings })
}

fn center_cell(b: &Box3D, k: &CameraIntrinsics) -> Option<(usize, usize)> {
    let (u, v) = k.project(b.center).ok()?;
    Some(((v / CELL as f64) as usize, (u / CELL as f64) as usize))
}

fn placeable(cand: &Box3D, others: &[Box3D], k: &CameraIntrinsics, w: f64, h: f64) -> bool {
    let Ok((u, v)) = k.project(cand.center) else {
        return false;
    };
    if !(u >= 0.0 && u < w && v >= 0.0 && v < h) {
        return false;
    }
    // keep the whole vehicle in front of the camera and in front of the wall
    if cand.corners().iter().any(|c| c[2] < 0.5 || c[2] > WALL_Z - 0.5) {
        return false;
    }
    let cell = center_cell(cand, k).expect("projects");
    others.iter().all(|o| {
        let oc = center_cell(o, k).expect("projects");
        let cheb = cell.0.abs_diff(oc.0).max(cell.1.abs_diff(oc.1));
        let (dx, dz) = (o.center[0] - cand.center[0], o.center[2] - cand.center[2]);
        let clearance = (o.dims[0] + cand.dims[0]) / 2.0 + 0.5;
        cheb >= 2 && (dx * dx + dz * dz).sqrt() > clearance
    })
}

fn trace(dir: [f64; 3], layout: &Layout) -> (Surface, f64, [f64; 3]) {
    let mut best = (Surface::Sky, f64::INFINITY, [0.0; 3]);
    for (i, b) in layout.boxes.iter().enumerate() {
        if let Some((t, n)) = ray_box(dir, b) {
            if t < best.1 {
                best = (Surface::Vehicle(i), t, n);
            }
        }
    }
    // the wall sits at Z = WALL_Z and rises from the ground to each roof line
    let (wx, wy) = (dir[0] * WALL_Z, dir[1] * WALL_Z);
    if WALL_Z < best.1 && wy <= CAMERA_HEIGHT {
        if let Some(bi) = layout.buildings.iter().position(|b| wx >= b.x0 && wx < b.x1) {
            if wy >= CAMERA_HEIGHT - layout.buildings[bi].height {
                best = (Surface::Wall(bi), WALL_Z, [0.0, 0.0, -1.0]);
            }
        }
    }
    if dir[1] > 0.0 {
        let t = CAMERA_HEIGHT / dir[1];
        if t < best.1 {
            let surf = if (dir[0] * t).abs() <= ROAD_HALF_WIDTH {
                Surface::Road
            } else {
                Surface::Verge
            };
            best = (surf, t, [0.0, -1.0, 0.0]);
        }
    }
    best
}

fn quantize(c: f64) -> f32 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8 as f32 / 255.0
}

fn render(spec: &GenSpec, k: &CameraIntrinsics, layout: &Layout, id: String) -> SceneSample {
    let (h, w) = (spec.height, spec.width);
    let mut image = vec![0.0f32; 3 * h * w];
    let mut semseg = vec![SKY; h * w];
    let mut depth = vec![0.0f32; h * w];
    let light = {
        let l = [0.35, -0.8, -0.5];
        let n: f64 = l[0] * l[0] + l[1] * l[1] + l[2] * l[2];
        let n = n.sqrt();
        [l[0] / n, l[1] / n, l[2] / n]
    };
    for i in 0..h {
        for j in 0..w {
            let dir = k.ray(j as f64 + 0.5, i as f64 + 0.5);
            let (surf, t, normal) = trace(dir, layout);
            let p = [dir[0] * t, dir[1] * t, t];
            let (class, color) = match surf {
                Surface::Vehicle(b) => {
                    let bx = &layout.boxes[b];
                    let lambert = (normal[0] * light[0] + normal[1] * light[1] + normal[2] * light[2]).max(0.0);
                    let shade = 0.35 + 0.65 * lambert;
                    (
                        semseg_of_vehicle(bx.class_id),
                        VEHICLE_COLORS[bx.class_id].map(|c| c * shade),
                    )
                }
                Surface::Wall(bi) => {
                    let b = &layout.buildings[bi];
                    // window grid
                    let win = ((p[0] - b.x0).rem_euclid(2.0) < 0.9) && ((CAMERA_HEIGHT - p[1]).rem_euclid(3.0) > 1.6);
                    let f = if win { 0.6 } else { 1.0 };
                    (BUILDING, b.color.map(|c| c * f))
                }
                Surface::Road => {
                    let lane = p[0].abs() < 0.12 && p[2].rem_euclid(6.0) < 3.0;
                    (ROAD, if lane { [0.9, 0.9, 0.85] } else { [0.32, 0.32, 0.34] })
                }
                Surface::Verge => (BACKGROUND, [0.28, 0.52, 0.22]),
                Surface::Sky => {
                    let a = (i as f64 / h as f64).min(1.0);
                    (SKY, [0.45 + 0.35 * a, 0.62 + 0.25 * a, 0.95])
                }
            };
            let pix = i * w + j;
            semseg[pix] = class;
            depth[pix] = if surf == Surface::Sky { 0.0 } else { t as f32 };
            for c in 0..3 {
                image[c * h * w + pix] = quantize(color[c]);
            }
        }
    }
    SceneSample {
        id,
        image: Tensor::new(&[3, h, w], image).expect("sized"),
        semseg,
        depth,
        boxes: layout.boxes.clone(),
        intrinsics: *k,
    }
}

/// Every box must own the pixel under its projected center.
fn centers_visible(s: &SceneSample) -> bool {
    let w = s.width();
    s.boxes.iter().all(|b| {
        let (u, v) = s.intrinsics.project(b.center).expect("in front");
        let pix = (v as usize) * w + u as usize;
        let dir = s.intrinsics.ray(u.floor() + 0.5, v.floor() + 0.5);
        let nearest = s
            .boxes
            .iter()
            .filter_map(|o| ray_box(dir, o).map(|(t, _)| (t, o)))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        matches!(nearest, Some((_, o)) if std::ptr::eq(o, b)) && s.semseg[pix] == semseg_of_vehicle(b.class_id)
    })
}

/// Deterministically generates scene `index` of `spec`.
pub fn generate_scene(spec: &GenSpec, index: usize) -> Result<SceneSample> {
    spec.validate()?;
    if index >= spec.num_scenes {
        return Err(Error::Contract(format!(
            "scene index {index} >= num_scenes {}",
            spec.num_scenes
        )));
    }
    let k = spec.intrinsics();
    for attempt in 0..64u32 {
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(spec.seed, index, attempt));
        let Some(layout) = sample_layout(spec, &k, &mut rng) else {
            info!("scene {index}: unplaceable box on attempt {attempt}, regenerating");
            continue;
        };
        let sample = render(spec, &k, &layout, scene_id(index));
        if centers_visible(&sample) {
            return Ok(sample);
        }
        info!("scene {index}: occluded box center on attempt {attempt}, regenerating");
    }
    Err(Error::Config(format!("could not lay out scene {index}")))
}

/// Generates all scenes of `spec` in parallel; output order is by index.
pub fn generate_all(spec: &GenSpec) -> Result<Vec<SceneSample>> {
    use rayon::prelude::*;
    (0..spec.num_scenes)
        .into_par_iter()
        .map(|i| generate_scene(spec, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation;

    /// Ray against the six face rectangles, each tested in its own plane.
    fn face_oracle(dir: [f64; 3], b: &Box3D) -> Option<f64> {
        let r = rotation(b.yaw, b.pitch, b.roll);
        let axes = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let half = [b.dims[0] / 2.0, b.dims[2] / 2.0, b.dims[1] / 2.0];
        let dot = |a: [f64; 3], c: [f64; 3]| a[0] * c[0] + a[1] * c[1] + a[2] * c[2];
        let mut best: Option<f64> = None;
        for a in 0..3 {
            for s in [-1.0, 1.0] {
                let n = axes[a];
                let p0 = [
                    b.center[0] + s * half[a] * n[0],
                    b.center[1] + s * half[a] * n[1],
                    b.center[2] + s * half[a] * n[2],
                ];
                let denom = dot(n, dir);
                if denom.abs() < 1e-12 {
                    continue;
                }
                let t = dot(n, p0) / denom;
                if t <= 0.0 {
                    continue;
                }
                let hit = [
                    dir[0] * t - b.center[0],
                    dir[1] * t - b.center[1],
                    dir[2] * t - b.center[2],
                ];
                let inside = (0..3)
                    .filter(|&o| o != a)
                    .all(|o| dot(hit, axes[o]).abs() <= half[o] + 1e-9);
                if inside && best.is_none_or(|bt| t < bt) {
                    best = Some(t);
                }
            }
        }
        best
    }

    fn spec(seed: u64) -> GenSpec {
        GenSpec {
            seed,
            ..GenSpec::default()
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(&spec(7), 3).unwrap();
        let b = generate_scene(&spec(7), 3).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&spec(8), 3).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn parallel_generation_matches_sequential() {
        let s = spec(3);
        let all = generate_all(&s).unwrap();
        for (i, scene) in all.iter().enumerate() {
            assert_eq!(scene, &generate_scene(&s, i).unwrap());
        }
    }

    #[test]
    fn no_vehicles_means_stuff_only() {
        let s = GenSpec {
            min_boxes: 0,
            max_boxes: 0,
            ..spec(1)
        };
        let scene = generate_scene(&s, 0).unwrap();
        assert!(scene.boxes.is_empty());
        assert!(scene.semseg.iter().all(|&c| vehicle_of_semseg(c).is_none()));
    }

    #[test]
    fn vehicle_depth_matches_face_oracle() {
        for idx in 0..4 {
            let scene = generate_scene(&spec(11), idx).unwrap();
            let (h, w) = (scene.height(), scene.width());
            let mut checked = 0;
            for i in 0..h {
                for j in 0..w {
                    let c = scene.semseg[i * w + j];
                    if vehicle_of_semseg(c).is_none() {
                        continue;
                    }
                    let dir = scene.intrinsics.ray(j as f64 + 0.5, i as f64 + 0.5);
                    let t = scene
                        .boxes
                        .iter()
                        .filter_map(|b| face_oracle(dir, b))
                        .fold(f64::INFINITY, f64::min);
                    assert!((scene.depth[i * w + j] as f64 - t).abs() < 1e-4 * t.max(1.0));
                    checked += 1;
                }
            }
            assert!(checked > 0);
        }
    }

    #[test]
    fn labels_are_consistent() {
        for idx in 0..8 {
            let scene = generate_scene(&spec(7), idx).unwrap();
            let w = scene.width();
            assert!((1..=4).contains(&scene.boxes.len()));
            for (pix, &c) in scene.semseg.iter().enumerate() {
                assert_eq!(c == SKY, scene.depth[pix] == 0.0, "pixel {pix}");
                assert!(scene.depth[pix] >= 0.0);
            }
            for b in &scene.boxes {
                assert!((MIN_Z..=MAX_Z).contains(&b.center[2]));
                let (u, v) = scene.intrinsics.project(b.center).unwrap();
                assert!(u >= 0.0 && u < w as f64 && v >= 0.0 && v < scene.height() as f64);
                let pix = v as usize * w + u as usize;
                assert_eq!(scene.semseg[pix], semseg_of_vehicle(b.class_id));
            }
            assert!(scene.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn generation_is_fast_enough() {
        let s = GenSpec {
            num_scenes: 100,
            ..spec(5)
        };
        let t0 = std::time::Instant::now();
        let all = generate_all(&s).unwrap();
        assert_eq!(all.len(), 100);
        assert!(t0.elapsed().as_secs_f64() < 10.0);
    }
}
