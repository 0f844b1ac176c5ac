//! Deterministic synthetic scenes: non-overlapping boxes on a ground plane,
//! LiDAR-like surface points, a ring of outward-facing cameras, and a teacher
//! BEV map with a planted per-target structure.

pub mod rng;
pub mod scn;

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::distill::BevFeatureMap;
use crate::error::{Error, Result};
use crate::geometry::{
    build_gt_depth_map, enlarge_box_bev, foreground_pixel_sets, BevGrid, Box3D, CameraModel, DepthMap,
    ForegroundDepthSet, RigidTransform,
};
use crate::numerics::Tensor;
use crate::par;
use rng::CounterRng;

pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

// stream ids
const STREAM_LAYOUT: u64 = 1;
const STREAM_POINTS: u64 = 2;
const STREAM_GROUND: u64 = 3;
const STREAM_BACKGROUND: u64 = 4;
const STREAM_PATTERN_BASE: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub seed: u64,
    pub num_boxes: usize,
    pub length_range: [f64; 2],
    pub width_range: [f64; 2],
    pub height_range: [f64; 2],
    /// Box centers are placed at a ground distance from the ego origin in this range.
    pub radius_range: [f64; 2],
    /// Minimum footprint clearance between boxes (m).
    pub min_gap: f64,
    pub num_cameras: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub hfov_deg: f64,
    pub camera_height: f64,
    pub z_near: f64,
    pub points_per_box: usize,
    pub ground_points: usize,
    pub ground_radius: f64,
    pub grid: BevGrid,
    pub channels: usize,
    /// Footprint scale of the planted teacher pattern.
    pub pattern_extent: f64,
    /// Width of the cosine taper outside the pattern footprint (m).
    pub smoothing_margin: f64,
    /// Std-dev of the teacher's background noise.
    pub background_noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            num_boxes: 4,
            length_range: [3.6, 4.8],
            width_range: [1.6, 2.0],
            height_range: [1.4, 1.9],
            radius_range: [7.0, 20.0],
            min_gap: 0.5,
            num_cameras: 6,
            image_width: 96,
            image_height: 54,
            hfov_deg: 70.0,
            camera_height: 1.6,
            z_near: crate::geometry::DEFAULT_Z_NEAR,
            points_per_box: 300,
            ground_points: 1500,
            ground_radius: 28.0,
            grid: BevGrid {
                x_min: -32.0,
                x_max: 32.0,
                y_min: -32.0,
                y_max: 32.0,
                height: 64,
                width: 64,
            },
            channels: 16,
            pattern_extent: 1.25,
            smoothing_margin: 0.75,
            background_noise: 0.02,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |r: [f64; 2], lo: f64| r[0] > lo && r[1] >= r[0] && r[1].is_finite();
        let checks = [
            (range_ok(self.length_range, 0.0), "length_range"),
            (range_ok(self.width_range, 0.0), "width_range"),
            (range_ok(self.height_range, 0.0), "height_range"),
            (range_ok(self.radius_range, -f64::MIN_POSITIVE), "radius_range"),
            (self.min_gap >= 0.0, "min_gap"),
            (self.num_cameras >= 1, "num_cameras"),
            (self.image_width >= 1 && self.image_height >= 1, "image size"),
            (self.hfov_deg > 0.0 && self.hfov_deg < 180.0, "hfov_deg"),
            (self.z_near > 0.0, "z_near"),
            (self.ground_radius > 0.0, "ground_radius"),
            (self.channels >= 1, "channels"),
            (self.pattern_extent >= 1.0, "pattern_extent"),
            (self.smoothing_margin >= 0.0, "smoothing_margin"),
            (self.background_noise >= 0.0, "background_noise"),
            (
                self.ground_points + self.num_boxes * self.points_per_box >= 1,
                "scene needs at least one point",
            ),
        ];
        if let Some((_, name)) = checks.iter().find(|(ok, _)| !ok) {
            return Err(Error::Config(format!("scene: invalid {name}")));
        }
        self.grid
            .validate()
            .map_err(|e| Error::Config(format!("scene grid: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub grid: BevGrid,
    pub boxes: Vec<Box3D>,
    /// `P x 3` world points.
    pub points: Tensor,
    /// Box index per point, `-1` for ground.
    pub labels: Vec<i64>,
    pub cameras: Vec<CameraModel>,
    pub teacher_bev: BevFeatureMap,
}

/// Ring camera `i` of `n`, looking horizontally outward at azimuth `2 pi i / n`.
pub fn ring_camera(cfg: &SceneConfig, i: usize) -> Result<CameraModel> {
    let yaw = 2.0 * PI * i as f64 / cfg.num_cameras as f64;
    let (s, c) = yaw.sin_cos();
    // rows: camera x (right), y (down), z (forward) in world coordinates
    let rot = Matrix3::new(s, -c, 0.0, 0.0, 0.0, -1.0, c, s, 0.0);
    let pos = Vector3::new(0.0, 0.0, cfg.camera_height);
    let world_to_cam = RigidTransform::new(rot, -(rot * pos))?;
    let w = cfg.image_width as f64;
    let f = 0.5 * w / (0.5 * cfg.hfov_deg.to_radians()).tan();
    Ok(CameraModel::new(
        f,
        f,
        0.5 * w,
        0.5 * cfg.image_height as f64,
        cfg.image_width,
        cfg.image_height,
        world_to_cam,
    )?
    .with_z_near(cfg.z_near))
}

fn footprints_overlap(a: &Box3D, b: &Box3D, gap: f64) -> bool {
    // separating-axis test on the two rectangles, each grown by gap/2
    let grow = |bx: &Box3D| {
        let mut g = *bx;
        g.size.x += gap;
        g.size.y += gap;
        g.bev_corners()
    };
    let (ca, cb) = (grow(a), grow(b));
    let axes = [a.yaw, a.yaw + PI / 2.0, b.yaw, b.yaw + PI / 2.0];
    axes.iter().all(|&ang| {
        let (s, c) = ang.sin_cos();
        let proj = |cs: &[[f64; 2]; 4]| {
            cs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                let d = p[0] * c + p[1] * s;
                (lo.min(d), hi.max(d))
            })
        };
        let (a0, a1) = proj(&ca);
        let (b0, b1) = proj(&cb);
        a1 >= b0 && b1 >= a0
    })
}

fn place_boxes(cfg: &SceneConfig) -> Result<Vec<Box3D>> {
    let mut rng = CounterRng::new(cfg.seed, STREAM_LAYOUT);
    let mut boxes: Vec<Box3D> = Vec::with_capacity(cfg.num_boxes);
    for j in 0..cfg.num_boxes {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let r = rng.range(cfg.radius_range[0], cfg.radius_range[1]);
            let theta = rng.range(-PI, PI);
            let size = Vector3::new(
                rng.range(cfg.length_range[0], cfg.length_range[1]),
                rng.range(cfg.width_range[0], cfg.width_range[1]),
                rng.range(cfg.height_range[0], cfg.height_range[1]),
            );
            let yaw = rng.range(-PI, PI);
            let center = Vector3::new(r * theta.cos(), r * theta.sin(), 0.5 * size.z);
            let candidate = Box3D::new(center, size, yaw)?;
            if boxes.iter().all(|b| !footprints_overlap(b, &candidate, cfg.min_gap)) {
                placed = Some(candidate);
                break;
            }
        }
        boxes.push(placed.ok_or(Error::Generation {
            box_index: j,
            attempts: MAX_PLACEMENT_ATTEMPTS,
        })?);
    }
    Ok(boxes)
}

// keeps sampled surface points strictly inside the faces under rounding
const SURFACE_INSET: f64 = 1e-7;

/// Area-weighted samples on the top and four side faces (no bottom).
fn surface_points(bx: &Box3D, count: usize, rng: &mut CounterRng) -> Vec<Vector3<f64>> {
    let half = bx.size * 0.5 - Vector3::repeat(SURFACE_INSET);
    let (l, w, h) = (bx.size.x, bx.size.y, bx.size.z);
    let areas = [l * w, w * h, w * h, l * h, l * h];
    let total: f64 = areas.iter().sum();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut pick = rng.uniform() * total;
        let mut face = areas.len() - 1;
        for (k, a) in areas.iter().enumerate() {
            if pick < *a {
                face = k;
                break;
            }
            pick -= a;
        }
        let a = rng.range(-1.0, 1.0);
        let b = rng.range(-1.0, 1.0);
        let local = match face {
            0 => Vector3::new(a * half.x, b * half.y, half.z),
            1 => Vector3::new(half.x, a * half.y, b * half.z),
            2 => Vector3::new(-half.x, a * half.y, b * half.z),
            3 => Vector3::new(a * half.x, half.y, b * half.z),
            _ => Vector3::new(a * half.x, -half.y, b * half.z),
        };
        let p = bx.to_world(&local);
        if bx.contains(&p) {
            out.push(p);
        }
    }
    out
}

/// Boxes, points and cameras for `cfg`, plus the teacher BEV map.
pub fn generate_scene(cfg: &SceneConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let boxes = place_boxes(cfg)?;
    let mut rng = CounterRng::new(cfg.seed, STREAM_POINTS);
    let mut coords = Vec::new();
    let mut labels = Vec::new();
    for (j, bx) in boxes.iter().enumerate() {
        for p in surface_points(bx, cfg.points_per_box, &mut rng) {
            coords.extend_from_slice(p.as_slice());
            labels.push(j as i64);
        }
    }
    let mut ground = CounterRng::new(cfg.seed, STREAM_GROUND);
    let mut accepted = 0;
    let max_attempts = 50 * cfg.ground_points.max(1);
    for _ in 0..max_attempts {
        if accepted == cfg.ground_points {
            break;
        }
        let r = cfg.ground_radius * ground.uniform().sqrt();
        let theta = ground.range(-PI, PI);
        let p = Vector3::new(r * theta.cos(), r * theta.sin(), 0.0);
        if boxes.iter().any(|b| b.contains(&p)) {
            continue;
        }
        coords.extend_from_slice(p.as_slice());
        labels.push(-1);
        accepted += 1;
    }
    if labels.is_empty() {
        return Err(Error::Config("scene produced no points".into()));
    }
    let points = Tensor::new(vec![labels.len(), 3], coords)?;
    let cameras = (0..cfg.num_cameras)
        .map(|i| ring_camera(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let mut scene = SyntheticScene {
        seed: cfg.seed,
        grid: cfg.grid,
        boxes,
        points,
        labels,
        cameras,
        teacher_bev: BevFeatureMap::new(
            Tensor::zeros(&[cfg.channels, cfg.grid.height, cfg.grid.width]),
            cfg.grid,
        )?,
    };
    scene.teacher_bev = generate_teacher_bev(&scene, cfg)?;
    Ok(scene)
}

/// Per-box pattern coefficients.
struct Pattern {
    amplitude: Vec<f64>,
    body: Vec<f64>,
    lateral: Vec<f64>,
}

impl Pattern {
    fn draw(seed: u64, box_index: usize, channels: usize) -> Self {
        let mut rng = CounterRng::new(seed, STREAM_PATTERN_BASE + box_index as u64);
        let amplitude = (0..channels).map(|_| rng.range(0.5, 1.5)).collect();
        let body = (0..channels).map(|_| 0.3 * rng.normal()).collect();
        let lateral = (0..channels).map(|_| 0.3 * rng.normal()).collect();
        Self {
            amplitude,
            body,
            lateral,
        }
    }

    /// Features at normalized box coordinates `u` (rear -1 .. front +1) and `v`.
    /// The first half of the channels carries a front signature, the second
    /// half a rear signature.
    fn eval(&self, u: f64, v: f64, out: &mut [f64], weight: f64) {
        let front = (0.5 * (1.0 + u)).powi(2);
        let rear = (0.5 * (1.0 - u)).powi(2);
        let half = out.len() / 2;
        for (c, o) in out.iter_mut().enumerate() {
            let part = if c < half { front } else { rear };
            *o += weight * (self.amplitude[c] * part + self.body[c] * (1.0 - u * u) + self.lateral[c] * v * 0.5);
        }
    }
}

/// Teacher BEV map: a smooth planted pattern inside each (enlarged) box
/// footprint, tapered to zero over `smoothing_margin`, plus seeded background noise.
pub fn generate_teacher_bev(scene: &SyntheticScene, cfg: &SceneConfig) -> Result<BevFeatureMap> {
    let grid = scene.grid;
    let (h, w, c) = (grid.height, grid.width, cfg.channels);
    let plane = h * w;
    let mut data = vec![0.0; c * plane];
    let mut noise = CounterRng::new(cfg.seed, STREAM_BACKGROUND);
    if cfg.background_noise > 0.0 {
        for v in data.iter_mut() {
            *v = cfg.background_noise * noise.normal();
        }
    }
    let mut cell = vec![0.0; c];
    for (j, bx) in scene.boxes.iter().enumerate() {
        let pattern = Pattern::draw(cfg.seed, j, c);
        let big = enlarge_box_bev(bx, cfg.pattern_extent)?;
        let (hl, hw) = (0.5 * big.size.x, 0.5 * big.size.y);
        let (s, co) = big.yaw.sin_cos();
        for r in 0..h {
            for col in 0..w {
                let xy = grid.bev_to_world([r as f64, col as f64]);
                let (dx, dy) = (xy[0] - big.center.x, xy[1] - big.center.y);
                let lx = co * dx + s * dy;
                let ly = -s * dx + co * dy;
                let ox = (lx.abs() - hl).max(0.0);
                let oy = (ly.abs() - hw).max(0.0);
                let dist = ox.hypot(oy);
                let weight = if dist == 0.0 {
                    1.0
                } else if dist < cfg.smoothing_margin {
                    0.5 * (1.0 + (PI * dist / cfg.smoothing_margin).cos())
                } else {
                    continue;
                };
                cell.iter_mut().for_each(|v| *v = 0.0);
                pattern.eval(
                    (lx / hl).clamp(-1.0, 1.0),
                    (ly / hw).clamp(-1.0, 1.0),
                    &mut cell,
                    weight,
                );
                for (k, v) in cell.iter().enumerate() {
                    data[k * plane + r * w + col] += v;
                }
            }
        }
    }
    BevFeatureMap::new(Tensor::new(vec![c, h, w], data)?, grid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewGroundTruth {
    pub camera: usize,
    pub depth: DepthMap,
    pub targets: Vec<ForegroundDepthSet>,
}

/// Dense depth and per-target foreground sets for every camera, in camera order.
pub fn render_gt_views(scene: &SyntheticScene) -> Result<Vec<ViewGroundTruth>> {
    par::map(&scene.cameras, |i, cam| -> Result<ViewGroundTruth> {
        Ok(ViewGroundTruth {
            camera: i,
            depth: build_gt_depth_map(cam, &scene.points)?,
            targets: foreground_pixel_sets(cam, &scene.boxes, &scene.points)?,
        })
    })
    .into_iter()
    .collect()
}
