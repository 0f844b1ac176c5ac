//! Pinhole cameras, yaw-oriented 3D boxes, the BEV grid mapping, and
//! ground-truth depth rasterization from projected LiDAR points.
//!
//! Conventions: world frame is z-up; camera frame is x right, y down, z
//! forward. Pixel `(row, col)` covers `[row, row+1) x [col, col+1)` in
//! continuous image coordinates and a projected point lands in pixel
//! `(floor(v), floor(u))`. On the BEV grid, cell `(row, col)` has its center at
//! continuous coordinate `(row, col)`, so the world extent maps to
//! `[-0.5, H-0.5] x [-0.5, W-0.5]`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_Z_NEAR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(Error::Argument(format!(
                "rotation is not proper orthonormal (|RtR - I| = {ortho:e}, det = {det})"
            )));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn compose(&self, inner: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * inner.rotation,
            translation: self.rotation * inner.translation + self.translation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub z_near: f64,
    pub world_to_cam: RigidTransform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub index: usize,
}

impl Projection {
    pub fn pixel(&self) -> Pixel {
        Pixel {
            row: self.v.floor() as usize,
            col: self.u.floor() as usize,
        }
    }
}

/// Integer image pixel. Ordering is row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pixel {
    pub row: usize,
    pub col: usize,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        world_to_cam: RigidTransform,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || width == 0 || height == 0 {
            return Err(Error::Argument(format!(
                "invalid intrinsics fx={fx} fy={fy} {width}x{height}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            z_near: DEFAULT_Z_NEAR,
            world_to_cam,
        })
    }

    pub fn with_z_near(mut self, z_near: f64) -> Self {
        self.z_near = z_near;
        self
    }

    /// Projects one world point ignoring the image bounds. `None` when the
    /// point is not in front of the near plane.
    pub fn project_unbounded(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let c = self.world_to_cam.apply(p);
        if c.z <= self.z_near {
            return None;
        }
        Some((self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy, c.z))
    }

    pub fn project_point(&self, p: &Vector3<f64>, index: usize) -> Option<Projection> {
        let (u, v, depth) = self.project_unbounded(p)?;
        let inside = u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64;
        inside.then_some(Projection { u, v, depth, index })
    }

    /// Inverse of projection: pixel coordinates plus camera depth back to world.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let c = Vector3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth);
        self.world_to_cam.inverse().apply(&c)
    }
}

pub(crate) fn point_row(points: &Tensor, i: usize) -> Vector3<f64> {
    let d = points.data();
    Vector3::new(d[3 * i], d[3 * i + 1], d[3 * i + 2])
}

fn check_points(points: &Tensor) -> Result<usize> {
    match points.shape() {
        [p, 3] => Ok(*p),
        s => Err(Error::Dimension(format!("points must be Px3, got {s:?}"))),
    }
}

/// In-frustum projections in point order.
pub fn project_points(cam: &CameraModel, points: &Tensor) -> Result<Vec<Projection>> {
    let n = check_points(points)?;
    Ok((0..n)
        .filter_map(|i| cam.project_point(&point_row(points, i), i))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: Vector3<f64>,
    /// length (local x), width (local y), height (z)
    pub size: Vector3<f64>,
    pub yaw: f64,
}

/// Wraps an angle to `(-pi, pi]`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut a = yaw % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

impl Box3D {
    pub fn new(center: Vector3<f64>, size: Vector3<f64>, yaw: f64) -> Result<Self> {
        if size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Argument(format!("box size must be positive, got {size:?}")));
        }
        Ok(Self {
            center,
            size,
            yaw: normalize_yaw(yaw),
        })
    }

    fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_axis_angle(&Vector3::z_axis(), self.yaw)
    }

    pub fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().inverse() * (p - self.center)
    }

    pub fn to_world(&self, local: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * local + self.center
    }

    /// Boundary-inclusive containment.
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let l = self.to_local(p);
        (0..3).all(|k| l[k].abs() <= 0.5 * self.size[k])
    }

    /// Footprint corners in world xy, counter-clockwise starting at (+l/2, +w/2).
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (hl, hw) = (0.5 * self.size.x, 0.5 * self.size.y);
        let (s, c) = self.yaw.sin_cos();
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
            .map(|(x, y)| [self.center.x + c * x - s * y, self.center.y + s * x + c * y])
    }

    /// Boundary-inclusive footprint test in world xy.
    pub fn footprint_contains(&self, xy: [f64; 2], tol: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (xy[0] - self.center.x, xy[1] - self.center.y);
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= 0.5 * self.size.x + tol && ly.abs() <= 0.5 * self.size.y + tol
    }
}

pub fn points_in_box(bx: &Box3D, points: &Tensor) -> Result<Vec<bool>> {
    let n = check_points(points)?;
    Ok((0..n).map(|i| bx.contains(&point_row(points, i))).collect())
}

/// Scales length and width by `factor`; height, center and yaw are untouched.
pub fn enlarge_box_bev(bx: &Box3D, factor: f64) -> Result<Box3D> {
    if !(factor >= 1.0) {
        return Err(Error::Argument(format!("enlarge factor must be >= 1, got {factor}")));
    }
    let mut out = *bx;
    out.size.x *= factor;
    out.size.y *= factor;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    /// `H x W`, zero where invalid.
    pub depth: Tensor,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Rasterizes projected points with a min-depth z-buffer.
pub fn build_gt_depth_map(cam: &CameraModel, points: &Tensor) -> Result<DepthMap> {
    let (h, w) = (cam.height, cam.width);
    let mut depth = Tensor::zeros(&[h, w]);
    let mut valid = vec![false; h * w];
    for p in project_points(cam, points)? {
        let px = p.pixel();
        let k = px.row * w + px.col;
        let d = &mut depth.data_mut()[k];
        if !valid[k] || p.depth < *d {
            *d = p.depth;
            valid[k] = true;
        }
    }
    Ok(DepthMap { depth, valid })
}

/// The foreground pixels of one target in one view, sorted row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForegroundDepthSet {
    pub target: usize,
    pub pixels: Vec<Pixel>,
    pub gt_depth: Vec<f64>,
    pub skipped: bool,
    /// Image position `(u, v)` of the projected 3D box center, when it lies in
    /// front of the camera.
    pub projected_center: Option<[f64; 2]>,
}

impl ForegroundDepthSet {
    pub fn new(target: usize, entries: Vec<(Pixel, f64)>) -> Self {
        let mut entries = entries;
        entries.sort_by_key(|e| e.0);
        entries.dedup_by(|b, a| {
            if a.0 == b.0 {
                a.1 = a.1.min(b.1);
                true
            } else {
                false
            }
        });
        let skipped = entries.len() < 2;
        let (pixels, gt_depth) = entries.into_iter().unzip();
        Self {
            target,
            pixels,
            gt_depth,
            skipped,
            projected_center: None,
        }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn position(&self, px: Pixel) -> Option<usize> {
        self.pixels.binary_search(&px).ok()
    }
}

/// Per-box foreground pixel sets for one camera, in box order.
pub fn foreground_pixel_sets(cam: &CameraModel, boxes: &[Box3D], points: &Tensor) -> Result<Vec<ForegroundDepthSet>> {
    let projections = project_points(cam, points)?;
    Ok(crate::par::map(boxes, |j, bx| {
        let entries = projections
            .iter()
            .filter(|p| bx.contains(&point_row(points, p.index)))
            .map(|p| (p.pixel(), p.depth))
            .collect();
        let mut set = ForegroundDepthSet::new(j, entries);
        set.projected_center = cam.project_unbounded(&bx.center).map(|(u, v, _)| [u, v]);
        set
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub height: usize,
    pub width: usize,
}

impl BevGrid {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, height: usize, width: usize) -> Result<Self> {
        let g = Self {
            x_min,
            x_max,
            y_min,
            y_max,
            height,
            width,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_max > self.x_min && self.y_max > self.y_min) || self.height == 0 || self.width == 0 {
            return Err(Error::Argument(format!("degenerate BEV grid {self:?}")));
        }
        Ok(())
    }

    pub fn cell_size(&self) -> (f64, f64) {
        (
            (self.y_max - self.y_min) / self.height as f64,
            (self.x_max - self.x_min) / self.width as f64,
        )
    }

    /// World xy to continuous `(row, col)`; rows follow y, columns follow x.
    pub fn world_to_bev(&self, xy: [f64; 2]) -> [f64; 2] {
        [
            (xy[1] - self.y_min) / (self.y_max - self.y_min) * self.height as f64 - 0.5,
            (xy[0] - self.x_min) / (self.x_max - self.x_min) * self.width as f64 - 0.5,
        ]
    }

    pub fn bev_to_world(&self, rc: [f64; 2]) -> [f64; 2] {
        [
            (rc[1] + 0.5) / self.width as f64 * (self.x_max - self.x_min) + self.x_min,
            (rc[0] + 0.5) / self.height as f64 * (self.y_max - self.y_min) + self.y_min,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis_cam() -> CameraModel {
        CameraModel::new(100.0, 100.0, 50.0, 50.0, 100, 100, RigidTransform::identity()).unwrap()
    }

    fn pts(rows: &[[f64; 3]]) -> Tensor {
        Tensor::new(vec![rows.len(), 3], rows.concat()).unwrap()
    }

    #[test]
    fn projection_examples() {
        let cam = axis_cam();
        let p = project_points(&cam, &pts(&[[0.0, 0.0, 10.0], [0.0, 0.0, -1.0], [0.0, 0.0, 0.05]])).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].u, p[0].v, p[0].depth, p[0].index), (50.0, 50.0, 10.0, 0));
        // off the right edge
        assert!(project_points(&cam, &pts(&[[6.0, 0.0, 10.0]])).unwrap().is_empty());
    }

    #[test]
    fn rigid_transform_validation() {
        let bad = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(RigidTransform::new(bad, Vector3::zeros()).is_err());
        let r = Rotation3::from_euler_angles(0.3, -0.2, 1.1).into_inner();
        let t = RigidTransform::new(r, Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let p = Vector3::new(0.4, -5.0, 2.0);
        assert!((t.inverse().apply(&t.apply(&p)) - p).norm() < 1e-12);
    }

    #[test]
    fn containment_examples() {
        let bx = Box3D::new(Vector3::new(1.0, 2.0, 0.5), Vector3::new(4.0, 2.0, 1.0), 0.0).unwrap();
        let eps = 1e-9;
        let mask = points_in_box(
            &bx,
            &pts(&[[1.0, 2.0, 0.5], [3.0 + eps, 2.0, 0.5], [3.0, 2.0, 0.5], [1.0, 3.0, 1.0]]),
        )
        .unwrap();
        assert_eq!(mask, vec![true, false, true, true]);
        assert!(Box3D::new(Vector3::zeros(), Vector3::new(1.0, 0.0, 1.0), 0.0).is_err());
    }

    #[test]
    fn yaw_normalization() {
        assert_eq!(normalize_yaw(PI), PI);
        assert!((normalize_yaw(-PI) - PI).abs() < 1e-15);
        assert!((normalize_yaw(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn z_buffer_keeps_nearest() {
        let cam = axis_cam();
        // both land in pixel (50, 50)
        let dm = build_gt_depth_map(&cam, &pts(&[[0.0, 0.0, 5.0], [0.0, 0.0, 3.0]])).unwrap();
        assert_eq!(dm.valid_count(), 1);
        assert_eq!(dm.depth.at2(50, 50), 3.0);
        let empty = build_gt_depth_map(&cam, &Tensor::zeros(&[1, 3])).unwrap();
        assert_eq!(empty.valid_count(), 0);
        let one = build_gt_depth_map(&cam, &pts(&[[0.1, 0.2, 4.0]])).unwrap();
        assert_eq!(one.valid_count(), 1);
        assert_eq!(one.depth.at2(55, 52), 4.0);
    }

    #[test]
    fn foreground_sets_are_independent_per_box() {
        let cam = axis_cam();
        let a = Box3D::new(Vector3::new(0.0, 0.0, 10.0), Vector3::new(2.0, 2.0, 2.0), 0.0).unwrap();
        let b = Box3D::new(Vector3::new(1.4, 0.0, 10.0), Vector3::new(2.0, 2.0, 2.0), 0.0).unwrap();
        let far = Box3D::new(Vector3::new(0.0, 0.0, 50.0), Vector3::new(1.0, 1.0, 1.0), 0.0).unwrap();
        let points = pts(&[[0.5, 0.0, 10.0], [0.0, 0.5, 9.5], [-0.9, 0.0, 10.0]]);
        let sets = foreground_pixel_sets(&cam, &[a, b, far], &points).unwrap();
        assert_eq!(sets[0].len(), 3);
        assert_eq!(sets[1].len(), 1);
        assert!(sets[1].skipped && sets[2].skipped && !sets[0].skipped);
        assert!(sets[2].is_empty());
        assert!(sets[0].pixels.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn enlarge_examples() {
        let bx = Box3D::new(Vector3::new(1.0, 1.0, 1.0), Vector3::new(4.0, 2.0, 1.5), 0.3).unwrap();
        assert_eq!(enlarge_box_bev(&bx, 1.0).unwrap(), bx);
        let e = enlarge_box_bev(&bx, 1.25).unwrap();
        assert_eq!(e.size, Vector3::new(5.0, 2.5, 1.5));
        assert_eq!((e.center, e.yaw), (bx.center, bx.yaw));
        assert!(enlarge_box_bev(&bx, 0.9).is_err());
    }

    #[test]
    fn bev_mapping_conventions() {
        let g = BevGrid::new(-32.0, 32.0, -16.0, 16.0, 32, 64).unwrap();
        assert_eq!(g.world_to_bev([0.0, 0.0]), [15.5, 31.5]);
        assert_eq!(g.world_to_bev([-32.0, -16.0]), [-0.5, -0.5]);
        let back = g.bev_to_world(g.world_to_bev([3.25, -7.5]));
        assert!((back[0] - 3.25).abs() < 1e-12 && (back[1] + 7.5).abs() < 1e-12);
        assert!(BevGrid::new(1.0, 1.0, 0.0, 1.0, 1, 1).is_err());
    }
}
