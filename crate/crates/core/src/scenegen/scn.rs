//! `SCN 1` scene files.
//!
//! ```text
//! SCN 1
//! seed <u64>
//! grid <x_min> <x_max> <y_min> <y_max> <H_bev> <W_bev>
//! cameras <n>
//! camera <fx> <fy> <cx> <cy> <width> <height> <z_near>
//! rotation <r00> <r01> <r02> <r10> ... <r22>        (world-to-camera, row-major)
//! translation <tx> <ty> <tz>
//! ...                                               (camera/rotation/translation per camera)
//! boxes <m>
//! box <cx> <cy> <cz> <length> <width> <height> <yaw>
//! ...
//! labels <P>
//! <label_0> ... <label_{P-1}>                       (box index, -1 for ground)
//! points
//! TSR 1                                             (embedded P x 3 tensor)
//! ...
//! ```
//!
//! The teacher BEV map travels separately as a `C x H_bev x W_bev` TSR file
//! whose grid is the one declared here. Reals use shortest round-trip
//! formatting, so write -> read -> write is byte-identical.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};

use super::SyntheticScene;
use crate::distill::BevFeatureMap;
use crate::error::{Error, Result};
use crate::geometry::{BevGrid, Box3D, CameraModel, RigidTransform};
use crate::numerics::Tensor;

/// Geometry part of a scene as read from an SCN file.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGeometry {
    pub seed: u64,
    pub grid: BevGrid,
    pub cameras: Vec<CameraModel>,
    pub boxes: Vec<Box3D>,
    pub labels: Vec<i64>,
    pub points: Tensor,
}

impl SceneGeometry {
    pub fn with_teacher(self, teacher: Tensor) -> Result<SyntheticScene> {
        let teacher_bev = BevFeatureMap::new(teacher, self.grid)?;
        Ok(SyntheticScene {
            seed: self.seed,
            grid: self.grid,
            boxes: self.boxes,
            points: self.points,
            labels: self.labels,
            cameras: self.cameras,
            teacher_bev,
        })
    }
}

fn join(vals: &[f64]) -> String {
    vals.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
}

pub fn write_scn(scene: &SyntheticScene) -> String {
    let mut s = String::from("SCN 1\n");
    let g = &scene.grid;
    writeln!(s, "seed {}", scene.seed).unwrap();
    writeln!(
        s,
        "grid {} {} {}",
        join(&[g.x_min, g.x_max, g.y_min, g.y_max]),
        g.height,
        g.width
    )
    .unwrap();
    writeln!(s, "cameras {}", scene.cameras.len()).unwrap();
    for cam in &scene.cameras {
        writeln!(
            s,
            "camera {} {} {} {}",
            join(&[cam.fx, cam.fy, cam.cx, cam.cy]),
            cam.width,
            cam.height,
            join(&[cam.z_near])
        )
        .unwrap();
        let r = &cam.world_to_cam.rotation;
        let rows: Vec<f64> = (0..3).flat_map(|i| (0..3).map(move |j| r[(i, j)])).collect();
        writeln!(s, "rotation {}", join(&rows)).unwrap();
        writeln!(s, "translation {}", join(cam.world_to_cam.translation.as_slice())).unwrap();
    }
    writeln!(s, "boxes {}", scene.boxes.len()).unwrap();
    for b in &scene.boxes {
        let c = b.center;
        let z = b.size;
        writeln!(s, "box {}", join(&[c.x, c.y, c.z, z.x, z.y, z.z, b.yaw])).unwrap();
    }
    writeln!(s, "labels {}", scene.labels.len()).unwrap();
    let labels: Vec<String> = scene.labels.iter().map(i64::to_string).collect();
    s.push_str(&labels.join(" "));
    s.push('\n');
    s.push_str("points\n");
    s.push_str(&scene.points.to_tsr());
    s
}

struct Lines<'a> {
    inner: std::iter::Peekable<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self) -> Result<&'a str> {
        loop {
            self.line += 1;
            let l = self
                .inner
                .next()
                .ok_or_else(|| Error::Parse(format!("SCN: unexpected end of file at line {}", self.line)))?;
            if !l.trim().is_empty() {
                return Ok(l);
            }
        }
    }

    /// Next line, which must start with `key`; returns the remaining tokens.
    fn keyed(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let line = self.next_line()?;
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some(k) if k == key => Ok(toks.collect()),
            other => Err(Error::Parse(format!(
                "SCN line {}: expected `{key}`, found {other:?}",
                self.line
            ))),
        }
    }
}

fn parse<T: std::str::FromStr>(tok: &str, what: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    tok.parse::<T>()
        .map_err(|e| Error::Parse(format!("SCN {what} {tok:?}: {e}")))
}

fn reals(toks: &[&str], n: usize, what: &str) -> Result<Vec<f64>> {
    if toks.len() != n {
        return Err(Error::Parse(format!(
            "SCN {what}: expected {n} values, got {}",
            toks.len()
        )));
    }
    toks.iter().map(|t| parse::<f64>(t, what)).collect()
}

pub fn read_scn(text: &str) -> Result<SceneGeometry> {
    let mut lines = Lines {
        inner: text.lines().peekable(),
        line: 0,
    };
    if lines.next_line()?.trim() != "SCN 1" {
        return Err(Error::Parse("SCN: bad header".into()));
    }
    let seed = match lines.keyed("seed")?.as_slice() {
        [v] => parse::<u64>(v, "seed")?,
        _ => return Err(Error::Parse("SCN seed".into())),
    };
    let g = lines.keyed("grid")?;
    if g.len() != 6 {
        return Err(Error::Parse("SCN grid: expected 6 values".into()));
    }
    let ext = reals(&g[..4], 4, "grid")?;
    let grid = BevGrid::new(
        ext[0],
        ext[1],
        ext[2],
        ext[3],
        parse(g[4], "grid")?,
        parse(g[5], "grid")?,
    )?;

    let n_cam: usize = match lines.keyed("cameras")?.as_slice() {
        [v] => parse(v, "cameras")?,
        _ => return Err(Error::Parse("SCN cameras".into())),
    };
    let mut cameras = Vec::with_capacity(n_cam);
    for _ in 0..n_cam {
        let c = lines.keyed("camera")?;
        if c.len() != 7 {
            return Err(Error::Parse("SCN camera: expected 7 values".into()));
        }
        let k = reals(&c[..4], 4, "camera")?;
        let (w, h): (usize, usize) = (parse(c[4], "camera")?, parse(c[5], "camera")?);
        let z_near: f64 = parse(c[6], "camera")?;
        let r = reals(&lines.keyed("rotation")?, 9, "rotation")?;
        let t = reals(&lines.keyed("translation")?, 3, "translation")?;
        let xf = RigidTransform::new(Matrix3::from_row_slice(&r), Vector3::from_column_slice(&t))?;
        cameras.push(CameraModel::new(k[0], k[1], k[2], k[3], w, h, xf)?.with_z_near(z_near));
    }

    let n_box: usize = match lines.keyed("boxes")?.as_slice() {
        [v] => parse(v, "boxes")?,
        _ => return Err(Error::Parse("SCN boxes".into())),
    };
    let mut boxes = Vec::with_capacity(n_box);
    for _ in 0..n_box {
        let b = reals(&lines.keyed("box")?, 7, "box")?;
        boxes.push(Box3D::new(
            Vector3::new(b[0], b[1], b[2]),
            Vector3::new(b[3], b[4], b[5]),
            b[6],
        )?);
    }

    let n_labels: usize = match lines.keyed("labels")?.as_slice() {
        [v] => parse(v, "labels")?,
        _ => return Err(Error::Parse("SCN labels".into())),
    };
    let mut labels = Vec::with_capacity(n_labels);
    while labels.len() < n_labels {
        for tok in lines.next_line()?.split_whitespace() {
            labels.push(parse::<i64>(tok, "label")?);
        }
    }
    if labels.len() != n_labels {
        return Err(Error::Parse("SCN: label count mismatch".into()));
    }
    if !lines.keyed("points")?.is_empty() {
        return Err(Error::Parse("SCN points: unexpected tokens".into()));
    }
    let points = Tensor::read_tsr(&mut lines.inner)?;
    if points.shape() != [n_labels, 3] {
        return Err(Error::Parse(format!(
            "SCN points {:?} vs {n_labels} labels",
            points.shape()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l < -1 || l >= n_box as i64) {
        return Err(Error::Parse(format!("SCN label {l} out of range")));
    }
    Ok(SceneGeometry {
        seed,
        grid,
        cameras,
        boxes,
        labels,
        points,
    })
}
