//! Brute-force reference implementations, written independently of the
//! optimized kernels, and an equivalence sweep comparing the two.

use serde::{Deserialize, Serialize};

use crate::depth::{
    absolute_depth_loss, inner_depth_loss, select_reference, CategoricalDepthMap, DepthBins, InnerDepthOptions,
    LossReduction, ReferenceStrategy,
};
use crate::distill::{
    bilinear_sample, inter_channel_gram, inter_keypoint_gram, BevFeatureMap, GramNormalization, KeypointSet,
};
use crate::error::Result;
use crate::geometry::{BevGrid, Box3D, CameraModel, ForegroundDepthSet, Pixel, RigidTransform};
use crate::numerics::Tensor;
use crate::par;
use crate::scenegen::rng::CounterRng;

/// `G[a][b] = sum_n F[n][a] F[n][b]` by explicit triple loop.
pub fn channel_gram(f: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let c = f.first().map_or(0, Vec::len);
    let mut g = vec![vec![0.0; c]; c];
    for a in 0..c {
        for b in 0..c {
            for row in f {
                g[a][b] += row[a] * row[b];
            }
        }
    }
    g
}

/// `G[i][j] = sum_c F[i][c] F[j][c]` by explicit triple loop.
#[allow(clippy::needless_range_loop)]
pub fn keypoint_gram(f: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = f.len();
    let mut g = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            for c in 0..f[i].len() {
                g[i][j] += f[i][c] * f[j][c];
            }
        }
    }
    g
}

/// First index of the smallest `|gt - pred|` (or signed `gt - pred`).
pub fn reference_scan(gt: &[f64], pred: &[f64], signed: bool) -> usize {
    let score = |i: usize| {
        if signed {
            gt[i] - pred[i]
        } else {
            (gt[i] - pred[i]).abs()
        }
    };
    let mut best = 0;
    for i in 1..gt.len() {
        if score(i) < score(best) {
            best = i;
        }
    }
    best
}

/// Bilinear value at fractional `(row, col)` as a tent-weighted sum over every
/// cell, with the point clamped to the cell-center extent.
pub fn bilinear_tent(plane: &[Vec<f64>], p: [f64; 2]) -> f64 {
    let h = plane.len();
    let w = plane[0].len();
    let pr = p[0].max(0.0).min((h - 1) as f64);
    let pc = p[1].max(0.0).min((w - 1) as f64);
    let mut acc = 0.0;
    for (r, row) in plane.iter().enumerate() {
        let wr = (1.0 - (r as f64 - pr).abs()).max(0.0);
        if wr == 0.0 {
            continue;
        }
        for (c, v) in row.iter().enumerate() {
            let wc = (1.0 - (c as f64 - pc).abs()).max(0.0);
            acc += wr * wc * v;
        }
    }
    acc
}

fn softmax_naive(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Inner-depth loss of one target from per-pixel logits, reference `r`.
pub fn inner_depth_scalar(logits: &[Vec<f64>], centers: &[f64], gt: &[f64], r: usize, mean: bool) -> f64 {
    let pred: Vec<f64> = logits
        .iter()
        .map(|l| softmax_naive(l).iter().zip(centers).map(|(p, c)| p * c).sum())
        .collect();
    let mut acc = 0.0;
    for i in 0..gt.len() {
        let e = (pred[i] - pred[r]) - (gt[i] - gt[r]);
        acc += e * e;
    }
    if mean {
        acc / gt.len() as f64
    } else {
        acc
    }
}

/// Binary cross-entropy of one pixel's clamped probabilities against a one-hot target.
pub fn bce_scalar(probs: &[f64], target: usize) -> f64 {
    let eps = 1e-7;
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        let p = p.max(eps).min(1.0 - eps);
        acc -= if k == target { p.ln() } else { (1.0 - p).ln() };
    }
    acc
}

/// Pinhole projection with explicit scalar arithmetic. `rot` is row-major.
#[allow(clippy::too_many_arguments)]
pub fn project_scalar(
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rot: &[f64; 9],
    t: &[f64; 3],
    z_near: f64,
    p: [f64; 3],
) -> Option<(f64, f64, f64)> {
    let x = rot[0] * p[0] + rot[1] * p[1] + rot[2] * p[2] + t[0];
    let y = rot[3] * p[0] + rot[4] * p[1] + rot[5] * p[2] + t[1];
    let z = rot[6] * p[0] + rot[7] * p[1] + rot[8] * p[2] + t[2];
    if z <= z_near {
        return None;
    }
    Some((fx * x / z + cx, fy * y / z + cy, z))
}

/// Containment as the intersection of the four footprint edge half-planes
/// (counter-clockwise corners) and the vertical slab.
pub fn box_contains_halfspace(center: [f64; 3], size: [f64; 3], yaw: f64, p: [f64; 3]) -> bool {
    let (s, c) = (yaw.sin(), yaw.cos());
    let corner = |a: f64, b: f64| {
        let (x, y) = (a * size[0] / 2.0, b * size[1] / 2.0);
        [center[0] + c * x - s * y, center[1] + s * x + c * y]
    };
    let ring = [
        corner(1.0, 1.0),
        corner(-1.0, 1.0),
        corner(-1.0, -1.0),
        corner(1.0, -1.0),
    ];
    for k in 0..4 {
        let a = ring[k];
        let b = ring[(k + 1) % 4];
        let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        if cross < 0.0 {
            return false;
        }
    }
    (p[2] - center[2]).abs() <= size[2] / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    pub instances: usize,
    /// Instances too close to a decision boundary to compare.
    pub excluded: usize,
    /// Largest `|lib - oracle| / max(1, |oracle|)`; 1 per discrete mismatch.
    pub max_error: f64,
    pub passed: bool,
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn rows(rng: &mut CounterRng, n: usize, c: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..c).map(|_| rng.normal()).collect()).collect()
}

fn to_tensor(r: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(r).unwrap()
}

fn mat_err(lib: &Tensor, oracle: &[Vec<f64>]) -> f64 {
    let c = oracle.len().max(1);
    oracle
        .iter()
        .flatten()
        .enumerate()
        .map(|(i, v)| rel(lib.at2(i / c, i % c), *v))
        .fold(0.0, f64::max)
}

type Instance = Result<Option<f64>>;

fn gram_instance(rng: &mut CounterRng, keypoint: bool) -> Instance {
    let n = 1 + rng.index(16);
    let c = 1 + rng.index(16);
    let f = rows(rng, n, c);
    Ok(Some(if keypoint {
        mat_err(
            &inter_keypoint_gram(&to_tensor(&f), GramNormalization::None)?,
            &keypoint_gram(&f),
        )
    } else {
        mat_err(
            &inter_channel_gram(&to_tensor(&f), GramNormalization::None)?,
            &channel_gram(&f),
        )
    }))
}

fn reference_instance(rng: &mut CounterRng) -> Instance {
    let n = 2 + rng.index(9);
    // coarse values make exact ties common
    let entries: Vec<(Pixel, f64)> = (0..n)
        .map(|i| (Pixel { row: 0, col: i }, 1.0 + rng.index(8) as f64 * 0.5))
        .collect();
    let set = ForegroundDepthSet::new(0, entries);
    let pred: Vec<f64> = (0..n).map(|_| 1.0 + rng.index(8) as f64 * 0.5).collect();
    let signed = rng.index(2) == 1;
    let lib = select_reference(&set, &pred, None, ReferenceStrategy::AllToAdaptiveSmallestError, signed)?;
    let ok = lib == Some(reference_scan(&set.gt_depth, &pred, signed));
    Ok(Some(if ok { 0.0 } else { 1.0 }))
}

fn bilinear_instance(rng: &mut CounterRng) -> Instance {
    let (c, h, w) = (1 + rng.index(3), 1 + rng.index(7), 1 + rng.index(7));
    let planes: Vec<Vec<Vec<f64>>> = (0..c).map(|_| rows(rng, h, w)).collect();
    let data: Vec<f64> = planes.iter().flatten().flatten().copied().collect();
    let grid = BevGrid::new(0.0, w as f64, 0.0, h as f64, h, w)?;
    let feat = BevFeatureMap::new(Tensor::new(vec![c, h, w], data)?, grid)?;
    let points: Vec<[f64; 2]> = (0..5)
        .map(|_| [rng.range(-1.5, h as f64 + 0.5), rng.range(-1.5, w as f64 + 0.5)])
        .collect();
    let kp = KeypointSet {
        target: 0,
        points: points.clone(),
        g: 0,
        clipped: false,
    };
    let lib = bilinear_sample(&feat, &kp);
    let mut err = 0.0_f64;
    for (i, p) in points.iter().enumerate() {
        for (ch, plane) in planes.iter().enumerate() {
            err = err.max(rel(lib.at2(i, ch), bilinear_tent(plane, *p)));
        }
    }
    Ok(Some(err))
}

fn inner_depth_instance(rng: &mut CounterRng) -> Instance {
    let d = 2 + rng.index(7);
    let n = 2 + rng.index(6);
    let bins = DepthBins::uniform(d, 1.0, 30.0)?;
    let logits = rows(rng, n, d);
    let gt: Vec<f64> = (0..n).map(|_| rng.range(1.0, 30.0)).collect();
    let mut data = vec![0.0; d * n];
    for (i, l) in logits.iter().enumerate() {
        for k in 0..d {
            data[k * n + i] = 1.5 * l[k];
        }
    }
    let scaled: Vec<Vec<f64>> = logits.iter().map(|l| l.iter().map(|x| 1.5 * x).collect()).collect();
    let map = CategoricalDepthMap::new(Tensor::new(vec![d, 1, n], data)?)?;
    let set = ForegroundDepthSet::new(0, (0..n).map(|i| (Pixel { row: 0, col: i }, gt[i])).collect());
    let mean = rng.index(2) == 0;
    let opts = InnerDepthOptions {
        reduction: if mean { LossReduction::Mean } else { LossReduction::Sum },
        ..InnerDepthOptions::default()
    };
    let lib = inner_depth_loss(std::slice::from_ref(&set), &map, &bins, &opts)?;
    let r = match lib.references[0] {
        crate::depth::Reference::Pixel(r) => r,
        _ => return Ok(Some(1.0)),
    };
    Ok(Some(rel(
        lib.result.value,
        inner_depth_scalar(&scaled, bins.centers(), &gt, r, mean),
    )))
}

fn bce_instance(rng: &mut CounterRng) -> Instance {
    let d = 2 + rng.index(7);
    let bins = DepthBins::uniform(d, 1.0, 30.0)?;
    // occasional large logits push probabilities into the clamp
    let scale = if rng.index(4) == 0 { 40.0 } else { 2.0 };
    let logits: Vec<f64> = (0..d).map(|_| scale * rng.normal()).collect();
    let gt = rng.range(1.0, 30.0);
    let map = CategoricalDepthMap::new(Tensor::new(vec![d, 1, 1], logits.clone())?)?;
    let lib = absolute_depth_loss(&map, &Tensor::new(vec![1, 1], vec![gt])?, &[true], &bins)?;
    // nearest center by linear scan, lower index on ties
    let mut target = 0;
    for (k, c) in bins.centers().iter().enumerate() {
        if (c - gt).abs() < (bins.centers()[target] - gt).abs() {
            target = k;
        }
    }
    Ok(Some(rel(lib.value, bce_scalar(&softmax_naive(&logits), target))))
}

fn random_camera(rng: &mut CounterRng) -> Result<CameraModel> {
    let yaw = rng.range(-3.1, 3.1);
    let (s, c) = yaw.sin_cos();
    let r = nalgebra::Matrix3::new(s, -c, 0.0, 0.0, 0.0, -1.0, c, s, 0.0);
    let t = nalgebra::Vector3::new(rng.range(-2.0, 2.0), rng.range(-2.0, 2.0), rng.range(-2.0, 2.0));
    let f = rng.range(30.0, 120.0);
    CameraModel::new(
        f,
        f * rng.range(0.9, 1.1),
        48.0,
        27.0,
        96,
        54,
        RigidTransform::new(r, t)?,
    )
}

fn projection_instance(rng: &mut CounterRng) -> Instance {
    let cam = random_camera(rng)?;
    let r = &cam.world_to_cam.rotation;
    let rot: [f64; 9] = std::array::from_fn(|i| r[(i / 3, i % 3)]);
    let t: [f64; 3] = std::array::from_fn(|i| cam.world_to_cam.translation[i]);
    let mut err = 0.0_f64;
    for _ in 0..8 {
        let p = [rng.range(-30.0, 30.0), rng.range(-30.0, 30.0), rng.range(-3.0, 3.0)];
        let lib = cam.project_unbounded(&nalgebra::Vector3::from(p));
        let ora = project_scalar(cam.fx, cam.fy, cam.cx, cam.cy, &rot, &t, cam.z_near, p);
        err = err.max(match (lib, ora) {
            (None, None) => 0.0,
            (Some(a), Some(b)) => rel(a.0, b.0).max(rel(a.1, b.1)).max(rel(a.2, b.2)),
            _ => 1.0,
        });
    }
    Ok(Some(err))
}

fn containment_instance(rng: &mut CounterRng) -> Instance {
    let center = [rng.range(-10.0, 10.0), rng.range(-10.0, 10.0), rng.range(0.0, 2.0)];
    let size = [rng.range(0.5, 5.0), rng.range(0.5, 3.0), rng.range(0.5, 2.5)];
    let yaw = rng.range(-3.1, 3.1);
    let bx = Box3D::new(nalgebra::Vector3::from(center), nalgebra::Vector3::from(size), yaw)?;
    let local = [
        rng.range(-0.7, 0.7) * size[0],
        rng.range(-0.7, 0.7) * size[1],
        rng.range(-0.7, 0.7) * size[2],
    ];
    let margin = (0..3)
        .map(|k| (local[k].abs() - 0.5 * size[k]).abs())
        .fold(f64::INFINITY, f64::min);
    if margin < 1e-9 {
        return Ok(None);
    }
    let p = bx.to_world(&nalgebra::Vector3::from(local));
    let ora = box_contains_halfspace(center, size, bx.yaw, [p.x, p.y, p.z]);
    Ok(Some(if bx.contains(&p) == ora { 0.0 } else { 1.0 }))
}

pub const ORACLE_NAMES: [&str; 8] = [
    "channel_gram",
    "keypoint_gram",
    "reference_selection",
    "bilinear_sample",
    "inner_depth",
    "absolute_bce",
    "projection",
    "box_containment",
];

/// Compares each library kernel to its oracle on `instances` seeded inputs.
pub fn equivalence(seed: u64, instances: usize, tolerance: f64) -> Result<Vec<OracleCheck>> {
    ORACLE_NAMES
        .iter()
        .enumerate()
        .map(|(which, name)| {
            let results = par::map_range(instances, |i| {
                let mut rng = CounterRng::new(seed, ((which as u64 + 1) << 40) + i as u64);
                match which {
                    0 => gram_instance(&mut rng, false),
                    1 => gram_instance(&mut rng, true),
                    2 => reference_instance(&mut rng),
                    3 => bilinear_instance(&mut rng),
                    4 => inner_depth_instance(&mut rng),
                    5 => bce_instance(&mut rng),
                    6 => projection_instance(&mut rng),
                    _ => containment_instance(&mut rng),
                }
            });
            let mut check = OracleCheck {
                name: (*name).to_string(),
                instances,
                excluded: 0,
                max_error: 0.0,
                passed: true,
            };
            for r in results {
                match r? {
                    None => check.excluded += 1,
                    Some(e) if e.is_nan() || e > check.max_error => check.max_error = e,
                    Some(_) => {}
                }
            }
            check.passed = check.max_error <= tolerance;
            Ok(check)
        })
        .collect()
}

/// Small hand-checkable cases with oracle outputs, for cross-implementation fixtures.
pub fn fixtures() -> serde_json::Value {
    let f = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
    let plane = vec![vec![0.0, 1.0, 2.0], vec![10.0, 11.0, 12.0]];
    let sample_points = [[0.5, 0.5], [-1.0, 4.0], [1.0, 1.25]];
    let samples: Vec<f64> = sample_points.iter().map(|p| bilinear_tent(&plane, *p)).collect();
    let box_points = [[1.0, 2.0, 0.5], [3.0, 2.0, 0.5], [1.0, 2.0, 1.01]];
    let inside: Vec<bool> = box_points
        .iter()
        .map(|p| box_contains_halfspace([1.0, 2.0, 0.5], [4.0, 2.0, 1.0], 0.5, *p))
        .collect();
    serde_json::json!({
        "channel_gram": {"features": f, "gram": channel_gram(&f)},
        "keypoint_gram": {"features": f, "gram": keypoint_gram(&f)},
        "reference_selection": {
            "gt": [5.0, 6.0, 7.0], "pred": [5.2, 6.05, 7.3],
            "index": reference_scan(&[5.0, 6.0, 7.0], &[5.2, 6.05, 7.3], false)
        },
        "bilinear_sample": {
            "plane": plane,
            "points": sample_points,
            "values": samples
        },
        "inner_depth": {
            "logits": [[0.0, 0.0], [1.0, -1.0]], "centers": [2.0, 4.0], "gt": [3.0, 2.5], "reference": 0,
            "mean": inner_depth_scalar(&[vec![0.0, 0.0], vec![1.0, -1.0]], &[2.0, 4.0], &[3.0, 2.5], 0, true)
        },
        "absolute_bce": {"probs": [0.25, 0.75], "target": 1, "value": bce_scalar(&[0.25, 0.75], 1)},
        "box_containment": {
            "center": [1.0, 2.0, 0.5], "size": [4.0, 2.0, 1.0], "yaw": 0.5,
            "points": box_points,
            "inside": inside
        }
    })
}
