//! Keypoint-based BEV distillation.
//!
//! Each target box is enlarged in BEV, covered by a `g x g` lattice of
//! keypoints, and both the student and teacher BEV maps are bilinearly sampled
//! there, giving `N x C` feature blocks. The student is then asked to match the
//! teacher's channel Gram (`C x C`, inner products over keypoints) and keypoint
//! Gram (`N x N`, inner products over channels) rather than the raw features.
//! Gradients flow back to the student map through the adjoint of the sampler.

use serde::{Deserialize, Serialize};

use crate::depth::LossReduction;
use crate::error::{Error, Result};
use crate::geometry::{enlarge_box_bev, BevGrid, Box3D};
use crate::numerics::{LossResult, Tensor};
use crate::par;

const ROW_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct BevFeatureMap {
    pub data: Tensor,
    pub grid: BevGrid,
}

impl BevFeatureMap {
    pub fn new(data: Tensor, grid: BevGrid) -> Result<Self> {
        grid.validate()?;
        match data.shape() {
            [_, h, w] if *h == grid.height && *w == grid.width => {}
            s => {
                return Err(Error::Dimension(format!(
                    "BEV features {s:?} do not match a {}x{} grid",
                    grid.height, grid.width
                )))
            }
        }
        if !data.is_finite() {
            return Err(Error::Numeric("BEV features".into()));
        }
        Ok(Self { data, grid })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub target: usize,
    /// Continuous BEV `(row, col)` coordinates, lattice order.
    pub points: Vec<[f64; 2]>,
    pub g: usize,
    /// Set when some keypoint falls outside the grid's world extent; sampling
    /// clamps those to the border.
    pub clipped: bool,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Places a `g x g` lattice at cell centers of the enlarged box footprint.
/// Row-major over (length, width) in the box frame.
pub fn sample_keypoints(bx: &Box3D, grid: &BevGrid, g: usize, enlarge: f64) -> Result<KeypointSet> {
    if g < 2 {
        return Err(Error::Argument(format!("keypoint lattice needs g >= 2, got {g}")));
    }
    let big = enlarge_box_bev(bx, enlarge)?;
    let (s, c) = big.yaw.sin_cos();
    let mut points = Vec::with_capacity(g * g);
    for a in 0..g {
        let lx = ((a as f64 + 0.5) / g as f64 - 0.5) * big.size.x;
        for b in 0..g {
            let ly = ((b as f64 + 0.5) / g as f64 - 0.5) * big.size.y;
            let xy = [big.center.x + c * lx - s * ly, big.center.y + s * lx + c * ly];
            points.push(grid.world_to_bev(xy));
        }
    }
    let (h, w) = (grid.height as f64, grid.width as f64);
    let clipped = points
        .iter()
        .any(|p| p[0] < -0.5 || p[0] > h - 0.5 || p[1] < -0.5 || p[1] > w - 0.5);
    Ok(KeypointSet {
        target: 0,
        points,
        g,
        clipped,
    })
}

/// Border-clamped bilinear stencil: four `(flat cell, weight)` pairs.
fn stencil(p: [f64; 2], h: usize, w: usize) -> [(usize, f64); 4] {
    let axis = |x: f64, n: usize| -> (usize, usize, f64) {
        if n == 1 {
            return (0, 0, 0.0);
        }
        let x = x.clamp(0.0, (n - 1) as f64);
        let i0 = (x.floor() as usize).min(n - 2);
        (i0, i0 + 1, x - i0 as f64)
    };
    let (r0, r1, fr) = axis(p[0], h);
    let (c0, c1, fc) = axis(p[1], w);
    [
        (r0 * w + c0, (1.0 - fr) * (1.0 - fc)),
        (r0 * w + c1, (1.0 - fr) * fc),
        (r1 * w + c0, fr * (1.0 - fc)),
        (r1 * w + c1, fr * fc),
    ]
}

/// Samples every channel at each keypoint; `N x C`.
pub fn bilinear_sample(feat: &BevFeatureMap, points: &KeypointSet) -> Tensor {
    sample_at(&feat.data, &points.points)
}

fn sample_at(data: &Tensor, points: &[[f64; 2]]) -> Tensor {
    let (c, h, w) = (data.shape()[0], data.shape()[1], data.shape()[2]);
    let plane = h * w;
    let src = data.data();
    let mut out = Tensor::zeros(&[points.len().max(1), c]);
    if points.is_empty() {
        return out;
    }
    let dst = out.data_mut();
    for (i, &p) in points.iter().enumerate() {
        let st = stencil(p, h, w);
        for ch in 0..c {
            let base = ch * plane;
            dst[i * c + ch] = st.iter().map(|&(k, wt)| wt * src[base + k]).sum();
        }
    }
    out
}

/// Adjoint of [`bilinear_sample`]: scatters an `N x C` upstream gradient onto a
/// `C x H x W` map.
pub fn bilinear_sample_backward(feat_shape: &[usize], points: &KeypointSet, upstream: &Tensor) -> Result<Tensor> {
    let mut grad = Tensor::zeros(feat_shape);
    scatter_into(&mut grad, &points.points, upstream)?;
    Ok(grad)
}

fn scatter_into(grad: &mut Tensor, points: &[[f64; 2]], upstream: &Tensor) -> Result<()> {
    let (c, h, w) = match grad.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Dimension(format!("feature shape must be C x H x W, got {s:?}"))),
    };
    if upstream.shape() != [points.len(), c] {
        return Err(Error::Dimension(format!(
            "upstream {:?} for {} keypoints and {c} channels",
            upstream.shape(),
            points.len()
        )));
    }
    let plane = h * w;
    let up = upstream.data();
    let g = grad.data_mut();
    for (i, &p) in points.iter().enumerate() {
        for (k, wt) in stencil(p, h, w) {
            for ch in 0..c {
                g[ch * plane + k] += wt * up[i * c + ch];
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramNormalization {
    /// Raw inner products.
    #[default]
    None,
    /// Channel Gram divided by N, keypoint Gram divided by C.
    ByCount,
    /// Rows (keypoint feature vectors) scaled to unit L2 norm first.
    RowL2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GramOptions {
    pub normalization: GramNormalization,
    pub reduction: LossReduction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GramKind {
    Channel,
    Keypoint,
}

fn row_normalized(f: &Tensor) -> (Tensor, Vec<f64>) {
    let c = f.cols();
    let mut out = f.clone();
    let norms = out
        .data_mut()
        .chunks_mut(c)
        .map(|row| {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(ROW_NORM_EPS);
            row.iter_mut().for_each(|v| *v /= n);
            n
        })
        .collect();
    (out, norms)
}

fn prepare(f: &Tensor, kind: GramKind, norm: GramNormalization) -> (Tensor, Option<Vec<f64>>, f64) {
    let (n, c) = (f.rows(), f.cols());
    match norm {
        GramNormalization::None => (f.clone(), None, 1.0),
        GramNormalization::ByCount => {
            let s = match kind {
                GramKind::Channel => 1.0 / n as f64,
                GramKind::Keypoint => 1.0 / c as f64,
            };
            (f.clone(), None, s)
        }
        GramNormalization::RowL2 => {
            let (x, norms) = row_normalized(f);
            (x, Some(norms), 1.0)
        }
    }
}

fn raw_gram(x: &Tensor, kind: GramKind, scale: f64) -> Tensor {
    let (n, c) = (x.rows(), x.cols());
    let d = x.data();
    match kind {
        GramKind::Channel => {
            let mut out = vec![0.0; c * c];
            for a in 0..c {
                for b in a..c {
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc += d[i * c + a] * d[i * c + b];
                    }
                    out[a * c + b] = scale * acc;
                    out[b * c + a] = scale * acc;
                }
            }
            Tensor::new(vec![c, c], out).unwrap()
        }
        GramKind::Keypoint => {
            let mut out = vec![0.0; n * n];
            for p in 0..n {
                for q in p..n {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += d[p * c + ch] * d[q * c + ch];
                    }
                    out[p * n + q] = scale * acc;
                    out[q * n + p] = scale * acc;
                }
            }
            Tensor::new(vec![n, n], out).unwrap()
        }
    }
}

fn check_block(f: &Tensor) -> Result<()> {
    f.dims2().map(|_| ())
}

/// `C x C` channel Gram: entry `(a, b)` sums `F[i, a] F[i, b]` over keypoints.
pub fn inter_channel_gram(f: &Tensor, norm: GramNormalization) -> Result<Tensor> {
    check_block(f)?;
    let (x, _, s) = prepare(f, GramKind::Channel, norm);
    Ok(raw_gram(&x, GramKind::Channel, s))
}

/// `N x N` keypoint Gram: entry `(p, q)` sums `F[p, c] F[q, c]` over channels.
pub fn inter_keypoint_gram(f: &Tensor, norm: GramNormalization) -> Result<Tensor> {
    check_block(f)?;
    let (x, _, s) = prepare(f, GramKind::Keypoint, norm);
    Ok(raw_gram(&x, GramKind::Keypoint, s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetKeypointFeatures {
    pub student: Tensor,
    pub teacher: Tensor,
}

impl TargetKeypointFeatures {
    pub fn new(student: Tensor, teacher: Tensor) -> Result<Self> {
        check_block(&student)?;
        if student.shape() != teacher.shape() {
            return Err(Error::Dimension(format!(
                "student {:?} vs teacher {:?}",
                student.shape(),
                teacher.shape()
            )));
        }
        Ok(Self { student, teacher })
    }
}

/// Value and `N x C` gradient of one target's Gram-matching loss.
fn gram_loss(t: &TargetKeypointFeatures, kind: GramKind, opts: GramOptions) -> (f64, Tensor) {
    let (xs, norms, s) = prepare(&t.student, kind, opts.normalization);
    let (xt, _, _) = prepare(&t.teacher, kind, opts.normalization);
    let gs = raw_gram(&xs, kind, s);
    let gt = raw_gram(&xt, kind, s);
    let k = match opts.reduction {
        LossReduction::Mean => 1.0 / gs.len() as f64,
        LossReduction::Sum => 1.0,
    };
    let mut value = 0.0;
    // upstream = dL/dGram = 2k (Gs - Gt), symmetric
    let mut up = gs.clone();
    for (u, t) in up.data_mut().iter_mut().zip(gt.data()) {
        let diff = *u - t;
        value += diff * diff;
        *u = 2.0 * k * diff;
    }
    let (n, c) = (xs.rows(), xs.cols());
    let x = xs.data();
    let u = up.data();
    let mut gx = vec![0.0; n * c];
    match kind {
        // d/dX of s * sum U_ab (X^T X)_ab = 2 s X U
        GramKind::Channel => {
            for i in 0..n {
                for b in 0..c {
                    let mut acc = 0.0;
                    for a in 0..c {
                        acc += x[i * c + a] * u[a * c + b];
                    }
                    gx[i * c + b] = 2.0 * s * acc;
                }
            }
        }
        // d/dX of s * sum U_pq (X X^T)_pq = 2 s U X
        GramKind::Keypoint => {
            for p in 0..n {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for q in 0..n {
                        acc += u[p * n + q] * x[q * c + ch];
                    }
                    gx[p * c + ch] = 2.0 * s * acc;
                }
            }
        }
    }
    if let Some(norms) = norms {
        for i in 0..n {
            let row = &mut gx[i * c..(i + 1) * c];
            let xr = &x[i * c..(i + 1) * c];
            let proj: f64 = row.iter().zip(xr).map(|(g, x)| g * x).sum();
            let nrm = norms[i];
            let on_floor = nrm <= ROW_NORM_EPS;
            for (g, xv) in row.iter_mut().zip(xr) {
                *g = if on_floor { *g / nrm } else { (*g - xv * proj) / nrm };
            }
        }
    }
    (k * value, Tensor::new(vec![n, c], gx).unwrap())
}

/// Loss over a list of per-target feature blocks, with one gradient per
/// student block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLossResult {
    pub value: f64,
    pub grads: Vec<Tensor>,
    pub per_target: Vec<f64>,
    pub empty_supervision: bool,
}

fn block_loss(targets: &[TargetKeypointFeatures], kind: GramKind, opts: GramOptions) -> BlockLossResult {
    if targets.is_empty() {
        return BlockLossResult {
            value: 0.0,
            grads: Vec::new(),
            per_target: Vec::new(),
            empty_supervision: true,
        };
    }
    let parts = par::map(targets, |_, t| gram_loss(t, kind, opts));
    let mut value = 0.0;
    let mut per_target = Vec::with_capacity(parts.len());
    let mut grads = Vec::with_capacity(parts.len());
    for (v, g) in parts {
        value += v;
        per_target.push(v);
        grads.push(g);
    }
    BlockLossResult {
        value,
        grads,
        per_target,
        empty_supervision: false,
    }
}

/// Channel-Gram matching loss summed over targets.
pub fn inter_channel_loss(targets: &[TargetKeypointFeatures], opts: GramOptions) -> BlockLossResult {
    block_loss(targets, GramKind::Channel, opts)
}

/// Keypoint-Gram matching loss summed over targets.
pub fn inter_keypoint_loss(targets: &[TargetKeypointFeatures], opts: GramOptions) -> BlockLossResult {
    block_loss(targets, GramKind::Keypoint, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillOptions {
    /// Keypoint lattice side; `N = g * g`.
    pub g: usize,
    pub enlarge: f64,
    pub gram: GramOptions,
}

impl Default for DistillOptions {
    fn default() -> Self {
        Self {
            g: 6,
            enlarge: 1.25,
            gram: GramOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BevDistillLoss {
    /// Gradient w.r.t. the student map data.
    pub inter_channel: LossResult,
    pub inter_keypoint: LossResult,
    pub keypoints: Vec<KeypointSet>,
    pub per_target_channel: Vec<f64>,
    pub per_target_keypoint: Vec<f64>,
}

impl BevDistillLoss {
    /// Sum of both terms.
    pub fn total(&self) -> LossResult {
        let mut grad = self.inter_channel.grad.clone();
        grad.axpy(1.0, &self.inter_keypoint.grad).unwrap();
        LossResult {
            value: self.inter_channel.value + self.inter_keypoint.value,
            grad,
            empty_supervision: self.inter_channel.empty_supervision && self.inter_keypoint.empty_supervision,
        }
    }
}

/// Keypoint Gram distillation from `teacher` into `student` for each box.
/// Per-target work may run in parallel; gradients are scattered in box order.
pub fn bev_distill_loss(
    student: &BevFeatureMap,
    teacher: &BevFeatureMap,
    boxes: &[Box3D],
    opts: &DistillOptions,
) -> Result<BevDistillLoss> {
    if student.grid != teacher.grid || student.data.shape() != teacher.data.shape() {
        return Err(Error::Dimension(format!(
            "student {:?} and teacher {:?} maps differ",
            student.data.shape(),
            teacher.data.shape()
        )));
    }
    let shape = student.data.shape();
    if boxes.is_empty() {
        return Ok(BevDistillLoss {
            inter_channel: LossResult::empty(shape),
            inter_keypoint: LossResult::empty(shape),
            keypoints: Vec::new(),
            per_target_channel: Vec::new(),
            per_target_keypoint: Vec::new(),
        });
    }
    let parts = par::map(boxes, |j, bx| -> Result<_> {
        let mut kp = sample_keypoints(bx, &student.grid, opts.g, opts.enlarge)?;
        kp.target = j;
        let t = TargetKeypointFeatures {
            student: bilinear_sample(student, &kp),
            teacher: bilinear_sample(teacher, &kp),
        };
        let ic = gram_loss(&t, GramKind::Channel, opts.gram);
        let ik = gram_loss(&t, GramKind::Keypoint, opts.gram);
        Ok((kp, ic, ik))
    });
    let mut grad_ic = Tensor::zeros(shape);
    let mut grad_ik = Tensor::zeros(shape);
    let (mut v_ic, mut v_ik) = (0.0, 0.0);
    let mut keypoints = Vec::with_capacity(boxes.len());
    let mut per_ic = Vec::with_capacity(boxes.len());
    let mut per_ik = Vec::with_capacity(boxes.len());
    for part in parts {
        let (kp, (vc, gc), (vk, gk)) = part?;
        scatter_into(&mut grad_ic, &kp.points, &gc)?;
        scatter_into(&mut grad_ik, &kp.points, &gk)?;
        v_ic += vc;
        v_ik += vk;
        per_ic.push(vc);
        per_ik.push(vk);
        keypoints.push(kp);
    }
    Ok(BevDistillLoss {
        inter_channel: LossResult {
            value: v_ic,
            grad: grad_ic,
            empty_supervision: false,
        },
        inter_keypoint: LossResult {
            value: v_ik,
            grad: grad_ik,
            empty_supervision: false,
        },
        keypoints,
        per_target_channel: per_ic,
        per_target_keypoint: per_ik,
    })
}
