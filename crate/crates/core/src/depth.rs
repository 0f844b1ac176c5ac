//! Depth supervision: categorical-to-continuous depth, per-target reference
//! selection, the relative (inner) depth loss and the dense absolute-depth BCE
//! loss. Both losses return gradients with respect to the `D x H x W` logits.
//!
//! The inner-depth loss treats the chosen reference pixel as a constant index:
//! the reference pixel's depth still carries gradient, but which pixel was
//! chosen does not.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ForegroundDepthSet, Pixel};
use crate::numerics::{softmax_in_place, LossResult, Tensor};
use crate::par;

pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinMode {
    Uniform,
    SpacingIncreasing,
    Explicit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthBins {
    pub mode: BinMode,
    pub d_min: f64,
    pub d_max: f64,
    centers: Vec<f64>,
}

impl DepthBins {
    /// Equal-width bins over `[d_min, d_max]`, centers at bin midpoints.
    pub fn uniform(count: usize, d_min: f64, d_max: f64) -> Result<Self> {
        Self::check_range(count, d_min, d_max)?;
        let w = (d_max - d_min) / count as f64;
        let centers = (0..count).map(|k| d_min + (k as f64 + 0.5) * w).collect();
        Ok(Self {
            mode: BinMode::Uniform,
            d_min,
            d_max,
            centers,
        })
    }

    /// Bin widths growing linearly with index: edge `i` sits at
    /// `d_min + (d_max - d_min) * i (i + 1) / (D (D + 1))`.
    pub fn spacing_increasing(count: usize, d_min: f64, d_max: f64) -> Result<Self> {
        Self::check_range(count, d_min, d_max)?;
        let denom = (count * (count + 1)) as f64;
        let edge = |i: usize| d_min + (d_max - d_min) * (i * (i + 1)) as f64 / denom;
        let centers = (0..count).map(|k| 0.5 * (edge(k) + edge(k + 1))).collect();
        Ok(Self {
            mode: BinMode::SpacingIncreasing,
            d_min,
            d_max,
            centers,
        })
    }

    pub fn from_centers(centers: Vec<f64>) -> Result<Self> {
        if centers.len() < 2 || centers.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Argument(
                "need at least two strictly increasing bin centers".into(),
            ));
        }
        Ok(Self {
            mode: BinMode::Explicit,
            d_min: centers[0],
            d_max: *centers.last().unwrap(),
            centers,
        })
    }

    fn check_range(count: usize, d_min: f64, d_max: f64) -> Result<()> {
        if count < 2 || !(d_max > d_min) || !(d_min >= 0.0) {
            return Err(Error::Argument(format!(
                "invalid depth bins: D={count}, range [{d_min}, {d_max}]"
            )));
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Bin whose center is nearest to `depth`; ties go to the lower index.
    pub fn nearest_bin(&self, depth: f64) -> usize {
        let mut best = 0;
        for k in 1..self.centers.len() {
            if (self.centers[k] - depth).abs() < (self.centers[best] - depth).abs() {
                best = k;
            }
        }
        best
    }
}

/// Expected depth `sum_k d[k] p[k]` of a per-pixel bin distribution.
pub fn continuous_depth(probs: &[f64], bins: &DepthBins) -> Result<f64> {
    if probs.len() != bins.count() {
        return Err(Error::Dimension(format!(
            "{} probabilities for {} bins",
            probs.len(),
            bins.count()
        )));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("probabilities sum to {total}")));
    }
    Ok(expectation(probs, bins.centers()))
}

fn expectation(probs: &[f64], centers: &[f64]) -> f64 {
    probs.iter().zip(centers).map(|(p, c)| p * c).sum()
}

/// Student categorical depth prediction. Probabilities are derived from the
/// `D x H x W` logits on demand, per pixel or for the whole map.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDepthMap {
    logits: Tensor,
}

impl CategoricalDepthMap {
    pub fn new(logits: Tensor) -> Result<Self> {
        if logits.shape().len() != 3 || logits.shape()[0] < 2 {
            return Err(Error::Dimension(format!(
                "depth logits must be D x H x W with D >= 2, got {:?}",
                logits.shape()
            )));
        }
        if !logits.is_finite() {
            return Err(Error::Numeric("depth logits".into()));
        }
        Ok(Self { logits })
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    /// In-place logit updates; finiteness is no longer checked.
    pub(crate) fn logits_data_mut(&mut self) -> &mut [f64] {
        self.logits.data_mut()
    }

    pub fn bins(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.logits.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.logits.shape()[2]
    }

    fn plane(&self) -> usize {
        self.height() * self.width()
    }

    fn offset(&self, px: Pixel) -> usize {
        px.row * self.width() + px.col
    }

    pub fn pixel_probs(&self, px: Pixel) -> Vec<f64> {
        let (plane, off) = (self.plane(), self.offset(px));
        let mut p: Vec<f64> = (0..self.bins()).map(|k| self.logits.data()[k * plane + off]).collect();
        softmax_in_place(&mut p);
        p
    }

    pub fn probs(&self) -> Tensor {
        let (d, plane) = (self.bins(), self.plane());
        let mut out = Tensor::zeros(self.logits.shape());
        let mut buf = vec![0.0; d];
        for off in 0..plane {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = self.logits.data()[k * plane + off];
            }
            softmax_in_place(&mut buf);
            for (k, b) in buf.iter().enumerate() {
                out.data_mut()[k * plane + off] = *b;
            }
        }
        out
    }

    fn check_bins(&self, bins: &DepthBins) -> Result<()> {
        if bins.count() != self.bins() {
            return Err(Error::Dimension(format!(
                "depth map has {} bins, table has {}",
                self.bins(),
                bins.count()
            )));
        }
        Ok(())
    }

    fn check_pixel(&self, px: Pixel) -> Result<()> {
        if px.row >= self.height() || px.col >= self.width() {
            return Err(Error::Argument(format!("pixel {px:?} outside the depth map")));
        }
        Ok(())
    }

    /// Adds `upstream * d(depth)/d(logits)` to one pixel's bin gradient, where
    /// `probs` are the pixel's probabilities and `depth` its expected depth.
    fn backprop_depth(g: &mut [f64], probs: &[f64], centers: &[f64], depth: f64, upstream: f64) {
        for k in 0..probs.len() {
            g[k] += upstream * probs[k] * (centers[k] - depth);
        }
    }
}

/// Logit gradient restricted to a set of pixels: `values[i * bins + k]` is the
/// derivative w.r.t. bin `k` at flat pixel offset `offsets[i]` (ascending).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PixelGrad {
    pub bins: usize,
    pub offsets: Vec<usize>,
    pub values: Vec<f64>,
}

impl PixelGrad {
    fn from_map(bins: usize, acc: BTreeMap<usize, Vec<f64>>) -> Self {
        let mut offsets = Vec::with_capacity(acc.len());
        let mut values = Vec::with_capacity(acc.len() * bins);
        for (off, g) in acc {
            offsets.push(off);
            values.extend(g);
        }
        Self { bins, offsets, values }
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.values[i * self.bins..(i + 1) * self.bins]
    }

    /// Scatters into a dense `D x H x W` tensor.
    pub fn to_dense(&self, shape: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(shape);
        let plane = shape[1] * shape[2];
        let d = t.data_mut();
        for (i, &off) in self.offsets.iter().enumerate() {
            for (k, v) in self.pixel(i).iter().enumerate() {
                d[k * plane + off] = *v;
            }
        }
        t
    }
}

/// A loss value with its [`PixelGrad`].
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLossResult {
    pub value: f64,
    pub grad: PixelGrad,
    pub empty_supervision: bool,
}

impl SparseLossResult {
    fn empty(bins: usize) -> Self {
        Self {
            value: 0.0,
            grad: PixelGrad {
                bins,
                ..PixelGrad::default()
            },
            empty_supervision: true,
        }
    }

    pub fn to_dense(&self, shape: &[usize]) -> LossResult {
        LossResult {
            value: self.value,
            grad: self.grad.to_dense(shape),
            empty_supervision: self.empty_supervision,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceStrategy {
    AllToAdaptiveSmallestError,
    AllToAdaptiveHighestConf,
    AllToCertain3dCenter,
    AllToCertain2dCenter,
    OneToOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Mean over entries within each target, summed over targets.
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InnerDepthOptions {
    pub strategy: ReferenceStrategy,
    pub reduction: LossReduction,
    /// Use the literal signed error `gt - pred` for the smallest-error
    /// reference instead of its absolute value.
    pub signed_reference_error: bool,
}

impl Default for InnerDepthOptions {
    fn default() -> Self {
        Self {
            strategy: ReferenceStrategy::AllToAdaptiveSmallestError,
            reduction: LossReduction::Mean,
            signed_reference_error: false,
        }
    }
}

/// Per-target anchor used by the inner-depth loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    Skipped,
    /// Index into the target's pixel list.
    Pixel(usize),
    /// All ordered pixel pairs, no single anchor.
    Pairwise,
}

fn argmin_first(scores: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, s) in scores.enumerate() {
        if s < best.1 {
            best = (i, s);
        }
    }
    best.0
}

/// Picks the reference pixel of one target. `pred_depth` is aligned with the
/// set's pixels; `confidence` (max bin probability per pixel) is required for
/// the highest-confidence strategy. Ties resolve to the first pixel in
/// row-major order. Returns `None` for the pairwise strategy.
pub fn select_reference(
    set: &ForegroundDepthSet,
    pred_depth: &[f64],
    confidence: Option<&[f64]>,
    strategy: ReferenceStrategy,
    signed_error: bool,
) -> Result<Option<usize>> {
    if set.skipped || set.len() < 2 {
        return Err(Error::TargetSkipped(set.target));
    }
    if pred_depth.len() != set.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} pixels",
            pred_depth.len(),
            set.len()
        )));
    }
    let centroid = || {
        let n = set.len() as f64;
        let (u, v) = set
            .pixels
            .iter()
            .fold((0.0, 0.0), |(u, v), p| (u + p.col as f64 + 0.5, v + p.row as f64 + 0.5));
        [u / n, v / n]
    };
    let nearest_to = |uv: [f64; 2]| {
        argmin_first(set.pixels.iter().map(|p| {
            let du = p.col as f64 + 0.5 - uv[0];
            let dv = p.row as f64 + 0.5 - uv[1];
            du * du + dv * dv
        }))
    };
    let idx = match strategy {
        ReferenceStrategy::OneToOne => return Ok(None),
        ReferenceStrategy::AllToAdaptiveSmallestError => argmin_first(set.gt_depth.iter().zip(pred_depth).map(
            |(g, p)| {
                if signed_error {
                    g - p
                } else {
                    (g - p).abs()
                }
            },
        )),
        ReferenceStrategy::AllToAdaptiveHighestConf => {
            let conf = confidence
                .ok_or_else(|| Error::Argument("highest-confidence reference needs per-pixel confidence".into()))?;
            if conf.len() != set.len() {
                return Err(Error::Dimension("confidence length".into()));
            }
            argmin_first(conf.iter().map(|c| -c))
        }
        // Falls back to the pixel centroid when the box center is behind the camera.
        ReferenceStrategy::AllToCertain3dCenter => nearest_to(set.projected_center.unwrap_or_else(centroid)),
        ReferenceStrategy::AllToCertain2dCenter => nearest_to(centroid()),
    };
    Ok(Some(idx))
}

/// Relative depths of every pixel to the reference pixel, for prediction and
/// ground truth. Both are exactly zero at the reference.
pub fn relative_depths(set: &ForegroundDepthSet, pred_depth: &[f64], reference: Pixel) -> Result<(Vec<f64>, Vec<f64>)> {
    let r = set
        .position(reference)
        .ok_or_else(|| Error::Argument(format!("reference {reference:?} is not in target {}", set.target)))?;
    if pred_depth.len() != set.len() {
        return Err(Error::Dimension("prediction length".into()));
    }
    let pred = pred_depth.iter().map(|d| d - pred_depth[r]).collect();
    let gt = set.gt_depth.iter().map(|d| d - set.gt_depth[r]).collect();
    Ok((pred, gt))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerDepthLoss<R = LossResult> {
    pub result: R,
    pub references: Vec<Reference>,
    /// Per-target loss values in input order (zero for skipped targets).
    pub per_target: Vec<f64>,
}

impl InnerDepthLoss<SparseLossResult> {
    pub fn to_dense(&self, shape: &[usize]) -> InnerDepthLoss {
        InnerDepthLoss {
            result: self.result.to_dense(shape),
            references: self.references.clone(),
            per_target: self.per_target.clone(),
        }
    }
}

struct TargetPrediction {
    probs: Vec<Vec<f64>>,
    depth: Vec<f64>,
}

fn predict_target(set: &ForegroundDepthSet, map: &CategoricalDepthMap, bins: &DepthBins) -> Result<TargetPrediction> {
    let mut probs = Vec::with_capacity(set.len());
    let mut depth = Vec::with_capacity(set.len());
    for &px in &set.pixels {
        map.check_pixel(px)?;
        let p = map.pixel_probs(px);
        depth.push(expectation(&p, bins.centers()));
        probs.push(p);
    }
    Ok(TargetPrediction { probs, depth })
}

fn check_sets(targets: &[ForegroundDepthSet]) -> Result<()> {
    for t in targets {
        if t.pixels.len() != t.gt_depth.len() {
            return Err(Error::Dimension(format!(
                "target {} pixel/depth length mismatch",
                t.target
            )));
        }
        if let Some(d) = t.gt_depth.iter().find(|d| !(**d > 0.0)) {
            return Err(Error::Contract(format!(
                "target {} has non-positive gt depth {d}",
                t.target
            )));
        }
    }
    Ok(())
}

/// Selects references with `opts` and evaluates the inner-depth loss.
pub fn inner_depth_loss(
    targets: &[ForegroundDepthSet],
    map: &CategoricalDepthMap,
    bins: &DepthBins,
    opts: &InnerDepthOptions,
) -> Result<InnerDepthLoss> {
    Ok(inner_depth_loss_sparse(targets, map, bins, opts)?.to_dense(map.logits().shape()))
}

/// Inner-depth loss with the per-target references held fixed.
pub fn inner_depth_loss_with_references(
    targets: &[ForegroundDepthSet],
    map: &CategoricalDepthMap,
    bins: &DepthBins,
    references: &[Reference],
    reduction: LossReduction,
) -> Result<InnerDepthLoss> {
    Ok(
        inner_depth_loss_with_references_sparse(targets, map, bins, references, reduction)?
            .to_dense(map.logits().shape()),
    )
}

/// [`inner_depth_loss`] with the gradient kept on the supervised pixels only.
pub fn inner_depth_loss_sparse(
    targets: &[ForegroundDepthSet],
    map: &CategoricalDepthMap,
    bins: &DepthBins,
    opts: &InnerDepthOptions,
) -> Result<InnerDepthLoss<SparseLossResult>> {
    map.check_bins(bins)?;
    check_sets(targets)?;
    let refs = par::map(targets, |_, set| -> Result<Reference> {
        if set.skipped || set.len() < 2 {
            return Ok(Reference::Skipped);
        }
        let pred = predict_target(set, map, bins)?;
        let conf: Vec<f64> = pred
            .probs
            .iter()
            .map(|p| p.iter().copied().fold(0.0, f64::max))
            .collect();
        let idx = select_reference(
            set,
            &pred.depth,
            Some(&conf),
            opts.strategy,
            opts.signed_reference_error,
        )?;
        Ok(idx.map_or(Reference::Pairwise, Reference::Pixel))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    inner_depth_loss_with_references_sparse(targets, map, bins, &refs, opts.reduction)
}

pub fn inner_depth_loss_with_references_sparse(
    targets: &[ForegroundDepthSet],
    map: &CategoricalDepthMap,
    bins: &DepthBins,
    references: &[Reference],
    reduction: LossReduction,
) -> Result<InnerDepthLoss<SparseLossResult>> {
    map.check_bins(bins)?;
    check_sets(targets)?;
    if references.len() != targets.len() {
        return Err(Error::Dimension("one reference per target".into()));
    }
    let parts = par::map(targets, |j, set| -> Result<Option<(f64, TargetPrediction, Vec<f64>)>> {
        let reference = references[j];
        if reference == Reference::Skipped {
            return Ok(None);
        }
        if set.skipped || set.len() < 2 {
            return Err(Error::TargetSkipped(set.target));
        }
        let pred = predict_target(set, map, bins)?;
        let n = set.len();
        // residual of each pixel's prediction error
        let err: Vec<f64> = pred.depth.iter().zip(&set.gt_depth).map(|(d, g)| d - g).collect();
        let mut d_depth = vec![0.0; n];
        let value = match reference {
            Reference::Pixel(r) => {
                if r >= n {
                    return Err(Error::Argument(format!(
                        "reference index {r} out of range for target {}",
                        set.target
                    )));
                }
                let k = match reduction {
                    LossReduction::Mean => 1.0 / n as f64,
                    LossReduction::Sum => 1.0,
                };
                let mut value = 0.0;
                for i in 0..n {
                    let e = (pred.depth[i] - pred.depth[r]) - (set.gt_depth[i] - set.gt_depth[r]);
                    value += e * e;
                    d_depth[i] += 2.0 * k * e;
                    d_depth[r] -= 2.0 * k * e;
                }
                k * value
            }
            Reference::Pairwise => {
                let k = match reduction {
                    LossReduction::Mean => 1.0 / (n * (n - 1)) as f64,
                    LossReduction::Sum => 1.0,
                };
                let mut value = 0.0;
                for p in 0..n {
                    for q in 0..n {
                        if p != q {
                            let e = err[p] - err[q];
                            value += e * e;
                            d_depth[p] += 2.0 * k * e;
                            d_depth[q] -= 2.0 * k * e;
                        }
                    }
                }
                k * value
            }
            Reference::Skipped => unreachable!(),
        };
        Ok(Some((value, pred, d_depth)))
    });

    let d = map.bins();
    let mut acc: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut total = 0.0;
    let mut per_target = Vec::with_capacity(targets.len());
    let mut supervised = false;
    for (set, part) in targets.iter().zip(parts) {
        match part? {
            None => per_target.push(0.0),
            Some((value, pred, d_depth)) => {
                supervised = true;
                total += value;
                per_target.push(value);
                for (i, &px) in set.pixels.iter().enumerate() {
                    CategoricalDepthMap::backprop_depth(
                        acc.entry(map.offset(px)).or_insert_with(|| vec![0.0; d]),
                        &pred.probs[i],
                        bins.centers(),
                        pred.depth[i],
                        d_depth[i],
                    );
                }
            }
        }
    }
    let result = if supervised {
        SparseLossResult {
            value: total,
            grad: PixelGrad::from_map(d, acc),
            empty_supervision: false,
        }
    } else {
        SparseLossResult::empty(d)
    };
    Ok(InnerDepthLoss {
        result,
        references: references.to_vec(),
        per_target,
    })
}

/// Dense absolute-depth BCE against the one-hot nearest-center bin, averaged
/// over valid pixels. Probabilities are clamped to `[1e-7, 1 - 1e-7]`; clamped
/// entries contribute no gradient.
pub fn absolute_depth_loss(
    map: &CategoricalDepthMap,
    gt: &Tensor,
    valid: &[bool],
    bins: &DepthBins,
) -> Result<LossResult> {
    Ok(absolute_depth_loss_sparse(map, gt, valid, bins)?.to_dense(map.logits().shape()))
}

/// [`absolute_depth_loss`] with the gradient kept on the valid pixels only.
pub fn absolute_depth_loss_sparse(
    map: &CategoricalDepthMap,
    gt: &Tensor,
    valid: &[bool],
    bins: &DepthBins,
) -> Result<SparseLossResult> {
    map.check_bins(bins)?;
    let (h, w) = (map.height(), map.width());
    if gt.shape() != [h, w] || valid.len() != h * w {
        return Err(Error::Dimension(format!(
            "gt {:?} / mask {} vs depth map {h}x{w}",
            gt.shape(),
            valid.len()
        )));
    }
    let pixels: Vec<usize> = (0..h * w).filter(|&i| valid[i]).collect();
    if pixels.is_empty() {
        return Ok(SparseLossResult::empty(map.bins()));
    }
    if let Some(&i) = pixels.iter().find(|&&i| !(gt.data()[i] > 0.0)) {
        return Err(Error::Contract(format!("gt depth {} at valid pixel {i}", gt.data()[i])));
    }
    let d = map.bins();
    let scale = 1.0 / pixels.len() as f64;
    let parts = par::map(&pixels, |_, &off| {
        let target = bins.nearest_bin(gt.data()[off]);
        let px = Pixel {
            row: off / w,
            col: off % w,
        };
        let s = map.pixel_probs(px);
        let mut value = 0.0;
        let mut d_s = vec![0.0; d];
        for k in 0..d {
            let p = s[k].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let inside = s[k] > BCE_CLAMP && s[k] < 1.0 - BCE_CLAMP;
            if k == target {
                value -= p.ln();
                if inside {
                    d_s[k] = -1.0 / p;
                }
            } else {
                value -= (1.0 - p).ln();
                if inside {
                    d_s[k] = 1.0 / (1.0 - p);
                }
            }
        }
        let mean_g: f64 = (0..d).map(|k| d_s[k] * s[k]).sum();
        let d_logits: Vec<f64> = (0..d).map(|k| scale * s[k] * (d_s[k] - mean_g)).collect();
        (value, d_logits)
    });
    let mut values = Vec::with_capacity(pixels.len() * d);
    let mut total = 0.0;
    for (value, d_logits) in parts {
        total += value;
        values.extend(d_logits);
    }
    Ok(SparseLossResult {
        value: total * scale,
        grad: PixelGrad {
            bins: d,
            offsets: pixels,
            values,
        },
        empty_supervision: false,
    })
}
