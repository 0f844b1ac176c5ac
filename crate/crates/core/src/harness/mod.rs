//! Loss composition over a synthetic scene, plus the runs behind the CLI:
//! loss evaluation, gradient checks and the toy training loop.

pub mod config;
pub mod gradcheck;
pub mod report;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::depth::{
    absolute_depth_loss_sparse, inner_depth_loss_sparse, CategoricalDepthMap, DepthBins, InnerDepthLoss,
    InnerDepthOptions, SparseLossResult,
};
use crate::distill::{bev_distill_loss, BevDistillLoss, BevFeatureMap, DistillOptions};
use crate::error::{Error, Result};
use crate::numerics::{LossResult, Tensor};
use crate::par;
use crate::scenegen::rng::CounterRng;
use crate::scenegen::{render_gt_views, SyntheticScene, ViewGroundTruth};

pub use config::{HarnessConfig, LossWeights, OptimizerKind, StudentInit};
pub use gradcheck::run_gradcheck;
pub use report::RunReport;
pub use train::run_train_toy;

const STREAM_STUDENT_LOGITS: u64 = 5000;
const STREAM_STUDENT_BEV: u64 = 6000;
/// Logit assigned to bins that should carry no probability (`exp` underflows to 0).
const NEGLIGIBLE_LOGIT: f64 = -1000.0;

/// `det + w_A L_A + w_R L_R + w_IC L_IC + w_IK L_IK`.
pub fn weighted_total(values: [f64; 4], det: f64, weights: &LossWeights) -> f64 {
    let w = weights.as_array();
    det + (0..4).map(|i| w[i] * values[i]).sum::<f64>()
}

/// Weighted composition of the absolute-depth, relative-depth, inter-channel
/// and inter-keypoint terms (in that order) plus a constant detection loss.
/// All component gradients must share one shape.
pub fn total_loss(components: &[LossResult; 4], det: f64, weights: &LossWeights) -> Result<LossResult> {
    weights.validate()?;
    let shape = components[0].grad.shape();
    if components.iter().any(|c| c.grad.shape() != shape) {
        return Err(Error::Dimension("component gradients differ in shape".into()));
    }
    let w = weights.as_array();
    let mut grad = Tensor::zeros(shape);
    for (wi, c) in w.iter().zip(components) {
        if *wi != 0.0 {
            grad.axpy(*wi, &c.grad)?;
        }
    }
    Ok(LossResult {
        value: weighted_total(components.each_ref().map(|c| c.value), det, weights),
        grad,
        empty_supervision: components.iter().all(|c| c.empty_supervision),
    })
}

/// Student parameters: depth logits per camera view and one BEV map.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentState {
    pub depth: Vec<CategoricalDepthMap>,
    pub bev: BevFeatureMap,
}

impl StudentState {
    /// Total parameter count, views first then BEV.
    pub fn len(&self) -> usize {
        self.depth.iter().map(|m| m.logits().len()).sum::<usize>() + self.bev.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TermValues {
    pub absolute: f64,
    pub relative: f64,
    pub inter_channel: f64,
    pub inter_keypoint: f64,
}

impl TermValues {
    pub fn as_array(&self) -> [f64; 4] {
        [self.absolute, self.relative, self.inter_channel, self.inter_keypoint]
    }
}

/// Every term evaluated for one student state.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub values: TermValues,
    /// Per view, gradient w.r.t. that view's logits.
    pub absolute: Vec<SparseLossResult>,
    pub relative: Vec<InnerDepthLoss<SparseLossResult>>,
    /// Gradients w.r.t. the student BEV map.
    pub bev: BevDistillLoss,
}

impl Evaluation {
    /// Lifts each term's gradient into the flat parameter layout of
    /// [`StudentState`], ready for [`total_loss`].
    pub fn packed_components(&self, student: &StudentState) -> [LossResult; 4] {
        let n = student.len();
        let bev_offset = n - student.bev.data.len();
        let mut out: [LossResult; 4] = std::array::from_fn(|_| LossResult {
            value: 0.0,
            grad: Tensor::zeros(&[n]),
            empty_supervision: true,
        });
        let mut offset = 0;
        for (v, logits) in student.depth.iter().map(CategoricalDepthMap::logits).enumerate() {
            for (slot, src) in [(0, &self.absolute[v]), (1, &self.relative[v].result)] {
                let dense = src.grad.to_dense(logits.shape());
                out[slot].grad.data_mut()[offset..offset + logits.len()].copy_from_slice(dense.data());
                out[slot].empty_supervision &= src.empty_supervision;
            }
            offset += logits.len();
        }
        for (slot, src) in [(2, &self.bev.inter_channel), (3, &self.bev.inter_keypoint)] {
            out[slot].grad.data_mut()[bev_offset..].copy_from_slice(src.grad.data());
            out[slot].empty_supervision = src.empty_supervision;
        }
        let values = self.values.as_array();
        for (o, v) in out.iter_mut().zip(values) {
            o.value = v;
        }
        out
    }
}

/// A scene with its rendered ground truth and the loss settings from a config.
#[derive(Debug, Clone)]
pub struct SceneProblem {
    pub scene: SyntheticScene,
    pub views: Vec<ViewGroundTruth>,
    pub bins: DepthBins,
    pub depth_opts: InnerDepthOptions,
    pub distill_opts: DistillOptions,
}

impl SceneProblem {
    pub fn new(scene: SyntheticScene, cfg: &HarnessConfig) -> Result<Self> {
        let views = render_gt_views(&scene)?;
        Ok(Self {
            scene,
            views,
            bins: cfg.depth_bins()?,
            depth_opts: cfg.inner_depth_options(),
            distill_opts: cfg.distill_options(),
        })
    }

    fn logits_shape(&self, view: usize) -> [usize; 3] {
        let cam = &self.scene.cameras[view];
        [self.bins.count(), cam.height, cam.width]
    }

    /// Seeded small-noise student.
    pub fn noise_student(&self, seed: u64, scale: f64) -> Result<StudentState> {
        let noise = |stream: u64, shape: &[usize]| {
            let mut rng = CounterRng::new(seed, stream);
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect())
        };
        let depth = (0..self.views.len())
            .map(|v| CategoricalDepthMap::new(noise(STREAM_STUDENT_LOGITS + v as u64, &self.logits_shape(v))?))
            .collect::<Result<_>>()?;
        let bev = noise(STREAM_STUDENT_BEV, self.scene.teacher_bev.data.shape())?;
        Ok(StudentState {
            depth,
            bev: BevFeatureMap::new(bev, self.scene.grid)?,
        })
    }

    /// Student matching the teacher: BEV map copied, and at every valid pixel a
    /// two-bin distribution whose expected depth equals the ground truth.
    pub fn teacher_student(&self) -> Result<StudentState> {
        let centers = self.bins.centers();
        let depth = self
            .views
            .iter()
            .enumerate()
            .map(|(v, view)| {
                let shape = self.logits_shape(v);
                let plane = shape[1] * shape[2];
                let mut t = Tensor::zeros(&shape);
                for (off, _) in view.depth.valid.iter().enumerate().filter(|(_, ok)| **ok) {
                    let g = view.depth.depth.data()[off].clamp(centers[0], centers[centers.len() - 1]);
                    let k = centers.partition_point(|c| *c <= g).clamp(1, centers.len() - 1) - 1;
                    let hi = (g - centers[k]) / (centers[k + 1] - centers[k]);
                    let d = t.data_mut();
                    for b in 0..centers.len() {
                        d[b * plane + off] = NEGLIGIBLE_LOGIT;
                    }
                    let ln = |p: f64| if p > 0.0 { p.ln() } else { NEGLIGIBLE_LOGIT };
                    d[k * plane + off] = ln(1.0 - hi);
                    d[(k + 1) * plane + off] = ln(hi);
                }
                CategoricalDepthMap::new(t)
            })
            .collect::<Result<_>>()?;
        Ok(StudentState {
            depth,
            bev: self.scene.teacher_bev.clone(),
        })
    }

    pub fn initial_student(&self, cfg: &HarnessConfig) -> Result<StudentState> {
        match cfg.optimizer.init {
            StudentInit::Noise => self.noise_student(cfg.scene.seed, cfg.optimizer.init_noise),
            StudentInit::Teacher => self.teacher_student(),
        }
    }

    pub fn evaluate(&self, student: &StudentState) -> Result<Evaluation> {
        if student.depth.len() != self.views.len() {
            return Err(Error::Dimension(format!(
                "{} depth maps for {} views",
                student.depth.len(),
                self.views.len()
            )));
        }
        let per_view = par::map(
            &self.views,
            |v, view| -> Result<(SparseLossResult, InnerDepthLoss<SparseLossResult>)> {
                let map = &student.depth[v];
                let a = absolute_depth_loss_sparse(map, &view.depth.depth, &view.depth.valid, &self.bins)?;
                let r = inner_depth_loss_sparse(&view.targets, map, &self.bins, &self.depth_opts)?;
                Ok((a, r))
            },
        );
        let mut absolute = Vec::with_capacity(per_view.len());
        let mut relative = Vec::with_capacity(per_view.len());
        for item in per_view {
            let (a, r) = item?;
            absolute.push(a);
            relative.push(r);
        }
        let bev = bev_distill_loss(
            &student.bev,
            &self.scene.teacher_bev,
            &self.scene.boxes,
            &self.distill_opts,
        )?;
        let values = TermValues {
            absolute: absolute.iter().map(|l| l.value).sum(),
            relative: relative.iter().map(|l| l.result.value).sum(),
            inter_channel: bev.inter_channel.value,
            inter_keypoint: bev.inter_keypoint.value,
        };
        Ok(Evaluation {
            values,
            absolute,
            relative,
            bev,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn comp(value: f64, grad: &[f64]) -> LossResult {
        LossResult {
            value,
            grad: Tensor::new(vec![grad.len()], grad.to_vec()).unwrap(),
            empty_supervision: false,
        }
    }

    #[test]
    fn total_loss_examples() {
        let zero = || comp(0.0, &[0.0, 0.0]);
        let t = total_loss(&[zero(), zero(), zero(), zero()], 0.0, &LossWeights::default()).unwrap();
        assert_eq!(t.value, 0.0);
        let cs = [
            comp(1.0, &[1.0, 0.0]),
            comp(2.0, &[0.0, 1.0]),
            comp(3.0, &[1.0, 1.0]),
            comp(4.0, &[2.0, -1.0]),
        ];
        let t = total_loss(&cs, 5.0, &LossWeights::default()).unwrap();
        assert_eq!(t.value, 15.0);
        assert_eq!(t.grad.data(), &[4.0, 1.0]);
        let neg = LossWeights {
            relative: -0.5,
            ..LossWeights::default()
        };
        assert!(matches!(total_loss(&cs, 0.0, &neg), Err(Error::Config(_))));
        let bad = [comp(1.0, &[1.0]), zero(), zero(), zero()];
        assert!(total_loss(&bad, 0.0, &LossWeights::default()).is_err());
    }
}
