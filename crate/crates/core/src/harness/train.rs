//! Toy training loop: optimizes student depth logits and a student BEV map
//! directly against the composed loss on one synthetic scene.

use serde::{Deserialize, Serialize};

use super::config::{HarnessConfig, OptimizerConfig, OptimizerKind};
use super::report::RunReport;
use super::{weighted_total, Evaluation, SceneProblem, StudentState, TermValues};
use crate::distill::{bilinear_sample, inter_channel_gram, inter_keypoint_gram};
use crate::error::Result;
use crate::numerics::frobenius_sq_distance;
use crate::scenegen::generate_scene;

const ADAM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TargetReduction,
    AbsTolerance,
    MaxSteps,
    Diverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub terms: TermValues,
}

/// Final feature and Gram agreement of one target's keypoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetAgreement {
    pub target: usize,
    pub clipped: bool,
    pub keypoint_gram_distance: f64,
    pub teacher_keypoint_gram_norm: f64,
    pub keypoint_gram_relative: f64,
    pub channel_gram_distance: f64,
    pub teacher_channel_gram_norm: f64,
    pub feature_distance: f64,
    pub teacher_feature_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResults {
    pub stop_reason: StopReason,
    pub steps_taken: usize,
    pub initial_total: f64,
    pub final_total: f64,
    /// `1 - final / initial`.
    pub reduction: f64,
    pub final_terms: TermValues,
    pub targets: Vec<TargetAgreement>,
    pub max_keypoint_gram_relative: f64,
    /// Raw `||S - T||_F` over the whole BEV map.
    pub bev_distance: f64,
    pub teacher_bev_norm: f64,
    pub series: Vec<StepRecord>,
}

/// Pixels that can receive a nonzero gradient (valid or foreground) in one
/// view, with each pixel's slot in the optimizer state. Logits elsewhere keep
/// their initial value.
struct ActivePixels {
    count: usize,
    slot: Vec<Option<usize>>,
}

fn active_pixels(problem: &SceneProblem) -> Vec<ActivePixels> {
    problem
        .views
        .iter()
        .map(|view| {
            let w = view.depth.depth.shape()[1];
            let mut mask = view.depth.valid.clone();
            for t in &view.targets {
                for px in &t.pixels {
                    mask[px.row * w + px.col] = true;
                }
            }
            let mut count = 0;
            let slot = mask
                .iter()
                .map(|on| {
                    on.then(|| {
                        count += 1;
                        count - 1
                    })
                })
                .collect();
            ActivePixels { count, slot }
        })
        .collect()
}

/// Per-coordinate optimizer state for one parameter block.
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self {
            first: vec![0.0; n],
            second: vec![0.0; n],
        }
    }

    /// Returns the parameter change for gradient `g` at slot `i`.
    fn delta(&mut self, i: usize, g: f64, o: &OptimizerConfig, t: usize, lr: f64) -> f64 {
        match o.kind {
            OptimizerKind::Momentum => {
                self.first[i] = o.momentum * self.first[i] + g;
                -lr * self.first[i]
            }
            OptimizerKind::Adam => {
                self.first[i] = o.momentum * self.first[i] + (1.0 - o.momentum) * g;
                self.second[i] = o.beta2 * self.second[i] + (1.0 - o.beta2) * g * g;
                let m = self.first[i] / (1.0 - o.momentum.powi(t as i32));
                let v = self.second[i] / (1.0 - o.beta2.powi(t as i32));
                -lr * m / (v.sqrt() + ADAM_EPS)
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn apply_update(
    student: &mut StudentState,
    eval: &Evaluation,
    active: &[ActivePixels],
    depth_moments: &mut [Moments],
    bev_moments: &mut Moments,
    cfg: &HarnessConfig,
    t: usize,
    decay: f64,
) {
    let (w, o) = (&cfg.weights, &cfg.optimizer);
    let lr = o.step_size * decay;
    if w.absolute != 0.0 || w.relative != 0.0 {
        for (v, map) in student.depth.iter_mut().enumerate() {
            let d = map.bins();
            let plane = map.height() * map.width();
            let mut grad = vec![0.0; active[v].count * d];
            for (weight, pg) in [
                (w.absolute, &eval.absolute[v].grad),
                (w.relative, &eval.relative[v].result.grad),
            ] {
                for (i, &off) in pg.offsets.iter().enumerate() {
                    let j = active[v].slot[off].expect("gradient outside the active pixels");
                    for (k, g) in pg.pixel(i).iter().enumerate() {
                        grad[j * d + k] += weight * g;
                    }
                }
            }
            let logits = map.logits_data_mut();
            for (off, slot) in active[v].slot.iter().enumerate() {
                if let Some(j) = *slot {
                    for k in 0..d {
                        logits[k * plane + off] += depth_moments[v].delta(j * d + k, grad[j * d + k], o, t, lr);
                    }
                }
            }
        }
    }
    if w.inter_channel != 0.0 || w.inter_keypoint != 0.0 {
        let gc = eval.bev.inter_channel.grad.data();
        let gk = eval.bev.inter_keypoint.grad.data();
        for (i, x) in student.bev.data.data_mut().iter_mut().enumerate() {
            let g = w.inter_channel * gc[i] + w.inter_keypoint * gk[i];
            *x += bev_moments.delta(i, g, o, t, o.bev_step_size * decay);
        }
    }
}

fn agreement(problem: &SceneProblem, student: &StudentState, eval: &Evaluation) -> Result<Vec<TargetAgreement>> {
    let norm = problem.distill_opts.gram.normalization;
    eval.bev
        .keypoints
        .iter()
        .map(|kp| {
            let fs = bilinear_sample(&student.bev, kp);
            let ft = bilinear_sample(&problem.scene.teacher_bev, kp);
            let (ks, kt) = (inter_keypoint_gram(&fs, norm)?, inter_keypoint_gram(&ft, norm)?);
            let (cs, ct) = (inter_channel_gram(&fs, norm)?, inter_channel_gram(&ft, norm)?);
            let dk = frobenius_sq_distance(&ks, &kt)?.sqrt();
            let nk = kt.frobenius_norm();
            Ok(TargetAgreement {
                target: kp.target,
                clipped: kp.clipped,
                keypoint_gram_distance: dk,
                teacher_keypoint_gram_norm: nk,
                keypoint_gram_relative: if nk > 0.0 { dk / nk } else { dk },
                channel_gram_distance: frobenius_sq_distance(&cs, &ct)?.sqrt(),
                teacher_channel_gram_norm: ct.frobenius_norm(),
                feature_distance: frobenius_sq_distance(&fs, &ft)?.sqrt(),
                teacher_feature_norm: ft.frobenius_norm(),
            })
        })
        .collect()
}

/// Trains on the scene generated from `cfg.scene` and returns the results.
pub fn train(cfg: &HarnessConfig) -> Result<TrainResults> {
    let problem = SceneProblem::new(generate_scene(&cfg.scene)?, cfg)?;
    train_problem(&problem, cfg)
}

pub fn train_problem(problem: &SceneProblem, cfg: &HarnessConfig) -> Result<TrainResults> {
    let o = &cfg.optimizer;
    let det = cfg.external_det_loss.unwrap_or(0.0);
    let mut student = problem.initial_student(cfg)?;
    let active = active_pixels(problem);
    let mut depth_moments: Vec<Moments> = active
        .iter()
        .map(|a| Moments::new(a.count * problem.bins.count()))
        .collect();
    let mut bev_moments = Moments::new(student.bev.data.len());

    let mut series = Vec::with_capacity(o.max_steps + 1);
    let mut initial = f64::NAN;
    let mut step = 0;
    let (stop_reason, eval) = loop {
        let eval = problem.evaluate(&student)?;
        let total = weighted_total(eval.values.as_array(), det, &cfg.weights);
        series.push(StepRecord {
            step,
            total,
            terms: eval.values,
        });
        if step == 0 {
            initial = total;
        }
        if !total.is_finite() || total > o.divergence_factor * initial.abs() {
            break (StopReason::Diverged, eval);
        }
        if total <= o.abs_tolerance {
            break (StopReason::AbsTolerance, eval);
        }
        if total <= (1.0 - o.target_reduction) * initial {
            break (StopReason::TargetReduction, eval);
        }
        if step == o.max_steps {
            break (StopReason::MaxSteps, eval);
        }
        let frac = step as f64 / o.max_steps as f64;
        let decay = 1.0 - (1.0 - o.final_step_fraction) * frac;
        step += 1;
        apply_update(
            &mut student,
            &eval,
            &active,
            &mut depth_moments,
            &mut bev_moments,
            cfg,
            step,
            decay,
        );
    };

    let final_total = series.last().map_or(f64::NAN, |r| r.total);
    let targets = agreement(problem, &student, &eval)?;
    let max_rel = targets.iter().map(|t| t.keypoint_gram_relative).fold(0.0, f64::max);
    let teacher = &problem.scene.teacher_bev.data;
    Ok(TrainResults {
        stop_reason,
        steps_taken: step,
        initial_total: initial,
        final_total,
        reduction: if initial != 0.0 {
            1.0 - final_total / initial
        } else {
            0.0
        },
        final_terms: eval.values,
        targets,
        max_keypoint_gram_relative: max_rel,
        bev_distance: frobenius_sq_distance(&student.bev.data, teacher)?.sqrt(),
        teacher_bev_norm: teacher.frobenius_norm(),
        series,
    })
}

impl TrainResults {
    pub fn converged(&self) -> bool {
        matches!(self.stop_reason, StopReason::TargetReduction | StopReason::AbsTolerance)
    }
}

pub fn run_train_toy(cfg: &HarnessConfig) -> Result<RunReport> {
    let res = train(cfg)?;
    RunReport::new("train-toy", cfg, res.converged(), res)
}
