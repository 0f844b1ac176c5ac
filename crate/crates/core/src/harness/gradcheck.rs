//! Finite-difference checks of every analytic gradient on seeded random
//! instances.

use serde::{Deserialize, Serialize};

use super::config::HarnessConfig;
use super::report::RunReport;
use crate::depth::{
    absolute_depth_loss, continuous_depth, inner_depth_loss, inner_depth_loss_with_references, CategoricalDepthMap,
    DepthBins, Reference, ReferenceStrategy,
};
use crate::distill::{
    bev_distill_loss, inter_channel_loss, inter_keypoint_loss, BevFeatureMap, DistillOptions, TargetKeypointFeatures,
};
use crate::error::Result;
use crate::geometry::{BevGrid, Box3D, ForegroundDepthSet, Pixel};
use crate::numerics::{finite_difference_gradient, max_relative_error, Tensor};
use crate::par;
use crate::scenegen::rng::CounterRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTerm {
    Absolute,
    Relative,
    InterChannel,
    InterKeypoint,
    /// Both Gram terms through bilinear keypoint sampling of a BEV map.
    BevDistill,
}

impl GradTerm {
    pub const ALL: [GradTerm; 5] = [
        GradTerm::Absolute,
        GradTerm::Relative,
        GradTerm::InterChannel,
        GradTerm::InterKeypoint,
        GradTerm::BevDistill,
    ];

    fn stream(self) -> u64 {
        (self as u64 + 1) << 32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermCheck {
    pub term: GradTerm,
    pub skipped_zero_weight: bool,
    pub instances: usize,
    pub checked: usize,
    /// Instances whose reference choice sits within `tie_margin` of a tie.
    pub tie_adjacent: Vec<usize>,
    pub max_relative_error: f64,
    pub worst_instance: Option<usize>,
    pub passed: bool,
}

enum Outcome {
    Checked(f64),
    TieAdjacent,
}

fn rand_tensor(rng: &mut CounterRng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
}

fn rand_usize(rng: &mut CounterRng, lo: usize, hi: usize) -> usize {
    lo + rng.index(hi - lo + 1)
}

fn fd_error<F: FnMut(&Tensor) -> f64>(f: F, x: &Tensor, analytic: &Tensor, h: f64) -> Result<f64> {
    let numeric = finite_difference_gradient(f, x, h)?;
    Ok(max_relative_error(analytic, &numeric))
}

fn check_absolute(rng: &mut CounterRng, h: f64) -> Result<Outcome> {
    let (d, hh, w) = (rand_usize(rng, 2, 8), rand_usize(rng, 1, 4), rand_usize(rng, 1, 4));
    let bins = DepthBins::uniform(d, 1.0, 20.0)?;
    let logits = rand_tensor(rng, &[d, hh, w], 1.5);
    let gt = Tensor::new(vec![hh, w], (0..hh * w).map(|_| rng.range(1.0, 20.0)).collect())?;
    let mut valid: Vec<bool> = (0..hh * w).map(|_| rng.uniform() < 0.7).collect();
    valid[rng.index(hh * w)] = true;
    let loss = |x: &Tensor| absolute_depth_loss(&CategoricalDepthMap::new(x.clone())?, &gt, &valid, &bins);
    let analytic = loss(&logits)?.grad;
    fd_error(|x| loss(x).map_or(f64::NAN, |l| l.value), &logits, &analytic, h).map(Outcome::Checked)
}

fn random_targets(rng: &mut CounterRng, hh: usize, w: usize) -> Vec<ForegroundDepthSet> {
    let count = rand_usize(rng, 1, 3);
    (0..count)
        .map(|t| {
            let n = rand_usize(rng, 2, (hh * w).min(6));
            let entries = (0..n)
                .map(|_| {
                    let px = Pixel {
                        row: rng.index(hh),
                        col: rng.index(w),
                    };
                    (px, rng.range(1.0, 20.0))
                })
                .collect();
            ForegroundDepthSet::new(t, entries)
        })
        .collect()
}

/// Gap between the best and runner-up reference scores of one target.
fn selection_gap(
    set: &ForegroundDepthSet,
    map: &CategoricalDepthMap,
    bins: &DepthBins,
    cfg: &HarnessConfig,
) -> Result<f64> {
    let mut scores = Vec::with_capacity(set.len());
    for (i, &px) in set.pixels.iter().enumerate() {
        let p = map.pixel_probs(px);
        let s = match cfg.reference {
            ReferenceStrategy::AllToAdaptiveHighestConf => -p.iter().copied().fold(0.0, f64::max),
            _ => {
                let e = set.gt_depth[i] - continuous_depth(&p, bins)?;
                if cfg.signed_reference_error {
                    e
                } else {
                    e.abs()
                }
            }
        };
        scores.push(s);
    }
    scores.sort_by(f64::total_cmp);
    Ok(scores[1] - scores[0])
}

fn check_relative(rng: &mut CounterRng, cfg: &HarnessConfig, h: f64) -> Result<Outcome> {
    let (d, hh, w) = (rand_usize(rng, 2, 8), rand_usize(rng, 2, 5), rand_usize(rng, 2, 5));
    let bins = DepthBins::uniform(d, 1.0, 20.0)?;
    let logits = rand_tensor(rng, &[d, hh, w], 1.5);
    let targets = random_targets(rng, hh, w);
    let map = CategoricalDepthMap::new(logits.clone())?;
    let opts = cfg.inner_depth_options();
    let full = inner_depth_loss(&targets, &map, &bins, &opts)?;
    if matches!(
        cfg.reference,
        ReferenceStrategy::AllToAdaptiveSmallestError | ReferenceStrategy::AllToAdaptiveHighestConf
    ) {
        for set in targets.iter().filter(|s| !s.skipped) {
            if selection_gap(set, &map, &bins, cfg)? < cfg.gradcheck.tie_margin {
                return Ok(Outcome::TieAdjacent);
            }
        }
    }
    let refs: Vec<Reference> = full.references.clone();
    let loss = |x: &Tensor| {
        inner_depth_loss_with_references(
            &targets,
            &CategoricalDepthMap::new(x.clone())?,
            &bins,
            &refs,
            opts.reduction,
        )
    };
    fd_error(
        |x| loss(x).map_or(f64::NAN, |l| l.result.value),
        &logits,
        &full.result.grad,
        h,
    )
    .map(Outcome::Checked)
}

fn check_gram(rng: &mut CounterRng, cfg: &HarnessConfig, keypoint: bool, h: f64) -> Result<Outcome> {
    let count = rand_usize(rng, 1, 3);
    let c = rand_usize(rng, 1, 6);
    let shapes: Vec<[usize; 2]> = (0..count).map(|_| [rand_usize(rng, 2, 9), c]).collect();
    let teachers: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(rng, s, 1.0)).collect();
    let students: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(rng, s, 1.0)).collect();
    let flat = Tensor::new(
        vec![students.iter().map(Tensor::len).sum()],
        students.iter().flat_map(|s| s.data().iter().copied()).collect(),
    )?;
    let opts = cfg.distill_options().gram;
    let unpack = |x: &Tensor| -> Vec<TargetKeypointFeatures> {
        let mut off = 0;
        shapes
            .iter()
            .zip(&teachers)
            .map(|(s, t)| {
                let n = s[0] * s[1];
                let st = Tensor::new(s.to_vec(), x.data()[off..off + n].to_vec()).unwrap();
                off += n;
                TargetKeypointFeatures::new(st, t.clone()).unwrap()
            })
            .collect()
    };
    let run = |x: &Tensor| {
        let t = unpack(x);
        if keypoint {
            inter_keypoint_loss(&t, opts)
        } else {
            inter_channel_loss(&t, opts)
        }
    };
    let res = run(&flat);
    let analytic = Tensor::new(
        flat.shape().to_vec(),
        res.grads.iter().flat_map(|g| g.data().iter().copied()).collect(),
    )?;
    fd_error(|x| run(x).value, &flat, &analytic, h).map(Outcome::Checked)
}

fn check_bev(rng: &mut CounterRng, cfg: &HarnessConfig, h: f64) -> Result<Outcome> {
    let grid = BevGrid::new(-4.0, 4.0, -4.0, 4.0, rand_usize(rng, 4, 10), rand_usize(rng, 4, 10))?;
    let c = rand_usize(rng, 1, 4);
    let shape = [c, grid.height, grid.width];
    let teacher = BevFeatureMap::new(rand_tensor(rng, &shape, 1.0), grid)?;
    let student = rand_tensor(rng, &shape, 1.0);
    let boxes = (0..rand_usize(rng, 1, 2))
        .map(|_| {
            let center = nalgebra::Vector3::new(rng.range(-3.0, 3.0), rng.range(-3.0, 3.0), 0.8);
            let size = nalgebra::Vector3::new(rng.range(0.8, 3.0), rng.range(0.6, 2.0), 1.5);
            Box3D::new(center, size, rng.range(-3.1, 3.1))
        })
        .collect::<Result<Vec<_>>>()?;
    let opts = DistillOptions {
        g: rand_usize(rng, 2, 4),
        ..cfg.distill_options()
    };
    let (wc, wk) = (cfg.weights.inter_channel, cfg.weights.inter_keypoint);
    let run = |x: &Tensor| -> Result<(f64, Tensor)> {
        let l = bev_distill_loss(&BevFeatureMap::new(x.clone(), grid)?, &teacher, &boxes, &opts)?;
        let mut g = l.inter_channel.grad.clone();
        g.scale(wc);
        g.axpy(wk, &l.inter_keypoint.grad)?;
        Ok((wc * l.inter_channel.value + wk * l.inter_keypoint.value, g))
    };
    let (_, analytic) = run(&student)?;
    fd_error(|x| run(x).map_or(f64::NAN, |r| r.0), &student, &analytic, h).map(Outcome::Checked)
}

fn term_weight(term: GradTerm, cfg: &HarnessConfig) -> f64 {
    let w = &cfg.weights;
    match term {
        GradTerm::Absolute => w.absolute,
        GradTerm::Relative => w.relative,
        GradTerm::InterChannel => w.inter_channel,
        GradTerm::InterKeypoint => w.inter_keypoint,
        GradTerm::BevDistill => w.inter_channel + w.inter_keypoint,
    }
}

/// Runs `instances` seeded checks of one term. Zero-weight terms are skipped.
pub fn check_term(term: GradTerm, cfg: &HarnessConfig) -> Result<TermCheck> {
    let gc = &cfg.gradcheck;
    if term_weight(term, cfg) == 0.0 {
        return Ok(TermCheck {
            term,
            skipped_zero_weight: true,
            instances: 0,
            checked: 0,
            tie_adjacent: Vec::new(),
            max_relative_error: 0.0,
            worst_instance: None,
            passed: true,
        });
    }
    let outcomes = par::map_range(gc.instances, |i| {
        let mut rng = CounterRng::new(gc.seed, term.stream() + i as u64);
        match term {
            GradTerm::Absolute => check_absolute(&mut rng, gc.step),
            GradTerm::Relative => check_relative(&mut rng, cfg, gc.step),
            GradTerm::InterChannel => check_gram(&mut rng, cfg, false, gc.step),
            GradTerm::InterKeypoint => check_gram(&mut rng, cfg, true, gc.step),
            GradTerm::BevDistill => check_bev(&mut rng, cfg, gc.step),
        }
    });
    let mut report = TermCheck {
        term,
        skipped_zero_weight: false,
        instances: gc.instances,
        checked: 0,
        tie_adjacent: Vec::new(),
        max_relative_error: 0.0,
        worst_instance: None,
        passed: true,
    };
    for (i, o) in outcomes.into_iter().enumerate() {
        match o? {
            Outcome::TieAdjacent => report.tie_adjacent.push(i),
            Outcome::Checked(e) => {
                report.checked += 1;
                // NaN compares false, so it is forced in explicitly
                if e.is_nan() || e > report.max_relative_error {
                    report.max_relative_error = e;
                    report.worst_instance = Some(i);
                }
            }
        }
    }
    report.passed = report.max_relative_error <= gc.tolerance;
    Ok(report)
}

pub fn run_gradcheck(cfg: &HarnessConfig) -> Result<RunReport> {
    let checks = GradTerm::ALL
        .iter()
        .map(|&t| check_term(t, cfg))
        .collect::<Result<Vec<_>>>()?;
    let passed = checks.iter().all(|c| c.passed);
    RunReport::new("gradcheck", cfg, passed, checks)
}
