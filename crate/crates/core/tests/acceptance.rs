//! Acceptance suite: one PASS/FAIL line per criterion. Exits nonzero if any
//! criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, Vector3};

use tig_core::depth::{
    inner_depth_loss, inner_depth_loss_with_references, CategoricalDepthMap, LossReduction, Reference,
};
use tig_core::distill::{
    bev_distill_loss, inter_channel_loss, inter_keypoint_loss, GramOptions, TargetKeypointFeatures,
};
use tig_core::geometry::{
    build_gt_depth_map, points_in_box, Box3D, CameraModel, ForegroundDepthSet, Pixel, RigidTransform,
};
use tig_core::harness::gradcheck::{check_term, GradTerm};
use tig_core::harness::train::train;
use tig_core::harness::{HarnessConfig, SceneProblem};
use tig_core::oracle;
use tig_core::scenegen::generate_scene;
use tig_core::scenegen::rng::CounterRng;
use tig_core::Tensor;

const IDENTITY_BUDGET: Duration = Duration::from_secs(1);
const GRAD_TOLERANCE: f64 = 1e-5;
const GRAD_MIN_INSTANCES: usize = 100;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const ORACLE_INSTANCES: usize = 1000;
const ORACLE_TOLERANCE: f64 = 1e-12;
const ORTHOGONAL_TOLERANCE: f64 = 1e-9;
const ORDERING_TOLERANCE: f64 = 1e-12;
const ROUND_TRIP_TOLERANCE: f64 = 1e-9;
const GEOMETRY_POINTS: usize = 10_000;
const MIN_REDUCTION: f64 = 0.99;
const MAX_KEYPOINT_GRAM_RELATIVE: f64 = 0.01;
const MAX_TRAIN_STEPS: usize = 2000;
const TRAIN_BUDGET: Duration = Duration::from_secs(60);

// Standard scene under the default config, pinned from the first verified run.
const PINNED_STEPS: usize = 1108;
const PINNED_FINAL_TOTAL: f64 = 2.395830520545691;
const PINNED_MAX_KEYPOINT_GRAM_RELATIVE: f64 = 0.0028722339439062826;
const PINNED_BEV_DISTANCE: f64 = 30.282287858184972;
const PINNED_RELATIVE_TOLERANCE: f64 = 1e-6;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn identity() -> Outcome {
    let start = Instant::now();
    let cfg = HarnessConfig::default();
    let problem = SceneProblem::new(generate_scene(&cfg.scene).map_err(e2s)?, &cfg).map_err(e2s)?;
    let mut student = problem.noise_student(cfg.scene.seed, 0.5).map_err(e2s)?;
    student.bev = problem.scene.teacher_bev.clone();
    let mut supervised = 0;
    for (view, map) in problem.views.iter().zip(&student.depth) {
        // ground truth replaced by the student's own continuous depth
        let targets: Vec<ForegroundDepthSet> = view
            .targets
            .iter()
            .map(|t| {
                let entries = t
                    .pixels
                    .iter()
                    .map(|&px| {
                        let d = tig_core::depth::continuous_depth(&map.pixel_probs(px), &problem.bins).unwrap();
                        (px, d)
                    })
                    .collect();
                let mut s = ForegroundDepthSet::new(t.target, entries);
                s.projected_center = t.projected_center;
                s
            })
            .collect();
        let r = inner_depth_loss(&targets, map, &problem.bins, &problem.depth_opts).map_err(e2s)?;
        supervised += usize::from(!r.result.empty_supervision);
        ensure(r.result.value == 0.0, || {
            format!("view {}: L_R = {:e}", view.camera, r.result.value)
        })?;
        ensure(r.result.grad.data().iter().all(|g| *g == 0.0), || {
            "nonzero L_R gradient".into()
        })?;
    }
    ensure(supervised > 0, || "no supervised view".into())?;
    let bev = bev_distill_loss(
        &student.bev,
        &problem.scene.teacher_bev,
        &problem.scene.boxes,
        &problem.distill_opts,
    )
    .map_err(e2s)?;
    for (name, l) in [("L_IC", &bev.inter_channel), ("L_IK", &bev.inter_keypoint)] {
        ensure(l.value == 0.0, || format!("{name} = {:e}", l.value))?;
        ensure(l.grad.data().iter().all(|g| *g == 0.0), || {
            format!("nonzero {name} gradient")
        })?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < IDENTITY_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{supervised} supervised views, all values and gradients exactly 0 in {elapsed:.2?}"
    ))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut cfg = HarnessConfig::default();
    cfg.gradcheck.instances = GRAD_MIN_INSTANCES;
    let mut parts = Vec::new();
    for term in GradTerm::ALL {
        let c = check_term(term, &cfg).map_err(e2s)?;
        ensure(c.checked + c.tie_adjacent.len() >= GRAD_MIN_INSTANCES, || {
            format!("{term:?}: too few instances")
        })?;
        ensure(c.max_relative_error <= GRAD_TOLERANCE, || {
            format!(
                "{term:?}: max rel error {:e} (instance {:?})",
                c.max_relative_error, c.worst_instance
            )
        })?;
        parts.push(format!("{term:?} {:.1e}", c.max_relative_error));
    }
    let elapsed = start.elapsed();
    ensure(elapsed < GRAD_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!("{} in {elapsed:.2?}", parts.join(", ")))
}

fn oracles() -> Outcome {
    let checks = oracle::equivalence(2024, ORACLE_INSTANCES, ORACLE_TOLERANCE).map_err(e2s)?;
    let mut parts = Vec::new();
    for c in &checks {
        ensure(c.passed && c.instances == ORACLE_INSTANCES, || {
            format!("{}: max error {:e}", c.name, c.max_error)
        })?;
        parts.push(format!("{} {:.0e}", c.name, c.max_error));
    }
    Ok(parts.join(", "))
}

fn random_rows(rng: &mut CounterRng, n: usize, c: usize) -> Tensor {
    Tensor::new(vec![n, c], (0..n * c).map(|_| rng.normal()).collect()).unwrap()
}

fn invariances() -> Outcome {
    let mut rng = CounterRng::new(99, 0);
    // (a) dyadic depths keep every shift exact
    for _ in 0..100 {
        let (d, n) = (2 + rng.index(6), 2 + rng.index(8));
        let bins = tig_core::depth::DepthBins::uniform(d, 1.0, 40.0).map_err(e2s)?;
        let map =
            CategoricalDepthMap::new(Tensor::new(vec![d, 1, n], random_rows(&mut rng, d, n).into_data()).unwrap())
                .map_err(e2s)?;
        let gt: Vec<f64> = (0..n).map(|_| (64 + rng.index(2000)) as f64 / 64.0).collect();
        let shift = rng.index(640) as f64 / 64.0;
        let make = |s: f64| ForegroundDepthSet::new(0, (0..n).map(|i| (Pixel { row: 0, col: i }, gt[i] + s)).collect());
        let refs = [Reference::Pixel(rng.index(n))];
        let a = inner_depth_loss_with_references(&[make(0.0)], &map, &bins, &refs, LossReduction::Mean).map_err(e2s)?;
        let b =
            inner_depth_loss_with_references(&[make(shift)], &map, &bins, &refs, LossReduction::Mean).map_err(e2s)?;
        ensure(
            a.result.value == b.result.value && a.result.grad == b.result.grad,
            || format!("(a) shift {shift}: {} vs {}", a.result.value, b.result.value),
        )?;
    }
    // (b) orthogonal channel mixing
    let opts = GramOptions::default();
    let mut worst_b = 0.0_f64;
    for _ in 0..100 {
        let (n, c) = (2 + rng.index(35), 1 + rng.index(16));
        let teacher = random_rows(&mut rng, n, c);
        let q = DMatrix::from_fn(c, c, |_, _| rng.normal()).qr().q();
        let t = DMatrix::from_row_slice(n, c, teacher.data());
        let s = t * q;
        let student = Tensor::new(vec![n, c], (0..n * c).map(|i| s[(i / c, i % c)]).collect()).unwrap();
        let l = inter_keypoint_loss(&[TargetKeypointFeatures::new(student, teacher).map_err(e2s)?], opts);
        worst_b = worst_b.max(l.value);
    }
    ensure(worst_b <= ORTHOGONAL_TOLERANCE, || format!("(b) L_IK = {worst_b:e}"))?;
    // (c) small integers keep every Gram sum exact
    for _ in 0..100 {
        let (n, c) = (2 + rng.index(35), 1 + rng.index(16));
        let teacher = Tensor::new(vec![n, c], (0..n * c).map(|_| rng.index(17) as f64 - 8.0).collect()).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.index(i + 1));
        }
        let student = Tensor::new(
            vec![n, c],
            perm.iter()
                .flat_map(|&r| teacher.data()[r * c..(r + 1) * c].to_vec())
                .collect(),
        )
        .unwrap();
        let l = inter_channel_loss(&[TargetKeypointFeatures::new(student, teacher).map_err(e2s)?], opts);
        ensure(l.value == 0.0, || format!("(c) L_IC = {:e}", l.value))?;
    }
    // (d) box order
    let cfg = HarnessConfig::default();
    let problem = SceneProblem::new(generate_scene(&cfg.scene).map_err(e2s)?, &cfg).map_err(e2s)?;
    let student = problem.noise_student(7, 1.0).map_err(e2s)?;
    let teacher = &problem.scene.teacher_bev;
    let base = bev_distill_loss(&student.bev, teacher, &problem.scene.boxes, &problem.distill_opts).map_err(e2s)?;
    let mut boxes = problem.scene.boxes.clone();
    boxes.reverse();
    boxes.rotate_left(1);
    let perm = bev_distill_loss(&student.bev, teacher, &boxes, &problem.distill_opts).map_err(e2s)?;
    let mut worst_d = 0.0_f64;
    for (x, y) in [
        (&base.inter_channel, &perm.inter_channel),
        (&base.inter_keypoint, &perm.inter_keypoint),
    ] {
        worst_d = worst_d.max((x.value - y.value).abs() / x.value.abs().max(1.0));
        for (a, b) in x.grad.data().iter().zip(y.grad.data()) {
            worst_d = worst_d.max((a - b).abs());
        }
    }
    ensure(worst_d <= ORDERING_TOLERANCE, || {
        format!("(d) box order changes loss by {worst_d:e}")
    })?;
    Ok(format!(
        "(a) exact, (b) max L_IK {worst_b:.1e}, (c) exact, (d) max diff {worst_d:.1e}"
    ))
}

fn geometry() -> Outcome {
    let cfg = HarnessConfig::default();
    let scene = generate_scene(&cfg.scene).map_err(e2s)?;
    let mut rng = CounterRng::new(5, 0);
    let mut worst = 0.0_f64;
    for i in 0..GEOMETRY_POINTS {
        let cam = &scene.cameras[i % scene.cameras.len()];
        let (u, v) = (rng.range(0.0, cam.width as f64), rng.range(0.0, cam.height as f64));
        let depth = rng.range(cam.z_near + 0.01, 80.0);
        let p = cam.unproject(u, v, depth);
        let q = cam.project_point(&p, 0).ok_or("in-frustum point not projected")?;
        worst = worst
            .max((q.u - u).abs())
            .max((q.v - v).abs())
            .max((q.depth - depth).abs());
    }
    ensure(worst <= ROUND_TRIP_TOLERANCE, || format!("round trip error {worst:e}"))?;

    let mut mismatches = 0;
    let mut excluded = 0;
    for _ in 0..GEOMETRY_POINTS / 100 {
        let size = Vector3::new(rng.range(0.5, 5.0), rng.range(0.5, 3.0), rng.range(0.5, 2.5));
        let center = Vector3::new(rng.range(-10.0, 10.0), rng.range(-10.0, 10.0), rng.range(0.0, 2.0));
        let bx = Box3D::new(center, size, rng.range(-3.2, 3.2)).map_err(e2s)?;
        let pts: Vec<f64> = (0..100)
            .flat_map(|_| {
                let l = Vector3::new(
                    rng.range(-0.7, 0.7) * size.x,
                    rng.range(-0.7, 0.7) * size.y,
                    rng.range(-0.7, 0.7) * size.z,
                );
                let w = bx.to_world(&l);
                [w.x, w.y, w.z]
            })
            .collect();
        let pts = Tensor::new(vec![100, 3], pts).unwrap();
        let inside = points_in_box(&bx, &pts).map_err(e2s)?;
        for (i, lib) in inside.iter().enumerate() {
            let p = [pts.data()[3 * i], pts.data()[3 * i + 1], pts.data()[3 * i + 2]];
            let l = bx.to_local(&Vector3::from(p));
            let margin = (0..3)
                .map(|k| (l[k].abs() - 0.5 * bx.size[k]).abs())
                .fold(f64::INFINITY, f64::min);
            if margin < 1e-9 {
                excluded += 1;
                continue;
            }
            let (c, s) = (bx.center, bx.size);
            mismatches +=
                usize::from(*lib != oracle::box_contains_halfspace([c.x, c.y, c.z], [s.x, s.y, s.z], bx.yaw, p));
        }
    }
    ensure(mismatches == 0, || format!("{mismatches} containment mismatches"))?;

    // z-buffer: camera at the origin looking down +x
    let rot = nalgebra::Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
    let cam = CameraModel::new(
        10.0,
        10.0,
        5.0,
        5.0,
        10,
        10,
        RigidTransform::new(rot, Vector3::zeros()).map_err(e2s)?,
    )
    .map_err(e2s)?;
    let pts = |rows: &[[f64; 3]]| Tensor::new(vec![rows.len(), 3], rows.iter().flatten().copied().collect()).unwrap();
    let collide = [[8.0, 0.0, 0.0], [3.0, 0.0, 0.0], [5.0, 0.0, 0.0]];
    for order in [[0, 1, 2], [2, 1, 0], [1, 2, 0]] {
        let m = build_gt_depth_map(&cam, &pts(&order.map(|i| collide[i]))).map_err(e2s)?;
        let k = 5 * 10 + 5;
        ensure(m.valid[k] && m.depth.data()[k] == 3.0 && m.valid_count() == 1, || {
            format!("z-buffer kept {} for order {order:?}", m.depth.data()[k])
        })?;
    }
    let m = build_gt_depth_map(&cam, &pts(&[[-2.0, 0.0, 0.0], [0.1, 0.0, 0.0], [4.0, 100.0, 0.0]])).map_err(e2s)?;
    ensure(m.valid_count() == 0, || {
        "behind-camera, near-plane or off-image point kept".into()
    })?;
    Ok(format!(
        "round trip {worst:.1e} over {GEOMETRY_POINTS} points, containment 0 mismatches ({excluded} boundary-excluded), z-buffer ok"
    ))
}

fn convergence() -> Outcome {
    let start = Instant::now();
    let cfg = HarnessConfig::default();
    let s = &cfg.scene;
    ensure(
        s.seed == 42 && s.num_boxes == 4 && s.num_cameras == 6 && s.channels == 16,
        || "default config is not the standard scene".into(),
    )?;
    ensure(
        s.grid.height == 64 && s.grid.width == 64 && cfg.keypoint_grid == 6,
        || "grid or g differ".into(),
    )?;
    ensure(cfg.weights.as_array() == [1.0; 4], || "weights are not unit".into())?;
    let r = train(&cfg).map_err(e2s)?;
    let elapsed = start.elapsed();
    ensure(r.converged() && r.steps_taken <= MAX_TRAIN_STEPS, || {
        format!("stopped by {:?} after {}", r.stop_reason, r.steps_taken)
    })?;
    ensure(r.reduction >= MIN_REDUCTION, || format!("reduction {}", r.reduction))?;
    ensure(r.max_keypoint_gram_relative <= MAX_KEYPOINT_GRAM_RELATIVE, || {
        format!(
            "keypoint Gram distance {} of teacher norm",
            r.max_keypoint_gram_relative
        )
    })?;
    ensure(r.bev_distance > 0.0, || "raw BEV distance is zero".into())?;
    ensure(r.series.iter().all(|x| x.total.is_finite()), || {
        "non-finite loss in series".into()
    })?;
    let pinned = |got: f64, want: f64| (got - want).abs() <= PINNED_RELATIVE_TOLERANCE * want.abs();
    ensure(r.steps_taken == PINNED_STEPS, || {
        format!("steps {} vs pinned {PINNED_STEPS}", r.steps_taken)
    })?;
    ensure(pinned(r.final_total, PINNED_FINAL_TOTAL), || {
        format!("final total {:?}", r.final_total)
    })?;
    ensure(
        pinned(r.max_keypoint_gram_relative, PINNED_MAX_KEYPOINT_GRAM_RELATIVE),
        || format!("keypoint Gram relative {:?}", r.max_keypoint_gram_relative),
    )?;
    ensure(pinned(r.bev_distance, PINNED_BEV_DISTANCE), || {
        format!("BEV distance {:?}", r.bev_distance)
    })?;
    ensure(elapsed < TRAIN_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{:.4}% reduction in {} steps, max keypoint Gram distance {:.3}% of teacher norm, raw BEV distance {:.2} (teacher norm {:.2}), {elapsed:.2?}",
        100.0 * r.reduction,
        r.steps_taken,
        100.0 * r.max_keypoint_gram_relative,
        r.bev_distance,
        r.teacher_bev_norm
    ))
}

fn run_cli(args: &[&str], out: &Path, threads: &str) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_tig"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("TIG_THREADS", threads)
        .stdout(std::process::Stdio::null())
        .status()
        .map_err(e2s)?;
    ensure(status.success(), || format!("tig {args:?} exited with {status}"))
}

fn artifacts(dir: &Path) -> Result<Vec<(String, String)>, String> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(e2s)?
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let text = std::fs::read_to_string(&p).map_err(e2s)?;
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            let text = if name.ends_with(".json") && name != "oracle_fixtures.json" {
                let mut v: serde_json::Value = serde_json::from_str(&text).map_err(e2s)?;
                v["wall_clock_seconds"] = serde_json::Value::from(0.0);
                v.to_string()
            } else {
                text
            };
            Ok((name, text))
        })
        .collect()
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let short = tmp.path().join("short.json");
    std::fs::write(
        &short,
        r#"{"optimizer": {"max_steps": 40, "target_reduction": 0.5}, "gradcheck": {"instances": 20}}"#,
    )
    .map_err(e2s)?;
    let short = short.to_str().unwrap();
    let commands: [&[&str]; 6] = [
        &["gen-scene"],
        &["render-depth"],
        &["eval-losses", "--student", "noise"],
        &["gradcheck", "--config", short],
        &["train-toy", "--config", short],
        &["oracle", "--instances", "100"],
    ];
    let mut runs = Vec::new();
    for (i, threads) in ["1", "4", "4"].iter().enumerate() {
        let out = tmp.path().join(format!("run{i}"));
        for args in commands {
            run_cli(args, &out, threads)?;
        }
        runs.push(artifacts(&out)?);
    }
    let files = runs[0].len();
    for r in &runs[1..] {
        ensure(r.len() == files, || "artifact sets differ".into())?;
        for ((na, ta), (nb, tb)) in runs[0].iter().zip(r) {
            ensure(na == nb && ta == tb, || format!("{na} differs between runs"))?;
        }
    }
    Ok(format!(
        "{files} artifacts identical across TIG_THREADS=1, 4 and a repeat run"
    ))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 7] = [
        ("identity", identity),
        ("gradients", gradients),
        ("oracle equivalence", oracles),
        ("invariances", invariances),
        ("geometry", geometry),
        ("convergence", convergence),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
