use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use tig_core::harness::gradcheck::run_gradcheck;
use tig_core::harness::train::run_train_toy;
use tig_core::harness::{total_loss, HarnessConfig, RunReport, SceneProblem};
use tig_core::oracle;
use tig_core::scenegen::scn::{read_scn, write_scn};
use tig_core::scenegen::{generate_scene, SyntheticScene};
use tig_core::{par, Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "tig", version, about = "Inner-depth and BEV Gram distillation harness")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// JSON config path, or `default`.
    #[arg(long, global = true, default_value = "default")]
    config: String,
    /// Overrides `scene.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for reports and artifacts.
    #[arg(long, global = true, default_value = "tig-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StudentSource {
    Teacher,
    Noise,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: scene.scn and teacher_bev.tsr.
    GenScene,
    /// Render per-view ground-truth depth maps and foreground sets.
    RenderDepth {
        #[command(flatten)]
        input: SceneInput,
    },
    /// Evaluate every loss term for one student.
    EvalLosses {
        #[command(flatten)]
        input: SceneInput,
        #[arg(long, value_enum, default_value = "noise")]
        student: StudentSource,
        /// Student BEV map (C x H x W TSR); replaces the BEV part of `--student`.
        #[arg(long)]
        student_bev: Option<PathBuf>,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck,
    /// Optimize a student against the composed loss on one scene.
    TrainToy,
    /// Compare kernels against brute-force oracles and write fixtures.
    Oracle {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
    },
}

#[derive(clap::Args)]
struct SceneInput {
    /// Scene file; generated from the config when absent.
    #[arg(long, requires = "teacher")]
    scene: Option<PathBuf>,
    /// Teacher BEV TSR accompanying `--scene`.
    #[arg(long, requires = "scene")]
    teacher: Option<PathBuf>,
}

impl SceneInput {
    fn load(&self, cfg: &HarnessConfig) -> Result<SyntheticScene> {
        match (&self.scene, &self.teacher) {
            (Some(s), Some(t)) => {
                let geo = read_scn(&std::fs::read_to_string(s)?)?;
                geo.with_teacher(Tensor::from_tsr(&std::fs::read_to_string(t)?)?)
            }
            _ => generate_scene(&cfg.scene),
        }
    }
}

fn write(out: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::write(out.join(name), text)?;
    Ok(())
}

fn gen_scene(cfg: &HarnessConfig, out: &Path) -> Result<RunReport> {
    let scene = generate_scene(&cfg.scene)?;
    write(out, "scene.scn", &write_scn(&scene))?;
    write(out, "teacher_bev.tsr", &scene.teacher_bev.data.to_tsr())?;
    let summary = json!({
        "boxes": scene.boxes.len(),
        "points": scene.labels.len(),
        "ground_points": scene.labels.iter().filter(|l| **l < 0).count(),
        "cameras": scene.cameras.len(),
        "teacher_bev_shape": scene.teacher_bev.data.shape(),
    });
    RunReport::new("gen-scene", cfg, true, summary)
}

fn render_depth(cfg: &HarnessConfig, input: &SceneInput, out: &Path) -> Result<RunReport> {
    let problem = SceneProblem::new(input.load(cfg)?, cfg)?;
    let mut views = Vec::new();
    for view in &problem.views {
        let v = view.camera;
        write(out, &format!("depth_{v}.tsr"), &view.depth.depth.to_tsr())?;
        let mask = view.depth.valid.iter().map(|b| f64::from(u8::from(*b))).collect();
        write(
            out,
            &format!("valid_{v}.tsr"),
            &Tensor::new(view.depth.depth.shape().to_vec(), mask)?.to_tsr(),
        )?;
        let targets: Vec<_> = view
            .targets
            .iter()
            .map(|t| {
                json!({
                    "target": t.target,
                    "pixels": t.pixels,
                    "gt_depth": t.gt_depth,
                    "skipped": t.skipped,
                    "projected_center": t.projected_center,
                })
            })
            .collect();
        views.push(json!({"camera": v, "valid_pixels": view.depth.valid_count(), "targets": targets}));
    }
    RunReport::new("render-depth", cfg, true, json!({ "views": views }))
}

fn eval_losses(
    cfg: &HarnessConfig,
    input: &SceneInput,
    source: StudentSource,
    student_bev: Option<&Path>,
) -> Result<RunReport> {
    let problem = SceneProblem::new(input.load(cfg)?, cfg)?;
    let mut student = match source {
        StudentSource::Teacher => problem.teacher_student()?,
        StudentSource::Noise => problem.noise_student(problem.scene.seed, cfg.optimizer.init_noise)?,
    };
    if let Some(path) = student_bev {
        let data = Tensor::from_tsr(&std::fs::read_to_string(path)?)?;
        student.bev = tig_core::distill::BevFeatureMap::new(data, problem.scene.grid)?;
    }
    let eval = problem.evaluate(&student)?;
    let total = total_loss(
        &eval.packed_components(&student),
        cfg.external_det_loss.unwrap_or(0.0),
        &cfg.weights,
    )?;
    let results = json!({
        "terms": eval.values,
        "total": total.value,
        "total_grad_norm": total.grad.frobenius_norm(),
        "empty_supervision": total.empty_supervision,
        "per_view_relative": eval.relative.iter().map(|r| json!({
            "per_target": r.per_target,
            "references": r.references,
        })).collect::<Vec<_>>(),
        "per_target_inter_channel": eval.bev.per_target_channel,
        "per_target_inter_keypoint": eval.bev.per_target_keypoint,
        "clipped_targets": eval.bev.keypoints.iter().filter(|k| k.clipped).map(|k| k.target).collect::<Vec<_>>(),
    });
    RunReport::new("eval-losses", cfg, true, results)
}

fn run_oracle(cfg: &HarnessConfig, instances: usize, out: &Path) -> Result<RunReport> {
    write(
        out,
        "oracle_fixtures.json",
        &(serde_json::to_string_pretty(&oracle::fixtures()).unwrap() + "\n"),
    )?;
    let checks = oracle::equivalence(cfg.scene.seed, instances, 1e-12)?;
    let passed = checks.iter().all(|c| c.passed);
    RunReport::new("oracle", cfg, passed, checks)
}

fn run(cli: &Cli) -> Result<RunReport> {
    let mut cfg = HarnessConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.scene.seed = seed;
    }
    std::fs::create_dir_all(&cli.out)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenScene => gen_scene(&cfg, out),
        Command::RenderDepth { input } => render_depth(&cfg, input, out),
        Command::EvalLosses {
            input,
            student,
            student_bev,
        } => eval_losses(&cfg, input, *student, student_bev.as_deref()),
        Command::Gradcheck => run_gradcheck(&cfg),
        Command::TrainToy => run_train_toy(&cfg),
        Command::Oracle { instances } => run_oracle(&cfg, *instances, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = par::threads_from_env();
    let start = Instant::now();
    let result = par::with_threads(threads, || run(&cli));
    match result {
        Ok(mut report) => {
            report.wall_clock_seconds = start.elapsed().as_secs_f64();
            let path = cli.out.join(format!("{}.json", report.command));
            if let Err(e) = report.write(&path) {
                eprintln!("tig: {e}");
                return ExitCode::from(1);
            }
            println!(
                "{} {} ({:.2}s) -> {}",
                report.command,
                if report.passed { "ok" } else { "FAILED" },
                report.wall_clock_seconds,
                path.display()
            );
            if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("tig: config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("tig: {e}");
            ExitCode::from(1)
        }
    }
}
