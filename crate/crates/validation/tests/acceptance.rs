//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits nonzero if any criterion fails. Tolerances are pinned below.
//!
//! Run with `cargo test -p ctp-validation --test acceptance`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ctp_core::config::RunConfig;
use ctp_core::ctm::{
    ctm_x_target, discriminator_objective_var, dsm_var, distill, sample_ctm_batch, student_terms, x_est_var,
    CtmBatch, DistillConfig, Discriminator, LossWeights, StudentModel, TargetModel, TrajectoryJump,
};
use ctp_core::data::{make_windows, Dataset};
use ctp_core::dynamics::{compute_returns, Critic, InverseDynamics};
use ctp_core::numerics::Checkpoint;
use ctp_core::pipeline::{self, files, BenchRecord, PlanSummary, RunDir, Stage};
use ctp_core::planner::{ctm_sample_batch, CountingJump, SamplerKind};
use ctp_core::schedule::{karras_grid, sampling_grid};
use ctp_core::teacher::{
    draw_teacher_sample, heun_sample, heun_solve, teacher_loss_var, train_teacher, Denoiser, SolverSpec,
    TeacherConfig, TeacherModel, TeacherSample,
};
use ctp_core::window::WindowShape;
use ctp_core::{NoiseSchedule, ParamMode, Tensor, TrainNoiseDist};
use ctp_validation::{
    frobenius_gap, gaussian_matrix, grad_check, moments2, sha256_hex, spearman, Gaussian2, GradCheck,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Criterion 1
const IDENTITY_SAMPLES: usize = 1000;
const DENOISE_AT_EPS_TOL: f64 = 1e-10;
// Criterion 2
const GRAD_REL_TOL: f64 = 1e-4;
// Criterion 3
const ORDER_RATIO_LO: f64 = 3.4;
const ORDER_RATIO_HI: f64 = 4.6;
// Criterion 4
const POSTERIOR_MSE_TOL: f64 = 5e-2;
const POSTERIOR_SIGMAS: [f64; 4] = [0.1, 0.5, 2.0, 10.0];
// Criterion 5
const FIDELITY_SAMPLES: usize = 10_000;
const MEAN_GAP_TOL: f64 = 0.05;
const COV_GAP_TOL: f64 = 0.1;
// Criterion 6
const SATURATION_GAP: f64 = 5.0;
const TEACHER_MIN_STEPS: usize = 8;
// Criterion 7
const LATENCY_RATIO_MIN: f64 = 10.0;
// Criterion 8
const PLAN_SCORE_MIN: f64 = 60.0;
const BASELINE_MARGIN: f64 = 20.0;
const CI_SEEDS: usize = 30;
// Criterion 9
const RETURN_ORACLE_TOL: f64 = 1e-9;
const CRITIC_SPEARMAN_MIN: f64 = 0.8;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion {
            id: 1,
            name: "structural identities",
            budget: Duration::from_secs(10),
            run: structural_identities,
        },
        Criterion {
            id: 2,
            name: "gradient correctness",
            budget: Duration::from_secs(120),
            run: gradient_correctness,
        },
        Criterion {
            id: 3,
            name: "solver order",
            budget: Duration::from_secs(10),
            run: solver_order,
        },
        Criterion {
            id: 4,
            name: "teacher optimality on Gaussian data",
            budget: Duration::from_secs(300),
            run: teacher_optimality,
        },
        Criterion {
            id: 5,
            name: "distillation fidelity",
            budget: Duration::from_secs(600),
            run: distillation_fidelity,
        },
        Criterion {
            id: 6,
            name: "steps vs quality",
            budget: Duration::from_secs(1800),
            run: steps_vs_quality,
        },
        Criterion {
            id: 7,
            name: "latency",
            budget: Duration::from_secs(600),
            run: latency,
        },
        Criterion {
            id: 8,
            name: "planning efficacy",
            budget: Duration::from_secs(1800),
            run: planning_efficacy,
        },
        Criterion {
            id: 9,
            name: "return labels and critic ranking",
            budget: Duration::from_secs(300),
            run: return_labels,
        },
        Criterion {
            id: 10,
            name: "determinism and persistence",
            budget: Duration::from_secs(300),
            run: determinism,
        },
    ];
    let only: Option<Vec<u32>> = std::env::var("CTP_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for c in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.run))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Outcome::new(false, format!("panicked: {msg}"))
            });
        let elapsed = start.elapsed();
        let in_budget = elapsed <= c.budget;
        let pass = outcome.pass && in_budget;
        println!(
            "acceptance {:>2} {} {} [{:.1}s of {}s{}]: {}",
            c.id,
            if pass { "PASS" } else { "FAIL" },
            c.name,
            elapsed.as_secs_f64(),
            c.budget.as_secs(),
            if in_budget { "" } else { ", over budget" },
            outcome.detail
        );
        if !pass {
            failed.push(c.id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}

fn tiny_teacher(window: WindowShape, conditioned: bool, hidden: &[usize], seed: u64) -> TeacherModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TeacherModel::new(window, conditioned, hidden, NoiseSchedule::default(), 0.5, &mut rng).unwrap()
}

/// Student whose `w`-feature weights are random rather than zero.
fn tiny_student(teacher: &TeacherModel, seed: u64) -> StudentModel {
    let mut s = StudentModel::from_teacher(teacher).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in s.backbone.layers_mut()[0].weight.data_mut() {
        if *v == 0.0 {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    s
}

fn log_uniform_time(rng: &mut ChaCha8Rng, eps: f64, t_max: f64) -> f64 {
    (eps.ln() + rng.random::<f64>() * (t_max.ln() - eps.ln())).exp()
}

fn structural_identities() -> Outcome {
    let window = WindowShape::new(4, 2).unwrap();
    let teacher = tiny_teacher(window, true, &[16, 16], 1);
    let student = tiny_student(&teacher, 2);
    let eps = teacher.schedule.eps;
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    let mut identity_violations = 0;
    for _ in 0..IDENTITY_SAMPLES {
        let t = log_uniform_time(&mut rng, eps, 80.0);
        let x = gaussian_matrix(1, window.dim(), t.max(1.0), &mut rng);
        let y = student.jump(&x, &[t], &[t], None).unwrap();
        if y.data() != x.data() {
            identity_violations += 1;
        }
    }

    let x = gaussian_matrix(IDENTITY_SAMPLES, window.dim(), 1.0, &mut rng);
    let cond = x.leading_cols(window.state_dim);
    let d = teacher.denoise(&x, &vec![eps; x.rows()], Some(&cond)).unwrap();
    let denoise_err = d
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let mut count_mismatch = Vec::new();
    for steps in 1..=20 {
        let grid = sampling_grid(80.0, eps, steps).unwrap();
        let counted = CountingJump::new(&student);
        let init = gaussian_matrix(8, window.dim(), 80.0, &mut rng);
        let cond = gaussian_matrix(8, window.state_dim, 1.0, &mut rng);
        ctm_sample_batch(&counted, &grid, &init, &cond).unwrap();
        if counted.calls() != steps {
            count_mismatch.push((steps, counted.calls()));
        }
    }
    Outcome::new(
        identity_violations == 0 && denoise_err <= DENOISE_AT_EPS_TOL && count_mismatch.is_empty(),
        format!(
            "G(x,t,t)≠x in {identity_violations}/{IDENTITY_SAMPLES}; max |D(x,eps)−x| = {denoise_err:.1e}; \
             call-count mismatches {count_mismatch:?} over steps 1..=20"
        ),
    )
}

#[derive(Clone)]
struct CtmCtx {
    student: StudentModel,
    target: StudentModel,
    disc: Discriminator,
    batch: CtmBatch,
    x_target: Tensor,
    weights: LossWeights,
}

fn ctm_terms<'a>(
    m: &'a CtmCtx,
    which: u8,
    tape: &mut ctp_core::Tape<'a>,
    net: &ctp_core::numerics::BoundMlp,
) -> ctp_core::Result<ctp_core::Var> {
    let t_net = m.target.backbone.bind(tape, ParamMode::StopGradient);
    let d_net = m.disc.net.bind(tape, ParamMode::Frozen);
    let terms = student_terms(
        tape,
        &m.student,
        net,
        &m.target,
        &t_net,
        Some((&m.disc, &d_net)),
        &m.batch,
        &m.x_target,
        m.weights,
    )?;
    Ok(match which {
        0 => terms.ctm,
        1 => terms.gan.expect("adversarial term built"),
        _ => terms.total,
    })
}

fn gradient_correctness() -> Outcome {
    let mut results: BTreeMap<&str, GradCheck> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let window = WindowShape::new(3, 2).unwrap();

    // Inverse dynamics.
    let inv = InverseDynamics::new(2, 1, 1, &[6], &mut rng).unwrap();
    let pairs = gaussian_matrix(5, 4, 0.7, &mut rng);
    let actions = gaussian_matrix(5, 1, 0.7, &mut rng);
    results.insert(
        "inverse dynamics",
        grad_check(&inv, |m| &m.net, |m| &mut m.net, |m, tape, net| {
            m.loss_var(tape, net, &pairs, &actions)
        })
        .unwrap(),
    );

    // Teacher denoising loss, with inpainting.
    let teacher = tiny_teacher(window, true, &[6], 12);
    let x0 = gaussian_matrix(4, window.dim(), 0.5, &mut rng);
    let dist = TrainNoiseDist::new(-1.2, 1.2, &teacher.schedule);
    let sample: TeacherSample = draw_teacher_sample(&x0, &dist, &mut rng);
    results.insert(
        "teacher denoising",
        grad_check(&teacher, |m| &m.backbone, |m| &mut m.backbone, |m, tape, net| {
            teacher_loss_var(tape, m, net, &sample)
        })
        .unwrap(),
    );

    // Distillation terms. The target differs from the student so the
    // stop-gradient path is exercised with distinct weights.
    let student = tiny_student(&teacher, 13);
    let target = tiny_student(&teacher, 14);
    let grid = teacher.schedule.karras_times().unwrap();
    let batch = sample_ctm_batch(&x0, &grid, SolverSpec::default(), window.state_dim, &mut rng).unwrap();
    let target_model = TargetModel {
        model: target.clone(),
        mu: 0.9,
    };
    let x_target = ctm_x_target(&teacher, &target_model, &batch).unwrap();
    let disc = Discriminator::new(window.dim(), &[5], &mut rng).unwrap();
    let ctx = CtmCtx {
        student,
        target,
        disc,
        batch,
        x_target,
        weights: LossWeights {
            lambda_dsm: 0.7,
            lambda_gan: 0.3,
        },
    };
    let terms = ctm_terms;
    let s_net: fn(&CtmCtx) -> &ctp_core::Mlp = |m| &m.student.backbone;
    let s_net_mut: fn(&mut CtmCtx) -> &mut ctp_core::Mlp = |m| &mut m.student.backbone;
    results.insert(
        "consistency",
        grad_check(&ctx, s_net, s_net_mut, |m, tape, net| terms(m, 0, tape, net)).unwrap(),
    );
    results.insert(
        "denoising regularizer",
        grad_check(&ctx, s_net, s_net_mut, |m, tape, net| dsm_var(tape, &m.student, net, &m.batch)).unwrap(),
    );
    results.insert(
        "adversarial (student side)",
        grad_check(&ctx, s_net, s_net_mut, |m, tape, net| terms(m, 1, tape, net)).unwrap(),
    );
    results.insert(
        "total",
        grad_check(&ctx, s_net, s_net_mut, |m, tape, net| terms(m, 2, tape, net)).unwrap(),
    );
    let fake = {
        let mut tape = ctp_core::Tape::new();
        let s = ctx.student.backbone.bind(&mut tape, ParamMode::Frozen);
        let t = ctx.target.backbone.bind(&mut tape, ParamMode::Frozen);
        let v = x_est_var(&mut tape, &ctx.student, &s, &ctx.target, &t, &ctx.batch).unwrap();
        tape.value(v).clone()
    };
    results.insert(
        "adversarial (discriminator side)",
        grad_check(&ctx, |m| &m.disc.net, |m| &mut m.disc.net, |m, tape, net| {
            discriminator_objective_var(tape, &m.disc, net, &m.batch.x0, &fake).map(|(v, _)| v)
        })
        .unwrap(),
    );

    // Critic.
    let mut critic = Critic::new(window.dim(), &[6], 0.99, &mut rng).unwrap();
    critic.shift = 0.3;
    critic.scale = 1.7;
    let windows = gaussian_matrix(5, window.dim(), 0.5, &mut rng);
    let returns: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..2.0)).collect();
    results.insert(
        "critic",
        grad_check(&critic, |m| &m.net, |m| &mut m.net, |m, tape, net| {
            m.loss_var(tape, net, &windows, &returns)
        })
        .unwrap(),
    );

    let worst = results.values().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let nonvacuous = results.values().all(|r| r.max_abs_grad > 1e-3);
    let detail = results
        .iter()
        .map(|(k, r)| format!("{k} {:.1e} ({} entries)", r.max_rel_err, r.entries))
        .collect::<Vec<_>>()
        .join("; ");
    Outcome::new(worst < GRAD_REL_TOL && nonvacuous, format!("max relative error: {detail}"))
}

/// `D ≡ 0`.
struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn eps(&self) -> f64 {
        0.002
    }

    fn denoise(&self, x: &Tensor, _t: &[f64], _cond: Option<&Tensor>) -> ctp_core::Result<Tensor> {
        Ok(Tensor::zeros(x.shape()))
    }
}

fn solver_order() -> Outcome {
    // With D ≡ 0 the flow dx/dt = x/t gives x(u) = x(t)·u/t.
    let (t, u, x_t) = (1.0, 0.5, 1.0);
    let exact = x_t * u / t;
    let x = Tensor::matrix(1, 1, vec![x_t]).unwrap();
    let substeps = [1, 2, 4, 8, 16];
    let errors: Vec<f64> = substeps
        .iter()
        .map(|&n| {
            let y = heun_solve(&ZeroDenoiser, &x, &[t], &[u], SolverSpec::heun(n).unwrap(), None).unwrap();
            (y.data()[0] - exact).abs()
        })
        .collect();
    let ratios: Vec<f64> = errors.windows(2).map(|e| e[0] / e[1]).collect();
    let pass = ratios.iter().all(|r| (ORDER_RATIO_LO..=ORDER_RATIO_HI).contains(r));
    Outcome::new(
        pass,
        format!(
            "errors vs substeps {substeps:?}: {:?}; ratios {:?} (required in [{ORDER_RATIO_LO}, {ORDER_RATIO_HI}])",
            errors.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>(),
            ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>()
        ),
    )
}

fn teacher_optimality() -> Outcome {
    let dist = Gaussian2::isotropic([0.3, -0.2], 0.5);
    let cfg = TeacherConfig {
        hidden: vec![64, 64],
        steps: 3000,
        batch_size: 256,
        lr: 2e-3,
        ..Default::default()
    };
    let run = train_teacher(
        &dist.sample(20_000, 1),
        Some(&dist.sample(2_000, 2)),
        WindowShape::new(1, 2).unwrap(),
        false,
        NoiseSchedule::default(),
        &cfg,
    )
    .unwrap();
    let x0 = dist.sample(4_000, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mses = Vec::new();
    for sigma in POSTERIOR_SIGMAS {
        let noise = gaussian_matrix(x0.rows(), 2, sigma, &mut rng);
        let noisy = Tensor::matrix(x0.rows(), 2, x0.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect())
            .unwrap();
        let d = run.model.denoise(&noisy, &vec![sigma; noisy.rows()], None).unwrap();
        let mut se = 0.0;
        for r in 0..noisy.rows() {
            let post = dist.posterior_mean_isotropic(noisy.row(r), sigma);
            for (c, p) in post.iter().enumerate() {
                se += (d.get(r, c) - p).powi(2);
            }
        }
        mses.push(se / noisy.len() as f64);
    }
    let worst = mses.iter().copied().fold(0.0, f64::max);
    Outcome::new(
        worst < POSTERIOR_MSE_TOL,
        format!(
            "MSE to posterior mean at sigma {POSTERIOR_SIGMAS:?}: {:?} (tolerance {POSTERIOR_MSE_TOL})",
            mses.iter().map(|m| format!("{m:.2e}")).collect::<Vec<_>>()
        ),
    )
}

fn distillation_fidelity() -> Outcome {
    let dist = Gaussian2 {
        mean: [0.3, -0.2],
        chol: [[0.5, 0.0], [0.3, 0.4]],
    };
    let window = WindowShape::new(1, 2).unwrap();
    let tcfg = TeacherConfig {
        hidden: vec![64, 64],
        steps: 3000,
        batch_size: 256,
        lr: 2e-3,
        ..Default::default()
    };
    let teacher = train_teacher(&dist.sample(20_000, 1), None, window, false, NoiseSchedule::default(), &tcfg)
        .unwrap()
        .model;
    let dcfg = DistillConfig {
        steps: 2000,
        batch_size: 256,
        lr: 5e-4,
        mu_ema: 0.99,
        ..Default::default()
    };
    let run = distill(&teacher, &dist.sample(20_000, 2), &dcfg).unwrap();
    let n = FIDELITY_SAMPLES;
    let eps = teacher.schedule.eps;
    let t_max = teacher.schedule.t_max;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let init_teacher = gaussian_matrix(n, 2, t_max, &mut rng);
    let init_student = gaussian_matrix(n, 2, t_max, &mut rng);
    let reference = heun_sample(&teacher, &karras_grid(t_max, eps, 7.0, 18).unwrap(), &init_teacher, None).unwrap();
    let one_step = run.student.jump(&init_student, &vec![t_max; n], &vec![eps; n], None).unwrap();
    let (m_ref, c_ref) = moments2(&reference);
    let (m_ctm, c_ctm) = moments2(&one_step);
    let mean_gap = ((m_ref[0] - m_ctm[0]).powi(2) + (m_ref[1] - m_ctm[1]).powi(2)).sqrt();
    let cov_gap = frobenius_gap(&c_ref, &c_ctm);
    Outcome::new(
        mean_gap < MEAN_GAP_TOL && cov_gap < COV_GAP_TOL,
        format!(
            "{n} samples each: mean gap {mean_gap:.4} (< {MEAN_GAP_TOL}), covariance Frobenius gap {cov_gap:.4} \
             (< {COV_GAP_TOL})"
        ),
    )
}

/// Maze configuration used by criteria 6–9: the shipped preset evaluated on
/// the CI seed set.
fn maze_config() -> RunConfig {
    let mut cfg = RunConfig::maze();
    cfg.plan.eval_seeds = CI_SEEDS;
    cfg.bench.seeds = CI_SEEDS;
    cfg
}

struct MazeRun {
    dir: tempfile::TempDir,
    cfg: RunConfig,
    summary: PlanSummary,
    bench: Vec<BenchRecord>,
    build_secs: f64,
}

static MAZE: OnceLock<MazeRun> = OnceLock::new();

/// Full pipeline on the maze, built once and shared by criteria 6–9.
fn maze_run() -> &'static MazeRun {
    MAZE.get_or_init(|| {
        let start = Instant::now();
        let cfg = maze_config();
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path()).unwrap();
        let log = |m: &str| eprintln!("  {m}");
        for stage in [Stage::Data, Stage::Teacher, Stage::Distill, Stage::Aux] {
            pipeline::run_stage(&cfg, &run, stage, &log).unwrap();
        }
        let summary = pipeline::stage_plan(&cfg, &run, &log).unwrap();
        let bench = pipeline::stage_bench(&cfg, &run, &log).unwrap();
        MazeRun {
            dir,
            cfg,
            summary,
            bench,
            build_secs: start.elapsed().as_secs_f64(),
        }
    })
}

fn sweep(run: &MazeRun, kind: SamplerKind) -> BTreeMap<usize, &BenchRecord> {
    run.bench
        .iter()
        .filter(|r| r.sampler == kind)
        .map(|r| (r.denoise_steps, r))
        .collect()
}

fn steps_vs_quality() -> Outcome {
    let run = maze_run();
    let ctm = sweep(run, SamplerKind::Ctm);
    let heun = sweep(run, SamplerKind::TeacherHeun);
    let ctm_gap = (ctm[&2].score_mean - ctm[&16].score_mean).abs();
    // Plateau: mean of the two largest step counts.
    let plateau = (heun[&16].score_mean + heun[&20].score_mean) / 2.0;
    let first_within = heun
        .iter()
        .find(|(_, r)| r.score_mean >= plateau - SATURATION_GAP)
        .map(|(s, _)| *s);
    let teacher_ok = first_within.is_some_and(|s| s >= TEACHER_MIN_STEPS);
    let fmt = |m: &BTreeMap<usize, &BenchRecord>| {
        m.iter()
            .map(|(s, r)| format!("{s}:{:.1}", r.score_mean))
            .collect::<Vec<_>>()
            .join(" ")
    };
    Outcome::new(
        ctm_gap <= SATURATION_GAP && teacher_ok,
        format!(
            "ctm |score(2) − score(16)| = {ctm_gap:.1} (≤ {SATURATION_GAP}); teacher-heun plateau {plateau:.1}, first \
             within {SATURATION_GAP} at steps {first_within:?} (need ≥ {TEACHER_MIN_STEPS}); scores over {} seeds \
             ctm [{}] teacher-heun [{}]; pipeline build {:.0}s",
            run.cfg.bench.seeds,
            fmt(&ctm),
            fmt(&heun),
            run.build_secs
        ),
    )
}

fn latency() -> Outcome {
    let run = maze_run();
    let ctm = sweep(run, SamplerKind::Ctm);
    let heun = sweep(run, SamplerKind::TeacherHeun);
    let ratio = heun[&20].latency_ms_mean / ctm[&1].latency_ms_mean;
    let lat: Vec<f64> = heun.values().map(|r| r.latency_ms_mean).collect();
    let monotone = lat.windows(2).all(|w| w[0] < w[1]);
    Outcome::new(
        ratio >= LATENCY_RATIO_MIN && monotone,
        format!(
            "teacher-heun@20 / ctm@1 = {:.3} / {:.3} ms = {ratio:.1}× (≥ {LATENCY_RATIO_MIN}); teacher-heun ms/plan \
             [{}] strictly increasing: {monotone}",
            heun[&20].latency_ms_mean,
            ctm[&1].latency_ms_mean,
            lat.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ")
        ),
    )
}

fn planning_efficacy() -> Outcome {
    let run = maze_run();
    let s = &run.summary;
    let env = run.cfg.env_spec();
    let seeds = pipeline::eval_seeds(run.cfg.plan.eval_seeds);
    let random = s.anchors.normalize(
        pipeline::scripted_score(&env, &run.cfg, ctp_core::envs::PolicyKind::Random, &seeds).unwrap(),
    );
    let expert = s.anchors.normalize(
        pipeline::scripted_score(&env, &run.cfg, ctp_core::envs::PolicyKind::NoisyExpert, &seeds).unwrap(),
    );
    let margin = s.normalized_score - s.behaviour_normalized;
    Outcome::new(
        s.normalized_score >= PLAN_SCORE_MIN && margin >= BASELINE_MARGIN && random.abs() < 5.0 && (expert - 100.0).abs() < 5.0,
        format!(
            "ctm@{} normalized {:.1} ± {:.1} over {} seeds (≥ {PLAN_SCORE_MIN}); mixture behaviour policy {:.1}, \
             margin {margin:.1} (≥ {BASELINE_MARGIN}); anchors random {random:.1}, expert {expert:.1}",
            s.denoise_steps, s.normalized_score, s.normalized_std, s.seeds, s.behaviour_normalized
        ),
    )
}

fn return_labels() -> Outcome {
    let run = maze_run();
    let cfg = &run.cfg;
    let data = Dataset::load(&run.dir.path().join(files::DATASET)).unwrap();

    let mut recursion_violations = 0;
    let mut steps = 0;
    for t in &data.trajectories {
        let r = compute_returns(&t.rewards, cfg.gamma).unwrap();
        for k in 0..r.len() {
            let next = if k + 1 < r.len() { r[k + 1] } else { 0.0 };
            if r[k] != t.rewards[k] + cfg.gamma * next {
                recursion_violations += 1;
            }
            steps += 1;
        }
    }

    let held = make_windows(data.heldout(), &data.normalizer, cfg.horizon, cfg.stride, cfg.gamma).unwrap();
    let mut oracle_err: f64 = 0.0;
    for (label, &(ti, k)) in held.labels.iter().zip(&held.origins) {
        let rewards = &data.heldout()[ti].rewards;
        let brute: f64 = (k..rewards.len()).map(|j| cfg.gamma.powi((j - k) as i32) * rewards[j]).sum();
        oracle_err = oracle_err.max((brute - label).abs());
    }

    let critic = Critic::from_checkpoint(&Checkpoint::load(&run.dir.path().join(files::CRITIC)).unwrap()).unwrap();
    let values = critic.values(&held.windows).unwrap();
    let rho = spearman(&values, &held.labels);
    Outcome::new(
        recursion_violations == 0 && oracle_err < RETURN_ORACLE_TOL && rho > CRITIC_SPEARMAN_MIN,
        format!(
            "recursion violations {recursion_violations}/{steps}; max |brute − label| {oracle_err:.1e} over {} \
             held-out windows; critic Spearman {rho:.3} (> {CRITIC_SPEARMAN_MIN})",
            held.labels.len()
        ),
    )
}

fn tiny_integrator() -> RunConfig {
    let mut cfg = RunConfig::integrator();
    cfg.data.n_episodes = 60;
    cfg.teacher.hidden = vec![32, 32];
    cfg.teacher.steps = 150;
    cfg.distill.steps = 60;
    cfg.distill.batch_size = 32;
    cfg.invdyn.steps = 150;
    cfg.critic.steps = 150;
    cfg.plan.eval_seeds = 3;
    cfg.plan.num_candidates = 4;
    cfg
}

fn artifact_hashes(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for f in [
        files::DATASET,
        files::DATASET_META,
        files::TEACHER,
        files::STUDENT,
        files::TARGET,
        files::DISCRIMINATOR,
        files::INVDYN,
        files::CRITIC,
    ] {
        out.insert(f.to_string(), sha256_hex(&fs::read(dir.join(f)).unwrap()));
    }
    // Latency is wallclock; everything else in a trace must match.
    let traces: Vec<String> = fs::read_to_string(dir.join(files::PLAN_TRACES))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("latency_ms");
            v.to_string()
        })
        .collect();
    out.insert("plan traces".into(), sha256_hex(traces.join("\n").as_bytes()));
    out
}

fn determinism() -> Outcome {
    let cfg = tiny_integrator();
    let log = |_: &str| {};
    let runs: Vec<(tempfile::TempDir, BTreeMap<String, String>)> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let run = RunDir::new(dir.path()).unwrap();
            for stage in [Stage::Data, Stage::Teacher, Stage::Distill, Stage::Aux, Stage::Plan] {
                pipeline::run_stage(&cfg, &run, stage, &log).unwrap();
            }
            let h = artifact_hashes(dir.path());
            (dir, h)
        })
        .collect();
    let differing: Vec<&String> = runs[0].1.keys().filter(|k| runs[0].1[*k] != runs[1].1[*k]).collect();

    let dir = runs[0].0.path();
    let data_bytes = fs::read(dir.join(files::DATASET)).unwrap();
    let data = Dataset::from_bytes(&data_bytes, Path::new("dataset")).unwrap();
    let dataset_round_trip = data.to_bytes().unwrap() == data_bytes
        && Dataset::from_bytes(&data.to_bytes().unwrap(), Path::new("again")).unwrap() == data;
    let mut ckpt_round_trips = 0;
    let mut ckpt_total = 0;
    for f in [files::TEACHER, files::STUDENT, files::TARGET, files::DISCRIMINATOR, files::INVDYN, files::CRITIC] {
        let bytes = fs::read(dir.join(f)).unwrap();
        let ck = Checkpoint::load(&dir.join(f)).unwrap();
        let rebuilt = match ck.kind.as_str() {
            "teacher" => TeacherModel::from_checkpoint(&ck).unwrap().to_checkpoint(),
            "student" => StudentModel::from_checkpoint(&ck).unwrap().to_checkpoint(),
            "target" => TargetModel::from_checkpoint(&ck).unwrap().to_checkpoint(),
            "discriminator" => Discriminator::from_checkpoint(&ck).unwrap().to_checkpoint(),
            "invdyn" => InverseDynamics::from_checkpoint(&ck).unwrap().to_checkpoint(),
            "critic" => Critic::from_checkpoint(&ck).unwrap().to_checkpoint(),
            other => panic!("unexpected checkpoint kind {other}"),
        };
        ckpt_total += 1;
        if rebuilt.to_bytes() == bytes {
            ckpt_round_trips += 1;
        }
    }
    Outcome::new(
        differing.is_empty() && dataset_round_trip && ckpt_round_trips == ckpt_total,
        format!(
            "{} artifacts hashed twice, differing: {differing:?}; dataset round trip bit-exact: {dataset_round_trip}; \
             checkpoint model round trips bit-exact: {ckpt_round_trips}/{ckpt_total}",
            runs[0].1.len()
        ),
    )
}
