//! Run-directory stages: data → teacher → distill → auxiliary models →
//! plan → bench. Each stage reads the artifacts of the previous ones and
//! fails with [`CtpError::MissingArtifact`] when they are absent.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::ctm::{distill, Discriminator, DistillRow, StudentModel, TargetModel};
use crate::data::{collect_dataset, make_windows, Dataset, WindowSet};
use crate::dynamics::{train_critic, train_invdyn, Critic, InverseDynamics};
use crate::envs::{EnvSpec, PolicyKind};
use crate::error::{CtpError, Result};
use crate::numerics::Checkpoint;
use crate::planner::{
    eval_start, plan_step, rollout, rollout_scripted, EpisodeConfig, EpisodeTrace, ModelBundle, PlanRequest,
    SamplerKind, SamplerSpec, StepRecord,
};
use crate::teacher::{train_teacher, LossRow, TeacherModel};

/// Version written in the first column of every CSV artifact.
pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Data,
    Teacher,
    Distill,
    Aux,
    Plan,
    Bench,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Data,
        Stage::Teacher,
        Stage::Distill,
        Stage::Aux,
        Stage::Plan,
        Stage::Bench,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Teacher => "teacher",
            Stage::Distill => "distill",
            Stage::Aux => "aux",
            Stage::Plan => "plan",
            Stage::Bench => "bench",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Files whose presence marks the stage as complete.
    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Data => &[files::DATASET],
            Stage::Teacher => &[files::TEACHER],
            Stage::Distill => &[files::STUDENT, files::TARGET, files::DISCRIMINATOR],
            Stage::Aux => &[files::INVDYN, files::CRITIC],
            Stage::Plan => &[files::PLAN_TRACES, files::PLAN_SUMMARY],
            Stage::Bench => &[files::BENCH_CSV, files::BENCH_SVG],
        }
    }
}

pub mod files {
    pub const CONFIG: &str = "config.toml";
    pub const DATASET: &str = "dataset.bin";
    pub const DATASET_META: &str = "dataset.json";
    pub const TEACHER: &str = "teacher.ckpt";
    pub const TEACHER_LOSS: &str = "teacher_loss.csv";
    pub const STUDENT: &str = "student.ckpt";
    pub const TARGET: &str = "target.ckpt";
    pub const DISCRIMINATOR: &str = "discriminator.ckpt";
    pub const DISTILL_LOSS: &str = "distill_loss.csv";
    pub const INVDYN: &str = "invdyn.ckpt";
    pub const CRITIC: &str = "critic.ckpt";
    pub const INVDYN_LOSS: &str = "invdyn_loss.csv";
    pub const CRITIC_LOSS: &str = "critic_loss.csv";
    pub const AUX_METRICS: &str = "aux_metrics.csv";
    pub const PLAN_TRACES: &str = "plan_traces.jsonl";
    pub const PLAN_SUMMARY: &str = "plan_summary.json";
    pub const BENCH_CSV: &str = "bench.csv";
    pub const BENCH_SVG: &str = "bench.svg";
}

/// Stage progress messages go here; the CLI prints them to stderr.
pub type Log<'a> = &'a dyn Fn(&str);

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        stage.outputs().iter().all(|f| self.path(f).exists())
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.path(name), contents)?;
        Ok(())
    }

    fn save_config(&self, cfg: &RunConfig) -> Result<()> {
        self.write(files::CONFIG, &cfg.to_toml())
    }
}

fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("schema_version,step,loss,wallclock_ms\n");
    for r in rows {
        let _ = writeln!(s, "{CSV_SCHEMA_VERSION},{},{},{:.3}", r.step, r.loss, r.wallclock_ms);
    }
    s
}

fn distill_csv(rows: &[DistillRow]) -> String {
    let mut s = String::from("schema_version,step,l_ctm,l_dsm,l_gan,total,wallclock_ms\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{CSV_SCHEMA_VERSION},{},{},{},{},{},{:.3}",
            r.step, r.ctm, r.dsm, r.gan, r.total, r.wallclock_ms
        );
    }
    s
}

pub fn load_dataset(dir: &RunDir, cfg: &RunConfig) -> Result<Dataset> {
    let d = Dataset::load(&dir.path(files::DATASET))?;
    if d.meta.horizon != cfg.horizon || d.meta.stride != cfg.stride || d.meta.env.kind != cfg.env {
        return Err(CtpError::Config(
            "dataset was generated with a different env, horizon or stride; rerun gen-data".into(),
        ));
    }
    Ok(d)
}

/// Training and held-out windows of a dataset.
pub fn dataset_windows(d: &Dataset, cfg: &RunConfig) -> Result<(WindowSet, Option<WindowSet>)> {
    let train = make_windows(d.train(), &d.normalizer, cfg.horizon, cfg.stride, cfg.gamma)?;
    let held = if d.heldout().is_empty() {
        None
    } else {
        make_windows(d.heldout(), &d.normalizer, cfg.horizon, cfg.stride, cfg.gamma).ok()
    };
    Ok((train, held))
}

pub fn stage_data(cfg: &RunConfig, dir: &RunDir, log: Log) -> Result<Dataset> {
    cfg.validate()?;
    dir.save_config(cfg)?;
    let d = collect_dataset(&cfg.env_spec(), &cfg.data, cfg.horizon, cfg.stride, cfg.gamma)?;
    d.save(&dir.path(files::DATASET))?;
    log(&format!(
        "data: {} episodes ({} train), behaviour success rate {:.3}",
        d.trajectories.len(),
        d.n_train,
        d.success_rate()
    ));
    Ok(d)
}

pub fn stage_teacher(cfg: &RunConfig, dir: &RunDir, log: Log) -> Result<TeacherModel> {
    cfg.validate()?;
    let d = load_dataset(dir, cfg)?;
    let (train, held) = dataset_windows(&d, cfg)?;
    dir.save_config(cfg)?;
    let run = train_teacher(
        &train.windows,
        held.as_ref().map(|h| &h.windows),
        train.shape,
        true,
        cfg.schedule,
        &cfg.teacher,
    )?;
    run.model.to_checkpoint().save(&dir.path(files::TEACHER))?;
    dir.write(files::TEACHER_LOSS, &loss_csv(&run.trace))?;
    log(&format!(
        "teacher: {} steps on {} windows, held-out loss {:?} -> {:?}",
        cfg.teacher.steps,
        train.windows.rows(),
        run.heldout_initial,
        run.heldout_final
    ));
    Ok(run.model)
}

pub fn load_teacher(dir: &RunDir) -> Result<TeacherModel> {
    TeacherModel::from_checkpoint(&Checkpoint::load(&dir.path(files::TEACHER))?)
}

pub fn stage_distill(cfg: &RunConfig, dir: &RunDir, log: Log) -> Result<StudentModel> {
    cfg.validate()?;
    let teacher = load_teacher(dir)?;
    if teacher.schedule != cfg.schedule {
        return Err(CtpError::Config(
            "schedule differs from the one the teacher was trained with; rerun train-teacher".into(),
        ));
    }
    let d = load_dataset(dir, cfg)?;
    let (train, _) = dataset_windows(&d, cfg)?;
    dir.save_config(cfg)?;
    let run = distill(&teacher, &train.windows, &cfg.distill)?;
    run.student.to_checkpoint().save(&dir.path(files::STUDENT))?;
    run.target.to_checkpoint().save(&dir.path(files::TARGET))?;
    run.discriminator.to_checkpoint().save(&dir.path(files::DISCRIMINATOR))?;
    dir.write(files::DISTILL_LOSS, &distill_csv(&run.trace))?;
    if let Some(last) = run.trace.last() {
        log(&format!(
            "distill: {} steps, final L_CTM {:.3e}, L_DSM {:.3e}, clamped probabilities {}",
            cfg.distill.steps, last.ctm, last.dsm, run.clamps
        ));
    }
    Ok(run.student)
}

pub fn stage_aux(cfg: &RunConfig, dir: &RunDir, log: Log) -> Result<(InverseDynamics, Critic)> {
    cfg.validate()?;
    let d = load_dataset(dir, cfg)?;
    let (train, held) = dataset_windows(&d, cfg)?;
    dir.save_config(cfg)?;
    let inv = train_invdyn(
        &train.pairs,
        &train.actions,
        held.as_ref().map(|h| (&h.pairs, &h.actions)),
        cfg.stride,
        &cfg.invdyn,
    )?;
    let critic = train_critic(
        &train.windows,
        &train.labels,
        held.as_ref().map(|h| (&h.windows, h.labels.as_slice())),
        cfg.gamma,
        &cfg.critic,
    )?;
    inv.model.to_checkpoint().save(&dir.path(files::INVDYN))?;
    critic.model.to_checkpoint().save(&dir.path(files::CRITIC))?;
    dir.write(files::INVDYN_LOSS, &loss_csv(&inv.trace))?;
    dir.write(files::CRITIC_LOSS, &loss_csv(&critic.trace))?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| x.to_string());
    let metrics = format!(
        "schema_version,model,train_initial,train_final,heldout_mse,skipped_pairs\n\
         {CSV_SCHEMA_VERSION},invdyn,{},{},{},{}\n{CSV_SCHEMA_VERSION},critic,{},{},{},0\n",
        inv.train_initial,
        inv.train_final,
        fmt(inv.heldout_mse),
        train.skipped_pairs,
        critic.train_initial,
        critic.train_final,
        fmt(critic.heldout_mse),
    );
    dir.write(files::AUX_METRICS, &metrics)?;
    log(&format!(
        "aux: inverse dynamics held-out MSE {}, critic held-out MSE {}",
        fmt(inv.heldout_mse),
        fmt(critic.heldout_mse)
    ));
    Ok((inv.model, critic.model))
}

pub fn load_bundle(dir: &RunDir, with_teacher: bool) -> Result<ModelBundle> {
    let load = |f: &str| Checkpoint::load(&dir.path(f));
    let d = Dataset::load(&dir.path(files::DATASET))?;
    let student = StudentModel::from_checkpoint(&load(files::STUDENT)?)?;
    let teacher = if with_teacher {
        Some(TeacherModel::from_checkpoint(&load(files::TEACHER)?)?)
    } else {
        None
    };
    Ok(ModelBundle {
        student,
        teacher,
        invdyn: InverseDynamics::from_checkpoint(&load(files::INVDYN)?)?,
        critic: Critic::from_checkpoint(&load(files::CRITIC)?)?,
        normalizer: d.normalizer,
    })
}

/// Also loads the target and discriminator so a damaged checkpoint fails here.
pub fn verify_checkpoints(dir: &RunDir) -> Result<()> {
    TargetModel::from_checkpoint(&Checkpoint::load(&dir.path(files::TARGET))?)?;
    Discriminator::from_checkpoint(&Checkpoint::load(&dir.path(files::DISCRIMINATOR))?)?;
    Ok(())
}

/// Random and expert reference returns measured on the evaluation seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreAnchors {
    pub random: f64,
    pub expert: f64,
}

impl ScoreAnchors {
    pub fn normalize(&self, ret: f64) -> f64 {
        100.0 * (ret - self.random) / (self.expert - self.random)
    }
}

/// Mean undiscounted return of a scripted policy over `seeds`.
pub fn scripted_score(env: &EnvSpec, cfg: &RunConfig, policy: PolicyKind, seeds: &[u64]) -> Result<f64> {
    let mut total = 0.0;
    for &s in seeds {
        total += rollout_scripted(env, policy, cfg.data.expert_fraction, cfg.data.action_noise, s)?.episode_return();
    }
    Ok(total / seeds.len().max(1) as f64)
}

pub fn measure_anchors(env: &EnvSpec, cfg: &RunConfig, seeds: &[u64]) -> Result<ScoreAnchors> {
    let a = ScoreAnchors {
        random: scripted_score(env, cfg, PolicyKind::Random, seeds)?,
        expert: scripted_score(env, cfg, PolicyKind::NoisyExpert, seeds)?,
    };
    if !(a.expert > a.random) {
        return Err(CtpError::contract(format!(
            "expert reference {} does not exceed random reference {}",
            a.expert, a.random
        )));
    }
    Ok(a)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// Planner evaluation over a seed set.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub traces: Vec<EpisodeTrace>,
    pub returns: Vec<f64>,
    pub normalized: Vec<f64>,
    pub latencies_ms: Vec<f64>,
}

impl Evaluation {
    pub fn mean_return(&self) -> f64 {
        mean_std(&self.returns).0
    }

    pub fn score(&self) -> (f64, f64) {
        mean_std(&self.normalized)
    }

    pub fn success_rate(&self) -> f64 {
        let n = self.traces.len().max(1) as f64;
        self.traces
            .iter()
            .filter(|t| t.status == crate::planner::EpisodeStatus::Goal)
            .count() as f64
            / n
    }
}

pub fn evaluate(
    env: &EnvSpec,
    bundle: &ModelBundle,
    episode: &EpisodeConfig,
    seeds: &[u64],
    anchors: &ScoreAnchors,
) -> Result<Evaluation> {
    let mut out = Evaluation {
        traces: Vec::with_capacity(seeds.len()),
        returns: Vec::new(),
        normalized: Vec::new(),
        latencies_ms: Vec::new(),
    };
    for &s in seeds {
        let tr = rollout(env, bundle, episode, s)?;
        out.returns.push(tr.episode_return);
        out.normalized.push(anchors.normalize(tr.episode_return));
        out.latencies_ms.extend(tr.plan_latencies());
        out.traces.push(tr);
    }
    Ok(out)
}

pub fn eval_seeds(n: usize) -> Vec<u64> {
    (0..n as u64).collect()
}

/// One JSON line per environment step.
pub fn traces_jsonl(traces: &[EpisodeTrace]) -> String {
    let mut s = String::new();
    for tr in traces {
        for step in &tr.steps {
            s.push_str(&serde_json::to_string::<StepRecord>(step).expect("record serializes"));
            s.push('\n');
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub sampler: SamplerKind,
    pub denoise_steps: usize,
    pub num_candidates: usize,
    pub seeds: usize,
    pub mean_return: f64,
    pub success_rate: f64,
    pub normalized_score: f64,
    pub normalized_std: f64,
    pub anchors: ScoreAnchors,
    /// Normalized score of the data-collecting mixture policy on the same seeds.
    pub behaviour_normalized: f64,
    pub latency_ms_mean: f64,
    pub latency_ms_median: f64,
}

pub fn episode_config(cfg: &RunConfig, sampler: SamplerSpec) -> EpisodeConfig {
    EpisodeConfig {
        sampler,
        num_candidates: cfg.plan.num_candidates,
        stride: cfg.stride,
        mode: cfg.plan.mode,
    }
}

pub fn stage_plan(cfg: &RunConfig, dir: &RunDir, log: Log) -> Result<PlanSummary> {
    cfg.validate()?;
    let bundle = load_bundle(dir, false)?;
    let env = cfg.env_spec();
    let seeds = eval_seeds(cfg.plan.eval_seeds);
    let anchors = measure_anchors(&env, cfg, &seeds)?;
    let sampler = SamplerSpec {
        kind: SamplerKind::Ctm,
        grid: cfg.plan.grid,
        steps: cfg.plan.denoise_steps,
    };
    let ev = evaluate(&env, &bundle, &episode_config(cfg, sampler), &seeds, &anchors)?;
    let behaviour = anchors.normalize(scripted_score(&env, cfg, PolicyKind::Mixture, &seeds)?);
    let (score, std) = ev.score();
    let summary = PlanSummary {
        sampler: SamplerKind::Ctm,
        denoise_steps: cfg.plan.denoise_steps,
        num_candidates: cfg.plan.num_candidates,
        seeds: seeds.len(),
        mean_return: ev.mean_return(),
        success_rate: ev.success_rate(),
        normalized_score: score,
        normalized_std: std,
        anchors,
        behaviour_normalized: behaviour,
        latency_ms_mean: mean_std(&ev.latencies_ms).0,
        latency_ms_median: median(&ev.latencies_ms),
    };
    dir.save_config(cfg)?;
    dir.write(files::PLAN_TRACES, &traces_jsonl(&ev.traces))?;
    dir.write(
        files::PLAN_SUMMARY,
        &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"),
    )?;
    log(&format!(
        "plan: normalized score {:.1} ± {:.1} over {} seeds (behaviour policy {:.1}), {:.2} ms/plan",
        score,
        std,
        seeds.len(),
        behaviour,
        summary.latency_ms_mean
    ));
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub sampler: SamplerKind,
    pub denoise_steps: usize,
    pub score_mean: f64,
    pub score_std: f64,
    pub latency_ms_mean: f64,
    pub latency_ms_std: f64,
    pub latency_ms_median: f64,
    pub seeds: usize,
}

/// Discards `warmup` plans from the first evaluation start state.
fn warm_up(env: &EnvSpec, bundle: &ModelBundle, episode: &EpisodeConfig, warmup: usize) -> Result<()> {
    let state = eval_start(env, 0);
    for i in 0..warmup {
        let req = PlanRequest {
            state: state.clone(),
            num_candidates: episode.num_candidates,
            denoise_steps: episode.sampler.steps,
            seed: i as u64,
        };
        plan_step(bundle, &episode.sampler, &req, episode.mode)?;
    }
    Ok(())
}

pub fn bench_point(
    env: &EnvSpec,
    bundle: &ModelBundle,
    episode: &EpisodeConfig,
    seeds: &[u64],
    anchors: &ScoreAnchors,
    warmup: usize,
) -> Result<BenchRecord> {
    warm_up(env, bundle, episode, warmup)?;
    let ev = evaluate(env, bundle, episode, seeds, anchors)?;
    let (score_mean, score_std) = ev.score();
    let (lat_mean, lat_std) = mean_std(&ev.latencies_ms);
    Ok(BenchRecord {
        sampler: episode.sampler.kind,
        denoise_steps: episode.sampler.steps,
        score_mean,
        score_std,
        latency_ms_mean: lat_mean,
        latency_ms_std: lat_std,
        latency_ms_median: median(&ev.latencies_ms),
        seeds: seeds.len(),
    })
}

pub fn bench_csv(records: &[BenchRecord]) -> String {
    let mut rows = records.to_vec();
    rows.sort_by_key(|r| (r.sampler, r.denoise_steps));
    let mut s = String::from(
        "schema_version,sampler,denoise_steps,score_mean,score_std,latency_ms_mean,latency_ms_std,latency_ms_median,seeds\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{CSV_SCHEMA_VERSION},{},{},{:.4},{:.4},{:.5},{:.5},{:.5},{}",
            r.sampler.id(),
            r.denoise_steps,
            r.score_mean,
            r.score_std,
            r.latency_ms_mean,
            r.latency_ms_std,
            r.latency_ms_median,
            r.seeds
        );
    }
    s
}

pub fn stage_bench(cfg: &RunConfig, dir: &RunDir, log: Log) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let bundle = load_bundle(dir, true)?;
    let env = cfg.env_spec();
    let seeds = eval_seeds(cfg.bench.seeds);
    let anchors = measure_anchors(&env, cfg, &seeds)?;
    let mut records = Vec::new();
    let start = Instant::now();
    for &steps in &cfg.bench.steps {
        for sampler in [
            SamplerSpec {
                kind: SamplerKind::Ctm,
                grid: cfg.plan.grid,
                steps,
            },
            SamplerSpec::teacher_heun(steps),
        ] {
            let rec = bench_point(&env, &bundle, &episode_config(cfg, sampler), &seeds, &anchors, cfg.bench.warmup)?;
            log(&format!(
                "bench: {:>12} steps={:>2} score {:6.1} ± {:5.1}  {:8.3} ms/plan",
                rec.sampler.id(),
                steps,
                rec.score_mean,
                rec.score_std,
                rec.latency_ms_mean
            ));
            records.push(rec);
        }
    }
    dir.save_config(cfg)?;
    dir.write(files::BENCH_CSV, &bench_csv(&records))?;
    dir.write(files::BENCH_SVG, &render_bench_svg(&records))?;
    log(&format!("bench: done in {:.1} s", start.elapsed().as_secs_f64()));
    Ok(records)
}

/// Two panels (score and latency against denoising steps, log-x; latency
/// also log-y) as a standalone SVG document.
pub fn render_bench_svg(records: &[BenchRecord]) -> String {
    const W: f64 = 900.0;
    const H: f64 = 380.0;
    const PW: f64 = 360.0;
    const PH: f64 = 260.0;
    let series = [(SamplerKind::Ctm, "#1f77b4"), (SamplerKind::TeacherHeun, "#d62728")];
    let steps: Vec<f64> = records.iter().map(|r| r.denoise_steps as f64).collect();
    let (xmin, xmax) = steps
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (xmin, xmax) = if xmin.is_finite() { (xmin.max(1.0), xmax.max(xmin + 1.0)) } else { (1.0, 20.0) };
    let lx = |v: f64| (v.ln() - xmin.ln()) / (xmax.ln() - xmin.ln());
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    );
    type Panel = (&'static str, fn(&BenchRecord) -> f64, bool);
    let panels: [Panel; 2] = [
        ("normalized score", |r| r.score_mean, false),
        ("ms per plan (log)", |r| r.latency_ms_mean, true),
    ];
    for (p, (title, value, log_y)) in panels.iter().enumerate() {
        let ox = 70.0 + p as f64 * (PW + 90.0);
        let oy = 50.0;
        let ys: Vec<f64> = records
            .iter()
            .map(value)
            .filter(|v| v.is_finite() && (!log_y || *v > 0.0))
            .collect();
        let (mut ylo, mut yhi) = ys
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if !ylo.is_finite() {
            (ylo, yhi) = (0.0, 1.0);
        }
        let map_y = |v: f64| -> f64 {
            let (a, b, v) = if *log_y { (ylo.ln(), yhi.ln(), v.ln()) } else { (ylo, yhi, v) };
            let frac = if b > a { (v - a) / (b - a) } else { 0.5 };
            oy + PH - frac * PH
        };
        let _ = writeln!(
            svg,
            "<rect x=\"{ox}\" y=\"{oy}\" width=\"{PW}\" height=\"{PH}\" fill=\"none\" stroke=\"#444\"/>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">denoising steps (log)</text>",
            ox + PW / 2.0,
            oy - 15.0,
            ox + PW / 2.0,
            oy + PH + 40.0
        );
        let mut ticks: Vec<usize> = records.iter().map(|r| r.denoise_steps).collect();
        ticks.sort_unstable();
        ticks.dedup();
        for t in ticks {
            let x = ox + lx(t as f64) * PW;
            let _ = writeln!(
                svg,
                "<line x1=\"{x:.1}\" y1=\"{}\" x2=\"{x:.1}\" y2=\"{}\" stroke=\"#444\"/>\
                 <text x=\"{x:.1}\" y=\"{}\" text-anchor=\"middle\">{t}</text>",
                oy + PH,
                oy + PH + 5.0,
                oy + PH + 18.0
            );
        }
        for (v, anchor) in [(ylo, oy + PH), (yhi, oy)] {
            let _ = writeln!(
                svg,
                "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{:.3}</text>",
                ox - 6.0,
                anchor + 4.0,
                v
            );
        }
        for (kind, color) in series {
            let mut pts: Vec<(f64, f64)> = records
                .iter()
                .filter(|r| r.sampler == kind)
                .map(|r| (r.denoise_steps as f64, value(r)))
                .filter(|(_, v)| v.is_finite() && (!log_y || *v > 0.0))
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let path: Vec<String> = pts
                .iter()
                .map(|&(s, v)| format!("{:.1},{:.1}", ox + lx(s) * PW, map_y(v)))
                .collect();
            if !path.is_empty() {
                let _ = writeln!(
                    svg,
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
                    path.join(" ")
                );
            }
            for p in &path {
                let (x, y) = p.split_once(',').expect("pair");
                let _ = writeln!(svg, "<circle cx=\"{x}\" cy=\"{y}\" r=\"3\" fill=\"{color}\"/>");
            }
        }
    }
    for (i, (kind, color)) in series.iter().enumerate() {
        let y = H - 20.0;
        let x = 70.0 + i as f64 * 160.0;
        let _ = writeln!(
            svg,
            "<rect x=\"{x}\" y=\"{}\" width=\"14\" height=\"4\" fill=\"{color}\"/><text x=\"{}\" y=\"{y}\">{}</text>",
            y - 6.0,
            x + 20.0,
            kind.id()
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn run_stage(cfg: &RunConfig, dir: &RunDir, stage: Stage, log: Log) -> Result<()> {
    match stage {
        Stage::Data => stage_data(cfg, dir, log).map(drop),
        Stage::Teacher => stage_teacher(cfg, dir, log).map(drop),
        Stage::Distill => stage_distill(cfg, dir, log).map(drop),
        Stage::Aux => stage_aux(cfg, dir, log).map(drop),
        Stage::Plan => stage_plan(cfg, dir, log).map(drop),
        Stage::Bench => stage_bench(cfg, dir, log).map(drop),
    }
}
