//! Candidate sampling, critic selection and the receding-horizon loop.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctm::{StudentModel, TrajectoryJump};
use crate::data::{episode_rng, run_scripted_episode, Normalizer, Trajectory};
use crate::dynamics::{extract_action, Critic, InverseDynamics};
use crate::envs::{env_step, EnvSpec, PolicyKind};
use crate::error::{CtpError, Result};
use crate::schedule::GridKind;
use crate::teacher::{heun_sample, Denoiser, TeacherModel};
use crate::window::{clamp_condition, repeat_condition, PlanWindow, WindowShape};
use crate::{SamplingGrid, Tensor};

/// Counts calls to the wrapped jump model.
pub struct CountingJump<'m, J: ?Sized> {
    inner: &'m J,
    calls: AtomicUsize,
}

impl<'m, J: TrajectoryJump + ?Sized> CountingJump<'m, J> {
    pub fn new(inner: &'m J) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<J: TrajectoryJump + ?Sized> TrajectoryJump for CountingJump<'_, J> {
    fn jump(&self, x: &Tensor, t: &[f64], w: &[f64], cond: Option<&Tensor>) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.jump(x, t, w, cond)
    }
}

/// Counts calls to the wrapped denoiser.
pub struct CountingDenoiser<'m, D: ?Sized> {
    inner: &'m D,
    calls: AtomicUsize,
}

impl<'m, D: Denoiser + ?Sized> CountingDenoiser<'m, D> {
    pub fn new(inner: &'m D) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for CountingDenoiser<'_, D> {
    fn eps(&self) -> f64 {
        self.inner.eps()
    }

    fn denoise(&self, x: &Tensor, t: &[f64], cond: Option<&Tensor>) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.denoise(x, t, cond)
    }
}

/// `x_{t_N} ~ N(0, t_max²·I)` with the leading state clamped to `cond`.
pub fn initial_noise<R: Rng + ?Sized>(shape: WindowShape, t_max: f64, cond: &[f64], rng: &mut R) -> Vec<f64> {
    let mut x: Vec<f64> = (0..shape.dim()).map(|_| t_max * rng.sample::<f64, _>(StandardNormal)).collect();
    x[..cond.len()].copy_from_slice(cond);
    x
}

/// Iterates `x ← G(x, t_{n+1}, t_n)` down the grid from a batch of initial draws.
pub fn ctm_sample_batch<J: TrajectoryJump + ?Sized>(
    student: &J,
    grid: &SamplingGrid,
    init: &Tensor,
    cond: &Tensor,
) -> Result<Tensor> {
    let mut x = init.clone();
    clamp_condition(&mut x, cond)?;
    let rows = x.rows();
    for (from, to) in grid.descending_pairs() {
        x = student.jump(&x, &vec![from; rows], &vec![to; rows], Some(cond))?;
    }
    x.ensure_finite("sampled window")?;
    Ok(x)
}

/// One window conditioned on the normalized state `s`.
pub fn ctm_sample<J: TrajectoryJump + ?Sized, R: Rng + ?Sized>(
    student: &J,
    shape: WindowShape,
    grid: &SamplingGrid,
    s: &[f64],
    rng: &mut R,
) -> Result<PlanWindow> {
    if s.len() != shape.state_dim {
        return Err(CtpError::dim("conditioning state", shape.state_dim, s.len()));
    }
    let init = Tensor::matrix(1, shape.dim(), initial_noise(shape, grid.t_max(), s, rng))?;
    let out = ctm_sample_batch(student, grid, &init, &repeat_condition(s, 1))?;
    PlanWindow::new(shape, out.into_data())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SamplerKind {
    #[default]
    #[serde(rename = "ctm")]
    Ctm,
    #[serde(rename = "teacher-heun")]
    TeacherHeun,
}

impl SamplerKind {
    pub fn id(self) -> &'static str {
        match self {
            SamplerKind::Ctm => "ctm",
            SamplerKind::TeacherHeun => "teacher-heun",
        }
    }
}

/// How the candidates of one request are evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateMode {
    /// All candidates in one batch per network call.
    #[default]
    Batched,
    /// One candidate at a time, in index order.
    Sequential,
    /// One candidate per rayon task.
    Parallel,
}

/// Sampler choice and its grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub grid: GridKind,
    pub steps: usize,
}

impl SamplerSpec {
    pub fn ctm(steps: usize) -> Self {
        Self {
            kind: SamplerKind::Ctm,
            grid: GridKind::Uniform,
            steps,
        }
    }

    pub fn teacher_heun(steps: usize) -> Self {
        Self {
            kind: SamplerKind::TeacherHeun,
            grid: GridKind::Karras,
            steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanRequest {
    /// Current state in environment units.
    pub state: Vec<f64>,
    pub num_candidates: usize,
    pub denoise_steps: usize,
    pub seed: u64,
}

impl PlanRequest {
    pub fn validate(&self) -> Result<()> {
        if self.num_candidates == 0 || self.denoise_steps == 0 {
            return Err(CtpError::contract("num_candidates and denoise_steps must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanResult {
    pub candidates: Vec<PlanWindow>,
    pub values: Vec<f64>,
    pub best_index: usize,
    /// Action in environment units.
    pub action: Vec<f64>,
}

/// Generator of candidate `index` for a request seeded with `seed`.
pub fn candidate_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Everything the planner needs at decision time.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub student: StudentModel,
    pub teacher: Option<TeacherModel>,
    pub invdyn: InverseDynamics,
    pub critic: Critic,
    pub normalizer: Normalizer,
}

impl ModelBundle {
    pub fn window(&self) -> WindowShape {
        self.student.window
    }

    fn grid(&self, spec: &SamplerSpec) -> Result<SamplingGrid> {
        let sched = &self.student.schedule;
        SamplingGrid::new(spec.grid, sched.eps, sched.t_max, sched.rho, spec.steps)
    }

    /// Denoises a batch of initial draws with the chosen sampler.
    pub fn sample_batch(&self, spec: &SamplerSpec, init: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let grid = self.grid(spec)?;
        match spec.kind {
            SamplerKind::Ctm => ctm_sample_batch(&self.student, &grid, init, cond),
            SamplerKind::TeacherHeun => {
                let teacher = self
                    .teacher
                    .as_ref()
                    .ok_or_else(|| CtpError::contract("teacher-heun sampler needs a teacher"))?;
                let mut x = init.clone();
                clamp_condition(&mut x, cond)?;
                heun_sample(teacher, &grid, &x, Some(cond))
            }
        }
    }
}

/// Candidate windows for a request, conditioned on the normalized state.
pub fn generate_candidates(
    bundle: &ModelBundle,
    spec: &SamplerSpec,
    s_norm: &[f64],
    num_candidates: usize,
    seed: u64,
    mode: CandidateMode,
) -> Result<Vec<PlanWindow>> {
    let shape = bundle.window();
    if num_candidates == 0 {
        return Err(CtpError::contract("num_candidates must be at least 1"));
    }
    let t_max = bundle.student.schedule.t_max;
    let draw = |i: usize| initial_noise(shape, t_max, s_norm, &mut candidate_rng(seed, i));
    let one = |i: usize| -> Result<PlanWindow> {
        let init = Tensor::matrix(1, shape.dim(), draw(i))?;
        let out = bundle.sample_batch(spec, &init, &repeat_condition(s_norm, 1))?;
        PlanWindow::new(shape, out.into_data())
    };
    match mode {
        CandidateMode::Sequential => (0..num_candidates).map(one).collect(),
        CandidateMode::Parallel => (0..num_candidates).into_par_iter().map(one).collect(),
        CandidateMode::Batched => {
            let data = (0..num_candidates).flat_map(draw).collect();
            let init = Tensor::matrix(num_candidates, shape.dim(), data)?;
            let out = bundle.sample_batch(spec, &init, &repeat_condition(s_norm, num_candidates))?;
            (0..num_candidates)
                .map(|r| PlanWindow::from_batch_row(shape, &out, r))
                .collect()
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_first(values: &[f64]) -> Result<usize> {
    if values.is_empty() {
        return Err(CtpError::contract("cannot select from an empty candidate list"));
    }
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            return Err(CtpError::NonFinite("critic value".into()));
        }
        if v > values[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn stack_windows(candidates: &[PlanWindow]) -> Result<Tensor> {
    let first = candidates
        .first()
        .ok_or_else(|| CtpError::contract("cannot select from an empty candidate list"))?;
    let dim = first.shape().dim();
    let data = candidates.iter().flat_map(|w| w.data().iter().copied()).collect();
    Tensor::matrix(candidates.len(), dim, data)
}

pub fn select_best(critic: &Critic, candidates: &[PlanWindow]) -> Result<(usize, Vec<f64>)> {
    let values = critic.values(&stack_windows(candidates)?)?;
    Ok((argmax_first(&values)?, values))
}

/// Plans once from `request.state`: sample, rank, and recover the action
/// from the first two states of the best window.
pub fn plan_step(bundle: &ModelBundle, spec: &SamplerSpec, request: &PlanRequest, mode: CandidateMode) -> Result<PlanResult> {
    request.validate()?;
    let (s_norm, _) = bundle.normalizer.normalize_state_clipped(&request.state);
    let spec = SamplerSpec {
        steps: request.denoise_steps,
        ..*spec
    };
    let candidates = generate_candidates(bundle, &spec, &s_norm, request.num_candidates, request.seed, mode)?;
    let (best_index, values) = select_best(&bundle.critic, &candidates)?;
    let best = &candidates[best_index];
    if best.shape().horizon < 2 {
        return Err(CtpError::contract("planning needs a horizon of at least 2"));
    }
    let action = extract_action(&bundle.invdyn, &bundle.normalizer, best.state(0), best.state(1))?;
    Ok(PlanResult {
        candidates,
        values,
        best_index,
        action,
    })
}

/// Settings of one evaluation episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeConfig {
    pub sampler: SamplerSpec,
    pub num_candidates: usize,
    /// Environment steps each action is held for.
    pub stride: usize,
    pub mode: CandidateMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub episode_seed: u64,
    pub step: usize,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    /// Critic value of the chosen window (of the last re-plan).
    pub value: f64,
    /// Wallclock of the plan made at this step; zero on held steps.
    pub latency_ms: f64,
    pub candidate: usize,
    pub replanned: bool,
    pub reward: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    Goal,
    Budget,
    Fault,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub episode_return: f64,
    pub status: EpisodeStatus,
}

impl EpisodeTrace {
    pub fn plan_latencies(&self) -> Vec<f64> {
        self.steps.iter().filter(|s| s.replanned).map(|s| s.latency_ms).collect()
    }
}

/// Start state of evaluation episode `seed`, shared by every policy.
pub fn eval_start(env: &EnvSpec, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    env.reset(&mut rng)
}

/// Per-plan seed within an episode.
pub fn plan_seed(episode: u64, step: usize) -> u64 {
    episode.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (step as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Plans, executes the action for `stride` steps, and re-plans until the
/// goal or the step budget.
pub fn rollout(env: &EnvSpec, bundle: &ModelBundle, cfg: &EpisodeConfig, seed: u64) -> Result<EpisodeTrace> {
    if cfg.stride == 0 {
        return Err(CtpError::contract("stride must be at least 1"));
    }
    let mut s = eval_start(env, seed);
    let mut steps = Vec::new();
    let mut total = 0.0;
    let mut status = EpisodeStatus::Budget;
    let (mut action, mut value, mut cand) = (vec![0.0; env.action_dim], 0.0, 0);
    for k in 0..env.max_steps {
        let replanned = k % cfg.stride == 0;
        let mut latency_ms = 0.0;
        if replanned {
            let req = PlanRequest {
                state: s.clone(),
                num_candidates: cfg.num_candidates,
                denoise_steps: cfg.sampler.steps,
                seed: plan_seed(seed, k),
            };
            let start = Instant::now();
            let res = plan_step(bundle, &cfg.sampler, &req, cfg.mode)?;
            latency_ms = start.elapsed().as_secs_f64() * 1e3;
            action = res.action;
            value = res.values[res.best_index];
            cand = res.best_index;
        }
        let outcome = match env_step(env, &s, &action) {
            Ok(o) if o.state.iter().all(|v| v.is_finite()) => o,
            _ => {
                status = EpisodeStatus::Fault;
                break;
            }
        };
        total += outcome.reward;
        steps.push(StepRecord {
            episode_seed: seed,
            step: k,
            state: s,
            action: action.clone(),
            value,
            latency_ms,
            candidate: cand,
            replanned,
            reward: outcome.reward,
        });
        s = outcome.state;
        if outcome.done {
            status = EpisodeStatus::Goal;
            break;
        }
    }
    Ok(EpisodeTrace {
        seed,
        steps,
        episode_return: total,
        status,
    })
}

/// Episode of a scripted policy from the shared evaluation start state.
pub fn rollout_scripted(env: &EnvSpec, policy: PolicyKind, expert_fraction: f64, noise: f64, seed: u64) -> Result<Trajectory> {
    // A distinct stream from data collection keeps anchors independent of the dataset.
    let mut rng = episode_rng(seed, u64::MAX - 1);
    let start = eval_start(env, seed);
    let mut env_fixed = env.clone();
    env_fixed.start_x = [start[0], start[0]];
    if env.kind == crate::envs::EnvKind::Maze {
        env_fixed.start_y = [start[1], start[1]];
    }
    run_scripted_episode(&env_fixed, policy, expert_fraction, noise, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctm::mixture;
    use crate::numerics::{Activation, Mlp};
    use crate::schedule::sampling_grid;

    /// `G(x, t, w) = (w/t)·x`.
    struct Shrink;
    impl TrajectoryJump for Shrink {
        fn jump(&self, x: &Tensor, t: &[f64], w: &[f64], cond: Option<&Tensor>) -> Result<Tensor> {
            let mut out = mixture(x, &Tensor::zeros(x.shape()), t, w)?;
            if let Some(c) = cond {
                clamp_condition(&mut out, c)?;
            }
            Ok(out)
        }
    }

    #[test]
    fn shrink_stub_telescopes() {
        let shape = WindowShape::new(3, 2).unwrap();
        let grid = sampling_grid(80.0, 0.002, 4).unwrap();
        let s = [0.25, -0.5];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let init = initial_noise(shape, 80.0, &s, &mut ChaCha8Rng::seed_from_u64(7));
        let counted = CountingJump::new(&Shrink);
        let w = ctm_sample(&counted, shape, &grid, &s, &mut rng).unwrap();
        assert_eq!(counted.calls(), 4);
        assert_eq!(w.condition(), &s);
        for i in 2..6 {
            assert!((w.data()[i] - init[i] * 0.002 / 80.0).abs() < 1e-15);
        }
    }

    #[test]
    fn argmax_rules() {
        assert_eq!(argmax_first(&[0.1, 0.9, 0.5]).unwrap(), 1);
        assert_eq!(argmax_first(&[0.3, 0.3, 0.3]).unwrap(), 0);
        assert!(argmax_first(&[]).is_err());
    }

    #[test]
    fn select_best_on_zero_critic_takes_first() {
        let c = Critic {
            net: Mlp::zeros(&[4, 1], Activation::Identity).unwrap(),
            gamma: 0.9,
            shift: 0.0,
            scale: 1.0,
        };
        let shape = WindowShape::new(2, 2).unwrap();
        let cands: Vec<_> = (0..3)
            .map(|i| PlanWindow::new(shape, vec![i as f64; 4]).unwrap())
            .collect();
        assert_eq!(select_best(&c, &cands).unwrap(), (0, vec![0.0; 3]));
        assert!(select_best(&c, &[]).is_err());
    }
}
