//! Consistency trajectory student `G(x, t, w) = (w/t)·x + (1 − w/t)·g(x, t, w)`,
//! its EMA target, the discriminator, and the distillation loop.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CtpError, Result};
use crate::numerics::{ema_update, restore_mlp, store_mlp, Activation, BoundMlp, Checkpoint, Linear};
use crate::schedule::TIME_FEATURES;
use crate::teacher::{
    check_range, check_rows, preconditioned, sample_batch, solve_paths, time_block, Denoiser, SolverSpec,
    TeacherModel,
};
use crate::window::{clamp_condition, clamp_condition_var, WindowShape};
use crate::{Adam, Mlp, NoiseSchedule, ParamMode, Tape, Tensor, Var};

/// Maps a batch at per-row times `t` to per-row earlier times `w`.
pub trait TrajectoryJump: Sync {
    fn jump(&self, x: &Tensor, t: &[f64], w: &[f64], cond: Option<&Tensor>) -> Result<Tensor>;
}

/// `(w/t)·x + (1 − w/t)·g` row by row.
pub fn mixture(x: &Tensor, g: &Tensor, t: &[f64], w: &[f64]) -> Result<Tensor> {
    if x.shape() != g.shape() {
        return Err(CtpError::dim("mixture", format!("{:?}", x.shape()), format!("{:?}", g.shape())));
    }
    check_rows("mixture times", x, t)?;
    check_rows("mixture times", x, w)?;
    let mut out = x.clone();
    for r in 0..x.rows() {
        let a = w[r] / t[r];
        for (o, gv) in out.row_mut(r).iter_mut().zip(g.row(r)) {
            *o = a * *o + (1.0 - a) * gv;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentModel {
    pub backbone: Mlp,
    pub schedule: NoiseSchedule,
    pub sigma_data: f64,
    pub window: WindowShape,
    pub conditioned: bool,
}

#[derive(Serialize, Deserialize)]
struct StudentMeta {
    schedule: NoiseSchedule,
    sigma_data: f64,
    window: WindowShape,
    conditioned: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mu: Option<f64>,
}

impl StudentModel {
    /// Teacher copy with zero weights on the `w` features, so that initially
    /// `g(x, t, w) = D(x, t)`.
    pub fn from_teacher(teacher: &TeacherModel) -> Result<Self> {
        let n = teacher.window.dim();
        let mut layers: Vec<Linear<f64>> = teacher.backbone.layers().to_vec();
        let first = &layers[0].weight;
        let width = first.cols();
        let mut data = first.data().to_vec();
        data.extend(std::iter::repeat_n(0.0, TIME_FEATURES * width));
        layers[0].weight = Tensor::matrix(n + 2 * TIME_FEATURES, width, data)?;
        Ok(Self {
            backbone: Mlp::from_layers(layers, teacher.backbone.activation())?,
            schedule: teacher.schedule,
            sigma_data: teacher.sigma_data,
            window: teacher.window,
            conditioned: teacher.conditioned,
        })
    }

    pub fn cond_width(&self) -> usize {
        if self.conditioned {
            self.window.state_dim
        } else {
            0
        }
    }

    fn check(&self, x: &Tensor, t: &[f64], w: &[f64]) -> Result<()> {
        if x.cols() != self.window.dim() {
            return Err(CtpError::dim("student input", self.window.dim(), x.cols()));
        }
        check_rows("student times", x, t)?;
        check_rows("student times", x, w)?;
        check_range("t", t, self.schedule.eps, self.schedule.t_max)?;
        check_range("w", w, self.schedule.eps, self.schedule.t_max)?;
        for (tr, wr) in t.iter().zip(w) {
            if wr > tr {
                return Err(CtpError::contract(format!("jump target w={wr} after t={tr}")));
            }
        }
        Ok(())
    }

    /// Raw network output `g(x, t, w)`.
    pub fn g_var(&self, tape: &mut Tape<'_>, net: &BoundMlp, x: Var, t: &[f64], w: &[f64]) -> Result<Var> {
        self.check(tape.value(x), t, w)?;
        let emb = time_block(&[t, w], self.schedule.eps);
        preconditioned(tape, net, x, t, emb, self.sigma_data, self.schedule.eps)
    }

    pub fn forward_var(
        &self,
        tape: &mut Tape<'_>,
        net: &BoundMlp,
        x: Var,
        t: &[f64],
        w: &[f64],
        cond: Option<&Tensor>,
    ) -> Result<Var> {
        let g = self.g_var(tape, net, x, t, w)?;
        let a: Vec<f64> = t.iter().zip(w).map(|(tr, wr)| wr / tr).collect();
        let keep = tape.scale_rows(x, a.clone())?;
        let net_part = tape.scale_rows(g, a.iter().map(|v| 1.0 - v).collect())?;
        let out = tape.add(keep, net_part)?;
        match cond {
            Some(c) => clamp_condition_var(tape, out, c),
            None => Ok(out),
        }
    }

    fn to_checkpoint_with(&self, kind: &str, mu: Option<f64>) -> Checkpoint {
        let meta = StudentMeta {
            schedule: self.schedule,
            sigma_data: self.sigma_data,
            window: self.window,
            conditioned: self.conditioned,
            mu,
        };
        let mut ck = Checkpoint::new(kind, serde_json::to_value(meta).expect("meta"));
        store_mlp(&mut ck, "backbone", &self.backbone);
        ck
    }

    fn from_checkpoint_with(ck: &Checkpoint, kind: &str) -> Result<(Self, Option<f64>)> {
        ck.expect_kind(kind)?;
        let meta: StudentMeta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| CtpError::contract(format!("{kind} meta: {e}")))?;
        let backbone = restore_mlp(ck, "backbone")?;
        if backbone.in_dim() != meta.window.dim() + 2 * TIME_FEATURES {
            return Err(CtpError::contract("student backbone does not match its window"));
        }
        let model = Self {
            backbone,
            schedule: meta.schedule,
            sigma_data: meta.sigma_data,
            window: meta.window,
            conditioned: meta.conditioned,
        };
        Ok((model, meta.mu))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.to_checkpoint_with("student", None)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self::from_checkpoint_with(ck, "student")?.0)
    }
}

impl TrajectoryJump for StudentModel {
    fn jump(&self, x: &Tensor, t: &[f64], w: &[f64], cond: Option<&Tensor>) -> Result<Tensor> {
        x.ensure_finite("student input")?;
        let mut tape = Tape::new();
        let net = self.backbone.bind(&mut tape, ParamMode::Frozen);
        let xv = tape.constant(x.clone());
        let out = self.forward_var(&mut tape, &net, xv, t, w, cond)?;
        Ok(tape.value(out).clone())
    }
}

/// Slow-moving copy of the student used for stop-gradient targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetModel {
    pub model: StudentModel,
    pub mu: f64,
}

impl TargetModel {
    pub fn new(student: &StudentModel, mu: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(CtpError::contract(format!("EMA decay {mu} outside [0, 1]")));
        }
        Ok(Self {
            model: student.clone(),
            mu,
        })
    }

    pub fn update(&mut self, online: &StudentModel) -> Result<()> {
        ema_update(&mut self.model.backbone, &online.backbone, self.mu)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.model.to_checkpoint_with("target", Some(self.mu))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (model, mu) = StudentModel::from_checkpoint_with(ck, "target")?;
        let mu = mu.ok_or_else(|| CtpError::contract("target checkpoint lacks its decay"))?;
        Self::new(&model, mu)
    }
}

impl TrajectoryJump for TargetModel {
    fn jump(&self, x: &Tensor, t: &[f64], w: &[f64], cond: Option<&Tensor>) -> Result<Tensor> {
        self.model.jump(x, t, w, cond)
    }
}

/// `d(x) = sigmoid(MLP(x))` over flattened windows.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub net: Mlp,
}

/// Floor applied inside the adversarial log terms.
pub const LOG_FLOOR: f64 = 1e-7;

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Ok(Self {
            net: Mlp::new(&sizes, Activation::Silu, rng)?,
        })
    }

    pub fn prob_var(&self, tape: &mut Tape<'_>, net: &BoundMlp, x: Var) -> Result<Var> {
        let logits = net.forward(tape, x)?;
        Ok(tape.sigmoid(logits))
    }

    pub fn probs(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let net = self.net.bind(&mut tape, ParamMode::Frozen);
        let xv = tape.constant(x.clone());
        let p = self.prob_var(&mut tape, &net, xv)?;
        Ok(tape.value(p).data().to_vec())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("discriminator", serde_json::json!({}));
        store_mlp(&mut ck, "net", &self.net);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("discriminator")?;
        Ok(Self {
            net: restore_mlp(ck, "net")?,
        })
    }
}

/// Entries of `p` that hit the log floor (at either end).
pub fn clamp_count(p: &[f64]) -> usize {
    p.iter()
        .filter(|&&v| v < LOG_FLOOR || 1.0 - v < LOG_FLOOR)
        .count()
}

/// Sampled times and corrupted windows for one distillation step.
#[derive(Clone, Debug, PartialEq)]
pub struct CtmBatch {
    pub x0: Tensor,
    pub x_t: Tensor,
    pub t: Vec<f64>,
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    /// Solver path from `t` to `u` for each row.
    pub paths: Vec<Vec<f64>>,
    pub cond: Option<Tensor>,
}

/// Refines grid points `grid[hi] > … > grid[lo]` with `substeps` equal steps
/// per interval.
pub fn grid_path(grid: &[f64], hi: usize, lo: usize, substeps: usize) -> Vec<f64> {
    let mut path = vec![grid[hi]];
    for i in (lo..hi).rev() {
        let (a, b) = (grid[i + 1], grid[i]);
        for s in 1..=substeps {
            path.push(if s == substeps { b } else { a + (b - a) * s as f64 / substeps as f64 });
        }
    }
    path
}

/// Draws `(t, w, u)` on the ascending training grid, with `w < t` and
/// `w <= u < t`, and corrupts `x0` to `x_t = x0 + t·ε`.
pub fn sample_ctm_batch<R: Rng + ?Sized>(
    x0: &Tensor,
    grid: &[f64],
    solver: SolverSpec,
    cond_width: usize,
    rng: &mut R,
) -> Result<CtmBatch> {
    if grid.len() < 2 {
        return Err(CtpError::contract("training grid needs two points"));
    }
    if solver.substeps == 0 {
        return Err(CtpError::contract("solver needs at least one substep"));
    }
    let b = x0.rows();
    let mut x_t = x0.clone();
    let (mut t, mut u, mut w, mut paths) = (vec![], vec![], vec![], vec![]);
    for r in 0..b {
        let i = rng.random_range(1..grid.len());
        let j = rng.random_range(0..i);
        let k = rng.random_range(j..i);
        t.push(grid[i]);
        w.push(grid[j]);
        u.push(grid[k]);
        paths.push(grid_path(grid, i, k, solver.substeps));
        for v in x_t.row_mut(r) {
            *v += grid[i] * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let cond = (cond_width > 0).then(|| x0.leading_cols(cond_width));
    if let Some(c) = &cond {
        clamp_condition(&mut x_t, c)?;
    }
    Ok(CtmBatch {
        x0: x0.clone(),
        x_t,
        t,
        u,
        w,
        paths,
        cond,
    })
}

fn check_order(t: &[f64], u: &[f64], w: &[f64]) -> Result<()> {
    for ((tr, ur), wr) in t.iter().zip(u).zip(w) {
        if !(wr <= ur && ur < tr) {
            return Err(CtpError::contract(format!(
                "target times need w <= u < t, got t={tr} u={ur} w={wr}"
            )));
        }
    }
    Ok(())
}

/// `G_sg(Solver(x_t, t → u), u, w)` along explicit solver paths.
pub fn compute_target_along<D: Denoiser + ?Sized, J: TrajectoryJump + ?Sized>(
    teacher: &D,
    target: &J,
    x_t: &Tensor,
    paths: &[Vec<f64>],
    w: &[f64],
    cond: Option<&Tensor>,
) -> Result<Tensor> {
    let t: Vec<f64> = paths.iter().map(|p| p[0]).collect();
    let u: Vec<f64> = paths.iter().map(|p| p[p.len() - 1]).collect();
    check_rows("target times", x_t, w)?;
    check_order(&t, &u, w)?;
    let x_u = solve_paths(teacher, x_t, paths, cond)?;
    target.jump(&x_u, &u, w, cond)
}

/// `G_sg(Solver(x_t, t, u), u, w)` with `spec.substeps` equal solver steps.
#[allow(clippy::too_many_arguments)]
pub fn compute_target<D: Denoiser + ?Sized, J: TrajectoryJump + ?Sized>(
    teacher: &D,
    target: &J,
    x_t: &Tensor,
    t: &[f64],
    u: &[f64],
    w: &[f64],
    spec: SolverSpec,
    cond: Option<&Tensor>,
) -> Result<Tensor> {
    check_rows("target times", x_t, t)?;
    check_rows("target times", x_t, u)?;
    check_order(t, u, w)?;
    let x_u = crate::teacher::heun_solve(teacher, x_t, t, u, spec, cond)?;
    target.jump(&x_u, u, w, cond)
}

/// Loss weights of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_dsm: f64,
    pub lambda_gan: f64,
}

/// Exact weighted sum `ctm + λ_dsm·dsm + λ_gan·gan`.
pub fn total_loss(ctm: f64, dsm: f64, gan: f64, weights: LossWeights) -> f64 {
    ctm + weights.lambda_dsm * dsm + weights.lambda_gan * gan
}

/// Student-side terms of one distillation step, all on one tape.
#[derive(Clone, Debug)]
pub struct StudentTerms {
    pub ctm: Var,
    pub dsm: Var,
    /// Non-saturating generator term, present when a discriminator is given.
    pub gan: Option<Var>,
    pub total: Var,
    pub x_est: Var,
    pub clamps: usize,
}

fn mean_sq_rows(tape: &mut Tape<'_>, a: Var, b: Var) -> Result<Var> {
    let rows = tape.value(a).rows();
    let diff = tape.sub(a, b)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / rows as f64))
}

/// `x_est = G_sg(G_θ(x_t, t, w), w, eps)`.
pub fn x_est_var(
    tape: &mut Tape<'_>,
    student: &StudentModel,
    s_net: &BoundMlp,
    target: &StudentModel,
    t_net: &BoundMlp,
    batch: &CtmBatch,
) -> Result<Var> {
    let xt = tape.constant(batch.x_t.clone());
    let cond = batch.cond.as_ref();
    let inner = student.forward_var(tape, s_net, xt, &batch.t, &batch.w, cond)?;
    let floor = vec![target.schedule.eps; batch.x0.rows()];
    target.forward_var(tape, t_net, inner, &batch.w, &floor, cond)
}

/// Builds `L_CTM`, `L_DSM` and (optionally) the generator term. `x_target`
/// is the precomputed `G_sg(G_target, w, eps)`.
#[allow(clippy::too_many_arguments)]
pub fn student_terms(
    tape: &mut Tape<'_>,
    student: &StudentModel,
    s_net: &BoundMlp,
    target: &StudentModel,
    t_net: &BoundMlp,
    disc: Option<(&Discriminator, &BoundMlp)>,
    batch: &CtmBatch,
    x_target: &Tensor,
    weights: LossWeights,
) -> Result<StudentTerms> {
    if batch.x0.rows() == 0 {
        return Err(CtpError::contract("distillation batch is empty"));
    }
    let x_est = x_est_var(tape, student, s_net, target, t_net, batch)?;
    let xt_target = tape.constant(x_target.clone());
    let ctm = mean_sq_rows(tape, xt_target, x_est)?;
    let dsm = dsm_var(tape, student, s_net, batch)?;
    let mut total = ctm;
    if weights.lambda_dsm != 0.0 {
        let scaled = tape.scale(dsm, weights.lambda_dsm);
        total = tape.add(total, scaled)?;
    }
    let mut clamps = 0;
    let gan = match disc {
        Some((d, d_net)) => {
            let p = d.prob_var(tape, d_net, x_est)?;
            clamps = clamp_count(tape.value(p).data());
            let lp = tape.log_clamped(p, LOG_FLOOR, 1.0);
            let s = tape.sum(lp);
            let g = tape.scale(s, -1.0 / batch.x0.rows() as f64);
            let scaled = tape.scale(g, weights.lambda_gan);
            total = tape.add(total, scaled)?;
            Some(g)
        }
        None => None,
    };
    Ok(StudentTerms {
        ctm,
        dsm,
        gan,
        total,
        x_est,
        clamps,
    })
}

/// `mean ‖x0 − g(x_t, t, t)‖²`; the inpainted leading state is excluded.
pub fn dsm_var(tape: &mut Tape<'_>, student: &StudentModel, s_net: &BoundMlp, batch: &CtmBatch) -> Result<Var> {
    let xt = tape.constant(batch.x_t.clone());
    let mut g = student.g_var(tape, s_net, xt, &batch.t, &batch.t)?;
    if let Some(c) = &batch.cond {
        g = clamp_condition_var(tape, g, c)?;
    }
    let x0 = tape.constant(batch.x0.clone());
    mean_sq_rows(tape, x0, g)
}

pub fn dsm_loss(student: &StudentModel, batch: &CtmBatch) -> Result<f64> {
    let mut tape = Tape::new();
    let net = student.backbone.bind(&mut tape, ParamMode::Frozen);
    let v = dsm_var(&mut tape, student, &net, batch)?;
    tape.value(v).item()
}

/// `mean ‖x_target − x_est‖²` for a sampled batch.
pub fn ctm_loss<D: Denoiser + ?Sized>(
    student: &StudentModel,
    target: &TargetModel,
    teacher: &D,
    batch: &CtmBatch,
) -> Result<f64> {
    let x_target = ctm_x_target(teacher, target, batch)?;
    let mut tape = Tape::new();
    let s_net = student.backbone.bind(&mut tape, ParamMode::Frozen);
    let t_net = target.model.backbone.bind(&mut tape, ParamMode::Frozen);
    let x_est = x_est_var(&mut tape, student, &s_net, &target.model, &t_net, batch)?;
    let xt = tape.constant(x_target);
    let l = mean_sq_rows(&mut tape, xt, x_est)?;
    tape.value(l).item()
}

/// `G_sg(G_target, w, eps)` for a batch.
pub fn ctm_x_target<D: Denoiser + ?Sized>(teacher: &D, target: &TargetModel, batch: &CtmBatch) -> Result<Tensor> {
    let cond = batch.cond.as_ref();
    let g_target = compute_target_along(teacher, target, &batch.x_t, &batch.paths, &batch.w, cond)?;
    let floor = vec![target.model.schedule.eps; batch.x0.rows()];
    target.jump(&g_target, &batch.w, &floor, cond)
}

/// Value of `mean log d(x0) + mean log(1 − d(x_fake))` on the tape, and the
/// number of clamped probabilities.
pub fn discriminator_objective_var(
    tape: &mut Tape<'_>,
    disc: &Discriminator,
    net: &BoundMlp,
    x0: &Tensor,
    x_fake: &Tensor,
) -> Result<(Var, usize)> {
    let real = tape.constant(x0.clone());
    let fake = tape.constant(x_fake.clone());
    let pr = disc.prob_var(tape, net, real)?;
    let pf = disc.prob_var(tape, net, fake)?;
    let clamps = clamp_count(tape.value(pr).data()) + clamp_count(tape.value(pf).data());
    let lr = tape.log_clamped(pr, LOG_FLOOR, 1.0);
    let ones = tape.constant(Tensor::filled(tape.value(pf).shape(), 1.0));
    let one_minus = tape.sub(ones, pf)?;
    let lf = tape.log_clamped(one_minus, LOG_FLOOR, 1.0);
    let sr = tape.sum(lr);
    let sf = tape.sum(lf);
    let mr = tape.scale(sr, 1.0 / x0.rows() as f64);
    let mf = tape.scale(sf, 1.0 / x_fake.rows() as f64);
    Ok((tape.add(mr, mf)?, clamps))
}

/// Adversarial values for one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanLosses {
    /// `−mean log d(x_est)`.
    pub generator: f64,
    /// `mean log d(x0) + mean log(1 − d(x_est))`, ascended by the discriminator.
    pub discriminator: f64,
    pub clamps: usize,
}

pub fn gan_losses(
    student: &StudentModel,
    target: &TargetModel,
    disc: &Discriminator,
    batch: &CtmBatch,
) -> Result<GanLosses> {
    let mut tape = Tape::new();
    let s_net = student.backbone.bind(&mut tape, ParamMode::Frozen);
    let t_net = target.model.backbone.bind(&mut tape, ParamMode::Frozen);
    let x_est = x_est_var(&mut tape, student, &s_net, &target.model, &t_net, batch)?;
    let x_est = tape.value(x_est).clone();
    let probs = disc.probs(&x_est)?;
    let generator = -probs.iter().map(|p| p.clamp(LOG_FLOOR, 1.0).ln()).sum::<f64>() / probs.len() as f64;
    let mut dtape = Tape::new();
    let d_net = disc.net.bind(&mut dtape, ParamMode::Frozen);
    let (obj, clamps) = discriminator_objective_var(&mut dtape, disc, &d_net, &batch.x0, &x_est)?;
    Ok(GanLosses {
        generator,
        discriminator: dtape.value(obj).item()?,
        clamps: clamps + clamp_count(&probs),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub lambda_dsm: f64,
    pub lambda_gan: f64,
    pub mu_ema: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub solver: SolverSpec,
    pub seed: u64,
    /// When false the discriminator is neither built into the loss nor trained.
    pub gan_enabled: bool,
    pub disc_hidden: Vec<usize>,
    pub disc_lr_factor: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_dsm: 1.0,
            lambda_gan: 0.0,
            mu_ema: 0.999,
            batch_size: 128,
            steps: 5000,
            lr: 8e-6,
            solver: SolverSpec::default(),
            seed: 0,
            gan_enabled: true,
            disc_hidden: vec![64, 64],
            disc_lr_factor: 10.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_dsm >= 0.0 && self.lambda_gan >= 0.0) {
            return Err(CtpError::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.mu_ema) {
            return Err(CtpError::Config(format!("mu_ema {} outside [0, 1]", self.mu_ema)));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.disc_lr_factor > 0.0) {
            return Err(CtpError::Config("distill needs batch_size > 0 and positive learning rates".into()));
        }
        if self.solver.substeps == 0 {
            return Err(CtpError::Config("solver substeps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_dsm: self.lambda_dsm,
            lambda_gan: self.lambda_gan,
        }
    }
}

/// One row of the distillation trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillRow {
    pub step: usize,
    pub ctm: f64,
    pub dsm: f64,
    /// Discriminator objective; zero when the adversarial branch is off.
    pub gan: f64,
    pub total: f64,
    pub wallclock_ms: f64,
}

#[derive(Clone, Debug)]
pub struct DistillRun {
    pub student: StudentModel,
    pub target: TargetModel,
    pub discriminator: Discriminator,
    pub trace: Vec<DistillRow>,
    pub clamps: usize,
}

pub fn distill(teacher: &TeacherModel, data: &Tensor, cfg: &DistillConfig) -> Result<DistillRun> {
    cfg.validate()?;
    if data.rows() == 0 {
        return Err(CtpError::contract("distillation set is empty"));
    }
    if data.cols() != teacher.window.dim() {
        return Err(CtpError::dim("distillation windows", teacher.window.dim(), data.cols()));
    }
    let grid = teacher.schedule.karras_times()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut disc_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    disc_rng.set_stream(1);
    let mut student = StudentModel::from_teacher(teacher)?;
    let mut target = TargetModel::new(&student, cfg.mu_ema)?;
    let mut disc = Discriminator::new(teacher.window.dim(), &cfg.disc_hidden, &mut disc_rng)?;
    let mut adam = Adam::new(cfg.lr);
    let mut disc_adam = Adam::new(cfg.lr * cfg.disc_lr_factor);
    let use_gan = cfg.gan_enabled && cfg.lambda_gan > 0.0;
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut clamps = 0;
    let start = Instant::now();
    let diverged = |step: usize, what: &str, v: f64| CtpError::Divergence {
        step,
        detail: format!("{what} = {v}"),
    };
    for step in 0..cfg.steps {
        let x0 = sample_batch(data, cfg.batch_size, &mut rng);
        let batch = sample_ctm_batch(&x0, &grid, cfg.solver, student.cond_width(), &mut rng)?;
        let x_target = ctm_x_target(teacher, &target, &batch)?;
        let (ctm, dsm, total, x_est, grads) = {
            let mut tape = Tape::new();
            let s_net = student.backbone.bind(&mut tape, ParamMode::Trainable);
            let t_net = target.model.backbone.bind(&mut tape, ParamMode::Frozen);
            let d_net = use_gan.then(|| disc.net.bind(&mut tape, ParamMode::Frozen));
            let terms = student_terms(
                &mut tape,
                &student,
                &s_net,
                &target.model,
                &t_net,
                d_net.as_ref().map(|n| (&disc, n)),
                &batch,
                &x_target,
                cfg.weights(),
            )?;
            clamps += terms.clamps;
            let total = tape.value(terms.total).item()?;
            if !total.is_finite() {
                return Err(diverged(step, "distillation loss", total));
            }
            let grads = tape.backward(terms.total)?.wrt_all(s_net.leaves());
            (
                tape.value(terms.ctm).item()?,
                tape.value(terms.dsm).item()?,
                total,
                tape.value(terms.x_est).clone(),
                grads,
            )
        };
        adam.step(&mut student.backbone, &grads)?;
        let mut gan = 0.0;
        if cfg.gan_enabled {
            let (obj, grads) = {
                let mut tape = Tape::new();
                let d_net = disc.net.bind(&mut tape, ParamMode::Trainable);
                let (obj, c) = discriminator_objective_var(&mut tape, &disc, &d_net, &batch.x0, &x_est)?;
                clamps += c;
                let neg = tape.scale(obj, -1.0);
                let value = tape.value(obj).item()?;
                if !value.is_finite() {
                    return Err(diverged(step, "discriminator objective", value));
                }
                (value, tape.backward(neg)?.wrt_all(d_net.leaves()))
            };
            disc_adam.step(&mut disc.net, &grads)?;
            gan = obj;
        }
        target.update(&student)?;
        trace.push(DistillRow {
            step,
            ctm,
            dsm,
            gan,
            total,
            wallclock_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(DistillRun {
        student,
        target,
        discriminator: disc,
        trace,
        clamps,
    })
}
