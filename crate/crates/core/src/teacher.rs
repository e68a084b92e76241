//! Teacher denoiser `D(x, t) = c_skip(t)·x + c_out(t)·F([c_in(t)·x, emb(t)])`
//! and the Heun solver of the probability-flow ODE `dx/dt = (x − D(x,t))/t`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CtpError, Result};
use crate::numerics::{restore_mlp, store_mlp, Activation, BoundMlp, Checkpoint};
use crate::schedule::{input_scale, skip_coeffs, time_features, TIME_FEATURES};
use crate::window::{clamp_condition, clamp_condition_var, WindowShape};
use crate::{Adam, Mlp, NoiseSchedule, ParamMode, SamplingGrid, Tape, Tensor, TrainNoiseDist, Var};

/// Anything that maps a noisy batch at per-row times to a clean estimate.
pub trait Denoiser: Sync {
    /// Time floor; solver steps ending at or below it are Euler steps.
    fn eps(&self) -> f64;
    fn denoise(&self, x: &Tensor, t: &[f64], cond: Option<&Tensor>) -> Result<Tensor>;
}

pub(crate) fn check_rows(ctx: &'static str, x: &Tensor, times: &[f64]) -> Result<()> {
    if times.len() != x.rows() {
        return Err(CtpError::dim(ctx, x.rows(), times.len()));
    }
    Ok(())
}

pub(crate) fn check_range(what: &str, times: &[f64], lo: f64, hi: f64) -> Result<()> {
    for &t in times {
        if !(t >= lo && t <= hi) {
            return Err(CtpError::contract(format!("{what} = {t} outside [{lo}, {hi}]")));
        }
    }
    Ok(())
}

/// Per-row time features for each list in `times`, concatenated.
pub(crate) fn time_block(times: &[&[f64]], eps: f64) -> Tensor {
    let rows = times[0].len();
    let mut data = Vec::with_capacity(rows * TIME_FEATURES * times.len());
    for r in 0..rows {
        for ts in times {
            data.extend_from_slice(&time_features(ts[r], eps));
        }
    }
    Tensor::matrix(rows, TIME_FEATURES * times.len(), data).expect("sized")
}

/// `c_skip·x + c_out·F([c_in·x, extra])` on the tape, for a preconditioned
/// backbone shared by teacher and student.
pub(crate) fn preconditioned(
    tape: &mut Tape<'_>,
    net: &BoundMlp,
    x: Var,
    t: &[f64],
    extra: Tensor,
    sigma_data: f64,
    eps: f64,
) -> Result<Var> {
    let cin: Vec<f64> = t.iter().map(|&ti| input_scale(ti, sigma_data)).collect();
    let coeffs = t
        .iter()
        .map(|&ti| skip_coeffs(ti, sigma_data, eps))
        .collect::<Result<Vec<_>>>()?;
    let xin = tape.scale_rows(x, cin)?;
    let emb = tape.constant(extra);
    let inp = tape.concat_cols(&[xin, emb])?;
    let f = net.forward(tape, inp)?;
    let skip = tape.scale_rows(x, coeffs.iter().map(|c| c.0).collect())?;
    let out = tape.scale_rows(f, coeffs.iter().map(|c| c.1).collect())?;
    tape.add(skip, out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherModel {
    pub backbone: Mlp,
    pub schedule: NoiseSchedule,
    pub sigma_data: f64,
    pub window: WindowShape,
    /// Whether the leading state is inpainted rather than generated.
    pub conditioned: bool,
}

#[derive(Serialize, Deserialize)]
struct TeacherMeta {
    schedule: NoiseSchedule,
    sigma_data: f64,
    window: WindowShape,
    conditioned: bool,
}

impl TeacherModel {
    pub fn new<R: Rng + ?Sized>(
        window: WindowShape,
        conditioned: bool,
        hidden: &[usize],
        schedule: NoiseSchedule,
        sigma_data: f64,
        rng: &mut R,
    ) -> Result<Self> {
        schedule.validate()?;
        let n = window.dim();
        let mut sizes = vec![n + TIME_FEATURES];
        sizes.extend_from_slice(hidden);
        sizes.push(n);
        Ok(Self {
            backbone: Mlp::new(&sizes, Activation::Silu, rng)?,
            schedule,
            sigma_data,
            window,
            conditioned,
        })
    }

    pub fn cond_width(&self) -> usize {
        if self.conditioned {
            self.window.state_dim
        } else {
            0
        }
    }

    fn check_input(&self, x: &Tensor, t: &[f64]) -> Result<()> {
        if x.cols() != self.window.dim() {
            return Err(CtpError::dim("teacher input", self.window.dim(), x.cols()));
        }
        check_rows("teacher times", x, t)?;
        check_range("t", t, self.schedule.eps, self.schedule.t_max)
    }

    pub fn denoise_var(
        &self,
        tape: &mut Tape<'_>,
        net: &BoundMlp,
        x: Var,
        t: &[f64],
        cond: Option<&Tensor>,
    ) -> Result<Var> {
        self.check_input(tape.value(x), t)?;
        let emb = time_block(&[t], self.schedule.eps);
        let out = preconditioned(tape, net, x, t, emb, self.sigma_data, self.schedule.eps)?;
        match cond {
            Some(c) => clamp_condition_var(tape, out, c),
            None => Ok(out),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = TeacherMeta {
            schedule: self.schedule,
            sigma_data: self.sigma_data,
            window: self.window,
            conditioned: self.conditioned,
        };
        let mut ck = Checkpoint::new("teacher", serde_json::to_value(meta).expect("meta"));
        store_mlp(&mut ck, "backbone", &self.backbone);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("teacher")?;
        let meta: TeacherMeta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| CtpError::contract(format!("teacher meta: {e}")))?;
        let backbone = restore_mlp(ck, "backbone")?;
        if backbone.in_dim() != meta.window.dim() + TIME_FEATURES {
            return Err(CtpError::contract("teacher backbone does not match its window"));
        }
        Ok(Self {
            backbone,
            schedule: meta.schedule,
            sigma_data: meta.sigma_data,
            window: meta.window,
            conditioned: meta.conditioned,
        })
    }
}

impl Denoiser for TeacherModel {
    fn eps(&self) -> f64 {
        self.schedule.eps
    }

    fn denoise(&self, x: &Tensor, t: &[f64], cond: Option<&Tensor>) -> Result<Tensor> {
        x.ensure_finite("denoiser input")?;
        let mut tape = Tape::new();
        let net = self.backbone.bind(&mut tape, ParamMode::Frozen);
        let xv = tape.constant(x.clone());
        let out = self.denoise_var(&mut tape, &net, xv, t, cond)?;
        Ok(tape.value(out).clone())
    }
}

/// Explicit randomness of one teacher-loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSample {
    pub x0: Tensor,
    pub sigma: Vec<f64>,
    pub noise: Tensor,
}

pub fn draw_teacher_sample<R: Rng + ?Sized>(x0: &Tensor, dist: &TrainNoiseDist, rng: &mut R) -> TeacherSample {
    let sigma = (0..x0.rows()).map(|_| dist.sample(rng)).collect();
    let data = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
    let noise = Tensor::new(x0.shape().to_vec(), data).expect("sized");
    TeacherSample {
        x0: x0.clone(),
        sigma,
        noise,
    }
}

/// `mean_b ‖D(x0 + σ·n, σ) − x0‖²`; with conditioning the leading state is
/// clean on input and clamped on output, so it contributes nothing.
pub fn teacher_loss_var(
    tape: &mut Tape<'_>,
    model: &TeacherModel,
    net: &BoundMlp,
    sample: &TeacherSample,
) -> Result<Var> {
    let b = sample.x0.rows();
    if b == 0 {
        return Err(CtpError::contract("teacher loss on an empty batch"));
    }
    let mut xs = sample.x0.clone();
    for r in 0..b {
        let s = sample.sigma[r];
        for (v, n) in xs.row_mut(r).iter_mut().zip(sample.noise.row(r)) {
            *v += s * n;
        }
    }
    let cond = sample.x0.leading_cols(model.cond_width());
    let cond = model.conditioned.then_some(&cond);
    if let Some(c) = cond {
        clamp_condition(&mut xs, c)?;
    }
    let xv = tape.constant(xs);
    let d = model.denoise_var(tape, net, xv, &sample.sigma, cond)?;
    let target = tape.constant(sample.x0.clone());
    let diff = tape.sub(d, target)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / b as f64))
}

pub fn teacher_loss<R: Rng + ?Sized>(
    model: &TeacherModel,
    batch: &Tensor,
    dist: &TrainNoiseDist,
    rng: &mut R,
) -> Result<f64> {
    if batch.rows() == 0 {
        return Err(CtpError::contract("teacher loss on an empty batch"));
    }
    let sample = draw_teacher_sample(batch, dist, rng);
    let mut tape = Tape::new();
    let net = model.backbone.bind(&mut tape, ParamMode::Frozen);
    let loss = teacher_loss_var(&mut tape, model, &net, &sample)?;
    tape.value(loss).item()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    #[default]
    Heun,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default)]
    pub kind: SolverKind,
    pub substeps: usize,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            kind: SolverKind::Heun,
            substeps: 1,
        }
    }
}

impl SolverSpec {
    pub fn heun(substeps: usize) -> Result<Self> {
        if substeps == 0 {
            return Err(CtpError::contract("solver needs at least one substep"));
        }
        Ok(Self {
            kind: SolverKind::Heun,
            substeps,
        })
    }
}

fn axpy_rows(x: &Tensor, h: &[f64], slope: &Tensor) -> Tensor {
    let mut out = x.clone();
    for (r, &hr) in h.iter().enumerate() {
        for (o, s) in out.row_mut(r).iter_mut().zip(slope.row(r)) {
            *o += hr * s;
        }
    }
    out
}

fn slope(x: &Tensor, d: &Tensor, t: &[f64]) -> Tensor {
    let mut out = x.clone();
    for (r, &tr) in t.iter().enumerate() {
        for (o, dv) in out.row_mut(r).iter_mut().zip(d.row(r)) {
            *o = (*o - dv) / tr;
        }
    }
    out
}

/// One Heun step per row from `from[r]` to `to[r]`; rows ending at or below
/// the time floor take the Euler predictor only.
pub fn heun_step<D: Denoiser + ?Sized>(
    model: &D,
    x: &Tensor,
    from: &[f64],
    to: &[f64],
    cond: Option<&Tensor>,
) -> Result<Tensor> {
    check_rows("heun step", x, from)?;
    check_rows("heun step", x, to)?;
    let h: Vec<f64> = from.iter().zip(to).map(|(f, t)| t - f).collect();
    let d1 = slope(x, &model.denoise(x, from, cond)?, from);
    let mut pred = axpy_rows(x, &h, &d1);
    if let Some(c) = cond {
        clamp_condition(&mut pred, c)?;
    }
    let correct: Vec<usize> = (0..x.rows()).filter(|&r| to[r] > model.eps()).collect();
    if correct.is_empty() {
        return Ok(pred);
    }
    let sub_pred = pred.select_rows(&correct);
    let sub_to: Vec<f64> = correct.iter().map(|&r| to[r]).collect();
    let sub_cond = cond.map(|c| c.select_rows(&correct));
    let d2 = slope(&sub_pred, &model.denoise(&sub_pred, &sub_to, sub_cond.as_ref())?, &sub_to);
    for (i, &r) in correct.iter().enumerate() {
        let hr = h[r];
        let (xr, s1, s2) = (x.row(r), d1.row(r), d2.row(i));
        for (c, o) in pred.row_mut(r).iter_mut().enumerate() {
            *o = xr[c] + hr * 0.5 * (s1[c] + s2[c]);
        }
    }
    if let Some(c) = cond {
        clamp_condition(&mut pred, c)?;
    }
    Ok(pred)
}

/// Integrates every row along its own strictly decreasing time path.
pub fn solve_paths<D: Denoiser + ?Sized>(
    model: &D,
    x: &Tensor,
    paths: &[Vec<f64>],
    cond: Option<&Tensor>,
) -> Result<Tensor> {
    if paths.len() != x.rows() {
        return Err(CtpError::dim("solver paths", x.rows(), paths.len()));
    }
    for p in paths {
        if p.is_empty() || p.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(CtpError::contract("solver path must be strictly decreasing"));
        }
    }
    let mut x = x.clone();
    let longest = paths.iter().map(Vec::len).max().unwrap_or(0);
    for s in 0..longest.saturating_sub(1) {
        let active: Vec<usize> = (0..x.rows()).filter(|&r| paths[r].len() > s + 1).collect();
        let from: Vec<f64> = active.iter().map(|&r| paths[r][s]).collect();
        let to: Vec<f64> = active.iter().map(|&r| paths[r][s + 1]).collect();
        if active.len() == x.rows() {
            x = heun_step(model, &x, &from, &to, cond)?;
        } else {
            let sub_cond = cond.map(|c| c.select_rows(&active));
            let next = heun_step(model, &x.select_rows(&active), &from, &to, sub_cond.as_ref())?;
            for (i, &r) in active.iter().enumerate() {
                x.row_mut(r).copy_from_slice(next.row(i));
            }
        }
    }
    Ok(x)
}

/// Solves from `t[r]` down to `u[r]` with `spec.substeps` equal Heun steps.
pub fn heun_solve<D: Denoiser + ?Sized>(
    model: &D,
    x_t: &Tensor,
    t: &[f64],
    u: &[f64],
    spec: SolverSpec,
    cond: Option<&Tensor>,
) -> Result<Tensor> {
    check_rows("heun solve", x_t, t)?;
    check_rows("heun solve", x_t, u)?;
    if spec.substeps == 0 {
        return Err(CtpError::contract("solver needs at least one substep"));
    }
    x_t.ensure_finite("solver input")?;
    let n = spec.substeps;
    let paths: Vec<Vec<f64>> = t
        .iter()
        .zip(u)
        .map(|(&tr, &ur)| {
            if !(ur >= model.eps() && ur < tr) {
                return Err(CtpError::contract(format!(
                    "solver interval needs eps <= u < t, got t={tr} u={ur}"
                )));
            }
            let mut p: Vec<f64> = (0..=n).map(|i| tr + (ur - tr) * i as f64 / n as f64).collect();
            p[n] = ur;
            Ok(p)
        })
        .collect::<Result<_>>()?;
    solve_paths(model, x_t, &paths, cond)
}

/// Multi-step deterministic sampling down `grid` from `x_init` at `t_max`.
pub fn heun_sample<D: Denoiser + ?Sized>(
    model: &D,
    grid: &SamplingGrid,
    x_init: &Tensor,
    cond: Option<&Tensor>,
) -> Result<Tensor> {
    let path: Vec<f64> = grid.times().iter().rev().copied().collect();
    solve_paths(model, x_init, &vec![path; x_init.rows()], cond)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub sigma_data: f64,
    pub log_mean: f64,
    pub log_std: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            steps: 5000,
            batch_size: 128,
            lr: 2e-4,
            seed: 0,
            sigma_data: 0.5,
            log_mean: -1.2,
            log_std: 1.2,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.sigma_data > 0.0) || !(self.log_std >= 0.0) {
            return Err(CtpError::Config(
                "teacher needs batch_size > 0, lr > 0, sigma_data > 0, log_std >= 0".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(CtpError::Config("teacher hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// One row of a training-loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    pub wallclock_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TeacherRun {
    pub model: TeacherModel,
    pub trace: Vec<LossRow>,
    pub heldout_initial: Option<f64>,
    pub heldout_final: Option<f64>,
}

const HELDOUT_SEED: u64 = 0x5eed_0e7a;

/// Held-out loss with a fixed noise draw, comparable across calls.
pub fn heldout_teacher_loss(model: &TeacherModel, heldout: &Tensor, dist: &TrainNoiseDist) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(HELDOUT_SEED);
    teacher_loss(model, heldout, dist, &mut rng)
}

pub(crate) fn sample_batch<R: Rng + ?Sized>(data: &Tensor, batch: usize, rng: &mut R) -> Tensor {
    let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..data.rows())).collect();
    data.select_rows(&idx)
}

pub fn train_teacher(
    train: &Tensor,
    heldout: Option<&Tensor>,
    window: WindowShape,
    conditioned: bool,
    schedule: NoiseSchedule,
    cfg: &TeacherConfig,
) -> Result<TeacherRun> {
    cfg.validate()?;
    if train.rows() == 0 {
        return Err(CtpError::contract("teacher training set is empty"));
    }
    if train.cols() != window.dim() {
        return Err(CtpError::dim("teacher training windows", window.dim(), train.cols()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = TeacherModel::new(window, conditioned, &cfg.hidden, schedule, cfg.sigma_data, &mut rng)?;
    let dist = TrainNoiseDist::new(cfg.log_mean, cfg.log_std, &schedule);
    let heldout = heldout.filter(|h| h.rows() > 0);
    let heldout_initial = heldout
        .map(|h| heldout_teacher_loss(&model, h, &dist))
        .transpose()?;
    let mut adam = Adam::new(cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps);
    let start = Instant::now();
    for step in 0..cfg.steps {
        let x0 = sample_batch(train, cfg.batch_size, &mut rng);
        let sample = draw_teacher_sample(&x0, &dist, &mut rng);
        let (loss, grads) = {
            let mut tape = Tape::new();
            let net = model.backbone.bind(&mut tape, ParamMode::Trainable);
            let loss = teacher_loss_var(&mut tape, &model, &net, &sample)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(CtpError::Divergence {
                    step,
                    detail: format!("teacher loss {value}"),
                });
            }
            (value, tape.backward(loss)?.wrt_all(net.leaves()))
        };
        adam.step(&mut model.backbone, &grads)?;
        trace.push(LossRow {
            step,
            loss,
            wallclock_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    let heldout_final = heldout
        .map(|h| heldout_teacher_loss(&model, h, &dist))
        .transpose()?;
    Ok(TeacherRun {
        model,
        trace,
        heldout_initial,
        heldout_final,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Zero;
    impl Denoiser for Zero {
        fn eps(&self) -> f64 {
            0.002
        }
        fn denoise(&self, x: &Tensor, _: &[f64], _: Option<&Tensor>) -> Result<Tensor> {
            Ok(Tensor::zeros(x.shape()))
        }
    }

    struct Ident;
    impl Denoiser for Ident {
        fn eps(&self) -> f64 {
            0.002
        }
        fn denoise(&self, x: &Tensor, _: &[f64], _: Option<&Tensor>) -> Result<Tensor> {
            Ok(x.clone())
        }
    }

    fn zero_teacher(h: usize, d: usize) -> TeacherModel {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = TeacherModel::new(
            WindowShape::new(h, d).unwrap(),
            true,
            &[8],
            NoiseSchedule::default(),
            0.5,
            &mut rng,
        )
        .unwrap();
        m.backbone = Mlp::zeros(&m.backbone.sizes(), Activation::Silu).unwrap();
        m
    }

    #[test]
    fn zero_residual_denoiser() {
        let m = zero_teacher(2, 2);
        let x = Tensor::matrix(1, 4, vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(m.denoise(&x, &[0.002], None).unwrap(), x);
        let (cs, _) = skip_coeffs(3.0, 0.5, 0.002).unwrap();
        assert_eq!(m.denoise(&x, &[3.0], None).unwrap(), x.map(|v| cs * v));
        assert!(m.denoise(&x, &[0.001], None).is_err());
        assert!(m.denoise(&x.map(|_| f64::NAN), &[1.0], None).is_err());
    }

    #[test]
    fn heun_zero_drift_and_linear_solution() {
        let x = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let s = SolverSpec::heun(1).unwrap();
        assert_eq!(heun_solve(&Ident, &x, &[1.0], &[0.5], s, None).unwrap(), x);
        // dx/dt = x/t is linear in t, so a single Heun step is exact.
        let y = heun_solve(&Zero, &x, &[1.0], &[0.5], s, None).unwrap();
        assert!((y.item().unwrap() - 0.5).abs() < 1e-15);
        assert!(heun_solve(&Zero, &x, &[1.0], &[1.0], s, None).is_err());
        assert!(heun_solve(&Zero, &x, &[1.0], &[2.0], s, None).is_err());
    }

    #[test]
    fn euler_on_final_step() {
        // Identity slope x/t with D = x/2: Euler to eps is x(1 + (eps - t)/(2t)).
        struct Half;
        impl Denoiser for Half {
            fn eps(&self) -> f64 {
                0.002
            }
            fn denoise(&self, x: &Tensor, _: &[f64], _: Option<&Tensor>) -> Result<Tensor> {
                Ok(x.map(|v| 0.5 * v))
            }
        }
        let x = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let y = heun_solve(&Half, &x, &[1.0], &[0.002], SolverSpec::heun(1).unwrap(), None).unwrap();
        assert!((y.item().unwrap() - (1.0 + (0.002 - 1.0) * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn conditioning_column_is_clamped() {
        let m = zero_teacher(3, 2);
        let x = Tensor::matrix(2, 6, (0..12).map(|v| v as f64 - 5.0).collect()).unwrap();
        let c = Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let y = heun_solve(&m, &x, &[10.0, 5.0], &[0.002, 1.0], SolverSpec::heun(3).unwrap(), Some(&c)).unwrap();
        assert_eq!(y.leading_cols(2), c);
    }

    #[test]
    fn teacher_loss_zero_model_matches_batch_average() {
        let mut m = zero_teacher(1, 2);
        m.conditioned = false;
        // With F ≡ 0, D = c_skip·x_σ.
        let x0 = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, -2.0]).unwrap();
        let sample = TeacherSample {
            x0: x0.clone(),
            sigma: vec![0.5, 2.0],
            noise: Tensor::matrix(2, 2, vec![0.3, -0.1, 1.0, 0.2]).unwrap(),
        };
        let mut tape = Tape::new();
        let net = m.backbone.bind(&mut tape, ParamMode::Frozen);
        let l = teacher_loss_var(&mut tape, &m, &net, &sample).unwrap();
        let mut want = 0.0;
        for r in 0..2 {
            let (cs, _) = skip_coeffs(sample.sigma[r], 0.5, 0.002).unwrap();
            for c in 0..2 {
                let xs = x0.get(r, c) + sample.sigma[r] * sample.noise.get(r, c);
                want += (cs * xs - x0.get(r, c)).powi(2);
            }
        }
        assert!((tape.value(l).item().unwrap() - want / 2.0).abs() < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dist = TrainNoiseDist::new(-1.2, 1.2, &NoiseSchedule::default());
        assert!(teacher_loss(&m, &Tensor::zeros(&[0, 2]), &dist, &mut rng).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = TeacherModel::new(WindowShape::new(2, 3).unwrap(), true, &[5], NoiseSchedule::default(), 0.5, &mut rng)
            .unwrap();
        let back = TeacherModel::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(back, m);
    }
}
