//! Diffusion-time machinery: training discretization, inference grids,
//! training noise levels, and the skip/output coefficients.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CtpError, Result};
use crate::scalar::Scalar;

/// Number of features produced by [`time_features`].
pub const TIME_FEATURES: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule<S> {
    pub eps: S,
    pub t_max: S,
    pub rho: S,
    pub n_train: usize,
}

impl<S: Scalar> Default for NoiseSchedule<S> {
    fn default() -> Self {
        Self {
            eps: S::lit(0.002),
            t_max: S::lit(80.0),
            rho: S::lit(7.0),
            n_train: 18,
        }
    }
}

impl<S: Scalar> NoiseSchedule<S> {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > S::zero() && self.eps < self.t_max) {
            return Err(CtpError::contract(format!(
                "need 0 < eps < t_max, got eps={} t_max={}",
                self.eps, self.t_max
            )));
        }
        if !(self.rho > S::zero()) {
            return Err(CtpError::contract("rho must be positive"));
        }
        if self.n_train < 2 {
            return Err(CtpError::contract(format!(
                "n_train must be at least 2, got {}",
                self.n_train
            )));
        }
        Ok(())
    }

    pub fn karras_times(&self) -> Result<Vec<S>> {
        self.validate()?;
        Ok(karras_points(self.eps, self.t_max, self.rho, self.n_train))
    }
}

/// `n` points (ascending) warped by exponent `rho`; the endpoints are exact.
fn karras_points<S: Scalar>(eps: S, t_max: S, rho: S, n: usize) -> Vec<S> {
    let inv = S::one() / rho;
    let (lo, hi) = (eps.powf(inv), t_max.powf(inv));
    let last = S::lit((n - 1) as f64);
    let mut times: Vec<S> = (0..n)
        .map(|i| (lo + S::lit(i as f64) / last * (hi - lo)).powf(rho))
        .collect();
    times[0] = eps;
    times[n - 1] = t_max;
    times
}

/// Karras training discretization `t_1 < … < t_N`.
pub fn karras_times<S: Scalar>(schedule: &NoiseSchedule<S>) -> Result<Vec<S>> {
    schedule.karras_times()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    /// `t_n = (n/N)·t_max`, floored at `eps` for `n = 0`.
    #[default]
    Uniform,
    /// The training warp reused at inference.
    Karras,
}

/// Inference-time grid `t_0 = eps < t_1 < … < t_N = t_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid<S> {
    times: Vec<S>,
}

impl<S: Scalar> SamplingGrid<S> {
    pub fn new(kind: GridKind, eps: S, t_max: S, rho: S, n_steps: usize) -> Result<Self> {
        match kind {
            GridKind::Uniform => sampling_grid(t_max, eps, n_steps),
            GridKind::Karras => karras_grid(t_max, eps, rho, n_steps),
        }
    }

    pub fn from_times(times: Vec<S>) -> Result<Self> {
        if times.len() < 2 || times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(CtpError::contract("grid times must be strictly increasing"));
        }
        Ok(Self { times })
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[S] {
        &self.times
    }

    pub fn t_max(&self) -> S {
        self.times[self.times.len() - 1]
    }

    pub fn eps(&self) -> S {
        self.times[0]
    }

    /// `(from, to)` pairs from `t_max` down to `eps`.
    pub fn descending_pairs(&self) -> impl Iterator<Item = (S, S)> + '_ {
        self.times.windows(2).rev().map(|w| (w[1], w[0]))
    }
}

pub fn sampling_grid<S: Scalar>(t_max: S, eps: S, n_steps: usize) -> Result<SamplingGrid<S>> {
    if n_steps < 1 {
        return Err(CtpError::contract("sampling grid needs at least one step"));
    }
    if !(eps > S::zero() && eps < t_max) {
        return Err(CtpError::contract("need 0 < eps < t_max"));
    }
    let n = S::lit(n_steps as f64);
    let mut times: Vec<S> = (0..=n_steps)
        .map(|i| S::lit(i as f64) / n * t_max)
        .collect();
    times[0] = eps;
    times[n_steps] = t_max;
    if n_steps > 1 && times[1] <= eps {
        return Err(CtpError::contract("uniform grid step falls below eps"));
    }
    SamplingGrid::from_times(times)
}

pub fn karras_grid<S: Scalar>(t_max: S, eps: S, rho: S, n_steps: usize) -> Result<SamplingGrid<S>> {
    if n_steps < 1 {
        return Err(CtpError::contract("sampling grid needs at least one step"));
    }
    let schedule = NoiseSchedule {
        eps,
        t_max,
        rho,
        n_train: n_steps + 1,
    };
    SamplingGrid::from_times(schedule.karras_times()?)
}

/// Log-normal training noise levels, clamped to `[eps, t_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainNoiseDist<S> {
    pub log_mean: S,
    pub log_std: S,
    pub eps: S,
    pub t_max: S,
}

impl<S: Scalar> TrainNoiseDist<S> {
    pub fn new(log_mean: S, log_std: S, schedule: &NoiseSchedule<S>) -> Self {
        Self {
            log_mean,
            log_std,
            eps: schedule.eps,
            t_max: schedule.t_max,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> S {
        let n: f64 = StandardNormal.sample(rng);
        (self.log_mean + self.log_std * S::lit(n))
            .exp()
            .max(self.eps)
            .min(self.t_max)
    }
}

pub fn sample_sigma<S: Scalar, R: Rng + ?Sized>(dist: &TrainNoiseDist<S>, rng: &mut R) -> S {
    dist.sample(rng)
}

/// `(c_skip, c_out)` with `c_skip(eps) = 1` and `c_out(eps) = 0` exactly.
pub fn skip_coeffs<S: Scalar>(t: S, sigma_data: S, eps: S) -> Result<(S, S)> {
    if !(t >= eps) {
        return Err(CtpError::contract(format!("time {t} below eps {eps}")));
    }
    let sd2 = sigma_data * sigma_data;
    let dt = t - eps;
    let c_skip = sd2 / (dt * dt + sd2);
    let c_out = sigma_data * dt / (sd2 + t * t).sqrt();
    Ok((c_skip, c_out))
}

/// Input scaling applied before the backbone so its inputs stay O(1).
pub fn input_scale<S: Scalar>(t: S, sigma_data: S) -> S {
    S::one() / (sigma_data * sigma_data + t * t).sqrt()
}

/// Sinusoidal features of log-time; times below `eps` are floored to `eps`.
pub fn time_features<S: Scalar>(t: S, eps: S) -> [S; TIME_FEATURES] {
    let c = t.max(eps).ln() / S::lit(4.0);
    let two = S::lit(2.0);
    let four = S::lit(4.0);
    [
        c,
        c.sin(),
        c.cos(),
        (two * c).sin(),
        (two * c).cos(),
        (four * c).sin(),
        (four * c).cos(),
    ]
}
