//! Offline trajectories: collection, normalization, windowing and the
//! on-disk dataset format.
//!
//! File layout (integers little-endian):
//!
//! ```text
//! magic       8 bytes  "CTPDATA\0"
//! version     u32      DATASET_VERSION
//! header_len  u64
//! header      JSON     DatasetHeader (env, dims, stride, horizon, gamma, normalizer, split)
//! per trajectory:
//!   rows      u64
//!   terminal  u8
//!   values    rows·(d_s + d_a + 1) f64, row-major (state, action, reward)
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::compute_returns;
use crate::envs::{env_step, EnvSpec, PolicyKind, ScriptedPolicy};
use crate::error::{CtpError, Result};
use crate::window::WindowShape;
use crate::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"CTPDATA\0";
pub const DATASET_VERSION: u32 = 1;

/// One episode. Row `i` holds `s_i`, the action taken there and its reward;
/// the last row is the state reached after the final action, with zero
/// action and reward.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    /// Ended by reaching the goal rather than by the step budget.
    pub terminal: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Undiscounted episode return.
    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    fn validate(&self, d_s: usize, d_a: usize) -> Result<()> {
        let n = self.states.len();
        if self.actions.len() != n || self.rewards.len() != n {
            return Err(CtpError::contract("trajectory fields have inconsistent lengths"));
        }
        if self.states.iter().any(|s| s.len() != d_s) || self.actions.iter().any(|a| a.len() != d_a) {
            return Err(CtpError::contract("trajectory row has the wrong width"));
        }
        Ok(())
    }
}

/// Per-dimension affine map of `[min, max]` onto `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub state_min: Vec<f64>,
    pub state_max: Vec<f64>,
    pub action_min: Vec<f64>,
    pub action_max: Vec<f64>,
}

fn fit_range(rows: &[&Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for r in rows {
        for (d, &v) in r.iter().enumerate() {
            lo[d] = lo[d].min(v);
            hi[d] = hi[d].max(v);
        }
    }
    for d in 0..dim {
        if !lo[d].is_finite() {
            lo[d] = 0.0;
            hi[d] = 0.0;
        }
    }
    (lo, hi)
}

fn to_unit(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        2.0 * (v - lo) / (hi - lo) - 1.0
    } else {
        0.0
    }
}

fn from_unit(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        lo + (v + 1.0) * 0.5 * (hi - lo)
    } else {
        lo
    }
}

impl Normalizer {
    pub fn fit(trajectories: &[Trajectory], d_s: usize, d_a: usize) -> Self {
        let states: Vec<&Vec<f64>> = trajectories.iter().flat_map(|t| &t.states).collect();
        // The padding row after the last step carries no real action.
        let actions: Vec<&Vec<f64>> = trajectories
            .iter()
            .flat_map(|t| &t.actions[..t.actions.len().saturating_sub(1)])
            .collect();
        let (state_min, state_max) = fit_range(&states, d_s);
        let (action_min, action_max) = fit_range(&actions, d_a);
        Self {
            state_min,
            state_max,
            action_min,
            action_max,
        }
    }

    pub fn normalize_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .enumerate()
            .map(|(d, &v)| to_unit(v, self.state_min[d], self.state_max[d]))
            .collect()
    }

    /// Normalizes and clips to `[-1, 1]`, returning how many entries were clipped.
    pub fn normalize_state_clipped(&self, s: &[f64]) -> (Vec<f64>, usize) {
        let mut clipped = 0;
        let out = self
            .normalize_state(s)
            .into_iter()
            .map(|v| {
                if v.abs() > 1.0 {
                    clipped += 1;
                }
                v.clamp(-1.0, 1.0)
            })
            .collect();
        (out, clipped)
    }

    pub fn denormalize_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .enumerate()
            .map(|(d, &v)| from_unit(v, self.state_min[d], self.state_max[d]))
            .collect()
    }

    pub fn normalize_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .enumerate()
            .map(|(d, &v)| to_unit(v, self.action_min[d], self.action_max[d]))
            .collect()
    }

    pub fn denormalize_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .enumerate()
            .map(|(d, &v)| from_unit(v, self.action_min[d], self.action_max[d]))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub env: EnvSpec,
    pub policy: PolicyKind,
    pub seed: u64,
    pub stride: usize,
    pub horizon: usize,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub normalizer: Normalizer,
    pub trajectories: Vec<Trajectory>,
    /// Trajectories `[0, n_train)` form the training split, the rest are held out.
    pub n_train: usize,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    meta: DatasetMeta,
    normalizer: Normalizer,
    n_train: usize,
    n_trajectories: usize,
    state_dim: usize,
    action_dim: usize,
}

/// Collection options beyond the environment itself.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectConfig {
    pub policy: PolicyKind,
    pub n_episodes: usize,
    pub seed: u64,
    pub expert_fraction: f64,
    pub action_noise: f64,
    pub heldout_fraction: f64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            policy: PolicyKind::Mixture,
            n_episodes: 1000,
            seed: 0,
            expert_fraction: 0.5,
            action_noise: 0.1,
            heldout_fraction: 0.1,
        }
    }
}

/// Generator for episode `index` of a run seeded with `seed`.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Runs one episode of a scripted policy.
pub fn run_scripted_episode(
    spec: &EnvSpec,
    policy: PolicyKind,
    expert_fraction: f64,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let mut pol = ScriptedPolicy::begin(spec, policy, expert_fraction, noise, rng);
    let mut s = spec.reset(rng);
    let mut traj = Trajectory {
        states: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        terminal: false,
    };
    for _ in 0..spec.max_steps {
        let a = pol.act(&s, rng);
        let o = env_step(spec, &s, &a)?;
        traj.states.push(s);
        traj.actions.push(a);
        traj.rewards.push(o.reward);
        s = o.state;
        if o.done {
            traj.terminal = true;
            break;
        }
    }
    traj.states.push(s);
    traj.actions.push(vec![0.0; spec.action_dim]);
    traj.rewards.push(0.0);
    Ok(traj)
}

pub fn collect_dataset(spec: &EnvSpec, cfg: &CollectConfig, horizon: usize, stride: usize, gamma: f64) -> Result<Dataset> {
    spec.validate()?;
    if !(0.0..1.0).contains(&cfg.heldout_fraction) || !(0.0..=1.0).contains(&cfg.expert_fraction) {
        return Err(CtpError::Config("heldout_fraction must be in [0, 1) and expert_fraction in [0, 1]".into()));
    }
    if !(cfg.action_noise >= 0.0) {
        return Err(CtpError::Config("action_noise must be non-negative".into()));
    }
    let trajectories = (0..cfg.n_episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = episode_rng(cfg.seed, i as u64);
            run_scripted_episode(spec, cfg.policy, cfg.expert_fraction, cfg.action_noise, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let n_held = (cfg.n_episodes as f64 * cfg.heldout_fraction).round() as usize;
    let n_train = cfg.n_episodes - n_held;
    let normalizer = Normalizer::fit(&trajectories[..n_train], spec.state_dim, spec.action_dim);
    Ok(Dataset {
        meta: DatasetMeta {
            env: spec.clone(),
            policy: cfg.policy,
            seed: cfg.seed,
            stride,
            horizon,
            gamma,
        },
        normalizer,
        trajectories,
        n_train,
    })
}

impl Dataset {
    pub fn train(&self) -> &[Trajectory] {
        &self.trajectories[..self.n_train]
    }

    pub fn heldout(&self) -> &[Trajectory] {
        &self.trajectories[self.n_train..]
    }

    pub fn window_shape(&self) -> Result<WindowShape> {
        WindowShape::new(self.meta.horizon, self.meta.env.state_dim)
    }

    /// Fraction of episodes that reached the goal.
    pub fn success_rate(&self) -> f64 {
        if self.trajectories.is_empty() {
            return 0.0;
        }
        self.trajectories.iter().filter(|t| t.terminal).count() as f64 / self.trajectories.len() as f64
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (d_s, d_a) = (self.meta.env.state_dim, self.meta.env.action_dim);
        for t in &self.trajectories {
            t.validate(d_s, d_a)?;
        }
        let header = DatasetHeader {
            meta: self.meta.clone(),
            normalizer: self.normalizer.clone(),
            n_train: self.n_train,
            n_trajectories: self.trajectories.len(),
            state_dim: d_s,
            action_dim: d_a,
        };
        let json = serde_json::to_vec(&header).map_err(|e| CtpError::contract(format!("dataset header: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.trajectories {
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
            out.push(t.terminal as u8);
            for i in 0..t.len() {
                for v in t.states[i].iter().chain(&t.actions[i]).chain(std::iter::once(&t.rewards[i])) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8], origin: &Path) -> Result<Self> {
        let bad = |detail: String| CtpError::Format {
            path: origin.to_path_buf(),
            detail,
        };
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= buf.len()).ok_or_else(|| bad("truncated".into()))?;
            let s = &buf[pos..end];
            pos = end;
            Ok(s)
        };
        if take(8)? != DATASET_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != DATASET_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let header: DatasetHeader =
            serde_json::from_slice(take(hlen)?).map_err(|e| bad(format!("header: {e}")))?;
        let (d_s, d_a) = (header.state_dim, header.action_dim);
        if d_s != header.meta.env.state_dim || d_a != header.meta.env.action_dim {
            return Err(bad("header dimensions disagree with env".into()));
        }
        let width = d_s + d_a + 1;
        let mut trajectories = Vec::with_capacity(header.n_trajectories);
        for _ in 0..header.n_trajectories {
            let rows = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
            let terminal = match take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(bad(format!("bad terminal flag {b}"))),
            };
            let n = rows.checked_mul(width * 8).ok_or_else(|| bad("block too large".into()))?;
            let vals: Vec<f64> = take(n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let mut t = Trajectory {
                states: Vec::with_capacity(rows),
                actions: Vec::with_capacity(rows),
                rewards: Vec::with_capacity(rows),
                terminal,
            };
            for row in vals.chunks_exact(width) {
                t.states.push(row[..d_s].to_vec());
                t.actions.push(row[d_s..d_s + d_a].to_vec());
                t.rewards.push(row[d_s + d_a]);
            }
            trajectories.push(t);
        }
        if pos != buf.len() {
            return Err(bad("trailing bytes".into()));
        }
        if header.n_train > trajectories.len() {
            return Err(bad("training split larger than the dataset".into()));
        }
        Ok(Self {
            meta: header.meta,
            normalizer: header.normalizer,
            trajectories,
            n_train: header.n_train,
        })
    }

    /// Writes the binary file and a JSON sidecar (`<path>` with extension `json`).
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        let sidecar = serde_json::json!({
            "format_version": DATASET_VERSION,
            "meta": self.meta,
            "normalizer": self.normalizer,
            "n_trajectories": self.trajectories.len(),
            "n_train": self.n_train,
            "success_rate": self.success_rate(),
            "mean_return": self.trajectories.iter().map(Trajectory::episode_return).sum::<f64>()
                / self.trajectories.len().max(1) as f64,
        });
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| CtpError::contract(e.to_string()))?;
        fs::write(path.with_extension("json"), text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(CtpError::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?, path)
    }
}

/// Windows, return labels and inverse-dynamics triples from a set of episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub shape: WindowShape,
    /// `[n, horizon·state_dim]`, normalized.
    pub windows: Tensor,
    /// Discounted return from each window's first step, in reward units.
    pub labels: Vec<f64>,
    /// `(trajectory, start step)` of each window.
    pub origins: Vec<(usize, usize)>,
    /// `[m, 2·state_dim]`: normalized `(s_k, s_{k+M})`.
    pub pairs: Tensor,
    /// `[m, action_dim]`: normalized `a_k`.
    pub actions: Tensor,
    /// Normalized entries clipped into `[-1, 1]`.
    pub clipped: usize,
    /// Inverse-dynamics pairs skipped because the stride ran past the episode.
    pub skipped_pairs: usize,
}

/// Slices every episode into stride-`M` windows of `H` states.
///
/// Windows that run past the end of a step-limited episode are dropped. For an
/// episode that ended in the goal the terminal state is absorbing, so windows
/// may run past its end and repeat that state.
pub fn make_windows(
    trajectories: &[Trajectory],
    normalizer: &Normalizer,
    horizon: usize,
    stride: usize,
    gamma: f64,
) -> Result<WindowSet> {
    if horizon == 0 || stride == 0 {
        return Err(CtpError::contract("horizon and stride must be positive"));
    }
    let d_s = normalizer.state_min.len();
    let d_a = normalizer.action_min.len();
    let shape = WindowShape::new(horizon, d_s)?;
    let span = (horizon - 1) * stride;
    let (mut win, mut labels, mut origins) = (Vec::new(), Vec::new(), Vec::new());
    let (mut pairs, mut actions) = (Vec::new(), Vec::new());
    let (mut clipped, mut skipped_pairs) = (0, 0);
    for (ti, t) in trajectories.iter().enumerate() {
        t.validate(d_s, d_a)?;
        if t.is_empty() {
            continue;
        }
        let returns = compute_returns(&t.rewards, gamma)?;
        let norm: Vec<Vec<f64>> = t
            .states
            .iter()
            .map(|s| {
                let (v, c) = normalizer.normalize_state_clipped(s);
                clipped += c;
                v
            })
            .collect();
        let last = t.len() - 1;
        let starts = if t.terminal { last } else { last.saturating_sub(span) };
        if t.terminal || span <= last {
            for k in 0..=starts {
                for j in 0..horizon {
                    win.extend_from_slice(&norm[(k + j * stride).min(last)]);
                }
                labels.push(returns[k]);
                origins.push((ti, k));
            }
        }
        // Rows 0..last carry real actions.
        for k in 0..last {
            if k + stride > last {
                skipped_pairs += 1;
                continue;
            }
            pairs.extend_from_slice(&norm[k]);
            pairs.extend_from_slice(&norm[k + stride]);
            let a = normalizer.normalize_action(&t.actions[k]);
            actions.extend(a.iter().map(|v| {
                if v.abs() > 1.0 {
                    clipped += 1;
                }
                v.clamp(-1.0, 1.0)
            }));
        }
    }
    if labels.is_empty() {
        return Err(CtpError::contract("no valid windows in the dataset"));
    }
    let n = labels.len();
    let m = actions.len() / d_a.max(1);
    Ok(WindowSet {
        shape,
        windows: Tensor::matrix(n, shape.dim(), win)?,
        labels,
        origins,
        pairs: Tensor::matrix(m, 2 * d_s, pairs)?,
        actions: Tensor::matrix(m, d_a, actions)?,
        clipped,
        skipped_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_traj(n: usize, terminal: bool) -> Trajectory {
        Trajectory {
            states: (0..n).map(|i| vec![i as f64, -(i as f64)]).collect(),
            actions: (0..n).map(|i| vec![(i % 3) as f64 - 1.0]).collect(),
            rewards: (0..n).map(|i| if i + 2 == n { 1.0 } else { 0.0 }).collect(),
            terminal,
        }
    }

    fn norm_for(t: &[Trajectory]) -> Normalizer {
        Normalizer::fit(t, 2, 1)
    }

    #[test]
    fn window_counts() {
        let t = vec![toy_traj(5, false)];
        let n = norm_for(&t);
        let w = make_windows(&t, &n, 4, 1, 0.9).unwrap();
        assert_eq!(w.origins, vec![(0, 0), (0, 1)]);
        let w = make_windows(&t, &n, 2, 4, 0.9).unwrap();
        assert_eq!(w.origins, vec![(0, 0)]);
        assert_eq!(w.windows.row(0), &[-1.0, 1.0, 1.0, -1.0]);
        assert!(make_windows(&t, &n, 6, 1, 0.9).is_err());
        assert!(w.windows.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn terminal_windows_repeat_final_state() {
        let t = vec![toy_traj(3, true)];
        let n = norm_for(&t);
        let w = make_windows(&t, &n, 2, 2, 0.5).unwrap();
        assert_eq!(w.origins.len(), 3);
        assert_eq!(w.windows.row(2), &[1.0, -1.0, 1.0, -1.0]);
        assert_eq!(w.labels, vec![0.5, 1.0, 0.0]);
        assert_eq!(w.skipped_pairs, 1);
    }

    #[test]
    fn normalizer_round_trip_and_constant_dims() {
        let n = Normalizer {
            state_min: vec![-2.0, 3.0],
            state_max: vec![6.0, 3.0],
            action_min: vec![0.0],
            action_max: vec![1.0],
        };
        let s = [1.3, 3.0];
        let u = n.normalize_state(&s);
        assert_eq!(u[1], 0.0);
        let back = n.denormalize_state(&u);
        assert!((back[0] - 1.3).abs() < 1e-12 && back[1] == 3.0);
        let (c, k) = n.normalize_state_clipped(&[10.0, 3.0]);
        assert_eq!((c[0], k), (1.0, 1));
    }

    #[test]
    fn byte_round_trip() {
        let spec = EnvSpec::maze();
        let cfg = CollectConfig {
            n_episodes: 6,
            ..Default::default()
        };
        let d = collect_dataset(&spec, &cfg, 8, 2, 0.99).unwrap();
        let bytes = d.to_bytes().unwrap();
        let back = Dataset::from_bytes(&bytes, Path::new("m")).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 3], Path::new("m")).is_err());
        assert_eq!(collect_dataset(&spec, &cfg, 8, 2, 0.99).unwrap(), d);
    }
}
