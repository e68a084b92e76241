//! Inverse dynamics `h(s_k, s_{k+M}) → a_k` and the window-return critic.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Normalizer;
use crate::error::{CtpError, Result};
use crate::numerics::{restore_mlp, store_mlp, Activation, BoundMlp, Checkpoint};
use crate::teacher::{sample_batch, LossRow};
use crate::{Adam, Mlp, ParamMode, Tape, Tensor, Var};

/// Discounted return of every step, truncated at the end of the episode.
pub fn compute_returns(rewards: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(CtpError::contract(format!("discount {gamma} outside [0, 1)")));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (k, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[k] = acc;
    }
    Ok(out)
}

/// A discounted return together with the step it starts from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnLabel {
    pub k: usize,
    pub value: f64,
}

pub fn return_labels(rewards: &[f64], gamma: f64) -> Result<Vec<ReturnLabel>> {
    Ok(compute_returns(rewards, gamma)?
        .into_iter()
        .enumerate()
        .map(|(k, value)| ReturnLabel { k, value })
        .collect())
}

/// Optimisation settings shared by the two auxiliary regressors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            steps: 3000,
            batch_size: 128,
            lr: 3e-4,
            seed: 0,
        }
    }
}

impl RegressionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || self.hidden.contains(&0) {
            return Err(CtpError::Config(
                "regression needs batch_size > 0, lr > 0 and positive widths".into(),
            ));
        }
        Ok(())
    }
}

/// `mean_b ‖(affine ∘ net)(x) − y‖²` with output map `v·scale + shift`.
fn regression_loss_var(
    tape: &mut Tape<'_>,
    net: &BoundMlp,
    x: &Tensor,
    y: &Tensor,
    scale: f64,
    shift: f64,
) -> Result<Var> {
    if x.rows() == 0 {
        return Err(CtpError::contract("regression on an empty batch"));
    }
    let xv = tape.constant(x.clone());
    let out = net.forward(tape, xv)?;
    let out = tape.scale(out, scale);
    let target = tape.constant(y.map(|v| v - shift));
    let diff = tape.sub(out, target)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / x.rows() as f64))
}

struct Fit {
    trace: Vec<LossRow>,
}

fn fit(net: &mut Mlp, x: &Tensor, y: &Tensor, scale: f64, shift: f64, cfg: &RegressionConfig, rng: &mut ChaCha8Rng) -> Result<Fit> {
    let xy = concat(x, y)?;
    let mut adam = Adam::new(cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps);
    let start = Instant::now();
    for step in 0..cfg.steps {
        let batch = sample_batch(&xy, cfg.batch_size, rng);
        let (bx, by) = split(&batch, x.cols());
        let (loss, grads) = {
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape, ParamMode::Trainable);
            let l = regression_loss_var(&mut tape, &bound, &bx, &by, scale, shift)?;
            let value = tape.value(l).item()?;
            if !value.is_finite() {
                return Err(CtpError::Divergence {
                    step,
                    detail: format!("regression loss {value}"),
                });
            }
            (value, tape.backward(l)?.wrt_all(bound.leaves()))
        };
        adam.step(net, &grads)?;
        trace.push(LossRow {
            step,
            loss,
            wallclock_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(Fit { trace })
}

fn concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows() != b.rows() {
        return Err(CtpError::dim("paired rows", a.rows(), b.rows()));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for r in 0..a.rows() {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    Tensor::matrix(a.rows(), a.cols() + b.cols(), data)
}

fn split(t: &Tensor, at: usize) -> (Tensor, Tensor) {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for r in 0..t.rows() {
        a.extend_from_slice(&t.row(r)[..at]);
        b.extend_from_slice(&t.row(r)[at..]);
    }
    let rows = t.rows();
    (
        Tensor::matrix(rows, at, a).expect("sized"),
        Tensor::matrix(rows, t.cols() - at, b).expect("sized"),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct InverseDynamics {
    pub net: Mlp,
    pub state_dim: usize,
    pub action_dim: usize,
    pub stride: usize,
}

#[derive(Serialize, Deserialize)]
struct InvDynMeta {
    state_dim: usize,
    action_dim: usize,
    stride: usize,
}

impl InverseDynamics {
    pub fn new(state_dim: usize, action_dim: usize, stride: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut sizes = vec![2 * state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        Ok(Self {
            net: Mlp::new(&sizes, Activation::Silu, rng)?,
            state_dim,
            action_dim,
            stride,
        })
    }

    /// Normalized actions for rows of `[s_k, s_{k+M}]`.
    pub fn predict(&self, pairs: &Tensor) -> Result<Tensor> {
        if pairs.cols() != 2 * self.state_dim {
            return Err(CtpError::dim("inverse dynamics input", 2 * self.state_dim, pairs.cols()));
        }
        self.net.forward(pairs)
    }

    pub fn loss_var(&self, tape: &mut Tape<'_>, net: &BoundMlp, pairs: &Tensor, actions: &Tensor) -> Result<Var> {
        regression_loss_var(tape, net, pairs, actions, 1.0, 0.0)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = InvDynMeta {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            stride: self.stride,
        };
        let mut ck = Checkpoint::new("invdyn", serde_json::to_value(meta).expect("meta"));
        store_mlp(&mut ck, "net", &self.net);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("invdyn")?;
        let meta: InvDynMeta =
            serde_json::from_value(ck.meta.clone()).map_err(|e| CtpError::contract(format!("invdyn meta: {e}")))?;
        let net: Mlp = restore_mlp(ck, "net")?;
        if net.in_dim() != 2 * meta.state_dim || net.out_dim() != meta.action_dim {
            return Err(CtpError::contract("invdyn network does not match its dimensions"));
        }
        Ok(Self {
            net,
            state_dim: meta.state_dim,
            action_dim: meta.action_dim,
            stride: meta.stride,
        })
    }
}

/// `mean_b ‖a_k − h(s_k, s_{k+M})‖²`.
pub fn invdyn_loss(model: &InverseDynamics, pairs: &Tensor, actions: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let net = model.net.bind(&mut tape, ParamMode::Frozen);
    let l = model.loss_var(&mut tape, &net, pairs, actions)?;
    tape.value(l).item()
}

#[derive(Clone, Debug)]
pub struct AuxRun<M> {
    pub model: M,
    pub trace: Vec<LossRow>,
    pub train_initial: f64,
    pub train_final: f64,
    pub heldout_mse: Option<f64>,
}

pub fn train_invdyn(
    pairs: &Tensor,
    actions: &Tensor,
    heldout: Option<(&Tensor, &Tensor)>,
    stride: usize,
    cfg: &RegressionConfig,
) -> Result<AuxRun<InverseDynamics>> {
    cfg.validate()?;
    if pairs.rows() == 0 {
        return Err(CtpError::contract("no inverse-dynamics pairs"));
    }
    if !pairs.cols().is_multiple_of(2) {
        return Err(CtpError::contract("inverse-dynamics pairs must have even width"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = InverseDynamics::new(pairs.cols() / 2, actions.cols(), stride, &cfg.hidden, &mut rng)?;
    let train_initial = invdyn_loss(&model, pairs, actions)?;
    let f = fit(&mut model.net, pairs, actions, 1.0, 0.0, cfg, &mut rng)?;
    let train_final = invdyn_loss(&model, pairs, actions)?;
    let heldout_mse = heldout
        .filter(|(p, _)| p.rows() > 0)
        .map(|(p, a)| invdyn_loss(&model, p, a))
        .transpose()?;
    Ok(AuxRun {
        model,
        trace: f.trace,
        train_initial,
        train_final,
        heldout_mse,
    })
}

/// Action in environment units for normalized states `s` and `s_next`.
pub fn extract_action(model: &InverseDynamics, normalizer: &Normalizer, s: &[f64], s_next: &[f64]) -> Result<Vec<f64>> {
    let mut row = s.to_vec();
    row.extend_from_slice(s_next);
    let pair = Tensor::matrix(1, row.len(), row)?;
    let a = model.predict(&pair)?;
    Ok(normalizer.denormalize_action(a.row(0)))
}

/// `V(x) = shift + scale·net(x)` over flattened normalized windows.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub net: Mlp,
    pub gamma: f64,
    /// Target standardization, so the network regresses O(1) values.
    pub shift: f64,
    pub scale: f64,
}

#[derive(Serialize, Deserialize)]
struct CriticMeta {
    gamma: f64,
    shift: f64,
    scale: f64,
}

impl Critic {
    pub fn new(input_dim: usize, hidden: &[usize], gamma: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Ok(Self {
            net: Mlp::new(&sizes, Activation::Silu, rng)?,
            gamma,
            shift: 0.0,
            scale: 1.0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn values(&self, windows: &Tensor) -> Result<Vec<f64>> {
        if windows.cols() != self.input_dim() {
            return Err(CtpError::dim("critic input", self.input_dim(), windows.cols()));
        }
        Ok(self
            .net
            .forward(windows)?
            .data()
            .iter()
            .map(|v| self.shift + self.scale * v)
            .collect())
    }

    /// `mean_b (V(x_b) − R_b)²` on the tape.
    pub fn loss_var(&self, tape: &mut Tape<'_>, net: &BoundMlp, windows: &Tensor, returns: &[f64]) -> Result<Var> {
        let y = Tensor::matrix(returns.len(), 1, returns.to_vec())?;
        regression_loss_var(tape, net, windows, &y, self.scale, self.shift)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = CriticMeta {
            gamma: self.gamma,
            shift: self.shift,
            scale: self.scale,
        };
        let mut ck = Checkpoint::new("critic", serde_json::to_value(meta).expect("meta"));
        store_mlp(&mut ck, "net", &self.net);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("critic")?;
        let meta: CriticMeta =
            serde_json::from_value(ck.meta.clone()).map_err(|e| CtpError::contract(format!("critic meta: {e}")))?;
        let net: Mlp = restore_mlp(ck, "net")?;
        if net.out_dim() != 1 {
            return Err(CtpError::contract("critic must have a scalar output"));
        }
        Ok(Self {
            net,
            gamma: meta.gamma,
            shift: meta.shift,
            scale: meta.scale,
        })
    }
}

pub fn critic_loss(critic: &Critic, windows: &Tensor, returns: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let net = critic.net.bind(&mut tape, ParamMode::Frozen);
    let l = critic.loss_var(&mut tape, &net, windows, returns)?;
    tape.value(l).item()
}

pub fn train_critic(
    windows: &Tensor,
    returns: &[f64],
    heldout: Option<(&Tensor, &[f64])>,
    gamma: f64,
    cfg: &RegressionConfig,
) -> Result<AuxRun<Critic>> {
    cfg.validate()?;
    if windows.rows() == 0 || windows.rows() != returns.len() {
        return Err(CtpError::dim("critic labels", windows.rows(), returns.len()));
    }
    if returns.iter().any(|r| !r.is_finite()) {
        return Err(CtpError::NonFinite("return labels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut critic = Critic::new(windows.cols(), &cfg.hidden, gamma, &mut rng)?;
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    critic.shift = mean;
    critic.scale = if std > 1e-8 { std } else { 1.0 };
    let train_initial = critic_loss(&critic, windows, returns)?;
    let y = Tensor::matrix(returns.len(), 1, returns.to_vec())?;
    let f = fit(&mut critic.net, windows, &y, critic.scale, critic.shift, cfg, &mut rng)?;
    let train_final = critic_loss(&critic, windows, returns)?;
    let heldout_mse = heldout
        .filter(|(w, _)| w.rows() > 0)
        .map(|(w, r)| critic_loss(&critic, w, r))
        .transpose()?;
    Ok(AuxRun {
        model: critic,
        trace: f.trace,
        train_initial,
        train_final,
        heldout_mse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn returns_examples() {
        assert_eq!(compute_returns(&[1.0, 1.0, 1.0], 0.5).unwrap(), vec![1.75, 1.5, 1.0]);
        assert_eq!(compute_returns(&[0.3, -2.0], 0.0).unwrap(), vec![0.3, -2.0]);
        assert!(compute_returns(&[1.0], 1.0).is_err());
        assert!(compute_returns(&[], 0.9).unwrap().is_empty());
    }

    #[test]
    fn labels_carry_start_index() {
        let l = return_labels(&[0.0, 2.0], 0.5).unwrap();
        assert_eq!(l[0], ReturnLabel { k: 0, value: 1.0 });
        assert_eq!(l[1].k, 1);
    }

    #[test]
    fn zero_invdyn_loss_is_mean_action_norm() {
        let m = InverseDynamics {
            net: Mlp::zeros(&[4, 3, 2], Activation::Silu).unwrap(),
            state_dim: 2,
            action_dim: 2,
            stride: 1,
        };
        let pairs = Tensor::zeros(&[2, 4]);
        let acts = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.6, 0.8]).unwrap();
        assert!((invdyn_loss(&m, &pairs, &acts).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_targets_are_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::matrix(64, 3, (0..192).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect()).unwrap();
        let cfg = RegressionConfig {
            steps: 400,
            lr: 1e-2,
            ..Default::default()
        };
        let run = train_critic(&x, &[2.5; 64], None, 0.9, &cfg).unwrap();
        assert!(run.train_final < 1e-4, "{}", run.train_final);
        let acts = Tensor::filled(&[64, 1], 0.3);
        let pairs = Tensor::matrix(64, 2, x.data()[..128].to_vec()).unwrap();
        let run = train_invdyn(&pairs, &acts, None, 1, &cfg).unwrap();
        assert!(run.train_final < 1e-6, "{}", run.train_final);
    }

    #[test]
    fn checkpoints_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = InverseDynamics::new(2, 1, 2, &[4], &mut rng).unwrap();
        assert_eq!(InverseDynamics::from_checkpoint(&m.to_checkpoint()).unwrap(), m);
        let mut c = Critic::new(6, &[4], 0.99, &mut rng).unwrap();
        c.shift = 0.25;
        c.scale = 3.0;
        assert_eq!(Critic::from_checkpoint(&c.to_checkpoint()).unwrap(), c);
    }
}
