//! Consistency trajectory planning at desk scale.
//!
//! A probability-flow teacher denoiser is trained on offline trajectory
//! windows, distilled into a consistency trajectory model that jumps between
//! arbitrary noise levels in one network call, and used as a planner:
//! sample candidate state windows conditioned on the current state, rank them
//! with a return critic, and recover the action with an inverse-dynamics
//! model.
//!
//! The math substrate in [`numerics`] and [`schedule`] is generic over
//! [`Scalar`] (`f32` or `f64`); the models and planner run on `f64` through
//! the aliases below.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod ctm;
pub mod data;
pub mod dynamics;
pub mod envs;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod planner;
pub mod scalar;
pub mod schedule;
pub mod teacher;
pub mod window;

pub use error::{CtpError, Result};
pub use scalar::Scalar;

/// Scalar used by every model in the crate.
pub type Real = f64;

pub type Tensor = numerics::Tensor<Real>;
pub type Tape<'a> = numerics::Tape<'a, Real>;
pub type Gradients = numerics::Gradients<Real>;
pub type Mlp = numerics::Mlp<Real>;
pub type Adam = numerics::Adam<Real>;
pub type NoiseSchedule = schedule::NoiseSchedule<Real>;
pub type SamplingGrid = schedule::SamplingGrid<Real>;
pub type TrainNoiseDist = schedule::TrainNoiseDist<Real>;

pub use numerics::{Var, ParamMode, Parameterized};
