//! Dense tensors, reverse-mode autodiff, MLPs, Adam and EMA tracking.

pub mod checkpoint;
pub mod mlp;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use checkpoint::{restore_mlp, store_mlp, Checkpoint, CHECKPOINT_VERSION};
pub use mlp::{Activation, BoundMlp, Linear, Mlp, ParamMode, Parameterized};
pub use optim::{ema_update, Adam};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{matmul, Tensor};
