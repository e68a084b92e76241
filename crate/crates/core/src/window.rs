//! Plan windows and inpainting of the conditioning state.
//!
//! A window holds `horizon` normalized states, each `state_dim` wide, flattened
//! row-major into one vector: state `j` occupies entries
//! `j*state_dim..(j+1)*state_dim`. Batches of windows are `[batch, dim]`
//! tensors.

use serde::{Deserialize, Serialize};

use crate::error::{CtpError, Result};
use crate::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowShape {
    pub horizon: usize,
    pub state_dim: usize,
}

impl WindowShape {
    pub fn new(horizon: usize, state_dim: usize) -> Result<Self> {
        if horizon == 0 || state_dim == 0 {
            return Err(CtpError::contract("window horizon and state_dim must be positive"));
        }
        Ok(Self { horizon, state_dim })
    }

    /// Flattened length `horizon * state_dim`.
    pub fn dim(&self) -> usize {
        self.horizon * self.state_dim
    }
}

/// One window of normalized states.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanWindow {
    shape: WindowShape,
    data: Vec<f64>,
}

impl PlanWindow {
    pub fn new(shape: WindowShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.dim() {
            return Err(CtpError::dim("plan window", shape.dim(), data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> WindowShape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// State at column `j` (environment step `k + j*M`).
    pub fn state(&self, j: usize) -> &[f64] {
        let d = self.shape.state_dim;
        &self.data[j * d..(j + 1) * d]
    }

    pub fn condition(&self) -> &[f64] {
        self.state(0)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Splits row `r` of a batch into a window.
    pub fn from_batch_row(shape: WindowShape, batch: &Tensor, r: usize) -> Result<Self> {
        Self::new(shape, batch.row(r).to_vec())
    }
}

/// Overwrites the leading `cond.cols()` entries of every row of `x`.
pub fn clamp_condition(x: &mut Tensor, cond: &Tensor) -> Result<()> {
    if cond.rows() != x.rows() || cond.cols() > x.cols() {
        return Err(CtpError::dim(
            "conditioning",
            format!("[{}, <= {}]", x.rows(), x.cols()),
            format!("{:?}", cond.shape()),
        ));
    }
    let w = cond.cols();
    for r in 0..x.rows() {
        x.row_mut(r)[..w].copy_from_slice(cond.row(r));
    }
    Ok(())
}

/// Tape version of [`clamp_condition`]: `x·mask + pad(cond)`, so the clamped
/// entries carry no gradient back into `x`.
pub fn clamp_condition_var(tape: &mut Tape<'_>, x: Var, cond: &Tensor) -> Result<Var> {
    let (rows, cols) = (tape.value(x).rows(), tape.value(x).cols());
    let mut pad = Tensor::zeros(&[rows, cols]);
    clamp_condition(&mut pad, cond)?;
    let mut mask = Tensor::filled(&[rows, cols], 1.0);
    clamp_condition(&mut mask, &Tensor::zeros(&[rows, cond.cols()]))?;
    let mask = tape.constant(mask);
    let pad = tape.constant(pad);
    let kept = tape.mul(x, mask)?;
    tape.add(kept, pad)
}

/// Same conditioning state repeated `rows` times.
pub fn repeat_condition(state: &[f64], rows: usize) -> Tensor {
    let data = (0..rows).flat_map(|_| state.iter().copied()).collect();
    Tensor::matrix(rows, state.len(), data).expect("sized")
}
