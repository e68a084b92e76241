use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CtpError, Result};
use crate::numerics::tape::{add_row_inplace, silu, Tape, Var};
use crate::numerics::tensor::{matmul, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Identity,
}

/// Anything owning an ordered list of named trainable tensors.
pub trait Parameterized<S: Scalar> {
    fn param_names(&self) -> Vec<String>;
    fn params(&self) -> Vec<&Tensor<S>>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<S>>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<S> {
    /// `[in, out]`, applied as `x · weight`.
    pub weight: Tensor<S>,
    /// `[1, out]`
    pub bias: Tensor<S>,
}

/// Fully connected network; `activation` is applied after every layer
/// except the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<S> {
    layers: Vec<Linear<S>>,
    activation: Activation,
}

/// How a network's weights enter a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamMode {
    /// Leaves that receive gradients.
    Trainable,
    /// Constant leaves.
    Frozen,
    /// Gradient-tracking leaves routed through a stop-gradient, so they show
    /// up in [`crate::Gradients`] with an exact zero.
    StopGradient,
}

/// Handles to a network's weights on a particular tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
    leaves: Vec<Var>,
    activation: Activation,
}

impl BoundMlp {
    /// Leaf variables in [`Parameterized::params`] order.
    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<Var> {
        let in_dim = tape.value(self.layers[0].0).rows();
        if tape.value(x).cols() != in_dim {
            return Err(CtpError::dim("mlp input", in_dim, tape.value(x).cols()));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if i != last && self.activation == Activation::Silu {
                h = tape.silu(h);
            }
        }
        Ok(h)
    }
}

impl<S: Scalar> Mlp<S> {
    /// Random initialization: uniform weights with fan-in scaling, zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        Self::build(sizes, activation, |fan_in, _| {
            let bound = (3.0 / fan_in as f64).sqrt();
            S::lit(rng.random_range(-bound..bound))
        })
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        Self::build(sizes, activation, |_, _| S::zero())
    }

    fn build(
        sizes: &[usize],
        activation: Activation,
        mut init: impl FnMut(usize, usize) -> S,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(CtpError::contract(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (i, o) = (w[0], w[1]);
                let weight: Vec<S> = (0..i * o).map(|_| init(i, o)).collect();
                Linear {
                    weight: Tensor::matrix(i, o, weight).expect("sized"),
                    bias: Tensor::zeros(&[1, o]),
                }
            })
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn from_layers(layers: Vec<Linear<S>>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(CtpError::contract("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.cols() {
                return Err(CtpError::dim("layer bias", l.weight.cols(), l.bias.len()));
            }
            if i > 0 && layers[i - 1].weight.cols() != l.weight.rows() {
                return Err(CtpError::dim(
                    "consecutive layers",
                    layers[i - 1].weight.cols(),
                    l.weight.rows(),
                ));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn layers(&self) -> &[Linear<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear<S>] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].weight.rows()];
        s.extend(self.layers.iter().map(|l| l.weight.cols()));
        s
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    /// Tape-free forward pass; bitwise identical to [`BoundMlp::forward`].
    pub fn forward(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        if input.cols() != self.in_dim() {
            return Err(CtpError::dim("mlp input", self.in_dim(), input.cols()));
        }
        let last = self.layers.len() - 1;
        let mut h: Option<Tensor<S>> = None;
        for (i, l) in self.layers.iter().enumerate() {
            let mut next = matmul(h.as_ref().unwrap_or(input), &l.weight)?;
            add_row_inplace(&mut next, l.bias.data());
            if i != last && self.activation == Activation::Silu {
                next.data_mut().iter_mut().for_each(|v| *v = silu(*v));
            }
            h = Some(next);
        }
        Ok(h.expect("at least one layer"))
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, S>, mode: ParamMode) -> BoundMlp {
        let mut leaves = Vec::with_capacity(2 * self.layers.len());
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let mut bind = |t: &'a Tensor<S>| match mode {
                    ParamMode::Trainable => {
                        let v = tape.param(t);
                        leaves.push(v);
                        v
                    }
                    ParamMode::Frozen => {
                        let v = tape.constant_ref(t);
                        leaves.push(v);
                        v
                    }
                    ParamMode::StopGradient => {
                        let v = tape.param(t);
                        leaves.push(v);
                        tape.stop_gradient(v)
                    }
                };
                let w = bind(&l.weight);
                let b = bind(&l.bias);
                (w, b)
            })
            .collect();
        BoundMlp {
            layers,
            leaves,
            activation: self.activation,
        }
    }
}

impl<S: Scalar> Parameterized<S> for Mlp<S> {
    fn param_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("layer{i}.weight"), format!("layer{i}.bias")])
            .collect()
    }

    fn params(&self) -> Vec<&Tensor<S>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}
