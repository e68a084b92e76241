use crate::error::{CtpError, Result};
use crate::numerics::mlp::Parameterized;
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: S) -> Self {
        Self {
            lr,
            beta1: S::lit(0.9),
            beta2: S::lit(0.999),
            eps: S::lit(1e-8),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to `model` from `grads` (in `params()` order).
    pub fn step<M: Parameterized<S> + ?Sized>(&mut self, model: &mut M, grads: &[Tensor<S>]) -> Result<()> {
        let names = model.param_names();
        let mut params = model.params_mut();
        self.update(&mut params, grads, &names)
    }

    pub fn update(&mut self, params: &mut [&mut Tensor<S>], grads: &[Tensor<S>], names: &[String]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(CtpError::dim("adam gradient count", params.len(), grads.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(CtpError::dim(
                    "adam gradient shape",
                    format!("{:?}", p.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            if !g.all_finite() {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("param{i}"));
                return Err(CtpError::Divergence {
                    step: self.step as usize,
                    detail: format!("non-finite gradient for {name}"),
                });
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() {
            return Err(CtpError::dim("adam state", self.m.len(), params.len()));
        }
        self.step += 1;
        let t = self.step as i32;
        let one = S::one();
        let bc1 = one - self.beta1.powi(t);
        let bc2 = one - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (one - self.beta1) * gv;
                *vv = self.beta2 * *vv + (one - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `target ← mu·target + (1 − mu)·online`, elementwise.
pub fn ema_update<S: Scalar, M: Parameterized<S> + ?Sized>(target: &mut M, online: &M, mu: S) -> Result<()> {
    if !(mu >= S::zero() && mu <= S::one()) {
        return Err(CtpError::contract(format!("EMA decay {mu} outside [0, 1]")));
    }
    let src = online.params();
    let mut dst = target.params_mut();
    if src.len() != dst.len() {
        return Err(CtpError::dim("ema parameter count", dst.len(), src.len()));
    }
    for (d, s) in dst.iter_mut().zip(&src) {
        if d.shape() != s.shape() {
            return Err(CtpError::dim(
                "ema parameter shape",
                format!("{:?}", d.shape()),
                format!("{:?}", s.shape()),
            ));
        }
        for (dv, &sv) in d.data_mut().iter_mut().zip(s.data()) {
            *dv = mu * *dv + (S::one() - mu) * sv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::mlp::{Activation, Mlp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct One(Tensor<f64>);

    impl Parameterized<f64> for One {
        fn param_names(&self) -> Vec<String> {
            vec!["p".into()]
        }
        fn params(&self) -> Vec<&Tensor<f64>> {
            vec![&self.0]
        }
        fn params_mut(&mut self) -> Vec<&mut Tensor<f64>> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = One(Tensor::scalar(1.25));
        let mut adam = Adam::new(0.1);
        adam.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(p.0.item().unwrap(), 1.25);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the update is lr·g/(|g| + eps).
        let mut p = One(Tensor::scalar(1.0));
        let mut adam = Adam::new(0.1);
        adam.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        let want = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.0.item().unwrap() - want).abs() < 1e-15);
        assert!((p.0.item().unwrap() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut net = Mlp::<f64>::zeros(&[2, 2], Activation::Identity).unwrap();
        let grads = vec![Tensor::filled(&[2, 2], f64::NAN), Tensor::zeros(&[1, 2])];
        let err = Adam::new(0.1).step(&mut net, &grads).unwrap_err();
        assert!(err.to_string().contains("layer0.weight"), "{err}");
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut net = Mlp::<f64>::new(&[2, 4, 1], Activation::Silu, &mut rng).unwrap();
            let mut adam = Adam::new(1e-2);
            for step in 0..100 {
                let grads: Vec<_> = net
                    .params()
                    .iter()
                    .map(|p| p.map(|v| (v * step as f64).sin()))
                    .collect();
                adam.step(&mut net, &grads).unwrap();
            }
            net
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ema_boundaries_and_arithmetic() {
        let online = One(Tensor::scalar(1.0));
        let mut t = One(Tensor::scalar(2.0));
        ema_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t.0.item().unwrap(), 2.0);
        ema_update(&mut t, &online, 0.9).unwrap();
        assert!((t.0.item().unwrap() - 1.9).abs() < 1e-15);
        ema_update(&mut t, &online, 0.0).unwrap();
        assert_eq!(t.0.item().unwrap(), 1.0);
        assert!(ema_update(&mut t, &online, 1.5).is_err());
        assert!(ema_update(&mut t, &online, -0.1).is_err());
    }

    #[test]
    fn ema_converges_geometrically_to_frozen_online() {
        let online = One(Tensor::scalar(0.0));
        let mut t = One(Tensor::scalar(1.0));
        let mu = 0.8;
        for k in 1..=20 {
            ema_update(&mut t, &online, mu).unwrap();
            assert!((t.0.item().unwrap() - mu.powi(k)).abs() < 1e-14);
        }
    }
}
