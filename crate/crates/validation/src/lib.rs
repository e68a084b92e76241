//! Oracles shared by the acceptance suite. Nothing here calls into the code
//! under test beyond building inputs and reading outputs.

use ctp_core::{Mlp, ParamMode, Parameterized, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const FD_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub entries: usize,
    /// Largest gradient magnitude seen, to show the check is not vacuous.
    pub max_abs_grad: f64,
}

/// Compares tape gradients of `loss` with respect to the network returned by
/// `net` against central finite differences over every parameter entry.
pub fn grad_check<M: Clone>(
    ctx: &M,
    net: fn(&M) -> &Mlp,
    net_mut: fn(&mut M) -> &mut Mlp,
    loss: impl for<'a> Fn(&'a M, &mut Tape<'a>, &ctp_core::numerics::BoundMlp) -> Result<Var>,
) -> Result<GradCheck> {
    let value = |m: &M| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = net(m).bind(&mut tape, ParamMode::Frozen);
        let l = loss(m, &mut tape, &bound)?;
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let bound = net(ctx).bind(&mut tape, ParamMode::Trainable);
    let l = loss(ctx, &mut tape, &bound)?;
    let grads = tape.backward(l)?.wrt_all(bound.leaves());
    let mut out = GradCheck {
        max_rel_err: 0.0,
        entries: 0,
        max_abs_grad: 0.0,
    };
    for (pi, g) in grads.iter().enumerate() {
        for ei in 0..g.len() {
            let shifted = |delta: f64| -> Result<f64> {
                let mut m = ctx.clone();
                net_mut(&mut m).params_mut()[pi].data_mut()[ei] += delta;
                value(&m)
            };
            let fd = (shifted(FD_STEP)? - shifted(-FD_STEP)?) / (2.0 * FD_STEP);
            let a = g.data()[ei];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(FD_FLOOR);
            out.max_rel_err = out.max_rel_err.max(err);
            out.max_abs_grad = out.max_abs_grad.max(a.abs());
            out.entries += 1;
        }
    }
    Ok(out)
}

/// Ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Correlated 2-D Gaussian: `x = mean + L·z` with lower-triangular `L`.
#[derive(Clone, Copy, Debug)]
pub struct Gaussian2 {
    pub mean: [f64; 2],
    pub chol: [[f64; 2]; 2],
}

impl Gaussian2 {
    pub fn isotropic(mean: [f64; 2], std: f64) -> Self {
        Self {
            mean,
            chol: [[std, 0.0], [0.0, std]],
        }
    }

    pub fn cov(&self) -> [[f64; 2]; 2] {
        let l = self.chol;
        let mut c = [[0.0; 2]; 2];
        for (i, row) in c.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..2).map(|k| l[i][k] * l[j][k]).sum();
            }
        }
        c
    }

    pub fn sample(&self, n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let z: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            for i in 0..2 {
                data.push(self.mean[i] + self.chol[i][0] * z[0] + self.chol[i][1] * z[1]);
            }
        }
        Tensor::matrix(n, 2, data).expect("sized")
    }

    /// `E[x0 | x0 + sigma·n = x]` for an isotropic distribution.
    pub fn posterior_mean_isotropic(&self, x: &[f64], sigma: f64) -> [f64; 2] {
        let s2 = self.chol[0][0] * self.chol[0][0];
        let v2 = sigma * sigma;
        [0, 1].map(|c| (s2 * x[c] + v2 * self.mean[c]) / (s2 + v2))
    }
}

/// Sample mean and unbiased covariance of an `[n, 2]` matrix.
pub fn moments2(x: &Tensor) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = x.rows() as f64;
    let mut m = [0.0; 2];
    for r in 0..x.rows() {
        for (c, v) in m.iter_mut().enumerate() {
            *v += x.get(r, c) / n;
        }
    }
    let mut cov = [[0.0; 2]; 2];
    for r in 0..x.rows() {
        for a in 0..2 {
            for b in 0..2 {
                cov[a][b] += (x.get(r, a) - m[a]) * (x.get(r, b) - m[b]) / (n - 1.0);
            }
        }
    }
    (m, cov)
}

pub fn frobenius_gap(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> f64 {
    let mut s = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            s += (a[i][j] - b[i][j]).powi(2);
        }
    }
    s.sqrt()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}
