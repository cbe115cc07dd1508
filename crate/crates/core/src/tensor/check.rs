//! Finite-difference checking of reverse-mode gradients.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng;

use super::{Graph, Tensor, Var};

/// Gradient components smaller than this are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `max |a − n| / max(|a|, |n|, REL_ERR_FLOOR)` over all components.
    pub max_rel_err: f64,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
}

fn evaluate(
    inputs: &[Tensor],
    build: &impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<(Graph, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    Ok((g, vars, out))
}

/// Compares the gradient of the scalar `build(inputs)` against central
/// differences with step `h`, over every element of every input.
pub fn check_gradients(
    inputs: &[Tensor],
    h: f64,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let (mut g, vars, out) = evaluate(inputs, &build)?;
    g.backward(out)?;
    let mut analytic = Vec::new();
    for &v in &vars {
        match g.grad(v) {
            Some(gr) => analytic.extend_from_slice(gr),
            None => analytic.extend(std::iter::repeat_n(0.0, g.value(v).numel())),
        }
    }

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe = inputs.to_vec();
    for i in 0..probe.len() {
        for k in 0..probe[i].numel() {
            let x = probe[i].data()[k];
            probe[i].data_mut()[k] = x + h;
            let up = scalar(&probe, &build)?;
            probe[i].data_mut()[k] = x - h;
            let down = scalar(&probe, &build)?;
            probe[i].data_mut()[k] = x;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    let max_rel_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max);
    Ok(GradCheck {
        analytic,
        numeric,
        max_rel_err,
    })
}

fn scalar(inputs: &[Tensor], build: &impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    let (g, _, out) = evaluate(inputs, build)?;
    let v = g.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::non_finite("gradient check probe"));
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlpLoss {
    Squared,
    CrossEntropy,
    Cosine,
    Huber,
}

/// A random tanh MLP of at most 100 parameters on a random batch, with one of
/// four losses on top.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomMlp {
    pub widths: Vec<usize>,
    pub loss: MlpLoss,
    /// Weight and bias per layer.
    pub params: Vec<Tensor>,
    pub x: Tensor,
    pub labels: Vec<usize>,
}

fn random_tensor(r: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-scale..scale)).collect())
        .expect("shape matches data")
}

impl RandomMlp {
    pub fn sample(seed: u64) -> Self {
        let mut r = rng(seed);
        let depth = r.random_range(1..=3);
        loop {
            let mut widths = vec![r.random_range(1..=4)];
            for _ in 0..depth {
                widths.push(r.random_range(1..=5));
            }
            let loss = match r.random_range(0..4) {
                0 => MlpLoss::Squared,
                1 => MlpLoss::CrossEntropy,
                2 => MlpLoss::Cosine,
                _ => MlpLoss::Huber,
            };
            let out = match loss {
                MlpLoss::Cosine | MlpLoss::CrossEntropy => 3,
                _ => 1,
            };
            *widths.last_mut().expect("nonempty") = out;
            let count: usize = widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum();
            if count > 100 {
                continue;
            }
            let batch = r.random_range(1..=4);
            let mut params = Vec::new();
            for w in widths.windows(2) {
                params.push(random_tensor(&mut r, &[w[0], w[1]], 1.0));
                params.push(random_tensor(&mut r, &[w[1]], 0.5));
            }
            let x = random_tensor(&mut r, &[batch, widths[0]], 1.0);
            let labels = (0..batch).map(|_| r.random_range(0..out)).collect();
            return Self {
                widths,
                loss,
                params,
                x,
                labels,
            };
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn build(&self, g: &mut Graph, p: &[Var]) -> Result<Var> {
        let mut h = g.constant(self.x.clone());
        let layers = p.len() / 2;
        for l in 0..layers {
            let z = g.matmul(h, p[2 * l])?;
            let z = g.add_row(z, p[2 * l + 1])?;
            h = if l + 1 < layers { g.tanh(z) } else { z };
        }
        let rows = self.x.shape()[0];
        let out_dim = *self.widths.last().expect("nonempty");
        match self.loss {
            MlpLoss::Squared => {
                let sq = g.mul(h, h)?;
                g.mean(sq, None)
            }
            MlpLoss::Huber => {
                let shifted = g.shift(h, 0.3);
                let hub = g.huber(shifted, 1.0);
                g.mean(hub, None)
            }
            MlpLoss::CrossEntropy => {
                let lp = g.log_softmax(h)?;
                let mut onehot = vec![0.0; rows * out_dim];
                for (i, &c) in self.labels.iter().enumerate() {
                    onehot[i * out_dim + c] = -1.0;
                }
                let mask = g.constant(Tensor::new(vec![rows, out_dim], onehot)?);
                let picked = g.mul(lp, mask)?;
                let s = g.sum(picked, None)?;
                Ok(g.scale(s, 1.0 / rows as f64))
            }
            MlpLoss::Cosine => {
                let n = g.normalize_rows(h)?;
                let t = g.constant(Tensor::new(
                    vec![rows, 3],
                    (0..rows).flat_map(|_| [0.0, 0.6, 0.8]).collect(),
                )?);
                let prod = g.mul(n, t)?;
                let cos = g.sum(prod, Some(1))?;
                let m = g.mean(cos, None)?;
                Ok(g.scale(m, -1.0))
            }
        }
    }

    pub fn check(&self, h: f64) -> Result<GradCheck> {
        check_gradients(&self.params, h, |g, v| self.build(g, v))
    }
}
