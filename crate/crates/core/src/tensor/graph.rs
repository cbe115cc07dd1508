use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Scale(Var, f64),
    Shift(Var),
    Huber(Var, f64),
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    LogSoftmax(Var),
    NormalizeRows(Var, Vec<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Define-by-run computation graph.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Lower bound on row norms in [`Graph::normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf, keeping the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, mut value: Tensor) -> Var {
        value.grad = None;
        self.push(value, Op::Leaf)
    }

    /// Adds a leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    /// Adds a leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn derived(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|&p| self.tracks(p));
        let value = Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        };
        self.push(value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let (k2, m) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_into(self.value(a).data(), self.value(b).data(), n, k, m);
        Ok(self.derived(vec![n, m], out, Op::MatMul(a, b), &[a, b]))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (shape, data) = if ta.shape() == tb.shape() {
            let d = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            (ta.shape().to_vec(), d)
        } else if tb.numel() == 1 {
            let y = tb.data()[0];
            (ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, y)).collect())
        } else if ta.numel() == 1 {
            let x = ta.data()[0];
            (tb.shape().to_vec(), tb.data().iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        };
        Ok(self.derived(shape, data, op, &[a, b]))
    }

    /// Elementwise sum. Operands must have equal shapes or one must hold a single value.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a bias vector of length `n` to every row of a `B×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        let b = self.value(bias);
        if b.numel() != cols {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let bd = b.data();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            out.extend(xd[r * cols..(r + 1) * cols].iter().zip(bd).map(|(v, b)| v + b));
        }
        Ok(self.derived(vec![rows, cols], out, Op::AddRow(x, bias), &[x, bias]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.derived(shape, data, op, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// `max(x, 0)`; the subgradient at exactly 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, x: Var, offset: f64) -> Var {
        self.unary(x, |v| v + offset, Op::Shift(x))
    }

    /// Elementwise Huber function with threshold `delta`.
    pub fn huber(&mut self, x: Var, delta: f64) -> Var {
        self.unary(
            x,
            |r| {
                if r.abs() <= delta {
                    0.5 * r * r
                } else {
                    delta * (r.abs() - 0.5 * delta)
                }
            },
            Op::Huber(x, delta),
        )
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let (shape, data) = reduce(self.value(x), axis)?;
        Ok(self.derived(shape, data, Op::Sum(x, axis), &[x]))
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let t = self.value(x);
        let count = match axis {
            Some(a) => t.shape().get(a).copied().unwrap_or(1),
            None => t.numel(),
        };
        let (shape, mut data) = reduce(t, axis)?;
        data.iter_mut().for_each(|v| *v /= count as f64);
        Ok(self.derived(shape, data, Op::Mean(x, axis), &[x]))
    }

    /// Row-wise log-softmax of a `B×C` matrix.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.dims2()?;
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            out.extend(row.iter().map(|v| v - lse));
        }
        Ok(self.derived(vec![rows, cols], out, Op::LogSoftmax(x), &[x]))
    }

    /// Scales every row of a `B×n` matrix to unit Euclidean norm. Norms are
    /// floored at [`NORM_EPS`].
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.dims2()?;
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = t.row(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        Ok(self.derived(vec![rows, cols], out, Op::NormalizeRows(x, norms), &[x]))
    }

    /// Reverse sweep from a scalar `loss`. Gradients are added to whatever
    /// the leaves already hold, so two calls double them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        if !lt.requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            let contributions = self.pullback(i, &g);
            for (parent, delta) in contributions {
                if !self.tracks(parent) {
                    continue;
                }
                match &mut adj[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot => *slot = Some(delta),
                }
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for its parents.
    fn pullback(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (n, k) = self.value(*a).dims2().expect("matmul operand");
                let m = self.value(*b).shape()[1];
                let ad = val(*a);
                let bd = val(*b);
                let mut da = vec![0.0; n * k];
                let mut db = vec![0.0; k * m];
                for r in 0..n {
                    for p in 0..k {
                        let mut acc = 0.0;
                        let arp = ad[r * k + p];
                        for c in 0..m {
                            let grc = g[r * m + c];
                            acc += grc * bd[p * m + c];
                            db[p * m + c] += arp * grc;
                        }
                        da[r * k + p] = acc;
                    }
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b) => {
                vec![
                    (*a, unbroadcast(g, val(*a).len(), |_| 1.0)),
                    (*b, unbroadcast(g, val(*b).len(), |_| 1.0)),
                ]
            }
            Op::Sub(a, b) => {
                vec![
                    (*a, unbroadcast(g, val(*a).len(), |_| 1.0)),
                    (*b, unbroadcast(g, val(*b).len(), |_| -1.0)),
                ]
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                vec![
                    (*a, unbroadcast(g, ad.len(), |j| pick(bd, j))),
                    (*b, unbroadcast(g, bd.len(), |j| pick(ad, j))),
                ]
            }
            Op::Div(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                vec![
                    (*a, unbroadcast(g, ad.len(), |j| 1.0 / pick(bd, j))),
                    (
                        *b,
                        unbroadcast(g, bd.len(), |j| {
                            let d = pick(bd, j);
                            -pick(ad, j) / (d * d)
                        }),
                    ),
                ]
            }
            Op::AddRow(x, bias) => {
                let cols = val(*bias).len();
                let mut db = vec![0.0; cols];
                for (j, gv) in g.iter().enumerate() {
                    db[j % cols] += gv;
                }
                vec![(*x, g.to_vec()), (*bias, db)]
            }
            Op::Tanh(x) => vec![(*x, zip_map(g, y, |g, t| g * (1.0 - t * t)))],
            Op::Relu(x) => vec![(
                *x,
                zip_map(g, val(*x), |g, v| if v > 0.0 { g } else { 0.0 }),
            )],
            Op::Exp(x) => vec![(*x, zip_map(g, y, |g, e| g * e))],
            Op::Log(x) => vec![(*x, zip_map(g, val(*x), |g, v| g / v))],
            Op::Scale(x, f) => vec![(*x, g.iter().map(|v| v * f).collect())],
            Op::Shift(x) => vec![(*x, g.to_vec())],
            Op::Huber(x, delta) => vec![(
                *x,
                zip_map(g, val(*x), |g, r| {
                    if r.abs() <= *delta {
                        g * r
                    } else {
                        g * delta * r.signum()
                    }
                }),
            )],
            Op::Sum(x, axis) => vec![(*x, spread(self.value(*x).shape(), *axis, g, 1.0))],
            Op::Mean(x, axis) => {
                let shape = self.value(*x).shape();
                let count = match axis {
                    Some(a) => shape[*a],
                    None => shape.iter().product(),
                };
                vec![(*x, spread(shape, *axis, g, 1.0 / count as f64))]
            }
            Op::LogSoftmax(x) => {
                let cols = node.value.shape()[1];
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(cols).zip(y.chunks(cols)) {
                    let total: f64 = gr.iter().sum();
                    dx.extend(gr.iter().zip(yr).map(|(gv, lv)| gv - lv.exp() * total));
                }
                vec![(*x, dx)]
            }
            Op::NormalizeRows(x, norms) => {
                let cols = node.value.shape()[1];
                let mut dx = Vec::with_capacity(g.len());
                for ((gr, yr), &n) in g.chunks(cols).zip(y.chunks(cols)).zip(norms) {
                    let raw_norm = yr.iter().map(|v| v * v).sum::<f64>().sqrt() * n;
                    if raw_norm <= NORM_EPS {
                        dx.extend(gr.iter().map(|gv| gv / n));
                    } else {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        dx.extend(gr.iter().zip(yr).map(|(gv, yv)| (gv - yv * dot) / n));
                    }
                }
                vec![(*x, dx)]
            }
        }
    }
}

fn pick(data: &[f64], j: usize) -> f64 {
    if data.len() == 1 {
        data[0]
    } else {
        data[j]
    }
}

fn zip_map(g: &[f64], v: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    g.iter().zip(v).map(|(&a, &b)| f(a, b)).collect()
}

/// Gradient for an operand of length `len` given the output gradient `g` and
/// a per-output-element local derivative. A single-element operand was
/// broadcast, so its contributions are summed.
fn unbroadcast(g: &[f64], len: usize, local: impl Fn(usize) -> f64) -> Vec<f64> {
    if len == g.len() {
        g.iter().enumerate().map(|(j, gv)| gv * local(j)).collect()
    } else {
        vec![g.iter().enumerate().map(|(j, gv)| gv * local(j)).sum()]
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduce(t: &Tensor, axis: Option<usize>) -> Result<(Vec<usize>, Vec<f64>)> {
    match axis {
        None => Ok((Vec::new(), vec![t.data().iter().sum()])),
        Some(a) if a >= t.rank() => Err(Error::Axis {
            axis: a,
            rank: t.rank(),
        }),
        Some(a) => {
            let (outer, len, inner) = split_axis(t.shape(), a);
            let d = t.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += d[base + i];
                    }
                }
            }
            let mut shape = t.shape().to_vec();
            shape.remove(a);
            Ok((shape, out))
        }
    }
}

/// Broadcasts a reduced gradient back over the reduced axis, times `factor`.
fn spread(shape: &[usize], axis: Option<usize>, g: &[f64], factor: f64) -> Vec<f64> {
    let numel: usize = shape.iter().product();
    match axis {
        None => vec![g[0] * factor; numel],
        Some(a) => {
            let (outer, len, inner) = split_axis(shape, a);
            let mut out = vec![0.0; numel];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for i in 0..inner {
                        out[base + i] = g[o * inner + i] * factor;
                    }
                }
            }
            out
        }
    }
}

fn matmul_into(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        let orow = &mut out[r * m..(r + 1) * m];
        for p in 0..k {
            let av = a[r * k + p];
            let brow = &b[p * m..(p + 1) * m];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}
