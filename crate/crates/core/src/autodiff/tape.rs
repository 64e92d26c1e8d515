//! Define-by-run reverse-mode tape.
//!
//! Every forward op appends a node holding its value. Nodes that depend on a
//! `requires_grad` leaf also record the op so [`Tape::backward`] can replay
//! the chain rule in exact reverse recording order.

use super::tensor::{matmul_into, Tensor};
use crate::dirichlet::special::{digamma_unchecked, lgamma_unchecked, trigamma_unchecked};
use crate::error::{contract, GemError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Relu(Var),
    Neg(Var),
    Square(Var),
    Sqrt(Var),
    Lgamma(Var),
    Digamma(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Clip(Var, f64, f64),
    SoftmaxRows(Var),
    NormalizeRows(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SelectCol(Var, usize),
    ConcatCols(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Recording of a single forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    kink_radius: Option<f64>,
    kinks: usize,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn broadcast_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(GemError::Shape { op, lhs: a, rhs: b }),
    }
}

/// Sums a gradient of `shape` down to the broadcast operand shape `target`.
fn reduce_to(g: &Tensor, target: (usize, usize)) -> Tensor {
    if g.shape() == target {
        return g.clone();
    }
    let mut out = Tensor::zeros(target.0, target.1);
    for r in 0..g.rows() {
        let tr = if target.0 == 1 { 0 } else { r };
        for c in 0..g.cols() {
            let tc = if target.1 == 1 { 0 } else { c };
            let v = out.get(tr, tc) + g.get(r, c);
            out.set(tr, tc, v);
        }
    }
    out
}

fn broadcast_binary(a: &Tensor, b: &Tensor, shape: (usize, usize), f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = Tensor::zeros(shape.0, shape.1);
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    for r in 0..shape.0 {
        for c in 0..shape.1 {
            let x = a.get(if ar == 1 { 0 } else { r }, if ac == 1 { 0 } else { c });
            let y = b.get(if br == 1 { 0 } else { r }, if bc == 1 { 0 } else { c });
            out.set(r, c, f(x, y));
        }
    }
    out
}

fn bget(t: &Tensor, r: usize, c: usize) -> f64 {
    let (tr, tc) = t.shape();
    t.get(if tr == 1 { 0 } else { r }, if tc == 1 { 0 } else { c })
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

fn add_into(acc: &mut Option<Tensor>, g: Tensor) {
    match acc {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *acc = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Enables counting of clip/relu inputs lying within `radius` of a kink.
    pub fn track_kinks(&mut self, radius: f64) {
        self.kink_radius = Some(radius);
        self.kinks = 0;
    }

    /// Number of non-smooth loci touched since [`Tape::track_kinks`].
    pub fn kinks(&self) -> usize {
        self.kinks
    }

    /// Registers a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Registers a constant (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Copies the value of `v` into a new constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(GemError::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn unary(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(name, value, op, &[x])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let value = broadcast_binary(self.value(a), self.value(b), shape, f);
        self.push(name, value, op, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(GemError::Shape {
                op: "matmul",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let mut out = Tensor::zeros(va.rows(), vb.cols());
        matmul_into(va, vb, &mut out);
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, Op::Log(x), f64::ln)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, Op::Tanh(x), f64::tanh)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, Op::Softplus(x), softplus)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.note_kinks(x, &[0.0]);
        self.unary("relu", x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary("neg", x, Op::Neg(x), |v| -v)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, Op::Square(x), |v| v * v)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, Op::Sqrt(x), f64::sqrt)
    }

    /// Elementwise `ln Γ(x)`; requires `x > 0`.
    pub fn lgamma(&mut self, x: Var) -> Result<Var> {
        self.check_positive("lgamma", x)?;
        self.unary("lgamma", x, Op::Lgamma(x), lgamma_unchecked)
    }

    /// Elementwise digamma; requires `x > 0`.
    pub fn digamma(&mut self, x: Var) -> Result<Var> {
        self.check_positive("digamma", x)?;
        self.unary("digamma", x, Op::Digamma(x), digamma_unchecked)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        self.unary("scale", x, Op::Scale(x, k), |v| v * k)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Result<Var> {
        self.unary("add_scalar", x, Op::AddScalar(x), |v| v + k)
    }

    /// Clamp to `[lo, hi]`; gradient passes through inside, zero outside.
    pub fn clip(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(contract(format!("clip bounds inverted: {lo} > {hi}")));
        }
        self.note_kinks(x, &[lo, hi]);
        self.unary("clip", x, Op::Clip(x, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push("softmax_rows", out, Op::SoftmaxRows(x), &[x])
    }

    /// Divides each row by its sum.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push("normalize_rows", out, Op::NormalizeRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(contract("mean of an empty tensor"));
        }
        let m = v.sum() / v.len() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Row sums: `N×C → N×1`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let sums: Vec<f64> = v.iter_rows().map(|r| r.iter().sum()).collect();
        self.push("sum_rows", Tensor::col_vector(&sums), Op::SumRows(x), &[x])
    }

    /// Column `k` as an `N×1` tensor.
    pub fn select_col(&mut self, x: Var, k: usize) -> Result<Var> {
        let v = self.value(x);
        if k >= v.cols() {
            return Err(GemError::Shape {
                op: "select_col",
                lhs: v.shape(),
                rhs: (1, k),
            });
        }
        let col = v.column(k);
        self.push("select_col", Tensor::col_vector(&col), Op::SelectCol(x, k), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| contract("concat_cols of nothing"))?;
        let rows = self.shape(*first).0;
        let mut cols = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.0 != rows {
                return Err(GemError::Shape {
                    op: "concat_cols",
                    lhs: (rows, cols),
                    rhs: s,
                });
            }
            cols += s.1;
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let src = self.value(*p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    fn check_positive(&self, func: &'static str, x: Var) -> Result<()> {
        match self.value(x).data().iter().find(|v| !(**v > 0.0)) {
            Some(&arg) => Err(GemError::Domain { func, arg }),
            None => Ok(()),
        }
    }

    fn note_kinks(&mut self, x: Var, loci: &[f64]) {
        if let Some(r) = self.kink_radius {
            let hits = self.nodes[x.0]
                .value
                .data()
                .iter()
                .filter(|v| loci.iter().any(|k| (*v - k).abs() <= r))
                .count();
            self.kinks += hits;
        }
    }

    /// Reverse sweep from a `1×1` root. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(contract("backward on an empty tape"));
        }
        if self.shape(root) != (1, 1) {
            return Err(contract(format!("backward root must be 1x1, got {:?}", self.shape(root))));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                add_into(&mut self.nodes[i].grad, g);
                continue;
            }
            for (parent, pg) in self.local_grads(i, &g) {
                if self.nodes[parent.0].requires_grad {
                    add_into(&mut adj[parent.0], pg);
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let ga = g.matmul(&val(*b).transpose()).expect("shapes checked");
                let gb = val(*a).transpose().matmul(g).expect("shapes checked");
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![(*a, reduce_to(g, val(*a).shape())), (*b, reduce_to(g, val(*b).shape()))],
            Op::Sub(a, b) => vec![
                (*a, reduce_to(g, val(*a).shape())),
                (*b, reduce_to(&g.map(|v| -v), val(*b).shape())),
            ],
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = self.elementwise_with(g, vb, |gv, bv| gv * bv);
                let gb = self.elementwise_with(g, va, |gv, av| gv * av);
                vec![(*a, reduce_to(&ga, va.shape())), (*b, reduce_to(&gb, vb.shape()))]
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = self.elementwise_with(g, vb, |gv, bv| gv / bv);
                let mut gb = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        let bv = bget(vb, r, c);
                        gb.set(r, c, -g.get(r, c) * bget(va, r, c) / (bv * bv));
                    }
                }
                vec![(*a, reduce_to(&ga, va.shape())), (*b, reduce_to(&gb, vb.shape()))]
            }
            Op::Exp(x) => vec![(*x, zip_map(g, y, |gv, yv| gv * yv))],
            Op::Log(x) => vec![(*x, zip_map(g, val(*x), |gv, xv| gv / xv))],
            Op::Sigmoid(x) => vec![(*x, zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv)))],
            Op::Tanh(x) => vec![(*x, zip_map(g, y, |gv, yv| gv * (1.0 - yv * yv)))],
            Op::Softplus(x) => vec![(*x, zip_map(g, val(*x), |gv, xv| gv * sigmoid(xv)))],
            Op::Relu(x) => vec![(*x, zip_map(g, val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }))],
            Op::Neg(x) => vec![(*x, g.map(|v| -v))],
            Op::Square(x) => vec![(*x, zip_map(g, val(*x), |gv, xv| 2.0 * gv * xv))],
            Op::Sqrt(x) => vec![(*x, zip_map(g, y, |gv, yv| 0.5 * gv / yv))],
            Op::Lgamma(x) => vec![(*x, zip_map(g, val(*x), |gv, xv| gv * digamma_unchecked(xv)))],
            Op::Digamma(x) => vec![(*x, zip_map(g, val(*x), |gv, xv| gv * trigamma_unchecked(xv)))],
            Op::Scale(x, k) => vec![(*x, g.map(|v| v * k))],
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::Clip(x, lo, hi) => vec![(
                *x,
                zip_map(g, val(*x), |gv, xv| if xv >= *lo && xv <= *hi { gv } else { 0.0 }),
            )],
            Op::SoftmaxRows(x) => {
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (gr[c] - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::NormalizeRows(x) => {
                let xv = val(*x);
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let s: f64 = xv.row(r).iter().sum();
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = (gr[c] - dot) / s;
                    }
                }
                vec![(*x, gx)]
            }
            Op::Sum(x) => {
                let (r, c) = val(*x).shape();
                vec![(*x, Tensor::full(r, c, g.get(0, 0)))]
            }
            Op::Mean(x) => {
                let (r, c) = val(*x).shape();
                vec![(*x, Tensor::full(r, c, g.get(0, 0) / (r * c) as f64))]
            }
            Op::SumRows(x) => {
                let (r, c) = val(*x).shape();
                let mut gx = Tensor::zeros(r, c);
                for i in 0..r {
                    let gv = g.get(i, 0);
                    gx.row_mut(i).iter_mut().for_each(|v| *v = gv);
                }
                vec![(*x, gx)]
            }
            Op::SelectCol(x, k) => {
                let (r, c) = val(*x).shape();
                let mut gx = Tensor::zeros(r, c);
                for i in 0..r {
                    gx.set(i, *k, g.get(i, 0));
                }
                vec![(*x, gx)]
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let (r, c) = val(*p).shape();
                    let mut gp = Tensor::zeros(r, c);
                    for i in 0..r {
                        gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                    }
                    off += c;
                    out.push((*p, gp));
                }
                out
            }
        }
    }

    /// `g ⊙ broadcast(other)` at the shape of `g`.
    fn elementwise_with(&self, g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let mut out = Tensor::zeros(g.rows(), g.cols());
        for r in 0..g.rows() {
            for c in 0..g.cols() {
                out.set(r, c, f(g.get(r, c), bget(other, r, c)));
            }
        }
        out
    }
}
