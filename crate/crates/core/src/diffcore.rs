//! Tape-based reverse-mode differentiation over `f64` vectors and matrices.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Values
//! are immutable once recorded. [`Tape::backward`] sweeps the tape in
//! reverse from a scalar root and *adds* the resulting adjoints into the
//! tape's gradient buffers, so two sweeps without [`Tape::zero_grad`] double
//! every gradient.
//!
//! Parameters live in a [`ParamStore`]; [`ParamStore::bind`] copies them onto
//! a tape as leaves and returns a [`Binding`] used by model code to look up
//! the corresponding [`Var`]s.

use std::collections::HashMap;
use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::numerics;
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { rows: 1, cols: 1 };

    pub fn vector(n: usize) -> Self {
        Shape { rows: n, cols: 1 }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_vector(&self) -> bool {
        self.cols == 1
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}x{}]", self.rows, self.cols)
    }
}

/// Dense row-major tensor. Vectors are `n x 1`, scalars `1 x 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Shape::SCALAR,
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: Shape::vector(data.len()),
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                what: "matrix data",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape: Shape { rows, cols },
            data,
        })
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used for reporting and fault injection in gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    MulScalar,
    DivScalar,
    MatVec,
    Affine,
    Tanh,
    Softplus,
    Exp,
    Log,
    Abs,
    Relu,
    Sum,
    Mean,
    Dot,
    Concat,
    Slice,
    Sigmoid,
    LogSigmoid,
    Softmax,
    LogGamma,
    Digamma,
    ClampMin,
    Implicit,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::Leaf => "leaf",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Scale => "scale",
            Primitive::AddScalar => "add_scalar",
            Primitive::MulScalar => "mul_scalar",
            Primitive::DivScalar => "div_scalar",
            Primitive::MatVec => "matvec",
            Primitive::Affine => "affine",
            Primitive::Tanh => "tanh",
            Primitive::Softplus => "softplus",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Abs => "abs",
            Primitive::Relu => "relu",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Dot => "dot",
            Primitive::Concat => "concat",
            Primitive::Slice => "slice",
            Primitive::Sigmoid => "sigmoid",
            Primitive::LogSigmoid => "log_sigmoid",
            Primitive::Softmax => "softmax",
            Primitive::LogGamma => "log_gamma",
            Primitive::Digamma => "digamma",
            Primitive::ClampMin => "clamp_min",
            Primitive::Implicit => "implicit",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ALL_PRIMITIVES.iter().copied().find(|p| p.name() == name)
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const ALL_PRIMITIVES: &[Primitive] = &[
    Primitive::Leaf,
    Primitive::Add,
    Primitive::Sub,
    Primitive::Mul,
    Primitive::Div,
    Primitive::Scale,
    Primitive::AddScalar,
    Primitive::MulScalar,
    Primitive::DivScalar,
    Primitive::MatVec,
    Primitive::Affine,
    Primitive::Tanh,
    Primitive::Softplus,
    Primitive::Exp,
    Primitive::Log,
    Primitive::Abs,
    Primitive::Relu,
    Primitive::Sum,
    Primitive::Mean,
    Primitive::Dot,
    Primitive::Concat,
    Primitive::Slice,
    Primitive::Sigmoid,
    Primitive::LogSigmoid,
    Primitive::Softmax,
    Primitive::LogGamma,
    Primitive::Digamma,
    Primitive::ClampMin,
    Primitive::Implicit,
];

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, Var),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    MatVec(Var, Var),
    Affine(Var, Var, Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Sigmoid(Var),
    LogSigmoid(Var),
    Softmax(Var),
    LogGamma(Var),
    Digamma(Var),
    ClampMin(Var, f64),
    /// Elementwise node whose value was computed outside the tape, with the
    /// supplied local derivative d(value)/d(input).
    Implicit(Var, Vec<f64>),
}

impl Op {
    fn primitive(&self) -> Primitive {
        match self {
            Op::Leaf => Primitive::Leaf,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::Div(..) => Primitive::Div,
            Op::Scale(..) => Primitive::Scale,
            Op::AddScalar(..) => Primitive::AddScalar,
            Op::MulScalar(..) => Primitive::MulScalar,
            Op::DivScalar(..) => Primitive::DivScalar,
            Op::MatVec(..) => Primitive::MatVec,
            Op::Affine(..) => Primitive::Affine,
            Op::Tanh(_) => Primitive::Tanh,
            Op::Softplus(_) => Primitive::Softplus,
            Op::Exp(_) => Primitive::Exp,
            Op::Log(_) => Primitive::Log,
            Op::Abs(_) => Primitive::Abs,
            Op::Relu(_) => Primitive::Relu,
            Op::Sum(_) => Primitive::Sum,
            Op::Mean(_) => Primitive::Mean,
            Op::Dot(..) => Primitive::Dot,
            Op::Concat(_) => Primitive::Concat,
            Op::Slice(..) => Primitive::Slice,
            Op::Sigmoid(_) => Primitive::Sigmoid,
            Op::LogSigmoid(_) => Primitive::LogSigmoid,
            Op::Softmax(_) => Primitive::Softmax,
            Op::LogGamma(_) => Primitive::LogGamma,
            Op::Digamma(_) => Primitive::Digamma,
            Op::ClampMin(..) => Primitive::ClampMin,
            Op::Implicit(..) => Primitive::Implicit,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    fault: Option<Primitive>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose backward pass flips the sign of every local derivative
    /// of `primitive`. Only useful for exercising gradient checks.
    pub fn with_fault(primitive: Primitive) -> Self {
        Tape {
            fault: Some(primitive),
            ..Self::default()
        }
    }

    pub fn fault(&self) -> Option<Primitive> {
        self.fault
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Distinct primitives recorded so far, in first-use order.
    pub fn primitives(&self) -> Vec<Primitive> {
        let mut out = Vec::new();
        for n in &self.nodes {
            let p = n.op.primitive();
            if !out.contains(&p) {
                out.push(p);
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node recorded after `mark` (a previous [`Tape::len`]).
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.grads.truncate(mark);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    /// Accumulated gradient of `v`; zeros if no backward pass reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.shape(v);
        match self.grads.get(v.0) {
            Some(g) if !g.is_empty() => Tensor {
                shape,
                data: g.clone(),
            },
            _ => Tensor::zeros(shape),
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.clear();
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        self.grads.push(Vec::new());
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_vector(&mut self, data: &[f64]) -> Var {
        self.leaf(Tensor::vector(data.to_vec()))
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(sa)
    }

    fn require_scalar(&self, op: &'static str, a: Var, s: Var) -> Result<()> {
        let ss = self.shape(s);
        if ss != Shape::SCALAR {
            return Err(Error::Shape {
                op,
                left: self.shape(a),
                right: ss,
            });
        }
        Ok(())
    }

    fn zip_map(
        &mut self,
        a: Var,
        b: Var,
        shape: Shape,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(Tensor { shape, data }, op)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(a);
        let shape = src.shape;
        let data = src.data.iter().map(|&x| f(x)).collect();
        self.push(Tensor { shape, data }, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, s, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, s, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, s, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("div", a, b)?;
        Ok(self.zip_map(a, b, s, |x, y| x / y, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a + s` with the scalar node `s` broadcast over `a`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.require_scalar("add_scalar", a, s)?;
        let k = self.scalar(s);
        Ok(self.map(a, |x| x + k, Op::AddScalar(a, s)))
    }

    /// `a * s` with the scalar node `s` broadcast over `a`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.require_scalar("mul_scalar", a, s)?;
        let k = self.scalar(s);
        Ok(self.map(a, |x| x * k, Op::MulScalar(a, s)))
    }

    /// `a / s` with the scalar node `s` broadcast over `a`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.require_scalar("div_scalar", a, s)?;
        let k = self.scalar(s);
        Ok(self.map(a, |x| x / k, Op::DivScalar(a, s)))
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (sw, sx) = (self.shape(w), self.shape(x));
        if !sx.is_vector() || sw.cols != sx.rows {
            return Err(Error::Shape {
                op: "matvec",
                left: sw,
                right: sx,
            });
        }
        let data = matvec_raw(&self.value(w).data, sw, &self.value(x).data);
        Ok(self.push(Tensor::vector(data), Op::MatVec(w, x)))
    }

    /// `W x + b`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let (sw, sx, sb) = (self.shape(w), self.shape(x), self.shape(b));
        if !sx.is_vector() || sw.cols != sx.rows {
            return Err(Error::Shape {
                op: "affine",
                left: sw,
                right: sx,
            });
        }
        if sb != Shape::vector(sw.rows) {
            return Err(Error::Shape {
                op: "affine",
                left: sw,
                right: sb,
            });
        }
        let mut data = matvec_raw(&self.value(w).data, sw, &self.value(x).data);
        for (o, bi) in data.iter_mut().zip(&self.value(b).data) {
            *o += bi;
        }
        Ok(self.push(Tensor::vector(data), Op::Affine(w, x, b)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, numerics::softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.data(a).iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::domain("log", format!("non-positive input {bad}")));
        }
        Ok(self.map(a, f64::ln, Op::Log(a)))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, numerics::stable_sigmoid, Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.map(a, numerics::log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn log_gamma(&mut self, a: Var) -> Result<Var> {
        for &x in self.data(a) {
            numerics::log_gamma(x)?;
        }
        Ok(self.map(a, numerics::log_gamma_unchecked, Op::LogGamma(a)))
    }

    pub fn digamma(&mut self, a: Var) -> Result<Var> {
        for &x in self.data(a) {
            numerics::digamma(x)?;
        }
        Ok(self.map(a, numerics::digamma_unchecked, Op::Digamma(a)))
    }

    /// `max(a, floor)` elementwise; the gradient is zero where clamped.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.map(a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let s = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b)))
    }

    /// Concatenate vectors (scalars count as length-1 vectors).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if !s.is_vector() {
                return Err(Error::Shape {
                    op: "concat",
                    left: s,
                    right: Shape::vector(s.rows),
                });
            }
            data.extend_from_slice(self.data(p));
        }
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec())))
    }

    /// Contiguous sub-vector `a[start .. start + len]`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if !s.is_vector() || start + len > s.rows {
            return Err(Error::Shape {
                op: "slice",
                left: s,
                right: Shape::vector(start + len),
            });
        }
        let data = self.data(a)[start..start + len].to_vec();
        Ok(self.push(Tensor::vector(data), Op::Slice(a, start)))
    }

    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        self.slice(a, i, 1)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.is_empty() || !s.is_vector() {
            return Err(Error::InvalidParam(format!("softmax of shape {s}")));
        }
        let data = numerics::softmax_unchecked(self.data(a));
        Ok(self.push(Tensor::vector(data), Op::Softmax(a)))
    }

    /// Record a node with externally computed `value` and elementwise local
    /// derivative `dvalue_dinput` with respect to `input`.
    pub fn implicit(
        &mut self,
        input: Var,
        value: Vec<f64>,
        dvalue_dinput: Vec<f64>,
    ) -> Result<Var> {
        let s = self.shape(input);
        if value.len() != s.len() || dvalue_dinput.len() != s.len() {
            return Err(Error::Shape {
                op: "implicit",
                left: s,
                right: Shape::vector(value.len()),
            });
        }
        Ok(self.push(
            Tensor {
                shape: s,
                data: value,
            },
            Op::Implicit(input, dvalue_dinput),
        ))
    }

    /// Reverse sweep from the scalar `output`, accumulating into gradients.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let s = self.shape(output);
        if s != Shape::SCALAR {
            return Err(Error::Shape {
                op: "backward",
                left: s,
                right: Shape::SCALAR,
            });
        }
        let n = output.0 + 1;
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); n];
        adj[output.0] = vec![1.0];
        for i in (0..n).rev() {
            if adj[i].is_empty() {
                continue;
            }
            let (lower, upper) = adj.split_at_mut(i);
            let mut g = std::mem::take(&mut upper[0]);
            let node = &self.nodes[i];
            if self.fault == Some(node.op.primitive()) {
                g.iter_mut().for_each(|x| *x = -*x);
            }
            propagate(&self.nodes, node, &g, lower);
            upper[0] = g;
        }
        for (i, a) in adj.into_iter().enumerate() {
            if a.is_empty() {
                continue;
            }
            let acc = &mut self.grads[i];
            if acc.is_empty() {
                *acc = a;
            } else {
                acc.iter_mut().zip(&a).for_each(|(x, y)| *x += y);
            }
        }
        Ok(())
    }
}

fn matvec_raw(w: &[f64], sw: Shape, x: &[f64]) -> Vec<f64> {
    w.chunks_exact(sw.cols)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn slot<'a>(adj: &'a mut [Vec<f64>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    let a = &mut adj[v.0];
    if a.is_empty() {
        *a = vec![0.0; nodes[v.0].value.data.len()];
    }
    a
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], adj: &mut [Vec<f64>]) {
    let val = |v: Var| -> &[f64] { &nodes[v.0].value.data };
    let out = &node.value.data;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            add_into(slot(adj, nodes, *a), g);
            add_into(slot(adj, nodes, *b), g);
        }
        Op::Sub(a, b) => {
            add_into(slot(adj, nodes, *a), g);
            slot(adj, nodes, *b)
                .iter_mut()
                .zip(g)
                .for_each(|(x, gi)| *x -= gi);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            zip3_into(slot(adj, nodes, *a), g, vb, |gi, y| gi * y);
            zip3_into(slot(adj, nodes, *b), g, va, |gi, x| gi * x);
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            zip3_into(slot(adj, nodes, *a), g, vb, |gi, y| gi / y);
            let db: Vec<f64> = va.iter().zip(vb).map(|(x, y)| -x / (y * y)).collect();
            zip3_into(slot(adj, nodes, *b), g, &db, |gi, d| gi * d);
        }
        Op::Scale(a, c) => {
            slot(adj, nodes, *a)
                .iter_mut()
                .zip(g)
                .for_each(|(x, gi)| *x += c * gi);
        }
        Op::AddScalar(a, s) => {
            add_into(slot(adj, nodes, *a), g);
            slot(adj, nodes, *s)[0] += g.iter().sum::<f64>();
        }
        Op::MulScalar(a, s) => {
            let k = val(*s)[0];
            let ds: f64 = g.iter().zip(val(*a)).map(|(gi, x)| gi * x).sum();
            slot(adj, nodes, *a)
                .iter_mut()
                .zip(g)
                .for_each(|(x, gi)| *x += k * gi);
            slot(adj, nodes, *s)[0] += ds;
        }
        Op::DivScalar(a, s) => {
            let k = val(*s)[0];
            let ds: f64 = g.iter().zip(val(*a)).map(|(gi, x)| -gi * x / (k * k)).sum();
            slot(adj, nodes, *a)
                .iter_mut()
                .zip(g)
                .for_each(|(x, gi)| *x += gi / k);
            slot(adj, nodes, *s)[0] += ds;
        }
        Op::MatVec(w, x) => matvec_backward(nodes, *w, *x, None, g, adj),
        Op::Affine(w, x, b) => matvec_backward(nodes, *w, *x, Some(*b), g, adj),
        Op::Tanh(a) => zip3_into(slot(adj, nodes, *a), g, out, |gi, t| gi * (1.0 - t * t)),
        Op::Softplus(a) => {
            let x = val(*a);
            zip3_into(slot(adj, nodes, *a), g, x, |gi, x| {
                gi * numerics::stable_sigmoid(x)
            });
        }
        Op::Exp(a) => zip3_into(slot(adj, nodes, *a), g, out, |gi, e| gi * e),
        Op::Log(a) => {
            let x = val(*a);
            zip3_into(slot(adj, nodes, *a), g, x, |gi, x| gi / x);
        }
        Op::Abs(a) => {
            let x = val(*a);
            zip3_into(slot(adj, nodes, *a), g, x, |gi, x| gi * sign(x));
        }
        Op::Relu(a) => {
            let x = val(*a);
            zip3_into(
                slot(adj, nodes, *a),
                g,
                x,
                |gi, x| if x > 0.0 { gi } else { 0.0 },
            );
        }
        Op::Sum(a) => {
            let gi = g[0];
            slot(adj, nodes, *a).iter_mut().for_each(|x| *x += gi);
        }
        Op::Mean(a) => {
            let n = val(*a).len() as f64;
            let gi = g[0] / n;
            slot(adj, nodes, *a).iter_mut().for_each(|x| *x += gi);
        }
        Op::Dot(a, b) => {
            let gi = g[0];
            let (va, vb) = (val(*a), val(*b));
            slot(adj, nodes, *a)
                .iter_mut()
                .zip(vb)
                .for_each(|(x, y)| *x += gi * y);
            slot(adj, nodes, *b)
                .iter_mut()
                .zip(va)
                .for_each(|(x, y)| *x += gi * y);
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = val(*p).len();
                add_into(slot(adj, nodes, *p), &g[offset..offset + len]);
                offset += len;
            }
        }
        Op::Slice(a, start) => {
            let s = slot(adj, nodes, *a);
            s[*start..*start + g.len()]
                .iter_mut()
                .zip(g)
                .for_each(|(x, gi)| *x += gi);
        }
        Op::Sigmoid(a) => zip3_into(slot(adj, nodes, *a), g, out, |gi, s| gi * s * (1.0 - s)),
        Op::LogSigmoid(a) => {
            let x = val(*a);
            zip3_into(slot(adj, nodes, *a), g, x, |gi, x| {
                gi * numerics::stable_sigmoid(-x)
            });
        }
        Op::Softmax(a) => {
            let inner: f64 = g.iter().zip(out).map(|(gi, p)| gi * p).sum();
            slot(adj, nodes, *a)
                .iter_mut()
                .zip(g.iter().zip(out))
                .for_each(|(x, (gi, p))| *x += p * (gi - inner));
        }
        Op::LogGamma(a) => {
            let x = val(*a);
            zip3_into(slot(adj, nodes, *a), g, x, |gi, x| {
                gi * numerics::digamma_unchecked(x)
            });
        }
        Op::Digamma(a) => {
            let x = val(*a);
            zip3_into(slot(adj, nodes, *a), g, x, |gi, x| {
                gi * numerics::trigamma_fd(x).unwrap_or(f64::NAN)
            });
        }
        Op::ClampMin(a, floor) => {
            let x = val(*a);
            let floor = *floor;
            zip3_into(
                slot(adj, nodes, *a),
                g,
                x,
                |gi, x| {
                    if x > floor {
                        gi
                    } else {
                        0.0
                    }
                },
            );
        }
        Op::Implicit(a, d) => zip3_into(slot(adj, nodes, *a), g, d, |gi, d| gi * d),
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
}

fn zip3_into(dst: &mut [f64], g: &[f64], v: &[f64], f: impl Fn(f64, f64) -> f64) {
    dst.iter_mut()
        .zip(g.iter().zip(v))
        .for_each(|(x, (&gi, &vi))| *x += f(gi, vi));
}

fn matvec_backward(
    nodes: &[Node],
    w: Var,
    x: Var,
    b: Option<Var>,
    g: &[f64],
    adj: &mut [Vec<f64>],
) {
    let sw = nodes[w.0].value.shape;
    let wv = &nodes[w.0].value.data;
    let xv = &nodes[x.0].value.data;
    {
        let gw = slot(adj, nodes, w);
        for (r, &gr) in g.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            let row = &mut gw[r * sw.cols..(r + 1) * sw.cols];
            row.iter_mut().zip(xv).for_each(|(o, xi)| *o += gr * xi);
        }
    }
    {
        let gx = slot(adj, nodes, x);
        for (r, &gr) in g.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            let row = &wv[r * sw.cols..(r + 1) * sw.cols];
            gx.iter_mut().zip(row).for_each(|(o, wi)| *o += gr * wi);
        }
    }
    if let Some(b) = b {
        add_into(slot(adj, nodes, b), g);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

/// Named parameter tensors with a fixed insertion order.
///
/// Serializes as a [`ParamFile`]: a schema header (format version, seed,
/// names with shapes) followed by the flat data of each tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ParamFile", try_from = "ParamFile")]
pub struct ParamStore {
    seed: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

pub const PARAM_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSchemaEntry {
    pub name: String,
    pub shape: Shape,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamFile {
    pub format_version: u32,
    pub seed: u64,
    pub schema: Vec<ParamSchemaEntry>,
    pub data: Vec<Vec<f64>>,
}

impl From<ParamStore> for ParamFile {
    fn from(store: ParamStore) -> Self {
        let schema = store
            .names
            .iter()
            .zip(&store.tensors)
            .map(|(n, t)| ParamSchemaEntry {
                name: n.clone(),
                shape: t.shape,
            })
            .collect();
        ParamFile {
            format_version: PARAM_FORMAT_VERSION,
            seed: store.seed,
            schema,
            data: store.tensors.into_iter().map(|t| t.data).collect(),
        }
    }
}

impl TryFrom<ParamFile> for ParamStore {
    type Error = Error;

    fn try_from(file: ParamFile) -> Result<Self> {
        if file.format_version != PARAM_FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "parameter format version {} (supported: {PARAM_FORMAT_VERSION})",
                file.format_version
            )));
        }
        if file.schema.len() != file.data.len() {
            return Err(Error::Schema(format!(
                "{} schema entries but {} data blocks",
                file.schema.len(),
                file.data.len()
            )));
        }
        let mut store = ParamStore::new(file.seed);
        for (entry, data) in file.schema.into_iter().zip(file.data) {
            if data.len() != entry.shape.len() {
                return Err(Error::Schema(format!(
                    "parameter {} declares {} but holds {} values",
                    entry.name,
                    entry.shape,
                    data.len()
                )));
            }
            store.insert(
                entry.name,
                Tensor {
                    shape: entry.shape,
                    data,
                },
            )?;
        }
        Ok(store)
    }
}

/// Parameter leaves of one [`ParamStore`] on one [`Tape`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidParam(format!(
                "duplicate parameter name {name}"
            )));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    /// Uniform(−a, a) weights with a = √(6 / (fan_in + fan_out)).
    pub fn insert_glorot(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut Rng,
    ) -> Result<ParamId> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
        self.insert(name, Tensor::matrix(rows, cols, data)?)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: Shape) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Gradients of every parameter after a backward pass, in store order.
    pub fn gradients(&self, tape: &Tape, binding: &Binding) -> Vec<Tensor> {
        binding.vars.iter().map(|&v| tape.grad(v)).collect()
    }

    pub fn schema(&self) -> Vec<ParamSchemaEntry> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| ParamSchemaEntry {
                name: n.clone(),
                shape: t.shape,
            })
            .collect()
    }

    /// Overwrite every tensor with `other`'s, which must share the schema.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.schema() != other.schema() {
            return Err(Error::Schema(format!(
                "parameter schema mismatch: expected {} tensors {:?}, got {} tensors {:?}",
                self.len(),
                self.names,
                other.len(),
                other.names
            )));
        }
        self.tensors.clone_from(&other.tensors);
        self.seed = other.seed;
        Ok(())
    }

    /// Apply `f(param, grad)` to every tensor.
    pub fn update(&mut self, grads: &[Tensor], mut f: impl FnMut(usize, &mut [f64], &[f64])) {
        for (i, (t, g)) in self.tensors.iter_mut().zip(grads).enumerate() {
            f(i, &mut t.data, &g.data);
        }
    }
}

/// Per-parameter outcome of a gradient check.
#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// |a − b| / max(1e-8, |a| + |b|).
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Compare the tape's gradient of `f` against central differences with step
/// `h`, for every scalar of every parameter in `params`.
///
/// `f` must be deterministic given the parameters; any sampling noise has to
/// be frozen by the caller. `fault` is forwarded to the analytic tape.
pub fn grad_check<F>(
    f: F,
    params: &ParamStore,
    h: f64,
    fault: Option<Primitive>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Binding, &ParamStore) -> Result<Var>,
{
    let mut tape = match fault {
        Some(p) => Tape::with_fault(p),
        None => Tape::new(),
    };
    let binding = params.bind(&mut tape);
    let out = f(&mut tape, &binding, params)?;
    tape.backward(out)?;
    let analytic = params.gradients(&tape, &binding);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let o = f(&mut t, &b, store)?;
        Ok(t.scalar(o))
    };

    let mut probe = params.clone();
    let mut report = Vec::with_capacity(params.len());
    for id in params.ids() {
        let mut check = ParamCheck {
            name: params.name(id).to_owned(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..params.get(id).data.len() {
            let orig = params.get(id).data[i];
            probe.get_mut(id).data[i] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(id).data[i] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(id).data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[id.0].data[i];
            let err = relative_error(a, numeric);
            if err > check.max_rel_error || i == 0 {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport { params: report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn softplus_value_and_gradient() {
        let mut t = Tape::new();
        let x = t.constant_scalar(0.0);
        let y = t.softplus(x);
        t.backward(y).unwrap();
        assert!((t.scalar(y) - 2f64.ln()).abs() < 1e-15);
        assert!((t.grad(x).data[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dot_gradients() {
        let mut t = Tape::new();
        let a = t.constant_vector(&[1.0, 2.0]);
        let b = t.constant_vector(&[3.0, 4.0]);
        let d = t.dot(a, b).unwrap();
        t.backward(d).unwrap();
        assert_eq!(t.scalar(d), 11.0);
        assert_eq!(t.grad(a).data, vec![3.0, 4.0]);
        assert_eq!(t.grad(b).data, vec![1.0, 2.0]);
    }

    #[test]
    fn square_and_fan_out() {
        let mut t = Tape::new();
        let x = t.constant_scalar(3.0);
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).data[0], 6.0);

        let mut t = Tape::new();
        let a = t.constant_scalar(1.0);
        let y = t.add(a, a).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(a).data[0], 2.0);
    }

    #[test]
    fn backward_accumulates_without_reset() {
        let mut t = Tape::new();
        let x = t.constant_vector(&[0.3, -1.2]);
        let y = t.tanh(x);
        let s = t.sum(y);
        t.backward(s).unwrap();
        let once = t.grad(x).data;
        t.backward(s).unwrap();
        let twice = t.grad(x).data;
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
        t.zero_grad();
        assert_eq!(t.grad(x).data, vec![0.0, 0.0]);
    }

    #[test]
    fn unrelated_parameter_gets_exact_zero() {
        let mut t = Tape::new();
        let used = t.constant_vector(&[1.0, 2.0]);
        let unused = t.constant_vector(&[5.0]);
        let c = t.constant_vector(&[7.0, 7.0]);
        let k = t.sum(c);
        let u = t.sum(used);
        let y = t.add(u, k).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(unused).data, vec![0.0]);
    }

    #[test]
    fn non_scalar_backward_is_an_error() {
        let mut t = Tape::new();
        let x = t.constant_vector(&[1.0, 2.0]);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant_vector(&[1.0, 2.0]);
        let b = t.constant_vector(&[1.0, 2.0, 3.0]);
        let msg = t.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2x1]") && msg.contains("[3x1]"), "{msg}");
        let w = t.leaf(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        let msg = t.matvec(w, b).unwrap_err().to_string();
        assert!(msg.contains("[2x2]") && msg.contains("[3x1]"), "{msg}");
    }

    #[test]
    fn truncate_drops_later_nodes() {
        let mut t = Tape::new();
        let x = t.constant_scalar(2.0);
        let mark = t.len();
        let _ = t.exp(x);
        t.truncate(mark);
        assert_eq!(t.len(), mark);
    }

    #[test]
    fn tanh_layer_grad_check() {
        let mut r = rng::stream(11, 0);
        let mut store = ParamStore::new(11);
        let w = store.insert_glorot("w", 3, 4, &mut r).unwrap();
        let v = [0.4, -0.3, 1.1, 0.2];
        let report = grad_check(
            |t, b, _| {
                let x = t.constant_vector(&v);
                let y = t.matvec(b.var(w), x)?;
                let a = t.tanh(y);
                Ok(t.sum(a))
            },
            &store,
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-6, "{report:?}");
    }

    #[test]
    fn linear_function_grad_check_is_exact() {
        let mut store = ParamStore::new(0);
        let w = store
            .insert("w", Tensor::vector(vec![0.5, -2.0, 3.0]))
            .unwrap();
        let report = grad_check(
            |t, b, _| {
                let c = t.constant_vector(&[1.0, 2.0, -1.0]);
                t.dot(b.var(w), c)
            },
            &store,
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-9);
    }

    #[test]
    fn same_seed_same_store() {
        let build = || {
            let mut r = rng::stream(5, rng::streams::INIT);
            let mut s = ParamStore::new(5);
            s.insert_glorot("a", 4, 3, &mut r).unwrap();
            s.insert_glorot("b", 2, 5, &mut r).unwrap();
            s
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn fault_flips_gradient_sign() {
        let mut t = Tape::with_fault(Primitive::Exp);
        let x = t.constant_scalar(0.5);
        let y = t.exp(x);
        t.backward(y).unwrap();
        assert!((t.grad(x).data[0] + 0.5f64.exp()).abs() < 1e-15);
    }
}
