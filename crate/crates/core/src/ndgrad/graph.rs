use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{GradError, ParameterStore, Tensor};

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Softplus(usize),
    Clamp(usize, f64, f64),
    SumAxis(usize, usize),
    SumAll(usize),
    Concat(Vec<usize>),
    Slice { input: usize, start: usize, len: usize },
    GatherRows { input: usize, indices: Vec<usize> },
    Reshape(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LogSumExp(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Softplus(..) => "softplus",
            Op::Clamp(..) => "clamp",
            Op::SumAxis(..) => "sum_axis",
            Op::SumAll(..) => "sum",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::GatherRows { .. } => "gather_rows",
            Op::Reshape(..) => "reshape",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LogSumExp(..) => "logsumexp",
        }
    }
}

#[derive(Clone, Debug)]
enum Origin {
    Param(String),
    Input(String),
    Constant,
    Computed,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    origin: Origin,
    needs_grad: bool,
}

/// Define-by-run tape. Every primitive evaluates eagerly and records itself so
/// that [`Graph::backward`] can replay the tape in reverse.
///
/// A fresh graph is built for every batch.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    params: HashMap<String, usize>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn resolve(&self, v: Var) -> Result<usize, GradError> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(GradError::ForeignNode { index: v.index });
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, origin: Origin, needs_grad: bool) -> Var {
        debug_assert!(
            value.all_finite() || !self.inputs_finite(&op),
            "non-finite output from {} at node {}",
            op.name(),
            self.nodes.len()
        );
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            origin,
            needs_grad,
        });
        Var {
            graph: self.id,
            index,
        }
    }

    fn inputs_finite(&self, op: &Op) -> bool {
        let check = |i: &usize| self.nodes[*i].value.all_finite();
        match op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b) => check(a) && check(b),
            Op::Concat(parts) => parts.iter().all(check),
            Op::Scale(a, s) => check(a) && s.is_finite(),
            Op::Slice { input, .. } | Op::GatherRows { input, .. } => check(input),
            Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Softplus(a)
            | Op::Clamp(a, ..)
            | Op::SumAxis(a, _)
            | Op::SumAll(a)
            | Op::Reshape(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::LogSumExp(a) => check(a),
        }
    }

    fn computed(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.push(value, op, Origin::Computed, needs_grad)
    }

    /// Registers a named input whose gradient is reported by `backward`.
    pub fn input(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.push(value, Op::Leaf, Origin::Input(name.into()), true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, Origin::Constant, false)
    }

    /// Places a parameter from `store` on the tape. Repeated calls with the same
    /// name return the same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var, GradError> {
        if let Some(&index) = self.params.get(name) {
            return Ok(Var {
                graph: self.id,
                index,
            });
        }
        let value = store
            .get(name)
            .ok_or_else(|| GradError::UnknownParameter(name.to_string()))?
            .clone();
        let v = self.push(value, Op::Leaf, Origin::Param(name.to_string()), true);
        self.params.insert(name.to_string(), v.index);
        Ok(v)
    }

    /// Places a parameter on the tape as a constant: it participates in the
    /// forward pass but receives no gradient.
    pub fn frozen_param(&mut self, store: &ParameterStore, name: &str) -> Result<Var, GradError> {
        if let Some(&index) = self.params.get(name) {
            return Ok(Var {
                graph: self.id,
                index,
            });
        }
        let value = store
            .get(name)
            .ok_or_else(|| GradError::UnknownParameter(name.to_string()))?
            .clone();
        let v = self.constant(value);
        self.params.insert(name.to_string(), v.index);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.resolve(v).expect("variable belongs to another graph");
        &self.nodes[i].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn mismatch(&self, op: &'static str, a: usize, b: usize) -> GradError {
        GradError::ShapeMismatch {
            op,
            node: self.nodes.len(),
            left: self.nodes[a].value.shape().to_vec(),
            right: self.nodes[b].value.shape().to_vec(),
        }
    }

    fn unary(&mut self, a: Var, op: fn(usize) -> Op, f: impl Fn(f64) -> f64) -> Result<Var, GradError> {
        let i = self.resolve(a)?;
        let value = self.nodes[i].value.map(f);
        Ok(self.computed(value, op(i), &[i]))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, GradError> {
        let (i, j) = (self.resolve(a)?, self.resolve(b)?);
        if self.nodes[i].value.shape() != self.nodes[j].value.shape() {
            return Err(self.mismatch(name, i, j));
        }
        let value = self.nodes[i].value.zip_map(&self.nodes[j].value, f);
        Ok(self.computed(value, op(i, j), &[i, j]))
    }

    /// Matrix product of `[n, k]` and `[k, m]`, or `[n, k]` and a `k`-vector.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (i, j) = (self.resolve(a)?, self.resolve(b)?);
        let (sa, sb) = (self.nodes[i].value.shape(), self.nodes[j].value.shape());
        if sa.len() != 2 || sb.is_empty() || sb.len() > 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", i, j));
        }
        let (n, k) = (sa[0], sa[1]);
        let m = if sb.len() == 2 { sb[1] } else { 1 };
        let out_shape = if sb.len() == 2 { vec![n, m] } else { vec![n] };
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            self.nodes[i].value.data(),
            false,
            self.nodes[j].value.data(),
            false,
            &mut out,
        );
        let value = Tensor::new(out_shape, out)?;
        Ok(self.computed(value, Op::MatMul(i, j), &[i, j]))
    }

    /// Adds a length-`m` bias to every row of an `[n, m]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, GradError> {
        let (i, j) = (self.resolve(a)?, self.resolve(bias)?);
        let (sa, sb) = (self.nodes[i].value.shape(), self.nodes[j].value.shape());
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(self.mismatch("add_bias", i, j));
        }
        let m = sb[0];
        let mut value = self.nodes[i].value.clone();
        let b = self.nodes[j].value.data();
        for row in value.data_mut().chunks_mut(m) {
            for (x, y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(self.computed(value, Op::AddBias(i, j), &[i, j]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, GradError> {
        let i = self.resolve(a)?;
        let value = self.nodes[i].value.map(|x| x * s);
        Ok(self.computed(value, Op::Scale(i, s), &[i]))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, GradError> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, GradError> {
        let i = self.resolve(a)?;
        let value = self.nodes[i].value.map(|x| x + s);
        Ok(self.computed(value, Op::AddScalar(i), &[i]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, Op::Relu, |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, Op::Sigmoid, sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, Op::Tanh, f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, Op::Exp, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, Op::Log, f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, Op::Square, |x| x * x)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(a, Op::Softplus, softplus)
    }

    /// Elementwise clamp. The gradient passes only where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, GradError> {
        let i = self.resolve(a)?;
        let value = self.nodes[i].value.map(|x| x.clamp(lo, hi));
        Ok(self.computed(value, Op::Clamp(i, lo, hi), &[i]))
    }

    /// Sums a rank-2 tensor over `axis` (0 → per column, 1 → per row).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, GradError> {
        let i = self.resolve(a)?;
        let t = &self.nodes[i].value;
        if t.rank() != 2 || axis > 1 {
            return Err(GradError::InvalidShape {
                shape: t.shape().to_vec(),
                reason: "sum_axis expects a matrix and axis 0 or 1",
            });
        }
        let m = t.shape()[1];
        let value = if axis == 1 {
            Tensor::vector(t.data().chunks(m).map(|r| r.iter().sum()).collect())
        } else {
            let mut acc = vec![0.0; m];
            for r in t.data().chunks(m) {
                for (s, v) in acc.iter_mut().zip(r) {
                    *s += v;
                }
            }
            Tensor::vector(acc)
        };
        Ok(self.computed(value, Op::SumAxis(i, axis), &[i]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, GradError> {
        let count = self.value(a).shape().get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / count as f64)
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var, GradError> {
        let i = self.resolve(a)?;
        let value = Tensor::scalar(self.nodes[i].value.sum());
        Ok(self.computed(value, Op::SumAll(i), &[i]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, GradError> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        let idx = parts
            .iter()
            .map(|&p| self.resolve(p))
            .collect::<Result<Vec<_>, _>>()?;
        let first = idx[0];
        for &k in &idx {
            let s = self.nodes[k].value.shape();
            if s.len() != 2 || s[0] != self.nodes[first].value.shape()[0] {
                return Err(self.mismatch("concat", first, k));
            }
        }
        let tensors: Vec<&Tensor> = idx.iter().map(|&k| &self.nodes[k].value).collect();
        let value = Tensor::hstack(&tensors);
        Ok(self.computed(value, Op::Concat(idx.clone()), &idx))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, GradError> {
        let i = self.resolve(a)?;
        let t = &self.nodes[i].value;
        if t.rank() != 2 || start + len > t.shape()[1] || len == 0 {
            return Err(GradError::InvalidShape {
                shape: t.shape().to_vec(),
                reason: "column slice out of range",
            });
        }
        let cols: Vec<usize> = (start..start + len).collect();
        let value = t.select_cols(&cols);
        Ok(self.computed(value, Op::Slice { input: i, start, len }, &[i]))
    }

    /// Picks rows by index (repeats allowed). Works on matrices and vectors.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, GradError> {
        let i = self.resolve(a)?;
        let t = &self.nodes[i].value;
        if t.rank() == 0 || indices.iter().any(|&r| r >= t.rows()) {
            return Err(GradError::InvalidShape {
                shape: t.shape().to_vec(),
                reason: "row index out of range",
            });
        }
        let value = t.select_rows(indices);
        Ok(self.computed(
            value,
            Op::GatherRows {
                input: i,
                indices: indices.to_vec(),
            },
            &[i],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, GradError> {
        let i = self.resolve(a)?;
        let value = self.nodes[i].value.reshape(shape)?;
        Ok(self.computed(value, Op::Reshape(i), &[i]))
    }

    fn check_matrix(&self, i: usize, op: &'static str) -> Result<(), GradError> {
        if self.nodes[i].value.rank() != 2 {
            return Err(GradError::InvalidShape {
                shape: self.nodes[i].value.shape().to_vec(),
                reason: op,
            });
        }
        Ok(())
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var, GradError> {
        let i = self.resolve(a)?;
        self.check_matrix(i, "softmax expects a matrix")?;
        let value = row_map(&self.nodes[i].value, |r, out| {
            let lse = logsumexp(r);
            for (o, &x) in out.iter_mut().zip(r) {
                *o = (x - lse).exp();
            }
        });
        Ok(self.computed(value, Op::Softmax(i), &[i]))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, GradError> {
        let i = self.resolve(a)?;
        self.check_matrix(i, "log_softmax expects a matrix")?;
        let value = row_map(&self.nodes[i].value, |r, out| {
            let lse = logsumexp(r);
            for (o, &x) in out.iter_mut().zip(r) {
                *o = x - lse;
            }
        });
        Ok(self.computed(value, Op::LogSoftmax(i), &[i]))
    }

    /// Row-wise log-sum-exp of an `[n, m]` matrix, giving an `n`-vector.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var, GradError> {
        let i = self.resolve(a)?;
        self.check_matrix(i, "logsumexp expects a matrix")?;
        let t = &self.nodes[i].value;
        let value = Tensor::vector(t.data().chunks(t.cols()).map(logsumexp).collect());
        Ok(self.computed(value, Op::LogSumExp(i), &[i]))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, output: Var) -> Result<Gradients, GradError> {
        let out = self.resolve(output)?;
        let out_shape = self.nodes[out].value.shape();
        if !out_shape.is_empty() {
            return Err(GradError::NonScalarOutput(out_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out + 1];
        grads[out] = Some(Tensor::scalar(1.0));
        for idx in (0..=out).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut named = HashMap::new();
        let mut inputs = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate().take(out + 1) {
            let (map, name) = match &node.origin {
                Origin::Param(n) => (&mut named, n),
                Origin::Input(n) => (&mut inputs, n),
                Origin::Constant | Origin::Computed => continue,
            };
            let g = grads[idx]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            map.insert(name.clone(), g);
        }
        Ok(Gradients {
            graph: self.id,
            by_node: grads,
            params: named,
            inputs,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: usize, delta: Tensor) {
        if !self.nodes[target].needs_grad {
            return;
        }
        match &mut grads[target] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (n, k) = (sa[0], sa[1]);
                let m = if sb.len() == 2 { sb[1] } else { 1 };
                if self.nodes[*a].needs_grad {
                    let mut da = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), false, val(*b).data(), true, &mut da);
                    self.accumulate(grads, *a, Tensor::matrix(n, k, da));
                }
                if self.nodes[*b].needs_grad {
                    let mut db = vec![0.0; k * m];
                    gemm(k, n, m, val(*a).data(), true, g.data(), false, &mut db);
                    let db = Tensor::new(sb.to_vec(), db).expect("matmul grad shape");
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddBias(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let m = val(*b).len();
                let mut db = vec![0.0; m];
                for row in g.data().chunks(m) {
                    for (s, v) in db.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                self.accumulate(grads, *b, Tensor::vector(db));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                self.accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let d = g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |gv, s| gv * s * (1.0 - s));
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g.zip_map(&node.value, |gv, t| gv * (1.0 - t * t));
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = g.zip_map(&node.value, |gv, e| gv * e);
                self.accumulate(grads, *a, d);
            }
            Op::Log(a) => {
                let d = g.zip_map(val(*a), |gv, x| gv / x);
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let d = g.zip_map(val(*a), |gv, x| 2.0 * x * gv);
                self.accumulate(grads, *a, d);
            }
            Op::Softplus(a) => {
                let d = g.zip_map(val(*a), |gv, x| gv * sigmoid(x));
                self.accumulate(grads, *a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let d = g.zip_map(val(*a), |gv, x| if x >= *lo && x <= *hi { gv } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::SumAxis(a, axis) => {
                let s = val(*a).shape();
                let (n, m) = (s[0], s[1]);
                let mut d = Vec::with_capacity(n * m);
                for r in 0..n {
                    for c in 0..m {
                        d.push(if *axis == 1 { g.data()[r] } else { g.data()[c] });
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(n, m, d));
            }
            Op::SumAll(a) => {
                let gv = g.item();
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), gv));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.nodes[p].needs_grad {
                        let cols: Vec<usize> = (offset..offset + w).collect();
                        self.accumulate(grads, p, g.select_cols(&cols));
                    }
                    offset += w;
                }
            }
            Op::Slice { input, start, len } => {
                let s = val(*input).shape();
                let (n, m) = (s[0], s[1]);
                let mut d = Tensor::zeros(&[n, m]);
                for r in 0..n {
                    d.row_mut(r)[*start..start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *input, d);
            }
            Op::GatherRows { input, indices } => {
                let mut d = Tensor::zeros(val(*input).shape());
                for (k, &r) in indices.iter().enumerate() {
                    for (t, v) in d.row_mut(r).iter_mut().zip(g.row(k)) {
                        *t += v;
                    }
                }
                self.accumulate(grads, *input, d);
            }
            Op::Reshape(a) => {
                let d = g.reshape(val(*a).shape()).expect("reshape grad");
                self.accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let s = &node.value;
                let mut d = Tensor::zeros(s.shape());
                for r in 0..s.rows() {
                    let (sr, gr) = (s.row(r), g.row(r));
                    let dot: f64 = sr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for ((o, &sv), &gv) in d.row_mut(r).iter_mut().zip(sr).zip(gr) {
                        *o = sv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LogSoftmax(a) => {
                let ls = &node.value;
                let mut d = Tensor::zeros(ls.shape());
                for r in 0..ls.rows() {
                    let gr = g.row(r);
                    let total: f64 = gr.iter().sum();
                    for ((o, &l), &gv) in d.row_mut(r).iter_mut().zip(ls.row(r)).zip(gr) {
                        *o = gv - l.exp() * total;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LogSumExp(a) => {
                let x = val(*a);
                let mut d = Tensor::zeros(x.shape());
                for r in 0..x.rows() {
                    let lse = node.value.data()[r];
                    let gv = g.data()[r];
                    for (o, &v) in d.row_mut(r).iter_mut().zip(x.row(r)) {
                        *o = gv * (v - lse).exp();
                    }
                }
                self.accumulate(grads, *a, d);
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    graph: u64,
    by_node: Vec<Option<Tensor>>,
    params: HashMap<String, Tensor>,
    inputs: HashMap<String, Tensor>,
}

impl Gradients {
    /// Gradient with respect to any node on the tape, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.graph != self.graph {
            return None;
        }
        self.by_node.get(v.index).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn input(&self, name: &str) -> Option<&Tensor> {
        self.inputs.get(name)
    }

    /// Parameter gradients keyed by parameter name.
    pub fn params(&self) -> &HashMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> HashMap<String, Tensor> {
        self.params
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable log-sum-exp of a slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn row_map(t: &Tensor, f: impl Fn(&[f64], &mut [f64])) -> Tensor {
    let mut out = Tensor::zeros(t.shape());
    let c = t.cols();
    for (r, o) in t.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
        f(r, o);
    }
    out
}

/// `c = op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`; both
/// operands are row-major and `*_t` selects the transposed view.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the strides above address exactly the `m*k`, `k*n` and `m*n`
    // elements of the three slices, whose lengths are asserted.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
