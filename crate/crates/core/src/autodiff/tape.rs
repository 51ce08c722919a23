//! Wengert-list reverse mode over dense `f64` tensors.
//!
//! Every operation appends one node holding its output value and the ids of
//! its inputs, so nodes are stored in topological order by construction and
//! `backward` is a single reverse sweep. Row-wise operations (`log_sum_exp`,
//! `softmax`, `l2_normalize`) act along the last axis of a rank-1 or rank-2
//! tensor. There is no implicit broadcasting; `scale` is the only
//! scalar-times-tensor operation.

use std::fmt;

use super::tensor::{numel, validate, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Names of the recorded operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Exp,
    Log,
    Tanh,
    Sum,
    Mean,
    LogSumExp,
    Softmax,
    L2Normalize,
    Transpose,
    Reshape,
    Gather,
    Concat,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 17] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Tanh,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::LogSumExp,
        OpKind::Softmax,
        OpKind::L2Normalize,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Gather,
        OpKind::Concat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "mul_scalar",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Tanh => "tanh",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::LogSumExp => "log_sum_exp",
            OpKind::Softmax => "softmax",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Gather => "gather",
            OpKind::Concat => "concat",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::DIFFERENTIABLE
            .into_iter()
            .chain([OpKind::Leaf])
            .find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    LogSumExp(Var),
    Softmax(Var),
    /// Saves the per-row norms of the input.
    L2Normalize(Var, Vec<f64>),
    Transpose(Var),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::LogSumExp(_) => OpKind::LogSumExp,
            Op::Softmax(_) => OpKind::Softmax,
            Op::L2Normalize(..) => OpKind::L2Normalize,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Gather(..) => OpKind::Gather,
            Op::Concat(_) => OpKind::Concat,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation and replays it backwards.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<OpKind>,
}

/// Multiplier applied to the upstream gradient of a faulted op.
const FAULT_FACTOR: f64 = 1.25;

/// `(rows, cols)` view of a rank-1 or rank-2 shape for last-axis ops.
fn rows_cols(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [n] => Ok((1, *n)),
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::shape(op, format!("expected rank 1 or 2, got {shape:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose backward rule for `kind` is deliberately wrong. Used to
    /// prove that gradient checking catches a broken rule.
    pub fn with_fault(kind: OpKind) -> Self {
        Tape {
            fault: Some(kind),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a leaf holding a copy of `t`. Gradients flow into it only when
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        validate(&shape, &values, "constant")?;
        Ok(self.push(shape, values, Op::Leaf, false))
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.push(Vec::new(), vec![value], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::from_parts(n.shape.clone(), n.value.clone())
    }

    /// Gradient accumulated into `v` by the last [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).needs_grad)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = match self.shape(a) {
            [m, k] => (*m, *k),
            s => return Err(Error::shape("matmul", format!("lhs must be rank 2, got {s:?}"))),
        };
        let (k2, n) = match self.shape(b) {
            [k2, n] => (*k2, *n),
            s => return Err(Error::shape("matmul", format!("rhs must be rank 2, got {s:?}"))),
        };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: [{m},{k}] x [{k2},{n}]"),
            ));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let ng = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    fn zip_with(&mut self, a: Var, b: Var, op_name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, op_name)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(&[a, b]);
        Ok(self.push(shape, out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(&[a]);
        self.push(shape, out, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).iter().find(|&&x| x <= 0.0) {
            return Err(Error::domain("log", format!("non-positive input {x}")));
        }
        Ok(self.map(a, f64::ln, Op::Log(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.needs(&[a]);
        self.push(Vec::new(), vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.needs(&[a]);
        self.push(Vec::new(), vec![m], Op::Mean(a), ng)
    }

    /// `max + ln Σ exp(x − max)` along the last axis: `[n] → []`, `[m,n] → [m]`.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(a), "log_sum_exp")?;
        let out_shape = if self.shape(a).len() == 1 {
            Vec::new()
        } else {
            vec![rows]
        };
        let out = self
            .value(a)
            .chunks(cols)
            .map(|row| {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln()
            })
            .collect();
        let ng = self.needs(&[a]);
        Ok(self.push(out_shape, out, Op::LogSumExp(a), ng))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(a), "softmax")?;
        let mut out = Vec::with_capacity(self.value(a).len());
        for row in self.value(a).chunks(cols) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            out.extend(row.iter().map(|&x| (x - mx).exp()));
            let z: f64 = out[start..].iter().sum();
            out[start..].iter_mut().for_each(|e| *e /= z);
        }
        let shape = self.shape(a).to_vec();
        let ng = self.needs(&[a]);
        Ok(self.push(shape, out, Op::Softmax(a), ng))
    }

    /// Divides each row (last axis) by its Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(a), "l2_normalize")?;
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.value(a).len());
        for (r, row) in self.value(a).chunks(cols).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::domain("l2_normalize", format!("row {r} has norm {norm}")));
            }
            norms.push(norm);
            out.extend(row.iter().map(|x| x / norm));
        }
        let shape = self.shape(a).to_vec();
        let ng = self.needs(&[a]);
        Ok(self.push(shape, out, Op::L2Normalize(a, norms), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = match self.shape(a) {
            [m, n] => (*m, *n),
            s => return Err(Error::shape("transpose", format!("expected rank 2, got {s:?}"))),
        };
        let v = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        let ng = self.needs(&[a]);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.contains(&0) || numel(&shape) != self.value(a).len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(a)),
            ));
        }
        let out = self.value(a).to_vec();
        let ng = self.needs(&[a]);
        Ok(self.push(shape, out, Op::Reshape(a), ng))
    }

    /// Selects rows of a matrix (or elements of a vector) by index; indices
    /// may repeat. `[m,n] → [len,n]`, `[m] → [len]`.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        if indices.is_empty() {
            return Err(Error::shape("gather", "empty index list"));
        }
        let (rows, cols, rank1) = match self.shape(a) {
            [m] => (*m, 1, true),
            [m, n] => (*m, *n, false),
            s => return Err(Error::shape("gather", format!("expected rank 1 or 2, got {s:?}"))),
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range for {rows} rows"),
            ));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&v[i * cols..(i + 1) * cols]);
        }
        let shape = if rank1 {
            vec![indices.len()]
        } else {
            vec![indices.len(), cols]
        };
        let ng = self.needs(&[a]);
        Ok(self.push(shape, out, Op::Gather(a, indices.to_vec()), ng))
    }

    /// Stacks rows. Rank-1 inputs of length `n` count as one `[1,n]` row.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let mut cols = None;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p), "concat")?;
            if *cols.get_or_insert(c) != c {
                return Err(Error::shape(
                    "concat",
                    format!("row width {c} differs from {}", cols.unwrap()),
                ));
            }
            rows += r;
        }
        let cols = cols.unwrap();
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let ng = self.needs(parts);
        Ok(self.push(vec![rows, cols], out, Op::Concat(parts.to_vec()), ng))
    }

    /// Reverse sweep from a single-element `loss`.
    ///
    /// Afterwards every leaf created from a `requires_grad` tensor has a
    /// gradient, zero if the loss does not depend on it. Gradients from
    /// multiple consumers accumulate additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(mut g) = self.grads[i].take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            if self.fault == Some(self.nodes[i].op.kind()) {
                g.iter_mut().for_each(|x| *x *= FAULT_FACTOR);
            }
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.needs_grad && matches!(node.op, Op::Leaf) && self.grads[i].is_none() {
                self.grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, target: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let n = self.nodes[target.0].value.len();
        let slot = self.grads[target.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Cloning the op releases the borrow on `self.nodes`; saved vectors
        // are small next to the values they describe.
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.nodes[a.0].needs_grad {
                    let bv = self.value(b).to_vec();
                    self.accumulate(a, |da| {
                        for r in 0..m {
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                let grow = &g[r * n..(r + 1) * n];
                                da[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                }
                if self.nodes[b.0].needs_grad {
                    let av = self.value(a).to_vec();
                    self.accumulate(b, |db| {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let x = av[r * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                for (d, &y) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *d += x * y;
                                }
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, |d| add_into(d, g));
                self.accumulate(b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(a, |d| add_into(d, g));
                self.accumulate(b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let av = self.value(a).to_vec();
                let bv = self.value(b).to_vec();
                self.accumulate(a, |d| {
                    for ((x, gy), y) in d.iter_mut().zip(g).zip(&bv) {
                        *x += gy * y;
                    }
                });
                self.accumulate(b, |d| {
                    for ((x, gy), y) in d.iter_mut().zip(g).zip(&av) {
                        *x += gy * y;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::Exp(a) => {
                let out = self.nodes[i].value.clone();
                self.accumulate(a, |d| {
                    for ((x, gy), y) in d.iter_mut().zip(g).zip(&out) {
                        *x += gy * y;
                    }
                });
            }
            Op::Log(a) => {
                let inp = self.value(a).to_vec();
                self.accumulate(a, |d| {
                    for ((x, gy), v) in d.iter_mut().zip(g).zip(&inp) {
                        *x += gy / v;
                    }
                });
            }
            Op::Tanh(a) => {
                let out = self.nodes[i].value.clone();
                self.accumulate(a, |d| {
                    for ((x, gy), y) in d.iter_mut().zip(g).zip(&out) {
                        *x += gy * (1.0 - y * y);
                    }
                });
            }
            Op::Sum(a) => {
                self.accumulate(a, |d| d.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean(a) => {
                let n = self.value(a).len() as f64;
                self.accumulate(a, |d| d.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::LogSumExp(a) => {
                let cols = *self.shape(a).last().unwrap();
                let inp = self.value(a).to_vec();
                let out = self.nodes[i].value.clone();
                self.accumulate(a, |d| {
                    for (r, (drow, xrow)) in d.chunks_mut(cols).zip(inp.chunks(cols)).enumerate() {
                        for (dx, x) in drow.iter_mut().zip(xrow) {
                            *dx += g[r] * (x - out[r]).exp();
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let cols = *self.shape(a).last().unwrap();
                let out = self.nodes[i].value.clone();
                self.accumulate(a, |d| {
                    for ((drow, yrow), grow) in d.chunks_mut(cols).zip(out.chunks(cols)).zip(g.chunks(cols)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, gy)| y * gy).sum();
                        for ((dx, y), gy) in drow.iter_mut().zip(yrow).zip(grow) {
                            *dx += y * (gy - dot);
                        }
                    }
                });
            }
            Op::L2Normalize(a, norms) => {
                let cols = *self.shape(a).last().unwrap();
                let out = self.nodes[i].value.clone();
                self.accumulate(a, |d| {
                    for (r, ((drow, yrow), grow)) in
                        d.chunks_mut(cols).zip(out.chunks(cols)).zip(g.chunks(cols)).enumerate()
                    {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, gy)| y * gy).sum();
                        for ((dx, y), gy) in drow.iter_mut().zip(yrow).zip(grow) {
                            *dx += (gy - y * dot) / norms[r];
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                self.accumulate(a, |d| {
                    for r in 0..m {
                        for c in 0..n {
                            d[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.accumulate(a, |d| add_into(d, g));
            }
            Op::Gather(a, indices) => {
                let cols = if self.shape(a).len() == 1 { 1 } else { self.shape(a)[1] };
                self.accumulate(a, |d| {
                    for (r, &src) in indices.iter().enumerate() {
                        add_into(&mut d[src * cols..(src + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(p).len();
                    self.accumulate(p, |d| add_into(d, &g[offset..offset + n]));
                    offset += n;
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
