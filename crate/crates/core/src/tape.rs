//! Tape-based reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node holding its value
//! and whatever the backward rule needs. [`Tape::backward`] walks the nodes
//! in reverse and applies one explicit vector-Jacobian rule per op.
//!
//! Leaves created with [`Tape::constant`] never receive a gradient buffer,
//! and neither does any node whose inputs are all constants.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulTransposed,
    Transpose,
    Add,
    AddRow,
    Scale,
    Softmax,
    LayerNorm,
    Gelu,
    ConcatRows,
    StackRows,
    SliceRows,
    CrossEntropy,
    SquaredDistance,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 14] = [
        OpKind::MatMul,
        OpKind::MatMulTransposed,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::AddRow,
        OpKind::Scale,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::ConcatRows,
        OpKind::StackRows,
        OpKind::SliceRows,
        OpKind::CrossEntropy,
        OpKind::SquaredDistance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::MatMulTransposed => "matmul_transposed",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::AddRow => "add_row",
            OpKind::Scale => "scale",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::ConcatRows => "concat_rows",
            OpKind::StackRows => "stack_rows",
            OpKind::SliceRows => "slice_rows",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::SquaredDistance => "squared_distance",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::DIFFERENTIABLE
            .iter()
            .copied()
            .find(|k| k.name() == name)
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulTransposed(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    ConcatRows(Var, Var),
    StackRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    SquaredDistance(Var, Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulTransposed(..) => OpKind::MatMulTransposed,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu(..) => OpKind::Gelu,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::StackRows(..) => OpKind::StackRows,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::SquaredDistance(..) => OpKind::SquaredDistance,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    sign_flip: Option<OpKind>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` for nodes that do not require a gradient or that the loss
    /// does not depend on.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose backward rule for `kind` returns negated gradients.
    /// Exists so the gradient checker can be shown to catch a broken rule.
    pub fn with_sign_flip(kind: OpKind) -> Self {
        Tape {
            nodes: Vec::new(),
            sign_flip: Some(kind),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A frozen leaf: no gradient is ever produced for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_transposed(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_transposed(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMulTransposed(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a length-D vector to every row of a T×D matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let (_, cols) = xv.as_matrix()?;
        if bv.len() != cols {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).scale(factor);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, factor), rg)
    }

    /// Softmax over the last axis of a vector or matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (_, cols) = xv.as_matrix()?;
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(cols) {
            kernels::softmax_in_place(row);
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Per-row normalization to zero mean and unit (population) variance,
    /// followed by the affine map `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let xv = self.value(x);
        let (_, cols) = xv.as_matrix()?;
        let g = self.value(gamma);
        let b = self.value(beta);
        if g.len() != cols {
            return Err(Error::shape("layer_norm", xv.shape(), g.shape()));
        }
        if b.len() != cols {
            return Err(Error::shape("layer_norm", xv.shape(), b.shape()));
        }
        let mut normalized = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            inv_std.push(rstd);
            for (j, v) in row.iter().enumerate() {
                let xh = (v - mean) * rstd;
                normalized.push(xh);
                out.push(g.data()[j] * xh + b.data()[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Stacks the rows of `a` on top of the rows of `b`. A 1-D operand
    /// counts as a single row.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (ar, ac) = av.as_matrix()?;
        let (br, bc) = bv.as_matrix()?;
        if ac != bc {
            return Err(Error::shape("concat_rows", av.shape(), bv.shape()));
        }
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let value = Tensor::new(vec![ar + br, ac], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::ConcatRows(a, b), rg))
    }

    /// Stacks the rows of every operand, in order, into one matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::InvalidTensor("stack_rows needs at least one operand".into()));
        };
        let (_, cols) = self.value(*first).as_matrix()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let pv = self.value(*p);
            let (r, c) = pv.as_matrix()?;
            if c != cols {
                return Err(Error::shape("stack_rows", self.value(*first).shape(), pv.shape()));
            }
            rows += r;
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::StackRows(parts.to_vec()), rg))
    }

    /// Rows `start..start + len` as a `len × D` matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.as_matrix()?;
        if len == 0 || start + len > rows {
            return Err(Error::InvalidTensor(format!(
                "slice_rows {start}..{} out of range for {rows} rows",
                start + len
            )));
        }
        let data = xv.data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::new(vec![len, cols], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    /// `-log softmax(logits)[label]`, as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        let n = lv.len();
        if label >= n {
            return Err(Error::Data(format!("label {label} out of range for {n} classes")));
        }
        let lse = kernels::log_sum_exp(lv.data());
        let loss = lse - lv.data()[label];
        let probs = lv.data().iter().map(|v| (v - lse).exp()).collect();
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            rg,
        ))
    }

    /// `‖a − b‖²`, as a scalar.
    pub fn squared_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.len() != bv.len() {
            return Err(Error::shape("squared_distance", av.shape(), bv.shape()));
        }
        let d: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(d), Op::SquaredDistance(a, b), rg))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::InvalidTensor(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        if !loss_value.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (before, current) = grads.split_at_mut(i);
            let Some(upstream) = current[0].as_ref() else {
                continue;
            };
            let sign = if self.sign_flip == Some(node.op.kind()) {
                -1.0
            } else {
                1.0
            };
            let mut sink = GradSink {
                tape: self,
                grads: before,
                sign,
            };
            self.backward_node(node, upstream, &mut sink)?;
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), data)
                        .expect("gradient matches node shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, dy: &[f64], sink: &mut GradSink<'_>) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (p, q) = self.value(*a).as_matrix()?;
                let (_, r) = self.value(*b).as_matrix()?;
                if sink.wants(*a) {
                    let mut da = vec![0.0; p * q];
                    kernels::matmul_nt(dy, self.value(*b).data(), &mut da, p, r, q);
                    sink.add(*a, da);
                }
                if sink.wants(*b) {
                    let mut db = vec![0.0; q * r];
                    kernels::matmul_tn(self.value(*a).data(), dy, &mut db, q, p, r);
                    sink.add(*b, db);
                }
            }
            Op::MatMulTransposed(a, b) => {
                let (p, q) = self.value(*a).as_matrix()?;
                let (r, _) = self.value(*b).as_matrix()?;
                if sink.wants(*a) {
                    let mut da = vec![0.0; p * q];
                    kernels::matmul(dy, self.value(*b).data(), &mut da, p, r, q);
                    sink.add(*a, da);
                }
                if sink.wants(*b) {
                    let mut db = vec![0.0; r * q];
                    kernels::matmul_tn(dy, self.value(*a).data(), &mut db, r, p, q);
                    sink.add(*b, db);
                }
            }
            Op::Transpose(x) => {
                if sink.wants(*x) {
                    let (r, c) = node.value.as_matrix()?;
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[j * r + i] = dy[i * c + j];
                        }
                    }
                    sink.add(*x, dx);
                }
            }
            Op::Add(a, b) => {
                if sink.wants(*a) {
                    sink.add(*a, dy.to_vec());
                }
                if sink.wants(*b) {
                    sink.add(*b, dy.to_vec());
                }
            }
            Op::AddRow(x, bias) => {
                if sink.wants(*x) {
                    sink.add(*x, dy.to_vec());
                }
                if sink.wants(*bias) {
                    let cols = self.value(*bias).len();
                    let mut db = vec![0.0; cols];
                    for row in dy.chunks(cols) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    sink.add(*bias, db);
                }
            }
            Op::Scale(x, factor) => {
                if sink.wants(*x) {
                    sink.add(*x, dy.iter().map(|g| g * factor).collect());
                }
            }
            Op::Softmax(x) => {
                if sink.wants(*x) {
                    let cols = node.value.cols();
                    let mut dx = vec![0.0; dy.len()];
                    for ((y, g), out) in node
                        .value
                        .data()
                        .chunks(cols)
                        .zip(dy.chunks(cols))
                        .zip(dx.chunks_mut(cols))
                    {
                        let inner: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in out.iter_mut().zip(y).zip(g) {
                            *o = yv * (gv - inner);
                        }
                    }
                    sink.add(*x, dx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let cols = self.value(*gamma).len();
                let gv = self.value(*gamma).data();
                if sink.wants(*x) {
                    let mut dx = vec![0.0; dy.len()];
                    let mut dxh = vec![0.0; cols];
                    for (r, ((g_row, xh_row), out)) in dy
                        .chunks(cols)
                        .zip(normalized.chunks(cols))
                        .zip(dx.chunks_mut(cols))
                        .enumerate()
                    {
                        for j in 0..cols {
                            dxh[j] = g_row[j] * gv[j];
                        }
                        let mean_dxh = dxh.iter().sum::<f64>() / cols as f64;
                        let mean_dxh_xh =
                            dxh.iter().zip(xh_row).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for j in 0..cols {
                            out[j] = inv_std[r] * (dxh[j] - mean_dxh - xh_row[j] * mean_dxh_xh);
                        }
                    }
                    sink.add(*x, dx);
                }
                if sink.wants(*gamma) {
                    let mut dg = vec![0.0; cols];
                    for (g_row, xh_row) in dy.chunks(cols).zip(normalized.chunks(cols)) {
                        for j in 0..cols {
                            dg[j] += g_row[j] * xh_row[j];
                        }
                    }
                    sink.add(*gamma, dg);
                }
                if sink.wants(*beta) {
                    let mut db = vec![0.0; cols];
                    for g_row in dy.chunks(cols) {
                        for j in 0..cols {
                            db[j] += g_row[j];
                        }
                    }
                    sink.add(*beta, db);
                }
            }
            Op::Gelu(x) => {
                if sink.wants(*x) {
                    let dx = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(dy)
                        .map(|(&v, g)| g * gelu_grad(v))
                        .collect();
                    sink.add(*x, dx);
                }
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).len();
                if sink.wants(*a) {
                    sink.add(*a, dy[..split].to_vec());
                }
                if sink.wants(*b) {
                    sink.add(*b, dy[split..].to_vec());
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if sink.wants(*p) {
                        sink.add(*p, dy[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                if sink.wants(*x) {
                    let xv = self.value(*x);
                    let cols = xv.cols();
                    let mut dx = vec![0.0; xv.len()];
                    dx[start * cols..start * cols + dy.len()].copy_from_slice(dy);
                    sink.add(*x, dx);
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                if sink.wants(*logits) {
                    let g = dy[0];
                    let mut dl: Vec<f64> = probs.iter().map(|p| g * p).collect();
                    dl[*label] -= g;
                    sink.add(*logits, dl);
                }
            }
            Op::SquaredDistance(a, b) => {
                let g = dy[0];
                let diff: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(x, y)| 2.0 * g * (x - y))
                    .collect();
                if sink.wants(*b) {
                    sink.add(*b, diff.iter().map(|d| -d).collect());
                }
                if sink.wants(*a) {
                    sink.add(*a, diff);
                }
            }
        }
        Ok(())
    }
}

struct GradSink<'a> {
    tape: &'a Tape,
    grads: &'a mut [Option<Vec<f64>>],
    sign: f64,
}

impl GradSink<'_> {
    fn wants(&self, var: Var) -> bool {
        self.tape.nodes[var.0].requires_grad
    }

    fn add(&mut self, var: Var, mut delta: Vec<f64>) {
        if self.sign != 1.0 {
            delta.iter_mut().for_each(|d| *d *= self.sign);
        }
        match &mut self.grads[var.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(&delta) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }
}
