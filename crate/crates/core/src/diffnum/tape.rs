use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};
use super::DiffError;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to an array recorded on a [`Tape`].
///
/// The handle is `Copy`; values and gradients live on the tape that
/// created it. Using a handle with a different tape is an error.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

impl Var {
    pub fn index(&self) -> usize {
        self.id
    }
}

/// Frame positions and rotary frequencies for one rotary application.
#[derive(Debug, Clone)]
pub struct RopeTable {
    pub head_dim: usize,
    pub heads: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(positions: &[f64], heads: usize, head_dim: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = p * freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Self {
            head_dim,
            heads,
            cos,
            sin,
        }
    }

    pub fn rows(&self) -> usize {
        self.cos.len() / (self.head_dim / 2).max(1)
    }

    fn apply(&self, x: &[f64], out: &mut [f64], inverse: bool) {
        let half = self.head_dim / 2;
        let width = self.heads * self.head_dim;
        let sign = if inverse { -1.0 } else { 1.0 };
        for r in 0..self.rows() {
            for h in 0..self.heads {
                let base = r * width + h * self.head_dim;
                for i in 0..half {
                    let c = self.cos[r * half + i];
                    let s = sign * self.sin[r * half + i];
                    let x1 = x[base + i];
                    let x2 = x[base + i + half];
                    out[base + i] = x1 * c - x2 * s;
                    out[base + i + half] = x1 * s + x2 * c;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    ScalarMul(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SqNorm(Var),
    Softmax(Var, usize),
    MaskedSoftmax(Var),
    RmsNorm(Var, Var, f64),
    Silu(Var),
    Tanh(Var),
    Sqrt(Var),
    Rope(Var, Rc<RopeTable>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::ScalarMul(..) => "scalar_mul",
            Op::AddRow(..) => "add_row",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SqNorm(..) => "sq_norm",
            Op::Softmax(..) => "softmax",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::RmsNorm(..) => "rms_norm",
            Op::Silu(..) => "silu",
            Op::Tanh(..) => "tanh",
            Op::Sqrt(..) => "sqrt",
            Op::Rope(..) => "rope",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of array operations supporting one reverse sweep.
///
/// Nodes are appended in evaluation order, so every record's inputs
/// precede it. A tape built with [`Tape::no_grad`] still evaluates values
/// but records nothing that backward could follow.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grad_enabled: bool,
    consumed: bool,
    peak_len: usize,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the loss does not reach it.
    pub fn get(&self, var: Var) -> Vec<f64> {
        assert_eq!(var.tape, self.tape, "gradient lookup with a foreign handle");
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => vec![0.0; self.shapes[var.id].iter().product()],
        }
    }

    /// `true` when backward deposited a contribution on `var`.
    pub fn reached(&self, var: Var) -> bool {
        self.grads[var.id].is_some()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
            peak_len: 0,
        }
    }

    /// A tape that evaluates without recording backward structure.
    pub fn no_grad() -> Self {
        let mut t = Self::new();
        t.grad_enabled = false;
        t
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Largest node count the tape has held.
    pub fn peak_len(&self) -> usize {
        self.peak_len.max(self.nodes.len())
    }

    /// Current length, usable with [`Tape::rewind`].
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drop every node recorded after `mark`. Handles to dropped nodes
    /// become invalid.
    pub fn rewind(&mut self, mark: usize) {
        self.peak_len = self.peak_len();
        self.nodes.truncate(mark);
    }

    fn check(&self, v: Var) -> Result<&Node, DiffError> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(DiffError::ForeignVar);
        }
        Ok(&self.nodes[v.id])
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.id].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        assert_eq!(v.tape, self.id, "value lookup with a foreign handle");
        &self.nodes[v.id].value
    }

    pub fn value_rc(&self, v: Var) -> Rc<Vec<f64>> {
        self.nodes[v.id].value.clone()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn leaf_rc(&mut self, value: Rc<Vec<f64>>, shape: &[usize], trainable: bool) -> Result<Var, DiffError> {
        if numel(shape) != value.len() {
            return Err(DiffError::ShapeMismatch {
                op: "leaf",
                left: shape.to_vec(),
                right: vec![value.len()],
            });
        }
        let requires_grad = trainable && self.grad_enabled;
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        })
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<Var, DiffError> {
        self.leaf_rc(Rc::new(value), shape, true)
    }

    /// Trainable leaf sharing storage with the caller.
    pub fn param_shared(&mut self, value: Rc<Vec<f64>>, shape: &[usize]) -> Result<Var, DiffError> {
        self.leaf_rc(value, shape, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<Var, DiffError> {
        self.leaf_rc(Rc::new(value), shape, false)
    }

    pub fn constant_shared(&mut self, value: Rc<Vec<f64>>, shape: &[usize]) -> Result<Var, DiffError> {
        self.leaf_rc(value, shape, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.push(vec![1, 1], vec![v], Op::Leaf, false)
    }

    /// Value-equal copy that blocks gradient flow into `x`.
    pub fn detach(&mut self, x: Var) -> Result<Var, DiffError> {
        let n = self.check(x)?;
        let (value, shape) = (n.value.clone(), n.shape.clone());
        self.leaf_rc(value, &shape, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        let (na, nb) = (self.check(a)?, self.check(b)?);
        if na.shape != nb.shape {
            return Err(DiffError::ShapeMismatch {
                op,
                left: na.shape.clone(),
                right: nb.shape.clone(),
            });
        }
        Ok(())
    }

    fn matrix(&self, op: &'static str, a: Var) -> Result<(usize, usize), DiffError> {
        let n = self.check(a)?;
        match n.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(DiffError::ShapeMismatch {
                op,
                left: other.to_vec(),
                right: vec![],
            }),
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.id].requires_grad)
    }

    fn zip_map(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var, DiffError> {
        self.same_shape(op.name(), a, b)?;
        let va = &self.nodes[a.id].value;
        let vb = &self.nodes[b.id].value;
        let value: Vec<f64> = va.iter().zip(vb.iter()).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.nodes[a.id].shape.clone();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, op, rg))
    }

    fn map(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Result<Var, DiffError> {
        let n = self.check(a)?;
        let value: Vec<f64> = n.value.iter().map(|x| f(*x)).collect();
        let shape = n.shape.clone();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_map(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_map(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_map(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_map(Op::Div(a, b), a, b, |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, DiffError> {
        self.map(Op::Scale(a, k), a, |x| x * k)
    }

    /// `a + k` elementwise.
    pub fn offset(&mut self, a: Var, k: f64) -> Result<Var, DiffError> {
        self.map(Op::Offset(a), a, |x| x + k)
    }

    /// Scalar-valued `s` times array `a`.
    pub fn scalar_mul(&mut self, s: Var, a: Var) -> Result<Var, DiffError> {
        let ns = self.check(s)?;
        if numel(&ns.shape) != 1 {
            return Err(DiffError::ShapeMismatch {
                op: "scalar_mul",
                left: ns.shape.clone(),
                right: self.check(a)?.shape.clone(),
            });
        }
        let k = ns.value[0];
        let na = self.check(a)?;
        let value: Vec<f64> = na.value.iter().map(|x| x * k).collect();
        let shape = na.shape.clone();
        let rg = self.rg(&[s, a]);
        Ok(self.push(shape, value, Op::ScalarMul(s, a), rg))
    }

    /// Adds a `1×c` row to every row of an `r×c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        let (r, c) = self.matrix("add_row", a)?;
        let nr = self.check(row)?;
        if numel(&nr.shape) != c {
            return Err(DiffError::ShapeMismatch {
                op: "add_row",
                left: vec![r, c],
                right: nr.shape.clone(),
            });
        }
        let va = &self.nodes[a.id].value;
        let vr = &self.nodes[row.id].value;
        let mut value = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                value.push(va[i * c + j] + vr[j]);
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(vec![r, c], value, Op::AddRow(a, row), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut value = vec![0.0; m * n];
        matmul_acc(&mut value, &self.nodes[a.id].value, &self.nodes[b.id].value, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        let (r, c) = self.matrix("transpose", a)?;
        let value = kernels::transpose(&self.nodes[a.id].value, r, c);
        let rg = self.rg(&[a]);
        Ok(self.push(vec![c, r], value, Op::Transpose(a), rg))
    }

    /// Stacks matrices along the row (frame) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::Invalid("concat_rows of nothing".into()));
        }
        let (_, c) = self.matrix("concat_rows", parts[0])?;
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            let (r, cc) = self.matrix("concat_rows", p)?;
            if cc != c {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![rows, c],
                    right: vec![r, cc],
                });
            }
            rows += r;
            value.extend_from_slice(&self.nodes[p.id].value);
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, c], value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Joins matrices side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::Invalid("concat_cols of nothing".into()));
        }
        let (r, _) = self.matrix("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (rr, c) = self.matrix("concat_cols", p)?;
            if rr != r {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![r, 0],
                    right: vec![rr, c],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut value = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = &self.nodes[p.id].value;
            for i in 0..r {
                value[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![r, total], value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let (r, c) = self.matrix("slice_rows", a)?;
        if start + len > r {
            return Err(DiffError::ShapeMismatch {
                op: "slice_rows",
                left: vec![r, c],
                right: vec![start, len],
            });
        }
        let value = self.nodes[a.id].value[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![len, c], value, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let (r, c) = self.matrix("slice_cols", a)?;
        if start + len > c {
            return Err(DiffError::ShapeMismatch {
                op: "slice_cols",
                left: vec![r, c],
                right: vec![start, len],
            });
        }
        let src = &self.nodes[a.id].value;
        let mut value = Vec::with_capacity(r * len);
        for i in 0..r {
            value.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![r, len], value, Op::SliceCols(a, start), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let n = self.check(a)?;
        if numel(&n.shape) != numel(shape) {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                left: n.shape.clone(),
                right: shape.to_vec(),
            });
        }
        let value = n.value.as_ref().clone();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let s: f64 = self.check(a)?.value.iter().sum();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![1, 1], vec![s], Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let n = self.check(a)?;
        let len = n.value.len().max(1);
        let s: f64 = n.value.iter().sum::<f64>() / len as f64;
        let rg = self.rg(&[a]);
        Ok(self.push(vec![1, 1], vec![s], Op::Mean(a), rg))
    }

    /// Squared L2 norm `Σ a²`.
    pub fn sq_norm(&mut self, a: Var) -> Result<Var, DiffError> {
        let s: f64 = self.check(a)?.value.iter().map(|x| x * x).sum();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![1, 1], vec![s], Op::SqNorm(a), rg))
    }

    /// Softmax of a matrix along `axis` (0 = down columns, 1 = along rows).
    /// Max-subtracted.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let (r, c) = self.matrix("softmax", a)?;
        if axis > 1 {
            return Err(DiffError::Invalid(format!("softmax axis {axis} on a matrix")));
        }
        let src = &self.nodes[a.id].value;
        let mut value = vec![0.0; r * c];
        let (outer, inner, stride_o, stride_i) = if axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
        for o in 0..outer {
            let idx = |i: usize| o * stride_o + i * stride_i;
            let mut mx = f64::NEG_INFINITY;
            for i in 0..inner {
                mx = mx.max(src[idx(i)]);
            }
            let mut z = 0.0;
            for i in 0..inner {
                let e = (src[idx(i)] - mx).exp();
                value[idx(i)] = e;
                z += e;
            }
            for i in 0..inner {
                value[idx(i)] /= z;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![r, c], value, Op::Softmax(a, axis), rg))
    }

    /// Row softmax over entries where `allowed` is true; disallowed entries
    /// are exactly zero. Each row needs at least one allowed entry.
    pub fn masked_softmax(&mut self, a: Var, allowed: &[bool]) -> Result<Var, DiffError> {
        let (r, c) = self.matrix("masked_softmax", a)?;
        if allowed.len() != r * c {
            return Err(DiffError::ShapeMismatch {
                op: "masked_softmax",
                left: vec![r, c],
                right: vec![allowed.len()],
            });
        }
        let src = &self.nodes[a.id].value;
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mask = &allowed[i * c..(i + 1) * c];
            let mut mx = f64::NEG_INFINITY;
            for (x, &m) in row.iter().zip(mask) {
                if m {
                    mx = mx.max(*x);
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(DiffError::Invalid(format!("masked_softmax row {i} fully masked")));
            }
            let mut z = 0.0;
            for j in 0..c {
                if mask[j] {
                    let e = (row[j] - mx).exp();
                    value[i * c + j] = e;
                    z += e;
                }
            }
            for j in 0..c {
                value[i * c + j] /= z;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![r, c], value, Op::MaskedSoftmax(a), rg))
    }

    /// Row-wise root-mean-square normalization with a `1×c` gain.
    pub fn rms_norm(&mut self, a: Var, gain: Var, eps: f64) -> Result<Var, DiffError> {
        let (r, c) = self.matrix("rms_norm", a)?;
        let ng = self.check(gain)?;
        if numel(&ng.shape) != c {
            return Err(DiffError::ShapeMismatch {
                op: "rms_norm",
                left: vec![r, c],
                right: ng.shape.clone(),
            });
        }
        let src = &self.nodes[a.id].value;
        let g = &self.nodes[gain.id].value;
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let ms = row.iter().map(|x| x * x).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for j in 0..c {
                value[i * c + j] = row[j] * inv * g[j];
            }
        }
        let rg = self.rg(&[a, gain]);
        Ok(self.push(vec![r, c], value, Op::RmsNorm(a, gain, eps), rg))
    }

    /// Sigmoid-weighted linear unit `x·σ(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var, DiffError> {
        self.map(Op::Silu(a), a, |x| x * kernels::sigmoid(x))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        self.map(Op::Tanh(a), a, f64::tanh)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, DiffError> {
        self.map(Op::Sqrt(a), a, f64::sqrt)
    }

    /// Rotary position rotation of a `rows × (heads·head_dim)` matrix.
    pub fn rope(&mut self, a: Var, table: Rc<RopeTable>) -> Result<Var, DiffError> {
        let (r, c) = self.matrix("rope", a)?;
        if r != table.rows() || c != table.heads * table.head_dim || table.head_dim % 2 != 0 {
            return Err(DiffError::ShapeMismatch {
                op: "rope",
                left: vec![r, c],
                right: vec![table.rows(), table.heads * table.head_dim],
            });
        }
        let mut value = vec![0.0; r * c];
        table.apply(&self.nodes[a.id].value, &mut value, false);
        let rg = self.rg(&[a]);
        Ok(self.push(vec![r, c], value, Op::Rope(a, table), rg))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, DiffError> {
        if self.consumed {
            return Err(DiffError::TapeConsumed);
        }
        let n = self.check(loss)?;
        if numel(&n.shape) != 1 {
            return Err(DiffError::NonScalarLoss(n.shape.clone()));
        }
        self.consumed = true;
        let len = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; len];
        if self.nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
            grads,
        })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| -> &[f64] { &nodes[v.id].value };
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.id].requires_grad {
                return;
            }
            let slot = grads[v.id].get_or_insert_with(|| vec![0.0; nodes[v.id].value.len()]);
            f(slot);
        };
        let node = &nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / vb[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * k)),
            Op::Offset(a) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::ScalarMul(sv, a) => {
                let k = val(*sv)[0];
                let va = val(*a);
                let dot: f64 = va.iter().zip(g).map(|(x, g)| x * g).sum();
                acc(*sv, &mut |s| s[0] += dot);
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * k));
            }
            Op::AddRow(a, row) => {
                let c = nodes[row.id].value.len();
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*row, &mut |s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i % c] += gv;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.id].shape[0], nodes[a.id].shape[1]);
                let n = nodes[b.id].shape[1];
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| matmul_a_bt_acc(s, g, vb, m, k, n));
                acc(*b, &mut |s| matmul_at_b_acc(s, va, g, m, k, n));
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.id].shape[0], nodes[a.id].shape[1]);
                acc(*a, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.id].value.len();
                    acc(*p, &mut |s| s.iter_mut().zip(&g[off..off + len]).for_each(|(s, g)| *s += g));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let rows = node.shape[0];
                let mut off = 0;
                for p in parts {
                    let w = nodes[p.id].shape[1];
                    acc(*p, &mut |s| {
                        for i in 0..rows {
                            for j in 0..w {
                                s[i * w + j] += g[i * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                let c = node.shape[1];
                acc(*a, &mut |s| {
                    s[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(s, g)| *s += g)
                });
            }
            Op::SliceCols(a, start) => {
                let (r, len) = (node.shape[0], node.shape[1]);
                let c = nodes[a.id].shape[1];
                acc(*a, &mut |s| {
                    for i in 0..r {
                        for j in 0..len {
                            s[i * c + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.id].value.len().max(1) as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::SqNorm(a) => {
                let va = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += 2.0 * va[i] * g[0];
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let y = &node.value;
                let (r, c) = (node.shape[0], node.shape[1]);
                let (outer, inner, so, si) = if *axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
                acc(*a, &mut |s| {
                    for o in 0..outer {
                        let dot: f64 = (0..inner).map(|i| y[o * so + i * si] * g[o * so + i * si]).sum();
                        for i in 0..inner {
                            let k = o * so + i * si;
                            s[k] += y[k] * (g[k] - dot);
                        }
                    }
                });
            }
            Op::MaskedSoftmax(a) => {
                let y = &node.value;
                let c = node.shape[1];
                acc(*a, &mut |s| {
                    for (i, row) in y.chunks(c).enumerate() {
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = row.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..c {
                            s[i * c + j] += row[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::RmsNorm(a, gain, eps) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let (x, gv) = (val(*a), val(*gain));
                let mut dx = vec![0.0; r * c];
                let mut dg = vec![0.0; c];
                for i in 0..r {
                    let row = &x[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
                    let inv = 1.0 / (ms + eps).sqrt();
                    // u = g ⊙ gain; dx = inv·u − inv³·x·(x·u)/c
                    let mut xu = 0.0;
                    for j in 0..c {
                        xu += row[j] * gr[j] * gv[j];
                        dg[j] += gr[j] * row[j] * inv;
                    }
                    let k = inv * inv * inv * xu / c as f64;
                    for j in 0..c {
                        dx[i * c + j] = inv * gr[j] * gv[j] - k * row[j];
                    }
                }
                acc(*a, &mut |s| s.iter_mut().zip(&dx).for_each(|(s, d)| *s += d));
                acc(*gain, &mut |s| s.iter_mut().zip(&dg).for_each(|(s, d)| *s += d));
            }
            Op::Silu(a) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        let sg = kernels::sigmoid(x[i]);
                        s[i] += g[i] * (sg + x[i] * sg * (1.0 - sg));
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = &node.value;
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * 0.5 / y[i];
                    }
                });
            }
            Op::Rope(a, table) => {
                let mut back = vec![0.0; g.len()];
                table.apply(g, &mut back, true);
                acc(*a, &mut |s| s.iter_mut().zip(&back).for_each(|(s, d)| *s += d));
            }
        }
    }
}
