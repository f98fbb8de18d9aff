use std::cell::{Cell, RefCell};
use std::sync::Arc;

use super::{Tensor, TensorError};

/// Elementwise binary operations. Operands must have identical shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Hadamard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
    Exp,
    Neg,
    /// `max(0, x)`, with derivative 0 taken at exactly 0.
    ReluMax0,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Binary(BinaryOp, usize, usize),
    Unary(UnaryOp, usize),
    Scale(usize, f64),
    ScaleRows(usize, Arc<[f64]>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    TileRows(usize),
    GatherRows(usize, Arc<[usize]>),
    ScatterAddRows(usize, Arc<[usize]>),
    Reshape(usize),
    WhereMask(usize, Arc<[bool]>),
    Reduce(ReduceOp, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Binary(BinaryOp::Add, ..) => "add",
            Op::Binary(BinaryOp::Sub, ..) => "sub",
            Op::Binary(BinaryOp::Hadamard, ..) => "hadamard",
            Op::Unary(UnaryOp::Sigmoid, _) => "sigmoid",
            Op::Unary(UnaryOp::Tanh, _) => "tanh",
            Op::Unary(UnaryOp::Exp, _) => "exp",
            Op::Unary(UnaryOp::Neg, _) => "neg",
            Op::Unary(UnaryOp::ReluMax0, _) => "relu_max0",
            Op::Scale(..) => "scale",
            Op::ScaleRows(..) => "scale_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::TileRows(..) => "tile_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterAddRows(..) => "scatter_add_rows",
            Op::Reshape(..) => "reshape",
            Op::WhereMask(..) => "where_mask",
            Op::Reduce(ReduceOp::Sum, _) => "sum",
            Op::Reduce(ReduceOp::Mean, _) => "mean",
        }
    }
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for one reverse-mode pass.
///
/// Nodes are appended in evaluation order, so every operand precedes its
/// output. The tape accepts exactly one [`Tape::backward`] call.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
    validate: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    rows: usize,
    cols: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<Tensor> {
        let g = self.grads.get(var.id)?.as_ref()?;
        let (r, c) = self.shapes[var.id];
        Tensor::new(r, c, g.clone()).ok()
    }

    /// Raw gradient buffer for `var`; `None` if it received no gradient.
    pub fn raw(&self, var: &Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id)?.as_deref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that rejects any operation producing NaN or infinity.
    pub fn validating() -> Self {
        Self { validate: true, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records `t` as a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push_leaf(t.rows(), t.cols(), t.data().to_vec(), t.requires_grad())
    }

    /// Records a non-differentiable leaf, taking ownership of the buffer.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        let (r, c) = t.shape();
        self.push_leaf(r, c, t.into_data(), false)
    }

    fn push_leaf(&self, rows: usize, cols: usize, value: Vec<f64>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { rows, cols, value, op: Op::Leaf, requires_grad });
        Var { tape: self, id, rows, cols }
    }

    fn push(&self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Result<Var<'_>, TensorError> {
        if self.validate && value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Binary(_, a, b) => nodes[*a].requires_grad || nodes[*b].requires_grad,
            Op::ConcatCols(parts) => parts.iter().any(|&p| nodes[p].requires_grad),
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::ScaleRows(a, _)
            | Op::SliceRows(a, _)
            | Op::TileRows(a)
            | Op::GatherRows(a, _)
            | Op::ScatterAddRows(a, _)
            | Op::Reshape(a)
            | Op::WhereMask(a, _)
            | Op::Reduce(_, a) => nodes[*a].requires_grad,
        };
        let id = nodes.len();
        nodes.push(Node { rows, cols, value, op, requires_grad });
        Ok(Var { tape: self, id, rows, cols })
    }

    fn check_owner(&self, v: &Var<'_>, op: &'static str) -> Result<(), TensorError> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(TensorError::ForeignVar { op })
        }
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    pub fn matmul<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.check_owner(&a, "matmul")?;
        self.check_owner(&b, "matmul")?;
        if a.cols != b.rows {
            return Err(TensorError::Shape { op: "matmul", lhs: a.shape(), rhs: b.shape() });
        }
        let (m, k, n) = (a.rows, a.cols, b.cols);
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.nodes.borrow();
            gemm(m, k, n, &nodes[a.id].value, (k, 1), &nodes[b.id].value, (n, 1), &mut out, 0.0);
        }
        self.push(m, n, out, Op::MatMul(a.id, b.id))
    }

    pub fn elementwise<'t>(&'t self, op: BinaryOp, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>, TensorError> {
        let name = Op::Binary(op, 0, 0).name();
        self.check_owner(&a, name)?;
        self.check_owner(&b, name)?;
        if a.shape() != b.shape() {
            return Err(TensorError::Shape { op: name, lhs: a.shape(), rhs: b.shape() });
        }
        let out: Vec<f64> = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.id].value, &nodes[b.id].value);
            match op {
                BinaryOp::Add => x.iter().zip(y).map(|(p, q)| p + q).collect(),
                BinaryOp::Sub => x.iter().zip(y).map(|(p, q)| p - q).collect(),
                BinaryOp::Hadamard => x.iter().zip(y).map(|(p, q)| p * q).collect(),
            }
        };
        self.push(a.rows, a.cols, out, Op::Binary(op, a.id, b.id))
    }

    pub fn unary<'t>(&'t self, op: UnaryOp, a: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.check_owner(&a, "unary")?;
        let f: fn(f64) -> f64 = match op {
            UnaryOp::Sigmoid => sigmoid,
            UnaryOp::Tanh => f64::tanh,
            UnaryOp::Exp => f64::exp,
            UnaryOp::Neg => |x| -x,
            UnaryOp::ReluMax0 => |x| if x > 0.0 { x } else { 0.0 },
        };
        let out = self.with_value(a.id, |x| x.iter().map(|&v| f(v)).collect());
        self.push(a.rows, a.cols, out, Op::Unary(op, a.id))
    }

    pub fn reduce<'t>(&'t self, op: ReduceOp, a: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.check_owner(&a, "reduce")?;
        let s: f64 = self.with_value(a.id, |x| x.iter().sum());
        let v = match op {
            ReduceOp::Sum => s,
            ReduceOp::Mean => s / (a.rows * a.cols).max(1) as f64,
        };
        self.push(1, 1, vec![v], Op::Reduce(op, a.id))
    }

    /// Column-wise concatenation of parts with equal row counts.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
        let first = parts.first().ok_or(TensorError::Argument {
            op: "concat_cols",
            msg: "at least one part is required".into(),
        })?;
        for p in parts {
            self.check_owner(p, "concat_cols")?;
            if p.rows != first.rows {
                return Err(TensorError::Shape { op: "concat_cols", lhs: first.shape(), rhs: p.shape() });
            }
        }
        let rows = first.rows;
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Vec::with_capacity(rows * cols);
        {
            let nodes = self.nodes.borrow();
            for r in 0..rows {
                for p in parts {
                    let v = &nodes[p.id].value;
                    out.extend_from_slice(&v[r * p.cols..(r + 1) * p.cols]);
                }
            }
        }
        self.push(rows, cols, out, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    /// Runs the reverse pass from a 1x1 `loss`.
    ///
    /// Gradients accumulate additively across fan-out. The tape cannot be
    /// replayed: a second call returns [`TensorError::TapeConsumed`].
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TensorError> {
        self.check_owner(&loss, "backward")?;
        if loss.shape() != (1, 1) {
            return Err(TensorError::NonScalarLoss(loss.shape()));
        }
        if self.consumed.replace(true) {
            return Err(TensorError::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k, n) = (nodes[*a].rows, nodes[*a].cols, nodes[*b].cols);
                    if nodes[*a].requires_grad {
                        let ga = slot(&mut grads, &nodes, *a);
                        // dA = dOut * B^T
                        gemm(m, n, k, &g, (n, 1), &nodes[*b].value, (1, n), ga, 1.0);
                    }
                    if nodes[*b].requires_grad {
                        let gb = slot(&mut grads, &nodes, *b);
                        // dB = A^T * dOut
                        gemm(k, m, n, &nodes[*a].value, (1, k), &g, (n, 1), gb, 1.0);
                    }
                }
                Op::Binary(op, a, b) => {
                    let (a, b) = (*a, *b);
                    for (target, other, sign) in [(a, b, 1.0), (b, a, -1.0)] {
                        if !nodes[target].requires_grad {
                            continue;
                        }
                        let gt = slot(&mut grads, &nodes, target);
                        match op {
                            BinaryOp::Add => gt.iter_mut().zip(&g).for_each(|(t, v)| *t += v),
                            BinaryOp::Sub => gt.iter_mut().zip(&g).for_each(|(t, v)| *t += sign * v),
                            BinaryOp::Hadamard => {
                                let o = &nodes[other].value;
                                gt.iter_mut().zip(&g).zip(o).for_each(|((t, v), w)| *t += v * w);
                            }
                        }
                    }
                }
                Op::Unary(op, a) => {
                    if nodes[*a].requires_grad {
                        let x = &nodes[*a].value;
                        let y = &node.value;
                        let ga = slot(&mut grads, &nodes, *a);
                        for i in 0..g.len() {
                            ga[i] += g[i]
                                * match op {
                                    UnaryOp::Sigmoid => y[i] * (1.0 - y[i]),
                                    UnaryOp::Tanh => 1.0 - y[i] * y[i],
                                    UnaryOp::Exp => y[i],
                                    UnaryOp::Neg => -1.0,
                                    UnaryOp::ReluMax0 => {
                                        if x[i] > 0.0 {
                                            1.0
                                        } else {
                                            0.0
                                        }
                                    }
                                };
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if nodes[*a].requires_grad {
                        let ga = slot(&mut grads, &nodes, *a);
                        ga.iter_mut().zip(&g).for_each(|(t, v)| *t += c * v);
                    }
                }
                Op::ScaleRows(a, s) => {
                    if nodes[*a].requires_grad {
                        let cols = node.cols;
                        let ga = slot(&mut grads, &nodes, *a);
                        for (r, &f) in s.iter().enumerate() {
                            for c in r * cols..(r + 1) * cols {
                                ga[c] += f * g[c];
                            }
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = node.rows;
                    let mut offset = 0;
                    for &p in parts {
                        let pc = nodes[p].cols;
                        if nodes[p].requires_grad {
                            let gp = slot(&mut grads, &nodes, p);
                            for r in 0..rows {
                                let src = &g[r * node.cols + offset..r * node.cols + offset + pc];
                                gp[r * pc..(r + 1) * pc].iter_mut().zip(src).for_each(|(t, v)| *t += v);
                            }
                        }
                        offset += pc;
                    }
                }
                Op::SliceRows(a, start) => {
                    if nodes[*a].requires_grad {
                        let off = start * node.cols;
                        let ga = slot(&mut grads, &nodes, *a);
                        ga[off..off + g.len()].iter_mut().zip(&g).for_each(|(t, v)| *t += v);
                    }
                }
                Op::TileRows(a) => {
                    if nodes[*a].requires_grad {
                        let cols = node.cols;
                        let ga = slot(&mut grads, &nodes, *a);
                        for row in g.chunks_exact(cols) {
                            ga.iter_mut().zip(row).for_each(|(t, v)| *t += v);
                        }
                    }
                }
                Op::GatherRows(a, idx) => {
                    if nodes[*a].requires_grad {
                        let cols = node.cols;
                        let ga = slot(&mut grads, &nodes, *a);
                        for (k, &src) in idx.iter().enumerate() {
                            let row = &g[k * cols..(k + 1) * cols];
                            ga[src * cols..(src + 1) * cols].iter_mut().zip(row).for_each(|(t, v)| *t += v);
                        }
                    }
                }
                Op::ScatterAddRows(a, idx) => {
                    if nodes[*a].requires_grad {
                        let cols = node.cols;
                        let ga = slot(&mut grads, &nodes, *a);
                        for (k, &dst) in idx.iter().enumerate() {
                            let row = &g[dst * cols..(dst + 1) * cols];
                            ga[k * cols..(k + 1) * cols].iter_mut().zip(row).for_each(|(t, v)| *t += v);
                        }
                    }
                }
                Op::Reshape(a) => {
                    if nodes[*a].requires_grad {
                        let ga = slot(&mut grads, &nodes, *a);
                        ga.iter_mut().zip(&g).for_each(|(t, v)| *t += v);
                    }
                }
                Op::WhereMask(a, mask) => {
                    if nodes[*a].requires_grad {
                        let ga = slot(&mut grads, &nodes, *a);
                        for i in 0..g.len() {
                            if !mask[i] {
                                ga[i] += g[i];
                            }
                        }
                    }
                }
                Op::Reduce(op, a) => {
                    if nodes[*a].requires_grad {
                        let n = nodes[*a].value.len();
                        let scale = match op {
                            ReduceOp::Sum => g[0],
                            ReduceOp::Mean => g[0] / n.max(1) as f64,
                        };
                        let ga = slot(&mut grads, &nodes, *a);
                        ga.iter_mut().for_each(|t| *t += scale);
                    }
                }
            }
        }
        let shapes = nodes.iter().map(|n| (n.rows, n.cols)).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> &'g mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()])
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c = a * b + beta * c` for an m x k by k x n product with explicit
/// (row, col) strides on the inputs. `c` is dense row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every index reachable from the given
    // dimensions and strides, as asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Snapshot of the recorded value.
    pub fn value(&self) -> Tensor {
        let v = self.tape.with_value(self.id, <[f64]>::to_vec);
        Tensor::new(self.rows, self.cols, v).expect("node shapes are consistent")
    }

    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        self.tape.with_value(self.id, f)
    }

    /// Value of a 1x1 variable.
    pub fn item(&self) -> f64 {
        self.tape.with_value(self.id, |v| v[0])
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.tape.matmul(self, rhs)
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.tape.elementwise(BinaryOp::Add, self, rhs)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.tape.elementwise(BinaryOp::Sub, self, rhs)
    }

    pub fn hadamard(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.tape.elementwise(BinaryOp::Hadamard, self, rhs)
    }

    pub fn sigmoid(self) -> Result<Var<'t>, TensorError> {
        self.tape.unary(UnaryOp::Sigmoid, self)
    }

    pub fn tanh(self) -> Result<Var<'t>, TensorError> {
        self.tape.unary(UnaryOp::Tanh, self)
    }

    pub fn exp(self) -> Result<Var<'t>, TensorError> {
        self.tape.unary(UnaryOp::Exp, self)
    }

    pub fn neg(self) -> Result<Var<'t>, TensorError> {
        self.tape.unary(UnaryOp::Neg, self)
    }

    pub fn relu_max0(self) -> Result<Var<'t>, TensorError> {
        self.tape.unary(UnaryOp::ReluMax0, self)
    }

    pub fn sum(self) -> Result<Var<'t>, TensorError> {
        self.tape.reduce(ReduceOp::Sum, self)
    }

    pub fn mean(self) -> Result<Var<'t>, TensorError> {
        self.tape.reduce(ReduceOp::Mean, self)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>, TensorError> {
        let out = self.with_data(|x| x.iter().map(|v| c * v).collect());
        self.tape.push(self.rows, self.cols, out, Op::Scale(self.id, c))
    }

    /// Multiplies row `r` by `factors[r]`.
    pub fn scale_rows(self, factors: Arc<[f64]>) -> Result<Var<'t>, TensorError> {
        if factors.len() != self.rows {
            return Err(TensorError::Shape { op: "scale_rows", lhs: self.shape(), rhs: (factors.len(), 1) });
        }
        let cols = self.cols;
        let out = self.with_data(|x| {
            x.chunks_exact(cols.max(1))
                .zip(factors.iter())
                .flat_map(|(row, f)| row.iter().map(move |v| f * v))
                .collect()
        });
        self.tape.push(self.rows, self.cols, out, Op::ScaleRows(self.id, factors))
    }

    /// Rows `start..start + count`.
    pub fn slice_rows(self, start: usize, count: usize) -> Result<Var<'t>, TensorError> {
        if start + count > self.rows {
            return Err(TensorError::Argument {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of {}", start + count, self.rows),
            });
        }
        let cols = self.cols;
        let out = self.with_data(|x| x[start * cols..(start + count) * cols].to_vec());
        self.tape.push(count, cols, out, Op::SliceRows(self.id, start))
    }

    /// Repeats a 1 x c row vector `n` times.
    pub fn tile_rows(self, n: usize) -> Result<Var<'t>, TensorError> {
        if self.rows != 1 {
            return Err(TensorError::Shape { op: "tile_rows", lhs: self.shape(), rhs: (1, self.cols) });
        }
        let out = self.with_data(|x| x.repeat(n));
        self.tape.push(n, self.cols, out, Op::TileRows(self.id))
    }

    /// Output row `k` is input row `idx[k]`.
    pub fn gather_rows(self, idx: Arc<[usize]>) -> Result<Var<'t>, TensorError> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.rows) {
            return Err(TensorError::Argument { op: "gather_rows", msg: format!("row {bad} out of {}", self.rows) });
        }
        let cols = self.cols;
        let out = self.with_data(|x| {
            let mut out = Vec::with_capacity(idx.len() * cols);
            for &i in idx.iter() {
                out.extend_from_slice(&x[i * cols..(i + 1) * cols]);
            }
            out
        });
        self.tape.push(idx.len(), cols, out, Op::GatherRows(self.id, idx))
    }

    /// Sums input row `k` into output row `idx[k]` of an `n`-row result.
    pub fn scatter_add_rows(self, idx: Arc<[usize]>, n: usize) -> Result<Var<'t>, TensorError> {
        if idx.len() != self.rows {
            return Err(TensorError::Shape { op: "scatter_add_rows", lhs: self.shape(), rhs: (idx.len(), 1) });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TensorError::Argument { op: "scatter_add_rows", msg: format!("row {bad} out of {n}") });
        }
        let cols = self.cols;
        let out = self.with_data(|x| {
            let mut out = vec![0.0; n * cols];
            for (k, &dst) in idx.iter().enumerate() {
                out[dst * cols..(dst + 1) * cols]
                    .iter_mut()
                    .zip(&x[k * cols..(k + 1) * cols])
                    .for_each(|(o, v)| *o += v);
            }
            out
        });
        self.tape.push(n, cols, out, Op::ScatterAddRows(self.id, idx))
    }

    /// Reinterprets the row-major buffer with a new shape of equal size.
    pub fn reshape(self, rows: usize, cols: usize) -> Result<Var<'t>, TensorError> {
        if rows * cols != self.rows * self.cols {
            return Err(TensorError::Shape { op: "reshape", lhs: self.shape(), rhs: (rows, cols) });
        }
        let out = self.with_data(<[f64]>::to_vec);
        self.tape.push(rows, cols, out, Op::Reshape(self.id))
    }

    /// Entries where `mask` is set are replaced by the matching entry of
    /// `fill` (copied verbatim, no gradient); the rest pass through.
    pub fn where_mask(self, mask: Arc<[bool]>, fill: &Tensor) -> Result<Var<'t>, TensorError> {
        if fill.shape() != self.shape() || mask.len() != fill.len() {
            return Err(TensorError::Shape { op: "where_mask", lhs: self.shape(), rhs: fill.shape() });
        }
        let out = self.with_data(|x| {
            x.iter().zip(fill.data()).zip(mask.iter()).map(|((&a, &f), &m)| if m { f } else { a }).collect()
        });
        self.tape.push(self.rows, self.cols, out, Op::WhereMask(self.id, mask))
    }
}
