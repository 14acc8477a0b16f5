//! Reverse-mode automatic differentiation over an explicit, per-pass tape.
//!
//! Every operation appends one node holding its output value and the
//! information its backward rule needs. Nodes only ever refer to earlier
//! nodes, so walking ids in descending order is a reverse topological
//! traversal and each node is visited once.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::nn::{self, ConvSpec, ResizeScale};
use crate::tensor::{broadcast_zip, split_axis, sum_to_shape, Real, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    Exp,
    Sqrt,
    Neg,
    Abs,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

pub(crate) enum Op<T: Real> {
    Leaf,
    Unary {
        x: NodeId,
        kind: UnaryKind,
    },
    Affine {
        x: NodeId,
        mul: T,
    },
    Binary {
        a: NodeId,
        b: NodeId,
        kind: BinaryKind,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    TransposeLast {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    Reduce {
        x: NodeId,
        kind: ReduceKind,
        axis: Option<usize>,
        argmax: Vec<usize>,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: ConvSpec,
    },
    L2Normalize {
        x: NodeId,
        axis: usize,
        eps: T,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        offset: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Resize {
        x: NodeId,
        scale: ResizeScale,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    SliceChannels {
        x: NodeId,
        start: usize,
    },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Unary { .. } => "unary",
            Op::Affine { .. } => "affine",
            Op::Binary { .. } => "binary",
            Op::MatMul { .. } => "matmul",
            Op::TransposeLast { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Reduce { .. } => "reduce",
            Op::Softmax { .. } => "softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::LayerNorm { .. } => "layernorm",
            Op::Resize { .. } => "resize",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Concat { .. } => "concat",
            Op::SliceChannels { .. } => "slice_channels",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => vec![],
            Op::Unary { x, .. }
            | Op::Affine { x, .. }
            | Op::TransposeLast { x }
            | Op::Reshape { x }
            | Op::Reduce { x, .. }
            | Op::Softmax { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::Resize { x, .. }
            | Op::GlobalAvgPool { x }
            | Op::SliceChannels { x, .. } => vec![x],
            Op::Binary { a, b, .. } | Op::MatMul { a, b } | Op::Concat { a, b } => vec![a, b],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![x, w];
                v.extend(b);
                v
            }
            Op::LayerNorm {
                x, gain, offset, ..
            } => vec![x, gain, offset],
        }
    }
}

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recording of one forward pass.
pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    branches: Cell<u64>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f32> {
    tape: &'t Tape<T>,
    id: NodeId,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], keyed by leaf.
pub struct Gradients<T: Real = f32> {
    tape_addr: usize,
    by_node: HashMap<NodeId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the root with respect to `var`, if it was reachable and required grad.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        if var.tape as *const Tape<T> as usize != self.tape_addr {
            return None;
        }
        self.by_node.get(&var.id)
    }

    /// Like [`get`](Self::get) but yields zeros for leaves the root never reached.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::raw(var.shape(), vec![T::zero(); var.numel()]))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            branches: Cell::new(0xcbf2_9ce4_8422_2325),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable input: gradients are reported for it.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    fn push_raw(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records an op output, rejecting non-finite results.
    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>) -> Result<Var<'_, T>> {
        if !value.all_finite() {
            return Err(Error::numeric(op.name(), "produced NaN or infinite values"));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn note_branches(&self, taken: impl Iterator<Item = u64>) {
        let mut h = self.branches.get();
        for t in taken {
            h = (h ^ t).wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.branches.set(h);
    }

    /// Hash of every branch taken by piecewise operations so far (the sign
    /// of each ReLU and abs input, each max winner). Two evaluations with
    /// equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        self.branches.get()
    }

    pub(crate) fn value_of(&self, id: NodeId) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad_of(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn owns(&self, var: Var<'_, T>) -> bool {
        std::ptr::eq(self, var.tape) && var.id < self.len()
    }

    pub fn elementwise<'t>(
        &'t self,
        kind: ElementwiseKind,
        a: Var<'t, T>,
        b: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        match (kind.as_unary(), kind.as_binary(), b) {
            (Some(u), _, None) => a.unary(u),
            (_, Some(k), Some(b)) => a.binary(b, k),
            (Some(_), _, Some(_)) => Err(shape_err!("{kind:?} takes one operand")),
            _ => Err(shape_err!("{kind:?} needs two operands")),
        }
    }

    /// Backpropagates from a scalar root, returning gradients for every
    /// trainable leaf the root depends on.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        if !self.owns(root) {
            return Err(Error::Tape("backward root is not recorded on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.id).map(|_| None).collect();
        let mut out = HashMap::new();
        if nodes[root.id].requires_grad {
            grads[root.id] = Some(Tensor::raw(
                nodes[root.id].value.shape().to_vec(),
                vec![T::one()],
            ));
        }
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    out.insert(id, g);
                }
                continue;
            }
            for (input, contribution) in backward_rule(&nodes, id, &g)? {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients {
            tape_addr: self as *const Tape<T> as usize,
            by_node: out,
        })
    }
}

/// The operation set of the generic `elementwise` entry point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Sigmoid,
    Exp,
    Sqrt,
    Neg,
}

impl ElementwiseKind {
    fn as_unary(self) -> Option<UnaryKind> {
        Some(match self {
            ElementwiseKind::Relu => UnaryKind::Relu,
            ElementwiseKind::Sigmoid => UnaryKind::Sigmoid,
            ElementwiseKind::Exp => UnaryKind::Exp,
            ElementwiseKind::Sqrt => UnaryKind::Sqrt,
            ElementwiseKind::Neg => UnaryKind::Neg,
            _ => return None,
        })
    }

    fn as_binary(self) -> Option<BinaryKind> {
        Some(match self {
            ElementwiseKind::Add => BinaryKind::Add,
            ElementwiseKind::Sub => BinaryKind::Sub,
            ElementwiseKind::Mul => BinaryKind::Mul,
            ElementwiseKind::Div => BinaryKind::Div,
            _ => return None,
        })
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    /// Borrow of the value without bumping the refcount.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        let nodes: Ref<'_, Vec<Node<T>>> = self.tape.nodes.borrow();
        f(&nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    pub fn numel(&self) -> usize {
        self.with_value(|v| v.numel())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Tape("operands live on different tapes".into()))
        }
    }

    pub fn unary(self, kind: UnaryKind) -> Result<Var<'t, T>> {
        let x = self.value();
        if kind == UnaryKind::Sqrt {
            if let Some(v) = x.data().iter().find(|v| **v < T::zero()) {
                return Err(Error::numeric("sqrt", format!("negative operand {v}")));
            }
        }
        if matches!(kind, UnaryKind::Relu | UnaryKind::Abs) {
            self.tape.note_branches(x.data().iter().map(|&v| (v > T::zero()) as u64));
        }
        let f: fn(T) -> T = match kind {
            UnaryKind::Relu => |v| if v > T::zero() { v } else { T::zero() },
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Exp => |v| v.exp(),
            UnaryKind::Sqrt => |v| v.sqrt(),
            UnaryKind::Neg => |v| -v,
            UnaryKind::Abs => |v| v.abs(),
            UnaryKind::Square => |v| v * v,
        };
        self.tape.push(x.map(f), Op::Unary { x: self.id, kind })
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Relu)
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Exp)
    }

    pub fn sqrt(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Neg)
    }

    pub fn abs(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Abs)
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Square)
    }

    /// `mul * x + add` with constant coefficients.
    pub fn affine(self, mul: T, add: T) -> Result<Var<'t, T>> {
        let y = self.value().map(|v| mul * v + add);
        self.tape.push(y, Op::Affine { x: self.id, mul })
    }

    pub fn scale(self, factor: T) -> Result<Var<'t, T>> {
        self.affine(factor, T::zero())
    }

    pub fn binary(self, other: Var<'t, T>, kind: BinaryKind) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let out = match kind {
            BinaryKind::Add => broadcast_zip(&a, &b, |x, y| x + y)?,
            BinaryKind::Sub => broadcast_zip(&a, &b, |x, y| x - y)?,
            BinaryKind::Mul => broadcast_zip(&a, &b, |x, y| x * y)?,
            BinaryKind::Div => {
                if b.data().iter().any(|v| *v == T::zero()) {
                    return Err(Error::numeric("div", "exact zero divisor"));
                }
                broadcast_zip(&a, &b, |x, y| x / y)?
            }
        };
        self.tape.push(
            out,
            Op::Binary {
                a: self.id,
                b: other.id,
                kind,
            },
        )
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Div)
    }

    /// Batched matrix product. Rank-3 operands treat the leading extent as batch;
    /// a rank-2 right operand is shared across the batch.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let dims = MatDims::of(a.shape(), b.shape())?;
        let out = matmul_kernel(a.data(), b.data(), &dims);
        let shape = dims.out_shape(a.rank());
        self.tape.push(
            Tensor::raw(shape, out),
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
        )
    }

    /// Swaps the last two extents.
    pub fn transpose_last(self) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() < 2 {
            return Err(shape_err!("transpose needs rank >= 2, got {:?}", x.shape()));
        }
        let out = transpose_last_kernel(&x);
        self.tape.push(out, Op::TransposeLast { x: self.id })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().reshape(shape)?;
        self.tape.push(out, Op::Reshape { x: self.id })
    }

    pub fn reduce(self, kind: ReduceKind, axis: Option<usize>, keep: bool) -> Result<Var<'t, T>> {
        let x = self.value();
        let (out, argmax) = reduce_kernel(&x, kind, axis, keep)?;
        self.tape.note_branches(argmax.iter().map(|&i| i as u64));
        self.tape.push(
            out,
            Op::Reduce {
                x: self.id,
                kind,
                axis,
                argmax,
            },
        )
    }

    pub fn sum(self, axis: Option<usize>, keep: bool) -> Result<Var<'t, T>> {
        self.reduce(ReduceKind::Sum, axis, keep)
    }

    pub fn mean(self, axis: Option<usize>, keep: bool) -> Result<Var<'t, T>> {
        self.reduce(ReduceKind::Mean, axis, keep)
    }

    pub fn max(self, axis: Option<usize>, keep: bool) -> Result<Var<'t, T>> {
        self.reduce(ReduceKind::Max, axis, keep)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(shape_err!("softmax axis {axis} out of range for {:?}", x.shape()));
        }
        if !x.all_finite() {
            return Err(Error::numeric("softmax", "non-finite input"));
        }
        let out = softmax_kernel(&x, axis);
        self.tape.push(out, Op::Softmax { x: self.id, axis })
    }
}

fn reduce_kernel<T: Real>(
    x: &Tensor<T>,
    kind: ReduceKind,
    axis: Option<usize>,
    keep: bool,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let shape = x.shape();
    let (outer, extent, inner, out_shape) = match axis {
        None => {
            let s = if keep { vec![1; shape.len()] } else { vec![1] };
            (1, x.numel(), 1, s)
        }
        Some(ax) => {
            if ax >= shape.len() {
                return Err(shape_err!("reduce axis {ax} out of range for {shape:?}"));
            }
            let (o, e, i) = split_axis(shape, ax);
            let mut s = shape.to_vec();
            if keep {
                s[ax] = 1;
            } else {
                s.remove(ax);
                if s.is_empty() {
                    s.push(1);
                }
            }
            (o, e, i, s)
        }
    };
    let data = x.data();
    let mut out = Vec::with_capacity(outer * inner);
    let mut argmax = Vec::new();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| data[(o * extent + k) * inner + i];
            match kind {
                ReduceKind::Sum | ReduceKind::Mean => {
                    let mut s = T::zero();
                    for k in 0..extent {
                        s += at(k);
                    }
                    if kind == ReduceKind::Mean {
                        s = s / T::of(extent as f64);
                    }
                    out.push(s);
                }
                ReduceKind::Max => {
                    let mut best = 0;
                    for k in 1..extent {
                        if at(k) > at(best) {
                            best = k;
                        }
                    }
                    argmax.push(best);
                    out.push(at(best));
                }
            }
        }
    }
    Ok((Tensor::raw(out_shape, out), argmax))
}

fn softmax_kernel<T: Real>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, extent, inner) = split_axis(x.shape(), axis);
    let data = x.data();
    let mut out = vec![T::zero(); data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * extent + k) * inner + i;
            let mut m = data[idx(0)];
            for k in 1..extent {
                m = m.max(data[idx(k)]);
            }
            let mut s = T::zero();
            for k in 0..extent {
                let e = (data[idx(k)] - m).exp();
                out[idx(k)] = e;
                s += e;
            }
            for k in 0..extent {
                out[idx(k)] = out[idx(k)] / s;
            }
        }
    }
    Tensor::raw(x.shape().to_vec(), out)
}

fn transpose_last_kernel<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let r = x.rank();
    let (rows, cols) = (x.shape()[r - 2], x.shape()[r - 1]);
    let batch = x.numel() / (rows * cols);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for bt in 0..batch {
        let base = bt * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                out[base + j * rows + i] = src[base + i * cols + j];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::raw(shape, out)
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
}

impl MatDims {
    fn of(a: &[usize], b: &[usize]) -> Result<Self> {
        let (batch, m, k) = match a.len() {
            2 => (1, a[0], a[1]),
            3 => (a[0], a[1], a[2]),
            _ => return Err(shape_err!("matmul left operand must be rank 2 or 3, got {a:?}")),
        };
        let (b_batch, k2, n, b_shared) = match b.len() {
            2 => (batch, b[0], b[1], a.len() == 3),
            3 => (b[0], b[1], b[2], false),
            _ => return Err(shape_err!("matmul right operand must be rank 2 or 3, got {b:?}")),
        };
        if a.len() == 2 && b.len() == 3 {
            return Err(shape_err!("matmul of rank-2 {a:?} by rank-3 {b:?} is not supported"));
        }
        if k != k2 {
            return Err(shape_err!("matmul inner extents differ: {a:?} x {b:?}"));
        }
        if b_batch != batch {
            return Err(shape_err!("matmul batch extents differ: {a:?} x {b:?}"));
        }
        Ok(MatDims {
            batch,
            m,
            k,
            n,
            b_shared,
        })
    }

    fn out_shape(&self, a_rank: usize) -> Vec<usize> {
        if a_rank == 2 {
            vec![self.m, self.n]
        } else {
            vec![self.batch, self.m, self.n]
        }
    }

    fn b_offset(&self, bt: usize) -> usize {
        if self.b_shared {
            0
        } else {
            bt * self.k * self.n
        }
    }
}

fn matmul_kernel<T: Real>(a: &[T], b: &[T], d: &MatDims) -> Vec<T> {
    let mut out = vec![T::zero(); d.batch * d.m * d.n];
    for bt in 0..d.batch {
        let a = &a[bt * d.m * d.k..(bt + 1) * d.m * d.k];
        let b = &b[d.b_offset(bt)..d.b_offset(bt) + d.k * d.n];
        let o = &mut out[bt * d.m * d.n..(bt + 1) * d.m * d.n];
        for i in 0..d.m {
            let row = &mut o[i * d.n..(i + 1) * d.n];
            for p in 0..d.k {
                let av = a[i * d.k + p];
                for (r, &bv) in row.iter_mut().zip(&b[p * d.n..(p + 1) * d.n]) {
                    *r += av * bv;
                }
            }
        }
    }
    out
}

type Contribution<T> = Vec<(NodeId, Tensor<T>)>;

fn backward_rule<T: Real>(nodes: &[Node<T>], id: NodeId, g: &Tensor<T>) -> Result<Contribution<T>> {
    let node = &nodes[id];
    let val = |i: NodeId| -> &Tensor<T> { &nodes[i].value };
    let wants = |i: NodeId| nodes[i].requires_grad;
    let y = &node.value;
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Unary { x, kind } => {
            let xv = val(*x);
            let gd = g.data();
            let data: Vec<T> = match kind {
                UnaryKind::Relu => xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect(),
                UnaryKind::Sigmoid => y
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&s, &g)| g * s * (T::one() - s))
                    .collect(),
                UnaryKind::Exp => y.data().iter().zip(gd).map(|(&e, &g)| g * e).collect(),
                UnaryKind::Sqrt => y
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&r, &g)| {
                        if r > T::zero() {
                            g / (T::of(2.0) * r)
                        } else {
                            T::zero()
                        }
                    })
                    .collect(),
                UnaryKind::Neg => gd.iter().map(|&g| -g).collect(),
                UnaryKind::Abs => xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| {
                        if v > T::zero() {
                            g
                        } else if v < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect(),
                UnaryKind::Square => xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| T::of(2.0) * v * g)
                    .collect(),
            };
            out.push((*x, Tensor::raw(g.shape().to_vec(), data)));
        }
        Op::Affine { x, mul } => {
            let m = *mul;
            out.push((*x, g.map(|v| v * m)));
        }
        Op::Binary { a, b, kind } => {
            let (av, bv) = (val(*a), val(*b));
            match kind {
                BinaryKind::Add => {
                    if wants(*a) {
                        out.push((*a, sum_to_shape(g, av.shape())));
                    }
                    if wants(*b) {
                        out.push((*b, sum_to_shape(g, bv.shape())));
                    }
                }
                BinaryKind::Sub => {
                    if wants(*a) {
                        out.push((*a, sum_to_shape(g, av.shape())));
                    }
                    if wants(*b) {
                        out.push((*b, sum_to_shape(&g.map(|v| -v), bv.shape())));
                    }
                }
                BinaryKind::Mul => {
                    if wants(*a) {
                        let ga = broadcast_zip(g, bv, |g, b| g * b)?;
                        out.push((*a, sum_to_shape(&ga, av.shape())));
                    }
                    if wants(*b) {
                        let gb = broadcast_zip(g, av, |g, a| g * a)?;
                        out.push((*b, sum_to_shape(&gb, bv.shape())));
                    }
                }
                BinaryKind::Div => {
                    if wants(*a) {
                        let ga = broadcast_zip(g, bv, |g, b| g / b)?;
                        out.push((*a, sum_to_shape(&ga, av.shape())));
                    }
                    if wants(*b) {
                        // d(a/b)/db = -(a/b)/b = -y/b
                        let gy = broadcast_zip(g, y, |g, y| -g * y)?;
                        let gb = broadcast_zip(&gy, bv, |v, b| v / b)?;
                        out.push((*b, sum_to_shape(&gb, bv.shape())));
                    }
                }
            }
        }
        Op::MatMul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let d = MatDims::of(av.shape(), bv.shape())?;
            let gd = g.data();
            if wants(*a) {
                // ga[i,p] = sum_j g[i,j] b[p,j]
                let mut ga = vec![T::zero(); av.numel()];
                for bt in 0..d.batch {
                    let b = &bv.data()[d.b_offset(bt)..d.b_offset(bt) + d.k * d.n];
                    for i in 0..d.m {
                        let grow = &gd[(bt * d.m + i) * d.n..(bt * d.m + i + 1) * d.n];
                        for p in 0..d.k {
                            let brow = &b[p * d.n..(p + 1) * d.n];
                            let mut s = T::zero();
                            for (&x, &y) in grow.iter().zip(brow) {
                                s += x * y;
                            }
                            ga[(bt * d.m + i) * d.k + p] = s;
                        }
                    }
                }
                out.push((*a, Tensor::raw(av.shape().to_vec(), ga)));
            }
            if wants(*b) {
                // gb[p,j] = sum_i a[i,p] g[i,j]
                let mut gb = vec![T::zero(); bv.numel()];
                for bt in 0..d.batch {
                    let a = &av.data()[bt * d.m * d.k..(bt + 1) * d.m * d.k];
                    let off = d.b_offset(bt);
                    for i in 0..d.m {
                        let grow = &gd[(bt * d.m + i) * d.n..(bt * d.m + i + 1) * d.n];
                        for p in 0..d.k {
                            let av = a[i * d.k + p];
                            let dst = &mut gb[off + p * d.n..off + (p + 1) * d.n];
                            for (o, &gv) in dst.iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                }
                out.push((*b, Tensor::raw(bv.shape().to_vec(), gb)));
            }
        }
        Op::TransposeLast { x } => {
            out.push((*x, transpose_last_kernel(g)));
        }
        Op::Reshape { x } => {
            out.push((*x, Tensor::raw(val(*x).shape().to_vec(), g.data().to_vec())));
        }
        Op::Reduce {
            x,
            kind,
            axis,
            argmax,
        } => {
            let xv = val(*x);
            let (outer, extent, inner) = match axis {
                None => (1, xv.numel(), 1),
                Some(ax) => split_axis(xv.shape(), *ax),
            };
            let mut gx = vec![T::zero(); xv.numel()];
            let gd = g.data();
            let inv = T::one() / T::of(extent as f64);
            for o in 0..outer {
                for i in 0..inner {
                    let gv = gd[o * inner + i];
                    match kind {
                        ReduceKind::Sum => {
                            for k in 0..extent {
                                gx[(o * extent + k) * inner + i] = gv;
                            }
                        }
                        ReduceKind::Mean => {
                            for k in 0..extent {
                                gx[(o * extent + k) * inner + i] = gv * inv;
                            }
                        }
                        ReduceKind::Max => {
                            let k = argmax[o * inner + i];
                            gx[(o * extent + k) * inner + i] = gv;
                        }
                    }
                }
            }
            out.push((*x, Tensor::raw(xv.shape().to_vec(), gx)));
        }
        Op::Softmax { x, axis } => {
            let (outer, extent, inner) = split_axis(y.shape(), *axis);
            let (yd, gd) = (y.data(), g.data());
            let mut gx = vec![T::zero(); yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * extent + k) * inner + i;
                    let mut s = T::zero();
                    for k in 0..extent {
                        s += gd[idx(k)] * yd[idx(k)];
                    }
                    for k in 0..extent {
                        gx[idx(k)] = yd[idx(k)] * (gd[idx(k)] - s);
                    }
                }
            }
            out.push((*x, Tensor::raw(y.shape().to_vec(), gx)));
        }
        Op::Conv2d { x, w, b, spec } => {
            let grads = nn::conv2d_backward(val(*x), val(*w), g, spec, wants(*x), wants(*w));
            if let Some(gx) = grads.input {
                out.push((*x, gx));
            }
            if let Some(gw) = grads.weight {
                out.push((*w, gw));
            }
            if let Some(b) = b {
                if wants(*b) {
                    out.push((*b, grads.bias));
                }
            }
        }
        Op::L2Normalize { x, axis, eps } => {
            out.push((*x, nn::l2_normalize_backward(val(*x), g, *axis, *eps)));
        }
        Op::LayerNorm {
            x,
            gain,
            offset,
            xhat,
            rstd,
        } => {
            let lg = nn::layernorm_backward(val(*gain), g, xhat, rstd);
            if wants(*x) {
                out.push((*x, lg.input));
            }
            if wants(*gain) {
                out.push((*gain, lg.gain));
            }
            if wants(*offset) {
                out.push((*offset, lg.offset));
            }
        }
        Op::Resize { x, scale } => {
            out.push((*x, nn::resize_backward(val(*x).shape(), g, *scale)));
        }
        Op::GlobalAvgPool { x } => {
            out.push((*x, nn::global_avg_pool_backward(val(*x).shape(), g)));
        }
        Op::Concat { a, b } => {
            let ca = val(*a).shape()[1];
            let cb = val(*b).shape()[1];
            if wants(*a) {
                out.push((*a, nn::slice_channels_kernel(g, 0, ca)));
            }
            if wants(*b) {
                out.push((*b, nn::slice_channels_kernel(g, ca, cb)));
            }
        }
        Op::SliceChannels { x, start } => {
            let xv = val(*x);
            out.push((*x, nn::unslice_channels(xv.shape(), g, *start)));
        }
    }
    Ok(out)
}
