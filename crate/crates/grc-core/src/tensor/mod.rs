//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! Every trainable operation in the crate is expressed through [`DiffTensor`].
//! A [`Tape`] records one operation node per produced tensor; node order is a
//! topological order by construction, so [`DiffTensor::backward`] is a single
//! reverse scan over the reachable prefix of the tape. Tensors are immutable
//! after creation except for their gradient buffer, and a tape (with all its
//! tensors) stays on one thread.
//!
//! Storage is row-major. Binary operations broadcast in exactly one pattern:
//! one operand may be a rank-1 vector matched against the other operand's last
//! axis (bias-style). Repeated `backward` calls accumulate gradients until
//! [`Tape::zero_grads`] is called.

mod check;

pub use check::{gradient_check, GradCheckReport};

use crate::error::{Error, Result};
use std::cell::RefCell;
use std::rc::Rc;

/// Row index sentinel for [`DiffTensor::gather_rows`]: produces a zero row and
/// receives no gradient.
pub const GATHER_PAD: usize = usize::MAX;

const MASK_NEG: f64 = -1.0e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    /// Shapes equal.
    None,
    /// Right operand is a rank-1 vector over the left's last axis.
    RhsVec,
    /// Left operand is a rank-1 vector over the right's last axis.
    LhsVec,
}

#[derive(Debug, Clone, Copy)]
enum UnKind {
    Exp,
    Log,
    Neg,
    Relu,
    Sqrt,
    Recip,
    Softplus,
    AddConst(f64),
    MulConst(f64),
    Clamp(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RedKind {
    Sum,
    Mean,
}

enum Op {
    Leaf,
    Matmul {
        a: usize,
        b: usize,
    },
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
        bcast: Bcast,
    },
    Unary {
        kind: UnKind,
        a: usize,
    },
    SoftmaxLast {
        a: usize,
    },
    Reduce {
        kind: RedKind,
        a: usize,
        axis: usize,
    },
    GatherRows {
        a: usize,
        idx: Rc<Vec<usize>>,
    },
    SliceCols {
        a: usize,
        start: usize,
    },
    SliceRows {
        a: usize,
        start: usize,
    },
    ConcatCols {
        parts: Vec<usize>,
    },
    ConcatRows {
        a: usize,
        b: usize,
    },
    Transpose {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Rc<Vec<i64>>,
        ignore: i64,
        n_valid: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

impl Node {
    fn inputs(&self) -> Vec<usize> {
        match &self.op {
            Op::Leaf => vec![],
            Op::Matmul { a, b } | Op::ConcatRows { a, b } => vec![*a, *b],
            Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Unary { a, .. }
            | Op::SoftmaxLast { a }
            | Op::Reduce { a, .. }
            | Op::GatherRows { a, .. }
            | Op::SliceCols { a, .. }
            | Op::SliceRows { a, .. }
            | Op::Transpose { a }
            | Op::Reshape { a } => vec![*a],
            Op::ConcatCols { parts } => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    /// Accumulated multiply-add count, used by the attention cost-scaling
    /// checks. Matmul dominates; elementwise ops count their element count.
    cost: u64,
}

/// Recording tape. Cheap to clone (shared handle).
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiply-add operations recorded so far.
    pub fn cost(&self) -> u64 {
        self.inner.borrow().cost
    }

    pub fn zero_grads(&self) {
        for node in self.inner.borrow_mut().nodes.iter_mut() {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, cost: u64) -> DiffTensor {
        debug_assert_eq!(numel(&shape), value.len());
        let grad = vec![0.0; value.len()];
        let mut inner = self.inner.borrow_mut();
        inner.cost += cost;
        let idx = inner.nodes.len();
        inner.nodes.push(Node {
            shape: shape.clone(),
            value,
            grad,
            op,
        });
        DiffTensor {
            tape: self.clone(),
            idx,
            shape,
        }
    }

    /// Create a leaf tensor.
    pub fn leaf(&self, data: Vec<f64>, shape: &[usize]) -> Result<DiffTensor> {
        if numel(shape) != data.len() {
            return Err(Error::Dimension {
                op: "leaf",
                msg: format!("shape {:?} does not hold {} values", shape, data.len()),
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, 0))
    }

    pub fn scalar(&self, v: f64) -> DiffTensor {
        self.push(vec![], vec![v], Op::Leaf, 0)
    }

    pub fn vector(&self, data: &[f64]) -> DiffTensor {
        self.push(vec![data.len()], data.to_vec(), Op::Leaf, 0)
    }

    pub fn matrix(&self, rows: usize, cols: usize, data: Vec<f64>) -> Result<DiffTensor> {
        self.leaf(data, &[rows, cols])
    }

    pub fn zeros(&self, shape: &[usize]) -> DiffTensor {
        self.push(shape.to_vec(), vec![0.0; numel(shape)], Op::Leaf, 0)
    }

    pub fn full(&self, shape: &[usize], v: f64) -> DiffTensor {
        self.push(shape.to_vec(), vec![v; numel(shape)], Op::Leaf, 0)
    }

    /// Mask vector for attention scores: 0 where kept, a large negative
    /// constant where masked out.
    pub fn attention_mask(&self, keep: &[bool]) -> DiffTensor {
        let data: Vec<f64> = keep
            .iter()
            .map(|&k| if k { 0.0 } else { MASK_NEG })
            .collect();
        self.vector(&data)
    }
}

/// Handle to one tensor on a tape.
#[derive(Clone)]
pub struct DiffTensor {
    tape: Tape,
    idx: usize,
    shape: Vec<usize>,
}

impl std::fmt::Debug for DiffTensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffTensor")
            .field("idx", &self.idx)
            .field("shape", &self.shape)
            .finish()
    }
}

macro_rules! with_nodes {
    ($self:expr, $nodes:ident, $body:expr) => {{
        let inner = $self.tape.inner.borrow();
        let $nodes = &inner.nodes;
        $body
    }};
}

impl DiffTensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Vec<f64> {
        with_nodes!(self, nodes, nodes[self.idx].value.clone())
    }

    /// Copy of the accumulated gradient.
    pub fn grad(&self) -> Vec<f64> {
        with_nodes!(self, nodes, nodes[self.idx].grad.clone())
    }

    pub fn item(&self) -> f64 {
        with_nodes!(self, nodes, {
            debug_assert_eq!(nodes[self.idx].value.len(), 1);
            nodes[self.idx].value[0]
        })
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension {
                op,
                msg: format!("expected rank-2 tensor, got shape {:?}", self.shape),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn same_tape(&self, other: &DiffTensor, op: &'static str) -> Result<()> {
        if !Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            return Err(Error::TapeMismatch { op });
        }
        Ok(())
    }

    // ---- matmul ----

    pub fn matmul(&self, other: &DiffTensor) -> Result<DiffTensor> {
        self.same_tape(other, "matmul")?;
        let (n, k) = self.rows_cols("matmul")?;
        let (k2, p) = other.rows_cols("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let out = with_nodes!(self, nodes, {
            let a = &nodes[self.idx].value;
            let b = &nodes[other.idx].value;
            let mut c = vec![0.0; n * p];
            for i in 0..n {
                for q in 0..k {
                    let aiq = a[i * k + q];
                    if aiq == 0.0 {
                        continue;
                    }
                    let brow = &b[q * p..(q + 1) * p];
                    let crow = &mut c[i * p..(i + 1) * p];
                    for j in 0..p {
                        crow[j] += aiq * brow[j];
                    }
                }
            }
            c
        });
        Ok(self.tape.push(
            vec![n, p],
            out,
            Op::Matmul {
                a: self.idx,
                b: other.idx,
            },
            (n * k * p) as u64,
        ))
    }

    pub fn transpose(&self) -> Result<DiffTensor> {
        let (n, k) = self.rows_cols("transpose")?;
        let out = with_nodes!(self, nodes, {
            let a = &nodes[self.idx].value;
            let mut t = vec![0.0; n * k];
            for i in 0..n {
                for j in 0..k {
                    t[j * n + i] = a[i * k + j];
                }
            }
            t
        });
        Ok(self
            .tape
            .push(vec![k, n], out, Op::Transpose { a: self.idx }, (n * k) as u64))
    }

    // ---- elementwise binary ----

    fn binary(&self, other: &DiffTensor, kind: BinKind, op: &'static str) -> Result<DiffTensor> {
        self.same_tape(other, op)?;
        let bcast = if self.shape == other.shape {
            Bcast::None
        } else if other.shape.len() == 1
            && !self.shape.is_empty()
            && *self.shape.last().unwrap() == other.shape[0]
        {
            Bcast::RhsVec
        } else if self.shape.len() == 1
            && !other.shape.is_empty()
            && *other.shape.last().unwrap() == self.shape[0]
        {
            Bcast::LhsVec
        } else {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        };
        let (out_shape, out) = with_nodes!(self, nodes, {
            let a = &nodes[self.idx].value;
            let b = &nodes[other.idx].value;
            let (big, small, out_shape, rhs_small) = match bcast {
                Bcast::None => (a, b, self.shape.clone(), true),
                Bcast::RhsVec => (a, b, self.shape.clone(), true),
                Bcast::LhsVec => (b, a, other.shape.clone(), false),
            };
            let k = if bcast == Bcast::None {
                big.len().max(1)
            } else {
                small.len()
            };
            let mut out = vec![0.0; big.len()];
            for i in 0..big.len() {
                let (x, y) = if bcast == Bcast::None {
                    (a[i], b[i])
                } else if rhs_small {
                    (big[i], small[i % k])
                } else {
                    (small[i % k], big[i])
                };
                out[i] = match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                    BinKind::Div => {
                        if y == 0.0 {
                            return Err(Error::NumericDomain {
                                op: "div",
                                index: i,
                                msg: "division by zero".into(),
                            });
                        }
                        x / y
                    }
                };
            }
            (out_shape, out)
        });
        let cost = out.len() as u64;
        Ok(self.tape.push(
            out_shape,
            out,
            Op::Binary {
                kind,
                a: self.idx,
                b: other.idx,
                bcast,
            },
            cost,
        ))
    }

    pub fn add(&self, other: &DiffTensor) -> Result<DiffTensor> {
        self.binary(other, BinKind::Add, "add")
    }

    pub fn sub(&self, other: &DiffTensor) -> Result<DiffTensor> {
        self.binary(other, BinKind::Sub, "sub")
    }

    pub fn mul(&self, other: &DiffTensor) -> Result<DiffTensor> {
        self.binary(other, BinKind::Mul, "mul")
    }

    pub fn div(&self, other: &DiffTensor) -> Result<DiffTensor> {
        self.binary(other, BinKind::Div, "div")
    }

    // ---- elementwise unary ----

    fn unary(&self, kind: UnKind) -> Result<DiffTensor> {
        let out = with_nodes!(self, nodes, {
            let x = &nodes[self.idx].value;
            let mut out = vec![0.0; x.len()];
            for (i, &v) in x.iter().enumerate() {
                out[i] = match kind {
                    UnKind::Exp => v.exp(),
                    UnKind::Log => {
                        if v <= 0.0 {
                            return Err(Error::NumericDomain {
                                op: "log",
                                index: i,
                                msg: format!("log of non-positive value {v}"),
                            });
                        }
                        v.ln()
                    }
                    UnKind::Neg => -v,
                    UnKind::Relu => v.max(0.0),
                    UnKind::Sqrt => {
                        if v < 0.0 {
                            return Err(Error::NumericDomain {
                                op: "sqrt",
                                index: i,
                                msg: format!("sqrt of negative value {v}"),
                            });
                        }
                        v.sqrt()
                    }
                    UnKind::Recip => {
                        if v == 0.0 {
                            return Err(Error::NumericDomain {
                                op: "recip",
                                index: i,
                                msg: "reciprocal of zero".into(),
                            });
                        }
                        1.0 / v
                    }
                    UnKind::Softplus => {
                        // Overflow-safe: ln(1+e^x) = max(x,0) + ln(1+e^-|x|).
                        if v > 0.0 {
                            v + (-v).exp().ln_1p()
                        } else {
                            v.exp().ln_1p()
                        }
                    }
                    UnKind::AddConst(c) => v + c,
                    UnKind::MulConst(c) => v * c,
                    UnKind::Clamp(lo, hi) => v.clamp(lo, hi),
                };
            }
            out
        });
        let cost = out.len() as u64;
        Ok(self
            .tape
            .push(self.shape.clone(), out, Op::Unary { kind, a: self.idx }, cost))
    }

    pub fn exp(&self) -> DiffTensor {
        self.unary(UnKind::Exp).expect("exp is total")
    }

    pub fn log(&self) -> Result<DiffTensor> {
        self.unary(UnKind::Log)
    }

    pub fn neg(&self) -> DiffTensor {
        self.unary(UnKind::Neg).expect("neg is total")
    }

    pub fn relu(&self) -> DiffTensor {
        self.unary(UnKind::Relu).expect("relu is total")
    }

    pub fn sqrt(&self) -> Result<DiffTensor> {
        self.unary(UnKind::Sqrt)
    }

    pub fn recip(&self) -> Result<DiffTensor> {
        self.unary(UnKind::Recip)
    }

    /// ln(1+e^x), overflow-safe; derivative is the logistic sigmoid.
    pub fn softplus(&self) -> DiffTensor {
        self.unary(UnKind::Softplus).expect("softplus is total")
    }

    pub fn add_const(&self, c: f64) -> DiffTensor {
        self.unary(UnKind::AddConst(c)).expect("add_const is total")
    }

    pub fn mul_const(&self, c: f64) -> DiffTensor {
        self.unary(UnKind::MulConst(c)).expect("mul_const is total")
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> DiffTensor {
        self.unary(UnKind::Clamp(lo, hi)).expect("clamp is total")
    }

    // ---- softmax / reductions ----

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax_lastaxis(&self) -> Result<DiffTensor> {
        if self.shape.is_empty() {
            return Err(Error::Dimension {
                op: "softmax_lastaxis",
                msg: "scalar has no axis".into(),
            });
        }
        let k = *self.shape.last().unwrap();
        let out = with_nodes!(self, nodes, {
            let x = &nodes[self.idx].value;
            let mut out = vec![0.0; x.len()];
            for row in x.chunks(k).zip(out.chunks_mut(k)) {
                let (xs, ys) = row;
                let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for (y, &v) in ys.iter_mut().zip(xs) {
                    *y = (v - m).exp();
                    denom += *y;
                }
                for y in ys.iter_mut() {
                    *y /= denom;
                }
            }
            out
        });
        let cost = out.len() as u64 * 2;
        Ok(self
            .tape
            .push(self.shape.clone(), out, Op::SoftmaxLast { a: self.idx }, cost))
    }

    fn reduce(&self, kind: RedKind, axis: usize) -> Result<DiffTensor> {
        if axis >= self.shape.len() {
            return Err(Error::Dimension {
                op: "reduce",
                msg: format!("axis {axis} out of range for shape {:?}", self.shape),
            });
        }
        let d = self.shape[axis];
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape.remove(axis);
        let out = with_nodes!(self, nodes, {
            let x = &nodes[self.idx].value;
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..d {
                    let base = (o * d + j) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += x[base + i];
                    }
                }
            }
            if kind == RedKind::Mean {
                let inv = 1.0 / d as f64;
                out.iter_mut().for_each(|v| *v *= inv);
            }
            out
        });
        let cost = self.numel() as u64;
        Ok(self
            .tape
            .push(out_shape, out, Op::Reduce { kind, a: self.idx, axis }, cost))
    }

    pub fn reduce_sum(&self, axis: usize) -> Result<DiffTensor> {
        self.reduce(RedKind::Sum, axis)
    }

    pub fn reduce_mean(&self, axis: usize) -> Result<DiffTensor> {
        self.reduce(RedKind::Mean, axis)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&self) -> DiffTensor {
        let flat = self.reshape(&[self.numel()]).expect("numel preserved");
        flat.reduce(RedKind::Sum, 0).expect("axis 0 valid")
    }

    /// Mean of all elements, as a scalar.
    pub fn mean_all(&self) -> DiffTensor {
        let flat = self.reshape(&[self.numel()]).expect("numel preserved");
        flat.reduce(RedKind::Mean, 0).expect("axis 0 valid")
    }

    // ---- structural ----

    pub fn reshape(&self, shape: &[usize]) -> Result<DiffTensor> {
        if numel(shape) != self.numel() {
            return Err(Error::Dimension {
                op: "reshape",
                msg: format!("cannot reshape {:?} to {:?}", self.shape, shape),
            });
        }
        let value = self.value();
        Ok(self
            .tape
            .push(shape.to_vec(), value, Op::Reshape { a: self.idx }, 0))
    }

    /// Gather rows of a rank-2 tensor; [`GATHER_PAD`] yields a zero row.
    /// Backward scatters gradients additively, so duplicate indices accumulate.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<DiffTensor> {
        let (n, c) = self.rows_cols("gather_rows")?;
        for (pos, &i) in idx.iter().enumerate() {
            if i != GATHER_PAD && i >= n {
                return Err(Error::Dimension {
                    op: "gather_rows",
                    msg: format!("index {i} at position {pos} out of range for {n} rows"),
                });
            }
        }
        let out = with_nodes!(self, nodes, {
            let x = &nodes[self.idx].value;
            let mut out = vec![0.0; idx.len() * c];
            for (r, &i) in idx.iter().enumerate() {
                if i != GATHER_PAD {
                    out[r * c..(r + 1) * c].copy_from_slice(&x[i * c..(i + 1) * c]);
                }
            }
            out
        });
        let cost = out.len() as u64;
        Ok(self.tape.push(
            vec![idx.len(), c],
            out,
            Op::GatherRows {
                a: self.idx,
                idx: Rc::new(idx.to_vec()),
            },
            cost,
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<DiffTensor> {
        let (n, c) = self.rows_cols("slice_cols")?;
        if start + len > c {
            return Err(Error::Dimension {
                op: "slice_cols",
                msg: format!("columns {start}..{} out of range for width {c}", start + len),
            });
        }
        let out = with_nodes!(self, nodes, {
            let x = &nodes[self.idx].value;
            let mut out = vec![0.0; n * len];
            for r in 0..n {
                out[r * len..(r + 1) * len]
                    .copy_from_slice(&x[r * c + start..r * c + start + len]);
            }
            out
        });
        Ok(self.tape.push(
            vec![n, len],
            out,
            Op::SliceCols {
                a: self.idx,
                start,
            },
            (n * len) as u64,
        ))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<DiffTensor> {
        let (n, c) = self.rows_cols("slice_rows")?;
        if start + len > n {
            return Err(Error::Dimension {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of range for {n} rows", start + len),
            });
        }
        let out = with_nodes!(self, nodes, {
            nodes[self.idx].value[start * c..(start + len) * c].to_vec()
        });
        Ok(self.tape.push(
            vec![len, c],
            out,
            Op::SliceRows {
                a: self.idx,
                start,
            },
            (len * c) as u64,
        ))
    }

    pub fn concat_cols(parts: &[&DiffTensor]) -> Result<DiffTensor> {
        if parts.is_empty() {
            return Err(Error::Dimension {
                op: "concat_cols",
                msg: "no tensors to concatenate".into(),
            });
        }
        let tape = parts[0].tape.clone();
        let (n, _) = parts[0].rows_cols("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            parts[0].same_tape(p, "concat_cols")?;
            let (rn, rc) = p.rows_cols("concat_cols")?;
            if rn != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: parts[0].shape.clone(),
                    right: p.shape.clone(),
                });
            }
            widths.push(rc);
        }
        let total: usize = widths.iter().sum();
        let out = {
            let inner = tape.inner.borrow();
            let nodes = &inner.nodes;
            let mut out = vec![0.0; n * total];
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let x = &nodes[p.idx].value;
                for r in 0..n {
                    out[r * total + off..r * total + off + w]
                        .copy_from_slice(&x[r * w..(r + 1) * w]);
                }
                off += w;
            }
            out
        };
        let idxs: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        Ok(tape.push(
            vec![n, total],
            out,
            Op::ConcatCols { parts: idxs },
            (n * total) as u64,
        ))
    }

    pub fn concat_rows(&self, other: &DiffTensor) -> Result<DiffTensor> {
        self.same_tape(other, "concat_rows")?;
        let (n1, c1) = self.rows_cols("concat_rows")?;
        let (n2, c2) = other.rows_cols("concat_rows")?;
        if c1 != c2 {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let out = with_nodes!(self, nodes, {
            let mut out = Vec::with_capacity((n1 + n2) * c1);
            out.extend_from_slice(&nodes[self.idx].value);
            out.extend_from_slice(&nodes[other.idx].value);
            out
        });
        Ok(self.tape.push(
            vec![n1 + n2, c1],
            out,
            Op::ConcatRows {
                a: self.idx,
                b: other.idx,
            },
            ((n1 + n2) * c1) as u64,
        ))
    }

    // ---- losses ----

    /// Mean cross-entropy over rows whose label is not `ignore`.
    /// Labels outside [0, C) other than `ignore` are a dimension error.
    pub fn cross_entropy(&self, labels: &[i64], ignore: i64) -> Result<DiffTensor> {
        let (n, c) = self.rows_cols("cross_entropy")?;
        if labels.len() != n {
            return Err(Error::Dimension {
                op: "cross_entropy",
                msg: format!("{} labels for {} rows", labels.len(), n),
            });
        }
        let mut n_valid = 0usize;
        for (i, &l) in labels.iter().enumerate() {
            if l == ignore {
                continue;
            }
            if l < 0 || l as usize >= c {
                return Err(Error::Dimension {
                    op: "cross_entropy",
                    msg: format!("label {l} at row {i} out of range for {c} classes"),
                });
            }
            n_valid += 1;
        }
        if n_valid == 0 {
            return Err(Error::EmptyInput(
                "cross_entropy: no rows with a valid label".into(),
            ));
        }
        let loss = with_nodes!(self, nodes, {
            let x = &nodes[self.idx].value;
            let mut total = 0.0;
            for (i, &l) in labels.iter().enumerate() {
                if l == ignore {
                    continue;
                }
                let row = &x[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
                total += lse - row[l as usize];
            }
            total / n_valid as f64
        });
        Ok(self.tape.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits: self.idx,
                labels: Rc::new(labels.to_vec()),
                ignore,
                n_valid,
            },
            (n * c) as u64,
        ))
    }

    // ---- backward ----

    /// Reverse-mode gradient propagation from a one-element tensor.
    ///
    /// Gradients of every tensor reachable from this one are accumulated into
    /// their `grad` buffers; calling `backward` again without
    /// [`Tape::zero_grads`] accumulates on top.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                msg: format!("loss must have one element, got shape {:?}", self.shape),
            });
        }
        let mut inner = self.tape.inner.borrow_mut();
        let nodes = &mut inner.nodes;

        // Reachability pass so unrelated tape entries are not touched.
        let mut reachable = vec![false; nodes.len()];
        let mut stack = vec![self.idx];
        while let Some(i) = stack.pop() {
            if reachable[i] {
                continue;
            }
            reachable[i] = true;
            stack.extend(nodes[i].inputs());
        }

        // Local upstream buffers: node index -> gradient w.r.t. its output.
        // Seeded at the loss, consumed in reverse tape order (a topological
        // order, since inputs always precede outputs).
        let mut upstream: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        upstream[self.idx] = Some(vec![1.0]);

        for i in (0..=self.idx).rev() {
            if !reachable[i] {
                continue;
            }
            let g = match upstream[i].take() {
                Some(g) => g,
                None => continue, // reachable but receives no gradient (e.g. aux output)
            };
            // Accumulate into the node's persistent grad buffer.
            for (dst, &src) in nodes[i].grad.iter_mut().zip(&g) {
                *dst += src;
            }
            propagate(nodes, i, &g, &mut upstream);
        }
        Ok(())
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

/// Push node `i`'s upstream gradient `g` into its inputs' upstream buffers.
fn propagate(nodes: &[Node], i: usize, g: &[f64], upstream: &mut [Option<Vec<f64>>]) {
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (n, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let p = nodes[*b].shape[1];
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            add_into(&mut upstream[*a], n * k, |ga| {
                for r in 0..n {
                    for q in 0..k {
                        let mut s = 0.0;
                        for j in 0..p {
                            s += g[r * p + j] * bv[q * p + j];
                        }
                        ga[r * k + q] += s;
                    }
                }
            });
            add_into(&mut upstream[*b], k * p, |gb| {
                for q in 0..k {
                    for r in 0..n {
                        let arq = av[r * k + q];
                        if arq == 0.0 {
                            continue;
                        }
                        for j in 0..p {
                            gb[q * p + j] += arq * g[r * p + j];
                        }
                    }
                }
            });
        }
        Op::Binary { kind, a, b, bcast } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let an = av.len();
            let bn = bv.len();
            match bcast {
                Bcast::None => {
                    add_into(&mut upstream[*a], an, |ga| {
                        for i in 0..an {
                            ga[i] += match kind {
                                BinKind::Add | BinKind::Sub => g[i],
                                BinKind::Mul => g[i] * bv[i],
                                BinKind::Div => g[i] / bv[i],
                            };
                        }
                    });
                    add_into(&mut upstream[*b], bn, |gb| {
                        for i in 0..bn {
                            gb[i] += match kind {
                                BinKind::Add => g[i],
                                BinKind::Sub => -g[i],
                                BinKind::Mul => g[i] * av[i],
                                BinKind::Div => -g[i] * av[i] / (bv[i] * bv[i]),
                            };
                        }
                    });
                }
                Bcast::RhsVec => {
                    let k = bn;
                    add_into(&mut upstream[*a], an, |ga| {
                        for i in 0..an {
                            ga[i] += match kind {
                                BinKind::Add | BinKind::Sub => g[i],
                                BinKind::Mul => g[i] * bv[i % k],
                                BinKind::Div => g[i] / bv[i % k],
                            };
                        }
                    });
                    add_into(&mut upstream[*b], bn, |gb| {
                        for i in 0..an {
                            let j = i % k;
                            gb[j] += match kind {
                                BinKind::Add => g[i],
                                BinKind::Sub => -g[i],
                                BinKind::Mul => g[i] * av[i],
                                BinKind::Div => -g[i] * av[i] / (bv[j] * bv[j]),
                            };
                        }
                    });
                }
                Bcast::LhsVec => {
                    let k = an;
                    add_into(&mut upstream[*a], an, |ga| {
                        for i in 0..bn {
                            let j = i % k;
                            ga[j] += match kind {
                                BinKind::Add | BinKind::Sub => g[i],
                                BinKind::Mul => g[i] * bv[i],
                                BinKind::Div => g[i] / bv[i],
                            };
                        }
                    });
                    add_into(&mut upstream[*b], bn, |gb| {
                        for i in 0..bn {
                            let j = i % k;
                            gb[i] += match kind {
                                BinKind::Add => g[i],
                                BinKind::Sub => -g[i],
                                BinKind::Mul => g[i] * av[j],
                                BinKind::Div => -g[i] * av[j] / (bv[i] * bv[i]),
                            };
                        }
                    });
                }
            }
        }
        Op::Unary { kind, a } => {
            let xv = &nodes[*a].value;
            add_into(&mut upstream[*a], xv.len(), |ga| {
                for i in 0..xv.len() {
                    let x = xv[i];
                    ga[i] += match kind {
                        UnKind::Exp => g[i] * x.exp(),
                        UnKind::Log => g[i] / x,
                        UnKind::Neg => -g[i],
                        UnKind::Relu => {
                            if x > 0.0 {
                                g[i]
                            } else {
                                0.0
                            }
                        }
                        UnKind::Sqrt => g[i] * 0.5 / x.sqrt(),
                        UnKind::Recip => -g[i] / (x * x),
                        UnKind::Softplus => {
                            // logistic sigmoid, computed stably on both sides
                            let s = if x >= 0.0 {
                                1.0 / (1.0 + (-x).exp())
                            } else {
                                let e = x.exp();
                                e / (1.0 + e)
                            };
                            g[i] * s
                        }
                        UnKind::AddConst(_) => g[i],
                        UnKind::MulConst(c) => g[i] * c,
                        UnKind::Clamp(lo, hi) => {
                            if x > *lo && x < *hi {
                                g[i]
                            } else {
                                0.0
                            }
                        }
                    };
                }
            });
        }
        Op::SoftmaxLast { a } => {
            let y = &nodes[i].value;
            let k = *nodes[i].shape.last().unwrap();
            add_into(&mut upstream[*a], y.len(), |ga| {
                for r in 0..y.len() / k {
                    let ys = &y[r * k..(r + 1) * k];
                    let gs = &g[r * k..(r + 1) * k];
                    let dot: f64 = ys.iter().zip(gs).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..k {
                        ga[r * k + j] += ys[j] * (gs[j] - dot);
                    }
                }
            });
        }
        Op::Reduce { kind, a, axis } => {
            let in_shape = &nodes[*a].shape;
            let d = in_shape[*axis];
            let outer: usize = in_shape[..*axis].iter().product();
            let inner_n: usize = in_shape[*axis + 1..].iter().product();
            let scale = if *kind == RedKind::Mean {
                1.0 / d as f64
            } else {
                1.0
            };
            add_into(&mut upstream[*a], nodes[*a].value.len(), |ga| {
                for o in 0..outer {
                    for j in 0..d {
                        let base = (o * d + j) * inner_n;
                        for t in 0..inner_n {
                            ga[base + t] += g[o * inner_n + t] * scale;
                        }
                    }
                }
            });
        }
        Op::GatherRows { a, idx } => {
            let c = nodes[i].shape[1];
            add_into(&mut upstream[*a], nodes[*a].value.len(), |ga| {
                for (r, &src) in idx.iter().enumerate() {
                    if src != GATHER_PAD {
                        for j in 0..c {
                            ga[src * c + j] += g[r * c + j];
                        }
                    }
                }
            });
        }
        Op::SliceCols { a, start } => {
            let (n, len) = (nodes[i].shape[0], nodes[i].shape[1]);
            let c = nodes[*a].shape[1];
            add_into(&mut upstream[*a], nodes[*a].value.len(), |ga| {
                for r in 0..n {
                    for j in 0..len {
                        ga[r * c + start + j] += g[r * len + j];
                    }
                }
            });
        }
        Op::SliceRows { a, start } => {
            let (len, c) = (nodes[i].shape[0], nodes[i].shape[1]);
            add_into(&mut upstream[*a], nodes[*a].value.len(), |ga| {
                for r in 0..len {
                    for j in 0..c {
                        ga[(start + r) * c + j] += g[r * c + j];
                    }
                }
            });
        }
        Op::ConcatCols { parts } => {
            let n = nodes[i].shape[0];
            let total = nodes[i].shape[1];
            let mut off = 0;
            for &p in parts {
                let w = nodes[p].shape[1];
                add_into(&mut upstream[p], nodes[p].value.len(), |gp| {
                    for r in 0..n {
                        for j in 0..w {
                            gp[r * w + j] += g[r * total + off + j];
                        }
                    }
                });
                off += w;
            }
        }
        Op::ConcatRows { a, b } => {
            let na = nodes[*a].shape[0];
            let c = nodes[*a].shape[1];
            add_into(&mut upstream[*a], nodes[*a].value.len(), |ga| {
                ga.iter_mut()
                    .zip(&g[..na * c])
                    .for_each(|(dst, &src)| *dst += src);
            });
            add_into(&mut upstream[*b], nodes[*b].value.len(), |gb| {
                gb.iter_mut()
                    .zip(&g[na * c..])
                    .for_each(|(dst, &src)| *dst += src);
            });
        }
        Op::Transpose { a } => {
            let (k, n) = (nodes[i].shape[0], nodes[i].shape[1]);
            add_into(&mut upstream[*a], nodes[*a].value.len(), |ga| {
                for r in 0..k {
                    for j in 0..n {
                        ga[j * k + r] += g[r * n + j];
                    }
                }
            });
        }
        Op::Reshape { a } => {
            add_into(&mut upstream[*a], nodes[*a].value.len(), |ga| {
                ga.iter_mut().zip(g).for_each(|(dst, &src)| *dst += src);
            });
        }
        Op::CrossEntropy {
            logits,
            labels,
            ignore,
            n_valid,
        } => {
            let (n, c) = (nodes[*logits].shape[0], nodes[*logits].shape[1]);
            let x = &nodes[*logits].value;
            let scale = g[0] / *n_valid as f64;
            add_into(&mut upstream[*logits], n * c, |gl| {
                for r in 0..n {
                    let l = labels[r];
                    if l == *ignore {
                        continue;
                    }
                    let row = &x[r * c..(r + 1) * c];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                    for j in 0..c {
                        let p = (row[j] - m).exp() / denom;
                        let onehot = if j == l as usize { 1.0 } else { 0.0 };
                        gl[r * c + j] += scale * (p - onehot);
                    }
                }
            });
        }
    }
}
