//! Reverse-mode automatic differentiation over dense tensors.
//!
//! The tape is a Wengert list with eager evaluation: every node computes its
//! value at creation. The backward pass is *symbolic* — adjoints are built as
//! new tape nodes out of the same primitive set — so the gradient of an
//! expression is itself differentiable. This is what lets a loss contain the
//! input-gradient of a network (`input_gradient`) and still receive correct
//! weight gradients when differentiated again.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Epsilon guard for norm derivatives; the norm gradient v/|v| is undefined
/// at the origin.
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf { trainable: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Relu(NodeId),
    /// 1.0 where the operand is positive, else 0.0. Derivative is zero
    /// almost everywhere, so no gradient flows through this node.
    StepMask(NodeId),
    Norm(NodeId),
    Dot(NodeId, NodeId),
    Sum(NodeId),
    /// Row-wise max over the columns of a matrix: [r,c] -> [r].
    MaxCols(NodeId),
    /// Euclidean norm of each column: [r,c] -> [c].
    ColNorms(NodeId),
    /// Dot product of corresponding columns: [r,c] x [r,c] -> [c].
    ColDots(NodeId, NodeId),
    /// Concatenation along axis 0 (vector elements or matrix rows).
    Concat(Vec<NodeId>),
    SliceRows { src: NodeId, lo: usize, hi: usize },
    Reshape(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Dynamic computation graph. Single-owner; build one per optimization step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn is_trainable_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id].op, Op::Leaf { trainable: true })
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        self.nodes.len() - 1
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    // ----- leaves -------------------------------------------------------

    /// Non-trainable input leaf.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { trainable: false }, value, false)
    }

    /// Trainable leaf; receives an adjoint from `grad_values`.
    pub fn param_leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { trainable: true }, value, true)
    }

    pub fn scalar_const(&mut self, x: f64) -> NodeId {
        self.leaf(Tensor::scalar(x))
    }

    // ----- elementwise --------------------------------------------------

    fn ew_shapes(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<Vec<usize>> {
        let (da, db) = (self.value(a).dims(), self.value(b).dims());
        if da == db {
            Ok(da.to_vec())
        } else if da.is_empty() {
            Ok(db.to_vec())
        } else if db.is_empty() {
            Ok(da.to_vec())
        } else {
            Err(Error::ShapeMismatch { op, lhs: da.to_vec(), rhs: db.to_vec() })
        }
    }

    fn ew(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let dims = self.ew_shapes(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.dims() == vb.dims() {
            va.zip(vb, f)
        } else if va.is_scalar() {
            let s = va.scalar_value();
            vb.map(|x| f(s, x))
        } else {
            let s = vb.scalar_value();
            va.map(|x| f(x, s))
        };
        debug_assert_eq!(value.dims(), &dims[..]);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(op, value, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ew("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ew("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ew("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ew("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(|x| -x);
        let ng = self.ng(a);
        Ok(self.push(Op::Neg(a), value, ng))
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b), ta, tb)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::MatMul { a, b, ta, tb }, value, ng))
    }

    /// Matrix [m,k] times vector [k] -> vector [m].
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let n = match self.value(x).dims() {
            [n] => *n,
            other => {
                return Err(Error::ShapeMismatch {
                    op: "matvec",
                    lhs: self.value(w).dims().to_vec(),
                    rhs: other.to_vec(),
                })
            }
        };
        let col = self.reshape(x, vec![n, 1])?;
        let prod = self.matmul(w, col, false, false)?;
        let m = self.value(prod).rows();
        self.reshape(prod, vec![m])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        Ok(self.push(Op::Relu(a), value, ng))
    }

    pub fn step_mask(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        Ok(self.push(Op::StepMask(a), value, false))
    }

    pub fn norm(&mut self, v: NodeId) -> Result<NodeId> {
        if self.value(v).rank() != 1 {
            return Err(Error::ShapeMismatch {
                op: "norm",
                lhs: self.value(v).dims().to_vec(),
                rhs: vec![],
            });
        }
        let value = Tensor::scalar(
            self.value(v).data().iter().map(|x| x * x).sum::<f64>().sqrt(),
        );
        let ng = self.ng(v);
        Ok(self.push(Op::Norm(v), value, ng))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 1 || va.dims() != vb.dims() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: va.dims().to_vec(),
                rhs: vb.dims().to_vec(),
            });
        }
        let value = Tensor::scalar(
            va.data().iter().zip(vb.data()).map(|(x, y)| x * y).sum(),
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Dot(a, b), value, ng))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        let ng = self.ng(a);
        Ok(self.push(Op::Sum(a), value, ng))
    }

    /// Mean of all elements.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        let inv = self.scalar_const(1.0 / n);
        self.mul(s, inv)
    }

    pub fn max_cols(&mut self, m: NodeId) -> Result<NodeId> {
        if self.value(m).rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "max_cols",
                lhs: self.value(m).dims().to_vec(),
                rhs: vec![],
            });
        }
        let v = self.value(m);
        let (r, c) = (v.rows(), v.cols());
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let row = &v.data()[i * c..(i + 1) * c];
            // ties resolve to the lowest column index
            let mut best = row[0];
            for &x in &row[1..] {
                if x > best {
                    best = x;
                }
            }
            out.push(best);
        }
        let ng = self.ng(m);
        Ok(self.push(Op::MaxCols(m), Tensor::vector(out), ng))
    }

    pub fn col_norms(&mut self, m: NodeId) -> Result<NodeId> {
        if self.value(m).rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "col_norms",
                lhs: self.value(m).dims().to_vec(),
                rhs: vec![],
            });
        }
        let v = self.value(m);
        let (r, c) = (v.rows(), v.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                let x = v.data()[i * c + j];
                out[j] += x * x;
            }
        }
        for x in &mut out {
            *x = x.sqrt();
        }
        let ng = self.ng(m);
        Ok(self.push(Op::ColNorms(m), Tensor::vector(out), ng))
    }

    pub fn col_dots(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || va.dims() != vb.dims() {
            return Err(Error::ShapeMismatch {
                op: "col_dots",
                lhs: va.dims().to_vec(),
                rhs: vb.dims().to_vec(),
            });
        }
        let (r, c) = (va.rows(), va.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += va.data()[i * c + j] * vb.data()[i * c + j];
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::ColDots(a, b), Tensor::vector(out), ng))
    }

    /// Concatenate along axis 0: vectors end to end, or matrices stacked by
    /// rows (column counts must agree).
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput { what: "concat operand list" });
        }
        let rank = self.value(parts[0]).rank();
        let mut data = Vec::new();
        let mut rows = 0;
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rank() != rank || rank == 0 || rank > 2 {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.value(parts[0]).dims().to_vec(),
                    rhs: v.dims().to_vec(),
                });
            }
            if rank == 2 {
                if cols == 0 {
                    cols = v.cols();
                } else if v.cols() != cols {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: vec![rows, cols],
                        rhs: v.dims().to_vec(),
                    });
                }
                rows += v.rows();
            } else {
                rows += v.len();
            }
            data.extend_from_slice(v.data());
        }
        let value = if rank == 2 {
            Tensor::matrix(rows, cols, data)
        } else {
            Tensor::vector(data)
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Op::Concat(parts.to_vec()), value, ng))
    }

    /// Rows (or vector elements) in `lo..hi` of the operand.
    pub fn slice_rows(&mut self, src: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let v = self.value(src);
        let (nrows, cols) = match v.dims() {
            [n] => (*n, 1),
            [r, c] => (*r, *c),
            other => {
                return Err(Error::ShapeMismatch {
                    op: "slice_rows",
                    lhs: other.to_vec(),
                    rhs: vec![],
                })
            }
        };
        if lo >= hi || hi > nrows {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: v.dims().to_vec(),
                rhs: vec![lo, hi],
            });
        }
        let data = v.data()[lo * cols..hi * cols].to_vec();
        let value = if v.rank() == 2 {
            Tensor::matrix(hi - lo, cols, data)
        } else {
            Tensor::vector(data)
        };
        let ng = self.ng(src);
        Ok(self.push(Op::SliceRows { src, lo, hi }, value, ng))
    }

    pub fn reshape(&mut self, src: NodeId, dims: Vec<usize>) -> Result<NodeId> {
        let v = self.value(src);
        let new_len = dims.iter().product::<usize>().max(1);
        if new_len != v.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: v.dims().to_vec(),
                rhs: dims,
            });
        }
        let value = Tensor::from_dims(dims, v.data().to_vec());
        let ng = self.ng(src);
        Ok(self.push(Op::Reshape(src), value, ng))
    }

    /// Broadcast a column vector [r] across `n` columns -> [r,n].
    pub fn col_broadcast(&mut self, v: NodeId, n: usize) -> Result<NodeId> {
        let r = self.value(v).len();
        let col = self.reshape(v, vec![r, 1])?;
        let ones = self.leaf(Tensor::ones(&[1, n]));
        self.matmul(col, ones, false, false)
    }

    /// Broadcast a row vector [c] across `r` rows -> [r,c].
    pub fn row_broadcast(&mut self, v: NodeId, r: usize) -> Result<NodeId> {
        let c = self.value(v).len();
        let row = self.reshape(v, vec![1, c])?;
        let ones = self.leaf(Tensor::ones(&[r, 1]));
        self.matmul(ones, row, false, false)
    }

    // ----- reverse pass ---------------------------------------------------

    fn for_each_parent(op: &Op, mut f: impl FnMut(NodeId)) {
        match op {
            Op::Leaf { .. } => {}
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Dot(a, b)
            | Op::ColDots(a, b)
            | Op::MatMul { a, b, .. } => {
                f(*a);
                f(*b);
            }
            Op::Neg(a)
            | Op::Relu(a)
            | Op::StepMask(a)
            | Op::Norm(a)
            | Op::Sum(a)
            | Op::MaxCols(a)
            | Op::ColNorms(a)
            | Op::Reshape(a)
            | Op::SliceRows { src: a, .. } => f(*a),
            Op::Concat(parts) => parts.iter().copied().for_each(&mut f),
        }
    }

    /// Build the adjoint of `wrt` nodes as new (differentiable) tape nodes.
    ///
    /// `root` must be scalar. Targets that do not influence `root` through a
    /// differentiable path get a zero node and a warning.
    pub fn grad_nodes(&mut self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if !self.value(root).is_scalar() {
            return Err(Error::NonScalarRoot {
                dims: self.value(root).dims().to_vec(),
            });
        }

        let n = root + 1;
        // descendants of any target along differentiable edges
        let mut desc = vec![false; n];
        for &w in wrt {
            if w < n {
                desc[w] = true;
            }
        }
        for i in 0..n {
            if desc[i] {
                continue;
            }
            // StepMask passes no derivative, see vjp below.
            if matches!(self.nodes[i].op, Op::StepMask(_)) {
                continue;
            }
            let mut any = false;
            Self::for_each_parent(&self.nodes[i].op, |p| any |= desc[p]);
            desc[i] = any;
        }
        // ancestors of the root
        let mut anc = vec![false; n];
        anc[root] = true;
        for i in (0..n).rev() {
            if anc[i] {
                Self::for_each_parent(&self.nodes[i].op, |p| anc[p] = true);
            }
        }

        let mut adj: Vec<Option<NodeId>> = vec![None; n];
        adj[root] = Some(self.scalar_const(1.0));
        for i in (0..n).rev() {
            if !(anc[i] && desc[i]) {
                continue;
            }
            let Some(g) = adj[i] else { continue };
            let op = self.nodes[i].op.clone();
            let contribute = |tape: &mut Tape,
                                  adj: &mut Vec<Option<NodeId>>,
                                  parent: NodeId,
                                  node: NodeId|
             -> Result<()> {
                if !desc[parent] {
                    return Ok(());
                }
                adj[parent] = Some(match adj[parent] {
                    Some(prev) => tape.add(prev, node)?,
                    None => node,
                });
                Ok(())
            };
            match op {
                Op::Leaf { .. } | Op::StepMask(_) => {}
                Op::Add(a, b) => {
                    let ca = self.reduce_to(g, a)?;
                    contribute(self, &mut adj, a, ca)?;
                    let cb = self.reduce_to(g, b)?;
                    contribute(self, &mut adj, b, cb)?;
                }
                Op::Sub(a, b) => {
                    let ca = self.reduce_to(g, a)?;
                    contribute(self, &mut adj, a, ca)?;
                    let ng = self.neg(g)?;
                    let cb = self.reduce_to(ng, b)?;
                    contribute(self, &mut adj, b, cb)?;
                }
                Op::Mul(a, b) => {
                    if desc[a] {
                        let gb = self.mul(g, b)?;
                        let ca = self.reduce_to(gb, a)?;
                        contribute(self, &mut adj, a, ca)?;
                    }
                    if desc[b] {
                        let ga = self.mul(g, a)?;
                        let cb = self.reduce_to(ga, b)?;
                        contribute(self, &mut adj, b, cb)?;
                    }
                }
                Op::Div(a, b) => {
                    if desc[a] {
                        let gb = self.div(g, b)?;
                        let ca = self.reduce_to(gb, a)?;
                        contribute(self, &mut adj, a, ca)?;
                    }
                    if desc[b] {
                        // d(a/b)/db = -(a/b)/b
                        let go = self.mul(g, i)?;
                        let gob = self.div(go, b)?;
                        let neg = self.neg(gob)?;
                        let cb = self.reduce_to(neg, b)?;
                        contribute(self, &mut adj, b, cb)?;
                    }
                }
                Op::Neg(a) => {
                    let ca = self.neg(g)?;
                    contribute(self, &mut adj, a, ca)?;
                }
                Op::MatMul { a, b, ta, tb } => {
                    if desc[a] {
                        let ca = if !ta {
                            self.matmul(g, b, false, !tb)?
                        } else {
                            self.matmul(b, g, tb, true)?
                        };
                        contribute(self, &mut adj, a, ca)?;
                    }
                    if desc[b] {
                        let cb = if !tb {
                            self.matmul(a, g, !ta, false)?
                        } else {
                            self.matmul(g, a, true, ta)?
                        };
                        contribute(self, &mut adj, b, cb)?;
                    }
                }
                Op::Relu(a) => {
                    let mask = self.step_mask(a)?;
                    let ca = self.mul(g, mask)?;
                    contribute(self, &mut adj, a, ca)?;
                }
                Op::Norm(a) => {
                    let guard = self.scalar_const(NORM_EPS);
                    let denom = self.add(i, guard)?;
                    let coef = self.div(g, denom)?;
                    let ca = self.mul(a, coef)?;
                    contribute(self, &mut adj, a, ca)?;
                }
                Op::Dot(a, b) => {
                    if desc[a] {
                        let ca = self.mul(b, g)?;
                        contribute(self, &mut adj, a, ca)?;
                    }
                    if desc[b] {
                        let cb = self.mul(a, g)?;
                        contribute(self, &mut adj, b, cb)?;
                    }
                }
                Op::Sum(a) => {
                    let dims = self.nodes[a].value.dims().to_vec();
                    let ones = self.leaf(Tensor::ones(&dims));
                    let ca = self.mul(ones, g)?;
                    contribute(self, &mut adj, a, ca)?;
                }
                Op::MaxCols(a) => {
                    let v = &self.nodes[a].value;
                    let (r, c) = (v.rows(), v.cols());
                    let mut mask = vec![0.0; r * c];
                    for row in 0..r {
                        let slice = &v.data()[row * c..(row + 1) * c];
                        let mut arg = 0;
                        for (j, &x) in slice.iter().enumerate() {
                            if x > slice[arg] {
                                arg = j;
                            }
                        }
                        mask[row * c + arg] = 1.0;
                    }
                    let mask = self.leaf(Tensor::matrix(r, c, mask));
                    let gb = self.col_broadcast(g, c)?;
                    let ca = self.mul(mask, gb)?;
                    contribute(self, &mut adj, a, ca)?;
                }
                Op::ColNorms(a) => {
                    let r = self.nodes[a].value.rows();
                    let guard = self.scalar_const(NORM_EPS);
                    let denom = self.add(i, guard)?;
                    let coef = self.div(g, denom)?;
                    let cb = self.row_broadcast(coef, r)?;
                    let ca = self.mul(a, cb)?;
                    contribute(self, &mut adj, a, ca)?;
                }
                Op::ColDots(a, b) => {
                    let r = self.nodes[a].value.rows();
                    let gb = self.row_broadcast(g, r)?;
                    if desc[a] {
                        let ca = self.mul(b, gb)?;
                        contribute(self, &mut adj, a, ca)?;
                    }
                    if desc[b] {
                        let cb = self.mul(a, gb)?;
                        contribute(self, &mut adj, b, cb)?;
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in &parts {
                        let v = &self.nodes[p].value;
                        let rows = if v.rank() == 2 { v.rows() } else { v.len() };
                        if desc[p] {
                            let cp = self.slice_rows(g, off, off + rows)?;
                            contribute(self, &mut adj, p, cp)?;
                        }
                        off += rows;
                    }
                }
                Op::SliceRows { src, lo, hi } => {
                    let v = &self.nodes[src].value;
                    let (rows, cols_opt) = if v.rank() == 2 {
                        (v.rows(), Some(v.cols()))
                    } else {
                        (v.len(), None)
                    };
                    let zdims = |n: usize| match cols_opt {
                        Some(c) => Tensor::zeros(&[n, c]),
                        None => Tensor::zeros(&[n]),
                    };
                    let mut parts = Vec::with_capacity(3);
                    if lo > 0 {
                        parts.push(self.leaf(zdims(lo)));
                    }
                    parts.push(g);
                    if hi < rows {
                        parts.push(self.leaf(zdims(rows - hi)));
                    }
                    let cs = if parts.len() == 1 {
                        g
                    } else {
                        self.concat(&parts)?
                    };
                    contribute(self, &mut adj, src, cs)?;
                }
                Op::Reshape(a) => {
                    let dims = self.nodes[a].value.dims().to_vec();
                    let ca = self.reshape(g, dims)?;
                    contribute(self, &mut adj, a, ca)?;
                }
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            match adj.get(w).copied().flatten() {
                Some(id) => out.push(id),
                None => {
                    log::warn!(
                        "grad target node {w} does not influence the root; returning zeros"
                    );
                    let dims = self.nodes[w].value.dims().to_vec();
                    out.push(self.leaf(Tensor::zeros(&dims)));
                }
            }
        }
        Ok(out)
    }

    /// When a scalar operand was broadcast against a tensor, its adjoint is
    /// the sum of the elementwise adjoints.
    fn reduce_to(&mut self, g: NodeId, parent: NodeId) -> Result<NodeId> {
        if self.nodes[parent].value.is_scalar() && !self.value(g).is_scalar() {
            self.sum(g)
        } else {
            Ok(g)
        }
    }

    /// ∂output/∂input as a differentiable node. The result's graph chains
    /// back to every weight of the inner forward pass, so a loss built from
    /// it propagates second-order gradients to those weights.
    pub fn input_gradient(&mut self, output: NodeId, input: NodeId) -> Result<NodeId> {
        Ok(self.grad_nodes(output, &[input])?[0])
    }

    /// Adjoint values of `wrt` (zeros where the root is not influenced).
    pub fn grad_values(&mut self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        let ids = self.grad_nodes(root, wrt)?;
        Ok(ids.into_iter().map(|id| self.nodes[id].value.clone()).collect())
    }
}

// ----- parameters & optimizer ----------------------------------------------

/// A named trainable tensor with Adam moment state.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    m: Tensor,
    v: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let dims = value.dims().to_vec();
        Parameter {
            name: name.into(),
            value,
            grad: None,
            m: Tensor::zeros(&dims),
            v: Tensor::zeros(&dims),
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Reject a step when a parameter has no gradient; otherwise skip it
    /// with a warning.
    pub strict: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, strict: true }
    }
}

/// Ordered set of parameters updated together (one Adam step counter).
#[derive(Debug, Clone, Default)]
pub struct ParamGroup {
    params: Vec<Parameter>,
    step: u64,
}

impl ParamGroup {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, p: Parameter) -> usize {
        debug_assert!(
            self.params.iter().all(|q| q.name != p.name),
            "duplicate parameter name {}",
            p.name
        );
        self.params.push(p);
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Bind every parameter into the tape as leaves, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param_leaf(p.value.clone())
                } else {
                    tape.leaf(p.value.clone())
                }
            })
            .collect()
    }

    /// Install adjoints produced by `Tape::grad_values`. Errors if any grad
    /// is already present: an explicit `zero_grads` is required between
    /// backward passes so accumulation is never silent.
    pub fn set_grads(&mut self, grads: &[Tensor]) -> Result<()> {
        assert_eq!(grads.len(), self.params.len());
        for p in &self.params {
            if p.grad.is_some() {
                return Err(Error::GradAlreadyPresent { name: p.name.clone() });
            }
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            debug_assert_eq!(p.value.dims(), g.dims());
            p.grad = Some(g.clone());
        }
        Ok(())
    }

    /// FNV-1a digest over parameter names and exact value bits; two groups
    /// compare equal iff their weights are bit-identical.
    pub fn digest(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for p in &self.params {
            for b in p.name.as_bytes() {
                eat(*b);
            }
            for x in p.value.data() {
                for b in x.to_bits().to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }

    /// Standard Adam update with bias correction; clears gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            let Some(grad) = p.grad.take() else {
                if cfg.strict {
                    return Err(Error::MissingGrad { name: p.name.clone() });
                }
                log::warn!("skipping parameter '{}' with no gradient", p.name);
                continue;
            };
            let (m, v, w) = (p.m.data_mut(), p.v.data_mut(), p.value.data_mut());
            for ((mi, vi), (wi, gi)) in m
                .iter_mut()
                .zip(v.iter_mut())
                .zip(w.iter_mut().zip(grad.data()))
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *wi -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
