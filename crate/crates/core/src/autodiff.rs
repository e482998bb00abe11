//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! A `Tape` records one forward computation as a flat list of nodes; ids are
//! append-ordered, so the dependency graph is acyclic by construction and the
//! backward pass is a single reverse sweep. Each tape belongs to one thread;
//! parallelism happens one level up, with a tape per sample.
//!
//! The op set is exactly what the detectors need: dense matmul, broadcasted
//! elementwise arithmetic, the usual activations, row softmax, concat/slice,
//! diagonal embed/extract, and an SPD solve whose backward rule comes from
//! implicit differentiation of A·X = B (the factor is kept from the forward
//! pass, so the backward solve is cheap).

use crate::linalg::{Cholesky, LinalgError, Matrix};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("backward requires a scalar (1x1) loss node, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Handle to a node on a tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Log(NodeId),
    ClampMin(NodeId, f64),
    SoftmaxRows(NodeId),
    Sum(NodeId),
    Trace(NodeId),
    Transpose(NodeId),
    ConcatCols(Vec<NodeId>),
    Slice { src: NodeId, r0: usize, c0: usize },
    DiagEmbed(NodeId),
    DiagPart(NodeId),
    SpdSolve { a: NodeId, b: NodeId, factor: Box<Cholesky> },
}

struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    needs_grad: bool,
}

/// One recorded forward computation.
pub struct Tape {
    nodes: Vec<Node>,
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let rows = if a.0 == b.0 {
        a.0
    } else if a.0 == 1 {
        b.0
    } else if b.0 == 1 {
        a.0
    } else {
        panic!("incompatible row counts for broadcast: {} vs {}", a.0, b.0);
    };
    let cols = if a.1 == b.1 {
        a.1
    } else if a.1 == 1 {
        b.1
    } else if b.1 == 1 {
        a.1
    } else {
        panic!("incompatible column counts for broadcast: {} vs {}", a.1, b.1);
    };
    (rows, cols)
}

#[inline]
fn bget(m: &Matrix, r: usize, c: usize) -> f64 {
    let rr = if m.rows() == 1 { 0 } else { r };
    let cc = if m.cols() == 1 { 0 } else { c };
    m.get(rr, cc)
}

/// Sum `grad` down to `(rows, cols)` over any broadcast dimensions.
fn reduce_to(grad: &Matrix, rows: usize, cols: usize) -> Matrix {
    if grad.rows() == rows && grad.cols() == cols {
        return grad.clone();
    }
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..grad.rows() {
        for c in 0..grad.cols() {
            let rr = if rows == 1 { 0 } else { r };
            let cc = if cols == 1 { 0 } else { c };
            let v = out.get(rr, cc) + grad.get(r, c);
            out.set(rr, cc, v);
        }
    }
    out
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id.0].value.rows(), self.nodes[id.0].value.cols())
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, grad: None, op, needs_grad });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input; no gradient is tracked through it.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> NodeId {
        self.constant(Matrix::from_vec(1, 1, vec![value]))
    }

    /// Trainable input; `backward` populates its gradient.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Copy of a node's value as a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let value = self.nodes[id.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (rows, cols) = broadcast_shape((va.rows(), va.cols()), (vb.rows(), vb.cols()));
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                out.set(r, c, f(bget(va, r, c), bget(vb, r, c)));
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|&x| f(x)).collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data);
        let ng = self.needs(a);
        self.push(value, op, ng)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, |x| k * x, Op::Scale(a, k))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn clamp_min(&mut self, a: NodeId, min: f64) -> NodeId {
        self.unary(a, |x| x.max(min), Op::ClampMin(a, min))
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let mut out = Matrix::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            let row = va.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for c in 0..va.cols() {
                let e = (row[c] - max).exp();
                out.set(r, c, e);
                denom += e;
            }
            for c in 0..va.cols() {
                let v = out.get(r, c) / denom;
                out.set(r, c, v);
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.data().iter().sum();
        let ng = self.needs(a);
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::Sum(a), ng)
    }

    /// Trace of a square matrix, as a 1x1 node.
    pub fn trace(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.rows(), va.cols(), "trace needs a square matrix");
        let t = va.diagonal().iter().sum();
        let ng = self.needs(a);
        self.push(Matrix::from_vec(1, 1, vec![t]), Op::Trace(a), ng)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.transpose();
        let ng = self.needs(a);
        self.push(value, Op::Transpose(a), ng)
    }

    /// Horizontal concatenation; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.rows();
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.rows(), rows, "concat_cols parts must share row count");
            for r in 0..rows {
                for c in 0..v.cols() {
                    out.set(r, offset + c, v.get(r, c));
                }
            }
            offset += v.cols();
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Rectangular sub-block `[r0..r1) x [c0..c1)`.
    pub fn slice(&mut self, src: NodeId, r0: usize, r1: usize, c0: usize, c1: usize) -> NodeId {
        let v = &self.nodes[src.0].value;
        assert!(r1 <= v.rows() && c1 <= v.cols() && r0 < r1 && c0 < c1, "slice out of bounds");
        let mut out = Matrix::zeros(r1 - r0, c1 - c0);
        for r in r0..r1 {
            for c in c0..c1 {
                out.set(r - r0, c - c0, v.get(r, c));
            }
        }
        let ng = self.needs(src);
        self.push(out, Op::Slice { src, r0, c0 }, ng)
    }

    /// Column vector -> diagonal matrix.
    pub fn diag_embed(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        assert_eq!(v.cols(), 1, "diag_embed expects a column vector");
        let value = Matrix::diag(v.data());
        let ng = self.needs(a);
        self.push(value, Op::DiagEmbed(a), ng)
    }

    /// Diagonal of a square matrix as a column vector.
    pub fn diag_part(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        assert_eq!(v.rows(), v.cols(), "diag_part needs a square matrix");
        let value = Matrix::col_vec(&v.diagonal());
        let ng = self.needs(a);
        self.push(value, Op::DiagPart(a), ng)
    }

    /// X = A⁻¹·B for SPD A. The Cholesky factor is retained so the backward
    /// rule (implicit differentiation: Ā = −A⁻¹·Ḡ·Xᵀ, B̄ = A⁻¹·Ḡ) reuses it.
    pub fn spd_solve(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, LinalgError> {
        let factor = Cholesky::factor(&self.nodes[a.0].value)?;
        let value = factor.solve_mat(&self.nodes[b.0].value);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::SpdSolve { a, b, factor: Box::new(factor) }, ng))
    }

    fn accumulate(&mut self, id: NodeId, contribution: &Matrix) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.data_mut().iter_mut().zip(contribution.data()) {
                    *gi += ci;
                }
            }
            None => node.grad = Some(contribution.clone()),
        }
    }

    /// Reverse sweep from a scalar loss; fills gradients of every node that
    /// transitively feeds it and was created with `param`-rooted lineage.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), AutodiffError> {
        let (r, c) = self.shape(loss);
        if r != 1 || c != 1 {
            return Err(AutodiffError::NonScalarLoss { rows: r, cols: c });
        }
        self.nodes[loss.0].grad = Some(Matrix::from_vec(1, 1, vec![1.0]));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let grad = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.needs(a) {
                        let da = grad.matmul(&self.nodes[b.0].value.transpose());
                        self.accumulate(a, &da);
                    }
                    if self.needs(b) {
                        let db = self.nodes[a.0].value.transpose().matmul(&grad);
                        self.accumulate(b, &db);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(a) {
                        let (ar, ac) = self.shape(a);
                        let da = reduce_to(&grad, ar, ac);
                        self.accumulate(a, &da);
                    }
                    if self.needs(b) {
                        let (br, bc) = self.shape(b);
                        let db = reduce_to(&grad, br, bc);
                        self.accumulate(b, &db);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(a) {
                        let (ar, ac) = self.shape(a);
                        let da = reduce_to(&grad, ar, ac);
                        self.accumulate(a, &da);
                    }
                    if self.needs(b) {
                        let (br, bc) = self.shape(b);
                        let db = reduce_to(&grad.scale(-1.0), br, bc);
                        self.accumulate(b, &db);
                    }
                }
                Op::Mul(a, b) => {
                    let (rows, cols) = self.shape(NodeId(i));
                    if self.needs(a) {
                        let vb = &self.nodes[b.0].value;
                        let mut full = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                full.set(r, c, grad.get(r, c) * bget(vb, r, c));
                            }
                        }
                        let (ar, ac) = self.shape(a);
                        let da = reduce_to(&full, ar, ac);
                        self.accumulate(a, &da);
                    }
                    if self.needs(b) {
                        let va = &self.nodes[a.0].value;
                        let mut full = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                full.set(r, c, grad.get(r, c) * bget(va, r, c));
                            }
                        }
                        let (br, bc) = self.shape(b);
                        let db = reduce_to(&full, br, bc);
                        self.accumulate(b, &db);
                    }
                }
                Op::Div(a, b) => {
                    let (rows, cols) = self.shape(NodeId(i));
                    if self.needs(a) {
                        let vb = &self.nodes[b.0].value;
                        let mut full = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                full.set(r, c, grad.get(r, c) / bget(vb, r, c));
                            }
                        }
                        let (ar, ac) = self.shape(a);
                        let da = reduce_to(&full, ar, ac);
                        self.accumulate(a, &da);
                    }
                    if self.needs(b) {
                        let va = &self.nodes[a.0].value;
                        let vb = &self.nodes[b.0].value;
                        let mut full = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                let bv = bget(vb, r, c);
                                full.set(r, c, -grad.get(r, c) * bget(va, r, c) / (bv * bv));
                            }
                        }
                        let (br, bc) = self.shape(b);
                        let db = reduce_to(&full, br, bc);
                        self.accumulate(b, &db);
                    }
                }
                Op::Neg(a) => {
                    self.accumulate(a, &grad.scale(-1.0));
                }
                Op::Scale(a, k) => {
                    self.accumulate(a, &grad.scale(k));
                }
                Op::Tanh(a) => {
                    let out = &self.nodes[i].value;
                    let data = grad
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(g, t)| g * (1.0 - t * t))
                        .collect();
                    let da = Matrix::from_vec(grad.rows(), grad.cols(), data);
                    self.accumulate(a, &da);
                }
                Op::Sigmoid(a) => {
                    let out = &self.nodes[i].value;
                    let data = grad
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect();
                    let da = Matrix::from_vec(grad.rows(), grad.cols(), data);
                    self.accumulate(a, &da);
                }
                Op::Relu(a) => {
                    let inp = &self.nodes[a.0].value;
                    let data = grad
                        .data()
                        .iter()
                        .zip(inp.data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    let da = Matrix::from_vec(grad.rows(), grad.cols(), data);
                    self.accumulate(a, &da);
                }
                Op::Log(a) => {
                    let inp = &self.nodes[a.0].value;
                    let data = grad.data().iter().zip(inp.data()).map(|(g, x)| g / x).collect();
                    let da = Matrix::from_vec(grad.rows(), grad.cols(), data);
                    self.accumulate(a, &da);
                }
                Op::ClampMin(a, min) => {
                    let inp = &self.nodes[a.0].value;
                    let data = grad
                        .data()
                        .iter()
                        .zip(inp.data())
                        .map(|(g, x)| if *x > min { *g } else { 0.0 })
                        .collect();
                    let da = Matrix::from_vec(grad.rows(), grad.cols(), data);
                    self.accumulate(a, &da);
                }
                Op::SoftmaxRows(a) => {
                    let p = &self.nodes[i].value;
                    let mut da = Matrix::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let dot: f64 =
                            (0..p.cols()).map(|c| grad.get(r, c) * p.get(r, c)).sum();
                        for c in 0..p.cols() {
                            da.set(r, c, p.get(r, c) * (grad.get(r, c) - dot));
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::Sum(a) => {
                    let (ar, ac) = self.shape(a);
                    let da = Matrix::filled(ar, ac, grad.get(0, 0));
                    self.accumulate(a, &da);
                }
                Op::Trace(a) => {
                    let (ar, _) = self.shape(a);
                    let da = Matrix::identity(ar).scale(grad.get(0, 0));
                    self.accumulate(a, &da);
                }
                Op::Transpose(a) => {
                    self.accumulate(a, &grad.transpose());
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (pr, pc) = self.shape(p);
                        if self.needs(p) {
                            let mut dp = Matrix::zeros(pr, pc);
                            for r in 0..pr {
                                for c in 0..pc {
                                    dp.set(r, c, grad.get(r, offset + c));
                                }
                            }
                            self.accumulate(p, &dp);
                        }
                        offset += pc;
                    }
                }
                Op::Slice { src, r0, c0 } => {
                    let (sr, sc) = self.shape(src);
                    let mut ds = Matrix::zeros(sr, sc);
                    for r in 0..grad.rows() {
                        for c in 0..grad.cols() {
                            ds.set(r0 + r, c0 + c, grad.get(r, c));
                        }
                    }
                    self.accumulate(src, &ds);
                }
                Op::DiagEmbed(a) => {
                    let da = Matrix::col_vec(&grad.diagonal());
                    self.accumulate(a, &da);
                }
                Op::DiagPart(a) => {
                    let (ar, _) = self.shape(a);
                    let mut da = Matrix::zeros(ar, ar);
                    for r in 0..ar {
                        da.set(r, r, grad.get(r, 0));
                    }
                    self.accumulate(a, &da);
                }
                Op::SpdSolve { a, b, factor } => {
                    // From A·X = B: dX = A⁻¹(dB − dA·X), so with Ḡ = ∂loss/∂X
                    // and A symmetric: B̄ = A⁻¹Ḡ and Ā = −B̄·Xᵀ.
                    let gb = factor.solve_mat(&grad);
                    if self.needs(b) {
                        self.accumulate(b, &gb);
                    }
                    if self.needs(a) {
                        let x = &self.nodes[i].value;
                        let ga = gb.matmul(&x.transpose()).scale(-1.0);
                        self.accumulate(a, &ga);
                    }
                }
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}
