//! Reverse-mode differentiation over dense tensors.
//!
//! Computations are recorded on a [`ValueGraph`] as a topologically ordered
//! tape of nodes. The op set is closed and fixed: every operation needed to
//! assemble the generator estimate and the layers built on it is listed in
//! [`OpKind`], each with a hand-written vector-Jacobian rule, so gradients
//! flow through the whole construction with no special cases. Recording is
//! single-threaded and deterministic; summation order is fixed everywhere.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;

/// Index of a node on the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The closed operation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    /// Elementwise a + b (same shape).
    Add,
    /// Elementwise a - b (same shape).
    Sub,
    /// Elementwise a * b (same shape).
    Hadamard,
    /// s * t where s is a one-element tensor.
    ScalarMul,
    /// Matrix product of rank-2 tensors, (m,k) x (k,n) -> (m,n).
    MatMul,
    /// Elementwise exp.
    Exp,
    /// Elementwise negation.
    Neg,
    /// Elementwise 1/x; entries must be nonzero.
    Reciprocal,
    /// Sum over the columns of each row, (m,n) -> (m,). Also serves as the
    /// lossless (m,1) -> (m,) collapse.
    RowSum,
    /// diag(d) * A: scales row i of A by d[i].
    DiagLeftScale,
    /// A * diag(d): scales column j of A by d[j].
    DiagRightScale,
    /// Squared Euclidean distances between the rows of a rank-2 tensor,
    /// (m,k) -> (m,m).
    PairwiseSqDist,
    /// Elementwise max(x, 0).
    Relu,
    /// Elementwise ln(1 + exp(x)), computed without overflow.
    Softplus,
    /// Mean of all entries -> scalar.
    Mean,
    /// Sum of all entries -> scalar.
    Sum,
    /// Elementwise x^2.
    Square,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Hadamard => "hadamard",
            OpKind::ScalarMul => "scalar_mul",
            OpKind::MatMul => "matmul",
            OpKind::Exp => "exp",
            OpKind::Neg => "neg",
            OpKind::Reciprocal => "reciprocal",
            OpKind::RowSum => "row_sum",
            OpKind::DiagLeftScale => "diag_left_scale",
            OpKind::DiagRightScale => "diag_right_scale",
            OpKind::PairwiseSqDist => "pairwise_sq_dist",
            OpKind::Relu => "relu",
            OpKind::Softplus => "softplus",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Square => "square",
        }
    }

    /// Every member of the closed op set, for exhaustive property tests.
    pub const ALL: [OpKind; 17] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Hadamard,
        OpKind::ScalarMul,
        OpKind::MatMul,
        OpKind::Exp,
        OpKind::Neg,
        OpKind::Reciprocal,
        OpKind::RowSum,
        OpKind::DiagLeftScale,
        OpKind::DiagRightScale,
        OpKind::PairwiseSqDist,
        OpKind::Relu,
        OpKind::Softplus,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::Square,
    ];
}

enum NodeKind {
    Leaf { trainable: bool },
    Op { kind: OpKind, inputs: Vec<NodeId> },
}

struct Node {
    kind: NodeKind,
    value: Tensor,
}

/// A recorded computation: nodes in topological order, inputs always ahead
/// of the nodes that consume them.
#[derive(Default)]
pub struct ValueGraph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
/// Leaves the loss does not depend on map to zero tensors.
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.grads.get(&leaf)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl ValueGraph {
    pub fn new() -> Self {
        ValueGraph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf: backward reports its gradient.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(NodeKind::Leaf { trainable: true }, value)
    }

    /// A constant leaf: participates in the computation, no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(NodeKind::Leaf { trainable: false }, value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn is_trainable_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].kind, NodeKind::Leaf { trainable: true })
    }

    fn push(&mut self, kind: NodeKind, value: Tensor) -> NodeId {
        self.nodes.push(Node { kind, value });
        NodeId(self.nodes.len() - 1)
    }

    fn input_value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Record one operation: validates shapes, evaluates the result, and
    /// appends a node. Results are checked for NaN/infinity.
    pub fn record(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let value = self.eval(kind, inputs)?;
        if !value.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteResult { op: kind.name() });
        }
        Ok(self.push(NodeKind::Op { kind, inputs: inputs.to_vec() }, value))
    }

    fn arity(kind: OpKind) -> usize {
        match kind {
            OpKind::Add
            | OpKind::Sub
            | OpKind::Hadamard
            | OpKind::ScalarMul
            | OpKind::MatMul
            | OpKind::DiagLeftScale
            | OpKind::DiagRightScale => 2,
            _ => 1,
        }
    }

    fn eval(&self, kind: OpKind, inputs: &[NodeId]) -> Result<Tensor> {
        if inputs.len() != Self::arity(kind) {
            return Err(Error::ShapeMismatch {
                op: kind.name(),
                detail: format!("expected {} inputs, got {}", Self::arity(kind), inputs.len()),
            });
        }
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::ShapeMismatch {
                    op: kind.name(),
                    detail: format!("input node {} not on graph", id.0),
                });
            }
        }
        let a = self.input_value(inputs[0]);
        match kind {
            OpKind::Add => ew2(kind, a, self.input_value(inputs[1]), |x, y| x + y),
            OpKind::Sub => ew2(kind, a, self.input_value(inputs[1]), |x, y| x - y),
            OpKind::Hadamard => ew2(kind, a, self.input_value(inputs[1]), |x, y| x * y),
            OpKind::ScalarMul => {
                let t = self.input_value(inputs[1]);
                if !a.is_scalar_like() {
                    return Err(shape_err(kind, "first input must be a one-element tensor", a, t));
                }
                let s = a.item();
                Ok(map1(t, |x| s * x))
            }
            OpKind::MatMul => matmul(a, self.input_value(inputs[1])),
            OpKind::Exp => Ok(map1(a, f64::exp)),
            OpKind::Neg => Ok(map1(a, |x| -x)),
            OpKind::Reciprocal => {
                if a.data().iter().any(|v| *v == 0.0) {
                    return Err(Error::NonFiniteResult { op: kind.name() });
                }
                Ok(map1(a, |x| 1.0 / x))
            }
            OpKind::RowSum => {
                require_rank2(kind, a)?;
                let (m, n) = (a.rows(), a.cols());
                let mut out = vec![0.0; m];
                for i in 0..m {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += a.at(i, j);
                    }
                    out[i] = acc;
                }
                Ok(Tensor::from_parts_unchecked(vec![m], out))
            }
            OpKind::DiagLeftScale => {
                let mat = self.input_value(inputs[1]);
                require_rank2(kind, mat)?;
                if a.rank() != 1 || a.numel() != mat.rows() {
                    return Err(shape_err(kind, "diagonal must be a vector of length rows(A)", a, mat));
                }
                let (m, n) = (mat.rows(), mat.cols());
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    let d = a.data()[i];
                    for j in 0..n {
                        out[i * n + j] = d * mat.at(i, j);
                    }
                }
                Ok(Tensor::from_parts_unchecked(vec![m, n], out))
            }
            OpKind::DiagRightScale => {
                let d = self.input_value(inputs[1]);
                require_rank2(kind, a)?;
                if d.rank() != 1 || d.numel() != a.cols() {
                    return Err(shape_err(kind, "diagonal must be a vector of length cols(A)", a, d));
                }
                let (m, n) = (a.rows(), a.cols());
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[i * n + j] = a.at(i, j) * d.data()[j];
                    }
                }
                Ok(Tensor::from_parts_unchecked(vec![m, n], out))
            }
            OpKind::PairwiseSqDist => pairwise_sq_dist(a),
            OpKind::Relu => Ok(map1(a, |x| if x > 0.0 { x } else { 0.0 })),
            OpKind::Softplus => Ok(map1(a, softplus)),
            OpKind::Mean => {
                let n = a.numel() as f64;
                let s: f64 = a.data().iter().sum();
                Ok(Tensor::from_parts_unchecked(vec![], vec![s / n]))
            }
            OpKind::Sum => {
                let s: f64 = a.data().iter().sum();
                Ok(Tensor::from_parts_unchecked(vec![], vec![s]))
            }
            OpKind::Square => Ok(map1(a, |x| x * x)),
        }
    }

    /// Reverse pass from a scalar loss. Visits each node at most once, in
    /// reverse topological order, and returns one gradient per trainable
    /// leaf (zeros for leaves the loss does not reach).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss { shape: loss_value.shape().to_vec() });
        }
        let mut adjoint: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoint[loss.0] = Some(Tensor::filled(loss_value.shape().to_vec(), 1.0).expect("finite"));

        for i in (0..=loss.0).rev() {
            let upstream = match &adjoint[i] {
                Some(u) => u.clone(),
                None => continue,
            };
            let (kind, inputs) = match &self.nodes[i].kind {
                NodeKind::Leaf { .. } => continue,
                NodeKind::Op { kind, inputs } => (*kind, inputs.clone()),
            };
            let contributions = self.vjp(kind, &inputs, NodeId(i), &upstream);
            for (input, grad) in contributions {
                match &mut adjoint[input.0] {
                    Some(existing) => *existing = add_raw(existing, &grad),
                    slot @ None => *slot = Some(grad),
                }
            }
        }

        let mut grads = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let NodeKind::Leaf { trainable: true } = node.kind {
                let g = match adjoint[i].take() {
                    Some(g) => g,
                    None => Tensor::zeros(node.value.shape().to_vec()),
                };
                grads.insert(NodeId(i), g);
            }
        }
        Ok(Gradients { grads })
    }

    /// The vector-Jacobian rule of one op: upstream adjoint in, one
    /// contribution per input out.
    fn vjp(&self, kind: OpKind, inputs: &[NodeId], out: NodeId, u: &Tensor) -> Vec<(NodeId, Tensor)> {
        let val = |id: NodeId| self.input_value(id);
        match kind {
            OpKind::Add => vec![(inputs[0], u.clone()), (inputs[1], u.clone())],
            OpKind::Sub => vec![(inputs[0], u.clone()), (inputs[1], map1(u, |x| -x))],
            OpKind::Hadamard => {
                let (a, b) = (val(inputs[0]), val(inputs[1]));
                vec![(inputs[0], mul_raw(u, b)), (inputs[1], mul_raw(u, a))]
            }
            OpKind::ScalarMul => {
                let (s, t) = (val(inputs[0]), val(inputs[1]));
                let ds: f64 = u.data().iter().zip(t.data()).map(|(x, y)| x * y).sum();
                let sv = s.item();
                vec![
                    (inputs[0], Tensor::from_parts_unchecked(s.shape().to_vec(), vec![ds])),
                    (inputs[1], map1(u, |x| sv * x)),
                ]
            }
            OpKind::MatMul => {
                let (a, b) = (val(inputs[0]), val(inputs[1]));
                vec![
                    (inputs[0], matmul_nt(u, b)),
                    (inputs[1], matmul_tn(a, u)),
                ]
            }
            OpKind::Exp => {
                let o = val(out);
                vec![(inputs[0], mul_raw(u, o))]
            }
            OpKind::Neg => vec![(inputs[0], map1(u, |x| -x))],
            OpKind::Reciprocal => {
                let o = val(out);
                let g: Vec<f64> = u
                    .data()
                    .iter()
                    .zip(o.data())
                    .map(|(ui, oi)| -ui * oi * oi)
                    .collect();
                vec![(inputs[0], Tensor::from_parts_unchecked(u.shape().to_vec(), g))]
            }
            OpKind::RowSum => {
                let a = val(inputs[0]);
                let (m, n) = (a.rows(), a.cols());
                let mut g = vec![0.0; m * n];
                for i in 0..m {
                    let ui = u.data()[i];
                    for j in 0..n {
                        g[i * n + j] = ui;
                    }
                }
                vec![(inputs[0], Tensor::from_parts_unchecked(vec![m, n], g))]
            }
            OpKind::DiagLeftScale => {
                let (d, a) = (val(inputs[0]), val(inputs[1]));
                let (m, n) = (a.rows(), a.cols());
                let mut gd = vec![0.0; m];
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    let di = d.data()[i];
                    let mut acc = 0.0;
                    for j in 0..n {
                        let uij = u.at(i, j);
                        acc += uij * a.at(i, j);
                        ga[i * n + j] = di * uij;
                    }
                    gd[i] = acc;
                }
                vec![
                    (inputs[0], Tensor::from_parts_unchecked(vec![m], gd)),
                    (inputs[1], Tensor::from_parts_unchecked(vec![m, n], ga)),
                ]
            }
            OpKind::DiagRightScale => {
                let (a, d) = (val(inputs[0]), val(inputs[1]));
                let (m, n) = (a.rows(), a.cols());
                let mut ga = vec![0.0; m * n];
                let mut gd = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        let uij = u.at(i, j);
                        ga[i * n + j] = uij * d.data()[j];
                        gd[j] += uij * a.at(i, j);
                    }
                }
                vec![
                    (inputs[0], Tensor::from_parts_unchecked(vec![m, n], ga)),
                    (inputs[1], Tensor::from_parts_unchecked(vec![n], gd)),
                ]
            }
            OpKind::PairwiseSqDist => {
                // With S = U + U^T: dX[a,k] = 2 * (sum_j S[a,j]) * X[a,k]
                //                          - 2 * (S X)[a,k].
                let x = val(inputs[0]);
                let (m, k) = (x.rows(), x.cols());
                let mut g = vec![0.0; m * k];
                for a_row in 0..m {
                    let mut s_row_sum = 0.0;
                    let mut sx = vec![0.0; k];
                    for j in 0..m {
                        let s_aj = u.at(a_row, j) + u.at(j, a_row);
                        s_row_sum += s_aj;
                        for c in 0..k {
                            sx[c] += s_aj * x.at(j, c);
                        }
                    }
                    for c in 0..k {
                        g[a_row * k + c] = 2.0 * (s_row_sum * x.at(a_row, c) - sx[c]);
                    }
                }
                vec![(inputs[0], Tensor::from_parts_unchecked(vec![m, k], g))]
            }
            OpKind::Relu => {
                let a = val(inputs[0]);
                let g: Vec<f64> = u
                    .data()
                    .iter()
                    .zip(a.data())
                    .map(|(ui, xi)| if *xi > 0.0 { *ui } else { 0.0 })
                    .collect();
                vec![(inputs[0], Tensor::from_parts_unchecked(u.shape().to_vec(), g))]
            }
            OpKind::Softplus => {
                let a = val(inputs[0]);
                let g: Vec<f64> = u
                    .data()
                    .iter()
                    .zip(a.data())
                    .map(|(ui, xi)| ui * sigmoid(*xi))
                    .collect();
                vec![(inputs[0], Tensor::from_parts_unchecked(u.shape().to_vec(), g))]
            }
            OpKind::Mean => {
                let a = val(inputs[0]);
                let scale = u.item() / a.numel() as f64;
                vec![(inputs[0], Tensor::from_parts_unchecked(a.shape().to_vec(), vec![scale; a.numel()]))]
            }
            OpKind::Sum => {
                let a = val(inputs[0]);
                let uv = u.item();
                vec![(inputs[0], Tensor::from_parts_unchecked(a.shape().to_vec(), vec![uv; a.numel()]))]
            }
            OpKind::Square => {
                let a = val(inputs[0]);
                let g: Vec<f64> = u
                    .data()
                    .iter()
                    .zip(a.data())
                    .map(|(ui, xi)| 2.0 * xi * ui)
                    .collect();
                vec![(inputs[0], Tensor::from_parts_unchecked(u.shape().to_vec(), g))]
            }
        }
    }
}

// Convenience wrappers so call sites read like the math.
impl ValueGraph {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Sub, &[a, b])
    }
    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Hadamard, &[a, b])
    }
    pub fn scalar_mul(&mut self, s: NodeId, t: NodeId) -> Result<NodeId> {
        self.record(OpKind::ScalarMul, &[s, t])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::MatMul, &[a, b])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Exp, &[a])
    }
    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Neg, &[a])
    }
    pub fn reciprocal(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Reciprocal, &[a])
    }
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::RowSum, &[a])
    }
    pub fn diag_left_scale(&mut self, d: NodeId, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::DiagLeftScale, &[d, a])
    }
    pub fn diag_right_scale(&mut self, a: NodeId, d: NodeId) -> Result<NodeId> {
        self.record(OpKind::DiagRightScale, &[a, d])
    }
    pub fn pairwise_sq_dist(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::PairwiseSqDist, &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Relu, &[a])
    }
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Softplus, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Mean, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Sum, &[a])
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Square, &[a])
    }
}

/// Central-difference gradient estimate: (f(x + h e_i) - f(x - h e_i)) / 2h
/// per coordinate. Independent of the reverse-mode path; serves as the
/// gradient-check oracle.
pub fn finite_diff_gradient<F>(mut f: F, theta: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let mut grad = vec![0.0; theta.numel()];
    let base = theta.data().to_vec();
    for i in 0..theta.numel() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let fp = f(&Tensor::new(theta.shape().to_vec(), plus)?)?;
        let fm = f(&Tensor::new(theta.shape().to_vec(), minus)?)?;
        let g = (fp - fm) / (2.0 * step);
        if !g.is_finite() {
            return Err(Error::NonFiniteResult { op: "finite_diff_gradient" });
        }
        grad[i] = g;
    }
    Tensor::new(theta.shape().to_vec(), grad)
}

fn softplus(x: f64) -> f64 {
    // max(x, 0) + ln(1 + exp(-|x|)) avoids overflow on either side.
    let m = if x > 0.0 { x } else { 0.0 };
    m + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shape_err(kind: OpKind, msg: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op: kind.name(),
        detail: format!("{msg} (got {:?} and {:?})", a.shape(), b.shape()),
    }
}

fn require_rank2(kind: OpKind, t: &Tensor) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: kind.name(),
            detail: format!("expected a rank-2 tensor, got shape {:?}", t.shape()),
        });
    }
    Ok(())
}

fn map1(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts_unchecked(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect())
}

fn ew2(kind: OpKind, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(kind, "elementwise operands must share a shape", a, b));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Ok(Tensor::from_parts_unchecked(a.shape().to_vec(), data))
}

fn add_raw(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::from_parts_unchecked(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    )
}

fn mul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::from_parts_unchecked(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
    )
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
        return Err(shape_err(OpKind::MatMul, "need (m,k) x (k,n)", a, b));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.at(i, p) * b.at(p, j);
            }
            out[i * n + j] = acc;
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![m, n], out))
}

/// u * b^T without materializing the transpose.
fn matmul_nt(u: &Tensor, b: &Tensor) -> Tensor {
    let (m, n, k) = (u.rows(), u.cols(), b.rows());
    debug_assert_eq!(n, b.cols());
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..k {
            let mut acc = 0.0;
            for p in 0..n {
                acc += u.at(i, p) * b.at(j, p);
            }
            out[i * k + j] = acc;
        }
    }
    Tensor::from_parts_unchecked(vec![m, k], out)
}

/// a^T * u without materializing the transpose.
fn matmul_tn(a: &Tensor, u: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), u.cols());
    debug_assert_eq!(m, u.rows());
    let mut out = vec![0.0; k * n];
    for i in 0..k {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..m {
                acc += a.at(p, i) * u.at(p, j);
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::from_parts_unchecked(vec![k, n], out)
}

/// Squared distances between rows via the expansion
/// |x|^2 + |y|^2 - 2<x,y>, with tiny cancellation negatives clamped to zero
/// and an exactly zero diagonal. The result is symmetric by construction.
fn pairwise_sq_dist(x: &Tensor) -> Result<Tensor> {
    require_rank2(OpKind::PairwiseSqDist, x)?;
    let (m, k) = (x.rows(), x.cols());
    let mut sq = vec![0.0; m];
    for i in 0..m {
        let mut acc = 0.0;
        for c in 0..k {
            let v = x.at(i, c);
            acc += v * v;
        }
        sq[i] = acc;
    }
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for j in (i + 1)..m {
            let mut dot = 0.0;
            for c in 0..k {
                dot += x.at(i, c) * x.at(j, c);
            }
            let d = (sq[i] + sq[j] - 2.0 * dot).max(0.0);
            out[i * m + j] = d;
            out[j * m + i] = d;
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![m, m], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph() -> ValueGraph {
        ValueGraph::new()
    }

    #[test]
    fn exp_of_zero_is_one() {
        let mut g = graph();
        let x = g.constant(Tensor::scalar(0.0).unwrap());
        let y = g.exp(x).unwrap();
        assert_eq!(g.value(y).item(), 1.0);
    }

    #[test]
    fn pairwise_sq_dist_of_identical_rows_is_zero() {
        let mut g = graph();
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap());
        let d = g.pairwise_sq_dist(x).unwrap();
        assert_eq!(g.value(d).data(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_identity_returns_operand() {
        let mut g = graph();
        let i = g.constant(Tensor::eye(2));
        let b = g.constant(Tensor::matrix(2, 2, vec![3.0, -1.0, 0.5, 2.0]).unwrap());
        let out = g.matmul(i, b).unwrap();
        assert_eq!(g.value(out), g.value(b));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = graph();
        let x = g.leaf(Tensor::vector(vec![4.0, -2.0, 7.0]).unwrap());
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        let mut g = graph();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let sq = g.square(x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut g = graph();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let unused = g.leaf(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = graph();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn reciprocal_of_zero_errors() {
        let mut g = graph();
        let x = g.constant(Tensor::vector(vec![2.0, 0.0]).unwrap());
        assert!(matches!(g.reciprocal(x), Err(Error::NonFiniteResult { .. })));
    }

    #[test]
    fn exp_overflow_is_caught() {
        let mut g = graph();
        let x = g.constant(Tensor::scalar(1000.0).unwrap());
        assert!(matches!(g.exp(x), Err(Error::NonFiniteResult { .. })));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = graph();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn recording_is_deterministic() {
        let build = || {
            let mut g = graph();
            let x = g.leaf(Tensor::matrix(3, 2, vec![0.3, -0.7, 1.1, 0.2, -0.4, 0.9]).unwrap());
            let d = g.pairwise_sq_dist(x).unwrap();
            let nd = g.neg(d).unwrap();
            let e = g.exp(nd).unwrap();
            let q = g.row_sum(e).unwrap();
            let r = g.reciprocal(q).unwrap();
            let p = g.diag_left_scale(r, e).unwrap();
            let loss = g.mean(p).unwrap();
            let grads = g.backward(loss).unwrap();
            (g.value(loss).item(), grads.get(x).unwrap().clone())
        };
        let (l1, g1) = build();
        let (l2, g2) = build();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert!(g1.bit_eq(&g2));
    }

    #[test]
    fn finite_diff_matches_simple_closed_forms() {
        // d/dx x^2 at 3 is 6.
        let f = |t: &Tensor| Ok(t.item() * t.item());
        let g = finite_diff_gradient(f, &Tensor::scalar(3.0).unwrap(), 1e-5).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-6);

        // d/dx exp(x) at 0 is 1.
        let f = |t: &Tensor| Ok(t.item().exp());
        let g = finite_diff_gradient(f, &Tensor::scalar(0.0).unwrap(), 1e-5).unwrap();
        assert!((g.item() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        let mut g = graph();
        let x = g.constant(Tensor::vector(vec![-800.0, 0.0, 800.0]).unwrap());
        let y = g.softplus(x).unwrap();
        let v = g.value(y).data().to_vec();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(v[2], 800.0);
    }
}
