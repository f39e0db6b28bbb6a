//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations are recorded on a [`Graph`] in creation order and evaluated
//! eagerly. Because every node only refers to earlier nodes, the tape is
//! already a topological order: [`Graph::forward`] replays it after leaf
//! values change, and [`Graph::backward`] walks it in reverse.

use std::rc::Rc;

use thiserror::Error;

use super::tensor::{broadcast_shape, broadcast_zip, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("backward root must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
    #[error("node {node} refers to node {parent}, which is not earlier on the tape")]
    Cycle { node: usize, parent: usize },
    #[error("node {0} is not a leaf")]
    NotALeaf(usize),
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("unknown node {0}")]
    UnknownNode(usize),
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var, f64),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Dot(Var, Var),
    Exp(Var),
    Log(Var),
    Sqrt { x: Var, floor: f64 },
    Square(Var),
    Cosh(Var),
    Sinh(Var),
    Acosh { x: Var, eps: f64 },
    Asin { x: Var, eps: f64 },
    Acos { x: Var, eps: f64 },
    Relu(Var),
    SinhcSqrt(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    RowNorm { x: Var, floor: f64 },
    SoftmaxCrossEntropy { logits: Var, targets: Rc<[usize]> },
    GatherRows { x: Var, index: Rc<[usize]> },
    ConcatRows(Rc<[Var]>),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) | MatMulNt(a, b) | Dot(a, b) => {
                vec![*a, *b]
            }
            Neg(a)
            | Scale(a, _)
            | Offset(a, _)
            | Transpose(a)
            | Exp(a)
            | Log(a)
            | Square(a)
            | Cosh(a)
            | Sinh(a)
            | Relu(a)
            | SinhcSqrt(a)
            | Sum(a)
            | Mean(a)
            | RowSum(a) => vec![*a],
            Sqrt { x, .. } | Acosh { x, .. } | Asin { x, .. } | Acos { x, .. } | RowNorm { x, .. } => vec![*x],
            SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            GatherRows { x, .. } => vec![*x],
            ConcatRows(parts) => parts.to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of a scalar root with respect to every node on the tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node does not influence the root.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient with zeros filled in for nodes the root does not depend on.
    pub fn get_or_zeros(&self, var: Var, shape: (usize, usize)) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

// `sinh(sqrt(z))/sqrt(z)` switches to its Taylor series below this argument.
const SINHC_SERIES_BELOW: f64 = 1e-3;

fn sinhc_sqrt(z: f64) -> f64 {
    let z = z.max(0.0);
    if z < SINHC_SERIES_BELOW {
        1.0 + z / 6.0 + z * z / 120.0 + z * z * z / 5040.0
    } else {
        let s = z.sqrt();
        s.sinh() / s
    }
}

fn sinhc_sqrt_grad(z: f64) -> f64 {
    if z < SINHC_SERIES_BELOW {
        let z = z.max(0.0);
        1.0 / 6.0 + z / 60.0 + z * z / 1680.0
    } else {
        let s = z.sqrt();
        (s * s.cosh() - s.sinh()) / (2.0 * s * s * s)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input node. Constants are leaves whose gradient is ignored.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.shape()
    }

    /// Replaces the value of a leaf. Call [`Graph::forward`] afterwards to
    /// refresh dependent nodes.
    pub fn set_leaf(&mut self, var: Var, value: Tensor) -> Result<(), GraphError> {
        let node = self.nodes.get_mut(var.0).ok_or(GraphError::UnknownNode(var.0))?;
        if !matches!(node.op, Op::Leaf) {
            return Err(GraphError::NotALeaf(var.0));
        }
        if node.value.shape() != value.shape() {
            return Err(GraphError::ShapeMismatch {
                expected: node.value.shape(),
                actual: value.shape(),
            });
        }
        node.value = value;
        Ok(())
    }

    fn push(&mut self, op: Op) -> Var {
        let value = self.eval(&op);
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Re-evaluates every non-leaf node up to `root` in tape order and
    /// returns the root's value.
    pub fn forward(&mut self, root: Var) -> Result<Tensor, GraphError> {
        if root.0 >= self.nodes.len() {
            return Err(GraphError::UnknownNode(root.0));
        }
        for i in 0..=root.0 {
            if let Some(p) = self.nodes[i].op.parents().into_iter().find(|p| p.0 >= i) {
                return Err(GraphError::Cycle { node: i, parent: p.0 });
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = self.eval(&self.nodes[i].op);
            self.nodes[i].value = value;
        }
        Ok(self.nodes[root.0].value.clone())
    }

    fn v(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.v(a), self.v(b));
        let shape = broadcast_shape(ta.shape(), tb.shape())
            .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape()));
        broadcast_zip(ta, tb, shape, f)
    }

    fn eval(&self, op: &Op) -> Tensor {
        use Op::*;
        match op {
            Leaf => unreachable!("leaves are not evaluated"),
            Add(a, b) => self.binary(*a, *b, |x, y| x + y),
            Sub(a, b) => self.binary(*a, *b, |x, y| x - y),
            Mul(a, b) => self.binary(*a, *b, |x, y| x * y),
            Div(a, b) => self.binary(*a, *b, |x, y| x / y),
            Neg(a) => self.v(*a).map(|x| -x),
            Scale(a, s) => self.v(*a).map(|x| x * s),
            Offset(a, s) => self.v(*a).map(|x| x + s),
            MatMul(a, b) => self.v(*a).matmul(self.v(*b)),
            MatMulNt(a, b) => self.v(*a).matmul_nt(self.v(*b)),
            Transpose(a) => self.v(*a).transpose(),
            Dot(a, b) => {
                let (ta, tb) = (self.v(*a), self.v(*b));
                assert_eq!(ta.shape(), tb.shape(), "dot of mismatched shapes");
                Tensor::scalar(ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum())
            }
            Exp(a) => self.v(*a).map(f64::exp),
            Log(a) => self.v(*a).map(f64::ln),
            Sqrt { x, floor } => self.v(*x).map(|v| v.max(*floor).sqrt()),
            Square(a) => self.v(*a).map(|x| x * x),
            Cosh(a) => self.v(*a).map(f64::cosh),
            Sinh(a) => self.v(*a).map(f64::sinh),
            Acosh { x, .. } => self.v(*x).map(|v| v.max(1.0).acosh()),
            Asin { x, .. } => self.v(*x).map(|v| v.clamp(-1.0, 1.0).asin()),
            Acos { x, .. } => self.v(*x).map(|v| v.clamp(-1.0, 1.0).acos()),
            Relu(a) => self.v(*a).map(|x| x.max(0.0)),
            SinhcSqrt(a) => self.v(*a).map(sinhc_sqrt),
            Sum(a) => Tensor::scalar(self.v(*a).sum()),
            Mean(a) => {
                let t = self.v(*a);
                Tensor::scalar(t.sum() / t.len() as f64)
            }
            RowSum(a) => {
                let t = self.v(*a);
                Tensor::column((0..t.rows()).map(|r| t.row(r).iter().sum()).collect())
            }
            RowNorm { x, floor } => {
                let t = self.v(*x);
                Tensor::column(
                    (0..t.rows())
                        .map(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt().max(*floor))
                        .collect(),
                )
            }
            SoftmaxCrossEntropy { logits, targets } => {
                let t = self.v(*logits);
                let total: f64 = (0..t.rows())
                    .map(|r| {
                        let row = t.row(r);
                        logsumexp(row) - row[targets[r]]
                    })
                    .sum();
                Tensor::scalar(total / t.rows() as f64)
            }
            GatherRows { x, index } => {
                let t = self.v(*x);
                let mut data = Vec::with_capacity(index.len() * t.cols());
                for &i in index.iter() {
                    data.extend_from_slice(t.row(i));
                }
                Tensor::new(index.len(), t.cols(), data)
            }
            ConcatRows(parts) => {
                let cols = self.v(parts[0]).cols();
                let mut rows = 0;
                let mut data = Vec::new();
                for p in parts.iter() {
                    let t = self.v(*p);
                    assert_eq!(t.cols(), cols, "concat of mismatched widths");
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::new(rows, cols, data)
            }
        }
    }

    /// Reverse pass from a scalar root. Fan-out contributions are summed.
    pub fn backward(&self, root: Var) -> Result<Gradients, GraphError> {
        let (rows, cols) = self
            .nodes
            .get(root.0)
            .ok_or(GraphError::UnknownNode(root.0))?
            .value
            .shape();
        if (rows, cols) != (1, 1) {
            return Err(GraphError::NonScalarRoot { rows, cols });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            for (parent, contribution) in self.local_grads(i, &g) {
                if parent.0 >= i {
                    return Err(GraphError::Cycle {
                        node: i,
                        parent: parent.0,
                    });
                }
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        use Op::*;
        let node = &self.nodes[i];
        let out = &node.value;
        let unary = |x: Var, f: &dyn Fn(f64, f64) -> f64| {
            // f(input, output) -> local derivative
            let input = self.v(x);
            let data = input
                .data()
                .iter()
                .zip(out.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| gi * f(xi, yi))
                .collect();
            vec![(x, Tensor::new(input.rows(), input.cols(), data))]
        };
        match &node.op {
            Leaf => vec![],
            Add(a, b) => vec![(*a, g.reduce_to(self.shape(*a))), (*b, g.reduce_to(self.shape(*b)))],
            Sub(a, b) => vec![
                (*a, g.reduce_to(self.shape(*a))),
                (*b, g.map(|x| -x).reduce_to(self.shape(*b))),
            ],
            Mul(a, b) => {
                let ga = broadcast_zip(g, self.v(*b), g.shape(), |gi, bi| gi * bi);
                let gb = broadcast_zip(g, self.v(*a), g.shape(), |gi, ai| gi * ai);
                vec![(*a, ga.reduce_to(self.shape(*a))), (*b, gb.reduce_to(self.shape(*b)))]
            }
            Div(a, b) => {
                let ga = broadcast_zip(g, self.v(*b), g.shape(), |gi, bi| gi / bi);
                let gq = g.zip_map(out, |gi, q| gi * q);
                let gb = broadcast_zip(&gq, self.v(*b), g.shape(), |gqi, bi| -gqi / bi);
                vec![(*a, ga.reduce_to(self.shape(*a))), (*b, gb.reduce_to(self.shape(*b)))]
            }
            Neg(a) => vec![(*a, g.map(|x| -x))],
            Scale(a, s) => vec![(*a, g.map(|x| x * s))],
            Offset(a, _) => vec![(*a, g.clone())],
            MatMul(a, b) => vec![(*a, g.matmul_nt(self.v(*b))), (*b, self.v(*a).transpose().matmul(g))],
            MatMulNt(a, b) => vec![(*a, g.matmul(self.v(*b))), (*b, g.transpose().matmul(self.v(*a)))],
            Transpose(a) => vec![(*a, g.transpose())],
            Dot(a, b) => {
                let s = g.item();
                vec![(*a, self.v(*b).map(|x| x * s)), (*b, self.v(*a).map(|x| x * s))]
            }
            Exp(a) => unary(*a, &|_, y| y),
            Log(a) => unary(*a, &|x, _| 1.0 / x),
            Sqrt { x, floor } => {
                let floor = *floor;
                unary(*x, &move |xi, yi| if xi < floor { 0.0 } else { 0.5 / yi })
            }
            Square(a) => unary(*a, &|x, _| 2.0 * x),
            Cosh(a) => unary(*a, &|x, _| x.sinh()),
            Sinh(a) => unary(*a, &|x, _| x.cosh()),
            Acosh { x, eps } => {
                let eps = *eps;
                unary(*x, &move |xi, _| {
                    if xi < 1.0 {
                        0.0
                    } else {
                        let xc = xi.max(1.0 + eps);
                        1.0 / (xc * xc - 1.0).sqrt()
                    }
                })
            }
            Asin { x, eps } => {
                let eps = *eps;
                unary(*x, &move |xi, _| {
                    if xi.abs() > 1.0 {
                        0.0
                    } else {
                        let xc = xi.clamp(-1.0 + eps, 1.0 - eps);
                        1.0 / (1.0 - xc * xc).sqrt()
                    }
                })
            }
            Acos { x, eps } => {
                let eps = *eps;
                unary(*x, &move |xi, _| {
                    if xi.abs() > 1.0 {
                        0.0
                    } else {
                        let xc = xi.clamp(-1.0 + eps, 1.0 - eps);
                        -1.0 / (1.0 - xc * xc).sqrt()
                    }
                })
            }
            Relu(a) => unary(*a, &|x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            SinhcSqrt(a) => unary(*a, &|x, _| if x < 0.0 { 0.0 } else { sinhc_sqrt_grad(x) }),
            Sum(a) => {
                let (r, c) = self.shape(*a);
                vec![(*a, Tensor::filled(r, c, g.item()))]
            }
            Mean(a) => {
                let (r, c) = self.shape(*a);
                vec![(*a, Tensor::filled(r, c, g.item() / (r * c) as f64))]
            }
            RowSum(a) => {
                let (r, c) = self.shape(*a);
                vec![(*a, broadcast_zip(g, &Tensor::zeros(1, c), (r, c), |gi, _| gi))]
            }
            RowNorm { x, floor } => {
                let t = self.v(*x);
                let mut data = Vec::with_capacity(t.len());
                for r in 0..t.rows() {
                    let n = out.data()[r];
                    let raw = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let active = raw >= *floor && n > 0.0;
                    for &v in t.row(r) {
                        data.push(if active { g.data()[r] * v / n } else { 0.0 });
                    }
                }
                vec![(*x, Tensor::new(t.rows(), t.cols(), data))]
            }
            SoftmaxCrossEntropy { logits, targets } => {
                let t = self.v(*logits);
                let scale = g.item() / t.rows() as f64;
                let mut data = Vec::with_capacity(t.len());
                for r in 0..t.rows() {
                    let row = t.row(r);
                    let lse = logsumexp(row);
                    for (c, &v) in row.iter().enumerate() {
                        let p = (v - lse).exp();
                        let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                        data.push(scale * (p - onehot));
                    }
                }
                vec![(*logits, Tensor::new(t.rows(), t.cols(), data))]
            }
            GatherRows { x, index } => {
                let (r, c) = self.shape(*x);
                let mut acc = Tensor::zeros(r, c);
                for (k, &src) in index.iter().enumerate() {
                    for j in 0..c {
                        acc.data_mut()[src * c + j] += g.get(k, j);
                    }
                }
                vec![(*x, acc)]
            }
            ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let (r, c) = self.shape(*p);
                        let slice = g.data()[offset * c..(offset + r) * c].to_vec();
                        offset += r;
                        (*p, Tensor::new(r, c, slice))
                    })
                    .collect()
            }
        }
    }

    // Builders. Shapes are checked eagerly so mistakes panic at the call site.

    fn check_broadcast(&self, a: Var, b: Var) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(broadcast_shape(sa, sb).is_some(), "cannot broadcast {sa:?} with {sb:?}");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_broadcast(a, b);
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_broadcast(a, b);
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_broadcast(a, b);
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.check_broadcast(a, b);
        self.push(Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.push(Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.push(Op::Scale(a, s))
    }

    pub fn offset(&mut self, a: Var, s: f64) -> Var {
        self.push(Op::Offset(a, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).1, self.shape(b).0, "matmul shape mismatch");
        self.push(Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).1, self.shape(b).1, "matmul_nt shape mismatch");
        self.push(Op::MatMulNt(a, b))
    }

    /// Matrix-vector product for a column vector `v`.
    pub fn matvec(&mut self, m: Var, v: Var) -> Var {
        assert_eq!(self.shape(v).1, 1, "matvec expects a column vector");
        self.matmul(m, v)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        self.push(Op::Transpose(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "dot of mismatched shapes");
        self.push(Op::Dot(a, b))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.push(Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.push(Op::Sqrt { x: a, floor: 0.0 })
    }

    /// `sqrt(max(x, floor))`, with zero gradient below the floor.
    pub fn sqrt_floored(&mut self, a: Var, floor: f64) -> Var {
        self.push(Op::Sqrt { x: a, floor })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.push(Op::Square(a))
    }

    pub fn cosh(&mut self, a: Var) -> Var {
        self.push(Op::Cosh(a))
    }

    pub fn sinh(&mut self, a: Var) -> Var {
        self.push(Op::Sinh(a))
    }

    /// `acosh(max(x, 1))`; the derivative is taken at `max(x, 1 + eps)`.
    pub fn acosh(&mut self, a: Var, eps: f64) -> Var {
        self.push(Op::Acosh { x: a, eps })
    }

    /// `asin(clamp(x, -1, 1))`; the derivative is taken at the argument
    /// clamped into `[-1 + eps, 1 - eps]`.
    pub fn asin(&mut self, a: Var, eps: f64) -> Var {
        self.push(Op::Asin { x: a, eps })
    }

    /// `acos(clamp(x, -1, 1))`, clamped like [`Graph::asin`].
    pub fn acos(&mut self, a: Var, eps: f64) -> Var {
        self.push(Op::Acos { x: a, eps })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.push(Op::Relu(a))
    }

    /// `sinh(sqrt(z)) / sqrt(z)` for `z >= 0`, smooth through `z = 0`.
    pub fn sinhc_sqrt(&mut self, a: Var) -> Var {
        self.push(Op::SinhcSqrt(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.push(Op::Mean(a))
    }

    /// Sums each row into an `n x 1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        self.push(Op::RowSum(a))
    }

    /// Euclidean norm of each row, floored at `floor`.
    pub fn row_norm(&mut self, a: Var, floor: f64) -> Var {
        self.push(Op::RowNorm { x: a, floor })
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (rows, cols) = self.shape(logits);
        assert_eq!(rows, targets.len(), "one target per row");
        assert!(rows > 0, "cross-entropy over an empty batch");
        assert!(targets.iter().all(|&t| t < cols), "target out of range");
        self.push(Op::SoftmaxCrossEntropy {
            logits,
            targets: targets.into(),
        })
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let rows = self.shape(a).0;
        assert!(index.iter().all(|&i| i < rows), "gather index out of range");
        self.push(Op::GatherRows {
            x: a,
            index: index.into(),
        })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        self.push(Op::ConcatRows(parts.into()))
    }
}

fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn forward_examples() {
        let mut g = Graph::new();
        let c = g.scalar(3.0);
        assert_eq!(g.forward(c).unwrap().item(), 3.0);

        let a = g.scalar(1.0);
        let b = g.scalar(2.0);
        let s = g.add(a, b);
        assert_eq!(g.forward(s).unwrap().item(), 3.0);

        let one = g.scalar(1.0);
        let ch = g.cosh(one);
        assert_abs_diff_eq!(g.forward(ch).unwrap().item(), 1.5431, epsilon = 1e-4);
    }

    #[test]
    fn forward_replays_after_leaf_update() {
        let mut g = Graph::new();
        let x = g.scalar(2.0);
        let y = g.square(x);
        g.set_leaf(x, Tensor::scalar(5.0)).unwrap();
        assert_eq!(g.forward(y).unwrap().item(), 25.0);
        assert!(matches!(
            g.set_leaf(y, Tensor::scalar(1.0)),
            Err(GraphError::NotALeaf(_))
        ));
        assert!(matches!(
            g.set_leaf(x, Tensor::zeros(2, 1)),
            Err(GraphError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn forward_detects_cycles() {
        let mut g = Graph::new();
        let x = g.scalar(2.0);
        let y = g.square(x);
        // Corrupt the tape so node 0 depends on node 1.
        g.nodes[0].op = Op::Neg(y);
        assert_eq!(g.forward(y), Err(GraphError::Cycle { node: 0, parent: 1 }));
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.scalar(4.0);
        let grads = g.backward(x).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 1.0);

        let a = g.scalar(2.0);
        let b = g.scalar(3.0);
        let p = g.mul(a, b);
        let grads = g.backward(p).unwrap();
        assert_eq!(grads.get(a).unwrap().item(), 3.0);
        assert_eq!(grads.get(b).unwrap().item(), 2.0);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::column(vec![1.0, 2.0]));
        assert_eq!(
            g.backward(v).unwrap_err(),
            GraphError::NonScalarRoot { rows: 2, cols: 1 }
        );
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.scalar(3.0);
        let y = g.mul(x, x);
        let z = g.add(y, x);
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn clamped_inverse_trig_values() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row_vector(vec![1.0 + 1e-12, -1.0, 0.5, 2.0]));
        let ac = g.acos(x, 1e-8);
        let v = g.value(ac).clone();
        assert_eq!(v.data()[0], 0.0);
        assert_eq!(v.data()[1], std::f64::consts::PI);
        let s = g.sum(ac);
        let grads = g.backward(s).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.data()[0], 0.0);
        assert!(gx.data()[1].is_finite());
        assert_eq!(gx.data()[3], 0.0);

        let y = g.leaf(Tensor::row_vector(vec![0.5, 1.0]));
        let ach = g.acosh(y, 1e-8);
        assert_eq!(g.value(ach).data(), &[0.0, 0.0]);
    }

    #[test]
    fn unused_leaves_have_no_gradient() {
        let mut g = Graph::new();
        let x = g.scalar(1.0);
        let unused = g.scalar(2.0);
        let y = g.exp(x);
        let grads = g.backward(y).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zeros(unused, (1, 1)).item(), 0.0);
    }
}
