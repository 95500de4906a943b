//! Define-by-run reverse-mode automatic differentiation over [`Matrix`].
//!
//! Every op's vector-Jacobian product is available in two forms: a numeric
//! one used by [`Graph::backward`], and a symbolic one that appends new nodes
//! to the graph ([`Graph::grad_as_graph`]). The symbolic rules only use ops
//! from the same set, so a gradient built as a graph can itself be
//! differentiated. That is what the gradient penalty and the gradient
//! matching objective need.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::matrix::{gemm, Matrix};

/// Added under the square root of [`OpKind::RowL2Norm`] so its derivative
/// stays finite at the origin.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Operation tags. Parameterised ops carry their constants inline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    /// `a · b`
    MatMul,
    Transpose,
    Add,
    /// `n×c + 1×c`, the row added to every row.
    AddRowBroadcast,
    Sub,
    /// Elementwise product.
    Mul,
    ScalarMul(f64),
    AddScalar(f64),
    /// `a · s` for a 1×1 node `s`.
    ScaleBy,
    /// `a ∘ s` for an n×1 node `s` broadcast across columns.
    MulColBroadcast,
    Relu,
    Sigmoid,
    Square,
    Abs,
    Sqrt,
    Reciprocal,
    Log,
    SumAll,
    MeanAll,
    /// Per-row `sqrt(Σ v² + NORM_EPS)`, n×c → n×1.
    RowL2Norm,
    /// Per-row dot product, (n×c, n×c) → n×1.
    RowwiseDot,
    ConcatRows,
    SliceRows { start: usize, end: usize },
    Clamp { lo: f64, hi: f64 },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::AddRowBroadcast => "add_row_broadcast",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul_elementwise",
            OpKind::ScalarMul(_) => "scalar_mul",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::ScaleBy => "scale_by",
            OpKind::MulColBroadcast => "mul_col_broadcast",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Square => "square",
            OpKind::Abs => "abs",
            OpKind::Sqrt => "sqrt",
            OpKind::Reciprocal => "reciprocal",
            OpKind::Log => "log",
            OpKind::SumAll => "sum_all",
            OpKind::MeanAll => "mean_all",
            OpKind::RowL2Norm => "row_l2_norm",
            OpKind::RowwiseDot => "rowwise_dot",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceRows { .. } => "slice_rows",
            OpKind::Clamp { .. } => "clamp",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            OpKind::MatMul
            | OpKind::Add
            | OpKind::AddRowBroadcast
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::ScaleBy
            | OpKind::MulColBroadcast
            | OpKind::RowwiseDot
            | OpKind::ConcatRows => 2,
            _ => 1,
        }
    }
}

/// Parses the tags of parameter-free ops; `scalar_mul:<c>` and
/// `add_scalar:<c>` carry their constant after a colon.
impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (tag, arg) = match s.split_once(':') {
            Some((t, a)) => (t, Some(a)),
            None => (s, None),
        };
        let constant = || -> Result<f64> {
            arg.and_then(|a| a.trim().parse().ok())
                .ok_or_else(|| Error::UnknownOp(s.to_string()))
        };
        Ok(match tag {
            "matmul" => OpKind::MatMul,
            "transpose" => OpKind::Transpose,
            "add" => OpKind::Add,
            "add_row_broadcast" => OpKind::AddRowBroadcast,
            "sub" => OpKind::Sub,
            "mul_elementwise" => OpKind::Mul,
            "scalar_mul" => OpKind::ScalarMul(constant()?),
            "add_scalar" => OpKind::AddScalar(constant()?),
            "scale_by" => OpKind::ScaleBy,
            "mul_col_broadcast" => OpKind::MulColBroadcast,
            "relu" => OpKind::Relu,
            "sigmoid" => OpKind::Sigmoid,
            "square" => OpKind::Square,
            "abs" => OpKind::Abs,
            "sqrt" => OpKind::Sqrt,
            "reciprocal" => OpKind::Reciprocal,
            "log" => OpKind::Log,
            "sum_all" => OpKind::SumAll,
            "mean_all" => OpKind::MeanAll,
            "row_l2_norm" => OpKind::RowL2Norm,
            "rowwise_dot" => OpKind::RowwiseDot,
            "concat_rows" => OpKind::ConcatRows,
            _ => return Err(Error::UnknownOp(s.to_string())),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    op: Option<OpKind>,
    inputs: Vec<NodeId>,
    value: Matrix,
    requires_grad: bool,
}

impl Node {
    /// `None` for leaves.
    pub fn op(&self) -> Option<OpKind> {
        self.op
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn value(&self) -> &Matrix {
        &self.value
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

/// Gradients of a scalar with respect to the `requires_grad` leaves it
/// depends on.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_leaf: HashMap<NodeId, Matrix>,
}

impl Gradients {
    pub fn get(&self, leaf: NodeId) -> Option<&Matrix> {
        self.by_leaf.get(&leaf)
    }

    pub fn remove(&mut self, leaf: NodeId) -> Option<Matrix> {
        self.by_leaf.remove(&leaf)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Matrix)> {
        self.by_leaf.iter()
    }
}

/// Append-only tape. Node `k` only depends on nodes with smaller ids.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: OpKind, what: String) -> Error {
    Error::Shape(format!("{}: {}", op.name(), what))
}

fn same_shape(op: OpKind, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Forward evaluation of one op.
fn evaluate(op: OpKind, args: &[&Matrix]) -> Result<Matrix> {
    if args.len() != op.arity() {
        return Err(Error::InvalidArgument(format!(
            "{} takes {} inputs, got {}",
            op.name(),
            op.arity(),
            args.len()
        )));
    }
    let a = args[0];
    let out = match op {
        OpKind::MatMul => {
            let b = args[1];
            if a.cols() != b.rows() {
                return Err(shape_err(
                    op,
                    format!("{:?} · {:?}", a.shape(), b.shape()),
                ));
            }
            gemm(a, false, b, false)
        }
        OpKind::Transpose => a.transpose(),
        OpKind::Add => {
            same_shape(op, a, args[1])?;
            a.zip_map(args[1], |x, y| x + y)
        }
        OpKind::Sub => {
            same_shape(op, a, args[1])?;
            a.zip_map(args[1], |x, y| x - y)
        }
        OpKind::Mul => {
            same_shape(op, a, args[1])?;
            a.zip_map(args[1], |x, y| x * y)
        }
        OpKind::AddRowBroadcast => {
            let b = args[1];
            if b.rows() != 1 || b.cols() != a.cols() {
                return Err(shape_err(
                    op,
                    format!("cannot add {:?} to each row of {:?}", b.shape(), a.shape()),
                ));
            }
            let mut out = a.clone();
            let c = a.cols();
            for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
                *v += b.as_slice()[i % c];
            }
            out
        }
        OpKind::ScalarMul(c) => a.map(|x| c * x),
        OpKind::AddScalar(c) => a.map(|x| x + c),
        OpKind::ScaleBy => {
            let s = args[1];
            if s.shape() != (1, 1) {
                return Err(shape_err(op, format!("scale must be 1x1, got {:?}", s.shape())));
            }
            let s = s.item();
            a.map(|x| x * s)
        }
        OpKind::MulColBroadcast => {
            let s = args[1];
            if s.shape() != (a.rows(), 1) {
                return Err(shape_err(
                    op,
                    format!("column {:?} does not fit {:?}", s.shape(), a.shape()),
                ));
            }
            let mut out = a.clone();
            let c = a.cols().max(1);
            for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
                *v *= s.as_slice()[i / c];
            }
            out
        }
        OpKind::Relu => a.map(|x| if x > 0.0 { x } else { 0.0 }),
        OpKind::Sigmoid => a.map(sigmoid),
        OpKind::Square => a.map(|x| x * x),
        OpKind::Abs => a.map(f64::abs),
        OpKind::Sqrt => {
            if a.as_slice().iter().any(|&x| x < 0.0) {
                return Err(Error::Domain("sqrt of a negative value".into()));
            }
            a.map(f64::sqrt)
        }
        OpKind::Reciprocal => {
            if a.as_slice().contains(&0.0) {
                return Err(Error::Domain("reciprocal of zero".into()));
            }
            a.map(|x| 1.0 / x)
        }
        OpKind::Log => {
            if let Some(&bad) = a.as_slice().iter().find(|&&x| x <= 0.0) {
                return Err(Error::Domain(format!("log of non-positive value {bad}")));
            }
            a.map(f64::ln)
        }
        OpKind::SumAll => Matrix::scalar(a.sum()),
        OpKind::MeanAll => {
            if a.is_empty() {
                return Err(shape_err(op, "empty input".into()));
            }
            Matrix::scalar(a.sum() / a.len() as f64)
        }
        OpKind::RowL2Norm => {
            let data = (0..a.rows())
                .map(|r| (a.row(r).iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt())
                .collect();
            Matrix::from_vec(a.rows(), 1, data)?
        }
        OpKind::RowwiseDot => {
            let b = args[1];
            same_shape(op, a, b)?;
            let data = (0..a.rows())
                .map(|r| a.row(r).iter().zip(b.row(r)).map(|(x, y)| x * y).sum())
                .collect();
            Matrix::from_vec(a.rows(), 1, data)?
        }
        OpKind::ConcatRows => {
            let b = args[1];
            if a.cols() != b.cols() {
                return Err(shape_err(
                    op,
                    format!("column counts {} and {}", a.cols(), b.cols()),
                ));
            }
            a.concat_rows(b)
        }
        OpKind::SliceRows { start, end } => {
            if start >= end || end > a.rows() {
                return Err(shape_err(
                    op,
                    format!("rows {start}..{end} of {:?}", a.shape()),
                ));
            }
            a.slice_rows(start, end)
        }
        OpKind::Clamp { lo, hi } => {
            if lo > hi {
                return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
            }
            a.map(|x| x.clamp(lo, hi))
        }
    };
    Ok(out)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mask passed through by ops whose local derivative is piecewise constant.
fn pass_mask(op: OpKind, a: &Matrix) -> Matrix {
    match op {
        OpKind::Relu => a.map(|x| if x > 0.0 { 1.0 } else { 0.0 }),
        OpKind::Abs => a.map(|x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        OpKind::Clamp { lo, hi } => a.map(|x| if x >= lo && x <= hi { 1.0 } else { 0.0 }),
        _ => unreachable!("no pass mask for {}", op.name()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Result<NodeId> {
        if value.is_empty() {
            return Err(Error::Shape(format!(
                "leaf must be non-empty, got {:?}",
                value.shape()
            )));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf value".into()));
        }
        Ok(self.push(None, Vec::new(), value, requires_grad))
    }

    /// Leaf that is differentiated against.
    pub fn param(&mut self, value: Matrix) -> Result<NodeId> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Result<NodeId> {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Option<OpKind>, inputs: Vec<NodeId>, value: Matrix, rg: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad: rg,
        });
        id
    }

    fn check_id(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!("unknown node {id}")));
        }
        Ok(())
    }

    /// Appends `op(inputs)` and evaluates it eagerly.
    pub fn apply(&mut self, op: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        for &id in inputs {
            self.check_id(id)?;
        }
        let args: Vec<&Matrix> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = evaluate(op, &args)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {}", op.name())));
        }
        let rg = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(Some(op), inputs.to_vec(), value, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Transpose, &[a])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.apply(OpKind::AddRowBroadcast, &[a, row])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scalar_mul(&mut self, c: f64, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::ScalarMul(c), &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(OpKind::AddScalar(c), &[a])
    }

    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        self.apply(OpKind::ScaleBy, &[a, s])
    }

    pub fn mul_col_broadcast(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        self.apply(OpKind::MulColBroadcast, &[a, col])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sigmoid, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Square, &[a])
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Abs, &[a])
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sqrt, &[a])
    }

    pub fn reciprocal(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Reciprocal, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Log, &[a])
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::SumAll, &[a])
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::MeanAll, &[a])
    }

    pub fn row_l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::RowL2Norm, &[a])
    }

    pub fn rowwise_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::RowwiseDot, &[a, b])
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::ConcatRows, &[a, b])
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.apply(OpKind::SliceRows { start, end }, &[a])
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.apply(OpKind::Clamp { lo, hi }, &[a])
    }

    /// Column means as a 1×c row, built from a constant averaging matmul.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.shape(a).0;
        let w = self.constant(Matrix::filled(1, n, 1.0 / n as f64))?;
        self.matmul(w, a)
    }

    /// Copy of `a`'s current value as a constant leaf; gradients stop here.
    pub fn detach(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).clone();
        self.constant(v)
    }

    /// Reverse sweep from a 1×1 root, returning gradients of every
    /// `requires_grad` leaf the root depends on.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        self.check_id(root)?;
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(Error::Shape(format!("backward root must be 1x1, got {shape:?}")));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        let mut out = Gradients::default();
        if !self.nodes[root.0].requires_grad {
            return Ok(out);
        }
        grads[root.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient flowing into node #{idx} ({})",
                    node.op.map_or("leaf", |o| o.name())
                )));
            }
            let Some(op) = node.op else {
                out.by_leaf.insert(NodeId(idx), g);
                continue;
            };
            let wants: Vec<bool> = node
                .inputs
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let parent_grads = self.vjp_numeric(op, node, &g, &wants);
            for ((p, pg), want) in node.inputs.iter().zip(parent_grads).zip(wants) {
                if !want {
                    continue;
                }
                let pg = pg.expect("vjp computed for wanted input");
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(out)
    }

    fn vjp_numeric(&self, op: OpKind, node: &Node, g: &Matrix, wants: &[bool]) -> Vec<Option<Matrix>> {
        let val = |i: usize| &self.nodes[node.inputs[i].0].value;
        let y = &node.value;
        let want = |i: usize| wants[i];
        match op {
            OpKind::MatMul => vec![
                want(0).then(|| gemm(g, false, val(1), true)),
                want(1).then(|| gemm(val(0), true, g, false)),
            ],
            OpKind::Transpose => vec![Some(g.transpose())],
            OpKind::Add => vec![Some(g.clone()), Some(g.clone())],
            OpKind::Sub => vec![Some(g.clone()), want(1).then(|| g.map(|v| -v))],
            OpKind::Mul => vec![
                want(0).then(|| g.zip_map(val(1), |a, b| a * b)),
                want(1).then(|| g.zip_map(val(0), |a, b| a * b)),
            ],
            OpKind::AddRowBroadcast => vec![Some(g.clone()), want(1).then(|| g.sum_rows())],
            OpKind::ScalarMul(c) => vec![Some(g.map(|v| c * v))],
            OpKind::AddScalar(_) => vec![Some(g.clone())],
            OpKind::ScaleBy => {
                let s = val(1).item();
                vec![
                    want(0).then(|| g.map(|v| v * s)),
                    want(1).then(|| {
                        Matrix::scalar(g.as_slice().iter().zip(val(0).as_slice()).map(|(a, b)| a * b).sum())
                    }),
                ]
            }
            OpKind::MulColBroadcast => {
                let (a, s) = (val(0), val(1));
                let c = a.cols();
                vec![
                    want(0).then(|| {
                        let mut out = g.clone();
                        for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
                            *v *= s.as_slice()[i / c];
                        }
                        out
                    }),
                    want(1).then(|| {
                        let data = (0..a.rows())
                            .map(|r| g.row(r).iter().zip(a.row(r)).map(|(x, y)| x * y).sum())
                            .collect();
                        Matrix::from_vec(a.rows(), 1, data).expect("column shape")
                    }),
                ]
            }
            OpKind::Relu | OpKind::Abs | OpKind::Clamp { .. } => {
                vec![Some(g.zip_map(&pass_mask(op, val(0)), |a, b| a * b))]
            }
            OpKind::Sigmoid => vec![Some(g.zip_map(y, |gv, s| gv * s * (1.0 - s)))],
            OpKind::Square => vec![Some(g.zip_map(val(0), |gv, a| 2.0 * a * gv))],
            OpKind::Sqrt => vec![Some(g.zip_map(y, |gv, s| 0.5 * gv / s))],
            OpKind::Reciprocal => vec![Some(g.zip_map(y, |gv, r| -gv * r * r))],
            OpKind::Log => vec![Some(g.zip_map(val(0), |gv, a| gv / a))],
            OpKind::SumAll => {
                let (r, c) = val(0).shape();
                vec![Some(Matrix::filled(r, c, g.item()))]
            }
            OpKind::MeanAll => {
                let (r, c) = val(0).shape();
                vec![Some(Matrix::filled(r, c, g.item() / (r * c) as f64))]
            }
            OpKind::RowL2Norm => {
                let a = val(0);
                let c = a.cols();
                let mut out = a.clone();
                for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
                    let r = i / c;
                    *v *= g.as_slice()[r] / y.as_slice()[r];
                }
                vec![Some(out)]
            }
            OpKind::RowwiseDot => {
                let scale = |m: &Matrix| {
                    let c = m.cols();
                    let mut out = m.clone();
                    for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
                        *v *= g.as_slice()[i / c];
                    }
                    out
                };
                vec![want(0).then(|| scale(val(1))), want(1).then(|| scale(val(0)))]
            }
            OpKind::ConcatRows => {
                let ra = val(0).rows();
                vec![
                    want(0).then(|| g.slice_rows(0, ra)),
                    want(1).then(|| g.slice_rows(ra, g.rows())),
                ]
            }
            OpKind::SliceRows { start, end } => {
                let a = val(0);
                let mut out = Matrix::zeros(a.rows(), a.cols());
                let c = a.cols();
                out.as_mut_slice()[start * c..end * c].copy_from_slice(g.as_slice());
                vec![Some(out)]
            }
        }
    }

    /// Builds `∂(Σ output)/∂wrt` as new nodes of this graph.
    ///
    /// For a per-row score column produced by a row-independent network
    /// this is the per-row input gradient. The result is an ordinary node,
    /// so [`Graph::backward`] can differentiate through it.
    pub fn grad_as_graph(&mut self, output: NodeId, wrt: NodeId) -> Result<NodeId> {
        self.check_id(output)?;
        self.check_id(wrt)?;
        let not_ancestor = Error::NotAncestor {
            wrt: wrt.0,
            of: output.0,
        };
        if wrt.0 > output.0 {
            return Err(not_ancestor);
        }
        // Nodes on some path from `wrt`.
        let mut depends = vec![false; output.0 + 1];
        depends[wrt.0] = true;
        for idx in wrt.0 + 1..=output.0 {
            depends[idx] = self.nodes[idx].inputs.iter().any(|p| depends[p.0]);
        }
        if !depends[output.0] {
            // Constant with respect to `wrt`.
            let (r, c) = self.shape(wrt);
            return self.constant(Matrix::zeros(r, c));
        }

        let (r, c) = self.shape(output);
        let seed = self.constant(Matrix::ones(r, c))?;
        let mut grads: HashMap<usize, NodeId> = HashMap::new();
        grads.insert(output.0, seed);
        for idx in (wrt.0..=output.0).rev() {
            if !depends[idx] || idx == wrt.0 {
                continue;
            }
            let Some(g) = grads.remove(&idx) else { continue };
            let op = self.nodes[idx].op.expect("non-leaf on a dependency path");
            let inputs = self.nodes[idx].inputs.clone();
            let wants: Vec<bool> = inputs.iter().map(|p| depends[p.0]).collect();
            let parent_grads = self.vjp_symbolic(op, NodeId(idx), &inputs, g, &wants)?;
            for ((p, pg), want) in inputs.iter().zip(parent_grads).zip(wants) {
                if !want {
                    continue;
                }
                let pg = pg.expect("vjp built for wanted input");
                let acc = match grads.get(&p.0) {
                    Some(&prev) => self.add(prev, pg)?,
                    None => pg,
                };
                grads.insert(p.0, acc);
            }
        }
        grads.remove(&wrt.0).ok_or(not_ancestor)
    }

    fn vjp_symbolic(
        &mut self,
        op: OpKind,
        this: NodeId,
        inputs: &[NodeId],
        g: NodeId,
        wants: &[bool],
    ) -> Result<Vec<Option<NodeId>>> {
        let a = inputs[0];
        let b = inputs.get(1).copied();
        let want = |i: usize| wants[i];
        Ok(match op {
            OpKind::MatMul => {
                let b = b.expect("binary");
                let ga = if want(0) {
                    let bt = self.transpose(b)?;
                    Some(self.matmul(g, bt)?)
                } else {
                    None
                };
                let gb = if want(1) {
                    let at = self.transpose(a)?;
                    Some(self.matmul(at, g)?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            OpKind::Transpose => vec![Some(self.transpose(g)?)],
            OpKind::Add => vec![Some(g), Some(g)],
            OpKind::Sub => {
                let gb = if want(1) { Some(self.scalar_mul(-1.0, g)?) } else { None };
                vec![Some(g), gb]
            }
            OpKind::Mul => {
                let b = b.expect("binary");
                let ga = if want(0) { Some(self.mul(g, b)?) } else { None };
                let gb = if want(1) { Some(self.mul(g, a)?) } else { None };
                vec![ga, gb]
            }
            OpKind::AddRowBroadcast => {
                let gb = if want(1) {
                    let n = self.shape(g).0;
                    let ones = self.constant(Matrix::ones(1, n))?;
                    Some(self.matmul(ones, g)?)
                } else {
                    None
                };
                vec![Some(g), gb]
            }
            OpKind::ScalarMul(c) => vec![Some(self.scalar_mul(c, g)?)],
            OpKind::AddScalar(_) => vec![Some(g)],
            OpKind::ScaleBy => {
                let s = b.expect("binary");
                let ga = if want(0) { Some(self.scale_by(g, s)?) } else { None };
                let gs = if want(1) {
                    let prod = self.mul(g, a)?;
                    Some(self.sum_all(prod)?)
                } else {
                    None
                };
                vec![ga, gs]
            }
            OpKind::MulColBroadcast => {
                let s = b.expect("binary");
                let ga = if want(0) { Some(self.mul_col_broadcast(g, s)?) } else { None };
                let gs = if want(1) { Some(self.rowwise_dot(g, a)?) } else { None };
                vec![ga, gs]
            }
            OpKind::Relu | OpKind::Abs | OpKind::Clamp { .. } => {
                let mask = pass_mask(op, self.value(a));
                let mask = self.constant(mask)?;
                vec![Some(self.mul(g, mask)?)]
            }
            OpKind::Sigmoid => {
                // σ' = y(1 - y), expressed through the output node itself.
                let neg = self.scalar_mul(-1.0, this)?;
                let one_minus = self.add_scalar(neg, 1.0)?;
                let slope = self.mul(this, one_minus)?;
                vec![Some(self.mul(g, slope)?)]
            }
            OpKind::Square => {
                let two_a = self.scalar_mul(2.0, a)?;
                vec![Some(self.mul(g, two_a)?)]
            }
            OpKind::Sqrt => {
                let inv = self.reciprocal(this)?;
                let half_inv = self.scalar_mul(0.5, inv)?;
                vec![Some(self.mul(g, half_inv)?)]
            }
            OpKind::Reciprocal => {
                let sq = self.square(this)?;
                let neg = self.scalar_mul(-1.0, sq)?;
                vec![Some(self.mul(g, neg)?)]
            }
            OpKind::Log => {
                let inv = self.reciprocal(a)?;
                vec![Some(self.mul(g, inv)?)]
            }
            OpKind::SumAll | OpKind::MeanAll => {
                let (r, c) = self.shape(a);
                let fill = if op == OpKind::SumAll {
                    1.0
                } else {
                    1.0 / (r * c) as f64
                };
                let base = self.constant(Matrix::filled(r, c, fill))?;
                vec![Some(self.scale_by(base, g)?)]
            }
            OpKind::RowL2Norm => {
                let inv = self.reciprocal(this)?;
                let w = self.mul(g, inv)?;
                vec![Some(self.mul_col_broadcast(a, w)?)]
            }
            OpKind::RowwiseDot => {
                let b = b.expect("binary");
                let ga = if want(0) { Some(self.mul_col_broadcast(b, g)?) } else { None };
                let gb = if want(1) { Some(self.mul_col_broadcast(a, g)?) } else { None };
                vec![ga, gb]
            }
            OpKind::ConcatRows => {
                let ra = self.shape(a).0;
                let total = self.shape(g).0;
                let ga = if want(0) { Some(self.slice_rows(g, 0, ra)?) } else { None };
                let gb = if want(1) { Some(self.slice_rows(g, ra, total)?) } else { None };
                vec![ga, gb]
            }
            OpKind::SliceRows { start, end } => {
                let (rows, cols) = self.shape(a);
                let mut out = g;
                if start > 0 {
                    let top = self.constant(Matrix::zeros(start, cols))?;
                    out = self.concat_rows(top, out)?;
                }
                if end < rows {
                    let bottom = self.constant(Matrix::zeros(rows - end, cols))?;
                    out = self.concat_rows(out, bottom)?;
                }
                vec![Some(out)]
            }
        })
    }
}
