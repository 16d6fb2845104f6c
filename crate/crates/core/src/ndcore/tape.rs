//! Define-by-run reverse-mode differentiation over [`DenseArray`] values.
//!
//! A [`Tape`] records every operation in execution order together with its
//! cached output, so inputs always precede the nodes that consume them. A
//! backward pass walks the record once in reverse and accumulates adjoints
//! for every node that depends on a parameter leaf. Constant leaves never
//! receive gradients.

use std::collections::BTreeMap;
use std::fmt;

use super::DenseArray;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
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

/// Operations a tape can record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Subtract,
    Multiply,
    Divide,
    MatMul,
    /// `N×M` plus a `1×M` row added to every row.
    AddRow,
    Sigmoid,
    Tanh,
    Relu,
    Ln,
    Square,
    Sum,
    Mean,
    Scale(f64),
    ConcatCols,
    /// Elementwise clamp into `[lo, hi]`; gradient is zero outside the interval.
    Clamp { lo: f64, hi: f64 },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Subtract => "subtract",
            OpKind::Multiply => "multiply",
            OpKind::Divide => "divide",
            OpKind::MatMul => "matmul",
            OpKind::AddRow => "add_row",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Ln => "ln",
            OpKind::Square => "square",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Scale(_) => "scale",
            OpKind::ConcatCols => "concat_cols",
            OpKind::Clamp { .. } => "clamp",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::Add
            | OpKind::Subtract
            | OpKind::Multiply
            | OpKind::Divide
            | OpKind::MatMul
            | OpKind::AddRow
            | OpKind::ConcatCols => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug)]
enum NodeKind {
    Param,
    Constant,
    Op { op: OpKind, inputs: [usize; 2] },
}

#[derive(Clone, Debug)]
struct Node {
    kind: NodeKind,
    value: DenseArray,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to every parameter leaf.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    by_leaf: BTreeMap<NodeId, DenseArray>,
}

impl Gradients {
    pub fn get(&self, leaf: NodeId) -> Option<&DenseArray> {
        self.by_leaf.get(&leaf)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &DenseArray)> {
        self.by_leaf.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, value: DenseArray) -> NodeId {
        self.push(NodeKind::Param, value, true)
    }

    /// Records a leaf that is treated as a constant by [`Tape::backward`].
    pub fn constant(&mut self, value: DenseArray) -> NodeId {
        self.push(NodeKind::Constant, value, false)
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        matches!(
            self.nodes.get(id.0).map(|n| &n.kind),
            Some(NodeKind::Param)
        )
    }

    pub fn value(&self, id: NodeId) -> &DenseArray {
        &self.nodes[id.0].value
    }

    fn push(&mut self, kind: NodeKind, value: DenseArray, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            kind,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id.0))
    }

    /// Appends `op` applied to `inputs` and returns the new node.
    pub fn forward(&mut self, op: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != op.arity() {
            return Err(Error::shape(
                op.name(),
                format!("expects {} inputs, got {}", op.arity(), inputs.len()),
            ));
        }
        let a = &self.node(inputs[0])?.value;
        let b = match inputs.get(1) {
            Some(&id) => Some(&self.node(id)?.value),
            None => None,
        };
        let value = eval(op, a, b)?;
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        let second = inputs.get(1).map_or(usize::MAX, |id| id.0);
        Ok(self.push(
            NodeKind::Op {
                op,
                inputs: [inputs[0].0, second],
            },
            value,
            requires_grad,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(OpKind::Subtract, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(OpKind::Multiply, &[a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(OpKind::Divide, &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(OpKind::MatMul, &[a, b])
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.forward(OpKind::AddRow, &[a, row])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(OpKind::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(OpKind::Tanh, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(OpKind::Relu, &[a])
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(OpKind::Ln, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(OpKind::Square, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(OpKind::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(OpKind::Mean, &[a])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.forward(OpKind::Scale(factor), &[a])
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(OpKind::ConcatCols, &[a, b])
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.forward(OpKind::Clamp { lo, hi }, &[a])
    }

    /// Reverse pass from a one-element `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_node = self.node(root)?;
        if !root_node.value.is_scalar() {
            return Err(Error::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        let mut adjoints: Vec<Option<DenseArray>> = vec![None; root.0 + 1];
        adjoints[root.0] = Some(DenseArray::filled(root_node.value.shape().to_vec(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let NodeKind::Op { op, inputs } = node.kind else {
                continue;
            };
            let Some(grad) = adjoints[idx].take() else {
                continue;
            };
            let a = &self.nodes[inputs[0]];
            let b = self.nodes.get(inputs[1]);
            let (ga, gb) = local_grads(op, &grad, &a.value, b.map(|n| &n.value), &node.value);
            accumulate(&mut adjoints, inputs[0], a.requires_grad, ga);
            if let Some(b) = b {
                accumulate(&mut adjoints, inputs[1], b.requires_grad, gb);
            }
        }

        let mut by_leaf = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.kind, NodeKind::Param) {
                let grad = adjoints
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| DenseArray::zeros(node.value.shape().to_vec()));
                by_leaf.insert(NodeId(idx), grad);
            }
        }
        Ok(Gradients { by_leaf })
    }
}

fn accumulate(
    adjoints: &mut [Option<DenseArray>],
    idx: usize,
    requires_grad: bool,
    grad: Option<DenseArray>,
) {
    if !requires_grad {
        return;
    }
    let Some(grad) = grad else { return };
    match &mut adjoints[idx] {
        Some(existing) => existing.add_assign(&grad),
        slot @ None => *slot = Some(grad),
    }
}

fn same_shape(op: OpKind, a: &DenseArray, b: &DenseArray) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op.name(),
            format!("operands {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn require_matrix(op: OpKind, a: &DenseArray) -> Result<()> {
    if !a.is_matrix() {
        return Err(Error::shape(
            op.name(),
            format!("expects a matrix, got shape {:?}", a.shape()),
        ));
    }
    Ok(())
}

fn eval(op: OpKind, a: &DenseArray, b: Option<&DenseArray>) -> Result<DenseArray> {
    let out = match op {
        OpKind::Add | OpKind::Subtract | OpKind::Multiply | OpKind::Divide => {
            let b = b.expect("binary op");
            same_shape(op, a, b)?;
            match op {
                OpKind::Add => a.zip_map(b, |x, y| x + y),
                OpKind::Subtract => a.zip_map(b, |x, y| x - y),
                OpKind::Multiply => a.zip_map(b, |x, y| x * y),
                _ => a.zip_map(b, |x, y| x / y),
            }
        }
        OpKind::MatMul => {
            let b = b.expect("binary op");
            require_matrix(op, a)?;
            require_matrix(op, b)?;
            if a.cols() != b.rows() {
                return Err(Error::shape(
                    op.name(),
                    format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
                ));
            }
            a.matmul(b)
        }
        OpKind::AddRow => {
            let row = b.expect("binary op");
            require_matrix(op, a)?;
            if row.shape() != [1, a.cols()] {
                return Err(Error::shape(
                    op.name(),
                    format!("row {:?} does not broadcast over {:?}", row.shape(), a.shape()),
                ));
            }
            let cols = a.cols();
            let mut out = a.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += row.data()[i % cols];
            }
            out
        }
        OpKind::ConcatCols => {
            let b = b.expect("binary op");
            require_matrix(op, a)?;
            require_matrix(op, b)?;
            if a.rows() != b.rows() {
                return Err(Error::shape(
                    op.name(),
                    format!("row counts differ: {:?} and {:?}", a.shape(), b.shape()),
                ));
            }
            let (rows, ca, cb) = (a.rows(), a.cols(), b.cols());
            let mut data = Vec::with_capacity(rows * (ca + cb));
            for r in 0..rows {
                data.extend_from_slice(a.row_slice(r));
                data.extend_from_slice(b.row_slice(r));
            }
            DenseArray::from_rows(rows, ca + cb, data)?
        }
        OpKind::Sigmoid => a.map(sigmoid),
        OpKind::Tanh => a.map(f64::tanh),
        OpKind::Relu => a.map(|x| x.max(0.0)),
        OpKind::Ln => a.map(f64::ln),
        OpKind::Square => a.map(|x| x * x),
        OpKind::Sum => DenseArray::scalar(a.data().iter().sum()),
        OpKind::Mean => {
            if a.is_empty() {
                return Err(Error::shape(op.name(), "mean of an empty array"));
            }
            DenseArray::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
        }
        OpKind::Scale(c) => a.map(|x| c * x),
        OpKind::Clamp { lo, hi } => a.map(|x| x.clamp(lo, hi)),
    };
    Ok(out)
}

/// Adjoints of the inputs given the adjoint `g` of the output.
fn local_grads(
    op: OpKind,
    g: &DenseArray,
    a: &DenseArray,
    b: Option<&DenseArray>,
    out: &DenseArray,
) -> (Option<DenseArray>, Option<DenseArray>) {
    match op {
        OpKind::Add => (Some(g.clone()), Some(g.clone())),
        OpKind::Subtract => (Some(g.clone()), Some(g.map(|x| -x))),
        OpKind::Multiply => {
            let b = b.unwrap();
            (Some(g.zip_map(b, |g, y| g * y)), Some(g.zip_map(a, |g, x| g * x)))
        }
        OpKind::Divide => {
            let b = b.unwrap();
            let ga = g.zip_map(b, |g, y| g / y);
            let gb = g.zip_map(out, |g, q| g * q).zip_map(b, |gq, y| -gq / y);
            (Some(ga), Some(gb))
        }
        OpKind::MatMul => {
            let b = b.unwrap();
            (Some(g.matmul_nt(b)), Some(a.matmul_tn(g)))
        }
        OpKind::AddRow => {
            let cols = a.cols();
            let mut row = vec![0.0; cols];
            for (i, v) in g.data().iter().enumerate() {
                row[i % cols] += v;
            }
            (Some(g.clone()), Some(DenseArray::row(&row)))
        }
        OpKind::ConcatCols => {
            let b = b.unwrap();
            let (rows, ca, cb) = (a.rows(), a.cols(), b.cols());
            let mut ga = Vec::with_capacity(rows * ca);
            let mut gb = Vec::with_capacity(rows * cb);
            for r in 0..rows {
                let row = g.row_slice(r);
                ga.extend_from_slice(&row[..ca]);
                gb.extend_from_slice(&row[ca..]);
            }
            (
                DenseArray::from_rows(rows, ca, ga).ok(),
                DenseArray::from_rows(rows, cb, gb).ok(),
            )
        }
        OpKind::Sigmoid => (Some(g.zip_map(out, |g, y| g * y * (1.0 - y))), None),
        OpKind::Tanh => (Some(g.zip_map(out, |g, y| g * (1.0 - y * y))), None),
        OpKind::Relu => (
            Some(g.zip_map(a, |g, x| if x > 0.0 { g } else { 0.0 })),
            None,
        ),
        OpKind::Ln => (Some(g.zip_map(a, |g, x| g / x)), None),
        OpKind::Square => (Some(g.zip_map(a, |g, x| 2.0 * g * x)), None),
        OpKind::Sum => (
            Some(DenseArray::filled(a.shape().to_vec(), g.item())),
            None,
        ),
        OpKind::Mean => (
            Some(DenseArray::filled(
                a.shape().to_vec(),
                g.item() / a.len() as f64,
            )),
            None,
        ),
        OpKind::Scale(c) => (Some(g.map(|x| c * x)), None),
        OpKind::Clamp { lo, hi } => (
            Some(g.zip_map(a, |g, x| if x >= lo && x <= hi { g } else { 0.0 })),
            None,
        ),
    }
}
