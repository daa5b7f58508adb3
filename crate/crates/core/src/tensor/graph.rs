use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;

use super::kernels::{gelu, gelu_grad, gemm, layer_norm_row, sigmoid, softmax_row, transpose};
use super::{ParamStore, Tensor};
use crate::error::{PirError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of an elementwise op is broadcast over the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

impl Broadcast {
    fn index(self, r: usize, c: usize, cols: usize) -> usize {
        match self {
            Broadcast::Same => r * cols + c,
            Broadcast::Row => c,
            Broadcast::Col => r,
            Broadcast::Scalar => 0,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Param(String),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId, Broadcast),
    Sub(NodeId, NodeId, Broadcast),
    Mul(NodeId, NodeId, Broadcast),
    Scale(NodeId, f64),
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Sigmoid(NodeId),
    Gelu(NodeId),
    Softmax(NodeId),
    LayerNorm(NodeId),
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize, end: usize },
    Sum(NodeId),
    Mean(NodeId),
    RowMean(NodeId),
    MseLoss(NodeId, NodeId),
    MaeLoss(NodeId, NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Affine { .. } => "affine",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm(_) => "layer_norm",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowMean(_) => "row_mean",
            Op::MseLoss(..) => "mse_loss",
            Op::MaeLoss(..) => "mae_loss",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    requires_grad: bool,
}

impl Node {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

/// Incrementally builds a [`ComputeGraph`]. Every method validates operand
/// shapes and fails with an error naming the node being added.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    outputs: Vec<(String, NodeId)>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    fn grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn shape_err(&self, op: &str, detail: String) -> PirError {
        PirError::Shape { node: format!("node #{} ({op})", self.nodes.len()), detail }
    }

    fn check_ids(&self, op: &str, ids: &[NodeId]) -> Result<()> {
        for id in ids {
            if id.0 >= self.nodes.len() {
                return Err(self.shape_err(op, format!("operand {} does not exist", id.0)));
            }
        }
        Ok(())
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, rows, cols, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf_shape(shape: &[usize]) -> (usize, usize) {
        match shape.len() {
            0 => (1, 1),
            1 => (1, shape[0]),
            _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
        }
    }

    /// A bound input that does not receive gradients.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        let (r, c) = Self::leaf_shape(shape);
        self.push(Op::Input(name.to_string()), r, c, false)
    }

    /// A bound input whose gradient is reported by [`Session::backward`].
    pub fn input_with_grad(&mut self, name: &str, shape: &[usize]) -> NodeId {
        let (r, c) = Self::leaf_shape(shape);
        self.push(Op::Input(name.to_string()), r, c, true)
    }

    pub fn param(&mut self, name: &str, shape: &[usize]) -> NodeId {
        let (r, c) = Self::leaf_shape(shape);
        self.push(Op::Param(name.to_string()), r, c, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_ids("matmul", &[a, b])?;
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(self.shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let g = self.grad(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), m, n, g))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_ids("transpose", &[a])?;
        let (r, c) = self.shape(a);
        let g = self.grad(&[a]);
        Ok(self.push(Op::Transpose(a), c, r, g))
    }

    fn broadcast(&self, op: &str, a: NodeId, b: NodeId) -> Result<Broadcast> {
        self.check_ids(op, &[a, b])?;
        let ((ra, ca), (rb, cb)) = (self.shape(a), self.shape(b));
        if (ra, ca) == (rb, cb) {
            Ok(Broadcast::Same)
        } else if (rb, cb) == (1, 1) {
            Ok(Broadcast::Scalar)
        } else if rb == 1 && cb == ca {
            Ok(Broadcast::Row)
        } else if cb == 1 && rb == ra {
            Ok(Broadcast::Col)
        } else {
            Err(self.shape_err(op, format!("cannot broadcast [{rb},{cb}] onto [{ra},{ca}]")))
        }
    }

    /// `a + b`, with `b` broadcast as a row, column, or scalar when needed.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let bc = self.broadcast("add", a, b)?;
        let (r, c) = self.shape(a);
        let g = self.grad(&[a, b]);
        Ok(self.push(Op::Add(a, b, bc), r, c, g))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let bc = self.broadcast("sub", a, b)?;
        let (r, c) = self.shape(a);
        let g = self.grad(&[a, b]);
        Ok(self.push(Op::Sub(a, b, bc), r, c, g))
    }

    /// Elementwise product, with `b` broadcast like [`GraphBuilder::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let bc = self.broadcast("mul", a, b)?;
        let (r, c) = self.shape(a);
        let g = self.grad(&[a, b]);
        Ok(self.push(Op::Mul(a, b, bc), r, c, g))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.check_ids("scale", &[a])?;
        let (r, c) = self.shape(a);
        let g = self.grad(&[a]);
        Ok(self.push(Op::Scale(a, factor), r, c, g))
    }

    /// `x * w + b` with `x: [m,k]`, `w: [k,n]`, `b: [1,n]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_ids("affine", &[x, w, b])?;
        let ((m, k), (k2, n), (rb, cb)) = (self.shape(x), self.shape(w), self.shape(b));
        if k != k2 || rb != 1 || cb != n {
            return Err(self.shape_err(
                "affine",
                format!("x [{m},{k}], w [{k2},{n}], b [{rb},{cb}]"),
            ));
        }
        let g = self.grad(&[x, w, b]);
        Ok(self.push(Op::Affine { x, w, b }, m, n, g))
    }

    fn unary(&mut self, op: Op, a: NodeId) -> Result<NodeId> {
        self.check_ids(op.name(), &[a])?;
        let (r, c) = self.shape(a);
        let g = self.grad(&[a]);
        Ok(self.push(op, r, c, g))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Sigmoid(a), a)
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Gelu(a), a)
    }

    /// Softmax over the last axis (per row).
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::Softmax(a), a)
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Op::LayerNorm(a), a)
    }

    /// Concatenates along `axis` (0 = stack rows, 1 = join columns).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        self.check_ids("concat", parts)?;
        if parts.is_empty() || axis > 1 {
            return Err(self.shape_err("concat", "needs parts and axis 0 or 1".into()));
        }
        let shapes: Vec<_> = parts.iter().map(|&p| self.shape(p)).collect();
        let (rows, cols) = if axis == 0 {
            let c = shapes[0].1;
            if shapes.iter().any(|s| s.1 != c) {
                return Err(self.shape_err("concat", format!("column mismatch {shapes:?}")));
            }
            (shapes.iter().map(|s| s.0).sum(), c)
        } else {
            let r = shapes[0].0;
            if shapes.iter().any(|s| s.0 != r) {
                return Err(self.shape_err("concat", format!("row mismatch {shapes:?}")));
            }
            (r, shapes.iter().map(|s| s.1).sum())
        };
        let g = self.grad(parts);
        Ok(self.push(Op::Concat { parts: parts.to_vec(), axis }, rows, cols, g))
    }

    /// Rows (`axis` 0) or columns (`axis` 1) in `start..end`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        self.check_ids("slice", &[x])?;
        let (r, c) = self.shape(x);
        let limit = if axis == 0 { r } else { c };
        if axis > 1 || start >= end || end > limit {
            return Err(self.shape_err(
                "slice",
                format!("range {start}..{end} on axis {axis} of [{r},{c}]"),
            ));
        }
        let (rows, cols) = if axis == 0 { (end - start, c) } else { (r, end - start) };
        let g = self.grad(&[x]);
        Ok(self.push(Op::Slice { x, axis, start, end }, rows, cols, g))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_ids("sum", &[a])?;
        let g = self.grad(&[a]);
        Ok(self.push(Op::Sum(a), 1, 1, g))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_ids("mean", &[a])?;
        let g = self.grad(&[a]);
        Ok(self.push(Op::Mean(a), 1, 1, g))
    }

    /// Mean over the last axis: `[r,c] -> [r,1]`.
    pub fn row_mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_ids("row_mean", &[a])?;
        let (r, _) = self.shape(a);
        let g = self.grad(&[a]);
        Ok(self.push(Op::RowMean(a), r, 1, g))
    }

    fn same_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<()> {
        self.check_ids(op, &[a, b])?;
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// `mean((a - b)^2)` over all elements.
    pub fn mse_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mse_loss", a, b)?;
        let g = self.grad(&[a, b]);
        Ok(self.push(Op::MseLoss(a, b), 1, 1, g))
    }

    /// `mean(|a - b|)` over all elements; subgradient 0 at equality.
    pub fn mae_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mae_loss", a, b)?;
        let g = self.grad(&[a, b]);
        Ok(self.push(Op::MaeLoss(a, b), 1, 1, g))
    }

    pub fn output(&mut self, name: &str, id: NodeId) {
        self.outputs.push((name.to_string(), id));
    }

    pub fn shape_of(&self, id: NodeId) -> [usize; 2] {
        let (r, c) = self.shape(id);
        [r, c]
    }

    pub fn build(self) -> ComputeGraph {
        ComputeGraph { nodes: self.nodes, outputs: self.outputs }
    }
}

/// An immutable, acyclic graph of primitive operations. Nodes are stored in
/// construction order, which is a topological order.
#[derive(Clone, Debug)]
pub struct ComputeGraph {
    nodes: Vec<Node>,
    outputs: Vec<(String, NodeId)>,
}

impl ComputeGraph {
    pub fn session(&self) -> Session<'_> {
        Session { graph: self, values: Vec::new(), ln_inv: Vec::new(), evaluated: false }
    }

    pub fn output_id(&self, name: &str) -> Result<NodeId> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| PirError::UnknownOutput(name.to_string()))
    }

    pub fn output_names(&self) -> impl Iterator<Item = &str> {
        self.outputs.iter().map(|(n, _)| n.as_str())
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Param(name) => Some(name.as_str()),
            _ => None,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

impl fmt::Display for ComputeGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, n) in self.nodes.iter().enumerate() {
            writeln!(f, "#{i} {} [{}x{}]", n.op.name(), n.rows, n.cols)?;
        }
        Ok(())
    }
}

/// Per-parameter (and gradient-tracked input) gradients from one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub params: BTreeMap<String, Tensor>,
    pub inputs: BTreeMap<String, Tensor>,
}

/// Activations of one evaluation of a [`ComputeGraph`].
pub struct Session<'a> {
    graph: &'a ComputeGraph,
    values: Vec<Cow<'a, Tensor>>,
    ln_inv: Vec<Vec<f64>>,
    evaluated: bool,
}

impl<'a> Session<'a> {
    /// Runs the forward pass and returns every named output.
    pub fn evaluate(
        &mut self,
        params: &'a ParamStore,
        inputs: &[(&str, &'a Tensor)],
    ) -> Result<BTreeMap<String, Tensor>> {
        self.forward(params, inputs)?;
        Ok(self
            .graph
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), self.values[id.0].as_ref().clone()))
            .collect())
    }

    /// Forward pass without copying outputs; read them with [`Session::get`].
    pub fn forward(&mut self, params: &'a ParamStore, inputs: &[(&str, &'a Tensor)]) -> Result<()> {
        self.evaluated = false;
        self.values.clear();
        self.ln_inv.clear();
        let graph = self.graph;
        self.ln_inv.resize(graph.nodes.len(), Vec::new());
        for (i, node) in graph.nodes.iter().enumerate() {
            let value = match &node.op {
                Op::Input(name) => {
                    let t = inputs
                        .iter()
                        .find(|(n, _)| n == name)
                        .map(|(_, t)| *t)
                        .ok_or_else(|| PirError::MissingInput(name.clone()))?;
                    check_leaf(i, "input", name, node, t)?;
                    Cow::Borrowed(t)
                }
                Op::Param(name) => {
                    let t = params.get(name).ok_or_else(|| PirError::MissingParam(name.clone()))?;
                    check_leaf(i, "param", name, node, t)?;
                    Cow::Borrowed(t)
                }
                op => {
                    let data = self.compute(i, op, node);
                    Cow::Owned(Tensor { shape: vec![node.rows, node.cols], data })
                }
            };
            self.values.push(value);
        }
        self.evaluated = true;
        Ok(())
    }

    fn val(&self, id: NodeId) -> &[f64] {
        self.values[id.0].data()
    }

    fn compute(&mut self, index: usize, op: &Op, node: &Node) -> Vec<f64> {
        let graph = self.graph;
        let nodes = &graph.nodes;
        let (rows, cols) = (node.rows, node.cols);
        match *op {
            Op::Input(_) | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let k = nodes[a.0].cols;
                let mut out = vec![0.0; rows * cols];
                gemm(rows, k, cols, self.val(a), false, self.val(b), false, &mut out, false);
                out
            }
            Op::Transpose(a) => transpose(nodes[a.0].rows, nodes[a.0].cols, self.val(a)),
            Op::Add(a, b, bc) => self.binary(a, b, bc, cols, |x, y| x + y),
            Op::Sub(a, b, bc) => self.binary(a, b, bc, cols, |x, y| x - y),
            Op::Mul(a, b, bc) => self.binary(a, b, bc, cols, |x, y| x * y),
            Op::Scale(a, f) => self.val(a).iter().map(|v| v * f).collect(),
            Op::Affine { x, w, b } => {
                let k = nodes[x.0].cols;
                let bias = self.val(b);
                let mut out = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    out.extend_from_slice(bias);
                }
                gemm(rows, k, cols, self.val(x), false, self.val(w), false, &mut out, true);
                out
            }
            Op::Sigmoid(a) => self.val(a).iter().map(|&v| sigmoid(v)).collect(),
            Op::Gelu(a) => self.val(a).iter().map(|&v| gelu(v)).collect(),
            Op::Softmax(a) => {
                let x = self.val(a);
                let mut out = vec![0.0; x.len()];
                for (o, r) in out.chunks_mut(cols).zip(x.chunks(cols)) {
                    softmax_row(r, o);
                }
                out
            }
            Op::LayerNorm(a) => {
                let x = self.val(a);
                let mut out = vec![0.0; x.len()];
                let mut inv = Vec::with_capacity(rows);
                for (o, r) in out.chunks_mut(cols).zip(x.chunks(cols)) {
                    inv.push(layer_norm_row(r, o));
                }
                self.ln_inv[index] = inv;
                out
            }
            Op::Concat { ref parts, axis } => {
                let mut out = Vec::with_capacity(rows * cols);
                if axis == 0 {
                    for p in parts {
                        out.extend_from_slice(self.val(*p));
                    }
                } else {
                    for r in 0..rows {
                        for p in parts {
                            let pc = nodes[p.0].cols;
                            out.extend_from_slice(&self.val(*p)[r * pc..(r + 1) * pc]);
                        }
                    }
                }
                out
            }
            Op::Slice { x, axis, start, end } => {
                let xc = nodes[x.0].cols;
                let src = self.val(x);
                if axis == 0 {
                    src[start * xc..end * xc].to_vec()
                } else {
                    let mut out = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        out.extend_from_slice(&src[r * xc + start..r * xc + end]);
                    }
                    out
                }
            }
            Op::Sum(a) => vec![self.val(a).iter().sum()],
            Op::Mean(a) => {
                let x = self.val(a);
                vec![x.iter().sum::<f64>() / x.len() as f64]
            }
            Op::RowMean(a) => {
                let ac = nodes[a.0].cols;
                self.val(a).chunks(ac).map(|r| r.iter().sum::<f64>() / ac as f64).collect()
            }
            Op::MseLoss(a, b) => {
                let (x, y) = (self.val(a), self.val(b));
                let s: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
                vec![s / x.len() as f64]
            }
            Op::MaeLoss(a, b) => {
                let (x, y) = (self.val(a), self.val(b));
                let s: f64 = x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum();
                vec![s / x.len() as f64]
            }
        }
    }

    fn binary(
        &self,
        a: NodeId,
        b: NodeId,
        bc: Broadcast,
        cols: usize,
        f: impl Fn(f64, f64) -> f64,
    ) -> Vec<f64> {
        let (x, y) = (self.val(a), self.val(b));
        let mut out = Vec::with_capacity(x.len());
        for (i, &v) in x.iter().enumerate() {
            out.push(f(v, y[bc.index(i / cols, i % cols, cols)]));
        }
        out
    }

    /// Value of a named output after the forward pass.
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        if !self.evaluated {
            return Err(PirError::BackwardBeforeForward);
        }
        let id = self.graph.output_id(name)?;
        Ok(self.values[id.0].as_ref())
    }

    pub fn node_value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0).map(|v| v.as_ref())
    }

    /// Reverse pass from the named output, seeded with `seed` (same shape as
    /// the output). Visits nodes in exact reverse construction order.
    pub fn backward(&self, output: &str, seed: &Tensor) -> Result<Gradients> {
        if !self.evaluated {
            return Err(PirError::BackwardBeforeForward);
        }
        let graph = self.graph;
        let out = graph.output_id(output)?;
        let onode = &graph.nodes[out.0];
        if seed.rows() != onode.rows || seed.cols() != onode.cols {
            return Err(PirError::Shape {
                node: format!("seed for `{output}`"),
                detail: format!(
                    "expected [{},{}], got {:?}",
                    onode.rows,
                    onode.cols,
                    seed.shape()
                ),
            });
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; graph.nodes.len()];
        grads[out.0] = Some(seed.data().to_vec());

        for i in (0..=out.0).rev() {
            let node = &graph.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            match &node.op {
                Op::Input(_) | Op::Param(_) => {
                    grads[i] = Some(dy);
                }
                op => self.propagate(i, op, node, &dy, &mut grads),
            }
        }

        let mut result = Gradients::default();
        for (i, node) in graph.nodes.iter().enumerate() {
            let target = match &node.op {
                Op::Param(name) => Some((&mut result.params, name)),
                Op::Input(name) if node.requires_grad => Some((&mut result.inputs, name)),
                _ => None,
            };
            if let Some((map, name)) = target {
                let g = grads[i].take().unwrap_or_else(|| vec![0.0; node.len()]);
                let shape = self.values[i].shape().to_vec();
                match map.get_mut(name) {
                    // the same leaf bound twice: accumulate
                    Some(existing) => {
                        for (e, v) in existing.data_mut().iter_mut().zip(&g) {
                            *e += v;
                        }
                    }
                    None => {
                        map.insert(name.clone(), Tensor { shape, data: g });
                    }
                }
            }
        }
        Ok(result)
    }

    fn propagate(
        &self,
        index: usize,
        op: &Op,
        node: &Node,
        dy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.graph.nodes;
        let wants = |id: NodeId| nodes[id.0].requires_grad;
        let (rows, cols) = (node.rows, node.cols);
        match *op {
            Op::Input(_) | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let k = nodes[a.0].cols;
                if wants(a) {
                    // dA = dY * B^T
                    let g = buf(grads, a, rows * k);
                    gemm(rows, cols, k, dy, false, self.val(b), true, g, true);
                }
                if wants(b) {
                    // dB = A^T * dY
                    let g = buf(grads, b, k * cols);
                    gemm(k, rows, cols, self.val(a), true, dy, false, g, true);
                }
            }
            Op::Transpose(a) => {
                let t = transpose(rows, cols, dy);
                add_into(buf(grads, a, t.len()), &t);
            }
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(a) {
                    add_into(buf(grads, a, dy.len()), dy);
                }
                if wants(b) {
                    let g = buf(grads, b, nodes[b.0].len());
                    for (i, &d) in dy.iter().enumerate() {
                        g[bc.index(i / cols, i % cols, cols)] += sign * d;
                    }
                }
            }
            Op::Mul(a, b, bc) => {
                let (x, y) = (self.val(a), self.val(b));
                if wants(a) {
                    let g = buf(grads, a, dy.len());
                    for (i, &d) in dy.iter().enumerate() {
                        g[i] += d * y[bc.index(i / cols, i % cols, cols)];
                    }
                }
                if wants(b) {
                    let g = buf(grads, b, nodes[b.0].len());
                    for (i, &d) in dy.iter().enumerate() {
                        g[bc.index(i / cols, i % cols, cols)] += d * x[i];
                    }
                }
            }
            Op::Scale(a, f) => {
                let g = buf(grads, a, dy.len());
                for (gi, d) in g.iter_mut().zip(dy) {
                    *gi += d * f;
                }
            }
            Op::Affine { x, w, b } => {
                let k = nodes[x.0].cols;
                if wants(x) {
                    let g = buf(grads, x, rows * k);
                    gemm(rows, cols, k, dy, false, self.val(w), true, g, true);
                }
                if wants(w) {
                    let g = buf(grads, w, k * cols);
                    gemm(k, rows, cols, self.val(x), true, dy, false, g, true);
                }
                if wants(b) {
                    let g = buf(grads, b, cols);
                    for r in dy.chunks(cols) {
                        add_into(g, r);
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = self.values[index].data();
                let g = buf(grads, a, dy.len());
                for i in 0..dy.len() {
                    g[i] += dy[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::Gelu(a) => {
                let x = self.val(a);
                let g = buf(grads, a, dy.len());
                for i in 0..dy.len() {
                    g[i] += dy[i] * gelu_grad(x[i]);
                }
            }
            Op::Softmax(a) => {
                let y = self.values[index].data();
                let g = buf(grads, a, dy.len());
                for r in 0..rows {
                    let (yr, dr) = (&y[r * cols..(r + 1) * cols], &dy[r * cols..(r + 1) * cols]);
                    let dot: f64 = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                    for c in 0..cols {
                        g[r * cols + c] += yr[c] * (dr[c] - dot);
                    }
                }
            }
            Op::LayerNorm(a) => {
                let y = self.values[index].data();
                let inv = &self.ln_inv[index];
                let n = cols as f64;
                let g = buf(grads, a, dy.len());
                for r in 0..rows {
                    let (yr, dr) = (&y[r * cols..(r + 1) * cols], &dy[r * cols..(r + 1) * cols]);
                    let sum_d: f64 = dr.iter().sum();
                    let sum_dy: f64 = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                    for c in 0..cols {
                        g[r * cols + c] += inv[r] / n * (n * dr[c] - sum_d - yr[c] * sum_dy);
                    }
                }
            }
            Op::Concat { ref parts, axis } => {
                if axis == 0 {
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p.0].len();
                        if wants(*p) {
                            add_into(buf(grads, *p, len), &dy[offset..offset + len]);
                        }
                        offset += len;
                    }
                } else {
                    let mut col0 = 0;
                    for p in parts {
                        let pc = nodes[p.0].cols;
                        if wants(*p) {
                            let g = buf(grads, *p, rows * pc);
                            for r in 0..rows {
                                add_into(
                                    &mut g[r * pc..(r + 1) * pc],
                                    &dy[r * cols + col0..r * cols + col0 + pc],
                                );
                            }
                        }
                        col0 += pc;
                    }
                }
            }
            Op::Slice { x, axis, start, .. } => {
                let xc = nodes[x.0].cols;
                let g = buf(grads, x, nodes[x.0].len());
                if axis == 0 {
                    add_into(&mut g[start * xc..start * xc + dy.len()], dy);
                } else {
                    for r in 0..rows {
                        add_into(
                            &mut g[r * xc + start..r * xc + start + cols],
                            &dy[r * cols..(r + 1) * cols],
                        );
                    }
                }
            }
            Op::Sum(a) => {
                let g = buf(grads, a, nodes[a.0].len());
                for v in g.iter_mut() {
                    *v += dy[0];
                }
            }
            Op::Mean(a) => {
                let len = nodes[a.0].len();
                let g = buf(grads, a, len);
                let d = dy[0] / len as f64;
                for v in g.iter_mut() {
                    *v += d;
                }
            }
            Op::RowMean(a) => {
                let ac = nodes[a.0].cols;
                let g = buf(grads, a, nodes[a.0].len());
                for (r, chunk) in g.chunks_mut(ac).enumerate() {
                    let d = dy[r] / ac as f64;
                    for v in chunk {
                        *v += d;
                    }
                }
            }
            Op::MseLoss(a, b) | Op::MaeLoss(a, b) => {
                let (x, y) = (self.val(a), self.val(b));
                let n = x.len() as f64;
                let mse = matches!(op, Op::MseLoss(..));
                let local: Vec<f64> = x
                    .iter()
                    .zip(y)
                    .map(|(p, q)| {
                        let r = p - q;
                        let d = if mse {
                            2.0 * r
                        } else if r > 0.0 {
                            1.0
                        } else if r < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        dy[0] * d / n
                    })
                    .collect();
                if wants(a) {
                    add_into(buf(grads, a, local.len()), &local);
                }
                if wants(b) {
                    let g = buf(grads, b, local.len());
                    for (gi, l) in g.iter_mut().zip(&local) {
                        *gi -= l;
                    }
                }
            }
        }
    }
}

fn check_leaf(index: usize, kind: &str, name: &str, node: &Node, t: &Tensor) -> Result<()> {
    if t.rows() != node.rows || t.cols() != node.cols {
        return Err(PirError::Shape {
            node: format!("node #{index} ({kind} `{name}`)"),
            detail: format!("declared [{},{}], bound {:?}", node.rows, node.cols, t.shape()),
        });
    }
    Ok(())
}

fn buf(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut [f64] {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(entries: &[(&str, Tensor)]) -> ParamStore {
        let mut p = ParamStore::new();
        for (n, t) in entries {
            p.insert(*n, t.clone());
        }
        p
    }

    #[test]
    fn sum_of_squares_value_and_gradient() {
        let mut g = GraphBuilder::new();
        let x = g.param("x", &[1, 2]);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.output("f", s);
        let graph = g.build();
        let p = params(&[("x", Tensor::row_vector(vec![1.0, 2.0]))]);
        let mut sess = graph.session();
        let out = sess.evaluate(&p, &[]).unwrap();
        assert_eq!(out["f"].data(), &[5.0]);
        let grads = sess.backward("f", &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.params["x"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform_and_jacobian_is_analytic() {
        let mut g = GraphBuilder::new();
        let x = g.input_with_grad("x", &[1, 2]);
        let y = g.softmax(x).unwrap();
        // pick each output coordinate to read off Jacobian rows
        let y0 = g.slice(y, 1, 0, 1).unwrap();
        let y1 = g.slice(y, 1, 1, 2).unwrap();
        g.output("y", y);
        g.output("y0", y0);
        g.output("y1", y1);
        let graph = g.build();
        let x_val = Tensor::row_vector(vec![0.0, 0.0]);
        let p = ParamStore::new();
        let mut sess = graph.session();
        let out = sess.evaluate(&p, &[("x", &x_val)]).unwrap();
        assert_eq!(out["y"].data(), &[0.5, 0.5]);
        let j0 = sess.backward("y0", &Tensor::scalar(1.0)).unwrap();
        let j1 = sess.backward("y1", &Tensor::scalar(1.0)).unwrap();
        assert_eq!(j0.inputs["x"].data(), &[0.25, -0.25]);
        assert_eq!(j1.inputs["x"].data(), &[-0.25, 0.25]);
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let mut g = GraphBuilder::new();
        let x = g.param("x", &[1, 1]);
        g.output("x", x);
        let graph = g.build();
        let sess = graph.session();
        assert!(matches!(
            sess.backward("x", &Tensor::scalar(1.0)),
            Err(PirError::BackwardBeforeForward)
        ));
    }

    #[test]
    fn shape_errors_name_the_node() {
        let mut g = GraphBuilder::new();
        let a = g.input("a", &[2, 3]);
        let b = g.input("b", &[2, 3]);
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("node #2 (matmul)"), "{err}");

        let bad_bias = g.input("bias", &[1, 4]);
        let w = g.input("w", &[3, 3]);
        assert!(g.affine(a, w, bad_bias).is_err());
    }

    #[test]
    fn bound_shape_mismatch_is_reported() {
        let mut g = GraphBuilder::new();
        let a = g.input("a", &[2, 2]);
        g.output("a", a);
        let graph = g.build();
        let t = Tensor::zeros(&[3, 2]);
        let p = ParamStore::new();
        let err = graph.session().evaluate(&p, &[("a", &t)]).unwrap_err().to_string();
        assert!(err.contains("input `a`"), "{err}");
        let missing = graph.session().evaluate(&p, &[]).unwrap_err();
        assert!(matches!(missing, PirError::MissingInput(_)));
    }

    #[test]
    fn unused_parameters_get_zero_gradients() {
        let mut g = GraphBuilder::new();
        let x = g.param("x", &[1, 2]);
        let _unused = g.param("u", &[2, 2]);
        let s = g.sum(x).unwrap();
        g.output("s", s);
        let graph = g.build();
        let p = params(&[
            ("x", Tensor::row_vector(vec![1.0, 1.0])),
            ("u", Tensor::full(&[2, 2], 3.0)),
        ]);
        let mut sess = graph.session();
        sess.forward(&p, &[]).unwrap();
        let grads = sess.backward("s", &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.params["u"].data(), &[0.0; 4]);
        assert_eq!(grads.params["x"].data(), &[1.0, 1.0]);
    }

    #[test]
    fn broadcasting_reduces_gradients() {
        let mut g = GraphBuilder::new();
        let a = g.param("a", &[2, 3]);
        let row = g.param("row", &[1, 3]);
        let col = g.param("col", &[2, 1]);
        let s = g.param("s", &[1, 1]);
        let t1 = g.add(a, row).unwrap();
        let t2 = g.mul(t1, col).unwrap();
        let t3 = g.sub(t2, s).unwrap();
        let out = g.sum(t3).unwrap();
        g.output("o", out);
        let graph = g.build();
        let p = params(&[
            ("a", Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()),
            ("row", Tensor::row_vector(vec![1.0, 1.0, 1.0])),
            ("col", Tensor::column_vector(vec![2.0, 3.0])),
            ("s", Tensor::scalar(0.5)),
        ]);
        let mut sess = graph.session();
        sess.forward(&p, &[]).unwrap();
        let gr = sess.backward("o", &Tensor::scalar(1.0)).unwrap();
        assert_eq!(gr.params["row"].data(), &[5.0, 5.0, 5.0]);
        assert_eq!(gr.params["col"].data(), &[9.0, 18.0]);
        assert_eq!(gr.params["s"].data(), &[-6.0]);
        assert_eq!(gr.params["a"].data(), &[2.0, 2.0, 2.0, 3.0, 3.0, 3.0]);
    }
}
