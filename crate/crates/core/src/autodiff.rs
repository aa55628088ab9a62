//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as an append-only node. Inputs of a
//! node always precede it, so the node list is already in topological order
//! and [`Graph::backward`] just walks it in reverse, accumulating adjoints.
//!
//! Trainable tensors enter through [`Graph::param`]; the gradients returned by
//! backward are aligned with the order in which parameters were registered.
//! Values are held behind `Arc`, so binding a large parameter set to a fresh
//! graph does not copy it.
//!
//! Shapes are deliberately restricted: rank-1 vectors and rank-2 matrices,
//! exact shape equality for elementwise ops, and a single broadcast pattern
//! (a vector applied across the rows of a matrix, see [`Graph::add_row`] and
//! [`Graph::scale_rows`]).

use std::sync::Arc;

use crate::error::TensorError;
use crate::tensor::Tensor;

/// Guard used by [`Graph::l2_normalize`] for all-zero rows.
pub const L2_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Hadamard,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Square(NodeId),
    AddRow(NodeId, NodeId),
    ScaleRows(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    Sum(NodeId, Option<usize>),
    Mean(NodeId, Option<usize>),
    /// Flat input index that won each output slot.
    Max(NodeId, Vec<usize>),
    /// Per-row divisor actually used, `max(norm, L2_EPS)`.
    L2Normalize(NodeId, Vec<f64>),
    Norm2(NodeId),
    Log(NodeId, f64),
    Concat(Vec<NodeId>, usize),
    Slice(NodeId, usize, usize),
    Reshape(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Hadamard(..) => "hadamard",
            Op::Square(..) => "square",
            Op::AddRow(..) => "add_row",
            Op::ScaleRows(..) => "scale_rows",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Softmax(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Max(..) => "max",
            Op::L2Normalize(..) => "l2_normalize",
            Op::Norm2(..) => "norm2",
            Op::Log(..) => "log",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node {
    op: Op,
    value: Arc<Tensor>,
    requires_grad: bool,
    param_slot: Option<usize>,
}

/// Gradients of a backward pass, one per registered parameter.
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<NodeId>,
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.params
            .iter()
            .position(|&p| p == id)
            .map(|slot| &self.grads[slot])
    }

    /// Gradients in parameter registration order.
    pub fn as_slice(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn into_vec(self) -> Vec<Tensor> {
        self.grads
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
    verify_finite: bool,
    fault: Option<&'static str>,
}

type OpResult = Result<NodeId, TensorError>;

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph that rejects any operation producing NaN or infinity.
    pub fn verifying() -> Self {
        Self {
            verify_finite: true,
            ..Self::default()
        }
    }

    pub fn set_verify_finite(&mut self, on: bool) {
        self.verify_finite = on;
    }

    /// Test hook: perturbs the backward rule of the named op so gradient
    /// checks can be shown to fail.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, op: &'static str) {
        self.fault = Some(op);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn value_arc(&self, id: NodeId) -> Arc<Tensor> {
        Arc::clone(&self.nodes[id.0].value)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        self.nodes[id.0].param_slot.is_some()
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.constant_arc(Arc::new(value))
    }

    pub fn constant_arc(&mut self, value: Arc<Tensor>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
            param_slot: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf. Its gradient appears in [`Gradients`] at the position
    /// of this call among all `param` calls.
    pub fn param(&mut self, value: Arc<Tensor>) -> NodeId {
        let slot = self.params.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
            param_slot: Some(slot),
        });
        let id = NodeId(self.nodes.len() - 1);
        self.params.push(id);
        id
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> OpResult {
        if self.verify_finite && !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
            requires_grad,
            param_slot: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, op: &'static str, id: NodeId) -> Result<(usize, usize), TensorError> {
        let t = self.value(id);
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::InvalidAxis {
                op,
                shape: t.shape().to_vec(),
            }),
        }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> OpResult {
        let (p, q) = self.matrix_dims("matmul", a)?;
        let (q2, r) = self.matrix_dims("matmul", b)?;
        if q != q2 {
            return Err(mismatch("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; p * r];
        matmul_into(self.value(a).data(), self.value(b).data(), p, q, r, &mut out);
        let value = Tensor::new(vec![p, r], out)?;
        self.push(Op::MatMul(a, b), value, &[a, b])
    }

    // ---- elementwise ----------------------------------------------------

    pub fn elementwise(&mut self, op: Elementwise, a: NodeId, b: Option<NodeId>) -> OpResult {
        let need_b = || {
            TensorError::Invalid(format!("elementwise {op:?} needs a second operand"))
        };
        match op {
            Elementwise::Add => self.add(a, b.ok_or_else(need_b)?),
            Elementwise::Sub => self.sub(a, b.ok_or_else(need_b)?),
            Elementwise::Hadamard => self.hadamard(a, b.ok_or_else(need_b)?),
            Elementwise::Square => self.square(a),
        }
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> OpResult {
        let v = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push(Op::Add(a, b), v, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> OpResult {
        let v = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push(Op::Sub(a, b), v, &[a, b])
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> OpResult {
        let v = self.zip_with("hadamard", a, b, |x, y| x * y)?;
        self.push(Op::Hadamard(a, b), v, &[a, b])
    }

    pub fn square(&mut self, a: NodeId) -> OpResult {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v, &[a])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> OpResult {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v, &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> OpResult {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), v, &[a])
    }

    /// Adds vector `v` (length = columns) to every row of `m`.
    pub fn add_row(&mut self, m: NodeId, v: NodeId) -> OpResult {
        let (rows, cols) = self.value(m).dims2();
        let tv = self.value(v);
        if tv.rank() != 1 || tv.len() != cols || self.value(m).rank() > 2 {
            return Err(mismatch("add_row", self.value(m), tv));
        }
        let mut data = self.value(m).data().to_vec();
        for r in 0..rows {
            for (x, b) in data[r * cols..(r + 1) * cols].iter_mut().zip(tv.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(self.value(m).shape().to_vec(), data)?;
        self.push(Op::AddRow(m, v), value, &[m, v])
    }

    /// Multiplies row `t` of `m` by `w[t]`.
    pub fn scale_rows(&mut self, m: NodeId, w: NodeId) -> OpResult {
        let (rows, cols) = self.matrix_dims("scale_rows", m)?;
        let tw = self.value(w);
        if tw.rank() != 1 || tw.len() != rows {
            return Err(mismatch("scale_rows", self.value(m), tw));
        }
        let mut data = self.value(m).data().to_vec();
        for (r, &s) in tw.data().iter().enumerate() {
            for x in &mut data[r * cols..(r + 1) * cols] {
                *x *= s;
            }
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        self.push(Op::ScaleRows(m, w), value, &[m, w])
    }

    // ---- activations ----------------------------------------------------

    pub fn activation(&mut self, op: Activation, x: NodeId) -> OpResult {
        match op {
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Tanh => self.tanh(x),
            Activation::Relu => self.relu(x),
        }
    }

    pub fn sigmoid(&mut self, x: NodeId) -> OpResult {
        let v = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid(x), v, &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> OpResult {
        let v = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x), v, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> OpResult {
        let v = self.value(x).map(|z| z.max(0.0));
        self.push(Op::Relu(x), v, &[x])
    }

    /// Softmax over a vector, or over each row of a matrix.
    pub fn softmax(&mut self, x: NodeId) -> OpResult {
        let t = self.value(x);
        let (rows, cols) = t.dims2();
        let mut data = t.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(Op::Softmax(x), value, &[x])
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, x: NodeId, floor: f64) -> OpResult {
        let v = self.value(x).map(|z| z.max(floor).ln());
        self.push(Op::Log(x, floor), v, &[x])
    }

    // ---- reductions -----------------------------------------------------

    fn reduced_shape(
        &self,
        op: &'static str,
        x: NodeId,
        axis: Option<usize>,
    ) -> Result<(usize, usize, Vec<usize>), TensorError> {
        let t = self.value(x);
        let (rows, cols) = t.dims2();
        let shape = match (t.rank(), axis) {
            (_, None) => vec![1],
            (1, Some(0)) => vec![1],
            (2, Some(0)) => vec![cols],
            (2, Some(1)) => vec![rows],
            _ => {
                return Err(TensorError::InvalidAxis {
                    op,
                    shape: t.shape().to_vec(),
                })
            }
        };
        Ok((rows, cols, shape))
    }

    /// Maps a flat input index to its output slot under the reduction.
    fn reduce_slot(rank: usize, axis: Option<usize>, cols: usize, idx: usize) -> usize {
        match (rank, axis) {
            (2, Some(0)) => idx % cols,
            (2, Some(1)) => idx / cols,
            _ => 0,
        }
    }

    pub fn reduce(&mut self, op: Reduction, x: NodeId, axis: Option<usize>) -> OpResult {
        match op {
            Reduction::Sum => self.sum(x, axis),
            Reduction::Mean => self.mean(x, axis),
            Reduction::Max => self.max(x, axis),
        }
    }

    pub fn sum(&mut self, x: NodeId, axis: Option<usize>) -> OpResult {
        let (_, cols, shape) = self.reduced_shape("sum", x, axis)?;
        let t = self.value(x);
        let mut out = vec![0.0; shape.iter().product()];
        for (i, v) in t.data().iter().enumerate() {
            out[Self::reduce_slot(t.rank(), axis, cols, i)] += v;
        }
        let value = Tensor::new(shape, out)?;
        self.push(Op::Sum(x, axis), value, &[x])
    }

    pub fn mean(&mut self, x: NodeId, axis: Option<usize>) -> OpResult {
        let (_, cols, shape) = self.reduced_shape("mean", x, axis)?;
        let t = self.value(x);
        let k = (t.len() / shape.iter().product::<usize>()) as f64;
        let mut out = vec![0.0; shape.iter().product()];
        for (i, v) in t.data().iter().enumerate() {
            out[Self::reduce_slot(t.rank(), axis, cols, i)] += v;
        }
        for v in &mut out {
            *v /= k;
        }
        let value = Tensor::new(shape, out)?;
        self.push(Op::Mean(x, axis), value, &[x])
    }

    /// Max reduction. Ties go to the first index in row-major order.
    pub fn max(&mut self, x: NodeId, axis: Option<usize>) -> OpResult {
        let (_, cols, shape) = self.reduced_shape("max", x, axis)?;
        let t = self.value(x);
        let slots = shape.iter().product();
        let mut out = vec![f64::NEG_INFINITY; slots];
        let mut arg = vec![usize::MAX; slots];
        for (i, &v) in t.data().iter().enumerate() {
            let s = Self::reduce_slot(t.rank(), axis, cols, i);
            if arg[s] == usize::MAX || v > out[s] {
                out[s] = v;
                arg[s] = i;
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(Op::Max(x, arg), value, &[x])
    }

    /// Euclidean norm of all entries, as a one-element tensor.
    pub fn norm2(&mut self, x: NodeId) -> OpResult {
        let v = Tensor::scalar(self.value(x).norm());
        self.push(Op::Norm2(x), v, &[x])
    }

    /// Divides each row by `max(||row||, L2_EPS)`.
    pub fn l2_normalize(&mut self, x: NodeId) -> OpResult {
        let t = self.value(x);
        if t.rank() > 2 {
            return Err(TensorError::InvalidAxis {
                op: "l2_normalize",
                shape: t.shape().to_vec(),
            });
        }
        let (rows, cols) = t.dims2();
        let mut data = t.data().to_vec();
        let mut divisors = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let d = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_EPS);
            for v in row.iter_mut() {
                *v /= d;
            }
            divisors.push(d);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(Op::L2Normalize(x, divisors), value, &[x])
    }

    // ---- structural -----------------------------------------------------

    /// Concatenates along `axis`. Vectors only support axis 0; matrices
    /// support 0 (stack rows) and 1 (join columns).
    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> OpResult {
        let first = *xs
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let rank = self.value(first).rank();
        if xs.iter().any(|&x| self.value(x).rank() != rank) || axis >= rank || rank > 2 {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                shape: self.value(first).shape().to_vec(),
            });
        }
        let value = if rank == 1 || axis == 0 {
            let width = self.value(first).dims2().1;
            let mut data = Vec::new();
            let mut rows = 0;
            for &x in xs {
                let t = self.value(x);
                if rank == 2 && t.dims2().1 != width {
                    return Err(mismatch("concat", self.value(first), t));
                }
                rows += t.dims2().0;
                data.extend_from_slice(t.data());
            }
            let shape = if rank == 1 { vec![data.len()] } else { vec![rows, width] };
            Tensor::new(shape, data)?
        } else {
            let rows = self.value(first).dims2().0;
            let mut total = 0;
            for &x in xs {
                let t = self.value(x);
                if t.dims2().0 != rows {
                    return Err(mismatch("concat", self.value(first), t));
                }
                total += t.dims2().1;
            }
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &x in xs {
                    data.extend_from_slice(self.value(x).row(r));
                }
            }
            Tensor::new(vec![rows, total], data)?
        };
        self.push(Op::Concat(xs.to_vec(), axis), value, xs)
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> OpResult {
        let t = self.value(x);
        let (rows, cols) = t.dims2();
        let bad = || TensorError::InvalidAxis {
            op: "slice",
            shape: t.shape().to_vec(),
        };
        let value = match (t.rank(), axis) {
            (1, 0) => {
                if len == 0 || start + len > cols {
                    return Err(bad());
                }
                Tensor::vector(t.data()[start..start + len].to_vec())
            }
            (2, 0) => {
                if len == 0 || start + len > rows {
                    return Err(bad());
                }
                Tensor::new(
                    vec![len, cols],
                    t.data()[start * cols..(start + len) * cols].to_vec(),
                )?
            }
            (2, 1) => {
                if len == 0 || start + len > cols {
                    return Err(bad());
                }
                let mut data = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    data.extend_from_slice(&t.row(r)[start..start + len]);
                }
                Tensor::new(vec![rows, len], data)?
            }
            _ => return Err(bad()),
        };
        self.push(Op::Slice(x, axis, start), value, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> OpResult {
        let value = self.value(x).reshape(shape)?;
        self.push(Op::Reshape(x), value, &[x])
    }

    // ---- backward -------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every parameter.
    /// Parameters the loss does not reach get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let seed = Tensor::full(shape, 1.0);
        self.backward_from(vec![(loss, seed)])
    }

    /// Vector-Jacobian product: propagates the given output adjoints back to
    /// the parameters.
    pub fn backward_from(&self, seeds: Vec<(NodeId, Tensor)>) -> Result<Gradients, TensorError> {
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (id, g) in seeds {
            if g.shape() != self.shape(id) {
                return Err(mismatch("backward seed", self.value(id), &g));
            }
            top = top.max(id.0 + 1);
            accumulate(&mut adj[id.0], g);
        }
        let mut grads: Vec<Tensor> = self
            .params
            .iter()
            .map(|&p| Tensor::zeros(self.shape(p)))
            .collect();

        for i in (0..top).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Some(slot) = node.param_slot {
                grads[slot].add_assign(&g);
                continue;
            }
            let mut contributions = self.node_backward(node, &g);
            if self.fault == Some(node.op.name()) {
                for (_, c) in &mut contributions {
                    for v in c.data_mut() {
                        *v *= 1.5;
                    }
                }
            }
            for (input, c) in contributions {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut adj[input.0], c);
                }
            }
        }
        Ok(Gradients {
            params: self.params.clone(),
            grads,
        })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Vec<(NodeId, Tensor)> {
        let out = &node.value;
        let like = |id: NodeId, data: Vec<f64>| {
            (id, Tensor::new(self.shape(id).to_vec(), data).expect("gradient shape"))
        };
        let pointwise = |x: NodeId, f: &dyn Fn(usize) -> f64| {
            let data = g.data().iter().enumerate().map(|(i, gi)| gi * f(i)).collect();
            like(x, data)
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (p, q) = ta.dims2();
                let r = tb.dims2().1;
                let mut res = Vec::with_capacity(2);
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; p * q];
                    for i in 0..p {
                        let gi = &g.data()[i * r..(i + 1) * r];
                        for k in 0..q {
                            da[i * q + k] = dot(gi, &tb.data()[k * r..(k + 1) * r]);
                        }
                    }
                    res.push(like(*a, da));
                }
                if self.wants(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; q * r];
                    for i in 0..p {
                        let gi = &g.data()[i * r..(i + 1) * r];
                        for k in 0..q {
                            let aik = ta.data()[i * q + k];
                            if aik != 0.0 {
                                axpy(aik, gi, &mut db[k * r..(k + 1) * r]);
                            }
                        }
                    }
                    res.push(like(*b, db));
                }
                res
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Hadamard(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                vec![
                    pointwise(*a, &|i| tb.data()[i]),
                    pointwise(*b, &|i| ta.data()[i]),
                ]
            }
            Op::Square(a) => {
                let ta = self.value(*a);
                vec![pointwise(*a, &|i| 2.0 * ta.data()[i])]
            }
            Op::AddRow(m, v) => {
                let (rows, cols) = g.dims2();
                let mut dv = vec![0.0; cols];
                for r in 0..rows {
                    for (d, x) in dv.iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                vec![(*m, g.clone()), like(*v, dv)]
            }
            Op::ScaleRows(m, w) => {
                let (tm, tw) = (self.value(*m), self.value(*w));
                let (rows, cols) = tm.dims2();
                let mut dm = g.data().to_vec();
                let mut dw = vec![0.0; rows];
                for r in 0..rows {
                    let s = tw.data()[r];
                    for x in &mut dm[r * cols..(r + 1) * cols] {
                        *x *= s;
                    }
                    dw[r] = dot(g.row(r), tm.row(r));
                }
                vec![like(*m, dm), like(*w, dw)]
            }
            Op::Scale(a, c) => vec![(*a, g.map(|v| v * c))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Sigmoid(a) => {
                vec![pointwise(*a, &|i| {
                    let y = out.data()[i];
                    y * (1.0 - y)
                })]
            }
            Op::Tanh(a) => {
                vec![pointwise(*a, &|i| {
                    let y = out.data()[i];
                    1.0 - y * y
                })]
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                vec![pointwise(*a, &|i| if ta.data()[i] > 0.0 { 1.0 } else { 0.0 })]
            }
            Op::Softmax(a) => {
                let (rows, cols) = out.dims2();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let s = dot(y, gr);
                    for c in 0..cols {
                        dx[r * cols + c] = y[c] * (gr[c] - s);
                    }
                }
                vec![like(*a, dx)]
            }
            Op::Log(a, floor) => {
                let ta = self.value(*a);
                vec![pointwise(*a, &|i| {
                    let x = ta.data()[i];
                    if x > *floor {
                        1.0 / x
                    } else {
                        0.0
                    }
                })]
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let ta = self.value(*a);
                let cols = ta.dims2().1;
                let k = if matches!(node.op, Op::Mean(..)) {
                    (ta.len() / out.len()) as f64
                } else {
                    1.0
                };
                let dx = (0..ta.len())
                    .map(|i| g.data()[Self::reduce_slot(ta.rank(), *axis, cols, i)] / k)
                    .collect();
                vec![like(*a, dx)]
            }
            Op::Max(a, arg) => {
                let mut dx = vec![0.0; self.value(*a).len()];
                for (slot, &i) in arg.iter().enumerate() {
                    dx[i] += g.data()[slot];
                }
                vec![like(*a, dx)]
            }
            Op::Norm2(a) => {
                let ta = self.value(*a);
                let n = out.item();
                let scale = if n > 0.0 { g.item() / n } else { 0.0 };
                vec![(*a, ta.map(|x| x * scale))]
            }
            Op::L2Normalize(a, divisors) => {
                let (rows, cols) = out.dims2();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let d = divisors[r];
                    let gr = g.row(r);
                    let dr = &mut dx[r * cols..(r + 1) * cols];
                    if d > L2_EPS {
                        let y = out.row(r);
                        let proj = dot(y, gr);
                        for c in 0..cols {
                            dr[c] = (gr[c] - y[c] * proj) / d;
                        }
                    } else {
                        for c in 0..cols {
                            dr[c] = gr[c] / d;
                        }
                    }
                }
                vec![like(*a, dx)]
            }
            Op::Concat(xs, axis) => {
                let rank = out.rank();
                let mut res = Vec::with_capacity(xs.len());
                if rank == 1 || *axis == 0 {
                    let mut offset = 0;
                    for &x in xs {
                        let n = self.value(x).len();
                        res.push(like(x, g.data()[offset..offset + n].to_vec()));
                        offset += n;
                    }
                } else {
                    let (rows, total) = out.dims2();
                    let mut col = 0;
                    for &x in xs {
                        let w = self.value(x).dims2().1;
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + col..r * total + col + w]);
                        }
                        res.push(like(x, d));
                        col += w;
                    }
                }
                res
            }
            Op::Slice(a, axis, start) => {
                let ta = self.value(*a);
                let (rows, cols) = ta.dims2();
                let mut dx = vec![0.0; ta.len()];
                match (ta.rank(), axis) {
                    (1, _) => dx[*start..*start + g.len()].copy_from_slice(g.data()),
                    (_, 0) => {
                        dx[start * cols..start * cols + g.len()].copy_from_slice(g.data())
                    }
                    _ => {
                        let w = g.dims2().1;
                        for r in 0..rows {
                            dx[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
                        }
                    }
                }
                vec![like(*a, dx)]
            }
            Op::Reshape(a) => vec![like(*a, g.data().to_vec())],
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `out = a · b` for row-major `a` (p×q) and `b` (q×r).
pub(crate) fn matmul_into(a: &[f64], b: &[f64], p: usize, q: usize, r: usize, out: &mut [f64]) {
    for i in 0..p {
        let row = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik != 0.0 {
                axpy(aik, &b[k * r..(k + 1) * r], row);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);
        assert!(matches!(g.matmul(a, a), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let b = g.constant(Tensor::vector(vec![2.0, 2.0, 2.0]));
        let h = g.elementwise(Elementwise::Hadamard, a, Some(b)).unwrap();
        assert_eq!(g.value(h).data(), &[2.0, 4.0, 6.0]);
        let z = g.constant(Tensor::zeros(&[3]));
        let s = g.elementwise(Elementwise::Add, a, Some(z)).unwrap();
        assert_eq!(g.value(s).data(), g.value(a).data());
        let short = g.constant(Tensor::vector(vec![1.0]));
        assert!(g.add(a, short).is_err());
        assert!(g.elementwise(Elementwise::Sub, a, None).is_err());
    }

    #[test]
    fn square_gradient_at_three() {
        let mut g = Graph::new();
        let x = g.param(Arc::new(Tensor::scalar(3.0)));
        let y = g.square(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert!((grads.get(x).unwrap().item() - 6.0).abs() < 1e-9);
    }

    #[test]
    fn activation_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, -1.5, 2.0]));
        let s = g.sigmoid(x).unwrap();
        let th = g.tanh(x).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        assert_eq!(g.value(th).data()[0], 0.0);
        assert_eq!(&g.value(r).data()[1..], &[0.0, 2.0]);
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![0.7; 5]));
        let s = g.softmax(c).unwrap();
        for v in g.value(s).data() {
            assert!((v - 0.2).abs() < 1e-12);
        }
        let x = g.constant(Tensor::vector(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let s = g.softmax(x).unwrap();
        for (v, e) in g.value(s).data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-12);
        }
    }

    #[test]
    fn max_routes_gradient_to_first_maximum() {
        let mut g = Graph::new();
        let x = g.param(Arc::new(Tensor::vector(vec![1.0, 5.0, 3.0])));
        let m = g.max(x, None).unwrap();
        assert_eq!(g.value(m).item(), 5.0);
        assert_eq!(g.backward(m).unwrap().get(x).unwrap().data(), &[0.0, 1.0, 0.0]);

        let mut g = Graph::new();
        let x = g.param(Arc::new(Tensor::vector(vec![7.0, 7.0])));
        let m = g.max(x, None).unwrap();
        assert_eq!(g.backward(m).unwrap().get(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn mean_and_axis_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![2.0, 4.0]));
        let m = g.mean(x, None).unwrap();
        assert_eq!(g.value(m).item(), 3.0);
        assert!(matches!(g.sum(x, Some(1)), Err(TensorError::InvalidAxis { .. })));
        let mt = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let cols = g.mean(mt, Some(0)).unwrap();
        assert_eq!(g.value(cols).data(), &[2.5, 3.5, 4.5]);
        let rows = g.max(mt, Some(1)).unwrap();
        assert_eq!(g.value(rows).data(), &[3.0, 6.0]);
    }

    #[test]
    fn l2_normalize_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[3.0, 4.0, 0.0, 0.0]));
        let y = g.l2_normalize(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8, 0.0, 0.0]);
    }

    #[test]
    fn concat_examples() {
        let mut g = Graph::new();
        let a = g.param(Arc::new(Tensor::vector(vec![1.0, 2.0])));
        let b = g.param(Arc::new(Tensor::vector(vec![3.0])));
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
        let s = g.sum(c, None).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0]);

        let m1 = g.constant(Tensor::zeros(&[3, 2]));
        let m2 = g.constant(Tensor::zeros(&[3, 5]));
        let m = g.concat(&[m1, m2], 1).unwrap();
        assert_eq!(g.shape(m), &[3, 7]);
        let m3 = g.constant(Tensor::zeros(&[2, 5]));
        assert!(g.concat(&[m1, m3], 1).is_err());
    }

    #[test]
    fn backward_linear_and_constant_cases() {
        let mut g = Graph::new();
        let w = g.param(Arc::new(Tensor::vector(vec![0.3, -1.0, 2.0])));
        let x = g.constant(Tensor::vector(vec![4.0, 5.0, 6.0]));
        let p = g.hadamard(w, x).unwrap();
        let l = g.sum(p, None).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[4.0, 5.0, 6.0]);

        let mut g = Graph::new();
        let w = g.param(Arc::new(Tensor::vector(vec![1.0, 2.0])));
        let c = g.constant(Tensor::scalar(4.0));
        let l = g.square(c).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.param(Arc::new(Tensor::vector(vec![1.0, 2.0])));
        assert!(matches!(g.backward(w), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn verifying_graph_catches_non_finite() {
        let mut g = Graph::verifying();
        let x = g.constant(Tensor::vector(vec![f64::MAX]));
        assert!(matches!(g.scale(x, 10.0), Err(TensorError::NonFinite { op: "scale" })));
    }
}
