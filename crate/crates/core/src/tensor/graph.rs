//! Reverse-mode autodiff over an explicit operation tape.
//!
//! A `Graph` is built once per step: inputs are declared with shapes, params
//! and buffers are bound by name, and op builders append nodes with eager
//! shape inference (shape errors carry the offending node id). `forward`
//! executes the tape against bound values and retains every activation the
//! backward pass needs; it can be re-run after rebinding values, which is
//! what the finite-difference checker does.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::kernels as k;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

/// Batch-norm execution mode for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running stats updated and reported via
    /// [`Graph::buffer_updates`].
    Train,
    /// Batch statistics without touching running stats (momentum-encoder
    /// forward passes).
    TrainNoUpdate,
    /// Running statistics.
    Eval,
}

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Input { name: String },
    Param { name: String },
    Buffer { name: String },
    Const { value: Tensor<S> },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Neg { a: NodeId },
    Scale { a: NodeId, c: f64 },
    Relu { a: NodeId },
    Sigmoid { a: NodeId },
    Tanh { a: NodeId },
    Exp { a: NodeId },
    Log { a: NodeId },
    Matmul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Conv2d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    MaxPool { x: NodeId, k: usize, stride: usize },
    GlobalAvgPool { x: NodeId },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, mean: NodeId, var: NodeId, eps: f64, momentum: f64 },
    Softmax { a: NodeId, axis: usize },
    L2Normalize { a: NodeId, axis: usize },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    SumAxis { a: NodeId, axis: usize },
    MeanAxis { a: NodeId, axis: usize },
    Reshape { a: NodeId },
    Concat { parts: Vec<NodeId>, axis: usize },
    /// Select rows (axis 0) by index; duplicates allowed, gradient scatters.
    Gather { a: NodeId, indices: Vec<usize> },
    /// Extract column `col` of a rank-2 tensor as a rank-1 tensor.
    Col { a: NodeId, col: usize },
    /// Softmax over a rank-1 tensor with f64 reductions, so the result is
    /// independent of element order at f32 precision.
    BagSoftmax { a: NodeId },
    /// `pooled[j] = sum_i a[i] * h[i][j]` with f64 accumulation; `[1, D]`.
    AttnPool { a: NodeId, h: NodeId },
    SigmoidBce { logits: NodeId, targets: Tensor<S> },
    SoftmaxCe { logits: NodeId, targets: Vec<usize> },
    InfoNce { q: NodeId, k_pos: Tensor<S>, queue: Tensor<S>, tau: f64 },
}

#[derive(Debug, Clone)]
enum Aux<S: Scalar> {
    None,
    Argmax(Vec<usize>),
    Bn { xhat: Vec<S>, var: Vec<S>, train: bool },
    Probs(Vec<S>),
}

#[derive(Debug)]
struct Node<S: Scalar> {
    op: Op<S>,
    shape: Vec<usize>,
    needs_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    values: Vec<Option<Tensor<S>>>,
    aux: Vec<Aux<S>>,
    grads: Vec<Option<Vec<S>>>,
    bindings: BTreeMap<String, Tensor<S>>,
    params: Vec<(String, NodeId)>,
    outputs: Vec<(String, NodeId)>,
    executed: bool,
    /// (buffer name, new value) pairs produced by the last Train forward.
    buffer_updates: Vec<(String, Tensor<S>)>,
    /// Count of zero vectors hit by L2Normalize in the last forward.
    zero_norm_count: usize,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            values: Vec::new(),
            aux: Vec::new(),
            grads: Vec::new(),
            bindings: BTreeMap::new(),
            params: Vec::new(),
            outputs: Vec::new(),
            executed: false,
            buffer_updates: Vec::new(),
            zero_norm_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op<S>, shape: Vec<usize>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, shape, needs_grad });
        self.values.push(None);
        self.aux.push(Aux::None);
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // -- sources ------------------------------------------------------------

    /// Declare a named input placeholder. Values are bound at forward time.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(Op::Input { name: name.to_string() }, shape.to_vec(), false)
    }

    /// Declare an input that participates in differentiation.
    pub fn input_with_grad(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(Op::Input { name: name.to_string() }, shape.to_vec(), true)
    }

    /// Bind a trainable parameter. Its value may be replaced with
    /// [`Graph::rebind`] between forwards.
    pub fn param(&mut self, name: &str, value: &Tensor<S>) -> NodeId {
        let shape = value.shape().to_vec();
        self.bindings.insert(name.to_string(), value.clone());
        let id = self.push(Op::Param { name: name.to_string() }, shape, true);
        self.params.push((name.to_string(), id));
        id
    }

    /// Bind a non-trainable named value (e.g. batch-norm running stats).
    pub fn buffer(&mut self, name: &str, value: &Tensor<S>) -> NodeId {
        let shape = value.shape().to_vec();
        self.bindings.insert(name.to_string(), value.clone());
        self.push(Op::Buffer { name: name.to_string() }, shape, false)
    }

    /// Embed a constant tensor.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const { value }, shape, false)
    }

    /// Replace the bound value of a param/buffer (shape must match).
    pub fn rebind(&mut self, name: &str, value: &Tensor<S>) -> Result<()> {
        match self.bindings.get_mut(name) {
            None => Err(Error::Graph(format!("no bound value named '{name}'"))),
            Some(slot) => {
                if slot.shape() != value.shape() {
                    return Err(Error::shape(format!(
                        "rebind '{name}': expected {:?}, got {:?}",
                        slot.shape(),
                        value.shape()
                    )));
                }
                *slot = value.clone();
                Ok(())
            }
        }
    }

    pub fn bound_value(&self, name: &str) -> Option<&Tensor<S>> {
        self.bindings.get(name)
    }

    /// Names and node ids of all bound trainable parameters, in bind order.
    pub fn param_nodes(&self) -> &[(String, NodeId)] {
        &self.params
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.push((name.to_string(), id));
    }

    // -- op builders ----------------------------------------------------------

    fn binary_broadcast(&mut self, a: NodeId, b: NodeId, make: impl Fn(NodeId, NodeId) -> Op<S>) -> Result<NodeId> {
        let next = self.nodes.len();
        let out_shape = k::broadcast_shape(&self.nodes[a.0].shape, &self.nodes[b.0].shape)
            .ok_or_else(|| {
                Error::shape_at(
                    next,
                    format!(
                        "cannot broadcast {:?} with {:?}",
                        self.nodes[a.0].shape, self.nodes[b.0].shape
                    ),
                )
            })?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(make(a, b), out_shape, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_broadcast(a, b, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_broadcast(a, b, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_broadcast(a, b, |a, b| Op::Mul { a, b })
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(Op::Neg { a }, shape, ng)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(Op::Scale { a, c }, shape, ng)
    }

    fn unary(&mut self, a: NodeId, make: impl Fn(NodeId) -> Op<S>) -> NodeId {
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(make(a), shape, ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |a| Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |a| Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |a| Op::Tanh { a })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |a| Op::Exp { a })
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |a| Op::Log { a })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let next = self.nodes.len();
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape_at(next, format!("matmul {sa:?} x {sb:?}")));
        }
        let shape = vec![sa[0], sb[1]];
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul { a, b }, shape, ng))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let next = self.nodes.len();
        let sa = &self.nodes[a.0].shape;
        if sa.len() != 2 {
            return Err(Error::shape_at(next, format!("transpose of rank-{} tensor", sa.len())));
        }
        let shape = vec![sa[1], sa[0]];
        let ng = self.needs(a);
        Ok(self.push(Op::Transpose { a }, shape, ng))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let next = self.nodes.len();
        let (sx, sw) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape_at(next, format!("conv2d input {sx:?} weight {sw:?}")));
        }
        let dims =
            k::Conv2dDims::infer(sx[0], sx[1], sx[2], sx[3], sw[0], sw[2], sw[3], stride, pad)
                .ok_or_else(|| {
                    Error::shape_at(next, format!("conv2d {sx:?} w {sw:?} stride {stride} pad {pad}"))
                })?;
        let shape = vec![dims.batch, dims.out_c, dims.out_h, dims.out_w];
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(Op::Conv2d { x, w, stride, pad }, shape, ng))
    }

    pub fn max_pool(&mut self, x: NodeId, ksize: usize, stride: usize) -> Result<NodeId> {
        let next = self.nodes.len();
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 4 || sx[2] < ksize || sx[3] < ksize || stride == 0 {
            return Err(Error::shape_at(next, format!("max_pool {sx:?} k {ksize} stride {stride}")));
        }
        let oh = (sx[2] - ksize) / stride + 1;
        let ow = (sx[3] - ksize) / stride + 1;
        let shape = vec![sx[0], sx[1], oh, ow];
        let ng = self.needs(x);
        Ok(self.push(Op::MaxPool { x, k: ksize, stride }, shape, ng))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let next = self.nodes.len();
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 4 {
            return Err(Error::shape_at(next, format!("global_avg_pool of {sx:?}")));
        }
        let shape = vec![sx[0], sx[1]];
        let ng = self.needs(x);
        Ok(self.push(Op::GlobalAvgPool { x }, shape, ng))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: NodeId,
        var: NodeId,
        eps: f64,
        momentum: f64,
    ) -> Result<NodeId> {
        let next = self.nodes.len();
        let sx = self.nodes[x.0].shape.clone();
        if sx.len() != 4 {
            return Err(Error::shape_at(next, format!("batch_norm input {sx:?}")));
        }
        let c = sx[1];
        for (label, id) in [("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)] {
            if self.nodes[id.0].shape != [c] {
                return Err(Error::shape_at(
                    next,
                    format!("batch_norm {label} shape {:?}, want [{c}]", self.nodes[id.0].shape),
                ));
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Op::BatchNorm { x, gamma, beta, mean, var, eps, momentum }, sx, ng))
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let next = self.nodes.len();
        let sa = self.nodes[a.0].shape.clone();
        if axis >= sa.len() {
            return Err(Error::shape_at(next, format!("softmax axis {axis} of {sa:?}")));
        }
        let ng = self.needs(a);
        Ok(self.push(Op::Softmax { a, axis }, sa, ng))
    }

    pub fn l2_normalize(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let next = self.nodes.len();
        let sa = self.nodes[a.0].shape.clone();
        if axis >= sa.len() {
            return Err(Error::shape_at(next, format!("l2_normalize axis {axis} of {sa:?}")));
        }
        let ng = self.needs(a);
        Ok(self.push(Op::L2Normalize { a, axis }, sa, ng))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let ng = self.needs(a);
        self.push(Op::SumAll { a }, vec![1], ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let ng = self.needs(a);
        self.push(Op::MeanAll { a }, vec![1], ng)
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let next = self.nodes.len();
        let sa = self.nodes[a.0].shape.clone();
        if axis >= sa.len() {
            return Err(Error::shape_at(next, format!("sum axis {axis} of {sa:?}")));
        }
        let mut shape: Vec<usize> = sa.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = self.needs(a);
        Ok(self.push(Op::SumAxis { a, axis }, shape, ng))
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let next = self.nodes.len();
        let sa = self.nodes[a.0].shape.clone();
        if axis >= sa.len() {
            return Err(Error::shape_at(next, format!("mean axis {axis} of {sa:?}")));
        }
        let mut shape: Vec<usize> = sa.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = self.needs(a);
        Ok(self.push(Op::MeanAxis { a, axis }, shape, ng))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let next = self.nodes.len();
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].shape.iter().product::<usize>() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape_at(
                next,
                format!("reshape {:?} -> {shape:?}", self.nodes[a.0].shape),
            ));
        }
        let ng = self.needs(a);
        Ok(self.push(Op::Reshape { a }, shape.to_vec(), ng))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let next = self.nodes.len();
        if parts.is_empty() {
            return Err(Error::shape_at(next, "concat of zero tensors".to_string()));
        }
        let first = self.nodes[parts[0].0].shape.clone();
        if axis >= first.len() {
            return Err(Error::shape_at(next, format!("concat axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let sp = &self.nodes[p.0].shape;
            if sp.len() != first.len()
                || sp.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape_at(next, format!("concat {sp:?} with {first:?}")));
            }
            total += sp[axis];
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::Concat { parts: parts.to_vec(), axis }, shape, ng))
    }

    /// Select rows along axis 0 (or elements of a rank-1 tensor).
    pub fn gather(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let next = self.nodes.len();
        let sa = self.nodes[a.0].shape.clone();
        if indices.is_empty() || indices.iter().any(|&i| i >= sa[0]) {
            return Err(Error::shape_at(next, format!("gather indices out of range for {sa:?}")));
        }
        let mut shape = sa;
        shape[0] = indices.len();
        let ng = self.needs(a);
        Ok(self.push(Op::Gather { a, indices: indices.to_vec() }, shape, ng))
    }

    /// Extract column `col` of a rank-2 tensor.
    pub fn col(&mut self, a: NodeId, col: usize) -> Result<NodeId> {
        let next = self.nodes.len();
        let sa = self.nodes[a.0].shape.clone();
        if sa.len() != 2 || col >= sa[1] {
            return Err(Error::shape_at(next, format!("column {col} of {sa:?}")));
        }
        let ng = self.needs(a);
        Ok(self.push(Op::Col { a, col }, vec![sa[0]], ng))
    }

    /// Order-independent softmax over a rank-1 tensor (bag attention).
    pub fn bag_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let next = self.nodes.len();
        let sa = self.nodes[a.0].shape.clone();
        if sa.len() != 1 {
            return Err(Error::shape_at(next, format!("bag_softmax of {sa:?}")));
        }
        let ng = self.needs(a);
        Ok(self.push(Op::BagSoftmax { a }, sa, ng))
    }

    /// Attention-weighted sum of rows: `a [N]` against `h [N, D]` -> `[1, D]`.
    pub fn attn_pool(&mut self, a: NodeId, h: NodeId) -> Result<NodeId> {
        let next = self.nodes.len();
        let (sa, sh) = (&self.nodes[a.0].shape, &self.nodes[h.0].shape);
        if sa.len() != 1 || sh.len() != 2 || sa[0] != sh[0] {
            return Err(Error::shape_at(next, format!("attn_pool {sa:?} with {sh:?}")));
        }
        let shape = vec![1, sh[1]];
        let ng = self.needs(a) || self.needs(h);
        Ok(self.push(Op::AttnPool { a, h }, shape, ng))
    }

    /// Mean binary cross-entropy with logits. `targets` must match the
    /// logits' shape elementwise with values in [0, 1].
    pub fn sigmoid_bce(&mut self, logits: NodeId, targets: Tensor<S>) -> Result<NodeId> {
        let next = self.nodes.len();
        if targets.shape() != self.nodes[logits.0].shape {
            return Err(Error::shape_at(
                next,
                format!("bce targets {:?} vs logits {:?}", targets.shape(), self.nodes[logits.0].shape),
            ));
        }
        let ng = self.needs(logits);
        Ok(self.push(Op::SigmoidBce { logits, targets }, vec![1], ng))
    }

    /// Mean categorical cross-entropy with logits over rows of `[B,C]`.
    pub fn softmax_ce(&mut self, logits: NodeId, targets: Vec<usize>) -> Result<NodeId> {
        let next = self.nodes.len();
        let sl = self.nodes[logits.0].shape.clone();
        if sl.len() != 2 || targets.len() != sl[0] || targets.iter().any(|&t| t >= sl[1]) {
            return Err(Error::shape_at(next, format!("softmax_ce logits {sl:?}, {} targets", targets.len())));
        }
        let ng = self.needs(logits);
        Ok(self.push(Op::SoftmaxCe { logits, targets }, vec![1], ng))
    }

    /// InfoNCE loss over L2-normalized embeddings: positives on the diagonal
    /// of `q . k_pos`, negatives from `queue`. Gradients flow only to `q`.
    pub fn info_nce(&mut self, q: NodeId, k_pos: Tensor<S>, queue: Tensor<S>, tau: f64) -> Result<NodeId> {
        let next = self.nodes.len();
        let sq = self.nodes[q.0].shape.clone();
        if sq.len() != 2 || k_pos.shape() != sq || queue.rank() != 2 || queue.shape()[1] != sq[1] {
            return Err(Error::shape_at(
                next,
                format!("info_nce q {sq:?}, k {:?}, queue {:?}", k_pos.shape(), queue.shape()),
            ));
        }
        if tau <= 0.0 {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        check_rows_normalized(&k_pos, "info_nce positive keys")?;
        check_rows_normalized(&queue, "info_nce queue")?;
        let ng = self.needs(q);
        Ok(self.push(Op::InfoNce { q, k_pos, queue, tau }, vec![1], ng))
    }

    // -- execution ------------------------------------------------------------

    /// Run the tape. `inputs` bind declared input placeholders by name.
    pub fn forward(&mut self, inputs: &[(&str, &Tensor<S>)], bn: BnMode) -> Result<()> {
        let mut given: BTreeMap<&str, &Tensor<S>> = BTreeMap::new();
        let mut declared: BTreeMap<&str, NodeId> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Input { name } = &node.op {
                declared.insert(name.as_str(), NodeId(i));
            }
        }
        for &(name, tensor) in inputs {
            let id = declared
                .get(name)
                .ok_or_else(|| Error::Graph(format!("unknown input name '{name}'")))?;
            if tensor.shape() != self.nodes[id.0].shape {
                return Err(Error::shape_at(
                    id.0,
                    format!("input '{name}': declared {:?}, got {:?}", self.nodes[id.0].shape, tensor.shape()),
                ));
            }
            given.insert(name, tensor);
        }
        for (name, _) in &declared {
            if !given.contains_key(name) {
                return Err(Error::Graph(format!("input '{name}' not bound")));
            }
        }

        self.buffer_updates.clear();
        self.zero_norm_count = 0;

        for i in 0..self.nodes.len() {
            let value = self.eval_node(i, &given, bn)?;
            self.values[i] = Some(value);
        }
        self.executed = true;
        Ok(())
    }

    fn val(&self, id: NodeId) -> &Tensor<S> {
        self.values[id.0].as_ref().expect("value not computed")
    }

    fn eval_node(&mut self, i: usize, given: &BTreeMap<&str, &Tensor<S>>, bn: BnMode) -> Result<Tensor<S>> {
        let shape = self.nodes[i].shape.clone();
        let op = &self.nodes[i].op;
        let t = match op {
            Op::Input { name } => (*given[name.as_str()]).clone(),
            Op::Param { name } | Op::Buffer { name } => self.bindings[name].clone(),
            Op::Const { value } => value.clone(),
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let data = match op {
                    Op::Add { .. } => k::broadcast_binary(va.data(), va.shape(), vb.data(), vb.shape(), &shape, |x, y| x + y),
                    Op::Sub { .. } => k::broadcast_binary(va.data(), va.shape(), vb.data(), vb.shape(), &shape, |x, y| x - y),
                    _ => k::broadcast_binary(va.data(), va.shape(), vb.data(), vb.shape(), &shape, |x, y| x * y),
                };
                Tensor::new(shape, data)?
            }
            Op::Neg { a } => self.val(*a).map(|v| -v),
            Op::Scale { a, c } => {
                let c = S::from_f64(*c);
                self.val(*a).map(|v| v * c)
            }
            Op::Relu { a } => self.val(*a).map(|v| v.maximum(S::ZERO)),
            Op::Sigmoid { a } => self.val(*a).map(k::sigmoid_s),
            Op::Tanh { a } => self.val(*a).map(|v| v.tanh()),
            Op::Exp { a } => self.val(*a).map(|v| v.exp()),
            Op::Log { a } => self.val(*a).map(|v| v.ln()),
            Op::Matmul { a, b } => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let (m, kk, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                Tensor::new(shape, k::matmul(va.data(), vb.data(), m, kk, n))?
            }
            Op::Transpose { a } => {
                let va = self.val(*a);
                let (r, c) = (va.shape()[0], va.shape()[1]);
                Tensor::new(shape, k::transpose(va.data(), r, c))?
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (vx, vw) = (self.val(*x), self.val(*w));
                let sx = vx.shape();
                let sw = vw.shape();
                let dims = k::Conv2dDims::infer(sx[0], sx[1], sx[2], sx[3], sw[0], sw[2], sw[3], *stride, *pad)
                    .expect("validated at build");
                Tensor::new(shape, k::conv2d_forward(vx.data(), vw.data(), &dims))?
            }
            Op::MaxPool { x, k: ksize, stride } => {
                let vx = self.val(*x);
                let sx = vx.shape();
                let (out, arg, _, _) =
                    k::maxpool2d_forward(vx.data(), sx[0], sx[1], sx[2], sx[3], *ksize, *stride);
                self.aux[i] = Aux::Argmax(arg);
                Tensor::new(shape, out)?
            }
            Op::GlobalAvgPool { x } => {
                let vx = self.val(*x);
                let sx = vx.shape();
                Tensor::new(shape, k::global_avg_pool(vx.data(), sx[0], sx[1], sx[2] * sx[3]))?
            }
            Op::BatchNorm { x, gamma, beta, mean, var, eps, momentum } => {
                let (eps, momentum) = (*eps, *momentum);
                let vx = self.val(*x);
                let sx = vx.shape().to_vec();
                let (b, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                let vgamma = self.val(*gamma).data().to_vec();
                let vbeta = self.val(*beta).data().to_vec();
                let train = bn != BnMode::Eval;
                let (use_mean, use_var) = if train {
                    k::bn_batch_stats(vx.data(), b, c, hw)
                } else {
                    (self.val(*mean).data().to_vec(), self.val(*var).data().to_vec())
                };
                let (y, xhat) = k::bn_apply(vx.data(), b, c, hw, &use_mean, &use_var, &vgamma, &vbeta, eps);
                if bn == BnMode::Train {
                    // unbiased variance for the running estimate
                    let n = (b * hw) as f64;
                    let bessel = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                    let (mean_name, var_name) = match (&self.nodes[mean.0].op, &self.nodes[var.0].op) {
                        (Op::Buffer { name: mn }, Op::Buffer { name: vn }) => (mn.clone(), vn.clone()),
                        _ => (String::new(), String::new()),
                    };
                    if !mean_name.is_empty() {
                        let old_m = self.bindings[&mean_name].data();
                        let old_v = self.bindings[&var_name].data();
                        let mom = S::from_f64(momentum);
                        let one_m = S::from_f64(1.0 - momentum);
                        let new_m: Vec<S> = old_m.iter().zip(&use_mean).map(|(&o, &u)| one_m * o + mom * u).collect();
                        let new_v: Vec<S> = old_v
                            .iter()
                            .zip(&use_var)
                            .map(|(&o, &u)| one_m * o + mom * (u * S::from_f64(bessel)))
                            .collect();
                        self.buffer_updates.push((mean_name, Tensor::new(vec![c], new_m)?));
                        self.buffer_updates.push((var_name, Tensor::new(vec![c], new_v)?));
                    }
                }
                self.aux[i] = Aux::Bn { xhat, var: use_var, train };
                Tensor::new(shape, y)?
            }
            Op::Softmax { a, axis } => {
                let va = self.val(*a);
                Tensor::new(shape, k::softmax_axis(va.data(), va.shape(), *axis))?
            }
            Op::L2Normalize { a, axis } => {
                let va = self.val(*a);
                let (y, zeros) = k::l2_normalize_axis(va.data(), va.shape(), *axis);
                self.zero_norm_count += zeros;
                Tensor::new(shape, y)?
            }
            Op::SumAll { a } => {
                let mut acc = S::ZERO;
                for &v in self.val(*a).data() {
                    acc = acc + v;
                }
                Tensor::scalar(acc)
            }
            Op::MeanAll { a } => {
                let va = self.val(*a);
                let mut acc = S::ZERO;
                for &v in va.data() {
                    acc = acc + v;
                }
                Tensor::scalar(acc * S::from_f64(1.0 / va.numel() as f64))
            }
            Op::SumAxis { a, axis } => {
                let va = self.val(*a);
                Tensor::new(shape, k::sum_axis(va.data(), va.shape(), *axis))?
            }
            Op::MeanAxis { a, axis } => {
                let va = self.val(*a);
                let len = va.shape()[*axis] as f64;
                let mut data = k::sum_axis(va.data(), va.shape(), *axis);
                let inv = S::from_f64(1.0 / len);
                for v in &mut data {
                    *v = *v * inv;
                }
                Tensor::new(shape, data)?
            }
            Op::Reshape { a } => Tensor::new(shape, self.val(*a).data().to_vec())?,
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let tensors: Vec<&Tensor<S>> = parts.iter().map(|&p| self.val(p)).collect();
                let (outer, _, inner) = k::axis_split(&shape, axis);
                let mut data = Vec::with_capacity(shape.iter().product());
                for o in 0..outer {
                    for t in &tensors {
                        let len = t.shape()[axis];
                        let start = o * len * inner;
                        data.extend_from_slice(&t.data()[start..start + len * inner]);
                    }
                }
                Tensor::new(shape, data)?
            }
            Op::Gather { a, indices } => {
                let va = self.val(*a);
                let row: usize = va.shape()[1..].iter().product();
                let mut data = Vec::with_capacity(indices.len() * row);
                for &idx in indices {
                    data.extend_from_slice(&va.data()[idx * row..(idx + 1) * row]);
                }
                Tensor::new(shape, data)?
            }
            Op::Col { a, col } => {
                let va = self.val(*a);
                let (n, c) = (va.shape()[0], va.shape()[1]);
                let data: Vec<S> = (0..n).map(|r| va.data()[r * c + col]).collect();
                Tensor::new(shape, data)?
            }
            Op::BagSoftmax { a } => {
                let va = self.val(*a);
                let mut mx = f64::NEG_INFINITY;
                for &v in va.data() {
                    mx = mx.max(v.to_f64());
                }
                let exps: Vec<f64> = va.data().iter().map(|&v| (v.to_f64() - mx).exp()).collect();
                let denom: f64 = exps.iter().sum();
                let data: Vec<S> = exps.iter().map(|&e| S::from_f64(e / denom)).collect();
                Tensor::new(shape, data)?
            }
            Op::AttnPool { a, h } => {
                let (va, vh) = (self.val(*a), self.val(*h));
                let (n, d) = (vh.shape()[0], vh.shape()[1]);
                let mut acc = vec![0.0f64; d];
                for i in 0..n {
                    let w = va.data()[i].to_f64();
                    for j in 0..d {
                        acc[j] += w * vh.data()[i * d + j].to_f64();
                    }
                }
                let data: Vec<S> = acc.iter().map(|&v| S::from_f64(v)).collect();
                Tensor::new(shape, data)?
            }
            Op::SigmoidBce { logits, targets } => {
                let z = self.val(*logits);
                let mut acc = S::ZERO;
                for (&zv, &tv) in z.data().iter().zip(targets.data()) {
                    // max(z,0) - z*t + ln(1 + exp(-|z|))
                    let term = zv.maximum(S::ZERO) - zv * tv + (S::ONE + (-zv.abs()).exp()).ln();
                    acc = acc + term;
                }
                Tensor::scalar(acc * S::from_f64(1.0 / z.numel() as f64))
            }
            Op::SoftmaxCe { logits, targets } => {
                let z = self.val(*logits);
                let probs = k::softmax_axis(z.data(), z.shape(), 1);
                let c = z.shape()[1];
                let mut acc = S::ZERO;
                for (r, &t) in targets.iter().enumerate() {
                    acc = acc - probs[r * c + t].ln();
                }
                self.aux[i] = Aux::Probs(probs);
                Tensor::scalar(acc * S::from_f64(1.0 / targets.len() as f64))
            }
            Op::InfoNce { q, k_pos, queue, tau } => {
                let vq = self.val(*q).clone();
                check_rows_normalized(&vq, "info_nce queries")?;
                let (b, d) = (vq.shape()[0], vq.shape()[1]);
                let kn = queue.shape()[0];
                let inv_tau = S::from_f64(1.0 / tau);
                // logits [B, K+1]: positive first, then queue
                let neg = k::matmul_nt(vq.data(), queue.data(), b, d, kn);
                let mut logits = vec![S::ZERO; b * (kn + 1)];
                for r in 0..b {
                    let mut pos = S::ZERO;
                    for j in 0..d {
                        pos = pos + vq.data()[r * d + j] * k_pos.data()[r * d + j];
                    }
                    logits[r * (kn + 1)] = pos * inv_tau;
                    for c in 0..kn {
                        logits[r * (kn + 1) + 1 + c] = neg[r * kn + c] * inv_tau;
                    }
                }
                let probs = k::softmax_axis(&logits, &[b, kn + 1], 1);
                let mut acc = S::ZERO;
                for r in 0..b {
                    acc = acc - probs[r * (kn + 1)].ln();
                }
                self.aux[i] = Aux::Probs(probs);
                Tensor::scalar(acc * S::from_f64(1.0 / b as f64))
            }
        };
        Ok(t)
    }

    /// Execute only nodes appended since the last `forward`, keeping earlier
    /// activations. Bindings and inputs must be unchanged.
    pub fn forward_extend(&mut self, bn: BnMode) -> Result<()> {
        if !self.executed {
            return Err(Error::Graph("forward_extend requires a prior forward".into()));
        }
        let empty: BTreeMap<&str, &Tensor<S>> = BTreeMap::new();
        for i in 0..self.nodes.len() {
            if self.values[i].is_none() {
                if matches!(self.nodes[i].op, Op::Input { .. }) {
                    return Err(Error::Graph("new inputs need a full forward".into()));
                }
                let value = self.eval_node(i, &empty, bn)?;
                self.values[i] = Some(value);
            }
        }
        Ok(())
    }

    /// Value of a node after `forward`.
    pub fn value(&self, id: NodeId) -> Result<&Tensor<S>> {
        if !self.executed {
            return Err(Error::Graph("forward has not been run".into()));
        }
        self.values[id.0].as_ref().ok_or_else(|| Error::Graph("value missing".into()))
    }

    /// Marked outputs by name after `forward`.
    pub fn output_values(&self) -> Result<BTreeMap<String, Tensor<S>>> {
        let mut map = BTreeMap::new();
        for (name, id) in &self.outputs {
            map.insert(name.clone(), self.value(*id)?.clone());
        }
        Ok(map)
    }

    /// Buffer updates (e.g. batch-norm running stats) produced by the last
    /// Train-mode forward.
    pub fn buffer_updates(&self) -> &[(String, Tensor<S>)] {
        &self.buffer_updates
    }

    /// Zero-vector count hit by L2 normalization in the last forward.
    pub fn zero_norm_count(&self) -> usize {
        self.zero_norm_count
    }

    /// Reverse pass from a scalar loss node. Returns gradients for every
    /// bound parameter (zero tensors for params the loss does not reach).
    pub fn backward(&mut self, loss: NodeId) -> Result<BTreeMap<String, Tensor<S>>> {
        if !self.executed {
            return Err(Error::Graph("forward must run before backward".into()));
        }
        if self.val(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "loss must be scalar, node {} has {} elements",
                loss.0,
                self.val(loss).numel()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![S::ONE]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else { continue };
            self.backprop_node(i, &gout)?;
            // keep the grad available for inspection
            self.grads[i] = Some(gout);
        }

        let mut out = BTreeMap::new();
        for (name, id) in &self.params {
            let grad = match &self.grads[id.0] {
                Some(g) => Tensor::new(self.nodes[id.0].shape.clone(), g.clone())?,
                None => Tensor::zeros(&self.nodes[id.0].shape),
            };
            out.insert(name.clone(), grad);
        }
        Ok(out)
    }

    /// Gradient of any node after `backward` (None if unreached).
    pub fn node_grad(&self, id: NodeId) -> Option<Tensor<S>> {
        self.grads[id.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[id.0].shape.clone(), g.clone()).expect("grad shape"))
    }

    fn accumulate(&mut self, id: NodeId, grad: Vec<S>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(existing) => {
                for (e, g) in existing.iter_mut().zip(&grad) {
                    *e = *e + *g;
                }
            }
            slot @ None => *slot = Some(grad),
        }
    }

    fn backprop_node(&mut self, i: usize, gout: &[S]) -> Result<()> {
        let op = self.nodes[i].op.clone();
        let out_shape = self.nodes[i].shape.clone();
        match op {
            Op::Input { .. } | Op::Param { .. } | Op::Buffer { .. } | Op::Const { .. } => {}
            Op::Add { a, b } => {
                let ga = k::reduce_broadcast(gout, &out_shape, &self.nodes[a.0].shape.clone());
                let gb = k::reduce_broadcast(gout, &out_shape, &self.nodes[b.0].shape.clone());
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Sub { a, b } => {
                let ga = k::reduce_broadcast(gout, &out_shape, &self.nodes[a.0].shape.clone());
                let neg: Vec<S> = gout.iter().map(|&g| -g).collect();
                let gb = k::reduce_broadcast(&neg, &out_shape, &self.nodes[b.0].shape.clone());
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.val(a).clone(), self.val(b).clone());
                let ga_full = k::broadcast_binary(gout, &out_shape, vb.data(), vb.shape(), &out_shape, |g, y| g * y);
                let gb_full = k::broadcast_binary(gout, &out_shape, va.data(), va.shape(), &out_shape, |g, x| g * x);
                let ga = k::reduce_broadcast(&ga_full, &out_shape, va.shape());
                let gb = k::reduce_broadcast(&gb_full, &out_shape, vb.shape());
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Neg { a } => {
                self.accumulate(a, gout.iter().map(|&g| -g).collect());
            }
            Op::Scale { a, c } => {
                let c = S::from_f64(c);
                self.accumulate(a, gout.iter().map(|&g| g * c).collect());
            }
            Op::Relu { a } => {
                let va = self.val(a).clone();
                let g: Vec<S> = gout
                    .iter()
                    .zip(va.data())
                    .map(|(&g, &x)| if x > S::ZERO { g } else { S::ZERO })
                    .collect();
                self.accumulate(a, g);
            }
            Op::Sigmoid { a } => {
                let y = self.values[i].as_ref().unwrap().clone();
                let g: Vec<S> = gout.iter().zip(y.data()).map(|(&g, &y)| g * y * (S::ONE - y)).collect();
                self.accumulate(a, g);
            }
            Op::Tanh { a } => {
                let y = self.values[i].as_ref().unwrap().clone();
                let g: Vec<S> = gout.iter().zip(y.data()).map(|(&g, &y)| g * (S::ONE - y * y)).collect();
                self.accumulate(a, g);
            }
            Op::Exp { a } => {
                let y = self.values[i].as_ref().unwrap().clone();
                let g: Vec<S> = gout.iter().zip(y.data()).map(|(&g, &y)| g * y).collect();
                self.accumulate(a, g);
            }
            Op::Log { a } => {
                let va = self.val(a).clone();
                let g: Vec<S> = gout.iter().zip(va.data()).map(|(&g, &x)| g / x).collect();
                self.accumulate(a, g);
            }
            Op::Matmul { a, b } => {
                let (va, vb) = (self.val(a).clone(), self.val(b).clone());
                let (m, kk) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.nodes[a.0].needs_grad {
                    let ga = k::matmul_nt(gout, vb.data(), m, n, kk);
                    self.accumulate(a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = k::matmul_tn(va.data(), gout, m, kk, n);
                    self.accumulate(b, gb);
                }
            }
            Op::Transpose { a } => {
                let (r, c) = (out_shape[0], out_shape[1]);
                self.accumulate(a, k::transpose(gout, r, c));
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (vx, vw) = (self.val(x).clone(), self.val(w).clone());
                let sx = vx.shape();
                let sw = vw.shape();
                let dims = k::Conv2dDims::infer(sx[0], sx[1], sx[2], sx[3], sw[0], sw[2], sw[3], stride, pad).unwrap();
                let (dx, dw) = k::conv2d_backward(vx.data(), vw.data(), gout, &dims);
                self.accumulate(x, dx);
                self.accumulate(w, dw);
            }
            Op::MaxPool { x, .. } => {
                let Aux::Argmax(arg) = &self.aux[i] else { unreachable!() };
                let arg = arg.clone();
                let x_len = self.val(x).numel();
                self.accumulate(x, k::maxpool2d_backward(gout, &arg, x_len));
            }
            Op::GlobalAvgPool { x } => {
                let sx = self.val(x).shape().to_vec();
                self.accumulate(x, k::global_avg_pool_backward(gout, sx[0], sx[1], sx[2] * sx[3]));
            }
            Op::BatchNorm { x, gamma, beta, eps, .. } => {
                let Aux::Bn { xhat, var, train } = &self.aux[i] else { unreachable!() };
                let (xhat, var, train) = (xhat.clone(), var.clone(), *train);
                let sx = self.val(x).shape().to_vec();
                let (b, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                let vgamma = self.val(gamma).data().to_vec();
                let (dx, dgamma, dbeta) = if train {
                    k::bn_backward_train(gout, &xhat, &var, &vgamma, b, c, hw, eps)
                } else {
                    k::bn_backward_eval(gout, &xhat, &var, &vgamma, b, c, hw, eps)
                };
                self.accumulate(x, dx);
                self.accumulate(gamma, dgamma);
                self.accumulate(beta, dbeta);
            }
            Op::Softmax { a, axis } => {
                let y = self.values[i].as_ref().unwrap().clone();
                self.accumulate(a, k::softmax_backward(y.data(), gout, &out_shape, axis));
            }
            Op::L2Normalize { a, axis } => {
                let va = self.val(a).clone();
                let y = self.values[i].as_ref().unwrap().clone();
                self.accumulate(a, k::l2_normalize_backward(va.data(), y.data(), gout, va.shape(), axis));
            }
            Op::SumAll { a } => {
                let n = self.val(a).numel();
                self.accumulate(a, vec![gout[0]; n]);
            }
            Op::MeanAll { a } => {
                let n = self.val(a).numel();
                let g = gout[0] * S::from_f64(1.0 / n as f64);
                self.accumulate(a, vec![g; n]);
            }
            Op::SumAxis { a, axis } => {
                let sa = self.val(a).shape().to_vec();
                self.accumulate(a, k::spread_axis(gout, &sa, axis, S::ONE));
            }
            Op::MeanAxis { a, axis } => {
                let sa = self.val(a).shape().to_vec();
                let inv = S::from_f64(1.0 / sa[axis] as f64);
                self.accumulate(a, k::spread_axis(gout, &sa, axis, inv));
            }
            Op::Reshape { a } => {
                self.accumulate(a, gout.to_vec());
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = k::axis_split(&out_shape, axis);
                let mut offsets = Vec::with_capacity(parts.len());
                let mut acc = 0;
                for &p in &parts {
                    offsets.push(acc);
                    acc += self.nodes[p.0].shape[axis];
                }
                let total = acc;
                for (pi, &p) in parts.iter().enumerate() {
                    let len = self.nodes[p.0].shape[axis];
                    let mut g = vec![S::ZERO; outer * len * inner];
                    for o in 0..outer {
                        let src = (o * total + offsets[pi]) * inner;
                        let dst = o * len * inner;
                        g[dst..dst + len * inner].copy_from_slice(&gout[src..src + len * inner]);
                    }
                    self.accumulate(p, g);
                }
            }
            Op::Gather { a, indices } => {
                let sa = self.val(a).shape().to_vec();
                let row: usize = sa[1..].iter().product();
                let mut g = vec![S::ZERO; sa.iter().product()];
                for (out_r, &idx) in indices.iter().enumerate() {
                    for j in 0..row {
                        g[idx * row + j] = g[idx * row + j] + gout[out_r * row + j];
                    }
                }
                self.accumulate(a, g);
            }
            Op::Col { a, col } => {
                let sa = self.val(a).shape().to_vec();
                let (n, c) = (sa[0], sa[1]);
                let mut g = vec![S::ZERO; n * c];
                for r in 0..n {
                    g[r * c + col] = gout[r];
                }
                self.accumulate(a, g);
            }
            Op::BagSoftmax { a } => {
                let y = self.values[i].as_ref().unwrap().clone();
                let mut dot = 0.0f64;
                for (&g, &yv) in gout.iter().zip(y.data()) {
                    dot += g.to_f64() * yv.to_f64();
                }
                let g: Vec<S> = gout
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &yv)| S::from_f64(yv.to_f64() * (g.to_f64() - dot)))
                    .collect();
                self.accumulate(a, g);
            }
            Op::AttnPool { a, h } => {
                let (va, vh) = (self.val(a).clone(), self.val(h).clone());
                let (n, d) = (vh.shape()[0], vh.shape()[1]);
                if self.nodes[a.0].needs_grad {
                    let mut da = Vec::with_capacity(n);
                    for i in 0..n {
                        let mut acc = 0.0f64;
                        for j in 0..d {
                            acc += vh.data()[i * d + j].to_f64() * gout[j].to_f64();
                        }
                        da.push(S::from_f64(acc));
                    }
                    self.accumulate(a, da);
                }
                if self.nodes[h.0].needs_grad {
                    let mut dh = vec![S::ZERO; n * d];
                    for i in 0..n {
                        let w = va.data()[i];
                        for j in 0..d {
                            dh[i * d + j] = w * gout[j];
                        }
                    }
                    self.accumulate(h, dh);
                }
            }
            Op::SigmoidBce { logits, targets } => {
                let z = self.val(logits).clone();
                let inv_n = S::from_f64(1.0 / z.numel() as f64);
                let g: Vec<S> = z
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&zv, &tv)| (k::sigmoid_s(zv) - tv) * inv_n * gout[0])
                    .collect();
                self.accumulate(logits, g);
            }
            Op::SoftmaxCe { logits, targets } => {
                let Aux::Probs(probs) = &self.aux[i] else { unreachable!() };
                let c = self.val(logits).shape()[1];
                let inv_b = S::from_f64(1.0 / targets.len() as f64);
                let mut g = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    g[r * c + t] = g[r * c + t] - S::ONE;
                }
                for v in &mut g {
                    *v = *v * inv_b * gout[0];
                }
                self.accumulate(logits, g);
            }
            Op::InfoNce { q, k_pos, queue, tau } => {
                let Aux::Probs(probs) = &self.aux[i] else { unreachable!() };
                let probs = probs.clone();
                let (b, d) = (self.val(q).shape()[0], self.val(q).shape()[1]);
                let kn = queue.shape()[0];
                let scale = S::from_f64(1.0 / (tau * b as f64));
                // dq_r = scale * [ (p0 - 1) k_r + P_neg,r^T queue ]
                let mut g = vec![S::ZERO; b * d];
                for r in 0..b {
                    let p0 = probs[r * (kn + 1)];
                    for j in 0..d {
                        g[r * d + j] = (p0 - S::ONE) * k_pos.data()[r * d + j];
                    }
                    for c in 0..kn {
                        let p = probs[r * (kn + 1) + 1 + c];
                        let qrow = &queue.data()[c * d..(c + 1) * d];
                        for j in 0..d {
                            g[r * d + j] = g[r * d + j] + p * qrow[j];
                        }
                    }
                    for j in 0..d {
                        g[r * d + j] = g[r * d + j] * scale * gout[0];
                    }
                }
                self.accumulate(q, g);
            }
        }
        Ok(())
    }
}

/// Reject matrices whose rows deviate from unit L2 norm by more than 1e-3.
fn check_rows_normalized<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<()> {
    let d = *t.shape().last().unwrap();
    for (r, row) in t.data().chunks(d).enumerate() {
        let mut sq = S::ZERO;
        for &v in row {
            sq = sq + v * v;
        }
        let norm = sq.sqrt().to_f64();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(Error::Numeric(format!("{what}: row {r} has norm {norm:.6}, expected 1")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_forward() {
        let mut g: Graph<f32> = Graph::new();
        let eye = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = g.input("a", &[2, 2]);
        let y = g.matmul(eye, a).unwrap();
        let at = Tensor::new(vec![2, 2], vec![3.0, 1.0, -2.0, 0.5]).unwrap();
        g.forward(&[("a", &at)], BnMode::Eval).unwrap();
        assert_eq!(g.value(y).unwrap().data(), at.data());
    }

    #[test]
    fn relu_sign_cases() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.input("x", &[3]);
        let y = g.relu(x);
        let xv = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        g.forward(&[("x", &xv)], BnMode::Eval).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn unknown_input_rejected() {
        let mut g: Graph<f32> = Graph::new();
        let _ = g.input("x", &[2]);
        let xv = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = g.forward(&[("y", &xv)], BnMode::Eval).unwrap_err();
        assert!(matches!(err, Error::Graph(_)));
    }

    #[test]
    fn shape_mismatch_carries_node_id() {
        let mut g: Graph<f32> = Graph::new();
        let a = g.input("a", &[2, 3]);
        let b = g.input("b", &[4, 2]);
        let err = g.matmul(a, b).unwrap_err();
        match err {
            Error::Shape { node: Some(id), .. } => assert_eq!(id, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn linear_loss_gradient() {
        // loss = sum(w * x), w=[1,2], x=[3,4] -> dw = [3,4]
        let mut g: Graph<f64> = Graph::new();
        let w = g.param("w", &Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let x = g.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let prod = g.mul(w, x).unwrap();
        let loss = g.sum_all(prod);
        g.forward(&[], BnMode::Eval).unwrap();
        assert_eq!(g.value(loss).unwrap().item(), 11.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["w"].data(), &[3.0, 4.0]);
    }

    #[test]
    fn sigmoid_grad_at_zero() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input_with_grad("x", &[1]);
        let y = g.sigmoid(x);
        let loss = g.sum_all(y);
        g.forward(&[("x", &Tensor::scalar(0.0))], BnMode::Eval).unwrap();
        g.backward(loss).unwrap();
        let gx = g.node_grad(x).unwrap();
        assert!((gx.item() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g: Graph<f64> = Graph::new();
        let w = g.param("w", &Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let y = g.relu(w);
        g.forward(&[], BnMode::Eval).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut g: Graph<f32> = Graph::new();
            let x = g.input("x", &[4, 8]);
            let w = g.param("w", &Tensor::full(&[8, 8], 0.37));
            let h = g.matmul(x, w).unwrap();
            let h = g.tanh(h);
            let out = g.mean_all(h);
            (g, out)
        };
        let xv = Tensor::new(vec![4, 8], (0..32).map(|i| (i as f32) * 0.11 - 1.5).collect()).unwrap();
        let (mut g1, o1) = build();
        let (mut g2, o2) = build();
        g1.forward(&[("x", &xv)], BnMode::Eval).unwrap();
        g2.forward(&[("x", &xv)], BnMode::Eval).unwrap();
        assert_eq!(g1.value(o1).unwrap().data(), g2.value(o2).unwrap().data());
    }

    #[test]
    fn gather_routes_gradient_to_selected_rows() {
        let mut g: Graph<f64> = Graph::new();
        let w = g.param("w", &Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let sel = g.gather(w, &[2, 0]).unwrap();
        let loss = g.sum_all(sel);
        g.forward(&[], BnMode::Eval).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["w"].data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn info_nce_equal_logits_is_ln_k_plus_1() {
        // q.k = q.queue_i = c for all i with K=4 -> loss = ln 5 for any tau
        let d = 4;
        let q_row = vec![0.5f64, 0.5, 0.5, 0.5]; // unit norm
        let mut g: Graph<f64> = Graph::new();
        let q = g.input_with_grad("q", &[1, d]);
        let k_pos = Tensor::new(vec![1, d], q_row.clone()).unwrap();
        let queue = Tensor::new(vec![4, d], [&q_row[..], &q_row[..], &q_row[..], &q_row[..]].concat()).unwrap();
        let loss = g.info_nce(q, k_pos, queue, 0.07).unwrap();
        let qv = Tensor::new(vec![1, d], q_row).unwrap();
        g.forward(&[("q", &qv)], BnMode::Eval).unwrap();
        let got = g.value(loss).unwrap().item();
        assert!((got - 5.0f64.ln()).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn info_nce_hand_case() {
        // q = k+ = [1,0], queue = {[0,1]}, tau = 0.2 -> ln(1 + e^-5)
        let mut g: Graph<f64> = Graph::new();
        let q = g.input_with_grad("q", &[1, 2]);
        let k_pos = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let queue = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let loss = g.info_nce(q, k_pos, queue, 0.2).unwrap();
        let qv = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        g.forward(&[("q", &qv)], BnMode::Eval).unwrap();
        let got = g.value(loss).unwrap().item();
        let want = (1.0 + (-5.0f64).exp()).ln();
        assert!((got - want).abs() < 1e-12, "got {got} want {want}");
    }

    #[test]
    fn info_nce_rejects_unnormalized() {
        let mut g: Graph<f64> = Graph::new();
        let q = g.input("q", &[1, 2]);
        let k_pos = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let queue = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let loss = g.info_nce(q, k_pos, queue, 0.2).unwrap();
        let qv = Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap();
        let err = g.forward(&[("q", &qv)], BnMode::Eval).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        let _ = loss;
    }

    #[test]
    fn softmax_outputs_sum_to_one_along_axis() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input("x", &[3, 5]);
        let y = g.softmax(x, 1).unwrap();
        let xv = Tensor::new(vec![3, 5], (0..15).map(|i| (i as f64) * 0.7 - 4.0).collect()).unwrap();
        g.forward(&[("x", &xv)], BnMode::Eval).unwrap();
        for row in g.value(y).unwrap().data().chunks(5) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
