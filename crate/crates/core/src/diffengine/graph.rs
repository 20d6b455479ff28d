use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use super::tensor::{broadcast_shape, broadcast_to, matmul, sum_to, zip_broadcast, Tensor};
use super::EngineError;

/// Identifier of a node on a [`Graph`]; ids grow in creation order, so the
/// inputs of a node always have smaller ids than the node itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive operations the graph records.
///
/// Binary elementwise kinds (`Add`, `Sub`, `Mul`, `Div`, `Max`, `Min`)
/// broadcast: per axis the two sizes must match or one of them must be 1.
/// Reductions keep rank 2 (`SumRows` gives `[1, C]`, `SumCols` gives `[R, 1]`).
#[derive(Clone, Debug)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    /// Elementwise maximum; ties send the gradient to the first operand.
    Max,
    /// Elementwise minimum; ties send the gradient to the first operand.
    Min,
    Neg,
    Scale(f64),
    Offset(f64),
    MatMul { ta: bool, tb: bool },
    SumAll,
    SumRows,
    SumCols,
    BroadcastTo([usize; 2]),
    Pow(f64),
    Exp,
    Log,
    Sin,
    Cos,
    Sigmoid,
    Softplus(f64),
    Relu,
    Clamp(f64, f64),
    Abs,
    /// Elementwise product with a constant tensor of the same shape.
    MaskMul(Rc<Tensor>),
    /// Column-wise concatenation of any number of inputs with equal rows.
    Concat,
    SliceCols(usize, usize),
    PadCols { start: usize, total: usize },
    Reshape([usize; 2]),
    /// Row-wise exclusive prefix sum: `y[j] = sum_{i<j} x[i]`.
    CumsumExcl,
    /// Row-wise exclusive suffix sum: `y[i] = sum_{j>i} x[j]`.
    RevCumsumExcl,
    IndexRows(Rc<[usize]>),
    /// Scatter-add rows into a zero tensor with the given row count.
    ScatterRows(Rc<[usize]>, usize),
    /// Sum consecutive groups of rows of the given length.
    SegmentSum(usize),
    RepeatRows(usize),
    Detach,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Max => "max",
            OpKind::Min => "min",
            OpKind::Neg => "neg",
            OpKind::Scale(_) => "scale",
            OpKind::Offset(_) => "offset",
            OpKind::MatMul { .. } => "matmul",
            OpKind::SumAll => "sum",
            OpKind::SumRows => "sum_rows",
            OpKind::SumCols => "sum_cols",
            OpKind::BroadcastTo(_) => "broadcast",
            OpKind::Pow(_) => "pow",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sin => "sin",
            OpKind::Cos => "cos",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softplus(_) => "softplus",
            OpKind::Relu => "relu",
            OpKind::Clamp(..) => "clamp",
            OpKind::Abs => "abs",
            OpKind::MaskMul(_) => "mask_mul",
            OpKind::Concat => "concat",
            OpKind::SliceCols(..) => "slice",
            OpKind::PadCols { .. } => "pad",
            OpKind::Reshape(_) => "reshape",
            OpKind::CumsumExcl => "cumsum",
            OpKind::RevCumsumExcl => "rev_cumsum",
            OpKind::IndexRows(_) => "index_rows",
            OpKind::ScatterRows(..) => "scatter_rows",
            OpKind::SegmentSum(_) => "segment_sum",
            OpKind::RepeatRows(_) => "repeat_rows",
            OpKind::Detach => "detach",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Leaf => Some(0),
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => Some(2),
            OpKind::Max | OpKind::Min | OpKind::MatMul { .. } => Some(2),
            OpKind::Concat => None,
            _ => Some(1),
        }
    }
}

struct Node {
    kind: OpKind,
    inputs: Vec<NodeId>,
    value: Rc<Tensor>,
    requires_grad: bool,
    trainable: bool,
}

/// A recorded differentiable computation.
///
/// Values are computed eagerly as nodes are pushed. Gradients are themselves
/// built from graph ops, so a gradient obtained with `create_graph = true`
/// can be differentiated again.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
    non_finite: Cell<Option<NodeId>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the trainable leaves of a graph.
#[derive(Debug, Default, Clone)]
pub struct GradientMap {
    grads: BTreeMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(&var.id)
    }

    pub fn get_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor)> {
        self.grads.iter()
    }
}

/// Handle to a node on a graph.
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id.0, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
            non_finite: Cell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A constant: gradients never flow into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false, false)
    }

    /// A differentiable input, e.g. sample coordinates whose gradient is needed.
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true, false)
    }

    /// A trainable parameter; [`Graph::backward`] reports gradients for these.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true, true)
    }

    pub fn var(&self, id: NodeId) -> Var<'_> {
        assert!(id.0 < self.len(), "node {} not on graph", id.0);
        Var { graph: self, id }
    }

    pub fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id.0].value)
    }

    /// First node whose value contained NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<NodeId> {
        self.non_finite.get()
    }

    pub fn check_finite(&self) -> Result<(), EngineError> {
        match self.non_finite.get() {
            None => Ok(()),
            Some(id) => Err(EngineError::NonFinite {
                op: self.nodes.borrow()[id.0].kind.name(),
                node: id.0,
            }),
        }
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool, trainable: bool) -> Var<'_> {
        self.push_node(OpKind::Leaf, Vec::new(), value, requires_grad, trainable)
    }

    fn push_node(
        &self,
        kind: OpKind,
        inputs: Vec<NodeId>,
        value: Tensor,
        requires_grad: bool,
        trainable: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        if self.non_finite.get().is_none() && !value.is_finite() {
            self.non_finite.set(Some(id));
        }
        nodes.push(Node {
            kind,
            inputs,
            value: Rc::new(value),
            requires_grad,
            trainable,
        });
        Var { graph: self, id }
    }

    /// Checked forward op: validates arity and shapes, and fails when the
    /// result is not finite. The node is recorded either way.
    pub fn apply<'g>(&'g self, kind: OpKind, inputs: &[Var<'g>]) -> Result<Var<'g>, EngineError> {
        for v in inputs {
            if !std::ptr::eq(v.graph, self) {
                return Err(EngineError::ForeignNode);
            }
        }
        if let Some(n) = kind.arity() {
            if n != inputs.len() {
                return Err(EngineError::Arity {
                    op: kind.name(),
                    expected: n,
                    got: inputs.len(),
                });
            }
        }
        let ids: Vec<NodeId> = inputs.iter().map(|v| v.id).collect();
        let values: Vec<Rc<Tensor>> = ids.iter().map(|&i| self.value(i)).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = forward(&kind, &refs)?;
        let finite = out.is_finite();
        let requires = self.recording.get() && ids.iter().any(|&i| self.requires_grad(i));
        let var = self.push_node(kind.clone(), ids, out, requires, false);
        if !finite {
            return Err(EngineError::NonFinite {
                op: kind.name(),
                node: var.id.0,
            });
        }
        Ok(var)
    }

    /// Unchecked-for-finiteness op used by the `Var` helpers; shape errors are
    /// programming errors and panic. Non-finite values poison the graph and
    /// surface through [`Graph::check_finite`].
    fn op<'g>(&'g self, kind: OpKind, inputs: &[Var<'g>]) -> Var<'g> {
        match self.apply(kind, inputs) {
            Ok(v) => v,
            Err(EngineError::NonFinite { node, .. }) => self.var(NodeId(node)),
            Err(e) => panic!("{e}"),
        }
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id.0].requires_grad
    }

    /// Ids of all trainable leaves in creation order.
    pub fn params(&self) -> Vec<NodeId> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .filter(|(_, n)| n.trainable)
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    /// Reverse pass from a scalar `loss` to every trainable leaf.
    pub fn backward(&self, loss: Var<'_>) -> Result<GradientMap, EngineError> {
        let params = self.params();
        let wrt: Vec<Var<'_>> = params.iter().map(|&id| self.var(id)).collect();
        let grads = self.grad(loss, &wrt, false)?;
        let mut map = GradientMap::default();
        for (id, g) in params.into_iter().zip(grads) {
            map.grads.insert(id, (*g.value()).clone());
        }
        Ok(map)
    }

    /// Gradients of a scalar `output` with respect to each of `wrt`.
    ///
    /// With `create_graph` the returned gradients are differentiable nodes;
    /// otherwise they are recorded as constants.
    pub fn grad<'g>(
        &'g self,
        output: Var<'g>,
        wrt: &[Var<'g>],
        create_graph: bool,
    ) -> Result<Vec<Var<'g>>, EngineError> {
        if output.shape() != [1, 1] {
            return Err(EngineError::NotScalar(output.shape()));
        }
        self.grad_with_seed(output, Tensor::scalar(1.0), wrt, create_graph)
    }

    /// Vector-Jacobian product: gradients of `sum(seed * output)`.
    pub fn grad_with_seed<'g>(
        &'g self,
        output: Var<'g>,
        seed: Tensor,
        wrt: &[Var<'g>],
        create_graph: bool,
    ) -> Result<Vec<Var<'g>>, EngineError> {
        if !std::ptr::eq(output.graph, self) || wrt.iter().any(|v| !std::ptr::eq(v.graph, self)) {
            return Err(EngineError::ForeignNode);
        }
        if seed.shape() != output.shape() {
            return Err(EngineError::ShapeMismatch {
                op: "seed",
                lhs: seed.shape(),
                rhs: output.shape(),
            });
        }
        if wrt.is_empty() {
            return Ok(Vec::new());
        }
        let hi = output.id.0;
        let lo = wrt.iter().map(|v| v.id.0).min().unwrap_or(0).min(hi);
        let n = hi - lo + 1;
        let mut is_target = vec![false; n];
        for v in wrt {
            if v.id.0 <= hi {
                is_target[v.id.0 - lo] = true;
            }
        }
        let mut dep = vec![false; n];
        {
            let nodes = self.nodes.borrow();
            for id in lo..=hi {
                let node = &nodes[id];
                dep[id - lo] = is_target[id - lo]
                    || (node.requires_grad
                        && node.inputs.iter().any(|i| i.0 >= lo && dep[i.0 - lo]));
            }
        }
        let prev = self.recording.replace(create_graph && self.recording.get());
        let mut grads: Vec<Option<NodeId>> = vec![None; n];
        if dep[n - 1] {
            grads[n - 1] = Some(self.constant(seed).id);
        }
        for id in (lo..=hi).rev() {
            let Some(g) = grads[id - lo] else { continue };
            if !dep[id - lo] {
                continue;
            }
            let (kind, inputs) = {
                let nodes = self.nodes.borrow();
                (nodes[id].kind.clone(), nodes[id].inputs.clone())
            };
            let need: Vec<bool> = inputs.iter().map(|i| i.0 >= lo && dep[i.0 - lo]).collect();
            if !need.iter().any(|&b| b) {
                continue;
            }
            let contribs = self.vjp(NodeId(id), &kind, &inputs, self.var(g), &need);
            for ((input, c), needed) in inputs.iter().zip(contribs).zip(&need) {
                if !needed {
                    continue;
                }
                if let Some(c) = c {
                    let slot = &mut grads[input.0 - lo];
                    *slot = Some(match *slot {
                        None => c.id,
                        Some(e) => (self.var(e) + c).id,
                    });
                }
            }
        }
        self.recording.set(prev);
        let mut out = Vec::with_capacity(wrt.len());
        for v in wrt {
            let g = if v.id.0 <= hi { grads[v.id.0 - lo] } else { None };
            out.push(match g {
                Some(g) => self.var(g),
                None => {
                    let [r, c] = v.shape();
                    self.constant(Tensor::zeros(r, c))
                }
            });
        }
        Ok(out)
    }

    /// `d output / d input` as a differentiable node (seed of ones over
    /// `output`, so batched rows stay independent).
    pub fn grad_wrt_input<'g>(&'g self, output: Var<'g>, input: Var<'g>) -> Result<Var<'g>, EngineError> {
        if input.id.0 > output.id.0 || !self.is_ancestor(input.id, output.id) {
            return Err(EngineError::NotAncestor {
                input: input.id.0,
                output: output.id.0,
            });
        }
        let [r, c] = output.shape();
        let g = self.grad_with_seed(output, Tensor::ones(r, c), &[input], true)?;
        Ok(g[0])
    }

    fn is_ancestor(&self, a: NodeId, b: NodeId) -> bool {
        if a == b {
            return true;
        }
        let nodes = self.nodes.borrow();
        let lo = a.0;
        let mut reach = vec![false; b.0 - lo + 1];
        reach[0] = true;
        for id in lo + 1..=b.0 {
            reach[id - lo] = nodes[id].inputs.iter().any(|i| i.0 >= lo && reach[i.0 - lo]);
        }
        reach[b.0 - lo]
    }

    fn vjp<'g>(
        &'g self,
        out: NodeId,
        kind: &OpKind,
        inputs: &[NodeId],
        g: Var<'g>,
        need: &[bool],
    ) -> Vec<Option<Var<'g>>> {
        let x = |i: usize| self.var(inputs[i]);
        let xv = |i: usize| self.value(inputs[i]);
        let shape = |i: usize| xv(i).shape();
        let one = |v: Var<'g>| vec![Some(v)];
        match kind {
            OpKind::Leaf | OpKind::Detach => vec![None; inputs.len()],
            OpKind::Add => vec![
                need[0].then(|| g.sum_to(shape(0))),
                need[1].then(|| g.sum_to(shape(1))),
            ],
            OpKind::Sub => vec![
                need[0].then(|| g.sum_to(shape(0))),
                need[1].then(|| (-g).sum_to(shape(1))),
            ],
            OpKind::Mul => vec![
                need[0].then(|| (g * x(1)).sum_to(shape(0))),
                need[1].then(|| (g * x(0)).sum_to(shape(1))),
            ],
            OpKind::Div => {
                let o = self.var(out);
                vec![
                    need[0].then(|| (g / x(1)).sum_to(shape(0))),
                    need[1].then(|| (-(g * o) / x(1)).sum_to(shape(1))),
                ]
            }
            OpKind::Max | OpKind::Min => {
                let (a, b) = (xv(0), xv(1));
                let oshape = g.shape();
                let is_max = matches!(kind, OpKind::Max);
                let first = zip_broadcast(&a, &b, oshape, |p, q| {
                    let pick = if is_max { p >= q } else { p <= q };
                    if pick { 1.0 } else { 0.0 }
                });
                let second = first.map(|m| 1.0 - m);
                vec![
                    need[0].then(|| g.mask_mul(first).sum_to(shape(0))),
                    need[1].then(|| g.mask_mul(second).sum_to(shape(1))),
                ]
            }
            OpKind::Neg => one(-g),
            OpKind::Scale(a) => one(g * *a),
            OpKind::Offset(_) => one(g),
            OpKind::MatMul { ta, tb } => {
                let (a, b) = (x(0), x(1));
                let (ta, tb) = (*ta, *tb);
                let ga = need[0].then(|| {
                    if ta {
                        b.matmul_t(tb, g, true)
                    } else {
                        g.matmul_t(false, b, !tb)
                    }
                });
                let gb = need[1].then(|| {
                    if tb {
                        g.matmul_t(true, a, ta)
                    } else {
                        a.matmul_t(!ta, g, false)
                    }
                });
                vec![ga, gb]
            }
            OpKind::SumAll | OpKind::SumRows | OpKind::SumCols => one(g.broadcast_to(shape(0))),
            OpKind::BroadcastTo(_) => one(g.sum_to(shape(0))),
            OpKind::Pow(p) => {
                let p = *p;
                let d = if p == 1.0 {
                    g
                } else if p == 2.0 {
                    g * x(0) * 2.0
                } else {
                    g * x(0).pow(p - 1.0) * p
                };
                one(d)
            }
            OpKind::Exp => one(g * self.var(out)),
            OpKind::Log => one(g / x(0)),
            OpKind::Sin => one(g * x(0).cos()),
            OpKind::Cos => one(-(g * x(0).sin())),
            OpKind::Sigmoid => {
                let o = self.var(out);
                one(g * (o - o * o))
            }
            OpKind::Softplus(beta) => one(g * (x(0) * *beta).sigmoid()),
            OpKind::Relu => one(g.mask_mul(xv(0).map(|v| if v > 0.0 { 1.0 } else { 0.0 }))),
            OpKind::Clamp(lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                one(g.mask_mul(xv(0).map(|v| if v >= lo && v <= hi { 1.0 } else { 0.0 })))
            }
            OpKind::Abs => one(g.mask_mul(xv(0).map(|v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }))),
            OpKind::MaskMul(m) => one(g.mask_mul_rc(Rc::clone(m))),
            OpKind::Concat => {
                let mut start = 0;
                let mut out = Vec::with_capacity(inputs.len());
                for (i, &needed) in need.iter().enumerate() {
                    let w = shape(i)[1];
                    out.push(needed.then(|| g.slice_cols(start, start + w)));
                    start += w;
                }
                out
            }
            OpKind::SliceCols(s, _) => one(g.pad_cols(*s, shape(0)[1])),
            OpKind::PadCols { start, .. } => one(g.slice_cols(*start, *start + shape(0)[1])),
            OpKind::Reshape(_) => one(g.reshape(shape(0))),
            OpKind::CumsumExcl => one(g.rev_cumsum_excl()),
            OpKind::RevCumsumExcl => one(g.cumsum_excl()),
            OpKind::IndexRows(idx) => one(g.scatter_rows(Rc::clone(idx), shape(0)[0])),
            OpKind::ScatterRows(idx, _) => one(g.index_rows_rc(Rc::clone(idx))),
            OpKind::SegmentSum(len) => one(g.repeat_rows(*len)),
            OpKind::RepeatRows(len) => one(g.segment_sum(*len)),
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> EngineError {
    EngineError::ShapeMismatch {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

fn forward(kind: &OpKind, x: &[&Tensor]) -> Result<Tensor, EngineError> {
    let unary = |f: &dyn Fn(f64) -> f64| x[0].map(f);
    let binary = |name, f: &dyn Fn(f64, f64) -> f64| {
        let s = broadcast_shape(x[0].shape(), x[1].shape()).ok_or_else(|| mismatch(name, x[0], x[1]))?;
        Ok::<_, EngineError>(zip_broadcast(x[0], x[1], s, f))
    };
    Ok(match kind {
        OpKind::Leaf => unreachable!("leaves are pushed directly"),
        OpKind::Add => binary("add", &|a, b| a + b)?,
        OpKind::Sub => binary("sub", &|a, b| a - b)?,
        OpKind::Mul => binary("mul", &|a, b| a * b)?,
        OpKind::Div => binary("div", &|a, b| a / b)?,
        OpKind::Max => binary("max", &|a: f64, b: f64| if a >= b { a } else { b })?,
        OpKind::Min => binary("min", &|a: f64, b: f64| if a <= b { a } else { b })?,
        OpKind::Neg => unary(&|a| -a),
        OpKind::Scale(s) => unary(&|a| a * s),
        OpKind::Offset(s) => unary(&|a| a + s),
        OpKind::MatMul { ta, tb } => {
            let k_a = if *ta { x[0].rows() } else { x[0].cols() };
            let k_b = if *tb { x[1].cols() } else { x[1].rows() };
            if k_a != k_b {
                return Err(mismatch("matmul", x[0], x[1]));
            }
            matmul(x[0], *ta, x[1], *tb)
        }
        OpKind::SumAll => Tensor::scalar(x[0].sum()),
        OpKind::SumRows => sum_to(x[0], [1, x[0].cols()]),
        OpKind::SumCols => sum_to(x[0], [x[0].rows(), 1]),
        OpKind::BroadcastTo(s) => {
            if broadcast_shape(x[0].shape(), *s) != Some(*s) {
                return Err(EngineError::ShapeMismatch {
                    op: "broadcast",
                    lhs: x[0].shape(),
                    rhs: *s,
                });
            }
            broadcast_to(x[0], *s)
        }
        OpKind::Pow(p) => {
            let p = *p;
            if p == 2.0 {
                unary(&|a| a * a)
            } else if p.fract() == 0.0 && p.abs() < 32.0 {
                unary(&|a| a.powi(p as i32))
            } else {
                unary(&|a| a.powf(p))
            }
        }
        OpKind::Exp => unary(&f64::exp),
        OpKind::Log => unary(&f64::ln),
        OpKind::Sin => unary(&f64::sin),
        OpKind::Cos => unary(&f64::cos),
        OpKind::Sigmoid => unary(&sigmoid),
        OpKind::Softplus(beta) => unary(&|a| softplus(a, *beta)),
        OpKind::Relu => unary(&|a| if a > 0.0 { a } else { 0.0 }),
        OpKind::Clamp(lo, hi) => unary(&|a| a.max(*lo).min(*hi)),
        OpKind::Abs => unary(&f64::abs),
        OpKind::MaskMul(m) => {
            if m.shape() != x[0].shape() {
                return Err(mismatch("mask_mul", x[0], m));
            }
            zip_broadcast(x[0], m, x[0].shape(), |a, b| a * b)
        }
        OpKind::Concat => {
            if x.is_empty() {
                return Err(EngineError::Arity {
                    op: "concat",
                    expected: 1,
                    got: 0,
                });
            }
            let rows = x[0].rows();
            if let Some(bad) = x.iter().find(|t| t.rows() != rows) {
                return Err(mismatch("concat", x[0], bad));
            }
            let cols: usize = x.iter().map(|t| t.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for t in x {
                    data.extend_from_slice(t.row(r));
                }
            }
            Tensor::from_vec(rows, cols, data)
        }
        OpKind::SliceCols(s, e) => {
            let (s, e) = (*s, *e);
            if s >= e || e > x[0].cols() {
                return Err(EngineError::ShapeMismatch {
                    op: "slice",
                    lhs: x[0].shape(),
                    rhs: [s, e],
                });
            }
            let mut data = Vec::with_capacity(x[0].rows() * (e - s));
            for r in 0..x[0].rows() {
                data.extend_from_slice(&x[0].row(r)[s..e]);
            }
            Tensor::from_vec(x[0].rows(), e - s, data)
        }
        OpKind::PadCols { start, total } => {
            let (rows, w) = (x[0].rows(), x[0].cols());
            if start + w > *total {
                return Err(EngineError::ShapeMismatch {
                    op: "pad",
                    lhs: x[0].shape(),
                    rhs: [*start, *total],
                });
            }
            let mut out = Tensor::zeros(rows, *total);
            for r in 0..rows {
                out.data_mut()[r * total + start..r * total + start + w].copy_from_slice(x[0].row(r));
            }
            out
        }
        OpKind::Reshape(s) => {
            if s[0] * s[1] != x[0].len() {
                return Err(EngineError::ShapeMismatch {
                    op: "reshape",
                    lhs: x[0].shape(),
                    rhs: *s,
                });
            }
            Tensor::from_vec(s[0], s[1], x[0].data().to_vec())
        }
        OpKind::CumsumExcl | OpKind::RevCumsumExcl => {
            let reverse = matches!(kind, OpKind::RevCumsumExcl);
            let (rows, cols) = (x[0].rows(), x[0].cols());
            let mut out = Tensor::zeros(rows, cols);
            for r in 0..rows {
                let src = x[0].row(r);
                let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
                let mut acc = 0.0;
                if reverse {
                    for c in (0..cols).rev() {
                        dst[c] = acc;
                        acc += src[c];
                    }
                } else {
                    for c in 0..cols {
                        dst[c] = acc;
                        acc += src[c];
                    }
                }
            }
            out
        }
        OpKind::IndexRows(idx) => {
            let cols = x[0].cols();
            let mut data = Vec::with_capacity(idx.len() * cols);
            for &i in idx.iter() {
                if i >= x[0].rows() {
                    return Err(EngineError::IndexOutOfRange {
                        index: i,
                        len: x[0].rows(),
                    });
                }
                data.extend_from_slice(x[0].row(i));
            }
            Tensor::from_vec(idx.len(), cols, data)
        }
        OpKind::ScatterRows(idx, rows) => {
            if idx.len() != x[0].rows() {
                return Err(EngineError::ShapeMismatch {
                    op: "scatter_rows",
                    lhs: x[0].shape(),
                    rhs: [idx.len(), 1],
                });
            }
            let cols = x[0].cols();
            let mut out = Tensor::zeros(*rows, cols);
            for (src, &i) in idx.iter().enumerate() {
                if i >= *rows {
                    return Err(EngineError::IndexOutOfRange { index: i, len: *rows });
                }
                for c in 0..cols {
                    out.data_mut()[i * cols + c] += x[0].get(src, c);
                }
            }
            out
        }
        OpKind::SegmentSum(len) => {
            let len = *len;
            if len == 0 || x[0].rows() % len != 0 {
                return Err(EngineError::ShapeMismatch {
                    op: "segment_sum",
                    lhs: x[0].shape(),
                    rhs: [len, 1],
                });
            }
            let cols = x[0].cols();
            let groups = x[0].rows() / len;
            let mut out = Tensor::zeros(groups, cols);
            for r in 0..x[0].rows() {
                let gi = r / len;
                for c in 0..cols {
                    out.data_mut()[gi * cols + c] += x[0].get(r, c);
                }
            }
            out
        }
        OpKind::RepeatRows(len) => {
            let cols = x[0].cols();
            let mut data = Vec::with_capacity(x[0].len() * len);
            for r in 0..x[0].rows() {
                for _ in 0..*len {
                    data.extend_from_slice(x[0].row(r));
                }
            }
            Tensor::from_vec(x[0].rows() * len, cols, data)
        }
        OpKind::Detach => x[0].clone(),
    })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(beta x)) / beta`, stable for large arguments.
pub fn softplus(x: f64, beta: f64) -> f64 {
    let z = beta * x;
    if z > 30.0 {
        x
    } else {
        z.exp().ln_1p() / beta
    }
}

impl<'g> Var<'g> {
    pub fn id(self) -> NodeId {
        self.id
    }

    pub fn graph(self) -> &'g Graph {
        self.graph
    }

    pub fn value(self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(self) -> [usize; 2] {
        self.graph.nodes.borrow()[self.id.0].value.shape()
    }

    pub fn rows(self) -> usize {
        self.shape()[0]
    }

    pub fn cols(self) -> usize {
        self.shape()[1]
    }

    /// Value of a `[1, 1]` node.
    pub fn item(self) -> f64 {
        self.value().item()
    }

    fn unary(self, kind: OpKind) -> Var<'g> {
        self.graph.op(kind, &[self])
    }

    fn binary(self, kind: OpKind, other: Var<'g>) -> Var<'g> {
        self.graph.op(kind, &[self, other])
    }

    pub fn constant_like(self, value: Tensor) -> Var<'g> {
        self.graph.constant(value)
    }

    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        self.binary(OpKind::MatMul { ta: false, tb: false }, other)
    }

    /// `op(self) · op(other)` with optional transposes.
    pub fn matmul_t(self, ta: bool, other: Var<'g>, tb: bool) -> Var<'g> {
        self.binary(OpKind::MatMul { ta, tb }, other)
    }

    pub fn max(self, other: Var<'g>) -> Var<'g> {
        self.binary(OpKind::Max, other)
    }

    pub fn min(self, other: Var<'g>) -> Var<'g> {
        self.binary(OpKind::Min, other)
    }

    pub fn sum(self) -> Var<'g> {
        self.unary(OpKind::SumAll)
    }

    pub fn sum_rows(self) -> Var<'g> {
        self.unary(OpKind::SumRows)
    }

    pub fn sum_cols(self) -> Var<'g> {
        self.unary(OpKind::SumCols)
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum() * (1.0 / n)
    }

    /// Column means, `[1, C]`.
    pub fn mean_rows(self) -> Var<'g> {
        let n = self.rows() as f64;
        self.sum_rows() * (1.0 / n)
    }

    /// Population (biased) variance of each column, `[1, C]`.
    pub fn variance(self) -> Var<'g> {
        let centered = self - self.mean_rows();
        centered.square().mean_rows()
    }

    pub fn broadcast_to(self, shape: [usize; 2]) -> Var<'g> {
        if self.shape() == shape {
            return self;
        }
        self.unary(OpKind::BroadcastTo(shape))
    }

    pub fn sum_to(self, shape: [usize; 2]) -> Var<'g> {
        let s = self.shape();
        if s == shape {
            self
        } else if shape == [1, 1] {
            self.sum()
        } else if shape[0] == 1 && shape[1] == s[1] {
            self.sum_rows()
        } else if shape[1] == 1 && shape[0] == s[0] {
            self.sum_cols()
        } else {
            panic!("cannot reduce {s:?} to {shape:?}")
        }
    }

    pub fn pow(self, p: f64) -> Var<'g> {
        self.unary(OpKind::Pow(p))
    }

    pub fn square(self) -> Var<'g> {
        self.pow(2.0)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.pow(0.5)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(OpKind::Exp)
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(OpKind::Log)
    }

    pub fn sin(self) -> Var<'g> {
        self.unary(OpKind::Sin)
    }

    pub fn cos(self) -> Var<'g> {
        self.unary(OpKind::Cos)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(OpKind::Sigmoid)
    }

    pub fn softplus(self, beta: f64) -> Var<'g> {
        self.unary(OpKind::Softplus(beta))
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(OpKind::Relu)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        self.unary(OpKind::Clamp(lo, hi))
    }

    pub fn abs(self) -> Var<'g> {
        self.unary(OpKind::Abs)
    }

    pub fn mask_mul(self, mask: Tensor) -> Var<'g> {
        self.mask_mul_rc(Rc::new(mask))
    }

    fn mask_mul_rc(self, mask: Rc<Tensor>) -> Var<'g> {
        self.unary(OpKind::MaskMul(mask))
    }

    /// Row-wise dot product, `[R, 1]`.
    pub fn dot(self, other: Var<'g>) -> Var<'g> {
        (self * other).sum_cols()
    }

    /// Row-wise Euclidean norm, `[R, 1]`.
    /// Row norms. Squared norms below `1e-30` are raised to it, so a zero
    /// row has norm `1e-15` and a zero (not infinite) gradient.
    pub fn l2_norm(self) -> Var<'g> {
        let sq = self.square().sum_cols();
        sq.max(self.graph.constant(Tensor::scalar(1e-30))).sqrt()
    }

    /// Rows scaled to unit length; `floor` bounds the divisor away from zero.
    pub fn normalize(self, floor: f64) -> Var<'g> {
        let norm = self.l2_norm();
        let norm = norm.max(self.graph.constant(Tensor::scalar(floor)));
        self / norm
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Var<'g> {
        if start == 0 && end == self.cols() {
            return self;
        }
        self.unary(OpKind::SliceCols(start, end))
    }

    pub fn pad_cols(self, start: usize, total: usize) -> Var<'g> {
        self.unary(OpKind::PadCols { start, total })
    }

    pub fn reshape(self, shape: [usize; 2]) -> Var<'g> {
        if self.shape() == shape {
            return self;
        }
        self.unary(OpKind::Reshape(shape))
    }

    pub fn cumsum_excl(self) -> Var<'g> {
        self.unary(OpKind::CumsumExcl)
    }

    pub fn rev_cumsum_excl(self) -> Var<'g> {
        self.unary(OpKind::RevCumsumExcl)
    }

    pub fn index_rows(self, idx: &[usize]) -> Var<'g> {
        self.index_rows_rc(Rc::from(idx))
    }

    fn index_rows_rc(self, idx: Rc<[usize]>) -> Var<'g> {
        self.unary(OpKind::IndexRows(idx))
    }

    fn scatter_rows(self, idx: Rc<[usize]>, rows: usize) -> Var<'g> {
        self.unary(OpKind::ScatterRows(idx, rows))
    }

    pub fn segment_sum(self, len: usize) -> Var<'g> {
        self.unary(OpKind::SegmentSum(len))
    }

    pub fn repeat_rows(self, len: usize) -> Var<'g> {
        self.unary(OpKind::RepeatRows(len))
    }

    /// Same value, cut off from the gradient.
    pub fn detach(self) -> Var<'g> {
        self.unary(OpKind::Detach)
    }
}

/// Column-wise concatenation.
pub fn concat<'g>(parts: &[Var<'g>]) -> Var<'g> {
    assert!(!parts.is_empty(), "concat of nothing");
    parts[0].graph.op(OpKind::Concat, parts)
}

macro_rules! binop {
    ($tr:ident, $method:ident, $kind:expr, $scalar:expr) => {
        impl<'g> std::ops::$tr<Var<'g>> for Var<'g> {
            type Output = Var<'g>;
            fn $method(self, rhs: Var<'g>) -> Var<'g> {
                self.binary($kind, rhs)
            }
        }
        impl<'g> std::ops::$tr<f64> for Var<'g> {
            type Output = Var<'g>;
            fn $method(self, rhs: f64) -> Var<'g> {
                #[allow(clippy::redundant_closure_call)]
                ($scalar)(self, rhs)
            }
        }
    };
}

binop!(Add, add, OpKind::Add, |v: Var<'g>, s: f64| v.unary(OpKind::Offset(s)));
binop!(Sub, sub, OpKind::Sub, |v: Var<'g>, s: f64| v.unary(OpKind::Offset(-s)));
binop!(Mul, mul, OpKind::Mul, |v: Var<'g>, s: f64| v.unary(OpKind::Scale(s)));
binop!(Div, div, OpKind::Div, |v: Var<'g>, s: f64| v.unary(OpKind::Scale(1.0 / s)));

impl<'g> std::ops::Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.unary(OpKind::Neg)
    }
}

impl<'g> std::ops::Sub<Var<'g>> for f64 {
    type Output = Var<'g>;
    fn sub(self, rhs: Var<'g>) -> Var<'g> {
        (-rhs) + self
    }
}

impl<'g> std::ops::Mul<Var<'g>> for f64 {
    type Output = Var<'g>;
    fn mul(self, rhs: Var<'g>) -> Var<'g> {
        rhs * self
    }
}

impl<'g> std::ops::Add<Var<'g>> for f64 {
    type Output = Var<'g>;
    fn add(self, rhs: Var<'g>) -> Var<'g> {
        rhs + self
    }
}
