//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to a shared tape. Backward rules are
//! themselves written with tape operations, so with `create_graph = true` the
//! gradients come back as ordinary differentiable [`Var`]s and can be fed
//! into a second backward pass.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use super::kernels::{self, Window};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub(crate) type NodeId = usize;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Sqrt(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Abs(NodeId),
    Square(NodeId),
    Relu(NodeId),
    Maximum(NodeId, NodeId),
    Reshape(NodeId),
    BroadcastTo(NodeId),
    SumTo(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Conv1d {
        x: NodeId,
        w: NodeId,
        geom: Window,
    },
    ConvTranspose {
        gy: NodeId,
        w: NodeId,
        geom: Window,
    },
    ConvWeightGrad {
        x: NodeId,
        gy: NodeId,
        geom: Window,
    },
    Gather {
        x: NodeId,
        idx: Arc<Vec<usize>>,
    },
    ScatterAdd {
        g: NodeId,
        idx: Arc<Vec<usize>>,
    },
    AvgPool {
        x: NodeId,
        geom: Window,
    },
    AvgPoolTranspose {
        g: NodeId,
        geom: Window,
    },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        spec: Arc<GnSpec>,
    },
}

/// Static arguments of a fused group-norm node.
#[derive(Clone, Debug)]
pub(crate) struct GnSpec {
    pub groups: usize,
    pub eps: f64,
    /// Position weights `[N, L]` for the statistics.
    pub weights: Option<Tensor>,
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        use Op::*;
        match *self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Maximum(a, b) | MatMul(a, b) => {
                vec![a, b]
            }
            Neg(a)
            | Scale(a, _)
            | AddScalar(a)
            | Sqrt(a)
            | Log(a)
            | Exp(a)
            | Abs(a)
            | Square(a)
            | Relu(a)
            | Reshape(a)
            | BroadcastTo(a)
            | SumTo(a)
            | Transpose(a) => vec![a],
            Conv1d { x, w, .. } => vec![x, w],
            ConvTranspose { gy, w, .. } => vec![gy, w],
            ConvWeightGrad { x, gy, .. } => vec![x, gy],
            Gather { x, .. } | AvgPool { x, .. } => vec![x],
            ScatterAdd { g, .. } | AvgPoolTranspose { g, .. } => vec![g],
            GroupNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

struct Tape {
    nodes: Vec<Node>,
    /// False while a `create_graph = false` backward pass runs: new nodes
    /// become constants.
    recording: bool,
}

/// Handle to a computation tape. Cheap to clone; all clones share the tape.
#[derive(Clone)]
pub struct Graph {
    tape: Rc<RefCell<Tape>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            tape: Rc::new(RefCell::new(Tape {
                nodes: Vec::new(),
                recording: true,
            })),
        }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut tape = self.tape.borrow_mut();
        let id = tape.nodes.len();
        tape.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.clone(),
            id,
        }
    }

    pub(crate) fn push(&self, value: Tensor, op: Op) -> Var {
        let requires_grad = {
            let tape = self.tape.borrow();
            tape.recording && op.parents().iter().any(|&p| tape.nodes[p].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_raw(value, op, requires_grad)
    }

    fn var(&self, id: NodeId) -> Var {
        Var {
            graph: self.clone(),
            id,
        }
    }

    fn same(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.tape, &other.tape)
    }

    /// Gradients of a scalar `root` with respect to each of `wrt`.
    ///
    /// Entries are `None` when the root does not depend on that input. With
    /// `create_graph` the returned gradients are differentiable again.
    pub fn grad(&self, root: &Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Option<Var>>> {
        for v in std::iter::once(root).chain(wrt) {
            if !self.same(&v.graph) {
                return Err(Error::Usage("variable belongs to a different graph".into()));
            }
        }
        let targets: Vec<NodeId> = wrt.iter().map(|v| v.id).collect();
        let found = self.run_backward(root, &targets, create_graph)?;
        Ok(targets.iter().map(|id| found.get(id).cloned()).collect())
    }

    /// Gradient of `root` with respect to every leaf that requires one.
    pub fn backward(&self, root: &Var, create_graph: bool) -> Result<Gradients> {
        if !self.same(&root.graph) {
            return Err(Error::Usage("root belongs to a different graph".into()));
        }
        let leaves: Vec<NodeId> = {
            let tape = self.tape.borrow();
            (0..=root.id.min(tape.nodes.len() - 1))
                .filter(|&i| tape.nodes[i].requires_grad && matches!(tape.nodes[i].op, Op::Leaf))
                .collect()
        };
        let grads = self.run_backward(root, &leaves, create_graph)?;
        Ok(Gradients { grads })
    }

    fn run_backward(
        &self,
        root: &Var,
        targets: &[NodeId],
        create_graph: bool,
    ) -> Result<HashMap<NodeId, Var>> {
        let (numel, n) = {
            let tape = self.tape.borrow();
            (tape.nodes[root.id].value.numel(), root.id + 1)
        };
        if numel != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got {:?}",
                root.value().shape()
            )));
        }

        // Nodes lying on some path from a target to the root.
        let mut needed = vec![false; n];
        let mut is_target = vec![false; n];
        for &t in targets {
            if t < n {
                needed[t] = true;
                is_target[t] = true;
            }
        }
        {
            let tape = self.tape.borrow();
            for id in 0..n {
                let node = &tape.nodes[id];
                if !needed[id] && node.requires_grad {
                    needed[id] = node.op.parents().iter().any(|&p| needed[p]);
                }
            }
        }

        let mut found = HashMap::new();
        if !needed[root.id] {
            return Ok(found);
        }

        let _guard = RecordingGuard::set(self, create_graph);
        let mut grads: Vec<Option<Var>> = vec![None; n];
        grads[root.id] = Some(self.constant(Tensor::full(root.value().shape(), 1.0)));

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            if is_target[id] {
                found.insert(id, g.clone());
            }
            let op = self.tape.borrow().nodes[id].op.clone();
            for (parent, pg) in self.vjp(id, &op, &g, &needed) {
                grads[parent] = Some(match grads[parent].take() {
                    Some(acc) => acc.add_unchecked(&pg),
                    None => pg,
                });
            }
        }
        Ok(found)
    }

    /// Vector-Jacobian products of node `id` for every parent on a needed path.
    fn vjp(&self, id: NodeId, op: &Op, g: &Var, needed: &[bool]) -> Vec<(NodeId, Var)> {
        let need = |p: NodeId| needed[p];
        let v = |p: NodeId| self.var(p);
        let out = self.var(id);
        let mut res = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need(a) {
                    res.push((a, g.clone()));
                }
                if need(b) {
                    res.push((b, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if need(a) {
                    res.push((a, g.clone()));
                }
                if need(b) {
                    res.push((b, g.neg()));
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    res.push((a, g.mul_unchecked(&v(b))));
                }
                if need(b) {
                    res.push((b, g.mul_unchecked(&v(a))));
                }
            }
            Op::Div(a, b) => {
                if need(a) {
                    res.push((a, g.div_unchecked(&v(b))));
                }
                if need(b) {
                    // d(a/b)/db = -(a/b)/b
                    res.push((b, g.mul_unchecked(&out).div_unchecked(&v(b)).neg()));
                }
            }
            Op::Neg(a) => res.push((a, g.neg())),
            Op::Scale(a, c) => res.push((a, g.scale(c))),
            Op::AddScalar(a) => res.push((a, g.clone())),
            Op::Sqrt(a) => res.push((a, g.div_unchecked(&out.scale(2.0)))),
            Op::Log(a) => res.push((a, g.div_unchecked(&v(a)))),
            Op::Exp(a) => res.push((a, g.mul_unchecked(&out))),
            Op::Abs(a) => {
                let sign = v(a).value().map(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                res.push((a, g.mul_unchecked(&self.constant(sign))));
            }
            Op::Square(a) => res.push((a, g.mul_unchecked(&v(a).scale(2.0)))),
            Op::Relu(a) => {
                let mask = v(a).value().map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                res.push((a, g.mul_unchecked(&self.constant(mask))));
            }
            Op::Maximum(a, b) => {
                let m = v(a)
                    .value()
                    .zip_map(&v(b).value(), |x, y| if x >= y { 1.0 } else { 0.0 })
                    .expect("maximum operands share a shape");
                if need(b) {
                    let inv = self.constant(m.map(|x| 1.0 - x));
                    res.push((b, g.mul_unchecked(&inv)));
                }
                if need(a) {
                    res.push((a, g.mul_unchecked(&self.constant(m))));
                }
            }
            Op::Reshape(a) => {
                let shape = v(a).value().shape().to_vec();
                res.push((a, g.reshape_unchecked(&shape)));
            }
            Op::BroadcastTo(a) => {
                let shape = v(a).value().shape().to_vec();
                res.push((a, g.sum_to_unchecked(&shape)));
            }
            Op::SumTo(a) => {
                let shape = v(a).value().shape().to_vec();
                res.push((a, g.broadcast_to_unchecked(&shape)));
            }
            Op::MatMul(a, b) => {
                if need(a) {
                    res.push((a, g.matmul_unchecked(&v(b).transpose_unchecked())));
                }
                if need(b) {
                    res.push((b, v(a).transpose_unchecked().matmul_unchecked(g)));
                }
            }
            Op::Transpose(a) => res.push((a, g.transpose_unchecked())),
            Op::Conv1d { x, w, geom } => {
                if need(x) {
                    res.push((x, conv_transpose(g, &v(w), geom)));
                }
                if need(w) {
                    res.push((w, conv_weight_grad(&v(x), g, geom)));
                }
            }
            Op::ConvTranspose { gy, w, geom } => {
                if need(gy) {
                    res.push((gy, conv_raw(g, &v(w), geom)));
                }
                if need(w) {
                    res.push((w, conv_weight_grad(g, &v(gy), geom)));
                }
            }
            Op::ConvWeightGrad { x, gy, geom } => {
                if need(x) {
                    res.push((x, conv_transpose(&v(gy), g, geom)));
                }
                if need(gy) {
                    res.push((gy, conv_raw(&v(x), g, geom)));
                }
            }
            Op::Gather { x, ref idx } => {
                let shape = v(x).value().shape().to_vec();
                res.push((x, scatter_add(g, idx, &shape)));
            }
            Op::ScatterAdd { g: src, ref idx } => {
                let shape = v(src).value().shape().to_vec();
                res.push((src, gather(g, idx, &shape)));
            }
            Op::AvgPool { x, geom } => res.push((x, avg_pool_transpose(g, geom))),
            Op::AvgPoolTranspose { g: src, geom } => res.push((src, avg_pool_raw(g, geom))),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                ref spec,
            } => {
                let grads = if self.tape.borrow().recording {
                    super::ops::group_norm_vjp_graph(&v(x), &v(gamma), g, spec)
                } else {
                    let (xv, gv) = (v(x).value(), v(gamma).value());
                    let (gx, gg, gb) = kernels::group_norm_backward(
                        xv.data(),
                        gv.data(),
                        g.value().data(),
                        group_layout(&xv, spec.groups),
                        spec.eps,
                        spec.weights.as_ref().map(|w| w.data()),
                    );
                    let c = gv.numel();
                    (
                        self.constant(Tensor::from_parts(xv.shape().to_vec(), gx)),
                        self.constant(Tensor::from_parts(vec![c], gg)),
                        self.constant(Tensor::from_parts(vec![c], gb)),
                    )
                };
                for (p, pg) in [(x, grads.0), (gamma, grads.1), (beta, grads.2)] {
                    if need(p) {
                        res.push((p, pg));
                    }
                }
            }
        }
        res
    }
}

struct RecordingGuard {
    graph: Graph,
    previous: bool,
}

impl RecordingGuard {
    fn set(graph: &Graph, recording: bool) -> Self {
        let previous = std::mem::replace(&mut graph.tape.borrow_mut().recording, recording);
        Self {
            graph: graph.clone(),
            previous,
        }
    }
}

impl Drop for RecordingGuard {
    fn drop(&mut self) {
        self.graph.tape.borrow_mut().recording = self.previous;
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: HashMap<NodeId, Var>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Var> {
        self.grads.get(&v.id)
    }

    /// Gradient value, zeros when the root does not depend on `v`.
    pub fn tensor(&self, v: &Var) -> Tensor {
        match self.grads.get(&v.id) {
            Some(g) => g.value(),
            None => Tensor::zeros(v.value().shape()),
        }
    }
}

/// A node on a [`Graph`].
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: NodeId,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl Var {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.tape.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.tape.borrow().nodes[self.id]
            .value
            .shape()
            .to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.tape.borrow().nodes[self.id].requires_grad
    }

    /// Scalar value; errors on non-scalar nodes.
    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var {
        self.graph.constant(self.value())
    }

    fn check_same_graph(&self, other: &Var) -> Result<()> {
        if self.graph.same(&other.graph) {
            Ok(())
        } else {
            Err(Error::Usage("operands belong to different graphs".into()))
        }
    }

    fn binary(&self, other: &Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.check_same_graph(other)?;
        let value = self.value().zip_map(&other.value(), f)?;
        Ok(self.graph.push(value, op))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var {
        self.graph.push(self.value().map(f), op)
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(other, |a, b| a / b, Op::Div(self.id, other.id))
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(&self, other: &Var) -> Result<Var> {
        self.binary(other, f64::max, Op::Maximum(self.id, other.id))
    }

    pub(crate) fn add_unchecked(&self, other: &Var) -> Var {
        self.add(other).expect("add operands share a shape")
    }

    pub(crate) fn mul_unchecked(&self, other: &Var) -> Var {
        self.mul(other).expect("mul operands share a shape")
    }

    pub(crate) fn div_unchecked(&self, other: &Var) -> Var {
        self.div(other).expect("div operands share a shape")
    }

    pub fn neg(&self) -> Var {
        self.unary(|a| -a, Op::Neg(self.id))
    }

    pub fn scale(&self, c: f64) -> Var {
        self.unary(|a| a * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.unary(|a| a + c, Op::AddScalar(self.id))
    }

    pub fn sqrt(&self) -> Var {
        self.unary(f64::sqrt, Op::Sqrt(self.id))
    }

    pub fn ln(&self) -> Var {
        self.unary(f64::ln, Op::Log(self.id))
    }

    pub fn exp(&self) -> Var {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn abs(&self) -> Var {
        self.unary(f64::abs, Op::Abs(self.id))
    }

    pub fn square(&self) -> Var {
        self.unary(|a| a * a, Op::Square(self.id))
    }

    /// max(0, x); the derivative at exactly 0 is taken as 0.
    pub fn relu(&self) -> Var {
        self.unary(|a| if a <= 0.0 { 0.0 } else { a }, Op::Relu(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let value = self.value().reshape(shape)?;
        Ok(self.graph.push(value, Op::Reshape(self.id)))
    }

    fn reshape_unchecked(&self, shape: &[usize]) -> Var {
        self.reshape(shape)
            .expect("reshape preserves element count")
    }

    /// Repeat along axes of extent 1. `shape` must have the same rank.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var> {
        let src = self.shape();
        check_broadcast(&src, shape)?;
        if src == shape {
            return Ok(self.clone());
        }
        let data = kernels::broadcast_to(self.value().data(), &src, shape);
        Ok(self.graph.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::BroadcastTo(self.id),
        ))
    }

    fn broadcast_to_unchecked(&self, shape: &[usize]) -> Var {
        self.broadcast_to(shape)
            .expect("broadcast shapes were validated forward")
    }

    /// Sum over the axes where `shape` has extent 1 (adjoint of `broadcast_to`).
    pub fn sum_to(&self, shape: &[usize]) -> Result<Var> {
        let src = self.shape();
        check_broadcast(shape, &src)?;
        if src == shape {
            return Ok(self.clone());
        }
        let data = kernels::sum_to(self.value().data(), &src, shape);
        Ok(self
            .graph
            .push(Tensor::from_parts(shape.to_vec(), data), Op::SumTo(self.id)))
    }

    fn sum_to_unchecked(&self, shape: &[usize]) -> Var {
        self.sum_to(shape)
            .expect("sum_to shapes were validated forward")
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Var {
        let shape = self.shape();
        let ones = vec![1; shape.len()];
        self.sum_to_unchecked(&ones).reshape_unchecked(&[])
    }

    pub fn mean(&self) -> Var {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over the last axis, keeping it with extent 1.
    pub fn sum_last(&self) -> Var {
        let mut shape = self.shape();
        if let Some(last) = shape.last_mut() {
            *last = 1;
        }
        self.sum_to_unchecked(&shape)
    }

    /// [m, k] x [k, n]
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.check_same_graph(other)?;
        let (a, b) = (self.value(), other.value());
        match (a.shape(), b.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => {
                let data = kernels::matmul(a.data(), b.data(), m, k, n);
                Ok(self.graph.push(
                    Tensor::from_parts(vec![m, n], data),
                    Op::MatMul(self.id, other.id),
                ))
            }
            (sa, sb) => Err(Error::param(format!(
                "matmul shape mismatch: {sa:?} x {sb:?}"
            ))),
        }
    }

    fn matmul_unchecked(&self, other: &Var) -> Var {
        self.matmul(other)
            .expect("matmul shapes were validated forward")
    }

    pub fn transpose(&self) -> Result<Var> {
        let a = self.value();
        match *a.shape() {
            [r, c] => {
                let data = kernels::transpose(a.data(), r, c);
                Ok(self
                    .graph
                    .push(Tensor::from_parts(vec![c, r], data), Op::Transpose(self.id)))
            }
            _ => Err(Error::param(format!(
                "transpose needs a matrix, got {:?}",
                a.shape()
            ))),
        }
    }

    fn transpose_unchecked(&self) -> Var {
        self.transpose().expect("transpose of a matrix")
    }

    pub(crate) fn push_op(&self, value: Tensor, op: Op) -> Var {
        self.graph.push(value, op)
    }
}

fn check_broadcast(small: &[usize], big: &[usize]) -> Result<()> {
    let ok = small.len() == big.len() && small.iter().zip(big).all(|(&s, &b)| s == b || s == 1);
    if ok {
        Ok(())
    } else {
        Err(Error::param(format!(
            "cannot broadcast {small:?} to {big:?}"
        )))
    }
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2])
}

/// Convolution without bias on [N, C_in, L] and [C_out, C_in, K].
pub(crate) fn conv_raw(x: &Var, w: &Var, geom: Window) -> Var {
    let (xv, wv) = (x.value(), w.value());
    let (n, c_in, _) = dims3(&xv);
    let (c_out, _, _) = dims3(&wv);
    let data = kernels::conv1d(xv.data(), wv.data(), n, c_in, c_out, geom);
    x.push_op(
        Tensor::from_parts(vec![n, c_out, geom.out_len], data),
        Op::Conv1d {
            x: x.id,
            w: w.id,
            geom,
        },
    )
}

fn conv_transpose(gy: &Var, w: &Var, geom: Window) -> Var {
    let (gv, wv) = (gy.value(), w.value());
    let (n, c_out, _) = dims3(&gv);
    let (_, c_in, _) = dims3(&wv);
    let data = kernels::conv1d_transpose(gv.data(), wv.data(), n, c_in, c_out, geom);
    gy.push_op(
        Tensor::from_parts(vec![n, c_in, geom.in_len], data),
        Op::ConvTranspose {
            gy: gy.id,
            w: w.id,
            geom,
        },
    )
}

fn conv_weight_grad(x: &Var, gy: &Var, geom: Window) -> Var {
    let (xv, gv) = (x.value(), gy.value());
    let (n, c_in, _) = dims3(&xv);
    let (_, c_out, _) = dims3(&gv);
    let data = kernels::conv1d_weight_grad(xv.data(), gv.data(), n, c_in, c_out, geom);
    x.push_op(
        Tensor::from_parts(vec![c_out, c_in, geom.kernel], data),
        Op::ConvWeightGrad {
            x: x.id,
            gy: gy.id,
            geom,
        },
    )
}

pub(crate) fn gather(x: &Var, idx: &Arc<Vec<usize>>, out_shape: &[usize]) -> Var {
    let data = kernels::gather(x.value().data(), idx);
    x.push_op(
        Tensor::from_parts(out_shape.to_vec(), data),
        Op::Gather {
            x: x.id,
            idx: Arc::clone(idx),
        },
    )
}

fn scatter_add(g: &Var, idx: &Arc<Vec<usize>>, out_shape: &[usize]) -> Var {
    let len = out_shape.iter().product();
    let data = kernels::scatter_add(g.value().data(), idx, len);
    g.push_op(
        Tensor::from_parts(out_shape.to_vec(), data),
        Op::ScatterAdd {
            g: g.id,
            idx: Arc::clone(idx),
        },
    )
}

fn window_out_shape(shape: &[usize], len: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("pooling over a non-scalar") = len;
    s
}

pub(crate) fn avg_pool_raw(x: &Var, geom: Window) -> Var {
    let xv = x.value();
    let rows = xv.numel() / geom.in_len;
    let data = kernels::avg_pool(xv.data(), rows, geom);
    x.push_op(
        Tensor::from_parts(window_out_shape(xv.shape(), geom.out_len), data),
        Op::AvgPool { x: x.id, geom },
    )
}

fn avg_pool_transpose(g: &Var, geom: Window) -> Var {
    let gv = g.value();
    let rows = gv.numel() / geom.out_len;
    let data = kernels::avg_pool_transpose(gv.data(), rows, geom);
    g.push_op(
        Tensor::from_parts(window_out_shape(gv.shape(), geom.in_len), data),
        Op::AvgPoolTranspose { g: g.id, geom },
    )
}

fn group_layout(x: &Tensor, groups: usize) -> kernels::GroupLayout {
    let (batch, channels, len) = dims3(x);
    kernels::GroupLayout {
        batch,
        channels,
        len,
        groups,
    }
}

/// Fused group norm on `[N, C, L]`; arguments are validated by the caller.
pub(crate) fn group_norm_raw(x: &Var, gamma: &Var, beta: &Var, spec: GnSpec) -> Var {
    let xv = x.value();
    let lay = group_layout(&xv, spec.groups);
    let w = spec.weights.as_ref().map(|w| w.data());
    let stats = kernels::group_norm_stats(xv.data(), lay, spec.eps, w);
    let data = kernels::group_norm(
        xv.data(),
        gamma.value().data(),
        beta.value().data(),
        lay,
        &stats,
    );
    x.push_op(
        Tensor::from_parts(xv.shape().to_vec(), data),
        Op::GroupNorm {
            x: x.id,
            gamma: gamma.id,
            beta: beta.id,
            spec: Arc::new(spec),
        },
    )
}
