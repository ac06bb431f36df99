//! Define-by-run reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only list of nodes. Every node caches its forward
//! value at creation, and its parents always have smaller ids, so the node list
//! is already a topological order and backward is a single reverse sweep.
//!
//! Gradients can be seeded at any node (not only scalars), which is how the
//! margin loss asks for `∇_h f_i` at hidden activations: seed the logits with a
//! ±1 pattern and read the gradient at the activation node.

use crate::error::{Error, Result};
use crate::tensor::{first_argmax, gemm, is_row_broadcast, MatRef, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Constant or data input.
    Input,
    Param,
    /// `a + b`; `b` may be a row vector broadcast over the rows of `a`.
    Add,
    /// `a - b`, broadcasting like [`Op::Add`].
    Sub,
    /// Elementwise product of equal shapes.
    Mul,
    Scale(f64),
    /// Adds a constant to every element.
    Shift(f64),
    MatMul,
    Relu,
    /// Sum of all elements to a scalar.
    SumAll,
    /// `[B, n] -> [B]`.
    SumRows,
    /// `[B, n] -> [B]`, gradient routed to the first maximal element.
    MaxRows,
    /// `[B, n] -> [B]`.
    LogSumExpRows,
    /// `[B, n] -> [B, k]`, `out[b, j] = in[b, indices[b * k + j]]`.
    Gather { indices: Vec<usize>, k: usize },
    /// Identity forward; blocks gradient flow to its parent.
    StopGradient,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "parameter",
            Op::Add => "add",
            Op::Sub => "subtract",
            Op::Mul => "multiply",
            Op::Scale(_) => "scalar-multiply",
            Op::Shift(_) => "shift",
            Op::MatMul => "matmul",
            Op::Relu => "relu",
            Op::SumAll => "reduce-sum",
            Op::SumRows => "reduce-sum-rows",
            Op::MaxRows => "reduce-max",
            Op::LogSumExpRows => "log-sum-exp",
            Op::Gather { .. } => "select-component",
            Op::StopGradient => "stop-gradient",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Input | Op::Param => 0,
            Op::Add | Op::Sub | Op::Mul | Op::MatMul => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    parents: Vec<NodeId>,
    value: Tensor,
    stop_gradient: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients from one backward sweep. Missing entries are zero.
#[derive(Debug, Clone)]
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn is_stopped(&self, id: NodeId) -> bool {
        self.nodes[id.0].stop_gradient
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: Tensor) -> NodeId {
        let stop_gradient = op == Op::StopGradient;
        self.nodes.push(Node {
            op,
            parents,
            value,
            stop_gradient,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, Vec::new(), value)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Param, Vec::new(), value)
    }

    /// Records a non-leaf operation and caches its forward value.
    pub fn record(&mut self, op: Op, parents: &[NodeId]) -> Result<NodeId> {
        if op.arity() == 0 {
            return Err(Error::config(format!(
                "{} nodes are leaves; create them with input/param",
                op.name()
            )));
        }
        if parents.len() != op.arity() {
            return Err(Error::config(format!(
                "{} takes {} parent(s), got {}",
                op.name(),
                op.arity(),
                parents.len()
            )));
        }
        for p in parents {
            if p.0 >= self.nodes.len() {
                return Err(Error::UnknownNode(p.0));
            }
        }
        let a = &self.nodes[parents[0].0].value;
        let value = match &op {
            Op::Add => a.add(&self.nodes[parents[1].0].value)?,
            Op::Sub => a.sub(&self.nodes[parents[1].0].value)?,
            Op::Mul => a.mul(&self.nodes[parents[1].0].value)?,
            Op::MatMul => a.matmul(&self.nodes[parents[1].0].value)?,
            Op::Scale(c) => a.scale(*c),
            Op::Shift(c) => a.shift(*c),
            Op::Relu => a.relu(),
            Op::SumAll => a.sum_all(),
            Op::SumRows => a.sum_rows()?,
            Op::MaxRows => a.max_rows()?,
            Op::LogSumExpRows => a.logsumexp_rows()?,
            Op::Gather { indices, k } => a.gather(indices, *k)?,
            Op::StopGradient => a.clone(),
            Op::Input | Op::Param => unreachable!(),
        };
        Ok(self.push(op, parents.to_vec(), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::MatMul, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.record(Op::Scale(c), &[a])
    }

    pub fn shift(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.record(Op::Shift(c), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Relu, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::SumAll, &[a])
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::SumRows, &[a])
    }

    pub fn max_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::MaxRows, &[a])
    }

    pub fn logsumexp_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::LogSumExpRows, &[a])
    }

    pub fn gather(&mut self, a: NodeId, indices: Vec<usize>, k: usize) -> Result<NodeId> {
        self.record(Op::Gather { indices, k }, &[a])
    }

    /// Same forward value as `node`; contributes nothing upstream in backward.
    pub fn stop_gradient(&mut self, node: NodeId) -> Result<NodeId> {
        self.record(Op::StopGradient, &[node])
    }

    /// Gradients of a scalar node with respect to every node that feeds it.
    pub fn backward(&self, scalar: NodeId) -> Result<GradientMap> {
        let value = &self.node(scalar)?.value;
        if !(value.shape().is_empty() || value.shape() == [1]) {
            return Err(Error::NonScalarSeed(value.shape().to_vec()));
        }
        let seed = Tensor::full(value.shape(), 1.0);
        self.backward_from(scalar, seed, None)
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `node`'s value)
    /// backwards. With `targets`, only nodes lying on a path from a target to
    /// `node` receive gradients, which skips parameter gradients when only
    /// activation gradients are wanted.
    pub fn backward_from(&self, node: NodeId, seed: Tensor, targets: Option<&[NodeId]>) -> Result<GradientMap> {
        let root = self.node(node)?;
        if seed.shape() != root.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "backward seed",
                lhs: root.value.shape().to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        let wanted = match targets {
            Some(ts) => {
                let mut reach = vec![false; node.0 + 1];
                for t in ts {
                    self.node(*t)?;
                    if t.0 <= node.0 {
                        reach[t.0] = true;
                    }
                }
                for i in 0..=node.0 {
                    if !reach[i] && self.nodes[i].parents.iter().any(|p| reach[p.0]) {
                        reach[i] = true;
                    }
                }
                Some(reach)
            }
            None => None,
        };
        let needs = |id: NodeId| wanted.as_ref().is_none_or(|r| r[id.0]);

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[node.0] = Some(seed);
        for i in (0..=node.0).rev() {
            let n = &self.nodes[i];
            if n.stop_gradient || n.parents.is_empty() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (slot, pg) in self.local_grads(n, &g, &needs) {
                accumulate(&mut grads[n.parents[slot].0], pg);
            }
            grads[i] = Some(g);
        }
        Ok(GradientMap { grads })
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id.0))
    }

    /// Gradient contributions to each parent slot of `n` given output gradient `g`.
    fn local_grads(&self, n: &Node, g: &Tensor, needs: &dyn Fn(NodeId) -> bool) -> Vec<(usize, Tensor)> {
        let val = |slot: usize| &self.nodes[n.parents[slot].0].value;
        let want = |slot: usize| needs(n.parents[slot]);
        let mut out = Vec::with_capacity(2);
        match &n.op {
            Op::Add | Op::Sub => {
                if want(0) {
                    out.push((0, g.clone()));
                }
                if want(1) {
                    let rhs_shape = val(1).shape();
                    let mut gb = if is_row_broadcast(g.shape(), rhs_shape) && g.shape() != rhs_shape {
                        column_sums(g, rhs_shape)
                    } else {
                        g.clone()
                    };
                    if n.op == Op::Sub {
                        gb = gb.scale(-1.0);
                    }
                    out.push((1, gb));
                }
            }
            Op::Mul => {
                if want(0) {
                    out.push((0, g.mul(val(1)).expect("shapes checked at record")));
                }
                if want(1) {
                    out.push((1, g.mul(val(0)).expect("shapes checked at record")));
                }
            }
            Op::Scale(c) => out.push((0, g.scale(*c))),
            Op::Shift(_) | Op::StopGradient => out.push((0, g.clone())),
            Op::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k, cols) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                if want(0) {
                    let mut ga = Tensor::zeros(&[m, k]);
                    gemm(
                        m,
                        cols,
                        k,
                        MatRef::row_major(g.data(), cols),
                        MatRef::transposed(b.data(), cols),
                        ga.data_mut(),
                    );
                    out.push((0, ga));
                }
                if want(1) {
                    let mut gb = Tensor::zeros(&[k, cols]);
                    gemm(
                        k,
                        m,
                        cols,
                        MatRef::transposed(a.data(), k),
                        MatRef::row_major(g.data(), cols),
                        gb.data_mut(),
                    );
                    out.push((1, gb));
                }
            }
            Op::Relu => {
                let x = val(0);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                out.push((0, Tensor::new(x.shape().to_vec(), data).expect("same shape")));
            }
            Op::SumAll => out.push((0, Tensor::full(val(0).shape(), g.item()))),
            Op::SumRows => {
                let x = val(0);
                let c = x.cols();
                let data = g.data().iter().flat_map(|&gi| std::iter::repeat_n(gi, c)).collect();
                out.push((0, Tensor::new(x.shape().to_vec(), data).expect("same shape")));
            }
            Op::MaxRows => {
                let x = val(0);
                let c = x.cols();
                let mut gx = Tensor::zeros(x.shape());
                for (r, row) in x.data().chunks(c).enumerate() {
                    gx.data_mut()[r * c + first_argmax(row)] = g.data()[r];
                }
                out.push((0, gx));
            }
            Op::LogSumExpRows => {
                let x = val(0);
                let c = x.cols();
                let mut gx = x.softmax_rows().expect("matrix checked at record");
                for (r, row) in gx.data_mut().chunks_mut(c).enumerate() {
                    let gr = g.data()[r];
                    row.iter_mut().for_each(|v| *v *= gr);
                }
                out.push((0, gx));
            }
            Op::Gather { indices, k } => {
                let x = val(0);
                let c = x.cols();
                let mut gx = Tensor::zeros(x.shape());
                for (pos, &idx) in indices.iter().enumerate() {
                    gx.data_mut()[(pos / k) * c + idx] += g.data()[pos];
                }
                out.push((0, gx));
            }
            Op::Input | Op::Param => {}
        }
        out
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

fn column_sums(g: &Tensor, shape: &[usize]) -> Tensor {
    let c = g.cols();
    let mut sums = vec![0.0; c];
    for row in g.data().chunks(c) {
        sums.iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    Tensor::new(shape.to_vec(), sums).expect("row-broadcast shape")
}
