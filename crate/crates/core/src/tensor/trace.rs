//! Operation trace and reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. Backward passes are
//! expressed through the same builders, so the nodes produced by [`Trace::grad`]
//! can be differentiated again; that is how second-order quantities such as
//! `∇_x ⟨∇_w L, v⟩` are obtained without any explicit Hessian code.

use super::{broadcast_shape, kernels, Tensor};
use crate::error::{Error, Result};
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

static NEXT_TRACE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node in a [`Trace`]. Cheap to copy; only valid on the trace
/// that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    trace: u64,
    id: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Abs(usize),
    Relu(usize),
    // derivative-zero ops (subgradient convention at the kinks)
    Sign(usize),
    StepMask(usize),
    Scale(usize, f64),
    Matmul { a: usize, b: usize, ta: bool, tb: bool },
    Conv2d { x: usize, w: usize, stride: usize, pad: usize },
    Conv2dDx { g: usize, w: usize, stride: usize, pad: usize },
    Conv2dDw { g: usize, x: usize, stride: usize, pad: usize },
    AvgPool2d { x: usize, k: usize },
    AvgUnpool2d { g: usize, k: usize },
    Reshape(usize),
    Broadcast(usize),
    Pad { x: usize, before: Vec<usize> },
    Slice { x: usize, start: Vec<usize> },
    Sum { x: usize, axes: Option<Vec<usize>>, keep: bool },
    Mean { x: usize, axes: Option<Vec<usize>>, keep: bool },
    Concat { xs: Vec<usize>, axis: usize },
}

impl Op {
    fn inputs(&self, out: &mut Vec<usize>) {
        out.clear();
        match self {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                out.push(*a);
                out.push(*b);
            }
            Op::Neg(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sqrt(x)
            | Op::Abs(x)
            | Op::Relu(x)
            | Op::Sign(x)
            | Op::StepMask(x)
            | Op::Scale(x, _)
            | Op::Reshape(x)
            | Op::Broadcast(x)
            | Op::Pad { x, .. }
            | Op::Slice { x, .. }
            | Op::Sum { x, .. }
            | Op::Mean { x, .. }
            | Op::AvgPool2d { x, .. }
            | Op::AvgUnpool2d { g: x, .. } => out.push(*x),
            Op::Matmul { a, b, .. } => {
                out.push(*a);
                out.push(*b);
            }
            Op::Conv2d { x, w, .. } => {
                out.push(*x);
                out.push(*w);
            }
            Op::Conv2dDx { g, w, .. } => {
                out.push(*g);
                out.push(*w);
            }
            Op::Conv2dDw { g, x, .. } => {
                out.push(*g);
                out.push(*x);
            }
            Op::Concat { xs, .. } => out.extend_from_slice(xs),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// A record of tensor operations forming a DAG; owns all intermediate values.
/// One trace per reconstruction task; traces are not shared across threads.
pub struct Trace {
    trace_id: u64,
    nodes: Vec<Node>,
}

impl Default for Trace {
    fn default() -> Self {
        Self::new()
    }
}

impl Trace {
    pub fn new() -> Self {
        Trace {
            trace_id: NEXT_TRACE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Checkpoint for [`Trace::rollback`].
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drop every node appended after `mark`. Only sound when no live `Var`
    /// past the mark will be used again.
    pub fn rollback(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { op, value });
        Var { trace: self.trace_id, id }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.trace != self.trace_id || v.id >= self.nodes.len() {
            return Err(Error::TraceMismatch);
        }
        Ok(v.id)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.trace, self.trace_id, "Var from another trace");
        &self.nodes[v.id].value
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// A non-differentiable input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Const, value)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.push(Op::Const, Tensor::scalar(value))
    }

    /// Broadcast both operands to a common shape, inserting explicit
    /// broadcast nodes so the binary primitive sees equal shapes.
    fn coerce_pair(&mut self, a: Var, b: Var) -> Result<(usize, usize)> {
        let ai = self.check(a)?;
        let bi = self.check(b)?;
        let sa = self.nodes[ai].value.shape().to_vec();
        let sb = self.nodes[bi].value.shape().to_vec();
        if sa == sb {
            return Ok((ai, bi));
        }
        let target = broadcast_shape(&sa, &sb)?;
        let ai = if sa != target { self.broadcast_idx(ai, &target)? } else { ai };
        let bi = if sb != target { self.broadcast_idx(bi, &target)? } else { bi };
        Ok((ai, bi))
    }

    fn broadcast_idx(&mut self, x: usize, shape: &[usize]) -> Result<usize> {
        let value = kernels::broadcast_to(&self.nodes[x].value, shape)?;
        Ok(self.push(Op::Broadcast(x), value).id)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.coerce_pair(a, b)?;
        let value = kernels::add(&self.nodes[ai].value, &self.nodes[bi].value)?;
        Ok(self.push(Op::Add(ai, bi), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.coerce_pair(a, b)?;
        let value = kernels::sub(&self.nodes[ai].value, &self.nodes[bi].value)?;
        Ok(self.push(Op::Sub(ai, bi), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.coerce_pair(a, b)?;
        let value = kernels::mul(&self.nodes[ai].value, &self.nodes[bi].value)?;
        Ok(self.push(Op::Mul(ai, bi), value))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.coerce_pair(a, b)?;
        let value = kernels::div(&self.nodes[ai].value, &self.nodes[bi].value)?;
        Ok(self.push(Op::Div(ai, bi), value))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = kernels::neg(&self.nodes[xi].value);
        Ok(self.push(Op::Neg(xi), value))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = kernels::exp(&self.nodes[xi].value);
        Ok(self.push(Op::Exp(xi), value))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = kernels::log(&self.nodes[xi].value)?;
        Ok(self.push(Op::Log(xi), value))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = kernels::sqrt(&self.nodes[xi].value)?;
        Ok(self.push(Op::Sqrt(xi), value))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = kernels::abs(&self.nodes[xi].value);
        Ok(self.push(Op::Abs(xi), value))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = kernels::relu(&self.nodes[xi].value);
        Ok(self.push(Op::Relu(xi), value))
    }

    pub fn sign(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = kernels::sign(&self.nodes[xi].value);
        Ok(self.push(Op::Sign(xi), value))
    }

    pub fn step_mask(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let value = kernels::step_mask(&self.nodes[xi].value);
        Ok(self.push(Op::StepMask(xi), value))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let value = kernels::scale(&self.nodes[xi].value, c);
        Ok(self.push(Op::Scale(xi, c), value))
    }

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let ai = self.check(a)?;
        let bi = self.check(b)?;
        let value = kernels::matmul(&self.nodes[ai].value, &self.nodes[bi].value, ta, tb)?;
        Ok(self.push(Op::Matmul { a: ai, b: bi, ta, tb }, value))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let wi = self.check(w)?;
        let value = kernels::conv2d(&self.nodes[xi].value, &self.nodes[wi].value, stride, pad)?;
        Ok(self.push(Op::Conv2d { x: xi, w: wi, stride, pad }, value))
    }

    fn conv2d_dx_idx(&mut self, g: usize, w: usize, stride: usize, pad: usize, xshape: &[usize]) -> Result<usize> {
        let value =
            kernels::conv2d_dx(&self.nodes[g].value, &self.nodes[w].value, stride, pad, xshape)?;
        Ok(self.push(Op::Conv2dDx { g, w, stride, pad }, value).id)
    }

    fn conv2d_dw_idx(&mut self, g: usize, x: usize, stride: usize, pad: usize, wshape: &[usize]) -> Result<usize> {
        let value =
            kernels::conv2d_dw(&self.nodes[g].value, &self.nodes[x].value, stride, pad, wshape)?;
        Ok(self.push(Op::Conv2dDw { g, x, stride, pad }, value).id)
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let value = kernels::avg_pool2d(&self.nodes[xi].value, k)?;
        Ok(self.push(Op::AvgPool2d { x: xi, k }, value))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.reshaped(shape)?;
        Ok(self.push(Op::Reshape(xi), value))
    }

    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let id = self.broadcast_idx(xi, shape)?;
        Ok(Var { trace: self.trace_id, id })
    }

    pub fn pad(&mut self, x: Var, before: &[usize], after: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let value = kernels::pad(&self.nodes[xi].value, before, after)?;
        Ok(self.push(Op::Pad { x: xi, before: before.to_vec() }, value))
    }

    pub fn slice(&mut self, x: Var, start: &[usize], len: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let value = kernels::slice(&self.nodes[xi].value, start, len)?;
        Ok(self.push(Op::Slice { x: xi, start: start.to_vec() }, value))
    }

    pub fn sum(&mut self, x: Var, axes: Option<&[usize]>, keep: bool) -> Result<Var> {
        let xi = self.check(x)?;
        let value = kernels::sum(&self.nodes[xi].value, axes, keep)?;
        Ok(self.push(Op::Sum { x: xi, axes: axes.map(|a| a.to_vec()), keep }, value))
    }

    pub fn mean(&mut self, x: Var, axes: Option<&[usize]>, keep: bool) -> Result<Var> {
        let xi = self.check(x)?;
        let value = kernels::mean(&self.nodes[xi].value, axes, keep)?;
        Ok(self.push(Op::Mean { x: xi, axes: axes.map(|a| a.to_vec()), keep }, value))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let mut ids = Vec::with_capacity(xs.len());
        for &x in xs {
            ids.push(self.check(x)?);
        }
        let tensors: Vec<&Tensor> = ids.iter().map(|&i| &self.nodes[i].value).collect();
        let value = kernels::concat(&tensors, axis)?;
        Ok(self.push(Op::Concat { xs: ids, axis }, value))
    }

    // ---- composites ----

    /// `sqrt(sum(x²))` over all elements.
    pub fn l2norm(&mut self, x: Var) -> Result<Var> {
        let sq = self.mul(x, x)?;
        let s = self.sum(sq, None, false)?;
        self.sqrt(s)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let prod = self.mul(a, b)?;
        self.sum(prod, None, false)
    }

    /// Mean cross-entropy from logits `[B, N]` against integer labels.
    ///
    /// Built from primitives (shift by a constant row max, exp, sum, log) so
    /// the whole thing — including its backward pass — stays differentiable.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.check(logits)?;
        let shape = self.nodes[li].value.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(alloc::format!(
                "cross-entropy expects [B, N] logits, got {shape:?}"
            )));
        }
        let (b, n) = (shape[0], shape[1]);
        if labels.len() != b {
            return Err(Error::shape(alloc::format!(
                "{} labels for batch of {b}",
                labels.len()
            )));
        }
        let mut onehot = vec![0.0f64; b * n];
        for (i, &y) in labels.iter().enumerate() {
            if y >= n {
                return Err(Error::LabelOutOfRange { label: y, classes: n });
            }
            onehot[i * n + y] = 1.0;
        }
        let targets = self.constant(Tensor::from_parts(vec![b, n], onehot));
        self.cross_entropy_soft(logits, targets)
    }

    /// Mean cross-entropy from logits `[B, N]` against a probability matrix
    /// `[B, N]` (rows need not be exactly normalized; the log-partition term
    /// is weighted by each row's mass).
    pub fn cross_entropy_soft(&mut self, logits: Var, targets: Var) -> Result<Var> {
        let li = self.check(logits)?;
        let shape = self.nodes[li].value.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(alloc::format!(
                "cross-entropy expects [B, N] logits, got {shape:?}"
            )));
        }
        let (b, n) = (shape[0], shape[1]);
        if self.value(targets).shape() != [b, n] {
            return Err(Error::shape(alloc::format!(
                "target probabilities must be [{b}, {n}]"
            )));
        }
        // row maxima as a constant: exact for any shift, keeps exp in range
        let mut maxes = vec![0.0f64; b];
        {
            let ld = self.nodes[li].value.data();
            for i in 0..b {
                let row = &ld[i * n..(i + 1) * n];
                maxes[i] = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            }
        }
        let m = self.constant(Tensor::from_parts(vec![b, 1], maxes));
        let shifted = self.sub(logits, m)?;
        let e = self.exp(shifted)?;
        let se = self.sum(e, Some(&[1]), true)?;
        let lse_shift = self.log(se)?;
        let lse = self.add(lse_shift, m)?; // [B,1]
        let tmass = self.sum(targets, Some(&[1]), true)?; // [B,1]
        let lse_term = self.mul(lse, tmass)?;
        let prod = self.mul(logits, targets)?;
        let picked = self.sum(prod, Some(&[1]), true)?; // [B,1]
        let per_sample = self.sub(lse_term, picked)?;
        self.mean(per_sample, None, false)
    }

    /// Reverse-mode gradient of a scalar `output` with respect to `wrt`.
    ///
    /// The returned vars live on the same trace and are built from ordinary
    /// ops, so they can be differentiated again. A `wrt` node the output does
    /// not depend on gets a zero tensor.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let oi = self.check(output)?;
        if !self.nodes[oi].value.is_scalar() {
            return Err(Error::NotScalar);
        }
        let mut wrt_ids = Vec::with_capacity(wrt.len());
        for &v in wrt {
            wrt_ids.push(self.check(v)?);
        }
        let start = self.nodes.len();

        // reachable subgraph below the output
        let mut reachable = vec![false; start];
        let mut stack = vec![oi];
        reachable[oi] = true;
        let mut inbuf = Vec::new();
        while let Some(id) = stack.pop() {
            self.nodes[id].op.inputs(&mut inbuf);
            for &i in &inbuf {
                if !reachable[i] {
                    reachable[i] = true;
                    stack.push(i);
                }
            }
        }

        let mut cot: Vec<Option<Var>> = vec![None; start];
        let oshape = self.nodes[oi].value.shape().to_vec();
        cot[oi] = Some(self.constant(Tensor::ones(&oshape)));

        for id in (0..start).rev() {
            if !reachable[id] {
                continue;
            }
            let g = match cot[id] {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[id].op.clone();
            self.backprop(id, &op, g, &mut cot)?;
        }

        let mut out = Vec::with_capacity(wrt_ids.len());
        for &wi in &wrt_ids {
            match cot[wi] {
                Some(g) => out.push(g),
                None => {
                    let shape = self.nodes[wi].value.shape().to_vec();
                    out.push(self.constant(Tensor::zeros(&shape)));
                }
            }
        }
        Ok(out)
    }

    fn accumulate(&mut self, cot: &mut [Option<Var>], target: usize, contrib: Var) -> Result<()> {
        // constants absorb no gradient; skip so the graph stays lean
        if matches!(self.nodes[target].op, Op::Const) {
            return Ok(());
        }
        cot[target] = Some(match cot[target] {
            Some(prev) => self.add(prev, contrib)?,
            None => contrib,
        });
        Ok(())
    }

    fn var_of(&self, id: usize) -> Var {
        Var { trace: self.trace_id, id }
    }

    fn backprop(&mut self, id: usize, op: &Op, g: Var, cot: &mut [Option<Var>]) -> Result<()> {
        match *op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                self.accumulate(cot, a, g)?;
                self.accumulate(cot, b, g)?;
            }
            Op::Sub(a, b) => {
                self.accumulate(cot, a, g)?;
                let nb = self.neg(g)?;
                self.accumulate(cot, b, nb)?;
            }
            Op::Mul(a, b) => {
                let da = self.mul(g, self.var_of(b))?;
                self.accumulate(cot, a, da)?;
                let db = self.mul(g, self.var_of(a))?;
                self.accumulate(cot, b, db)?;
            }
            Op::Div(a, b) => {
                let da = self.div(g, self.var_of(b))?;
                self.accumulate(cot, a, da)?;
                // d/db (a/b) = -(a/b)/b, reusing this node's own output
                let q = self.div(self.var_of(id), self.var_of(b))?;
                let gq = self.mul(g, q)?;
                let db = self.neg(gq)?;
                self.accumulate(cot, b, db)?;
            }
            Op::Neg(x) => {
                let dx = self.neg(g)?;
                self.accumulate(cot, x, dx)?;
            }
            Op::Exp(x) => {
                let dx = self.mul(g, self.var_of(id))?;
                self.accumulate(cot, x, dx)?;
            }
            Op::Log(x) => {
                let dx = self.div(g, self.var_of(x))?;
                self.accumulate(cot, x, dx)?;
            }
            Op::Sqrt(x) => {
                let two_y = self.scale(self.var_of(id), 2.0)?;
                let dx = self.div(g, two_y)?;
                self.accumulate(cot, x, dx)?;
            }
            Op::Abs(x) => {
                let s = self.sign(self.var_of(x))?;
                let dx = self.mul(g, s)?;
                self.accumulate(cot, x, dx)?;
            }
            Op::Relu(x) => {
                let m = self.step_mask(self.var_of(x))?;
                let dx = self.mul(g, m)?;
                self.accumulate(cot, x, dx)?;
            }
            Op::Sign(_) | Op::StepMask(_) => {
                // zero derivative almost everywhere
            }
            Op::Scale(x, c) => {
                let dx = self.scale(g, c)?;
                self.accumulate(cot, x, dx)?;
            }
            Op::Matmul { a, b, ta, tb } => {
                let (av, bv) = (self.var_of(a), self.var_of(b));
                let da = if !ta {
                    self.matmul(g, bv, false, !tb)?
                } else {
                    self.matmul(bv, g, tb, true)?
                };
                self.accumulate(cot, a, da)?;
                let db = if !tb {
                    self.matmul(av, g, !ta, false)?
                } else {
                    self.matmul(g, av, true, ta)?
                };
                self.accumulate(cot, b, db)?;
            }
            Op::Conv2d { x, w, stride, pad } => {
                let xshape = self.nodes[x].value.shape().to_vec();
                let wshape = self.nodes[w].value.shape().to_vec();
                let dx = self.conv2d_dx_idx(g.id, w, stride, pad, &xshape)?;
                self.accumulate(cot, x, self.var_of(dx))?;
                let dw = self.conv2d_dw_idx(g.id, x, stride, pad, &wshape)?;
                self.accumulate(cot, w, self.var_of(dw))?;
            }
            Op::Conv2dDx { g: g0, w, stride, pad } => {
                // this node's output has the conv input's shape; its cotangent
                // u plays the role of a conv input
                let wshape = self.nodes[w].value.shape().to_vec();
                let dg = self.conv2d(g, self.var_of(w), stride, pad)?;
                self.accumulate(cot, g0, dg)?;
                let dw = self.conv2d_dw_idx(g0, g.id, stride, pad, &wshape)?;
                self.accumulate(cot, w, self.var_of(dw))?;
            }
            Op::Conv2dDw { g: g0, x, stride, pad } => {
                // cotangent v is kernel-shaped
                let xshape = self.nodes[x].value.shape().to_vec();
                let dg = self.conv2d(self.var_of(x), g, stride, pad)?;
                self.accumulate(cot, g0, dg)?;
                let dx = self.conv2d_dx_idx(g0, g.id, stride, pad, &xshape)?;
                self.accumulate(cot, x, self.var_of(dx))?;
            }
            Op::AvgPool2d { x, k } => {
                let value = kernels::avg_unpool2d(self.value(g), k)?;
                let dx = self.push(Op::AvgUnpool2d { g: g.id, k }, value);
                self.accumulate(cot, x, dx)?;
            }
            Op::AvgUnpool2d { g: g0, k } => {
                let dg = self.avg_pool2d(g, k)?;
                self.accumulate(cot, g0, dg)?;
            }
            Op::Reshape(x) => {
                let xshape = self.nodes[x].value.shape().to_vec();
                let dx = self.reshape(g, &xshape)?;
                self.accumulate(cot, x, dx)?;
            }
            Op::Broadcast(x) => {
                let xshape = self.nodes[x].value.shape().to_vec();
                let oshape = self.nodes[id].value.shape().to_vec();
                let pad = oshape.len() - xshape.len();
                let axes: Vec<usize> = (0..oshape.len())
                    .filter(|&d| {
                        let xdim = if d < pad { 1 } else { xshape[d - pad] };
                        xdim == 1 && oshape[d] != 1
                    })
                    .collect();
                let reduced =
                    if axes.is_empty() { g } else { self.sum(g, Some(&axes), true)? };
                let dx = self.reshape(reduced, &xshape)?;
                self.accumulate(cot, x, dx)?;
            }
            Op::Pad { x, ref before, .. } => {
                let xshape = self.nodes[x].value.shape().to_vec();
                let dx = self.slice(g, before, &xshape)?;
                self.accumulate(cot, x, dx)?;
            }
            Op::Slice { x, ref start } => {
                let xshape = self.nodes[x].value.shape().to_vec();
                let oshape = self.nodes[id].value.shape().to_vec();
                let after: Vec<usize> =
                    (0..xshape.len()).map(|d| xshape[d] - start[d] - oshape[d]).collect();
                let dx = self.pad(g, start, &after)?;
                self.accumulate(cot, x, dx)?;
            }
            Op::Sum { x, ref axes, keep } => {
                let dx = self.spread_reduction(g, x, axes.as_deref(), keep, 1.0)?;
                self.accumulate(cot, x, dx)?;
            }
            Op::Mean { x, ref axes, keep } => {
                let count = kernels::reduce_count(self.nodes[x].value.shape(), axes.as_deref());
                let dx =
                    self.spread_reduction(g, x, axes.as_deref(), keep, 1.0 / count as f64)?;
                self.accumulate(cot, x, dx)?;
            }
            Op::Concat { ref xs, axis } => {
                let oshape = self.nodes[id].value.shape().to_vec();
                let mut offset = 0usize;
                for &xi in xs {
                    let xshape = self.nodes[xi].value.shape().to_vec();
                    let mut start = vec![0usize; oshape.len()];
                    start[axis] = offset;
                    let dx = self.slice(g, &start, &xshape)?;
                    self.accumulate(cot, xi, dx)?;
                    offset += xshape[axis];
                }
            }
        }
        Ok(())
    }

    /// Expand a reduction cotangent back to the input shape, scaled.
    fn spread_reduction(
        &mut self,
        g: Var,
        x: usize,
        axes: Option<&[usize]>,
        keep: bool,
        factor: f64,
    ) -> Result<Var> {
        let xshape = self.nodes[x].value.shape().to_vec();
        let keepshape = kernels::reduce_shape(&xshape, axes, true)?;
        let g = if keep { g } else { self.reshape(g, &keepshape)? };
        let spread = self.broadcast(g, &xshape)?;
        if factor == 1.0 {
            Ok(spread)
        } else {
            self.scale(spread, factor)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        math::abs(a - b) <= tol
    }

    #[test]
    fn polynomial_derivative() {
        // d(x²)/dx at x = 3 is 6
        let mut tr = Trace::new();
        let x = tr.leaf(Tensor::scalar(3.0));
        let y = tr.mul(x, x).unwrap();
        let g = tr.grad(y, &[x]).unwrap();
        assert_eq!(tr.value(g[0]).item().unwrap(), 6.0);
    }

    #[test]
    fn relu_subgradient() {
        let mut tr = Trace::new();
        let x = tr.leaf(Tensor::from_slice(&[-1.0, 2.0]));
        let r = tr.relu(x).unwrap();
        let s = tr.sum(r, None, false).unwrap();
        let g = tr.grad(s, &[x]).unwrap();
        assert_eq!(tr.value(g[0]).data(), &[0.0, 1.0]);
    }

    #[test]
    fn second_derivative_of_cube() {
        // d²(x³)/dx² at x = 2 is 12
        let mut tr = Trace::new();
        let x = tr.leaf(Tensor::scalar(2.0));
        let x2 = tr.mul(x, x).unwrap();
        let x3 = tr.mul(x2, x).unwrap();
        let g1 = tr.grad(x3, &[x]).unwrap()[0];
        let g2 = tr.grad(g1, &[x]).unwrap()[0];
        assert!(approx(tr.value(g2).item().unwrap(), 12.0, 1e-12));
    }

    #[test]
    fn grad_of_unused_leaf_is_zero() {
        let mut tr = Trace::new();
        let x = tr.leaf(Tensor::scalar(1.0));
        let z = tr.leaf(Tensor::from_slice(&[5.0, 6.0]));
        let y = tr.mul(x, x).unwrap();
        let g = tr.grad(y, &[z]).unwrap();
        assert_eq!(tr.value(g[0]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn grad_rejects_nonscalar_and_foreign_vars() {
        let mut tr = Trace::new();
        let x = tr.leaf(Tensor::from_slice(&[1.0, 2.0]));
        assert_eq!(tr.grad(x, &[x]).unwrap_err(), Error::NotScalar);

        let mut other = Trace::new();
        let z = other.leaf(Tensor::scalar(1.0));
        let y = tr.sum(x, None, false).unwrap();
        assert_eq!(tr.grad(y, &[z]).unwrap_err(), Error::TraceMismatch);
    }

    #[test]
    fn uniform_logits_loss_is_ln_n() {
        let mut tr = Trace::new();
        let logits = tr.leaf(Tensor::zeros(&[2, 5]));
        let loss = tr.softmax_cross_entropy(logits, &[3, 0]).unwrap();
        assert!(approx(tr.value(loss).item().unwrap(), math::ln(5.0), 1e-12));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tr = Trace::new();
        let vals = [0.3, -1.2, 0.7, 0.1];
        let logits = tr.leaf(Tensor::new(vec![1, 4], vals.to_vec()).unwrap());
        let loss = tr.softmax_cross_entropy(logits, &[2]).unwrap();
        let g = tr.grad(loss, &[logits]).unwrap()[0];
        let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = vals.iter().map(|&v| math::exp(v - m)).collect();
        let z: f64 = e.iter().sum();
        for (j, &gv) in tr.value(g).data().iter().enumerate() {
            let expect = e[j] / z - if j == 2 { 1.0 } else { 0.0 };
            assert!(approx(gv, expect, 1e-12), "logit {j}: {gv} vs {expect}");
        }
    }

    #[test]
    fn matmul_gradient() {
        // y = sum(A @ B); dA = 1 @ Bᵀ, dB = Aᵀ @ 1
        let mut tr = Trace::new();
        let a = tr.leaf(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = tr.leaf(Tensor::new(vec![3, 2], vec![1., -1., 2., 0.5, 0., 3.]).unwrap());
        let y = tr.matmul(a, b, false, false).unwrap();
        let s = tr.sum(y, None, false).unwrap();
        let g = tr.grad(s, &[a, b]).unwrap();
        // row sums of b for dA
        assert_eq!(tr.value(g[0]).data(), &[0.0, 2.5, 3.0, 0.0, 2.5, 3.0]);
        // column sums of a for dB (each row of dB is col-sum of a at that k)
        assert_eq!(tr.value(g[1]).data(), &[5., 5., 7., 7., 9., 9.]);
    }

    #[test]
    fn broadcast_add_bias_gradient_sums_over_batch() {
        let mut tr = Trace::new();
        let x = tr.leaf(Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let bias = tr.leaf(Tensor::from_slice(&[10.0, 20.0]));
        let y = tr.add(x, bias).unwrap();
        let s = tr.sum(y, None, false).unwrap();
        let g = tr.grad(s, &[bias]).unwrap()[0];
        assert_eq!(tr.value(g).data(), &[3.0, 3.0]);
    }

    #[test]
    fn replay_determinism_bitwise() {
        let run = || {
            let mut tr = Trace::new();
            let x = tr.leaf(Tensor::from_slice(&[0.1, -0.4, 0.9]));
            let e = tr.exp(x).unwrap();
            let r = tr.relu(x).unwrap();
            let m = tr.mul(e, r).unwrap();
            let s = tr.mean(m, None, false).unwrap();
            let g = tr.grad(s, &[x]).unwrap()[0];
            (tr.value(s).clone(), tr.value(g).clone())
        };
        let (s1, g1) = run();
        let (s2, g2) = run();
        assert!(s1.bits_eq(&s2));
        assert!(g1.bits_eq(&g2));
    }

    #[test]
    fn rollback_discards_scratch_nodes() {
        let mut tr = Trace::new();
        let x = tr.leaf(Tensor::scalar(2.0));
        let mark = tr.mark();
        let y = tr.mul(x, x).unwrap();
        let _ = tr.grad(y, &[x]).unwrap();
        assert!(tr.len() > mark);
        tr.rollback(mark);
        assert_eq!(tr.len(), mark);
        // the original leaf is still usable
        let y2 = tr.mul(x, x).unwrap();
        assert_eq!(tr.value(y2).item().unwrap(), 4.0);
    }
}
