//! Reverse-mode differentiation over a recorded operation graph.
//!
//! A [`Graph`] records every primitive applied to its [`Var`]s. Nodes are
//! appended in evaluation order, so reverse creation order is a valid
//! topological order for [`Graph::backward`].
//!
//! Each node carries a region tag (see [`Graph::set_region`]); backward keeps
//! an exact count of backward-rule invocations per region. A shared
//! [`MemoryMeter`] counts the intermediate tensors that are retained for a
//! pending backward rule, which is what activation checkpointing trades
//! against recomputation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::Cell;

use crate::error::{shape_err, Error, Result};
use crate::param::{Gradients, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{
    broadcast_kind, dims3, dwconv_temporal, gelu_grad, matmul_dims, resize_weights, sigmoid,
    softplus, temporal_resize, Broadcast, ConvGeometry, Tensor,
};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Tag attached to every recorded node.
pub type Region = &'static str;

pub const DEFAULT_REGION: Region = "default";

/// A differentiable function from one tensor to another, replayable during
/// backward for checkpointed segments.
pub trait Block<T: Real> {
    fn forward(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var>;
}

/// Shared handle to a block; checkpointed segments keep these until backward.
pub type BlockRef<'a, T> = Rc<dyn Block<T> + 'a>;

impl<T: Real, F> Block<T> for F
where
    F: Fn(&mut Graph<'_, T>, Var) -> Result<Var>,
{
    fn forward(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        self(g, x)
    }
}

/// Counts intermediate tensors retained for pending backward rules.
///
/// Leaves (inputs and parameters) are not intermediates and are never
/// counted. A tensor saved by several rules counts once.
#[derive(Debug, Default)]
pub struct MemoryMeter {
    tensors: Cell<usize>,
    elements: Cell<usize>,
    peak_tensors: Cell<usize>,
    peak_elements: Cell<usize>,
}

impl MemoryMeter {
    pub fn new() -> Rc<Self> {
        Rc::new(Self::default())
    }

    fn acquire(&self, numel: usize) {
        self.tensors.set(self.tensors.get() + 1);
        self.elements.set(self.elements.get() + numel);
        self.peak_tensors
            .set(self.peak_tensors.get().max(self.tensors.get()));
        self.peak_elements
            .set(self.peak_elements.get().max(self.elements.get()));
    }

    fn release(&self, numel: usize) {
        self.tensors.set(self.tensors.get() - 1);
        self.elements.set(self.elements.get() - numel);
    }

    pub fn retained_tensors(&self) -> usize {
        self.tensors.get()
    }

    pub fn retained_elements(&self) -> usize {
        self.elements.get()
    }

    pub fn peak_tensors(&self) -> usize {
        self.peak_tensors.get()
    }

    pub fn peak_elements(&self) -> usize {
        self.peak_elements.get()
    }
}

enum Op<'a, T> {
    Leaf { param: Option<ParamId> },
    Add { a: Var, b: Var, bc: Broadcast },
    Sub { a: Var, b: Var, bc: Broadcast },
    Mul { a: Var, b: Var, bc: Broadcast },
    Scale { a: Var, s: T },
    MulScalar { x: Var, s: Var },
    MatMul { a: Var, b: Var },
    Gelu { a: Var },
    Softplus { a: Var },
    Sigmoid { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, inv_std: Vec<T> },
    Softmax { a: Var },
    Reshape { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    DwConv { x: Var, kernel: Var, bias: Var, geo: ConvGeometry },
    SpatialPool { a: Var },
    Resize { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    FocalLoss { logits: Var, labels: Rc<Vec<Option<usize>>>, alpha: T, gamma: T },
    IouLoss { pred: Var, target: Rc<Tensor<T>>, positive: Rc<Vec<bool>> },
    Checkpoint { input: Var, blocks: Vec<BlockRef<'a, T>> },
}

struct Node<'a, T> {
    value: Rc<Tensor<T>>,
    op: Op<'a, T>,
    requires_grad: bool,
    region: Region,
    /// pending backward rules holding this value
    saved_refs: usize,
    /// vars whose values this node's backward rule holds
    saves: Vec<Var>,
}

/// Differentiation graph. One graph per logical execution context; it is
/// neither `Send` nor `Sync`.
pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    grad_enabled: bool,
    region: Region,
    counters: BTreeMap<Region, usize>,
    meter: Rc<MemoryMeter>,
    consumed: bool,
    bound_params: BTreeMap<ParamId, Var>,
    leaf_grads: BTreeMap<usize, Tensor<T>>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Self::with_meter(MemoryMeter::new(), true)
    }

    /// A graph that records values only; nothing in it requires gradients.
    pub fn no_grad() -> Self {
        Self::with_meter(MemoryMeter::new(), false)
    }

    pub fn with_meter(meter: Rc<MemoryMeter>, grad_enabled: bool) -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled,
            region: DEFAULT_REGION,
            counters: BTreeMap::new(),
            meter,
            consumed: false,
            bound_params: BTreeMap::new(),
            leaf_grads: BTreeMap::new(),
        }
    }

    pub fn meter(&self) -> &Rc<MemoryMeter> {
        &self.meter
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn set_region(&mut self, region: Region) -> Region {
        core::mem::replace(&mut self.region, region)
    }

    pub fn region(&self) -> Region {
        self.region
    }

    /// Number of backward rules invoked for nodes tagged `region`.
    pub fn backward_count(&self, region: Region) -> usize {
        self.counters.get(region).copied().unwrap_or(0)
    }

    pub fn backward_counts(&self) -> &BTreeMap<Region, usize> {
        &self.counters
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a non-parameter leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(&v.0)
    }

    // ---------------------------------------------------------------------
    // leaves

    /// A constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(Rc::new(t), requires_grad, None)
    }

    /// Binds a stored parameter. It requires a gradient iff it is trainable
    /// and this graph records gradients. Repeated binds return the same var.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound_params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let rg = p.trainable;
        let v = self.push_leaf(p.tensor.clone(), rg, Some(id));
        self.bound_params.insert(id, v);
        v
    }

    fn push_leaf(&mut self, value: Rc<Tensor<T>>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf { param },
            requires_grad: requires_grad && self.grad_enabled,
            region: self.region,
            saved_refs: 0,
            saves: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf { .. })
    }

    fn push(&mut self, value: Tensor<T>, op: Op<'a, T>, inputs: &[Var], saves: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad, saves)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<'a, T>, requires_grad: bool, saves: &[Var]) -> Var {
        let id = self.nodes.len();
        let mut kept = Vec::new();
        if requires_grad {
            for &s in saves {
                // a node may save its own output (softmax, sigmoid)
                if s.0 == id {
                    continue;
                }
                self.retain(s);
                kept.push(s);
            }
        }
        let self_save = requires_grad && saves.iter().any(|s| s.0 == id);
        self.nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            region: self.region,
            saved_refs: 0,
            saves: kept,
        });
        if self_save {
            self.retain(Var(id));
            self.nodes[id].saves.push(Var(id));
        }
        Var(id)
    }

    fn retain(&mut self, v: Var) {
        if self.is_leaf(v) {
            return;
        }
        let n = &mut self.nodes[v.0];
        if n.saved_refs == 0 {
            self.meter.acquire(n.value.numel());
        }
        n.saved_refs += 1;
    }

    fn release_saves(&mut self, i: usize) {
        let saves = core::mem::take(&mut self.nodes[i].saves);
        for s in saves {
            if self.is_leaf(s) {
                continue;
            }
            let n = &mut self.nodes[s.0];
            n.saved_refs -= 1;
            if n.saved_refs == 0 {
                self.meter.release(n.value.numel());
            }
        }
    }

    // ---------------------------------------------------------------------
    // primitives

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = broadcast_kind(self.shape(a), self.shape(b))
            .ok_or_else(|| shape_err("add", self.shape(a), self.shape(b)))?;
        let v = self.value(a).add(self.value(b))?.check_finite("add")?;
        Ok(self.push(v, Op::Add { a, b, bc }, &[a, b], &[]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = broadcast_kind(self.shape(a), self.shape(b))
            .ok_or_else(|| shape_err("sub", self.shape(a), self.shape(b)))?;
        let v = self.value(a).sub(self.value(b))?.check_finite("sub")?;
        Ok(self.push(v, Op::Sub { a, b, bc }, &[a, b], &[]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = broadcast_kind(self.shape(a), self.shape(b))
            .ok_or_else(|| shape_err("mul", self.shape(a), self.shape(b)))?;
        let v = self.value(a).mul(self.value(b))?.check_finite("mul")?;
        Ok(self.push(v, Op::Mul { a, b, bc }, &[a, b], &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a).scale(s).check_finite("scale")?;
        Ok(self.push(v, Op::Scale { a, s }, &[a], &[]))
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(shape_err("mul_scalar", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).item();
        let v = self.value(x).scale(sv).check_finite("mul_scalar")?;
        Ok(self.push(v, Op::MulScalar { x, s }, &[x, s], &[x, s]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?.check_finite("matmul")?;
        Ok(self.push(v, Op::MatMul { a, b }, &[a, b], &[a, b]))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).gelu().check_finite("gelu")?;
        Ok(self.push(v, Op::Gelu { a }, &[a], &[a]))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).softplus().check_finite("softplus")?;
        Ok(self.push(v, Op::Softplus { a }, &[a], &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).sigmoid().check_finite("sigmoid")?;
        let me = Var(self.nodes.len());
        Ok(self.push(v, Op::Sigmoid { a }, &[a], &[me]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (v, inv_std) = self.value(x).layer_norm(self.value(gamma), self.value(beta))?;
        let v = v.check_finite("layer_norm")?;
        Ok(self.push(
            v,
            Op::LayerNorm { x, gamma, beta, inv_std },
            &[x, gamma, beta],
            &[x, gamma],
        ))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).softmax().check_finite("softmax")?;
        let me = Var(self.nodes.len());
        Ok(self.push(v, Op::Softmax { a }, &[a], &[me]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape { a }, &[a], &[]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(a).permute(axes)?;
        Ok(self.push(v, Op::Permute { a, axes: axes.to_vec() }, &[a], &[]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(shape_err("transpose", self.shape(a), &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(a, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&tensors, axis)?;
        Ok(self.push(v, Op::Concat { parts: parts.to_vec(), axis }, parts, &[]))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a).slice(axis, start, end)?;
        Ok(self.push(v, Op::Slice { a, axis, start }, &[a], &[]))
    }

    /// Depth-wise temporal convolution of a `[t, s, c]` (or `[t, c]`)
    /// tensor with a `[c, k]` kernel and `[c]` bias.
    pub fn dwconv_temporal(&mut self, x: Var, kernel: Var, bias: Var, geo: ConvGeometry) -> Result<Var> {
        let v = dwconv_temporal(self.value(x), self.value(kernel), self.value(bias), geo)?
            .check_finite("dwconv_temporal")?;
        let v = if self.value(x).rank() == 2 {
            let (t, _, c) = dims3("dwconv_temporal", v.shape())?;
            v.reshape(&[t, c])?
        } else {
            v
        };
        Ok(self.push(
            v,
            Op::DwConv { x, kernel, bias, geo },
            &[x, kernel, bias],
            &[x, kernel],
        ))
    }

    /// `[t, s, c] -> [t, c]` mean over spatial sites.
    pub fn spatial_avg_pool(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).spatial_avg_pool()?;
        Ok(self.push(v, Op::SpatialPool { a }, &[a], &[]))
    }

    /// Endpoint-aligned linear resize of the time axis of a `[t, c]` tensor.
    pub fn temporal_resize(&mut self, a: Var, target: usize) -> Result<Var> {
        let v = temporal_resize(self.value(a), target)?;
        Ok(self.push(v, Op::Resize { a }, &[a], &[]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum()).check_finite("sum")?;
        Ok(self.push(v, Op::Sum { a }, &[a], &[]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = T::lit(self.value(a).numel() as f64);
        let v = Tensor::scalar(self.value(a).sum() / n).check_finite("mean")?;
        Ok(self.push(v, Op::Mean { a }, &[a], &[]))
    }

    /// Summed sigmoid focal loss of `[n, k]` logits against per-row labels
    /// (`None` marks background).
    pub fn focal_loss(
        &mut self,
        logits: Var,
        labels: Rc<Vec<Option<usize>>>,
        alpha: T,
        gamma: T,
    ) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(shape_err("focal_loss", lv.shape(), &[labels.len()]));
        }
        let k = lv.shape()[1];
        if labels.iter().flatten().any(|&c| c >= k) {
            return Err(shape_err("focal_loss", lv.shape(), &[k]));
        }
        let mut total = T::zero();
        for (i, row) in lv.data().chunks(k).enumerate() {
            for (c, &x) in row.iter().enumerate() {
                total += focal_term(x, labels[i] == Some(c), alpha, gamma).0;
            }
        }
        let v = Tensor::scalar(total).check_finite("focal_loss")?;
        Ok(self.push(
            v,
            Op::FocalLoss { logits, labels, alpha, gamma },
            &[logits],
            &[logits],
        ))
    }

    /// `Σ_{positive i} (1 - tIoU)` between predicted and target boundary
    /// distances, both `[n, 2]` holding (distance to start, distance to end)
    /// from the same anchor point.
    pub fn iou_loss(&mut self, pred: Var, target: Rc<Tensor<T>>, positive: Rc<Vec<bool>>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() || pv.rank() != 2 || pv.shape()[1] != 2 || positive.len() != pv.shape()[0] {
            return Err(shape_err("iou_loss", pv.shape(), target.shape()));
        }
        let mut total = T::zero();
        for (i, &pos) in positive.iter().enumerate() {
            if pos {
                let p = &pv.data()[2 * i..2 * i + 2];
                let t = &target.data()[2 * i..2 * i + 2];
                total += T::one() - offset_iou(p, t).0;
            }
        }
        let v = Tensor::scalar(total).check_finite("iou_loss")?;
        Ok(self.push(v, Op::IouLoss { pred, target, positive }, &[pred], &[pred]))
    }

    // ---------------------------------------------------------------------
    // checkpointing

    /// Applies `blocks` in order, holding only segment boundaries between
    /// forward and backward. Each segment of `segment_len` blocks is replayed
    /// during backward. `None` picks `ceil(sqrt(blocks.len()))`.
    pub fn checkpointed_sequence(
        &mut self,
        blocks: &[BlockRef<'a, T>],
        x: Var,
        segment_len: Option<usize>,
    ) -> Result<Var> {
        if blocks.is_empty() {
            return Ok(x);
        }
        let seg = segment_len
            .unwrap_or_else(|| default_segment_len(blocks.len()))
            .max(1);
        let mut cur = x;
        for chunk in blocks.chunks(seg) {
            cur = self.checkpoint_segment(chunk, cur)?;
        }
        Ok(cur)
    }

    fn checkpoint_segment(&mut self, blocks: &[BlockRef<'a, T>], x: Var) -> Result<Var> {
        let out = {
            let mut sub = Graph::with_meter(self.meter.clone(), false);
            sub.region = self.region;
            let mut cur = sub.input(self.value(x).clone());
            for b in blocks {
                cur = b.forward(&mut sub, cur)?;
            }
            sub.value(cur).clone()
        };
        let requires_grad = self.grad_enabled;
        Ok(self.push_raw(
            out,
            Op::Checkpoint { input: x, blocks: blocks.to_vec() },
            requires_grad,
            &[x],
        ))
    }

    /// Plain composition of the same blocks, for comparison.
    pub fn sequence(&mut self, blocks: &[BlockRef<'a, T>], x: Var) -> Result<Var> {
        let mut cur = x;
        for b in blocks {
            cur = b.forward(self, cur)?;
        }
        Ok(cur)
    }

    // ---------------------------------------------------------------------
    // backward

    /// Back-propagates from a scalar loss. Returns the gradients of trainable
    /// parameters; gradients of other leaves requiring them are available via
    /// [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward", self.shape(loss), &[1]));
        }
        let seed = Tensor::full(self.shape(loss), T::one());
        self.backward_with_seed(loss, seed)
    }

    /// Back-propagates an arbitrary upstream gradient for `out`.
    pub fn backward_with_seed(&mut self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::State("backward called twice on the same graph".into()));
        }
        if seed.shape() != self.shape(out) {
            return Err(shape_err("backward", self.shape(out), seed.shape()));
        }
        self.consumed = true;
        let mut params = Gradients::new();
        let mut grads: Vec<Option<Tensor<T>>> = (0..=out.0).map(|_| None).collect();
        if self.nodes[out.0].requires_grad {
            grads[out.0] = Some(seed);
        }
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf { param } = self.nodes[i].op {
                match param {
                    Some(id) => params.accumulate(id, g),
                    None => {
                        self.leaf_grads.insert(i, g);
                    }
                }
                continue;
            }
            let region = self.nodes[i].region;
            *self.counters.entry(region).or_insert(0) += 1;
            let rule = self.rule(i, &g)?;
            for (v, gv) in rule.inputs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&gv),
                    slot => *slot = Some(gv),
                }
            }
            if let Some(sub) = rule.nested {
                params.merge(sub.params);
                for (r, c) in sub.counters {
                    *self.counters.entry(r).or_insert(0) += c;
                }
            }
            self.release_saves(i);
        }
        Ok(params)
    }

    fn rule(&self, i: usize, g: &Tensor<T>) -> Result<RuleOut<T>> {
        let val = |v: Var| -> &Tensor<T> { &self.nodes[v.0].value };
        let mut out = RuleOut {
            inputs: Vec::new(),
            nested: None,
        };
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Add { a, b, bc } => {
                out.inputs.push((*a, reduce_for(g, val(*a), *bc, Side::Lhs)));
                out.inputs.push((*b, reduce_for(g, val(*b), *bc, Side::Rhs)));
            }
            Op::Sub { a, b, bc } => {
                out.inputs.push((*a, reduce_for(g, val(*a), *bc, Side::Lhs)));
                let gb = g.scale(-T::one());
                out.inputs.push((*b, reduce_for(&gb, val(*b), *bc, Side::Rhs)));
            }
            Op::Mul { a, b, bc } => {
                let ga = g.mul(val(*b))?;
                let gb = g.mul(val(*a))?;
                out.inputs.push((*a, reduce_for(&ga, val(*a), *bc, Side::Lhs)));
                out.inputs.push((*b, reduce_for(&gb, val(*b), *bc, Side::Rhs)));
            }
            Op::Scale { a, s } => out.inputs.push((*a, g.scale(*s))),
            Op::MulScalar { x, s } => {
                let sv = val(*s).item();
                out.inputs.push((*x, g.scale(sv)));
                let gs: T = g.data().iter().zip(val(*x).data()).map(|(&a, &b)| a * b).sum();
                out.inputs.push((*s, Tensor::full(val(*s).shape(), gs)));
            }
            Op::MatMul { a, b } => {
                let (ga, gb) = matmul_backward(val(*a), val(*b), g)?;
                out.inputs.push((*a, ga));
                out.inputs.push((*b, gb));
            }
            Op::Gelu { a } => {
                let d = zip_map(g, val(*a), |gi, x| gi * gelu_grad(x));
                out.inputs.push((*a, d));
            }
            Op::Softplus { a } => {
                let d = zip_map(g, val(*a), |gi, x| gi * sigmoid(x));
                out.inputs.push((*a, d));
            }
            Op::Sigmoid { a } => {
                let y = &self.nodes[i].value;
                let d = zip_map(g, y, |gi, y| gi * y * (T::one() - y));
                out.inputs.push((*a, d));
            }
            Op::LayerNorm { x, gamma, beta, inv_std } => {
                let (gx, gg, gb) = layer_norm_backward(val(*x), val(*gamma), inv_std, g);
                out.inputs.push((*x, gx));
                out.inputs.push((*gamma, gg));
                out.inputs.push((*beta, gb));
            }
            Op::Softmax { a } => {
                let y = &self.nodes[i].value;
                let d = *y.shape().last().unwrap();
                let mut gx = g.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (gi, &yi) in grow.iter_mut().zip(yrow) {
                        *gi = yi * (*gi - dot);
                    }
                }
                out.inputs.push((*a, gx));
            }
            Op::Reshape { a } => out.inputs.push((*a, g.reshape(val(*a).shape())?)),
            Op::Permute { a, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                out.inputs.push((*a, g.permute(&inv)?));
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    out.inputs.push((p, g.slice(*axis, start, start + len)?));
                    start += len;
                }
            }
            Op::Slice { a, axis, start } => {
                out.inputs.push((*a, slice_backward(val(*a).shape(), *axis, *start, g)));
            }
            Op::DwConv { x, kernel, bias, geo } => {
                let (gx, gk, gb) = dwconv_backward(val(*x), val(*kernel), *geo, g)?;
                out.inputs.push((*x, gx));
                out.inputs.push((*kernel, gk));
                out.inputs.push((*bias, gb.reshape(val(*bias).shape())?));
            }
            Op::SpatialPool { a } => {
                let (t, s, c) = dims3("spatial_avg_pool", val(*a).shape())?;
                let inv = T::one() / T::lit(s as f64);
                let gd = g.data();
                let gx = Tensor::from_fn(&[t, s, c], |idx| {
                    let ti = idx / (s * c);
                    let ch = idx % c;
                    gd[ti * c + ch] * inv
                });
                out.inputs.push((*a, gx.reshape(val(*a).shape())?));
            }
            Op::Resize { a } => {
                let shape = val(*a).shape();
                let (t, c) = (shape[0], shape[1]);
                let target = g.shape()[0];
                let mut gx = Tensor::zeros(shape);
                if target == t {
                    gx = g.clone();
                } else {
                    for (o, taps) in resize_weights(t, target).iter().enumerate() {
                        for &(src, w) in taps {
                            let w = T::lit(w);
                            for ch in 0..c {
                                gx.data_mut()[src * c + ch] += w * g.data()[o * c + ch];
                            }
                        }
                    }
                }
                out.inputs.push((*a, gx));
            }
            Op::Sum { a } => out.inputs.push((*a, Tensor::full(val(*a).shape(), g.item()))),
            Op::Mean { a } => {
                let n = T::lit(val(*a).numel() as f64);
                out.inputs.push((*a, Tensor::full(val(*a).shape(), g.item() / n)));
            }
            Op::FocalLoss { logits, labels, alpha, gamma } => {
                let lv = val(*logits);
                let k = lv.shape()[1];
                let up = g.item();
                let gx = Tensor::from_fn(lv.shape(), |idx| {
                    let (r, c) = (idx / k, idx % k);
                    up * focal_term(lv.data()[idx], labels[r] == Some(c), *alpha, *gamma).1
                });
                out.inputs.push((*logits, gx));
            }
            Op::IouLoss { pred, target, positive } => {
                let pv = val(*pred);
                let up = g.item();
                let mut gp = Tensor::zeros(pv.shape());
                for (r, &pos) in positive.iter().enumerate() {
                    if pos {
                        let (_, d) =
                            offset_iou(&pv.data()[2 * r..2 * r + 2], &target.data()[2 * r..2 * r + 2]);
                        gp.data_mut()[2 * r] = -up * d[0];
                        gp.data_mut()[2 * r + 1] = -up * d[1];
                    }
                }
                out.inputs.push((*pred, gp));
            }
            Op::Checkpoint { input, blocks } => {
                let mut sub = Graph::with_meter(self.meter.clone(), true);
                sub.region = self.nodes[i].region;
                let xin = sub.leaf(val(*input).clone(), self.nodes[input.0].requires_grad);
                let mut cur = xin;
                for b in blocks {
                    cur = b.forward(&mut sub, cur)?;
                }
                if sub.value(cur) != &*self.nodes[i].value {
                    return Err(Error::State(format!(
                        "checkpoint replay diverged from the recorded forward (node {i})"
                    )));
                }
                let params = sub.backward_with_seed(cur, g.clone())?;
                if let Some(gx) = sub.leaf_grads.remove(&xin.0) {
                    out.inputs.push((*input, gx));
                }
                out.nested = Some(Nested {
                    params,
                    counters: core::mem::take(&mut sub.counters),
                });
            }
        }
        Ok(out)
    }
}

impl<T: Real> Drop for Graph<'_, T> {
    fn drop(&mut self) {
        for i in 0..self.nodes.len() {
            self.release_saves(i);
        }
    }
}

pub fn default_segment_len(n_blocks: usize) -> usize {
    let mut s = 1;
    while s * s < n_blocks {
        s += 1;
    }
    s
}

struct Nested<T> {
    params: Gradients<T>,
    counters: BTreeMap<Region, usize>,
}

struct RuleOut<T> {
    inputs: Vec<(Var, Tensor<T>)>,
    nested: Option<Nested<T>>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    Lhs,
    Rhs,
}

/// Sums `g` over the broadcast rows when `operand` was the broadcast side.
fn reduce_for<T: Real>(g: &Tensor<T>, operand: &Tensor<T>, bc: Broadcast, side: Side) -> Tensor<T> {
    let broadcast = matches!((bc, side), (Broadcast::Rhs, Side::Rhs) | (Broadcast::Lhs, Side::Lhs));
    if !broadcast {
        return g.clone();
    }
    let row = operand.numel();
    let mut out = Tensor::zeros(operand.shape());
    for chunk in g.data().chunks(row) {
        for (o, &v) in out.data_mut().iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn zip_map<T: Real>(g: &Tensor<T>, x: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let mut out = g.clone();
    for (o, &xv) in out.data_mut().iter_mut().zip(x.data()) {
        *o = f(*o, xv);
    }
    out
}

fn matmul_backward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, g: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (batch, m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    for bi in 0..batch {
        let gs = &g.data()[bi * m * n..];
        // ga = g · bᵀ
        T::gemm(
            m,
            n,
            k,
            gs,
            (n, 1),
            &b.data()[bi * k * n..],
            (1, n),
            &mut ga.data_mut()[bi * m * k..],
            false,
        );
        // gb = aᵀ · g
        T::gemm(
            k,
            m,
            n,
            &a.data()[bi * m * k..],
            (1, k),
            gs,
            (n, 1),
            &mut gb.data_mut()[bi * k * n..],
            false,
        );
    }
    Ok((ga, gb))
}

fn layer_norm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    inv_std: &[T],
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = *x.shape().last().unwrap();
    let inv_d = T::one() / T::lit(d as f64);
    let mut gx = Tensor::zeros(x.shape());
    let mut gg = Tensor::zeros(gamma.shape());
    let mut gb = Tensor::zeros(gamma.shape());
    let mut xhat = vec![T::zero(); d];
    let mut dy = vec![T::zero(); d];
    for (r, &is) in inv_std.iter().enumerate() {
        let xr = &x.data()[r * d..(r + 1) * d];
        let gr = &g.data()[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for j in 0..d {
            xhat[j] = (xr[j] - mean) * is;
            dy[j] = gr[j] * gamma.data()[j];
            sum_dy += dy[j];
            sum_dy_xhat += dy[j] * xhat[j];
            gg.data_mut()[j] += gr[j] * xhat[j];
            gb.data_mut()[j] += gr[j];
        }
        let out = &mut gx.data_mut()[r * d..(r + 1) * d];
        for j in 0..d {
            out[j] = is * inv_d * (T::lit(d as f64) * dy[j] - sum_dy - xhat[j] * sum_dy_xhat);
        }
    }
    (gx, gg, gb)
}

fn slice_backward<T: Real>(shape: &[usize], axis: usize, start: usize, g: &Tensor<T>) -> Tensor<T> {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    let glen = g.shape()[axis];
    let mut out = Tensor::zeros(shape);
    for o in 0..outer {
        let dst = o * len * inner + start * inner;
        let src = o * glen * inner;
        out.data_mut()[dst..dst + glen * inner].copy_from_slice(&g.data()[src..src + glen * inner]);
    }
    out
}

fn dwconv_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    geo: ConvGeometry,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (t, s, c) = dims3("dwconv_temporal", x.shape())?;
    let k = kernel.shape()[1];
    let half = (k / 2) as isize;
    let plane = s * c;
    let mut gx = Tensor::zeros(x.shape());
    let mut gk = Tensor::zeros(kernel.shape());
    let mut gb = Tensor::zeros(&[c]);
    let kd = kernel.data();
    let xd = x.data();
    let gd = g.data();
    for (o, &(centre, lo, hi)) in geo.taps(t).iter().enumerate() {
        let grow = &gd[o * plane..(o + 1) * plane];
        for si in 0..s {
            for ch in 0..c {
                gb.data_mut()[ch] += grow[si * c + ch];
            }
        }
        for j in 0..k {
            let src = centre as isize + j as isize - half;
            if src < lo as isize || src >= hi as isize {
                continue;
            }
            let base = src as usize * plane;
            for si in 0..s {
                for ch in 0..c {
                    let gv = grow[si * c + ch];
                    gx.data_mut()[base + si * c + ch] += kd[ch * k + j] * gv;
                    gk.data_mut()[ch * k + j] += xd[base + si * c + ch] * gv;
                }
            }
        }
    }
    Ok((gx, gk, gb))
}

/// Sigmoid focal loss term for one logit and its derivative.
fn focal_term<T: Real>(x: T, positive: bool, alpha: T, gamma: T) -> (T, T) {
    let p = sigmoid(x);
    // log p and log(1 - p) without cancellation
    let log_p = -softplus(-x);
    let log_q = -softplus(x);
    let one = T::one();
    if positive {
        let q = one - p;
        let loss = -alpha * q.powf(gamma) * log_p;
        let d = alpha * q.powf(gamma) * (gamma * p * log_p - q);
        (loss, d)
    } else {
        let a = one - alpha;
        let loss = -a * p.powf(gamma) * log_q;
        let d = a * p.powf(gamma) * (p - gamma * (one - p) * log_q);
        (loss, d)
    }
}

/// tIoU between `[-p0, p1]` and `[-t0, t1]` and its gradient w.r.t. `p`.
fn offset_iou<T: Real>(p: &[T], t: &[T]) -> (T, [T; 2]) {
    let inter = p[0].min(t[0]) + p[1].min(t[1]);
    let union = p[0].max(t[0]) + p[1].max(t[1]);
    if union <= T::zero() {
        return (T::zero(), [T::zero(); 2]);
    }
    let iou = inter / union;
    let mut d = [T::zero(); 2];
    for j in 0..2 {
        let (di, du) = if p[j] < t[j] { (T::one(), T::zero()) } else { (T::zero(), T::one()) };
        d[j] = (di * union - inter * du) / (union * union);
    }
    (iou, d)
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let y = g.leaf(Tensor::scalar(3.0), true);
        let z = g.mul(x, y).unwrap();
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 3.0);
        assert_eq!(g.grad(y).unwrap().item(), 2.0);
    }

    #[test]
    fn independent_leaf_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let z = g.leaf(Tensor::scalar(5.0), true);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(z).map_or(true, |t| t.item() == 0.0));
        assert_eq!(g.grad(x).unwrap().item(), 4.0);
    }

    #[test]
    fn second_backward_is_a_state_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let y = g.gelu(x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::State(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(g.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn frozen_param_gets_no_gradient_and_untouched_region_counts_zero() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::full(&[2, 2], 0.5), false);
        let v = store.add("v", Tensor::full(&[2, 2], 0.25), true);
        let mut g = Graph::new();
        g.set_region("unused");
        let wv = g.param(&store, w);
        let _dead = g.gelu(wv).unwrap();
        g.set_region("live");
        let x = g.input(Tensor::full(&[1, 2], 1.0));
        let vv = g.param(&store, v);
        let y = g.matmul(x, vv).unwrap();
        let h = g.matmul(y, wv).unwrap();
        let l = g.sum(h).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(w).is_none());
        assert!(grads.get(v).is_some());
        assert_eq!(g.backward_count("unused"), 0);
        assert_eq!(g.backward_count("live"), 3);
    }

    #[test]
    fn meter_releases_after_backward() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[3], 0.3), true);
        let a = g.gelu(x).unwrap();
        let b = g.gelu(a).unwrap();
        let c = g.sum(b).unwrap();
        assert_eq!(g.meter().retained_tensors(), 1);
        g.backward(c).unwrap();
        assert_eq!(g.meter().retained_tensors(), 0);
        assert_eq!(g.meter().peak_tensors(), 1);
    }

    #[test]
    fn offset_iou_shifted_by_half() {
        // target [t-2, t+2], prediction [t, t+4]: overlap 2, union 6
        let (iou, _) = offset_iou(&[0.0f64, 4.0], &[2.0, 2.0]);
        assert!((iou - 1.0 / 3.0).abs() < 1e-15);
    }

    fn mlp_blocks<'a>(store: &'a ParamStore<f64>, ids: &'a [(ParamId, ParamId)]) -> Vec<BlockRef<'a, f64>> {
        ids.iter()
            .map(|&(w, b)| {
                Rc::new(move |g: &mut Graph<'_, f64>, x: Var| {
                    let wv = g.param(store, w);
                    let bv = g.param(store, b);
                    let h = g.matmul(x, wv)?;
                    let h = g.add(h, bv)?;
                    g.gelu(h)
                }) as BlockRef<'a, f64>
            })
            .collect()
    }

    fn run_blocks(store: &ParamStore<f64>, ids: &[(ParamId, ParamId)], x: &Tensor<f64>, seg: Option<usize>) -> (Gradients<f64>, Tensor<f64>, usize) {
        let meter = MemoryMeter::new();
        let mut g = Graph::with_meter(meter.clone(), true);
        let blocks = mlp_blocks(store, ids);
        let xv = g.leaf(x.clone(), true);
        let y = match seg {
            Some(s) => g.checkpointed_sequence(&blocks, xv, Some(s)).unwrap(),
            None => g.sequence(&blocks, xv).unwrap(),
        };
        let sq = g.mul(y, y).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        let gx = g.grad(xv).unwrap().clone();
        (grads, gx, meter.peak_elements())
    }

    #[test]
    fn checkpointed_sequence_matches_plain() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let d = 6;
        let ids: Vec<(ParamId, ParamId)> = (0..8)
            .map(|i| {
                let w = store.add(alloc::format!("w{i}"), crate::layers::uniform(&mut rng, &[d, d], 0.6), true);
                let b = store.add(alloc::format!("b{i}"), crate::layers::uniform(&mut rng, &[d], 0.1), true);
                (w, b)
            })
            .collect();
        let x: Tensor<f64> = crate::layers::uniform(&mut rng, &[10, d], 1.0);
        let (plain, gx_plain, peak_plain) = run_blocks(&store, &ids, &x, None);
        for seg in [1, 2, 3, 4, 8] {
            let (ck, gx, peak) = run_blocks(&store, &ids, &x, Some(seg));
            for (id, g) in plain.iter() {
                let c = ck.get(id).unwrap();
                for (a, b) in g.data().iter().zip(c.data()) {
                    assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300) || a == b, "{a} vs {b}");
                }
            }
            assert_eq!(gx_plain, gx);
            if seg == 4 {
                assert!(peak_plain >= 2 * peak, "plain {peak_plain} vs checkpointed {peak}");
            }
        }
    }

    #[test]
    fn no_grad_checkpoint_is_plain_forward() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::full(&[2, 2], 0.5), true);
        let b = store.add("b", Tensor::zeros(&[2]), true);
        let ids = [(w, b), (w, b)];
        let blocks = mlp_blocks(&store, &ids);
        let x = Tensor::new(alloc::vec![1, 2], alloc::vec![1.0, -2.0]).unwrap();
        let mut g = Graph::no_grad();
        let xv = g.input(x.clone());
        let a = g.checkpointed_sequence(&blocks, xv, None).unwrap();
        let mut h = Graph::no_grad();
        let xv = h.input(x);
        let b = h.sequence(&blocks, xv).unwrap();
        assert_eq!(g.value(a), h.value(b));
        assert!(!g.requires_grad(a));
    }
}
