//! Wengert tape: a topologically ordered list of primitive operations with
//! defined forward and adjoint rules.
//!
//! A [`Tape`] is built once and then treated as immutable; every evaluation
//! owns its per-call buffers ([`Evaluation`]), so concurrent evaluations of
//! one tape on different inputs are safe. A single forward/backward pass is
//! sequential and deterministic: the same bindings produce bit-identical
//! outputs on one platform.

use std::collections::BTreeMap;

use super::tensor::{broadcast_shape, broadcast_zip, Tensor};

/// Handle to a node on a tape. Ids are topologically ordered: operands
/// always precede their users.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Errors raised while building or evaluating a tape.
#[derive(Debug, thiserror::Error)]
pub enum TapeError {
    #[error("shape mismatch at node {node}: {detail}")]
    ShapeMismatch { node: usize, detail: String },

    #[error("input '{0}' is not bound")]
    UnboundInput(String),

    #[error("no input named '{0}' on this tape")]
    NoSuchInput(String),

    #[error("no output named '{0}' on this tape")]
    NoSuchOutput(String),

    #[error("node {node} is not a scalar (shape {shape:?}); gradients need a scalar output")]
    NonScalarOutput { node: usize, shape: Vec<usize> },

    #[error("forward pass incomplete: node {0} has no value")]
    Unevaluated(usize),

    #[error("input '{name}' bound after it was evaluated")]
    LateBinding { name: String },
}

/// One bilinear tap of a paste stencil: `out[.., out_px] += weight * src[.., in_px]`
/// applied identically on every channel plane.
#[derive(Clone, Debug)]
pub struct PasteTap {
    pub out_px: u32,
    pub in_px: u32,
    pub weight: f64,
}

/// Primitive operators. Every kind has a forward rule (in `Evaluation::step`)
/// and an adjoint rule (in `Evaluation::backward`).
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Input { name: String },
    Const { value: Tensor },

    // elementwise binary (broadcasting)
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Minimum(NodeId, NodeId),
    Maximum(NodeId, NodeId),

    // elementwise unary
    Exp(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Square(NodeId),
    Sqrt(NodeId),

    Softmax { input: NodeId, axis: usize },

    // reductions
    Sum { input: NodeId },
    SumAxis { input: NodeId, axis: usize },
    Mean { input: NodeId },
    MaxAxis { input: NodeId, axis: usize },

    // structure
    Reshape { input: NodeId, shape: Vec<usize> },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { input: NodeId, axis: usize, start: usize, len: usize },

    /// `out = input * mask`, with the mask treated as a constant selector:
    /// no gradient ever flows into the mask operand.
    ClipByMask { input: NodeId, mask: NodeId },

    Conv2d { input: NodeId, kernel: NodeId, bias: NodeId, stride: usize, pad: usize },

    /// Sparse linear paste: `out = base + Σ taps`, per channel plane.
    /// The stencil is fixed at build time (one sampled transform), so the op
    /// is exactly linear in `src`.
    BilinearPaste { src: NodeId, base: Tensor, taps: Vec<PasteTap> },
}

pub(crate) struct Node {
    pub op: Op,
    pub shape: Vec<usize>,
}

/// A frozen graph of primitive operations.
pub struct Tape {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
    #[cfg(test)]
    pub(crate) corrupt_adjoint: Option<usize>,
}

type BuildResult = Result<NodeId, TapeError>;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            #[cfg(test)]
            corrupt_adjoint: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(|s| s.as_str())
    }

    pub fn input_id(&self, name: &str) -> Result<NodeId, TapeError> {
        self.inputs
            .get(name)
            .copied()
            .ok_or_else(|| TapeError::NoSuchInput(name.to_string()))
    }

    pub fn output_id(&self, name: &str) -> Result<NodeId, TapeError> {
        self.outputs
            .get(name)
            .copied()
            .ok_or_else(|| TapeError::NoSuchOutput(name.to_string()))
    }

    /// Register `node` under `name` in the tape's named-output map.
    pub fn name_output(&mut self, name: impl Into<String>, node: NodeId) {
        self.outputs.insert(name.into(), node);
    }

    pub fn outputs(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.outputs.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, shape });
        id
    }

    // ── graph construction ──────────────────────────────────────────────

    /// Declare a named leaf input of the given shape.
    pub fn input(&mut self, name: impl Into<String>, shape: impl Into<Vec<usize>>) -> NodeId {
        let name = name.into();
        let id = self.push(Op::Input { name: name.clone() }, shape.into());
        self.inputs.insert(name, id);
        id
    }

    /// Embed a constant tensor.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const { value }, shape)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, make: impl Fn(NodeId, NodeId) -> Op) -> BuildResult {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let out = broadcast_shape(&sa, &sb).ok_or(TapeError::ShapeMismatch {
            node: self.nodes.len(),
            detail: format!("cannot broadcast {sa:?} with {sb:?}"),
        })?;
        Ok(self.push(make(a, b), out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> BuildResult {
        self.binary(a, b, Op::Add)
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> BuildResult {
        self.binary(a, b, Op::Sub)
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> BuildResult {
        self.binary(a, b, Op::Mul)
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> BuildResult {
        self.binary(a, b, Op::Div)
    }
    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> BuildResult {
        self.binary(a, b, Op::Minimum)
    }
    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> BuildResult {
        self.binary(a, b, Op::Maximum)
    }

    fn unary(&mut self, a: NodeId, make: impl Fn(NodeId) -> Op) -> NodeId {
        let shape = self.nodes[a.0].shape.clone();
        self.push(make(a), shape)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp)
    }
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Log)
    }
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid)
    }
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh)
    }
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu)
    }
    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        self.unary(a, |n| Op::LeakyRelu(n, slope))
    }
    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square)
    }
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sqrt)
    }

    /// Numerically stable softmax along `axis` (per-lane max subtraction).
    pub fn softmax(&mut self, input: NodeId, axis: usize) -> BuildResult {
        let shape = self.nodes[input.0].shape.clone();
        if axis >= shape.len() {
            return Err(TapeError::ShapeMismatch {
                node: self.nodes.len(),
                detail: format!("softmax axis {axis} out of range for shape {shape:?}"),
            });
        }
        Ok(self.push(Op::Softmax { input, axis }, shape))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        self.push(Op::Sum { input }, vec![1])
    }

    pub fn sum_axis(&mut self, input: NodeId, axis: usize) -> BuildResult {
        let shape = self.reduced_shape(input, axis)?;
        Ok(self.push(Op::SumAxis { input, axis }, shape))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, input: NodeId) -> NodeId {
        self.push(Op::Mean { input }, vec![1])
    }

    /// Max reduction along `axis`. On ties the adjoint routes the gradient
    /// to the first maximal element, so backward passes are deterministic.
    pub fn max_axis(&mut self, input: NodeId, axis: usize) -> BuildResult {
        let shape = self.reduced_shape(input, axis)?;
        Ok(self.push(Op::MaxAxis { input, axis }, shape))
    }

    fn reduced_shape(&self, input: NodeId, axis: usize) -> Result<Vec<usize>, TapeError> {
        let shape = &self.nodes[input.0].shape;
        if axis >= shape.len() {
            return Err(TapeError::ShapeMismatch {
                node: self.nodes.len(),
                detail: format!("reduction axis {axis} out of range for shape {shape:?}"),
            });
        }
        let mut out: Vec<usize> = shape.clone();
        out.remove(axis);
        if out.is_empty() {
            out.push(1);
        }
        Ok(out)
    }

    pub fn reshape(&mut self, input: NodeId, shape: impl Into<Vec<usize>>) -> BuildResult {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.nodes[input.0].shape.iter().product::<usize>() {
            return Err(TapeError::ShapeMismatch {
                node: self.nodes.len(),
                detail: format!(
                    "reshape {:?} -> {shape:?} changes element count",
                    self.nodes[input.0].shape
                ),
            });
        }
        Ok(self.push(Op::Reshape { input, shape: shape.clone() }, shape))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> BuildResult {
        assert!(!inputs.is_empty(), "concat of zero tensors");
        let first = self.nodes[inputs[0].0].shape.clone();
        let mut axis_total = 0usize;
        for &n in inputs {
            let s = &self.nodes[n.0].shape;
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(TapeError::ShapeMismatch {
                    node: self.nodes.len(),
                    detail: format!("concat of {s:?} with {first:?} along axis {axis}"),
                });
            }
            axis_total += s[axis];
        }
        let mut out = first;
        out[axis] = axis_total;
        Ok(self.push(Op::Concat { inputs: inputs.to_vec(), axis }, out))
    }

    pub fn slice(&mut self, input: NodeId, axis: usize, start: usize, len: usize) -> BuildResult {
        let shape = self.nodes[input.0].shape.clone();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TapeError::ShapeMismatch {
                node: self.nodes.len(),
                detail: format!("slice [{start}, {start}+{len}) on axis {axis} of {shape:?}"),
            });
        }
        let mut out = shape;
        out[axis] = len;
        Ok(self.push(Op::Slice { input, axis, start, len }, out))
    }

    /// Multiply by a 0/1 selector with a stopped gradient on the mask side.
    pub fn clip_by_mask(&mut self, input: NodeId, mask: NodeId) -> BuildResult {
        let si = self.nodes[input.0].shape.clone();
        let sm = self.nodes[mask.0].shape.clone();
        let out = broadcast_shape(&si, &sm).ok_or(TapeError::ShapeMismatch {
            node: self.nodes.len(),
            detail: format!("mask {sm:?} does not broadcast with {si:?}"),
        })?;
        Ok(self.push(Op::ClipByMask { input, mask }, out))
    }

    /// 2-D convolution: `input` is `[C, H, W]`, `kernel` is `[F, C, k, k]`,
    /// `bias` is `[F]`; zero padding `pad` on both spatial axes.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> BuildResult {
        let si = self.nodes[input.0].shape.clone();
        let sk = self.nodes[kernel.0].shape.clone();
        let sb = self.nodes[bias.0].shape.clone();
        let bad = |detail: String| TapeError::ShapeMismatch { node: self.nodes.len(), detail };
        if si.len() != 3 {
            return Err(bad(format!("conv2d input must be [C,H,W], got {si:?}")));
        }
        if sk.len() != 4 || sk[1] != si[0] || sk[2] != sk[3] {
            return Err(bad(format!("conv2d kernel {sk:?} incompatible with input {si:?}")));
        }
        if sb != [sk[0]] {
            return Err(bad(format!("conv2d bias {sb:?} must be [{}]", sk[0])));
        }
        let k = sk[2];
        let (h, w) = (si[1], si[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(bad(format!("kernel {k} larger than padded input {h}x{w}+{pad}")));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(self.push(Op::Conv2d { input, kernel, bias, stride, pad }, vec![sk[0], ho, wo]))
    }

    /// Paste `src` (shape `[C, hp, wp]`) into `base` through a fixed bilinear
    /// stencil. `base` already has the covered pixels zeroed.
    pub fn bilinear_paste(
        &mut self,
        src: NodeId,
        base: Tensor,
        taps: Vec<PasteTap>,
    ) -> BuildResult {
        let ss = self.nodes[src.0].shape.clone();
        let sb = base.shape().to_vec();
        if ss.len() != 3 || sb.len() != 3 || ss[0] != sb[0] {
            return Err(TapeError::ShapeMismatch {
                node: self.nodes.len(),
                detail: format!("paste src {ss:?} into base {sb:?}"),
            });
        }
        Ok(self.push(Op::BilinearPaste { src, base, taps }, sb))
    }

    // ── composed helpers ────────────────────────────────────────────────

    /// `clamp(x, 0, 1)` as `relu(x) - relu(x - 1)`; the subgradient passes
    /// only strictly inside the interval.
    pub fn clamp01(&mut self, x: NodeId) -> BuildResult {
        let one = self.constant_scalar(1.0);
        let low = self.relu(x);
        let shifted = self.sub(x, one)?;
        let high = self.relu(shifted);
        self.sub(low, high)
    }

    /// Start a fresh evaluation of this tape.
    pub fn evaluation(&self) -> Evaluation<'_> {
        Evaluation {
            tape: self,
            values: self.nodes.iter().map(|_| None).collect(),
            next: 0,
        }
    }
}

// ── forward evaluation ──────────────────────────────────────────────────

/// Per-call forward state: one buffer slot per node.
///
/// Inputs may be bound lazily as long as they are bound before the node is
/// reached; `run_until` / `run` advance a watermark through the node list, so
/// two-phase evaluations (bind, run a prefix, inspect, bind more, finish) are
/// possible without recomputing the prefix.
pub struct Evaluation<'t> {
    tape: &'t Tape,
    values: Vec<Option<Tensor>>,
    next: usize,
}

impl<'t> Evaluation<'t> {
    /// Bind a named input. Shape must match the declaration.
    pub fn bind(&mut self, name: &str, value: Tensor) -> Result<(), TapeError> {
        let id = self.tape.input_id(name)?;
        if id.0 < self.next {
            return Err(TapeError::LateBinding { name: name.to_string() });
        }
        let want = &self.tape.nodes[id.0].shape;
        if value.shape() != &want[..] {
            return Err(TapeError::ShapeMismatch {
                node: id.0,
                detail: format!("input '{name}' declared {want:?}, bound {:?}", value.shape()),
            });
        }
        self.values[id.0] = Some(value);
        Ok(())
    }

    /// Evaluate nodes up to and including `node`.
    pub fn run_until(&mut self, node: NodeId) -> Result<(), TapeError> {
        while self.next <= node.0 {
            self.step()?;
        }
        Ok(())
    }

    /// Evaluate the remainder of the tape.
    pub fn run(&mut self) -> Result<(), TapeError> {
        while self.next < self.tape.nodes.len() {
            self.step()?;
        }
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.next == self.tape.nodes.len()
    }

    /// The forward value of an evaluated node.
    pub fn value(&self, node: NodeId) -> &Tensor {
        self.values[node.0]
            .as_ref()
            .unwrap_or_else(|| panic!("node {} not yet evaluated", node.0))
    }

    pub fn try_value(&self, node: NodeId) -> Option<&Tensor> {
        self.values[node.0].as_ref()
    }

    fn step(&mut self) -> Result<(), TapeError> {
        let id = self.next;
        let node = &self.tape.nodes[id];
        let out = match &node.op {
            Op::Input { name } => {
                if self.values[id].is_none() {
                    return Err(TapeError::UnboundInput(name.clone()));
                }
                self.next += 1;
                return Ok(());
            }
            Op::Const { value } => value.clone(),
            Op::Add(a, b) => self.broadcast_fwd(*a, *b, &node.shape, |x, y| x + y),
            Op::Sub(a, b) => self.broadcast_fwd(*a, *b, &node.shape, |x, y| x - y),
            Op::Mul(a, b) => self.broadcast_fwd(*a, *b, &node.shape, |x, y| x * y),
            Op::Div(a, b) => self.broadcast_fwd(*a, *b, &node.shape, |x, y| x / y),
            Op::Minimum(a, b) => self.broadcast_fwd(*a, *b, &node.shape, f64::min),
            Op::Maximum(a, b) => self.broadcast_fwd(*a, *b, &node.shape, f64::max),
            Op::Exp(a) => self.value(*a).map(f64::exp),
            Op::Log(a) => self.value(*a).map(f64::ln),
            Op::Sigmoid(a) => self.value(*a).map(sigmoid),
            Op::Tanh(a) => self.value(*a).map(f64::tanh),
            Op::Relu(a) => self.value(*a).map(|v| if v > 0.0 { v } else { 0.0 }),
            Op::LeakyRelu(a, s) => {
                let s = *s;
                self.value(*a).map(move |v| if v > 0.0 { v } else { s * v })
            }
            Op::Square(a) => self.value(*a).map(|v| v * v),
            Op::Sqrt(a) => self.value(*a).map(f64::sqrt),
            Op::Softmax { input, axis } => softmax_fwd(self.value(*input), *axis),
            Op::Sum { input } => Tensor::scalar(self.value(*input).iter().sum()),
            Op::SumAxis { input, axis } => {
                let x = self.value(*input);
                let (outer, mid, inner) = lanes(x.shape(), *axis);
                let mut out = vec![0.0; outer * inner];
                let data = x.data();
                for o in 0..outer {
                    for m in 0..mid {
                        let row = (o * mid + m) * inner;
                        let dst = o * inner;
                        for i in 0..inner {
                            out[dst + i] += data[row + i];
                        }
                    }
                }
                Tensor::new(node.shape.clone(), out)
            }
            Op::Mean { input } => {
                let x = self.value(*input);
                Tensor::scalar(x.iter().sum::<f64>() / x.len() as f64)
            }
            Op::MaxAxis { input, axis } => {
                let x = self.value(*input);
                let (outer, mid, inner) = lanes(x.shape(), *axis);
                let data = x.data();
                let mut out = vec![f64::NEG_INFINITY; outer * inner];
                for o in 0..outer {
                    for m in 0..mid {
                        let row = (o * mid + m) * inner;
                        let dst = o * inner;
                        for i in 0..inner {
                            if data[row + i] > out[dst + i] {
                                out[dst + i] = data[row + i];
                            }
                        }
                    }
                }
                Tensor::new(node.shape.clone(), out)
            }
            Op::Reshape { input, shape } => self.value(*input).reshaped(shape.clone()),
            Op::Concat { inputs, axis } => {
                let tensors: Vec<&Tensor> = inputs.iter().map(|&n| self.value(n)).collect();
                concat_fwd(&tensors, *axis, &node.shape)
            }
            Op::Slice { input, axis, start, len } => {
                let x = self.value(*input);
                let (outer, mid, inner) = lanes(x.shape(), *axis);
                let data = x.data();
                let mut out = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = (o * mid + start) * inner;
                    out.extend_from_slice(&data[base..base + len * inner]);
                }
                Tensor::new(node.shape.clone(), out)
            }
            Op::ClipByMask { input, mask } => {
                self.broadcast_fwd(*input, *mask, &node.shape, |x, m| x * m)
            }
            Op::Conv2d { input, kernel, bias, stride, pad } => conv2d_fwd(
                self.value(*input),
                self.value(*kernel),
                self.value(*bias),
                *stride,
                *pad,
            ),
            Op::BilinearPaste { src, base, taps } => {
                let x = self.value(*src);
                let mut out = base.clone();
                let channels = base.shape()[0];
                let plane_out = base.shape()[1] * base.shape()[2];
                let plane_in = x.shape()[1] * x.shape()[2];
                let data = out.data_mut();
                let srcd = x.data();
                for tap in taps {
                    for c in 0..channels {
                        data[c * plane_out + tap.out_px as usize] +=
                            tap.weight * srcd[c * plane_in + tap.in_px as usize];
                    }
                }
                out
            }
        };
        debug_assert_eq!(out.shape(), &node.shape[..], "node {id} produced a wrong shape");
        self.values[id] = Some(out);
        self.next += 1;
        Ok(())
    }

    fn broadcast_fwd(
        &self,
        a: NodeId,
        b: NodeId,
        out_shape: &[usize],
        f: impl Fn(f64, f64) -> f64,
    ) -> Tensor {
        let ta = self.value(a);
        let tb = self.value(b);
        let mut out = vec![0.0; out_shape.iter().product()];
        let (da, db) = (ta.data(), tb.data());
        broadcast_zip(ta.shape(), tb.shape(), out_shape, |o, i, j| {
            out[o] = f(da[i], db[j]);
        });
        Tensor::new(out_shape.to_vec(), out)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar `output`, producing gradients for the
    /// `wanted` nodes. The forward pass must be complete.
    pub fn backward(&self, output: NodeId, wanted: &[NodeId]) -> Result<Gradients<'t>, TapeError> {
        if !self.is_complete() {
            return Err(TapeError::Unevaluated(self.next));
        }
        let out_shape = &self.tape.nodes[output.0].shape;
        if out_shape.iter().product::<usize>() != 1 {
            return Err(TapeError::NonScalarOutput { node: output.0, shape: out_shape.clone() });
        }

        // needs[i]: some wanted node is reachable from i through operand edges
        let n = self.tape.nodes.len();
        let mut needs = vec![false; n];
        for w in wanted {
            needs[w.0] = true;
        }
        for i in 0..n {
            if needs[i] {
                continue;
            }
            needs[i] = self.tape.nodes[i].op_operands().iter().any(|o| needs[o.0]);
        }

        let mut adj: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        adj[output.0] = Some(Tensor::filled(out_shape.clone(), 1.0));

        for id in (0..=output.0).rev() {
            if !needs[id] {
                adj[id] = None; // free buffers off the wanted path
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            self.accumulate_operands(id, &g, &needs, &mut adj);
            if wanted.iter().any(|w| w.0 == id) {
                adj[id] = Some(g); // keep the requested gradient
            }
        }

        Ok(Gradients { tape: self.tape, grads: adj })
    }

    /// Apply the adjoint rule of node `id`, accumulating into operand slots.
    fn accumulate_operands(
        &self,
        id: usize,
        g: &Tensor,
        needs: &[bool],
        adj: &mut [Option<Tensor>],
    ) {
        let node = &self.tape.nodes[id];
        #[cfg(test)]
        let g_storage;
        #[cfg(test)]
        let g = if self.tape.corrupt_adjoint == Some(id) {
            g_storage = g.map(|v| v * 3.0);
            &g_storage
        } else {
            g
        };
        macro_rules! slot {
            ($n:expr) => {{
                let shape = self.tape.nodes[$n.0].shape.clone();
                adj[$n.0].get_or_insert_with(|| Tensor::zeros(shape))
            }};
        }
        match &node.op {
            Op::Input { .. } | Op::Const { .. } => {}
            Op::Add(a, b) => {
                if needs[a.0] {
                    let ga = slot!(a).data_mut();
                    broadcast_zip(self.shape_of(*a), self.shape_of(*b), g.shape(), |o, i, _| {
                        ga[i] += g.data()[o];
                    });
                }
                if needs[b.0] {
                    let gb = slot!(b).data_mut();
                    broadcast_zip(self.shape_of(*a), self.shape_of(*b), g.shape(), |o, _, j| {
                        gb[j] += g.data()[o];
                    });
                }
            }
            Op::Sub(a, b) => {
                if needs[a.0] {
                    let ga = slot!(a).data_mut();
                    broadcast_zip(self.shape_of(*a), self.shape_of(*b), g.shape(), |o, i, _| {
                        ga[i] += g.data()[o];
                    });
                }
                if needs[b.0] {
                    let gb = slot!(b).data_mut();
                    broadcast_zip(self.shape_of(*a), self.shape_of(*b), g.shape(), |o, _, j| {
                        gb[j] -= g.data()[o];
                    });
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if needs[a.0] {
                    let ga = slot!(a).data_mut();
                    broadcast_zip(va.shape(), vb.shape(), g.shape(), |o, i, j| {
                        ga[i] += g.data()[o] * vb.data()[j];
                    });
                }
                if needs[b.0] {
                    let gb = slot!(b).data_mut();
                    broadcast_zip(va.shape(), vb.shape(), g.shape(), |o, i, j| {
                        gb[j] += g.data()[o] * va.data()[i];
                    });
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if needs[a.0] {
                    let ga = slot!(a).data_mut();
                    broadcast_zip(va.shape(), vb.shape(), g.shape(), |o, i, j| {
                        ga[i] += g.data()[o] / vb.data()[j];
                    });
                }
                if needs[b.0] {
                    let gb = slot!(b).data_mut();
                    broadcast_zip(va.shape(), vb.shape(), g.shape(), |o, i, j| {
                        let d = vb.data()[j];
                        gb[j] -= g.data()[o] * va.data()[i] / (d * d);
                    });
                }
            }
            Op::Minimum(a, b) => {
                // ties route to the first operand
                let (va, vb) = (self.value(*a), self.value(*b));
                if needs[a.0] {
                    let ga = slot!(a).data_mut();
                    broadcast_zip(va.shape(), vb.shape(), g.shape(), |o, i, j| {
                        if va.data()[i] <= vb.data()[j] {
                            ga[i] += g.data()[o];
                        }
                    });
                }
                if needs[b.0] {
                    let gb = slot!(b).data_mut();
                    broadcast_zip(va.shape(), vb.shape(), g.shape(), |o, i, j| {
                        if va.data()[i] > vb.data()[j] {
                            gb[j] += g.data()[o];
                        }
                    });
                }
            }
            Op::Maximum(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if needs[a.0] {
                    let ga = slot!(a).data_mut();
                    broadcast_zip(va.shape(), vb.shape(), g.shape(), |o, i, j| {
                        if va.data()[i] >= vb.data()[j] {
                            ga[i] += g.data()[o];
                        }
                    });
                }
                if needs[b.0] {
                    let gb = slot!(b).data_mut();
                    broadcast_zip(va.shape(), vb.shape(), g.shape(), |o, i, j| {
                        if va.data()[i] < vb.data()[j] {
                            gb[j] += g.data()[o];
                        }
                    });
                }
            }
            Op::Exp(a) => {
                if needs[a.0] {
                    let y = self.values[id].as_ref().unwrap();
                    let ga = slot!(a);
                    for ((d, &gi), &yi) in
                        ga.data_mut().iter_mut().zip(g.data()).zip(y.data())
                    {
                        *d += gi * yi;
                    }
                }
            }
            Op::Log(a) => {
                if needs[a.0] {
                    let x = self.value(*a);
                    let ga = slot!(a);
                    for ((d, &gi), &xi) in
                        ga.data_mut().iter_mut().zip(g.data()).zip(x.data())
                    {
                        *d += gi / xi;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if needs[a.0] {
                    let y = self.values[id].as_ref().unwrap();
                    let ga = slot!(a);
                    for ((d, &gi), &yi) in
                        ga.data_mut().iter_mut().zip(g.data()).zip(y.data())
                    {
                        *d += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Tanh(a) => {
                if needs[a.0] {
                    let y = self.values[id].as_ref().unwrap();
                    let ga = slot!(a);
                    for ((d, &gi), &yi) in
                        ga.data_mut().iter_mut().zip(g.data()).zip(y.data())
                    {
                        *d += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Relu(a) => {
                if needs[a.0] {
                    let x = self.value(*a);
                    let ga = slot!(a);
                    for ((d, &gi), &xi) in
                        ga.data_mut().iter_mut().zip(g.data()).zip(x.data())
                    {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::LeakyRelu(a, s) => {
                if needs[a.0] {
                    let x = self.value(*a);
                    let ga = slot!(a);
                    for ((d, &gi), &xi) in
                        ga.data_mut().iter_mut().zip(g.data()).zip(x.data())
                    {
                        *d += if xi > 0.0 { gi } else { gi * s };
                    }
                }
            }
            Op::Square(a) => {
                if needs[a.0] {
                    let x = self.value(*a);
                    let ga = slot!(a);
                    for ((d, &gi), &xi) in
                        ga.data_mut().iter_mut().zip(g.data()).zip(x.data())
                    {
                        *d += 2.0 * xi * gi;
                    }
                }
            }
            Op::Sqrt(a) => {
                if needs[a.0] {
                    let y = self.values[id].as_ref().unwrap();
                    let ga = slot!(a);
                    for ((d, &gi), &yi) in
                        ga.data_mut().iter_mut().zip(g.data()).zip(y.data())
                    {
                        *d += gi * 0.5 / yi;
                    }
                }
            }
            Op::Softmax { input, axis } => {
                if needs[input.0] {
                    let y = self.values[id].as_ref().unwrap();
                    let (outer, mid, inner) = lanes(y.shape(), *axis);
                    let ga = slot!(input);
                    let gad = ga.data_mut();
                    let (yd, gd) = (y.data(), g.data());
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut dot = 0.0;
                            for m in 0..mid {
                                let k = (o * mid + m) * inner + i;
                                dot += gd[k] * yd[k];
                            }
                            for m in 0..mid {
                                let k = (o * mid + m) * inner + i;
                                gad[k] += yd[k] * (gd[k] - dot);
                            }
                        }
                    }
                }
            }
            Op::Sum { input } => {
                if needs[input.0] {
                    let gi = g.item();
                    let ga = slot!(input);
                    for d in ga.data_mut() {
                        *d += gi;
                    }
                }
            }
            Op::SumAxis { input, axis } => {
                if needs[input.0] {
                    let (outer, mid, inner) = lanes(self.shape_of(*input), *axis);
                    let ga = slot!(input);
                    let gad = ga.data_mut();
                    let gd = g.data();
                    for o in 0..outer {
                        for m in 0..mid {
                            let row = (o * mid + m) * inner;
                            let src = o * inner;
                            for i in 0..inner {
                                gad[row + i] += gd[src + i];
                            }
                        }
                    }
                }
            }
            Op::Mean { input } => {
                if needs[input.0] {
                    let ga = slot!(input);
                    let gi = g.item() / ga.len() as f64;
                    for d in ga.data_mut() {
                        *d += gi;
                    }
                }
            }
            Op::MaxAxis { input, axis } => {
                if needs[input.0] {
                    let x = self.value(*input);
                    let (outer, mid, inner) = lanes(x.shape(), *axis);
                    let ga = slot!(input);
                    let gad = ga.data_mut();
                    let (xd, gd) = (x.data(), g.data());
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut best = 0usize;
                            let mut bv = f64::NEG_INFINITY;
                            for m in 0..mid {
                                let k = (o * mid + m) * inner + i;
                                if xd[k] > bv {
                                    bv = xd[k];
                                    best = k;
                                }
                            }
                            gad[best] += gd[o * inner + i];
                        }
                    }
                }
            }
            Op::Reshape { input, .. } => {
                if needs[input.0] {
                    let ga = slot!(input);
                    for (d, &gi) in ga.data_mut().iter_mut().zip(g.data()) {
                        *d += gi;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = &node.shape;
                let (outer, _, inner) = lanes(out_shape, *axis);
                let gd = g.data();
                let mut offset = 0usize;
                for &src in inputs {
                    let span = self.shape_of(src)[*axis];
                    if needs[src.0] {
                        let ga = slot!(src);
                        let gad = ga.data_mut();
                        for o in 0..outer {
                            let from = (o * out_shape[*axis] + offset) * inner;
                            let to = o * span * inner;
                            for i in 0..span * inner {
                                gad[to + i] += gd[from + i];
                            }
                        }
                    }
                    offset += span;
                }
            }
            Op::Slice { input, axis, start, len } => {
                if needs[input.0] {
                    let (outer, mid, inner) = lanes(self.shape_of(*input), *axis);
                    let ga = slot!(input);
                    let gad = ga.data_mut();
                    let gd = g.data();
                    for o in 0..outer {
                        let dst = (o * mid + start) * inner;
                        let src = o * len * inner;
                        for i in 0..len * inner {
                            gad[dst + i] += gd[src + i];
                        }
                    }
                }
            }
            Op::ClipByMask { input, mask } => {
                // gradient is clipped by the mask; no gradient to the mask
                if needs[input.0] {
                    let (vi, vm) = (self.value(*input), self.value(*mask));
                    let ga = slot!(input).data_mut();
                    broadcast_zip(vi.shape(), vm.shape(), g.shape(), |o, i, j| {
                        ga[i] += g.data()[o] * vm.data()[j];
                    });
                }
            }
            Op::Conv2d { input, kernel, bias, stride, pad } => {
                // input, kernel and bias are always distinct nodes (their
                // ranks differ), so take/put-back cannot alias
                let mut take = |n: &NodeId, wanted: bool| {
                    if wanted {
                        Some(adj[n.0].take().unwrap_or_else(|| {
                            Tensor::zeros(self.tape.nodes[n.0].shape.clone())
                        }))
                    } else {
                        None
                    }
                };
                let mut gi = take(input, needs[input.0]);
                let mut gk = take(kernel, needs[kernel.0]);
                let mut gb = take(bias, needs[bias.0]);
                conv2d_bwd(
                    g,
                    self.value(*input),
                    self.value(*kernel),
                    *stride,
                    *pad,
                    gi.as_mut(),
                    gk.as_mut(),
                    gb.as_mut(),
                );
                if let Some(t) = gi {
                    adj[input.0] = Some(t);
                }
                if let Some(t) = gk {
                    adj[kernel.0] = Some(t);
                }
                if let Some(t) = gb {
                    adj[bias.0] = Some(t);
                }
            }
            Op::BilinearPaste { src, base, taps } => {
                if needs[src.0] {
                    let channels = base.shape()[0];
                    let plane_out = base.shape()[1] * base.shape()[2];
                    let ga = slot!(src);
                    let plane_in = ga.shape()[1] * ga.shape()[2];
                    let gad = ga.data_mut();
                    let gd = g.data();
                    for tap in taps {
                        for c in 0..channels {
                            gad[c * plane_in + tap.in_px as usize] +=
                                tap.weight * gd[c * plane_out + tap.out_px as usize];
                        }
                    }
                }
            }
        }
    }

    fn shape_of(&self, n: NodeId) -> &[usize] {
        &self.tape.nodes[n.0].shape
    }
}

impl Node {
    fn op_operands(&self) -> Vec<NodeId> {
        match &self.op {
            Op::Input { .. } | Op::Const { .. } => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Minimum(a, b)
            | Op::Maximum(a, b) => vec![*a, *b],
            Op::Exp(a)
            | Op::Log(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Square(a)
            | Op::Sqrt(a) => vec![*a],
            Op::Softmax { input, .. }
            | Op::Sum { input }
            | Op::SumAxis { input, .. }
            | Op::Mean { input }
            | Op::MaxAxis { input, .. }
            | Op::Reshape { input, .. }
            | Op::Slice { input, .. } => vec![*input],
            Op::Concat { inputs, .. } => inputs.clone(),
            // the mask is a constant selector, not a differentiable operand
            Op::ClipByMask { input, .. } => vec![*input],
            Op::Conv2d { input, kernel, bias, .. } => vec![*input, *kernel, *bias],
            Op::BilinearPaste { src, .. } => vec![*src],
        }
    }
}

/// Gradients produced by [`Evaluation::backward`].
pub struct Gradients<'t> {
    tape: &'t Tape,
    grads: Vec<Option<Tensor>>,
}

impl<'t> Gradients<'t> {
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.grads[node.0].as_ref()
    }

    /// Gradient for a named input; zeros if no path reached it.
    pub fn wrt(&self, name: &str) -> Result<Tensor, TapeError> {
        let id = self.tape.input_id(name)?;
        Ok(match &self.grads[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(self.tape.nodes[id.0].shape.clone()),
        })
    }

    pub fn take(&mut self, node: NodeId) -> Option<Tensor> {
        self.grads[node.0].take()
    }
}

// ── op kernels ──────────────────────────────────────────────────────────

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Split a shape at `axis` into (outer, axis_len, inner) lane sizes.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_fwd(x: &Tensor, axis: usize) -> Tensor {
    let (outer, mid, inner) = lanes(x.shape(), axis);
    let mut out = vec![0.0; x.len()];
    let data = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let at = |m: usize| (o * mid + m) * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for m in 0..mid {
                mx = mx.max(data[at(m)]);
            }
            let mut denom = 0.0;
            for m in 0..mid {
                let e = (data[at(m)] - mx).exp();
                out[at(m)] = e;
                denom += e;
            }
            for m in 0..mid {
                out[at(m)] /= denom;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn concat_fwd(tensors: &[&Tensor], axis: usize, out_shape: &[usize]) -> Tensor {
    let (outer, _, inner) = lanes(out_shape, axis);
    let mut out = vec![0.0; out_shape.iter().product()];
    let total_axis = out_shape[axis];
    let mut offset = 0usize;
    for t in tensors {
        let span = t.shape()[axis];
        let data = t.data();
        for o in 0..outer {
            let dst = (o * total_axis + offset) * inner;
            let src = o * span * inner;
            out[dst..dst + span * inner].copy_from_slice(&data[src..src + span * inner]);
        }
        offset += span;
    }
    Tensor::new(out_shape.to_vec(), out)
}

fn conv2d_fwd(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (f_out, k) = (kernel.shape()[0], kernel.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; f_out * ho * wo];
    let (xd, kd, bd) = (input.data(), kernel.data(), bias.data());
    for f in 0..f_out {
        let out_plane = &mut out[f * ho * wo..(f + 1) * ho * wo];
        out_plane.fill(bd[f]);
        for c in 0..c_in {
            let x_plane = &xd[c * h * w..(c + 1) * h * w];
            let k_base = (f * c_in + c) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let kv = kd[k_base + ky * k + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = iy as usize * w;
                        let orow = oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out_plane[orow + ox] += kv * x_plane[row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![f_out, ho, wo], out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_bwd(
    g: &Tensor,
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    mut d_input: Option<&mut Tensor>,
    mut d_kernel: Option<&mut Tensor>,
    d_bias: Option<&mut Tensor>,
) {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (f_out, k) = (kernel.shape()[0], kernel.shape()[2]);
    let (ho, wo) = (g.shape()[1], g.shape()[2]);
    let gd = g.data();
    if let Some(db) = d_bias {
        let dbd = db.data_mut();
        for f in 0..f_out {
            dbd[f] += gd[f * ho * wo..(f + 1) * ho * wo].iter().sum::<f64>();
        }
    }
    if d_input.is_none() && d_kernel.is_none() {
        return;
    }
    let (xd, kd) = (input.data(), kernel.data());
    for f in 0..f_out {
        let g_plane = &gd[f * ho * wo..(f + 1) * ho * wo];
        for c in 0..c_in {
            let k_base = (f * c_in + c) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let kv = kd[k_base + ky * k + kx];
                    let mut kacc = 0.0;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = iy as usize * w;
                        let orow = oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let gv = g_plane[orow + ox];
                            let xi = c * h * w + row + ix as usize;
                            if let Some(di) = d_input.as_deref_mut() {
                                di.data_mut()[xi] += gv * kv;
                            }
                            kacc += gv * xd[xi];
                        }
                    }
                    if let Some(dk) = d_kernel.as_deref_mut() {
                        dk.data_mut()[k_base + ky * k + kx] += kacc;
                    }
                }
            }
        }
    }
}
