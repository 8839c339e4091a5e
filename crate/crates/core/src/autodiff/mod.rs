//! Reverse-mode differentiation over flat `f64` buffers.
//!
//! A [`Trace`] records elementwise and indexing operations on vectors. Two
//! reverse sweeps are available:
//!
//! * [`Trace::backward`] computes numeric adjoints, the fast path used for
//!   ordinary training;
//! * [`Trace::grad_recorded`] appends the adjoint computation to the trace
//!   itself, so a gradient can be used inside later recorded computation
//!   (an optimizer update) and differentiated again. This is what lets the
//!   poisoner backpropagate through unrolled training steps.
//!
//! Binary operations accept a length-1 operand, which is broadcast. Nothing
//! else broadcasts.

mod ops;

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};

pub use ops::{sigmoid, softplus};


#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds. Indexing kinds carry their (non-differentiable) indices.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sqrt,
    Pow,
    Sin,
    Cos,
    Relu,
    Softplus,
    Sigmoid,
    Clamp { lo: f64, hi: f64 },
    Sum,
    /// `out[j] = a[index[j]]`
    Gather { index: Arc<[u32]> },
    /// `out[index[j]] += a[j]`, output of length `len`
    ScatterAdd { index: Arc<[u32]>, len: usize },
    /// `out[i] = if mask[i] { a[i] } else { b[i] }`
    Select { mask: Arc<[bool]> },
    /// Row-major `[rows x inner] * [inner x cols]`.
    MatMul { rows: usize, inner: usize, cols: usize },
    /// Weighted multi-tap lookup into a table of `channels`-wide rows:
    /// `out[j*C + c] = sum_k weight[j*T + k] * a[index[j*T + k]*C + c]`.
    Interp(Arc<InterpTable>),
    /// Transpose of [`Op::Interp`], scattering rows back into a table of
    /// `len` values.
    InterpTranspose { table: Arc<InterpTable>, len: usize },
}

/// Sparse interpolation stencil shared by [`Op::Interp`] and its transpose.
#[derive(Debug)]
pub struct InterpTable {
    pub index: Vec<u32>,
    pub weight: Vec<f64>,
    pub taps: usize,
    pub channels: usize,
}

impl InterpTable {
    pub fn rows(&self) -> usize {
        self.index.len() / self.taps.max(1)
    }
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Pow => "pow",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Relu => "relu",
            Op::Softplus => "softplus",
            Op::Sigmoid => "sigmoid",
            Op::Clamp { .. } => "clamp",
            Op::Sum => "sum",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter-add",
            Op::Select { .. } => "select",
            Op::MatMul { .. } => "matmul",
            Op::Interp(_) => "interp",
            Op::InterpTranspose { .. } => "interp-transpose",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Leaf | Op::Const => 0,
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Pow | Op::Select { .. } | Op::MatMul { .. } => 2,
            _ => 1,
        }
    }
}

/// Parses the parameter-free op kinds by name.
impl FromStr for Op {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => Op::Add,
            "sub" => Op::Sub,
            "mul" => Op::Mul,
            "div" => Op::Div,
            "neg" => Op::Neg,
            "exp" => Op::Exp,
            "log" => Op::Log,
            "sqrt" => Op::Sqrt,
            "pow" => Op::Pow,
            "sin" => Op::Sin,
            "cos" => Op::Cos,
            "relu" => Op::Relu,
            "softplus" => Op::Softplus,
            "sigmoid" => Op::Sigmoid,
            "sum" => Op::Sum,
            "clamp" | "gather" | "scatter-add" | "select" | "matmul" | "interp" | "interp-transpose" => {
                return Err(Error::Invalid(format!("op `{s}` needs parameters")))
            }
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    len: usize,
    /// `None` while discarded by a checkpointed segment.
    value: Option<Vec<f64>>,
    /// Depends on at least one leaf.
    on_grad_path: bool,
    /// Value must stay resident (consumed outside its segment).
    pinned: bool,
    segment: Option<usize>,
}

/// Marker pushed by [`Trace::push_marker`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Marker {
    start: usize,
    depth: usize,
}

/// A checkpointed range of nodes. Empty handles are no-ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentHandle {
    pub start: usize,
    pub end: usize,
}

impl SegmentHandle {
    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

/// Per-node adjoints produced by a numeric reverse sweep.
#[derive(Debug)]
pub struct Adjoints {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Adjoints {
    /// Adjoint of `id`, or `None` when it received no contribution.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Adjoint of `id`, zero-filled if it received no contribution.
    pub fn get_or_zeros(&self, id: NodeId) -> Vec<f64> {
        match self.get(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.lens.get(id.0).copied().unwrap_or(0)],
        }
    }
}

/// Recorded computation over flat buffers.
#[derive(Debug)]
pub struct Trace {
    nodes: Vec<Node>,
    markers: Vec<usize>,
    segments: Vec<(usize, usize)>,
    deterministic: bool,
    scalar_consts: HashMap<u64, NodeId>,
}

impl Default for Trace {
    fn default() -> Self {
        Self::new()
    }
}

impl Trace {
    /// Deterministic trace: reductions use a fixed order.
    pub fn new() -> Self {
        Self::with_determinism(true)
    }

    pub fn with_determinism(deterministic: bool) -> Self {
        Trace {
            nodes: Vec::new(),
            markers: Vec::new(),
            segments: Vec::new(),
            deterministic,
            scalar_consts: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    /// Length of the buffer held by `id`.
    pub fn node_len(&self, id: NodeId) -> usize {
        self.nodes[id.0].len
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    /// Bytes of node values currently resident.
    pub fn resident_bytes(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| n.value.as_ref())
            .map(|v| v.len() * std::mem::size_of::<f64>())
            .sum()
    }

    /// Forward value of `id`, recomputing it if a checkpoint discarded it.
    pub fn value(&mut self, id: NodeId) -> &[f64] {
        self.ensure(id, true);
        self.nodes[id.0].value.as_deref().expect("ensured")
    }

    /// Forward value without recomputation; `None` while discarded.
    pub fn resident_value(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes.get(id.0).and_then(|n| n.value.as_deref())
    }

    /// Scalar value of a length-1 node.
    pub fn scalar(&mut self, id: NodeId) -> f64 {
        self.value(id)[0]
    }

    /// Differentiable input.
    pub fn leaf(&mut self, values: Vec<f64>) -> NodeId {
        self.push_raw(Op::Leaf, Vec::new(), values, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, values: Vec<f64>) -> NodeId {
        self.push_raw(Op::Const, Vec::new(), values, false)
    }

    /// Cached length-1 constant.
    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        if let Some(&id) = self.scalar_consts.get(&v.to_bits()) {
            return id;
        }
        let id = self.constant(vec![v]);
        self.scalar_consts.insert(v.to_bits(), id);
        id
    }

    fn push_raw(&mut self, op: Op, inputs: Vec<NodeId>, value: Vec<f64>, grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            len: value.len(),
            inputs,
            value: Some(value),
            on_grad_path: grad,
            pinned: false,
            segment: None,
        });
        id
    }

    /// Records `op` applied to `inputs`, computing its forward value.
    pub fn record(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if matches!(op, Op::Leaf | Op::Const) {
            return Err(Error::Invalid("leaves are created with leaf()/constant()".into()));
        }
        if inputs.len() != op.arity() {
            return Err(Error::Shape(format!(
                "{} takes {} inputs, got {}",
                op.name(),
                op.arity(),
                inputs.len()
            )));
        }
        for &i in inputs {
            if i.0 >= self.nodes.len() {
                return Err(Error::Invalid(format!("node {} is not on this trace", i.0)));
            }
        }
        let lens: Vec<usize> = inputs.iter().map(|i| self.nodes[i.0].len).collect();
        let len = ops::output_len(&op, &lens)?;
        for &i in inputs {
            self.ensure(i, true);
        }
        let value = {
            let ins: Vec<&[f64]> = inputs
                .iter()
                .map(|i| self.nodes[i.0].value.as_deref().expect("ensured"))
                .collect();
            ops::forward(&op, &ins, len, self.deterministic)
        };
        let grad = inputs.iter().any(|i| self.nodes[i.0].on_grad_path);
        Ok(self.push_raw(op, inputs.to_vec(), value, grad))
    }

    /// Makes the value of `id` resident, recomputing discarded ancestors.
    fn ensure(&mut self, id: NodeId, pin: bool) {
        if self.nodes[id.0].value.is_some() {
            return;
        }
        let mut stack = vec![id.0];
        while let Some(&top) = stack.last() {
            let missing: Vec<usize> = self.nodes[top]
                .inputs
                .iter()
                .map(|i| i.0)
                .filter(|&i| self.nodes[i].value.is_none())
                .collect();
            if missing.is_empty() {
                stack.pop();
                if self.nodes[top].value.is_none() {
                    let v = self.compute(top);
                    self.nodes[top].value = Some(v);
                }
            } else {
                stack.extend(missing);
            }
        }
        if pin {
            self.nodes[id.0].pinned = true;
        }
    }

    fn compute(&self, idx: usize) -> Vec<f64> {
        let node = &self.nodes[idx];
        let ins: Vec<&[f64]> = node
            .inputs
            .iter()
            .map(|i| self.nodes[i.0].value.as_deref().expect("inputs resident"))
            .collect();
        ops::forward(&node.op, &ins, node.len, self.deterministic)
    }

    // --- typed helpers -------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Mul, &[a, b])
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Div, &[a, b])
    }
    pub fn pow(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Pow, &[a, b])
    }
    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Neg, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Exp, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Log, &[a])
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Sqrt, &[a])
    }
    pub fn sin(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Sin, &[a])
    }
    pub fn cos(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Cos, &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Relu, &[a])
    }
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Softplus, &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Sigmoid, &[a])
    }
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.record(Op::Clamp { lo, hi }, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Sum, &[a])
    }
    pub fn gather(&mut self, a: NodeId, index: impl Into<Arc<[u32]>>) -> Result<NodeId> {
        self.record(Op::Gather { index: index.into() }, &[a])
    }
    pub fn scatter_add(&mut self, a: NodeId, index: impl Into<Arc<[u32]>>, len: usize) -> Result<NodeId> {
        self.record(Op::ScatterAdd { index: index.into(), len }, &[a])
    }
    pub fn select(&mut self, mask: impl Into<Arc<[bool]>>, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Select { mask: mask.into() }, &[a, b])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId, rows: usize, inner: usize, cols: usize) -> Result<NodeId> {
        self.record(Op::MatMul { rows, inner, cols }, &[a, b])
    }

    /// Applies a sparse interpolation stencil to the table `a`.
    pub fn interp(&mut self, a: NodeId, table: Arc<InterpTable>) -> Result<NodeId> {
        self.record(Op::Interp(table), &[a])
    }
    /// Scatters stencil rows `a` into a table of `len` values.
    pub fn interp_transpose(&mut self, a: NodeId, table: Arc<InterpTable>, len: usize) -> Result<NodeId> {
        self.record(Op::InterpTranspose { table, len }, &[a])
    }

    /// `a * k` for a scalar constant `k`.
    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let c = self.scalar_const(k);
        self.mul(a, c)
    }

    // --- checkpointing -------------------------------------------------

    /// Opens a segment at the current end of the trace.
    pub fn push_marker(&mut self) -> Marker {
        self.markers.push(self.nodes.len());
        Marker {
            start: self.nodes.len(),
            depth: self.markers.len(),
        }
    }

    /// Closes the innermost segment and discards its intermediate values.
    ///
    /// Leaves, constants, pinned nodes and the segment's last node stay
    /// resident; everything else is recomputed on demand from those.
    pub fn checkpoint_segment(&mut self, marker: Marker) -> Result<SegmentHandle> {
        if self.markers.len() != marker.depth || self.markers.last() != Some(&marker.start) {
            return Err(Error::UnbalancedMarkers);
        }
        self.markers.pop();
        let handle = SegmentHandle {
            start: marker.start,
            end: self.nodes.len(),
        };
        if handle.end - handle.start < 2 {
            return Ok(handle);
        }
        let seg = self.segments.len();
        self.segments.push((handle.start, handle.end));
        for i in handle.start..handle.end - 1 {
            let node = &mut self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Const) || node.pinned {
                continue;
            }
            node.segment = Some(seg);
            node.value = None;
        }
        Ok(handle)
    }

    /// Recomputes every non-input node from its inputs and compares bits
    /// against the stored values. Discarded nodes are skipped.
    pub fn verify_replay(&self) -> bool {
        (0..self.nodes.len()).all(|i| {
            let n = &self.nodes[i];
            if matches!(n.op, Op::Leaf | Op::Const) || n.value.is_none() {
                return true;
            }
            if n.inputs.iter().any(|x| self.nodes[x.0].value.is_none()) {
                return true;
            }
            let v = self.compute(i);
            v.iter()
                .zip(n.value.as_ref().unwrap())
                .all(|(a, b)| a.to_bits() == b.to_bits())
        })
    }

    // --- reverse sweeps ------------------------------------------------

    /// Numeric adjoints of a scalar output with respect to every node that
    /// depends on a leaf.
    pub fn backward(&mut self, output: NodeId) -> Result<Adjoints> {
        self.backward_impl(output, None)
    }

    /// As [`Trace::backward`] with the output adjoint seeded to `seed`.
    pub fn backward_seeded(&mut self, output: NodeId, seed: f64) -> Result<Adjoints> {
        let mut adj = self.backward_impl(output, None)?;
        if seed != 1.0 {
            for g in adj.grads.iter_mut().flatten() {
                g.iter_mut().for_each(|x| *x *= seed);
            }
        }
        Ok(adj)
    }

    /// Numeric adjoints restricted to paths from `wrt` to `output`.
    pub fn backward_to(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Adjoints> {
        self.backward_impl(output, Some(wrt))
    }

    fn reachable_from(&self, wrt: &[NodeId], upto: usize) -> Vec<bool> {
        let mut reach = vec![false; upto + 1];
        for w in wrt {
            if w.0 <= upto {
                reach[w.0] = true;
            }
        }
        for i in 0..=upto {
            if !reach[i] && self.nodes[i].inputs.iter().any(|x| reach[x.0]) {
                reach[i] = true;
            }
        }
        reach
    }

    fn backward_impl(&mut self, output: NodeId, wrt: Option<&[NodeId]>) -> Result<Adjoints> {
        let out = output.0;
        if out >= self.nodes.len() {
            return Err(Error::Invalid(format!("node {out} is not on this trace")));
        }
        if self.nodes[out].len != 1 {
            return Err(Error::NonScalarOutput(self.nodes[out].len));
        }
        let active: Vec<bool> = match wrt {
            Some(w) => self.reachable_from(w, out),
            None => self.nodes[..=out].iter().map(|n| n.on_grad_path).collect(),
        };
        let keep: Vec<bool> = match wrt {
            Some(w) => {
                let mut k = vec![false; out + 1];
                for x in w {
                    if x.0 <= out {
                        k[x.0] = true;
                    }
                }
                k
            }
            None => self.nodes[..=out]
                .iter()
                .map(|n| matches!(n.op, Op::Leaf))
                .collect(),
        };

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let lens: Vec<usize> = self.nodes.iter().map(|n| n.len).collect();
        if active[out] {
            grads[out] = Some(vec![1.0]);
        }
        let mut recomputed: Vec<usize> = Vec::new();
        let mut open_segment: Option<usize> = None;

        for i in (0..=out).rev() {
            if let Some(seg) = open_segment {
                if i < self.segments[seg].0 {
                    self.drop_recomputed(&mut recomputed);
                    open_segment = None;
                }
            }
            if !active[i] || grads[i].is_none() || self.nodes[i].inputs.is_empty() {
                continue;
            }
            if self.nodes[i].value.is_none()
                || self.nodes[i].inputs.iter().any(|x| self.nodes[x.0].value.is_none())
            {
                let seg = self.nodes[i]
                    .segment
                    .or_else(|| {
                        self.nodes[i]
                            .inputs
                            .iter()
                            .find_map(|x| self.nodes[x.0].segment)
                    })
                    .expect("discarded node belongs to a segment");
                if open_segment != Some(seg) {
                    self.drop_recomputed(&mut recomputed);
                    self.recompute_segment(seg, &mut recomputed);
                    open_segment = Some(seg);
                }
                // Inputs from an older segment (rare: only the last node
                // of a segment is referenced across segments).
                let ids: Vec<NodeId> = self.nodes[i].inputs.clone();
                for x in ids {
                    if self.nodes[x.0].value.is_none() {
                        self.ensure(x, false);
                        recomputed.push(x.0);
                    }
                }
            }
            let g = if keep[i] {
                grads[i].clone().unwrap()
            } else {
                grads[i].take().unwrap()
            };
            let node = &self.nodes[i];
            let y = node.value.as_deref().unwrap();
            let ins: Vec<&[f64]> = node
                .inputs
                .iter()
                .map(|x| self.nodes[x.0].value.as_deref().unwrap())
                .collect();
            for (slot, x) in node.inputs.iter().enumerate() {
                if !active[x.0] {
                    continue;
                }
                let dst = grads[x.0].get_or_insert_with(|| vec![0.0; lens[x.0]]);
                ops::vjp(&node.op, slot, &ins, y, &g, dst, self.deterministic);
            }
        }
        self.drop_recomputed(&mut recomputed);

        for (i, g) in grads.iter_mut().enumerate() {
            if i > out || !keep[i] {
                *g = None;
            }
        }
        Ok(Adjoints { grads, lens })
    }

    fn recompute_segment(&mut self, seg: usize, recomputed: &mut Vec<usize>) {
        let (start, end) = self.segments[seg];
        for j in start..end {
            if self.nodes[j].value.is_none() {
                let ids: Vec<NodeId> = self.nodes[j].inputs.clone();
                for x in ids {
                    if self.nodes[x.0].value.is_none() {
                        self.ensure(x, false);
                        recomputed.push(x.0);
                    }
                }
                let v = self.compute(j);
                self.nodes[j].value = Some(v);
                recomputed.push(j);
            }
        }
    }

    fn drop_recomputed(&mut self, recomputed: &mut Vec<usize>) {
        for j in recomputed.drain(..) {
            if !self.nodes[j].pinned {
                self.nodes[j].value = None;
            }
        }
    }

    /// Gradients of a scalar `output` with respect to `wrt`, recorded as new
    /// nodes on the trace so they can be differentiated again.
    pub fn grad_recorded(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        let out = output.0;
        if out >= self.nodes.len() {
            return Err(Error::Invalid(format!("node {out} is not on this trace")));
        }
        if self.nodes[out].len != 1 {
            return Err(Error::NonScalarOutput(self.nodes[out].len));
        }
        let reach = self.reachable_from(wrt, out);
        let mut adj: Vec<Option<NodeId>> = vec![None; out + 1];
        if reach[out] {
            adj[out] = Some(self.scalar_const(1.0));
        }
        for i in (0..=out).rev() {
            let Some(g) = adj[i] else { continue };
            if !reach[i] || self.nodes[i].inputs.is_empty() {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let inputs = self.nodes[i].inputs.clone();
            for (slot, &x) in inputs.iter().enumerate() {
                if !reach[x.0] {
                    continue;
                }
                let c = self.vjp_recorded(&op, NodeId(i), &inputs, slot, g)?;
                adj[x.0] = Some(match adj[x.0] {
                    Some(prev) => self.add(prev, c)?,
                    None => c,
                });
            }
        }
        wrt.iter()
            .map(|w| match adj.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let n = self.nodes[w.0].len;
                    Ok(self.constant(vec![0.0; n]))
                }
            })
            .collect()
    }

    /// Sums `g` down to length 1 when `input` was broadcast.
    fn unbroadcast(&mut self, g: NodeId, input: NodeId) -> Result<NodeId> {
        if self.nodes[input.0].len == 1 && self.nodes[g.0].len != 1 {
            self.sum(g)
        } else {
            Ok(g)
        }
    }

    fn vjp_recorded(
        &mut self,
        op: &Op,
        out: NodeId,
        inputs: &[NodeId],
        slot: usize,
        g: NodeId,
    ) -> Result<NodeId> {
        let a = inputs[0];
        let b = inputs.get(1).copied();
        let c = match op {
            Op::Leaf | Op::Const => unreachable!("inputs are non-empty"),
            Op::Add => g,
            Op::Sub => {
                if slot == 0 {
                    g
                } else {
                    self.neg(g)?
                }
            }
            Op::Mul => {
                let other = if slot == 0 { b.unwrap() } else { a };
                self.mul(g, other)?
            }
            Op::Div => {
                let b = b.unwrap();
                if slot == 0 {
                    self.div(g, b)?
                } else {
                    let gy = self.mul(g, out)?;
                    let q = self.div(gy, b)?;
                    self.neg(q)?
                }
            }
            Op::Pow => {
                let b = b.unwrap();
                if slot == 0 {
                    let one = self.scalar_const(1.0);
                    let bm1 = self.sub(b, one)?;
                    let p = self.pow(a, bm1)?;
                    let d = self.mul(b, p)?;
                    self.mul(g, d)?
                } else {
                    let mask: Arc<[bool]> = self.value(a).iter().map(|&x| x > 0.0).collect();
                    let one = self.scalar_const(1.0);
                    let zero = self.scalar_const(0.0);
                    let safe = self.select(mask.clone(), a, one)?;
                    let la = self.log(safe)?;
                    let la = self.select(mask, la, zero)?;
                    let d = self.mul(out, la)?;
                    self.mul(g, d)?
                }
            }
            Op::Neg => self.neg(g)?,
            Op::Exp => self.mul(g, out)?,
            Op::Log => self.div(g, a)?,
            Op::Sqrt => {
                let h = self.scale(g, 0.5)?;
                self.div(h, out)?
            }
            Op::Sin => {
                let d = self.cos(a)?;
                self.mul(g, d)?
            }
            Op::Cos => {
                let d = self.sin(a)?;
                let p = self.mul(g, d)?;
                self.neg(p)?
            }
            Op::Relu => {
                let mask: Arc<[bool]> = self.value(a).iter().map(|&x| x > 0.0).collect();
                let zero = self.scalar_const(0.0);
                self.select(mask, g, zero)?
            }
            Op::Softplus => {
                let d = self.sigmoid(a)?;
                self.mul(g, d)?
            }
            Op::Sigmoid => {
                let one = self.scalar_const(1.0);
                let om = self.sub(one, out)?;
                let d = self.mul(out, om)?;
                self.mul(g, d)?
            }
            Op::Clamp { lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let mask: Arc<[bool]> = self
                    .value(a)
                    .iter()
                    .map(|&x| x >= lo && x <= hi)
                    .collect();
                let zero = self.scalar_const(0.0);
                self.select(mask, g, zero)?
            }
            Op::Sum => {
                let n = self.nodes[a.0].len;
                let index: Arc<[u32]> = vec![0u32; n].into();
                self.gather(g, index)?
            }
            Op::Gather { index } => {
                let n = self.nodes[a.0].len;
                self.scatter_add(g, index.clone(), n)?
            }
            Op::ScatterAdd { index, .. } => self.gather(g, index.clone())?,
            Op::Interp(table) => {
                let n = self.nodes[a.0].len;
                self.interp_transpose(g, table.clone(), n)?
            }
            Op::InterpTranspose { table, .. } => self.interp(g, table.clone())?,
            Op::Select { mask } => {
                let zero = self.scalar_const(0.0);
                if slot == 0 {
                    self.select(mask.clone(), g, zero)?
                } else {
                    self.select(mask.clone(), zero, g)?
                }
            }
            Op::MatMul { rows, inner, cols } => {
                let (rows, inner, cols) = (*rows, *inner, *cols);
                let b = b.unwrap();
                if slot == 0 {
                    let bt = self.gather(b, ops::transpose_index(inner, cols))?;
                    self.matmul(g, bt, rows, cols, inner)?
                } else {
                    let at = self.gather(a, ops::transpose_index(rows, inner))?;
                    self.matmul(at, g, inner, rows, cols)?
                }
            }
        };
        self.unbroadcast(c, inputs[slot])
    }
}
