use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::real::{gemm, MatRef};
use crate::{Real, Rng, Tensor};

/// Floor applied by [`Var::log`] before taking the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    Exp(NodeId),
    Log { x: NodeId, floor: Option<T> },
    Relu(NodeId),
    ClampMin { x: NodeId, min: T },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, geom: ConvGeom },
    MaxPool2 { x: NodeId, argmax: Vec<u32> },
    Upsample2 { x: NodeId },
    Concat { xs: Vec<NodeId> },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    MatMul { a: NodeId, b: NodeId },
    Softmax { x: NodeId },
    Dropout { x: NodeId, scaled_mask: Vec<T> },
    Sum(NodeId),
    Mean(NodeId),
    SqDiffMean(NodeId, NodeId),
    Reshape(NodeId),
    Crop { x: NodeId, y0: usize, x0: usize },
    SelectBatch { x: NodeId, index: usize },
    BroadcastSpatial { x: NodeId },
}

impl<T> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Log { .. } => "log",
            Op::Relu(..) => "relu",
            Op::ClampMin { .. } => "clamp_min",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::Upsample2 { .. } => "upsample2",
            Op::Concat { .. } => "concat",
            Op::Linear { .. } => "linear",
            Op::MatMul { .. } => "matmul",
            Op::Softmax { .. } => "softmax",
            Op::Dropout { .. } => "dropout",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SqDiffMean(..) => "sq_diff_mean",
            Op::Reshape(..) => "reshape",
            Op::Crop { .. } => "crop",
            Op::SelectBatch { .. } => "select_batch",
            Op::BroadcastSpatial { .. } => "broadcast_spatial",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::SqDiffMean(a, b) => vec![*a, *b],
            Op::MatMul { a, b } => vec![*a, *b],
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Concat { xs } => xs.clone(),
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Exp(x)
            | Op::Relu(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::Log { x, .. }
            | Op::ClampMin { x, .. }
            | Op::MaxPool2 { x, .. }
            | Op::Upsample2 { x }
            | Op::Softmax { x }
            | Op::Dropout { x, .. }
            | Op::Crop { x, .. }
            | Op::SelectBatch { x, .. }
            | Op::BroadcastSpatial { x } => vec![*x],
        }
    }
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Summary of one recorded operation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub kind: &'static str,
    pub inputs: Vec<NodeId>,
    pub output: NodeId,
    pub shape: Vec<usize>,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order of the
/// graph; [`Tape::backward`] walks it in exact reverse. A tape is confined
/// to the thread that built it.
#[derive(Default)]
pub struct Tape<T: Real = f64> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f64> {
    tape: &'t Tape<T>,
    id: NodeId,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Gradients of a scalar loss with respect to every reachable leaf that
/// requires them.
#[derive(Debug)]
pub struct Gradients<T = f64> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.slots.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf whose gradient is collected by [`Tape::backward`].
    pub fn param(&self, value: impl Into<Arc<Tensor<T>>>) -> Var<'_, T> {
        self.push(value.into(), Op::Leaf, true)
    }

    /// Leaf treated as a constant: no gradient flows into it.
    pub fn constant(&self, value: impl Into<Arc<Tensor<T>>>) -> Var<'_, T> {
        self.push(value.into(), Op::Leaf, false)
    }

    fn push(&self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id }
    }

    fn record(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(Arc::new(value), op, requires_grad)
    }

    fn value_of(&self, id: NodeId) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn owns(&self, v: Var<'_, T>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    pub fn records(&self) -> Vec<Record> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .map(|(id, n)| Record { kind: n.op.kind(), inputs: n.op.inputs(), output: id, shape: n.value.shape().to_vec() })
            .collect()
    }

    /// FNV-1a digest over op kinds, wiring, stored values and dropout masks.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (id, node) in self.nodes.borrow().iter().enumerate() {
            eat(id as u64);
            node.op.kind().bytes().for_each(|b| eat(b as u64));
            node.op.inputs().into_iter().for_each(|i| eat(i as u64));
            node.value.shape().iter().for_each(|&d| eat(d as u64));
            node.value.data().iter().for_each(|v| eat(v.as_f64().to_bits()));
            if let Op::Dropout { scaled_mask, .. } = &node.op {
                scaled_mask.iter().for_each(|v| eat(v.as_f64().to_bits()));
            }
        }
        h
    }

    /// Concatenate along axis 1. All inputs must agree on every other axis.
    pub fn concat_channels(&self, xs: &[Var<'_, T>]) -> Result<Var<'_, T>> {
        if xs.is_empty() {
            return Err(TensorError::invalid("concat", "no inputs"));
        }
        for x in xs {
            self.owns(*x)?;
        }
        let values: Vec<_> = xs.iter().map(|x| x.value()).collect();
        let first = values[0].shape();
        if first.len() < 2 {
            return Err(TensorError::invalid("concat", format!("rank {} < 2", first.len())));
        }
        let outer = first[0];
        let inner: usize = first[2..].iter().product();
        for v in &values {
            let s = v.shape();
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                let shapes: Vec<&[usize]> = values.iter().map(|v| v.shape()).collect();
                return Err(TensorError::shapes("concat", &shapes));
            }
        }
        let total_c: usize = values.iter().map(|v| v.shape()[1]).sum();
        let mut data = Vec::with_capacity(outer * total_c * inner);
        for o in 0..outer {
            for v in &values {
                let c = v.shape()[1];
                data.extend_from_slice(&v.data()[o * c * inner..(o + 1) * c * inner]);
            }
        }
        let mut shape = first.to_vec();
        shape[1] = total_c;
        let out = Tensor::new(shape, data)?;
        Ok(self.record(out, Op::Concat { xs: xs.iter().map(|x| x.id).collect() }))
    }

    /// Reverse pass from a scalar `loss`, returning gradients for every leaf
    /// created with [`Tape::param`] that the loss depends on.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        self.owns(loss)?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.id).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                leaves[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients { slots: leaves })
    }
}

/// Gradient buffer for `id`, allocated on first use; `None` when the node
/// does not require a gradient.
fn slot<'g, T: Real>(nodes: &[Node<T>], grads: &'g mut [Option<Vec<T>>], id: NodeId) -> Option<&'g mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.len()]))
}

fn add_into<T: Real>(dst: &mut [T], src: impl IntoIterator<Item = T>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn propagate<T: Real>(nodes: &[Node<T>], id: NodeId, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    let val = |i: NodeId| nodes[i].value.clone();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(s) = slot(nodes, grads, *a) {
                add_into(s, g.iter().copied());
            }
            if let Some(s) = slot(nodes, grads, *b) {
                add_into(s, g.iter().copied());
            }
        }
        Op::Sub(a, b) => {
            if let Some(s) = slot(nodes, grads, *a) {
                add_into(s, g.iter().copied());
            }
            if let Some(s) = slot(nodes, grads, *b) {
                add_into(s, g.iter().map(|&v| -v));
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if let Some(s) = slot(nodes, grads, *a) {
                add_into(s, g.iter().zip(vb.data()).map(|(&g, &y)| g * y));
            }
            if let Some(s) = slot(nodes, grads, *b) {
                add_into(s, g.iter().zip(va.data()).map(|(&g, &x)| g * x));
            }
        }
        Op::Scale(x, f) => {
            if let Some(s) = slot(nodes, grads, *x) {
                add_into(s, g.iter().map(|&v| v * *f));
            }
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            if let Some(s) = slot(nodes, grads, *x) {
                add_into(s, g.iter().copied());
            }
        }
        Op::Exp(x) => {
            let y = node.value.clone();
            if let Some(s) = slot(nodes, grads, *x) {
                add_into(s, g.iter().zip(y.data()).map(|(&g, &y)| g * y));
            }
        }
        Op::Log { x, floor } => {
            let vx = val(*x);
            if let Some(s) = slot(nodes, grads, *x) {
                add_into(
                    s,
                    g.iter().zip(vx.data()).map(|(&g, &x)| match floor {
                        Some(f) if x < *f => T::zero(),
                        _ => g / x,
                    }),
                );
            }
        }
        Op::Relu(x) => {
            let vx = val(*x);
            if let Some(s) = slot(nodes, grads, *x) {
                add_into(s, g.iter().zip(vx.data()).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }));
            }
        }
        Op::ClampMin { x, min } => {
            let vx = val(*x);
            if let Some(s) = slot(nodes, grads, *x) {
                add_into(s, g.iter().zip(vx.data()).map(|(&g, &x)| if x >= *min { g } else { T::zero() }));
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let want = (nodes[*x].requires_grad, nodes[*w].requires_grad, nodes[*b].requires_grad);
            let (vx, vw) = (val(*x), val(*w));
            let cg = kernels::conv2d_backward(geom, vx.data(), vw.data(), g, want);
            for (target, grad) in [(*x, cg.dx), (*w, cg.dw), (*b, cg.db)] {
                if let (Some(s), Some(d)) = (slot(nodes, grads, target), grad) {
                    add_into(s, d);
                }
            }
        }
        Op::MaxPool2 { x, argmax } => {
            if let Some(s) = slot(nodes, grads, *x) {
                for (&gi, &src) in g.iter().zip(argmax) {
                    s[src as usize] = s[src as usize] + gi;
                }
            }
        }
        Op::Upsample2 { x } => {
            let shape = nodes[*x].value.shape().to_vec();
            if let Some(s) = slot(nodes, grads, *x) {
                let (h, w) = (shape[2], shape[3]);
                add_into(s, kernels::upsample2_backward(g, shape[0] * shape[1], h, w));
            }
        }
        Op::Concat { xs } => {
            let shape = node.value.shape();
            let outer = shape[0];
            let total_c = shape[1];
            let inner: usize = shape[2..].iter().product();
            let mut offset = 0;
            for &xi in xs {
                let c = nodes[xi].value.shape()[1];
                if let Some(s) = slot(nodes, grads, xi) {
                    for o in 0..outer {
                        let src = &g[(o * total_c + offset) * inner..(o * total_c + offset + c) * inner];
                        add_into(&mut s[o * c * inner..(o + 1) * c * inner], src.iter().copied());
                    }
                }
                offset += c;
            }
        }
        Op::Linear { x, w, b } => {
            let (vx, vw) = (val(*x), val(*w));
            let (n, fin) = (vx.shape()[0], vx.shape()[1]);
            let fout = vw.shape()[0];
            let gm = MatRef::row_major(g, n, fout);
            if let Some(s) = slot(nodes, grads, *x) {
                gemm(gm, MatRef::row_major(vw.data(), fout, fin), s, true);
            }
            if let Some(s) = slot(nodes, grads, *w) {
                gemm(gm.t(), MatRef::row_major(vx.data(), n, fin), s, true);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                for row in g.chunks_exact(fout) {
                    add_into(s, row.iter().copied());
                }
            }
        }
        Op::MatMul { a, b } => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k) = (va.shape()[0], va.shape()[1]);
            let n = vb.shape()[1];
            let gm = MatRef::row_major(g, m, n);
            if let Some(s) = slot(nodes, grads, *a) {
                gemm(gm, MatRef::row_major(vb.data(), k, n).t(), s, true);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                gemm(MatRef::row_major(va.data(), m, k).t(), gm, s, true);
            }
        }
        Op::Softmax { x } => {
            let shape = node.value.shape();
            let inner: usize = shape[2..].iter().product();
            let dx = kernels::softmax_backward(node.value.data(), g, shape[0], shape[1], inner);
            if let Some(s) = slot(nodes, grads, *x) {
                add_into(s, dx);
            }
        }
        Op::Dropout { x, scaled_mask } => {
            if let Some(s) = slot(nodes, grads, *x) {
                add_into(s, g.iter().zip(scaled_mask).map(|(&g, &m)| g * m));
            }
        }
        Op::Sum(x) => {
            if let Some(s) = slot(nodes, grads, *x) {
                let g0 = g[0];
                s.iter_mut().for_each(|v| *v = *v + g0);
            }
        }
        Op::Mean(x) => {
            if let Some(s) = slot(nodes, grads, *x) {
                let g0 = g[0] / T::of(s.len() as f64);
                s.iter_mut().for_each(|v| *v = *v + g0);
            }
        }
        Op::SqDiffMean(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let k = g[0] * T::of(2.0 / va.len() as f64);
            if let Some(s) = slot(nodes, grads, *a) {
                add_into(s, va.data().iter().zip(vb.data()).map(|(&x, &y)| k * (x - y)));
            }
            if let Some(s) = slot(nodes, grads, *b) {
                add_into(s, va.data().iter().zip(vb.data()).map(|(&x, &y)| k * (y - x)));
            }
        }
        Op::Crop { x, y0, x0 } => {
            let src_shape = nodes[*x].value.shape().to_vec();
            let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
            if let Some(s) = slot(nodes, grads, *x) {
                let (h, w) = (src_shape[2], src_shape[3]);
                for p in 0..src_shape[0] * src_shape[1] {
                    for y in 0..oh {
                        let dst = &mut s[p * h * w + (y0 + y) * w + x0..][..ow];
                        add_into(dst, g[(p * oh + y) * ow..][..ow].iter().copied());
                    }
                }
            }
        }
        Op::SelectBatch { x, index } => {
            let len = node.value.len();
            if let Some(s) = slot(nodes, grads, *x) {
                add_into(&mut s[index * len..(index + 1) * len], g.iter().copied());
            }
        }
        Op::BroadcastSpatial { x } => {
            let plane = node.value.shape()[2] * node.value.shape()[3];
            if let Some(s) = slot(nodes, grads, *x) {
                for (i, v) in s.iter_mut().enumerate() {
                    *v = *v + g[i * plane..(i + 1) * plane].iter().copied().sum::<T>();
                }
            }
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Value of a scalar variable.
    pub fn item(&self) -> T {
        self.value().item()
    }

    fn unary(self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'t, T> {
        let out = self.value().map(f);
        self.tape.record(out, op)
    }

    fn binary(self, other: Var<'t, T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, Var<'t, T>)> {
        self.tape.owns(other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(TensorError::shapes(name, &[a.shape(), b.shape()]));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((Tensor::new(a.shape().to_vec(), data)?, other))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (out, o) = self.binary(other, "add", |a, b| a + b)?;
        Ok(self.tape.record(out, Op::Add(self.id, o.id)))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (out, o) = self.binary(other, "sub", |a, b| a - b)?;
        Ok(self.tape.record(out, Op::Sub(self.id, o.id)))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (out, o) = self.binary(other, "mul", |a, b| a * b)?;
        Ok(self.tape.record(out, Op::Mul(self.id, o.id)))
    }

    pub fn scale(self, factor: T) -> Var<'t, T> {
        self.unary(Op::Scale(self.id, factor), |v| v * factor)
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        self.unary(Op::AddScalar(self.id), |v| v + c)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(Op::Exp(self.id), |v| v.exp())
    }

    /// Natural log with the argument clamped below at [`LOG_FLOOR`].
    /// The gradient is zero where the clamp is active.
    pub fn log(self) -> Var<'t, T> {
        let floor = T::of(LOG_FLOOR);
        self.unary(Op::Log { x: self.id, floor: Some(floor) }, |v| v.max(floor).ln())
    }

    /// Natural log without clamping; non-positive inputs are a domain error.
    pub fn log_unclamped(self) -> Result<Var<'t, T>> {
        let v = self.value();
        if let Some((index, &bad)) = v.data().iter().enumerate().find(|(_, &x)| !(x > T::zero())) {
            return Err(TensorError::Domain { index, value: bad.as_f64() });
        }
        Ok(self.unary(Op::Log { x: self.id, floor: None }, |v| v.ln()))
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(Op::Relu(self.id), |v| if v > T::zero() { v } else { T::zero() })
    }

    /// `max(x, min)` elementwise; gradient passes only where `x >= min`.
    pub fn clamp_min(self, min: T) -> Var<'t, T> {
        self.unary(Op::ClampMin { x: self.id, min }, |v| v.max(min))
    }

    /// Stride-1 convolution with zero padding that preserves spatial size.
    /// `self: [N, Cin, H, W]`, `weight: [Cout, Cin, K, K]` with odd `K`, `bias: [Cout]`.
    pub fn conv2d(self, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.owns(weight)?;
        self.tape.owns(bias)?;
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (n, cin, h, wd) = x.dims4("conv2d")?;
        let bad = || TensorError::shapes("conv2d", &[x.shape(), w.shape(), b.shape()]);
        let [cout, wcin, k, k2] = *w.shape() else { return Err(bad()) };
        if wcin != cin || k != k2 || k % 2 == 0 || b.shape() != [cout] {
            return Err(bad());
        }
        let geom = ConvGeom { n, cin, cout, h, w: wd, k };
        let out = kernels::conv2d_forward(&geom, x.data(), w.data(), b.data());
        let out = Tensor::new(vec![n, cout, h, wd], out)?;
        Ok(self.tape.record(out, Op::Conv2d { x: self.id, w: weight.id, b: bias.id, geom }))
    }

    /// 2×2 max pooling with stride 2; spatial extents must be even.
    pub fn max_pool2(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("max_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::invalid("max_pool2", format!("odd spatial extent in {:?}", x.shape())));
        }
        let (data, argmax) = kernels::max_pool2_forward(x.data(), n * c, h, w);
        let out = Tensor::new(vec![n, c, h / 2, w / 2], data)?;
        Ok(self.tape.record(out, Op::MaxPool2 { x: self.id, argmax }))
    }

    /// Nearest-neighbour upsampling by a factor of 2.
    pub fn upsample2(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("upsample2")?;
        let out = Tensor::new(vec![n, c, 2 * h, 2 * w], kernels::upsample2_forward(x.data(), n * c, h, w))?;
        Ok(self.tape.record(out, Op::Upsample2 { x: self.id }))
    }

    /// `self: [N, in]`, `weight: [out, in]`, `bias: [out]` → `[N, out]`.
    pub fn linear(self, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.owns(weight)?;
        self.tape.owns(bias)?;
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let bad = || TensorError::shapes("linear", &[x.shape(), w.shape(), b.shape()]);
        let ([n, fin], [fout, win]) = (x.shape(), w.shape()) else { return Err(bad()) };
        let (n, fin, fout) = (*n, *fin, *fout);
        if *win != fin || b.shape() != [fout] {
            return Err(bad());
        }
        let mut out = vec![T::zero(); n * fout];
        for row in out.chunks_exact_mut(fout) {
            row.copy_from_slice(b.data());
        }
        gemm(MatRef::row_major(x.data(), n, fin), MatRef::row_major(w.data(), fout, fin).t(), &mut out, true);
        let out = Tensor::new(vec![n, fout], out)?;
        Ok(self.tape.record(out, Op::Linear { x: self.id, w: weight.id, b: bias.id }))
    }

    /// Rank-2 matrix product.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.owns(other)?;
        let (a, b) = (self.value(), other.value());
        let ([m, k], [k2, n]) = (a.shape(), b.shape()) else {
            return Err(TensorError::shapes("matmul", &[a.shape(), b.shape()]));
        };
        if k != k2 {
            return Err(TensorError::shapes("matmul", &[a.shape(), b.shape()]));
        }
        let (m, k, n) = (*m, *k, *n);
        let mut out = vec![T::zero(); m * n];
        gemm(MatRef::row_major(a.data(), m, k), MatRef::row_major(b.data(), k, n), &mut out, false);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.tape.record(out, Op::MatMul { a: self.id, b: other.id }))
    }

    /// Softmax across axis 1 (the channel axis).
    pub fn softmax_channels(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape();
        if shape.len() < 2 {
            return Err(TensorError::invalid("softmax", format!("rank {} < 2", shape.len())));
        }
        let inner: usize = shape[2..].iter().product();
        let out = Tensor::new(shape.to_vec(), kernels::softmax_forward(x.data(), shape[0], shape[1], inner))?;
        Ok(self.tape.record(out, Op::Softmax { x: self.id }))
    }

    /// Inverted dropout: each element is kept with probability `1 - rate`
    /// and rescaled by `1 / (1 - rate)`. The mask is drawn from `rng` now and
    /// stored on the tape.
    pub fn dropout(self, rate: f64, rng: &mut Rng) -> Result<Var<'t, T>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        let keep = 1.0 - rate;
        let scale = T::of(1.0 / keep);
        let len = self.value().len();
        let mask = (0..len).map(|_| if rate == 0.0 || rng.bernoulli(keep) { scale } else { T::zero() }).collect();
        Ok(self.apply_mask(mask))
    }

    /// Dropout with a caller-supplied binary mask and keep probability.
    pub fn dropout_with_mask(self, mask: &Tensor<T>, keep_prob: f64) -> Result<Var<'t, T>> {
        let x = self.value();
        if mask.shape() != x.shape() {
            return Err(TensorError::shapes("dropout", &[x.shape(), mask.shape()]));
        }
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(TensorError::invalid("dropout", format!("keep probability {keep_prob} outside (0, 1]")));
        }
        let scale = T::of(1.0 / keep_prob);
        let mut scaled = Vec::with_capacity(mask.len());
        for &m in mask.data() {
            if m != T::zero() && m != T::one() {
                return Err(TensorError::invalid("dropout", "mask must be binary"));
            }
            scaled.push(m * scale);
        }
        Ok(self.apply_mask(scaled))
    }

    fn apply_mask(self, scaled_mask: Vec<T>) -> Var<'t, T> {
        let x = self.value();
        let data = x.data().iter().zip(&scaled_mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.tape.record(out, Op::Dropout { x: self.id, scaled_mask })
    }

    pub fn sum(self) -> Var<'t, T> {
        let s = self.value().data().iter().copied().sum::<T>();
        self.tape.record(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t, T> {
        let v = self.value();
        let m = v.data().iter().copied().sum::<T>() / T::of(v.len().max(1) as f64);
        self.tape.record(Tensor::scalar(m), Op::Mean(self.id))
    }

    /// `mean((self - other)^2)`.
    pub fn sq_diff_mean(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (diff, o) = self.binary(other, "sq_diff_mean", |a, b| (a - b) * (a - b))?;
        let m = diff.data().iter().copied().sum::<T>() / T::of(diff.len().max(1) as f64);
        Ok(self.tape.record(Tensor::scalar(m), Op::SqDiffMean(self.id, o.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        let out = Tensor::new(shape.to_vec(), v.data().to_vec())
            .map_err(|_| TensorError::shapes("reshape", &[v.shape(), shape]))?;
        Ok(self.tape.record(out, Op::Reshape(self.id)))
    }

    /// Spatial window `[y0, y0+h) × [x0, x0+w)` of an NCHW tensor.
    pub fn crop2d(self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        let (n, c, sh, sw) = v.dims4("crop")?;
        if y0 + h > sh || x0 + w > sw {
            return Err(TensorError::invalid("crop", format!("window {h}x{w}+{y0}+{x0} exceeds {sh}x{sw}")));
        }
        let mut data = Vec::with_capacity(n * c * h * w);
        for p in 0..n * c {
            for y in 0..h {
                data.extend_from_slice(&v.data()[p * sh * sw + (y0 + y) * sw + x0..][..w]);
            }
        }
        let out = Tensor::new(vec![n, c, h, w], data)?;
        Ok(self.tape.record(out, Op::Crop { x: self.id, y0, x0 }))
    }

    /// Sample `index` along axis 0, keeping a leading extent of 1.
    pub fn select_batch(self, index: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        let n = *v.shape().first().ok_or_else(|| TensorError::invalid("select_batch", "rank 0"))?;
        if index >= n {
            return Err(TensorError::invalid("select_batch", format!("index {index} out of {n}")));
        }
        let len = v.len() / n;
        let mut shape = v.shape().to_vec();
        shape[0] = 1;
        let out = Tensor::new(shape, v.data()[index * len..(index + 1) * len].to_vec())?;
        Ok(self.tape.record(out, Op::SelectBatch { x: self.id, index }))
    }

    /// `[N, D]` → `[N, D, h, w]`, repeating each vector over the plane.
    pub fn broadcast_spatial(self, h: usize, w: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        let [n, d] = *v.shape() else {
            return Err(TensorError::invalid("broadcast_spatial", format!("expected rank 2, got {:?}", v.shape())));
        };
        let mut data = Vec::with_capacity(n * d * h * w);
        for &x in v.data() {
            data.extend(std::iter::repeat(x).take(h * w));
        }
        let out = Tensor::new(vec![n, d, h, w], data)?;
        Ok(self.tape.record(out, Op::BroadcastSpatial { x: self.id }))
    }
}
