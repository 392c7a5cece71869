//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each recorded node keeps its
//! output value together with the operation that produced it, so the backward
//! sweep can evaluate every adjoint from stored values alone. Nodes are pushed
//! in evaluation order, which is a topological order by construction.

use std::sync::Arc;

use rustfft::num_complex::Complex;

use crate::error::{Error, Result};
use crate::fft;
use crate::param::{ParamId, ParamStore};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Gather index meaning "write zero here".
pub const ZERO_SLOT: usize = usize::MAX;

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Gelu,
    Relu,
    Sigmoid,
}

impl Activation {
    pub const ALL: [Activation; 3] = [Activation::Gelu, Activation::Relu, Activation::Sigmoid];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

// sqrt(2/pi), tanh form of GELU
const GELU_C: f64 = 0.797_884_560_802_865_4;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    ScaleBy { x: NodeId, s: NodeId },
    AddBias { x: NodeId, bias: NodeId },
    Act { x: NodeId, kind: Activation },
    LayerNorm { x: NodeId, group: usize, eps: f64 },
    Gather { x: NodeId, index: Arc<[usize]> },
    Concat { xs: Vec<NodeId> },
    Reshape { x: NodeId },
    BlockGram { a: NodeId, b: NodeId, heads: usize, scale: f64 },
    BlockApply { q: NodeId, k: NodeId, heads: usize },
    BlockMean { x: NodeId },
    RowScale { x: NodeId, s: NodeId },
    Sum { x: NodeId },
    Abs { x: NodeId },
    AvgPool2 { x: NodeId },
    Fft2 { x: NodeId },
    ComplexAbs { x: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::ScaleBy { .. } => "scale_by",
            Op::AddBias { .. } => "add_bias",
            Op::Act { .. } => "pointwise",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::BlockGram { .. } => "block_gram",
            Op::BlockApply { .. } => "block_apply",
            Op::BlockMean { .. } => "block_mean",
            Op::RowScale { .. } => "row_scale",
            Op::Sum { .. } => "sum",
            Op::Abs { .. } => "abs",
            Op::AvgPool2 { .. } => "avg_pool2",
            Op::Fft2 { .. } => "fft2",
            Op::ComplexAbs { .. } => "complex_abs",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
    needs_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward sweep.
#[derive(Clone, Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient of the root with respect to `node`, if the node was reached.
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor> {
        self.nodes.get(node.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl Tape {
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

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, None, false)
    }

    /// A leaf that receives a gradient but is not tied to a stored parameter.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, None, true)
    }

    /// A leaf holding a snapshot of parameter `id`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push_leaf(store.get(id).value.clone(), Some(id), true)
    }

    fn push_leaf(&mut self, value: Tensor, param: Option<ParamId>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> NodeId {
        let value = self.eval(&op);
        let needs_grad = self.inputs(&op).iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            param: None,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn inputs(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::BlockGram { a, b, .. } => vec![*a, *b],
            Op::ScaleBy { x, s } | Op::RowScale { x, s } => vec![*x, *s],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::BlockApply { q, k, .. } => vec![*q, *k],
            Op::Concat { xs } => xs.clone(),
            Op::Scale { x, .. }
            | Op::Act { x, .. }
            | Op::LayerNorm { x, .. }
            | Op::Gather { x, .. }
            | Op::Reshape { x }
            | Op::BlockMean { x }
            | Op::Sum { x }
            | Op::Abs { x }
            | Op::AvgPool2 { x }
            | Op::Fft2 { x }
            | Op::ComplexAbs { x } => vec![*x],
        }
    }

    // ---- recording -------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        Ok(self.push(Op::MatMul { a, b }))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale { x, c })
    }

    /// `x · s` for a one-element tensor `s`.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(shape_err("scale_by", self.shape(x), self.shape(s)));
        }
        Ok(self.push(Op::ScaleBy { x, s }))
    }

    /// Adds `bias[k]` to every length-`k` row of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(shape_err("add_bias", sx, sb));
        }
        Ok(self.push(Op::AddBias { x, bias }))
    }

    pub fn pointwise(&mut self, x: NodeId, kind: Activation) -> NodeId {
        self.push(Op::Act { x, kind })
    }

    /// Normalises every run of `group` consecutive entries to zero mean and
    /// unit variance, with no learned affine.
    pub fn layernorm(&mut self, x: NodeId, group: usize, eps: f64) -> Result<NodeId> {
        if group == 0 || !self.value(x).len().is_multiple_of(group) || eps <= 0.0 {
            return Err(Error::contract(format!(
                "layernorm group {group} / eps {eps} invalid for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(self.push(Op::LayerNorm { x, group, eps }))
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == ZERO_SLOT`.
    pub fn gather(
        &mut self,
        x: NodeId,
        index: Arc<[usize]>,
        shape: impl Into<Vec<usize>>,
    ) -> Result<NodeId> {
        let shape = shape.into();
        let n = self.value(x).len();
        if shape.iter().product::<usize>() != index.len() {
            return Err(shape_err("gather", &shape, &[index.len()]));
        }
        if let Some(bad) = index.iter().find(|&&i| i != ZERO_SLOT && i >= n) {
            return Err(Error::contract(format!(
                "gather index {bad} out of range for {n} entries"
            )));
        }
        let id = self.push(Op::Gather { x, index });
        self.nodes[id.0].value = self.nodes[id.0].value.clone().reshape(shape)?;
        Ok(id)
    }

    /// Concatenates along the leading axis.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = xs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let tail = self.shape(*first)[1..].to_vec();
        for x in xs {
            if self.shape(*x)[1..] != tail[..] {
                return Err(shape_err("concat", self.shape(*first), self.shape(*x)));
            }
        }
        Ok(self.push(Op::Concat { xs: xs.to_vec() }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let shape = shape.into();
        let reshaped = self.value(x).clone().reshape(shape)?;
        let id = self.push(Op::Reshape { x });
        self.nodes[id.0].value = reshaped;
        Ok(id)
    }

    /// Per-block, per-head Gram products: for `a, b` of shape `[E, n, C]` with
    /// `C = heads·d`, returns `[E, heads, d, d]` with
    /// `out[e,h,l,j] = scale · Σᵢ a[e,i,h·d+l] · b[e,i,h·d+j]`.
    pub fn block_gram(&mut self, a: NodeId, b: NodeId, heads: usize, scale: f64) -> Result<NodeId> {
        self.same_shape("block_gram", a, b)?;
        let s = self.shape(a);
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(Error::contract(format!(
                "block_gram needs [E, n, C] with heads | C, got {s:?} and {heads} heads"
            )));
        }
        Ok(self.push(Op::BlockGram { a, b, heads, scale }))
    }

    /// Applies per-block, per-head coefficients: `q [E, n, C]`,
    /// `k [E, heads, d, d]` → `[E, n, C]` with
    /// `out[e,i,h·d+j] = Σₗ q[e,i,h·d+l] · k[e,h,l,j]`.
    pub fn block_apply(&mut self, q: NodeId, k: NodeId, heads: usize) -> Result<NodeId> {
        let (sq, sk) = (self.shape(q), self.shape(k));
        let ok = sq.len() == 3
            && heads > 0
            && sq[2] % heads == 0
            && sk == [sq[0], heads, sq[2] / heads, sq[2] / heads];
        if !ok {
            return Err(shape_err("block_apply", sq, sk));
        }
        Ok(self.push(Op::BlockApply { q, k, heads }))
    }

    /// Mean over all trailing axes: `[E, ...]` → `[E]`.
    pub fn block_mean(&mut self, x: NodeId) -> Result<NodeId> {
        if self.shape(x).is_empty() {
            return Err(Error::contract("block_mean of rank-0 tensor"));
        }
        Ok(self.push(Op::BlockMean { x }))
    }

    /// Scales block `e` of `x [E, ...]` by `s[e]`.
    pub fn row_scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        if ss.len() != 1 || sx.first() != Some(&ss[0]) {
            return Err(shape_err("row_scale", sx, ss));
        }
        Ok(self.push(Op::RowScale { x, s }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum { x })
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Abs { x })
    }

    /// 2×2 average pooling of an `[H, W]` image (trailing odd row/column dropped).
    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        match self.shape(x) {
            &[h, w] if h >= 2 && w >= 2 => Ok(self.push(Op::AvgPool2 { x })),
            s => Err(shape_err("avg_pool2", s, &[2, 2])),
        }
    }

    /// Unnormalised forward DFT of a real `[H, W]` image → `[H, W, 2]`.
    pub fn fft2(&mut self, x: NodeId) -> Result<NodeId> {
        match self.shape(x) {
            &[h, w] if h >= 1 && w >= 1 => Ok(self.push(Op::Fft2 { x })),
            s => Err(shape_err("fft2", s, &[0, 0])),
        }
    }

    /// Modulus of a `[..., 2]` complex tensor → `[...]`.
    pub fn complex_abs(&mut self, x: NodeId) -> Result<NodeId> {
        match self.shape(x).last() {
            Some(2) if self.shape(x).len() >= 2 => Ok(self.push(Op::ComplexAbs { x })),
            _ => Err(shape_err("complex_abs", self.shape(x), &[0, 2])),
        }
    }

    // ---- forward evaluation ---------------------------------------------

    fn eval(&self, op: &Op) -> Tensor {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        match op {
            Op::Leaf => unreachable!("leaves are never re-evaluated"),
            Op::MatMul { a, b } => {
                let (a, b) = (v(a), v(b));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                Tensor::from_parts(vec![m, n], gemm_nn(a.data(), b.data(), m, k, n))
            }
            Op::Add { a, b } => zip(v(a), v(b), |x, y| x + y),
            Op::Sub { a, b } => zip(v(a), v(b), |x, y| x - y),
            Op::Mul { a, b } => zip(v(a), v(b), |x, y| x * y),
            Op::Scale { x, c } => v(x).map(|t| t * c),
            Op::ScaleBy { x, s } => {
                let s = v(s).data()[0];
                v(x).map(|t| t * s)
            }
            Op::AddBias { x, bias } => {
                let (x, b) = (v(x), v(bias));
                let k = b.len();
                let mut out = x.data().to_vec();
                for row in out.chunks_exact_mut(k) {
                    for (o, bv) in row.iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
                Tensor::from_parts(x.shape().to_vec(), out)
            }
            Op::Act { x, kind } => v(x).map(|t| kind.apply(t)),
            Op::LayerNorm { x, group, eps } => {
                let x = v(x);
                let mut out = vec![0.0; x.len()];
                for (src, dst) in x.data().chunks_exact(*group).zip(out.chunks_exact_mut(*group)) {
                    let (mean, inv) = moments(src, *eps);
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = (s - mean) * inv;
                    }
                }
                Tensor::from_parts(x.shape().to_vec(), out)
            }
            Op::Gather { x, index } => {
                let src = v(x).data();
                let out = index
                    .iter()
                    .map(|&i| if i == ZERO_SLOT { 0.0 } else { src[i] })
                    .collect();
                Tensor::from_parts(vec![index.len()], out)
            }
            Op::Concat { xs } => {
                let mut shape = v(&xs[0]).shape().to_vec();
                shape[0] = xs.iter().map(|x| v(x).shape()[0]).sum();
                let data = xs.iter().flat_map(|x| v(x).data().iter().copied()).collect();
                Tensor::from_parts(shape, data)
            }
            Op::Reshape { x } => v(x).clone(),
            Op::BlockGram { a, b, heads, scale } => {
                let (a, b) = (v(a), v(b));
                let (e, n, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                let d = c / heads;
                let mut out = vec![0.0; e * heads * d * d];
                for blk in 0..e {
                    for i in 0..n {
                        let base = (blk * n + i) * c;
                        let (ar, br) = (&a.data()[base..base + c], &b.data()[base..base + c]);
                        for h in 0..*heads {
                            let o = &mut out[(blk * heads + h) * d * d..(blk * heads + h + 1) * d * d];
                            for l in 0..d {
                                let al = ar[h * d + l];
                                for j in 0..d {
                                    o[l * d + j] += al * br[h * d + j];
                                }
                            }
                        }
                    }
                }
                for o in &mut out {
                    *o *= scale;
                }
                Tensor::from_parts(vec![e, *heads, d, d], out)
            }
            Op::BlockApply { q, k, heads } => {
                let (q, k) = (v(q), v(k));
                let (e, n, c) = (q.shape()[0], q.shape()[1], q.shape()[2]);
                let d = c / heads;
                let mut out = vec![0.0; e * n * c];
                for blk in 0..e {
                    for i in 0..n {
                        let base = (blk * n + i) * c;
                        let qr = &q.data()[base..base + c];
                        let or = &mut out[base..base + c];
                        for h in 0..*heads {
                            let km = &k.data()[(blk * heads + h) * d * d..(blk * heads + h + 1) * d * d];
                            for l in 0..d {
                                let ql = qr[h * d + l];
                                for j in 0..d {
                                    or[h * d + j] += ql * km[l * d + j];
                                }
                            }
                        }
                    }
                }
                Tensor::from_parts(vec![e, n, c], out)
            }
            Op::BlockMean { x } => {
                let x = v(x);
                let e = x.shape()[0];
                let m = x.len() / e.max(1);
                let out = x.data().chunks_exact(m.max(1)).map(|c| c.iter().sum::<f64>() / m as f64).collect();
                Tensor::from_parts(vec![e], out)
            }
            Op::RowScale { x, s } => {
                let (x, s) = (v(x), v(s));
                let m = x.len() / s.len();
                let mut out = x.data().to_vec();
                for (chunk, sv) in out.chunks_exact_mut(m).zip(s.data()) {
                    for o in chunk {
                        *o *= sv;
                    }
                }
                Tensor::from_parts(x.shape().to_vec(), out)
            }
            Op::Sum { x } => Tensor::scalar(v(x).sum()),
            Op::Abs { x } => v(x).map(f64::abs),
            Op::AvgPool2 { x } => {
                let x = v(x);
                let (h, w) = (x.shape()[0], x.shape()[1]);
                let (ho, wo) = (h / 2, w / 2);
                let d = x.data();
                let mut out = vec![0.0; ho * wo];
                for i in 0..ho {
                    for j in 0..wo {
                        let (r, c) = (2 * i, 2 * j);
                        out[i * wo + j] = 0.25
                            * (d[r * w + c] + d[r * w + c + 1] + d[(r + 1) * w + c] + d[(r + 1) * w + c + 1]);
                    }
                }
                Tensor::from_parts(vec![ho, wo], out)
            }
            Op::Fft2 { x } => {
                let x = v(x);
                let (h, w) = (x.shape()[0], x.shape()[1]);
                let mut buf = fft::real_to_complex(x.data());
                fft::fft2_in_place(&mut buf, h, w, false);
                Tensor::from_parts(vec![h, w, 2], fft::interleave(&buf))
            }
            Op::ComplexAbs { x } => {
                let x = v(x);
                let shape = x.shape()[..x.rank() - 1].to_vec();
                let out = x.data().chunks_exact(2).map(|p| p[0].hypot(p[1])).collect();
                Tensor::from_parts(shape, out)
            }
        }
    }

    /// Re-evaluates every recorded operation from its recorded inputs and
    /// checks the result is bit-identical to the stored value.
    pub fn verify_replay(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let again = self.eval(&node.op);
            let same = again.len() == node.value.len()
                && again
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(Error::contract(format!(
                    "replay of node {i} ({}) differs from the recorded value",
                    node.op.name()
                )));
            }
        }
        Ok(())
    }

    // ---- reverse sweep --------------------------------------------------

    /// Accumulates gradients of the scalar `root` in exact reverse recording order.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, has shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(self.shape(root).to_vec(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, contrib) in self.vjp(&node.op, &node.value, &g) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(root.0 + 1)
            .filter_map(|(i, n)| {
                let id = n.param?;
                let g = grads[i]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(n.value.shape().to_vec()));
                Some((id, g))
            })
            .collect();
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn vjp(&self, op: &Op, out: &Tensor, g: &Tensor) -> Vec<(NodeId, Tensor)> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let gd = g.data();
        match op {
            Op::Leaf => vec![],
            Op::MatMul { a, b } => {
                let (av, bv) = (v(a), v(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let da = gemm_nt(gd, bv.data(), m, n, k);
                let db = gemm_tn(av.data(), gd, m, k, n);
                vec![
                    (*a, Tensor::from_parts(vec![m, k], da)),
                    (*b, Tensor::from_parts(vec![k, n], db)),
                ]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub { a, b } => vec![(*a, g.clone()), (*b, g.map(|t| -t))],
            Op::Mul { a, b } => {
                let (av, bv) = (v(a), v(b));
                vec![(*a, zip(g, bv, |x, y| x * y)), (*b, zip(g, av, |x, y| x * y))]
            }
            Op::Scale { x, c } => vec![(*x, g.map(|t| t * c))],
            Op::ScaleBy { x, s } => {
                let sv = v(s).data()[0];
                let ds = g.dot(v(x));
                vec![
                    (*x, g.map(|t| t * sv)),
                    (*s, Tensor::from_parts(v(s).shape().to_vec(), vec![ds])),
                ]
            }
            Op::AddBias { x, bias } => {
                let k = v(bias).len();
                let mut db = vec![0.0; k];
                for row in gd.chunks_exact(k) {
                    for (d, r) in db.iter_mut().zip(row) {
                        *d += r;
                    }
                }
                vec![(*x, g.clone()), (*bias, Tensor::from_parts(vec![k], db))]
            }
            Op::Act { x, kind } => {
                let xv = v(x);
                vec![(*x, zip(g, xv, |gv, t| gv * kind.derivative(t)))]
            }
            Op::LayerNorm { x, group, eps } => {
                let xv = v(x);
                let mut dx = vec![0.0; xv.len()];
                let n = *group as f64;
                for ((src, y), (gs, dst)) in xv
                    .data()
                    .chunks_exact(*group)
                    .zip(out.data().chunks_exact(*group))
                    .zip(gd.chunks_exact(*group).zip(dx.chunks_exact_mut(*group)))
                {
                    let (_, inv) = moments(src, *eps);
                    let mean_g = gs.iter().sum::<f64>() / n;
                    let mean_gy = gs.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((d, gv), yv) in dst.iter_mut().zip(gs).zip(y) {
                        *d = inv * (gv - mean_g - yv * mean_gy);
                    }
                }
                vec![(*x, Tensor::from_parts(xv.shape().to_vec(), dx))]
            }
            Op::Gather { x, index } => {
                let xv = v(x);
                let mut dx = vec![0.0; xv.len()];
                for (&i, gv) in index.iter().zip(gd) {
                    if i != ZERO_SLOT {
                        dx[i] += gv;
                    }
                }
                vec![(*x, Tensor::from_parts(xv.shape().to_vec(), dx))]
            }
            Op::Concat { xs } => {
                let mut offset = 0;
                xs.iter()
                    .map(|x| {
                        let xv = v(x);
                        let part = gd[offset..offset + xv.len()].to_vec();
                        offset += xv.len();
                        (*x, Tensor::from_parts(xv.shape().to_vec(), part))
                    })
                    .collect()
            }
            Op::Reshape { x } => vec![(*x, Tensor::from_parts(v(x).shape().to_vec(), gd.to_vec()))],
            Op::BlockGram { a, b, heads, scale } => {
                let (av, bv) = (v(a), v(b));
                let (e, n, c) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let d = c / heads;
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for blk in 0..e {
                    for i in 0..n {
                        let base = (blk * n + i) * c;
                        for h in 0..*heads {
                            let gm = &gd[(blk * heads + h) * d * d..(blk * heads + h + 1) * d * d];
                            for l in 0..d {
                                let al = av.data()[base + h * d + l];
                                let mut acc = 0.0;
                                for j in 0..d {
                                    let gv = gm[l * d + j] * scale;
                                    acc += gv * bv.data()[base + h * d + j];
                                    db[base + h * d + j] += gv * al;
                                }
                                da[base + h * d + l] += acc;
                            }
                        }
                    }
                }
                vec![
                    (*a, Tensor::from_parts(av.shape().to_vec(), da)),
                    (*b, Tensor::from_parts(bv.shape().to_vec(), db)),
                ]
            }
            Op::BlockApply { q, k, heads } => {
                let (qv, kv) = (v(q), v(k));
                let (e, n, c) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
                let d = c / heads;
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                for blk in 0..e {
                    for i in 0..n {
                        let base = (blk * n + i) * c;
                        for h in 0..*heads {
                            let kb = (blk * heads + h) * d * d;
                            for l in 0..d {
                                let ql = qv.data()[base + h * d + l];
                                let mut acc = 0.0;
                                for j in 0..d {
                                    let gv = gd[base + h * d + j];
                                    acc += gv * kv.data()[kb + l * d + j];
                                    dk[kb + l * d + j] += ql * gv;
                                }
                                dq[base + h * d + l] += acc;
                            }
                        }
                    }
                }
                vec![
                    (*q, Tensor::from_parts(qv.shape().to_vec(), dq)),
                    (*k, Tensor::from_parts(kv.shape().to_vec(), dk)),
                ]
            }
            Op::BlockMean { x } => {
                let xv = v(x);
                let e = xv.shape()[0];
                let m = xv.len() / e.max(1);
                let mut dx = vec![0.0; xv.len()];
                for (chunk, gv) in dx.chunks_exact_mut(m.max(1)).zip(gd) {
                    chunk.fill(gv / m as f64);
                }
                vec![(*x, Tensor::from_parts(xv.shape().to_vec(), dx))]
            }
            Op::RowScale { x, s } => {
                let (xv, sv) = (v(x), v(s));
                let m = xv.len() / sv.len();
                let mut dx = gd.to_vec();
                let mut ds = vec![0.0; sv.len()];
                for (r, (chunk, sval)) in dx.chunks_exact_mut(m).zip(sv.data()).enumerate() {
                    let xr = &xv.data()[r * m..(r + 1) * m];
                    ds[r] = chunk.iter().zip(xr).map(|(a, b)| a * b).sum();
                    for c in chunk.iter_mut() {
                        *c *= sval;
                    }
                }
                vec![
                    (*x, Tensor::from_parts(xv.shape().to_vec(), dx)),
                    (*s, Tensor::from_parts(sv.shape().to_vec(), ds)),
                ]
            }
            Op::Sum { x } => vec![(*x, Tensor::full(v(x).shape().to_vec(), gd[0]))],
            Op::Abs { x } => vec![(*x, zip(g, v(x), |gv, t| gv * sign(t)))],
            Op::AvgPool2 { x } => {
                let xv = v(x);
                let (h, w) = (xv.shape()[0], xv.shape()[1]);
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = vec![0.0; h * w];
                for i in 0..ho {
                    for j in 0..wo {
                        let gv = 0.25 * gd[i * wo + j];
                        let (r, c) = (2 * i, 2 * j);
                        dx[r * w + c] += gv;
                        dx[r * w + c + 1] += gv;
                        dx[(r + 1) * w + c] += gv;
                        dx[(r + 1) * w + c + 1] += gv;
                    }
                }
                vec![(*x, Tensor::from_parts(vec![h, w], dx))]
            }
            Op::Fft2 { x } => {
                // Adjoint of the real-input DFT: real part of the unscaled
                // conjugate transform of the incoming (re, im) gradient.
                let xv = v(x);
                let (h, w) = (xv.shape()[0], xv.shape()[1]);
                let mut buf: Vec<Complex<f64>> = fft::deinterleave(gd);
                fft::fft2_in_place(&mut buf, h, w, true);
                let dx = buf.iter().map(|c| c.re).collect();
                vec![(*x, Tensor::from_parts(vec![h, w], dx))]
            }
            Op::ComplexAbs { x } => {
                let xv = v(x);
                let mut dx = vec![0.0; xv.len()];
                for ((p, m), (d, gv)) in xv
                    .data()
                    .chunks_exact(2)
                    .zip(out.data())
                    .zip(dx.chunks_exact_mut(2).zip(gd))
                {
                    if *m > 0.0 {
                        d[0] = gv * p[0] / m;
                        d[1] = gv * p[1] / m;
                    }
                }
                vec![(*x, Tensor::from_parts(xv.shape().to_vec(), dx))]
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn sign(t: f64) -> f64 {
    if t > 0.0 {
        1.0
    } else if t < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean and `1/√(var + eps)` of one normalisation group.
fn moments(xs: &[f64], eps: f64) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_expansion() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t(&[2, 2], &[0.3, -1.2, 4.5, 2.0]));
        let z = tape.constant(Tensor::zeros([2, 2]));
        let ia = tape.matmul(i2, a).unwrap();
        let az = tape.matmul(a, z).unwrap();
        assert_eq!(tape.value(ia), tape.value(a));
        assert!(tape.value(az).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn layernorm_examples() {
        let mut tape = Tape::new();
        let c = tape.constant(t(&[1, 4], &[3.0; 4]));
        let y = tape.layernorm(c, 4, LAYERNORM_EPS).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let r = tape.constant(t(&[1, 2], &[1.0, -1.0]));
        let y = tape.layernorm(r, 2, 1e-300).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -1.0]);

        let r = tape.constant(t(&[1, 2], &[0.0, 2.0]));
        let y = tape.layernorm(r, 2, 1e-5).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        let got = tape.value(y).data();
        assert!((got[0] + expect).abs() < 1e-15 && (got[1] - expect).abs() < 1e-15);
        assert!(got.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn pointwise_examples() {
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert_eq!(Activation::Relu.apply(-3.2), 0.0);
        assert_eq!(Activation::Gelu.apply(0.0), 0.0);
    }

    #[test]
    fn backward_linear_map_gives_column_sums() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -4.0, 5.0, 0.5]));
        let x = tape.variable(t(&[3, 1], &[0.1, 0.2, 0.3]));
        let ax = tape.matmul(a, x).unwrap();
        let root = tape.sum(ax);
        let g = tape.backward(root).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[-3.0, 7.0, 3.5]);
    }

    #[test]
    fn backward_sigmoid_at_origin() {
        let mut tape = Tape::new();
        let w = tape.variable(Tensor::scalar(0.0));
        let s = tape.pointwise(w, Activation::Sigmoid);
        let root = tape.scale(s, 3.0);
        let g = tape.backward(root).unwrap();
        assert_eq!(g.wrt(w).unwrap().data(), &[0.75]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::zeros([2]));
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn gather_zero_slot_and_scatter() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[3], &[1.0, 2.0, 3.0]));
        let idx: Arc<[usize]> = vec![2, ZERO_SLOT, 2, 0].into();
        let y = tape.gather(x, idx, [4]).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 0.0, 3.0, 1.0]);
        let root = tape.sum(y);
        let g = tape.backward(root).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 0.0, 2.0]);
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[2, 4], &[0.1, -0.4, 2.0, 1.5, 0.0, 3.0, -1.0, 0.25]));
        let y = tape.layernorm(x, 2, LAYERNORM_EPS).unwrap();
        let z = tape.pointwise(y, Activation::Gelu);
        let r = tape.reshape(z, [1, 2, 4]).unwrap();
        let k = tape.block_gram(r, r, 2, 0.5).unwrap();
        let _ = tape.block_apply(r, k, 2).unwrap();
        tape.verify_replay().unwrap();
    }
}
