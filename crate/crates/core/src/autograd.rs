//! Record-on-forward tape for reverse-mode differentiation.
//!
//! A [`Graph`] stores every intermediate value in insertion order, which is
//! already a topological order: an operation can only consume nodes that
//! exist when it is recorded. [`Graph::backward`] walks the tape in exact
//! reverse, so gradients are bitwise reproducible.
//!
//! Nodes only receive gradients when some leaf beneath them was registered
//! with `requires_grad`. Frozen weights therefore cost nothing in the
//! backward pass and their gradient slots stay empty.

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for diagnostics and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Mul,
    Scale,
    MatMul,
    Gelu,
    Softmax,
    LayerNorm,
    Attention,
    Concat,
    Narrow,
    Expand,
    Reshape,
    Sum,
    CrossEntropy,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::MatMul => "matmul",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layernorm",
            OpKind::Attention => "attention",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::Expand => "expand",
            OpKind::Reshape => "reshape",
            OpKind::Sum => "sum",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ALL_KINDS.iter().copied().find(|k| k.name() == name)
    }
}

const ALL_KINDS: [OpKind; 15] = [
    OpKind::Leaf,
    OpKind::Add,
    OpKind::Mul,
    OpKind::Scale,
    OpKind::MatMul,
    OpKind::Gelu,
    OpKind::Softmax,
    OpKind::LayerNorm,
    OpKind::Attention,
    OpKind::Concat,
    OpKind::Narrow,
    OpKind::Expand,
    OpKind::Reshape,
    OpKind::Sum,
    OpKind::CrossEntropy,
];

#[derive(Debug)]
enum Op {
    Leaf,
    /// `b` is either the same shape as `a` or a suffix of it (broadcast).
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `a[..., k] x b[k, n]`.
    MatMul(Var, Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Expand(Var),
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Attention { .. } => OpKind::Attention,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Expand(_) => OpKind::Expand,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Sum(_) => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    sign_flip: Option<OpKind>,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` into `tensor` if the tensor is trainable.
    /// Frozen tensors are never touched.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        if !tensor.requires_grad() {
            return Ok(());
        }
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => {
                tensor.zero_grad();
                Ok(())
            }
        }
    }
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_deriv(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// `out[m, n] += a[m, k] * b[k, n]`
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[m, k] += g[m, n] * b[k, n]^T`
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k, n] += a[m, k]^T * g[m, n]`
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (p, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aik * gv;
            }
        }
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

/// Sums `src` (the shape of the broadcast result) down onto a suffix-shaped operand.
fn reduce_broadcast(src: &[f64], target_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; target_len];
    for chunk in src.chunks(target_len) {
        out.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
    }
    out
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: negate every gradient contribution flowing out of `kind`.
    pub fn with_sign_flip(kind: OpKind) -> Self {
        Self {
            nodes: Vec::new(),
            sign_flip: Some(kind),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Registers a tensor as a leaf. Its `requires_grad` flag decides whether
    /// gradients are propagated to it.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_raw(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "constant",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape invariant")
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sb, sa) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// Elementwise sum; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add", a, b)?;
        let bv = &self.nodes[b.0].value;
        let mut out = self.nodes[a.0].value.clone();
        for chunk in out.chunks_mut(bv.len()) {
            chunk.iter_mut().zip(bv).for_each(|(x, y)| *x += y);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    /// Elementwise product; `b` may broadcast over the leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("mul", a, b)?;
        let bv = &self.nodes[b.0].value;
        let mut out = self.nodes[a.0].value.clone();
        for chunk in out.chunks_mut(bv.len()) {
            chunk.iter_mut().zip(bv).for_each(|(x, y)| *x *= y);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.nodes[a.0].value.iter().map(|x| x * s).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), rg)
    }

    /// `a[..., k] x b[k, n] -> [..., n]`; leading axes of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(sa) / k;
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm_nn(
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::MatMul(a, b), rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| gelu_scalar(x))
            .collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a), rg)
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().unwrap_or(&1);
        let mut out = self.nodes[a.0].value.clone();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Softmax(a), rg)
    }

    /// Layer normalisation over the last axis followed by a per-feature affine map.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&1);
        for (op, p) in [("layernorm.gamma", gamma), ("layernorm.beta", beta)] {
            if self.shape(p) != [d] {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let rows = xv.len() / d;
        let mut normalized = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                normalized[r * d + j] = xh;
                out[r * d + j] = xh * gv[j] + bv[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Scaled dot-product multi-head self-attention on `[B, T, d]` inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 3
            || self.shape(k) != shape.as_slice()
            || self.shape(v) != shape.as_slice()
        {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: shape,
                rhs: self.shape(k).to_vec(),
            });
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(
                "num_heads",
                format!("{heads} does not divide {d}"),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let mut probs = vec![0.0; b * heads * t * t];
        let mut out = vec![0.0; b * t * d];
        for bi in 0..b {
            for h in 0..heads {
                let p = &mut probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                for i in 0..t {
                    let qi = &qv[(bi * t + i) * d + h * dh..][..dh];
                    let row = &mut p[i * t..(i + 1) * t];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &kv[(bi * t + j) * d + h * dh..][..dh];
                        *s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                    }
                    softmax_in_place(row);
                    let oi = &mut out[(bi * t + i) * d + h * dh..][..dh];
                    for (j, &pij) in row.iter().enumerate() {
                        let vj = &vv[(bi * t + j) * d + h * dh..][..dh];
                        oi.iter_mut().zip(vj).for_each(|(o, x)| *o += pij * x);
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            shape,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Concatenates along `axis`. All other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first,
                rhs: vec![axis],
            });
        }
        let mut shape = first.clone();
        shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            shape[axis] += s[axis];
        }
        let outer: usize = numel(&shape[..axis]);
        let inner: usize = numel(&shape[axis + 1..]);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.nodes[p.0].value[o * len..(o + 1) * len]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Elements `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let src = self.shape(x).to_vec();
        if axis >= src.len() || len == 0 || start + len > src[axis] {
            return Err(Error::ShapeMismatch {
                op: "narrow",
                lhs: src,
                rhs: vec![axis, start, len],
            });
        }
        let mut shape = src.clone();
        shape[axis] = len;
        let outer: usize = numel(&src[..axis]);
        let inner: usize = numel(&src[axis + 1..]);
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            let base = o * src[axis] * inner + start * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Narrow { x, axis, start }, rg))
    }

    /// Repeats `x` along a new leading axis of extent `batch`.
    pub fn expand(&mut self, x: Var, batch: usize) -> Var {
        let mut shape = vec![batch];
        shape.extend_from_slice(self.shape(x));
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(xv.len() * batch);
        for _ in 0..batch {
            out.extend_from_slice(xv);
        }
        let rg = self.rg(&[x]);
        self.push(shape, out, Op::Expand(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(x)) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let out = self.nodes[x.0].value.clone();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        let rg = self.rg(&[x]);
        self.push(Vec::new(), vec![s], Op::Sum(x), rg)
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let c = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes: c,
            });
        }
        let mut probs = self.nodes[logits.0].value.clone();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            softmax_in_place(row);
        }
        loss /= labels.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let flip = self.sign_flip == Some(node.op.kind());
            let contributions = self.local_backward(node, &g);
            for (var, mut delta) in contributions {
                if flip {
                    delta.iter_mut().for_each(|x| *x = -*x);
                }
                add_into(&mut grads[var.0], &delta);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_backward(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.needs(*b) {
                    out.push((*b, reduce_broadcast(g, self.nodes[b.0].value.len())));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.needs(*a) {
                    let mut da = g.to_vec();
                    for chunk in da.chunks_mut(bv.len()) {
                        chunk.iter_mut().zip(bv).for_each(|(x, y)| *x *= y);
                    }
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    let prod: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    out.push((*b, reduce_broadcast(&prod, bv.len())));
                }
            }
            Op::Scale(a, s) => {
                if self.needs(*a) {
                    out.push((*a, g.iter().map(|x| x * s).collect()));
                }
            }
            Op::MatMul(a, b) => {
                let sb = &self.nodes[b.0].shape;
                let (k, n) = (sb[0], sb[1]);
                let av = &self.nodes[a.0].value;
                let m = av.len() / k;
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g, &self.nodes[b.0].value, &mut da, m, k, n);
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(av, g, &mut db, m, k, n);
                    out.push((*b, db));
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let av = &self.nodes[a.0].value;
                    out.push((
                        *a,
                        g.iter()
                            .zip(av)
                            .map(|(gi, &x)| gi * gelu_deriv(x))
                            .collect(),
                    ));
                }
            }
            Op::Softmax(a) => {
                if self.needs(*a) {
                    let n = *node.shape.last().unwrap_or(&1);
                    let mut da = vec![0.0; g.len()];
                    for ((dr, gr), yr) in
                        da.chunks_mut(n).zip(g.chunks(n)).zip(node.value.chunks(n))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for j in 0..n {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    out.push((*a, da));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let d = self.nodes[gamma.0].value.len();
                let gv = &self.nodes[gamma.0].value;
                if self.needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..inv_std.len() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &normalized[r * d..(r + 1) * d];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            dx[r * d + j] = inv_std[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    out.push((*x, dx));
                }
                if self.needs(*gamma) {
                    let prod: Vec<f64> = g.iter().zip(normalized).map(|(a, b)| a * b).collect();
                    out.push((*gamma, reduce_broadcast(&prod, d)));
                }
                if self.needs(*beta) {
                    out.push((*beta, reduce_broadcast(g, d)));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                out.extend(self.attention_backward(&node.shape, *q, *k, *v, *heads, probs, g));
            }
            Op::Concat { parts, axis } => {
                let inner: usize = numel(&node.shape[axis + 1..]);
                let outer: usize = numel(&node.shape[..*axis]);
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].shape[*axis] * inner;
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(len * outer);
                        for o in 0..outer {
                            let base = o * node.shape[*axis] * inner + offset;
                            dp.extend_from_slice(&g[base..base + len]);
                        }
                        out.push((p, dp));
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                if self.needs(*x) {
                    let src = &self.nodes[x.0].shape;
                    let inner: usize = numel(&src[axis + 1..]);
                    let outer: usize = numel(&src[..*axis]);
                    let len = node.shape[*axis] * inner;
                    let mut dx = vec![0.0; numel(src)];
                    for o in 0..outer {
                        let base = o * src[*axis] * inner + start * inner;
                        dx[base..base + len].copy_from_slice(&g[o * len..(o + 1) * len]);
                    }
                    out.push((*x, dx));
                }
            }
            Op::Expand(x) => {
                if self.needs(*x) {
                    out.push((*x, reduce_broadcast(g, self.nodes[x.0].value.len())));
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    out.push((*x, g.to_vec()));
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    out.push((*x, vec![g[0]; self.nodes[x.0].value.len()]));
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.needs(*logits) {
                    let c = self.nodes[logits.0].shape[1];
                    let scale = g[0] / labels.len() as f64;
                    let mut dl = probs.clone();
                    for (row, &label) in dl.chunks_mut(c).zip(labels) {
                        row[label] -= 1.0;
                        row.iter_mut().for_each(|x| *x *= scale);
                    }
                    out.push((*logits, dl));
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        shape: &[usize],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
    ) -> Vec<(Var, Vec<f64>)> {
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let (need_q, need_k, need_v) = (self.needs(q), self.needs(k), self.needs(v));
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dp = vec![0.0; t];
        for bi in 0..b {
            for h in 0..heads {
                let p = &probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                for i in 0..t {
                    let gi = &g[(bi * t + i) * d + h * dh..][..dh];
                    let prow = &p[i * t..(i + 1) * t];
                    for j in 0..t {
                        let vj = &vv[(bi * t + j) * d + h * dh..][..dh];
                        dp[j] = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                        if need_v {
                            let dvj = &mut dv[(bi * t + j) * d + h * dh..][..dh];
                            dvj.iter_mut().zip(gi).for_each(|(o, x)| *o += prow[j] * x);
                        }
                    }
                    let dot: f64 = dp.iter().zip(prow).map(|(x, y)| x * y).sum();
                    for j in 0..t {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        if need_q {
                            let kj = &kv[(bi * t + j) * d + h * dh..][..dh];
                            let dqi = &mut dq[(bi * t + i) * d + h * dh..][..dh];
                            dqi.iter_mut().zip(kj).for_each(|(o, x)| *o += ds * x);
                        }
                        if need_k {
                            let qi = &qv[(bi * t + i) * d + h * dh..][..dh];
                            let dkj = &mut dk[(bi * t + j) * d + h * dh..][..dh];
                            dkj.iter_mut().zip(qi).for_each(|(o, x)| *o += ds * x);
                        }
                    }
                }
            }
        }
        let mut out = Vec::new();
        if need_q {
            out.push((q, dq));
        }
        if need_k {
            out.push((k, dk));
        }
        if need_v {
            out.push((v, dv));
        }
        out
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}
