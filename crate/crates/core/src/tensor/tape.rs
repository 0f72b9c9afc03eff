//! Reverse-mode differentiation tape.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward sweep visits every node at most once,
//! in reverse. Leaves built with [`Graph::param`] accumulate gradients;
//! leaves built with [`Graph::constant`] (frozen weights, data) do not, and
//! the sweep skips every gradient product that would only feed them.

use serde::{Deserialize, Serialize};

use super::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Storage precision of tape values. Arithmetic is carried out at 64 bits;
/// in `F32` mode every node value is rounded to the nearest `f32`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise op selector, for callers that dispatch on op kind.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Tanh,
    Gelu,
    Relu,
    Scale(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    AddBias(Var, Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

/// Gradients of a backward sweep, indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self { nodes: Vec::new(), precision }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, mut value: Tensor, needs_grad: bool) -> Var {
        if self.precision == Precision::F32 {
            round_f32(&mut value);
        }
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, mut value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if self.precision == Precision::F32 {
            round_f32(&mut value);
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn elementwise(&mut self, op: Elementwise, args: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::shape("elementwise", format!("{op:?} takes {arity} operands")));
        }
        match op {
            Elementwise::Add => self.add(args[0], args[1]),
            Elementwise::Sub => self.sub(args[0], args[1]),
            Elementwise::Mul => self.mul(args[0], args[1]),
            Elementwise::Tanh => self.tanh(args[0]),
            Elementwise::Gelu => self.gelu(args[0]),
            Elementwise::Relu => self.relu(args[0]),
            Elementwise::Scale(s) => self.scale(args[0], s),
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return ta.zip_map(tb, f);
        }
        if tb.numel() == 1 {
            let s = tb.item();
            return Ok(ta.map(|x| f(x, s)));
        }
        if ta.numel() == 1 {
            let s = ta.item();
            return Ok(tb.map(|y| f(s, y)));
        }
        Err(Error::shape(name, format!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape())))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).scale(s);
        self.push("scale", v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        self.push("add_scalar", v, Op::AddScalar(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        self.push("tanh", v, Op::Tanh(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(gelu);
        self.push("gelu", v, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push("relu", v, Op::Relu(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// `a[..., k] · b[k, n]`, leading axes of `a` treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[..., k] · b[n, k]ᵀ`; the natural form for `x Wᵀ` with `W` stored
    /// as `[out, in]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (b0, b1) = tb.dims2("matmul")?;
        let (kb, n) = if trans_b { (b1, b0) } else { (b0, b1) };
        let k = ta.last_dim();
        if ta.rank() == 0 || k != kb {
            return Err(Error::shape(
                "matmul",
                format!(
                    "inner dimensions disagree: {:?} x {:?}{}",
                    ta.shape(),
                    tb.shape(),
                    if trans_b { "ᵀ" } else { "" }
                ),
            ));
        }
        let m = ta.numel() / k;
        let mut out = vec![0.0; m * n];
        if trans_b {
            gemm_nt(ta.data(), tb.data(), &mut out, m, k, n);
        } else {
            gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        }
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let v = Tensor::new(shape, out)?;
        self.push("matmul", v, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    /// Batched `a[B, m, k] · b[B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, false)
    }

    /// Batched `a[B, m, k] · b[B, n, k]ᵀ`.
    pub fn bmm_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, true)
    }

    fn bmm_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[bs, m, k], &[bs2, p, q]) = (ta.shape(), tb.shape()) else {
            return Err(Error::shape(
                "bmm",
                format!("expected rank-3 operands, got {:?} and {:?}", ta.shape(), tb.shape()),
            ));
        };
        let (kb, n) = if trans_b { (q, p) } else { (p, q) };
        if bs != bs2 || k != kb {
            return Err(Error::shape("bmm", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            let (ad, bd) = (&ta.data()[i * m * k..(i + 1) * m * k], &tb.data()[i * k * n..(i + 1) * k * n]);
            let od = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(ad, bd, od, m, k, n);
            } else {
                gemm_nn(ad, bd, od, m, k, n);
            }
        }
        let v = Tensor::new(vec![bs, m, n], out)?;
        self.push("bmm", v, Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    /// Adds a `[d]` bias along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = tx.last_dim();
        if tb.numel() != d || tb.rank() != 1 {
            return Err(Error::shape("add_bias", format!("bias {:?} for input {:?}", tb.shape(), tx.shape())));
        }
        let mut v = tx.clone();
        for row in v.data_mut().chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        self.push("add_bias", v, Op::AddBias(x, bias), &[x, bias])
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.last_dim();
        let mut v = tx.clone();
        for row in v.data_mut().chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                sum += *r;
            }
            for r in row.iter_mut() {
                *r /= sum;
            }
        }
        self.push("softmax", v, Op::Softmax(x), &[x])
    }

    /// Layer normalisation over the last axis with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::config("layer_norm.eps", "must be positive"));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.last_dim();
        if tg.numel() != d || tb.numel() != d {
            return Err(Error::shape("layer_norm", format!("gain/bias length must be {d}")));
        }
        let rows = tx.numel() / d;
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let v = Tensor::new(tx.shape().to_vec(), out)?;
        self.push("layer_norm", v, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        self.push("reshape", v, Op::Reshape(x), &[x])
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let mut seen = vec![false; tx.rank()];
        if axes.len() != tx.rank() || axes.iter().any(|&a| a >= seen.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("axes {axes:?} for shape {:?}", tx.shape())));
        }
        let v = permute_tensor(tx, axes);
        self.push("permute", v, Op::Permute(x, axes.to_vec()), &[x])
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() || len == 0 || start + len > tx.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, tx.shape()),
            ));
        }
        let (outer, dim, inner) = split_axis(tx.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            out.extend_from_slice(&tx.data()[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = len;
        let v = Tensor::new(shape, out)?;
        self.push("slice", v, Op::Slice { x, axis, start }, &[x])
    }

    /// Index `index` along `axis`, dropping that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let s = self.slice(x, axis, index, 1)?;
        let mut shape = self.value(x).shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.reshape(s, &shape)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat", "no operands"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.value(x).shape();
            let mut a = s.to_vec();
            let mut b = base.clone();
            a.remove(axis);
            b.remove(axis);
            if a != b || s.len() != base.len() {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let d = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(shape, out)?;
        self.push("concat", v, Op::Concat { xs: xs.to_vec(), axis }, xs)
    }

    /// Stack equally shaped operands along a new axis.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("stack", "no operands"))?;
        let mut shape = self.value(*first).shape().to_vec();
        shape.insert(axis, 1);
        let expanded = xs.iter().map(|&x| self.reshape(x, &shape)).collect::<Result<Vec<_>>>()?;
        self.concat(&expanded, axis)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).data().iter().sum());
        self.push("sum", v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Gradients of a scalar node with respect to every gradient leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        self.vjp(loss, &Tensor::full(self.value(loss).shape(), 1.0))
    }

    /// Vector-Jacobian product: pulls `cotangent` (shaped like `output`)
    /// back to every gradient leaf.
    pub fn vjp(&self, output: Var, cotangent: &Tensor) -> Result<Gradients> {
        if cotangent.shape() != self.value(output).shape() {
            return Err(Error::shape("vjp", "cotangent shape must match output"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(cotangent.clone());
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    /// Gradient with respect to one operand of a broadcasting binary op.
    fn reduce_broadcast(&self, operand: Var, g: Tensor) -> Tensor {
        let shape = self.value(operand).shape();
        if shape == g.shape() {
            g
        } else {
            Tensor::full(shape, g.data().iter().sum())
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, self.reduce_broadcast(*a, g.clone()));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, self.reduce_broadcast(*b, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, self.reduce_broadcast(*a, g.clone()));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, self.reduce_broadcast(*b, g.scale(-1.0)));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let times = |other: &Tensor| -> Tensor {
                    if other.shape() == g.shape() {
                        g.zip_map(other, |x, y| x * y).expect("same shape")
                    } else {
                        g.scale(other.item())
                    }
                };
                if self.needs(*a) {
                    let ga = if ta.numel() == 1 && tb.numel() != 1 {
                        Tensor::full(ta.shape(), g.dot(tb))
                    } else {
                        times(tb)
                    };
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = if tb.numel() == 1 && ta.numel() != 1 {
                        Tensor::full(tb.shape(), g.dot(ta))
                    } else {
                        times(ta)
                    };
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Tanh(a) => {
                let gx = g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y))?;
                self.accumulate(grads, *a, gx);
            }
            Op::Gelu(a) => {
                let gx = g.zip_map(self.value(*a), |gi, x| gi * gelu_grad(x))?;
                self.accumulate(grads, *a, gx);
            }
            Op::Relu(a) => {
                let gx = g.zip_map(self.value(*a), |gi, x| if x > 0.0 { gi } else { 0.0 })?;
                self.accumulate(grads, *a, gx);
            }
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = ta.last_dim();
                let m = ta.numel() / k;
                let n = g.last_dim();
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    if *trans_b {
                        // B is [n, k]: dA = dC · B
                        gemm_nn(g.data(), tb.data(), &mut ga, m, n, k);
                    } else {
                        // B is [k, n]: dA = dC · Bᵀ
                        gemm_nt(g.data(), tb.data(), &mut ga, m, n, k);
                    }
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), ga)?);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    if *trans_b {
                        // dB[n, k] = dCᵀ · A
                        gemm_tn(g.data(), ta.data(), &mut gb, n, m, k);
                    } else {
                        // dB[k, n] = Aᵀ · dC
                        gemm_tn(ta.data(), g.data(), &mut gb, k, m, n);
                    }
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), gb)?);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = g.shape()[2];
                let (sa, sb, sg) = (m * k, k * n, m * n);
                if self.needs(*a) {
                    let mut ga = vec![0.0; bs * sa];
                    for i in 0..bs {
                        let (gd, bd) = (&g.data()[i * sg..(i + 1) * sg], &tb.data()[i * sb..(i + 1) * sb]);
                        let out = &mut ga[i * sa..(i + 1) * sa];
                        if *trans_b {
                            gemm_nn(gd, bd, out, m, n, k);
                        } else {
                            gemm_nt(gd, bd, out, m, n, k);
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), ga)?);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; bs * sb];
                    for i in 0..bs {
                        let (gd, ad) = (&g.data()[i * sg..(i + 1) * sg], &ta.data()[i * sa..(i + 1) * sa]);
                        let out = &mut gb[i * sb..(i + 1) * sb];
                        if *trans_b {
                            gemm_tn(gd, ad, out, n, m, k);
                        } else {
                            gemm_tn(ad, gd, out, k, m, n);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), gb)?);
                }
            }
            Op::AddBias(x, bias) => {
                if self.needs(*bias) {
                    let d = g.last_dim();
                    let mut gb = vec![0.0; d];
                    for row in g.data().chunks(d) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(vec![d], gb)?);
                }
                self.accumulate(grads, *x, g.clone());
            }
            Op::Softmax(x) => {
                let n = g.last_dim();
                let mut gx = vec![0.0; g.numel()];
                for ((gr, yr), out) in g.data().chunks(n).zip(node.value.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let dotp: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        out[j] = yr[j] * (gr[j] - dotp);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), gx)?);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = g.last_dim();
                let tg = self.value(*gain);
                if self.needs(*gain) {
                    let mut gg = vec![0.0; d];
                    for (gr, hr) in g.data().chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::new(tg.shape().to_vec(), gg)?);
                }
                if self.needs(*bias) {
                    let mut gb = vec![0.0; d];
                    for gr in g.data().chunks(d) {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(self.value(*bias).shape().to_vec(), gb)?);
                }
                if self.needs(*x) {
                    let mut gx = vec![0.0; g.numel()];
                    let inv_d = 1.0 / d as f64;
                    for (r, ((gr, hr), out)) in g.data().chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate()
                    {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * tg.data()[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            let dh = gr[j] * tg.data()[j];
                            out[j] = rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), gx)?);
                }
            }
            Op::Reshape(x) => {
                let gx = g.reshape(self.value(*x).shape())?;
                self.accumulate(grads, *x, gx);
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                self.accumulate(grads, *x, permute_tensor(g, &inverse));
            }
            Op::Slice { x, axis, start } => {
                let tx = self.value(*x);
                let (outer, dim, inner) = split_axis(tx.shape(), *axis);
                let len = g.shape()[*axis];
                let mut gx = vec![0.0; tx.numel()];
                for o in 0..outer {
                    let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                    let base = o * dim * inner + start * inner;
                    gx[base..base + len * inner].copy_from_slice(src);
                }
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), gx)?);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let tx = self.value(x);
                    let d = tx.shape()[*axis];
                    if self.needs(x) {
                        let mut gx = Vec::with_capacity(tx.numel());
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            gx.extend_from_slice(&g.data()[base..base + d * inner]);
                        }
                        self.accumulate(grads, x, Tensor::new(tx.shape().to_vec(), gx)?);
                    }
                    offset += d;
                }
            }
            Op::Sum(x) => {
                let gx = Tensor::full(self.value(*x).shape(), g.item());
                self.accumulate(grads, *x, gx);
            }
        }
        Ok(())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(t.numel());
    let mut idx = vec![0usize; rank];
    for _ in 0..t.numel() {
        let src: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        out.push(t.data()[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permutation preserves element count")
}

fn round_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = f64::from(*v as f32);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::identity(2));
        let a = g.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let ia = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(ia), g.value(a));

        let col = g.constant(t(&[vec![0.0], vec![1.0]]));
        let p = g.matmul(a, col).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let tz = g.elementwise(Elementwise::Tanh, &[z]).unwrap();
        assert_eq!(g.value(tz).item(), 0.0);

        let a = g.constant(t(&[vec![1.5, -2.0]]));
        let s = g.elementwise(Elementwise::Scale(1.0), &[a]).unwrap();
        assert_eq!(g.value(s), g.value(a));

        let b = g.constant(Tensor::zeros(&[3]));
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[vec![2.0, 2.0, 2.0, 2.0], vec![0.0, 3f64.ln(), 0.0, 3f64.ln()]]));
        let y = g.softmax(x).unwrap();
        let v = g.value(y).data();
        for &p in &v[..4] {
            assert!((p - 0.25).abs() < 1e-15);
        }
        assert!((v[4] - 0.125).abs() < 1e-12 && (v[5] - 0.375).abs() < 1e-12);

        let x = g.constant(t(&[vec![0.0, 3f64.ln()]]));
        let y = g.softmax(x).unwrap();
        assert!((g.value(y).data()[0] - 0.25).abs() < 1e-12);
        assert!((g.value(y).data()[1] - 0.75).abs() < 1e-12);

        let big = g.constant(t(&[vec![1000.0, 1000.0]]));
        let y = g.softmax(big).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::full(&[4], 1.0));
        let bias = g.constant(Tensor::zeros(&[4]));
        let c = g.constant(Tensor::full(&[1, 4], 5.0));
        let y = g.layer_norm(c, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let gain2 = g.constant(Tensor::full(&[2], 1.0));
        let bias2 = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[vec![1.0, 3.0]]));
        let y = g.layer_norm(x, gain2, bias2, 1e-5).unwrap();
        let v = g.value(y).data();
        // var = 1, so the output is ±1/sqrt(1 + eps)
        let want = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((v[0] + want).abs() < 1e-12 && (v[1] - want).abs() < 1e-12);
        assert!((v[1] - 1.0).abs() <= 1e-5);
    }

    #[test]
    fn permute_round_trip_and_concat_slice() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.value(p).shape(), &[4, 2, 3]);
        assert_eq!(g.value(p).at(&[3, 1, 2]), g.value(x).at(&[1, 2, 3]));
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), g.value(x));

        let a = g.slice(x, 1, 0, 1).unwrap();
        let b = g.slice(x, 1, 1, 2).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c), g.value(x));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::identity(2));
        let x = g.param(Tensor::full(&[1, 2], 1.0));
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn f32_precision_rounds_values() {
        let mut g = Graph::with_precision(Precision::F32);
        let x = g.constant(Tensor::scalar(0.1));
        assert_eq!(g.value(x).item(), f64::from(0.1f32));
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(f64::MAX));
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }
}
