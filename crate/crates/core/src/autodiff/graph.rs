//! Tape-based reverse-mode differentiation over dense [`Tensor`]s.
//!
//! Every operation appends a node holding its output value and the
//! information its local gradient rule needs. Nodes are appended in
//! evaluation order, so the tape is already topologically sorted and
//! [`Graph::backward`] simply walks it in reverse.
//!
//! Elementwise binary operations broadcast only over leading dimensions:
//! the smaller operand's shape must be a suffix of the larger one's.
//! Anything else goes through an explicit [`Graph::broadcast_to`],
//! [`Graph::reshape`] or [`Graph::permute`].

use super::tensor::{axis_extents, strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    BroadcastTo(Var),
    Sum(Var),
    Mean(Var, usize),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Sigmoid(Var),
    Tanh(Var),
    Ln(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    Softmax(Var, usize),
    LayerNorm { input: Var, axis: usize, inv_std: Vec<f64> },
    AvgPool2d(Var, usize),
    Upsample2d(Var, usize),
    BceWithLogits(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// A single forward/backward tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`], if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    // ---------------------------------------------------------------
    // elementwise binary

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let n: usize = out_shape.iter().product();
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
            BinaryKind::Div => |x: f64, y: f64| x / y,
        };
        let mut out = Vec::with_capacity(n);
        // the shorter operand repeats over the longer one's leading axes
        let chunk = av.len().min(bv.len()).max(1);
        for c in 0..n / chunk {
            let xa = if av.len() == n { &av[c * chunk..(c + 1) * chunk] } else { av };
            let xb = if bv.len() == n { &bv[c * chunk..(c + 1) * chunk] } else { bv };
            out.extend(xa.iter().zip(xb).map(|(&x, &y)| f(x, y)));
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push_op(value, Op::Binary(kind, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * k).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push_op(value, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push_op(value, Op::AddScalar(a), &[a])
    }

    // ---------------------------------------------------------------
    // linear algebra and layout

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let row = &bv[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (d, y) in dst.iter_mut().zip(row) {
                    *d += x * y;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape(format!("transpose needs rank 2, got {:?}", s)));
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push_op(value, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push_op(value, Op::Reshape(a), &[a]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() {
            return Err(Error::shape(format!("permute {:?} on {:?}", axes, s)));
        }
        for &ax in axes {
            if ax >= s.len() || seen[ax] {
                return Err(Error::shape(format!("permute {:?} on {:?}", axes, s)));
            }
            seen[ax] = true;
        }
        let out = permute_data(self.value(a).data(), &s, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&ax| s[ax]).collect();
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push_op(value, Op::Permute(a, axes.to_vec()), &[a]))
    }

    /// Explicit broadcast. The input is left-padded with unit dimensions to
    /// the target rank; every input dimension must then be 1 or equal.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let padded = pad_shape(&s, shape.len())
            .ok_or_else(|| Error::shape(format!("broadcast {:?} to {:?}", s, shape)))?;
        for (&d, &t) in padded.iter().zip(shape) {
            if d != 1 && d != t {
                return Err(Error::shape(format!("broadcast {:?} to {:?}", s, shape)));
            }
        }
        let map = broadcast_index_map(&padded, shape);
        let v = self.value(a).data();
        let out = map.iter().map(|&i| v[i]).collect();
        let value = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push_op(value, Op::BroadcastTo(a), &[a]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::shape("concat of zero tensors"));
        }
        let first = self.shape(inputs[0]).to_vec();
        let (outer, _, inner) = axis_extents(&first, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::shape(format!(
                    "concat along {} of {:?} and {:?}",
                    axis, first, s
                )));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, Op::Concat(inputs.to_vec(), axis), inputs))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (outer, n, inner) = axis_extents(&s, axis)?;
        if start + len > n {
            return Err(Error::shape(format!(
                "slice {}..{} of axis {} in {:?}",
                start,
                start + len,
                axis,
                s
            )));
        }
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, Op::Slice(a, axis, start), &[a]))
    }

    // ---------------------------------------------------------------
    // reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean over all entries, as a scalar.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean along `axis`; the axis is removed from the output shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (outer, n, inner) = axis_extents(&s, axis)?;
        if n == 0 {
            return Err(Error::shape("mean over empty axis"));
        }
        let d = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for k in 0..inner {
                    out[o * inner + k] += d[(o * n + j) * inner + k];
                }
            }
        }
        for x in &mut out {
            *x /= n as f64;
        }
        let mut shape = s;
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, Op::Mean(a, axis), &[a]))
    }

    // ---------------------------------------------------------------
    // pointwise nonlinearities

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push_op(value, op, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (outer, n, inner) = axis_extents(&s, axis)?;
        if n == 0 {
            return Err(Error::shape("softmax over empty axis"));
        }
        let d = self.value(a).data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for k in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + k;
                let max = (0..n).map(|j| d[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (d[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[idx(j)] /= z;
                }
            }
        }
        let value = Tensor::new(s, out)?;
        Ok(self.push_op(value, Op::Softmax(a, axis), &[a]))
    }

    /// Normalizes to zero mean and unit (population) variance along `axis`,
    /// with `eps` added to the variance inside the square root. No affine.
    pub fn layer_norm(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (outer, n, inner) = axis_extents(&s, axis)?;
        if n == 0 {
            return Err(Error::shape("layer_norm over empty axis"));
        }
        let d = self.value(a).data();
        let mut out = vec![0.0; d.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for k in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + k;
                let mean = (0..n).map(|j| d[idx(j)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|j| (d[idx(j)] - mean).powi(2)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + eps).sqrt();
                for j in 0..n {
                    out[idx(j)] = (d[idx(j)] - mean) * r;
                }
                inv_std.push(r);
            }
        }
        let value = Tensor::new(s, out)?;
        Ok(self.push_op(
            value,
            Op::LayerNorm {
                input: a,
                axis,
                inv_std,
            },
            &[a],
        ))
    }

    // ---------------------------------------------------------------
    // spatial

    /// Non-overlapping `k`×`k` average pooling over the last two axes.
    pub fn avg_pool2d(&mut self, a: Var, k: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (lead, h, w) = spatial_split(&s)?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape(format!("avg_pool2d k={} on {:?}", k, s)));
        }
        let (ho, wo) = (h / k, w / k);
        let d = self.value(a).data();
        let mut out = vec![0.0; lead * ho * wo];
        let norm = 1.0 / (k * k) as f64;
        for l in 0..lead {
            for y in 0..h {
                for x in 0..w {
                    out[(l * ho + y / k) * wo + x / k] += d[(l * h + y) * w + x] * norm;
                }
            }
        }
        let mut shape = s;
        let r = shape.len();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, Op::AvgPool2d(a, k), &[a]))
    }

    /// Nearest-neighbour upsampling by `k` over the last two axes.
    pub fn upsample2d(&mut self, a: Var, k: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (lead, h, w) = spatial_split(&s)?;
        if k == 0 {
            return Err(Error::shape("upsample2d with k = 0"));
        }
        let (ho, wo) = (h * k, w * k);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(lead * ho * wo);
        for l in 0..lead {
            for y in 0..ho {
                for x in 0..wo {
                    out.push(d[(l * h + y / k) * w + x / k]);
                }
            }
        }
        let mut shape = s;
        let r = shape.len();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, Op::Upsample2d(a, k), &[a]))
    }

    // ---------------------------------------------------------------
    // fused

    /// Elementwise sigmoid binary cross-entropy on logits against a
    /// constant target of the same shape, in the overflow-free form
    /// `max(x,0) − x·t + ln(1 + e^{−|x|})`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s != target.shape() {
            return Err(Error::shape(format!(
                "bce_with_logits {:?} vs target {:?}",
                s,
                target.shape()
            )));
        }
        let out = self
            .value(logits)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .collect();
        let value = Tensor::new(s, out)?;
        Ok(self.push_op(
            value,
            Op::BceWithLogits(logits, target.data().to_vec()),
            &[logits],
        ))
    }

    // ---------------------------------------------------------------
    // backward

    /// Reverse sweep from a scalar `loss`. Gradients are stored on every
    /// reached node that requires them; earlier gradients are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor::new(shape, g)?);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (na, nb) = (av.len(), bv.len());
                let mut ga = wants(*a).then(|| vec![0.0; na]);
                let mut gb = wants(*b).then(|| vec![0.0; nb]);
                let n = g.len();
                let chunk = na.min(nb).max(1);
                for c in 0..n / chunk {
                    let (oa, ob) = (if na == n { c * chunk } else { 0 }, if nb == n { c * chunk } else { 0 });
                    let gc = &g[c * chunk..(c + 1) * chunk];
                    for (j, &gj) in gc.iter().enumerate() {
                        let (x, y) = (av[oa + j], bv[ob + j]);
                        let (dx, dy) = match kind {
                            BinaryKind::Add => (gj, gj),
                            BinaryKind::Sub => (gj, -gj),
                            BinaryKind::Mul => (gj * y, gj * x),
                            BinaryKind::Div => (gj / y, -gj * x / (y * y)),
                        };
                        if let Some(ga) = ga.as_mut() {
                            ga[oa + j] += dx;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[ob + j] += dy;
                        }
                    }
                }
                if let Some(ga) = ga {
                    accumulate(grads, *a, &ga);
                }
                if let Some(gb) = gb {
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Scale(a, k) => {
                let ga: Vec<f64> = g.iter().map(|x| x * k).collect();
                accumulate(grads, *a, &ga);
            }
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(grads, *a, g),
            Op::MatMul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (val(*a), val(*b));
                if m * k * n == 0 {
                    return;
                }
                if wants(*a) {
                    // dA = G · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    for (grow, dst) in g.chunks_exact(n).zip(ga.chunks_exact_mut(k)) {
                        for (d, brow) in dst.iter_mut().zip(bv.chunks_exact(n)) {
                            *d = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    accumulate(grads, *a, &ga);
                }
                if wants(*b) {
                    // dB = Aᵀ · G
                    let mut gb = vec![0.0; k * n];
                    for (arow, grow) in av.chunks_exact(k).zip(g.chunks_exact(n)) {
                        for (&x, dst) in arow.iter().zip(gb.chunks_exact_mut(n)) {
                            if x == 0.0 {
                                continue;
                            }
                            for (d, y) in dst.iter_mut().zip(grow) {
                                *d += x * y;
                            }
                        }
                    }
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Transpose(a) => {
                let s = self.nodes[a.0].value.shape();
                let (r, c) = (s[0], s[1]);
                let mut ga = vec![0.0; r * c];
                for x in 0..r {
                    for y in 0..c {
                        ga[x * c + y] = g[y * r + x];
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::Permute(a, axes) => {
                let out_shape = node.value.shape();
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let ga = permute_data(g, out_shape, &inverse);
                accumulate(grads, *a, &ga);
            }
            Op::BroadcastTo(a) => {
                let s = self.nodes[a.0].value.shape();
                let padded = pad_shape(s, node.value.rank()).expect("validated in forward");
                let map = broadcast_index_map(&padded, node.value.shape());
                let mut ga = vec![0.0; self.nodes[a.0].value.numel()];
                for (j, &src) in map.iter().enumerate() {
                    ga[src] += g[j];
                }
                accumulate(grads, *a, &ga);
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; self.nodes[a.0].value.numel()];
                accumulate(grads, *a, &ga);
            }
            Op::Mean(a, axis) => {
                let s = self.nodes[a.0].value.shape();
                let (outer, n, inner) = axis_extents(s, *axis).expect("validated in forward");
                let mut ga = vec![0.0; outer * n * inner];
                let norm = 1.0 / n as f64;
                for o in 0..outer {
                    for j in 0..n {
                        for k in 0..inner {
                            ga[(o * n + j) * inner + k] = g[o * inner + k] * norm;
                        }
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::Concat(inputs, axis) => {
                let (outer, total, inner) =
                    axis_extents(node.value.shape(), *axis).expect("validated in forward");
                let mut offset = 0;
                for &v in inputs {
                    let n = self.nodes[v.0].value.shape()[*axis];
                    if wants(v) {
                        let mut gv = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[base..base + n * inner]);
                        }
                        accumulate(grads, v, &gv);
                    }
                    offset += n;
                }
            }
            Op::Slice(a, axis, start) => {
                let s = self.nodes[a.0].value.shape();
                let (outer, n, inner) = axis_extents(s, *axis).expect("validated in forward");
                let len = node.value.shape()[*axis];
                let mut ga = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    ga[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                accumulate(grads, *a, &ga);
            }
            Op::Sigmoid(a) => {
                let ga: Vec<f64> = g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Tanh(a) => {
                let ga: Vec<f64> = g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Ln(a) => {
                let ga: Vec<f64> = g.iter().zip(val(*a)).map(|(g, x)| g / x).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Sqrt(a) => {
                let ga: Vec<f64> = g.iter().zip(out).map(|(g, y)| g * 0.5 / y).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Clamp(a, lo, hi) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(val(*a))
                    .map(|(g, &x)| if x > *lo && x < *hi { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, &ga);
            }
            Op::Softmax(a, axis) => {
                let (outer, n, inner) =
                    axis_extents(node.value.shape(), *axis).expect("validated in forward");
                let mut ga = vec![0.0; g.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + k;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * out[idx(j)]).sum();
                        for j in 0..n {
                            ga[idx(j)] = out[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::LayerNorm {
                input,
                axis,
                inv_std,
            } => {
                let (outer, n, inner) =
                    axis_extents(node.value.shape(), *axis).expect("validated in forward");
                let mut ga = vec![0.0; g.len()];
                let nf = n as f64;
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + k;
                        let r = inv_std[o * inner + k];
                        let mean_g: f64 = (0..n).map(|j| g[idx(j)]).sum::<f64>() / nf;
                        let mean_gy: f64 =
                            (0..n).map(|j| g[idx(j)] * out[idx(j)]).sum::<f64>() / nf;
                        for j in 0..n {
                            ga[idx(j)] = r * (g[idx(j)] - mean_g - out[idx(j)] * mean_gy);
                        }
                    }
                }
                accumulate(grads, *input, &ga);
            }
            Op::AvgPool2d(a, k) => {
                let s = self.nodes[a.0].value.shape();
                let (lead, h, w) = spatial_split(s).expect("validated in forward");
                let (ho, wo) = (h / k, w / k);
                let norm = 1.0 / (k * k) as f64;
                let mut ga = vec![0.0; lead * h * w];
                for l in 0..lead {
                    for y in 0..h {
                        for x in 0..w {
                            ga[(l * h + y) * w + x] = g[(l * ho + y / k) * wo + x / k] * norm;
                        }
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::Upsample2d(a, k) => {
                let s = self.nodes[a.0].value.shape();
                let (lead, h, w) = spatial_split(s).expect("validated in forward");
                let (ho, wo) = (h * k, w * k);
                let mut ga = vec![0.0; lead * h * w];
                for l in 0..lead {
                    for y in 0..ho {
                        for x in 0..wo {
                            ga[(l * h + y / k) * w + x / k] += g[(l * ho + y) * wo + x];
                        }
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::BceWithLogits(a, target) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(val(*a))
                    .zip(target)
                    .map(|((g, &x), t)| g * (sigmoid(x) - t))
                    .collect();
                accumulate(grads, *a, &ga);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Output shape for leading-dimension broadcasting: one shape must be a
/// suffix of the other.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long[long.len() - short.len()..] == *short {
        Ok(long.to_vec())
    } else {
        Err(Error::shape(format!(
            "cannot broadcast {:?} with {:?} (only leading dimensions expand)",
            a, b
        )))
    }
}

fn spatial_split(shape: &[usize]) -> Result<(usize, usize, usize)> {
    let r = shape.len();
    if r < 2 {
        return Err(Error::shape(format!(
            "spatial op needs rank >= 2, got {:?}",
            shape
        )));
    }
    Ok((
        shape[..r - 2].iter().product(),
        shape[r - 2],
        shape[r - 1],
    ))
}

fn pad_shape(shape: &[usize], rank: usize) -> Option<Vec<usize>> {
    if shape.len() > rank {
        return None;
    }
    let mut padded = vec![1; rank - shape.len()];
    padded.extend_from_slice(shape);
    Some(padded)
}

/// For each output position, the flat index of the input element it reads.
fn broadcast_index_map(input: &[usize], output: &[usize]) -> Vec<usize> {
    let in_strides = strides(input);
    let steps: Vec<usize> = input
        .iter()
        .zip(&in_strides)
        .map(|(&d, &st)| if d == 1 { 0 } else { st })
        .collect();
    gather(output, &steps)
}

/// Flat source index for every position of `shape`, visited in row-major
/// order, given the source stride of each output axis.
fn gather(shape: &[usize], steps: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let r = shape.len();
    let mut coord = vec![0usize; r];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(src);
        for ax in (0..r).rev() {
            coord[ax] += 1;
            src += steps[ax];
            if coord[ax] < shape[ax] {
                break;
            }
            src -= steps[ax] * shape[ax];
            coord[ax] = 0;
        }
    }
    out
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
    let steps: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
    gather(&out_shape, &steps).into_iter().map(|i| data[i]).collect()
}
