use super::kernels::{self, axis_split};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        shared_rhs: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    MeanPool {
        a: Var,
        segments: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu {
        a: Var,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LogSoftmax {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Sum {
        a: Var,
    },
    KlDiv {
        student: Var,
        teacher_probs: Vec<f64>,
        student_probs: Vec<f64>,
        tau: f64,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode tape. Nodes are appended in execution order, which is a
/// topological order by construction.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn segment_bounds(len: usize, segments: usize, s: usize) -> (usize, usize) {
    (s * len / segments, (s + 1) * len / segments)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Inserts a copy of `t` as a leaf; it participates in backward iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.param(t, t.requires_grad())
    }

    /// Inserts a copy of `t` as a leaf with an explicit trainable flag.
    pub fn param(&mut self, t: &Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value: t.detached(),
            requires_grad: trainable,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t.detached(),
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Nodes with no differentiable input are stored as constants.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Matrix product. Either `b` is a 2-D weight `[k, n]` applied to every
    /// leading row of `a: [..., m, k]`, or both operands are batched with
    /// identical leading dimensions: `[..., m, k] × [..., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = sa[sa.len() - 1];
        let m = sa[sa.len() - 2];
        if sb.len() == 2 {
            if sb[0] != k {
                return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
            }
            let n = sb[1];
            let rows = numel(&sa) / k;
            let mut out = vec![0.0; rows * n];
            kernels::mm(self.value(a).data(), self.value(b).data(), &mut out, rows, k, n);
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            let value = Tensor::from_parts(shape, out);
            return self.push("matmul", value, Op::MatMul { a, b, shared_rhs: true }, &[a, b]);
        }
        let lead = &sa[..sa.len() - 2];
        if sb.len() != sa.len() || &sb[..sb.len() - 2] != lead || sb[sb.len() - 2] != k {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let n = sb[sb.len() - 1];
        let batches: usize = lead.iter().product();
        let mut out = vec![0.0; batches * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batches {
            kernels::mm(
                &ad[bi * m * k..(bi + 1) * m * k],
                &bd[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let value = Tensor::from_parts(shape, out);
        self.push(
            "matmul",
            value,
            Op::MatMul {
                a,
                b,
                shared_rhs: false,
            },
            &[a, b],
        )
    }

    /// Elementwise sum. `b` may also be a bias whose shape is a trailing
    /// suffix of `a`'s shape; it is then repeated over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add", format!("{sa:?} + {sb:?}")));
        }
        let bd = self.value(b).data();
        let n = bd.len().max(1);
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bd[i % n])
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} * {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push("scale", value, Op::Scale { a, c }, &[a])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true))
        {
            return Err(Error::shape("permute", format!("axes {axes:?} for {shape:?}")));
        }
        let (out_shape, data) = permute_data(self.value(a).data(), &shape, axes);
        let value = Tensor::from_parts(out_shape, data);
        self.push("permute", value, Op::Permute { a, axes: axes.to_vec() }, &[a])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", format!("{:?}", self.shape(a))));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        self.push("reshape", value, Op::Reshape { a }, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_parts(shape, data);
        self.push(
            "concat",
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {end}) on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let row = o * len * inner;
            data.extend_from_slice(&src[row + start * inner..row + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let value = Tensor::from_parts(out_shape, data);
        self.push("slice", value, Op::Slice { a, axis, start }, &[a])
    }

    /// Mean-pools the second-to-last (sequence) axis of `[..., T, d]` into
    /// `segments` contiguous segments; segment `s` covers positions
    /// `[s·T/segments, (s+1)·T/segments)`.
    pub fn mean_pool(&mut self, a: Var, segments: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 || segments == 0 || shape[r - 2] < segments {
            return Err(Error::shape("mean_pool", format!("{segments} segments over {shape:?}")));
        }
        let (t, d) = (shape[r - 2], shape[r - 1]);
        let outer = numel(&shape[..r - 2]);
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * segments * d];
        for o in 0..outer {
            for s in 0..segments {
                let (lo, hi) = segment_bounds(t, segments, s);
                let dst = &mut data[(o * segments + s) * d..(o * segments + s + 1) * d];
                for pos in lo..hi {
                    let row = &src[(o * t + pos) * d..(o * t + pos + 1) * d];
                    dst.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
                let inv = 1.0 / (hi - lo) as f64;
                dst.iter_mut().for_each(|x| *x *= inv);
            }
        }
        let mut out_shape = shape;
        out_shape[r - 2] = segments;
        let value = Tensor::from_parts(out_shape, data);
        self.push("mean_pool", value, Op::MeanPool { a, segments }, &[a])
    }

    /// Gathers rows of `table: [V, d]` → `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("embedding", format!("table {shape:?}")));
        }
        let (vocab, d) = (shape[0], shape[1]);
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let value = Tensor::from_parts(vec![ids.len(), d], data);
        self.push(
            "embedding",
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Layer normalization over the last axis with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("{shape:?} with gain {:?}", self.shape(gain)),
            ));
        }
        let rows = numel(&shape) / d;
        let (src, g, b) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (row[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = h * g[i] + b[i];
            }
        }
        let value = Tensor::from_parts(shape, out);
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| kernels::gelu(x)).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push("gelu", value, Op::Gelu { a }, &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                kernels::softmax_lane(src, &mut out, o * len * inner + i, len, inner);
            }
        }
        let value = Tensor::from_parts(shape, out);
        self.push("softmax", value, Op::Softmax { a, axis }, &[a])
    }

    /// Log-softmax over the last axis, computed as `x - logsumexp(x)`.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::shape("log_softmax", "scalar input"))?;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(d) {
            let lse = kernels::logsumexp(row);
            out.extend(row.iter().map(|v| v - lse));
        }
        let value = Tensor::from_parts(shape, out);
        self.push("log_softmax", value, Op::LogSoftmax { a }, &[a])
    }

    /// Mean over rows of `-log_softmax(logits)[target]` for `logits: [N, V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || targets.is_empty() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {shape:?} with {} targets", targets.len()),
            ));
        }
        let v = shape[1];
        let src = self.value(logits).data();
        let mut probs = vec![0.0; src.len()];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::TokenOutOfRange { id: t, vocab: v });
            }
            let row = &src[r * v..(r + 1) * v];
            let lse = kernels::logsumexp(row);
            total += lse - row[t];
            for (p, x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let value = Tensor::scalar(total / targets.len() as f64);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let s: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
        let value = Tensor::scalar(s / x.len() as f64);
        self.push("mse", value, Op::Mse { a, b }, &[a, b])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push("sum", value, Op::Sum { a }, &[a])
    }

    /// `τ² · mean_rows KL(softmax(teacher/τ) ‖ softmax(student/τ))` over the
    /// rows of `[N, V]` logits. The teacher operand is detached: no gradient
    /// ever flows into it.
    pub fn kl_div_logits(&mut self, student: Var, teacher: Var, tau: f64) -> Result<Var> {
        let shape = self.shape(student).to_vec();
        if shape.len() != 2 || self.shape(teacher) != shape.as_slice() {
            return Err(Error::shape(
                "kl_div",
                format!("{shape:?} vs {:?}", self.shape(teacher)),
            ));
        }
        if !(tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        let v = shape[1];
        let rows = shape[0];
        let (s, t) = (self.value(student).data(), self.value(teacher).data());
        let mut tp = vec![0.0; s.len()];
        let mut sp = vec![0.0; s.len()];
        let mut total = 0.0;
        let mut ts = vec![0.0; v];
        let mut ss = vec![0.0; v];
        for r in 0..rows {
            for i in 0..v {
                ts[i] = t[r * v + i] / tau;
                ss[i] = s[r * v + i] / tau;
            }
            let (tl, sl) = (kernels::logsumexp(&ts), kernels::logsumexp(&ss));
            for i in 0..v {
                let log_p = ts[i] - tl;
                let log_q = ss[i] - sl;
                let p = log_p.exp();
                tp[r * v + i] = p;
                sp[r * v + i] = log_q.exp();
                if p > 0.0 {
                    total += p * (log_p - log_q);
                }
            }
        }
        // Rounding can leave a tiny negative on identical inputs.
        let kl = (tau * tau * total / rows as f64).max(0.0);
        let value = Tensor::scalar(kl);
        self.push(
            "kl_div",
            value,
            Op::KlDiv {
                student,
                teacher_probs: tp,
                student_probs: sp,
                tau,
            },
            &[student],
        )
    }

    /// Reverse pass from a scalar root. Leaves that are unreachable or not
    /// trainable get no entry.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(go) = grads[idx].take() else { continue };
            self.backprop(node, &go, &mut grads);
            grads[idx] = Some(go);
        }
        // Only leaf gradients are meaningful to callers; drop intermediates.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, node: &Node, go: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, shared_rhs } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let k = sa[sa.len() - 1];
                let n = *out_shape.last().unwrap();
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if *shared_rhs {
                    let rows = numel(sa) / k;
                    if self.rg(*a) {
                        accumulate(grads, *a, ad.len(), |g| kernels::mm_bt(go, bd, g, rows, k, n));
                    }
                    if self.rg(*b) {
                        accumulate(grads, *b, bd.len(), |g| kernels::mm_at(ad, go, g, rows, k, n));
                    }
                } else {
                    let m = sa[sa.len() - 2];
                    let batches = numel(&sb[..sb.len() - 2]);
                    if self.rg(*a) {
                        accumulate(grads, *a, ad.len(), |g| {
                            for bi in 0..batches {
                                kernels::mm_bt(
                                    &go[bi * m * n..(bi + 1) * m * n],
                                    &bd[bi * k * n..(bi + 1) * k * n],
                                    &mut g[bi * m * k..(bi + 1) * m * k],
                                    m,
                                    k,
                                    n,
                                );
                            }
                        });
                    }
                    if self.rg(*b) {
                        accumulate(grads, *b, bd.len(), |g| {
                            for bi in 0..batches {
                                kernels::mm_at(
                                    &ad[bi * m * k..(bi + 1) * m * k],
                                    &go[bi * m * n..(bi + 1) * m * n],
                                    &mut g[bi * k * n..(bi + 1) * k * n],
                                    m,
                                    k,
                                    n,
                                );
                            }
                        });
                    }
                }
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    accumulate(grads, *a, go.len(), |g| g.iter_mut().zip(go).for_each(|(x, y)| *x += y));
                }
                if self.rg(*b) {
                    let nb = self.value(*b).numel();
                    accumulate(grads, *b, nb, |g| {
                        for (i, y) in go.iter().enumerate() {
                            g[i % nb] += y;
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    accumulate(grads, *a, go.len(), |g| {
                        for i in 0..go.len() {
                            g[i] += go[i] * bd[i];
                        }
                    });
                }
                if self.rg(*b) {
                    accumulate(grads, *b, go.len(), |g| {
                        for i in 0..go.len() {
                            g[i] += go[i] * ad[i];
                        }
                    });
                }
            }
            Op::Scale { a, c } => {
                accumulate(grads, *a, go.len(), |g| {
                    g.iter_mut().zip(go).for_each(|(x, y)| *x += c * y)
                });
            }
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let (_, back) = permute_data(go, out_shape, &inverse);
                accumulate(grads, *a, back.len(), |g| {
                    g.iter_mut().zip(&back).for_each(|(x, y)| *x += y)
                });
            }
            Op::Reshape { a } => {
                accumulate(grads, *a, go.len(), |g| g.iter_mut().zip(go).for_each(|(x, y)| *x += y));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.rg(p) {
                        accumulate(grads, p, outer * len * inner, |g| {
                            for o in 0..outer {
                                let src = &go[(o * total + offset) * inner..(o * total + offset + len) * inner];
                                let dst = &mut g[o * len * inner..(o + 1) * len * inner];
                                dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                            }
                        });
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let in_shape = self.shape(*a);
                let (outer, len, inner) = axis_split(in_shape, *axis);
                let width = out_shape[*axis];
                accumulate(grads, *a, numel(in_shape), |g| {
                    for o in 0..outer {
                        let dst = &mut g[(o * len + start) * inner..(o * len + start + width) * inner];
                        let src = &go[o * width * inner..(o + 1) * width * inner];
                        dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::MeanPool { a, segments } => {
                let in_shape = self.shape(*a);
                let r = in_shape.len();
                let (t, d) = (in_shape[r - 2], in_shape[r - 1]);
                let outer = numel(&in_shape[..r - 2]);
                accumulate(grads, *a, numel(in_shape), |g| {
                    for o in 0..outer {
                        for s in 0..*segments {
                            let (lo, hi) = segment_bounds(t, *segments, s);
                            let inv = 1.0 / (hi - lo) as f64;
                            let src = &go[(o * segments + s) * d..(o * segments + s + 1) * d];
                            for pos in lo..hi {
                                let dst = &mut g[(o * t + pos) * d..(o * t + pos + 1) * d];
                                dst.iter_mut().zip(src).for_each(|(x, y)| *x += y * inv);
                            }
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let ts = self.shape(*table);
                let d = ts[1];
                accumulate(grads, *table, numel(ts), |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut g[id * d..(id + 1) * d];
                        dst.iter_mut().zip(&go[r * d..(r + 1) * d]).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *out_shape.last().unwrap();
                let rows = rstd.len();
                let gd = self.value(*gain).data();
                if self.rg(*x) {
                    accumulate(grads, *x, rows * d, |g| {
                        let mut dxhat = vec![0.0; d];
                        for r in 0..rows {
                            let mut mean_dx = 0.0;
                            let mut mean_dxx = 0.0;
                            for i in 0..d {
                                let v = go[r * d + i] * gd[i];
                                dxhat[i] = v;
                                mean_dx += v;
                                mean_dxx += v * xhat[r * d + i];
                            }
                            mean_dx /= d as f64;
                            mean_dxx /= d as f64;
                            for i in 0..d {
                                g[r * d + i] += rstd[r] * (dxhat[i] - mean_dx - xhat[r * d + i] * mean_dxx);
                            }
                        }
                    });
                }
                if self.rg(*gain) {
                    accumulate(grads, *gain, d, |g| {
                        for r in 0..rows {
                            for i in 0..d {
                                g[i] += go[r * d + i] * xhat[r * d + i];
                            }
                        }
                    });
                }
                if self.rg(*bias) {
                    accumulate(grads, *bias, d, |g| {
                        for r in 0..rows {
                            for i in 0..d {
                                g[i] += go[r * d + i];
                            }
                        }
                    });
                }
            }
            Op::Gelu { a } => {
                let ad = self.value(*a).data();
                accumulate(grads, *a, go.len(), |g| {
                    for i in 0..go.len() {
                        g[i] += go[i] * kernels::gelu_grad(ad[i]);
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(out_shape, *axis);
                accumulate(grads, *a, go.len(), |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for j in 0..len {
                                let at = base + j * inner;
                                dot += go[at] * y[at];
                            }
                            for j in 0..len {
                                let at = base + j * inner;
                                g[at] += y[at] * (go[at] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { a } => {
                let y = node.value.data();
                let d = *out_shape.last().unwrap();
                accumulate(grads, *a, go.len(), |g| {
                    for r in 0..go.len() / d {
                        let row = r * d..(r + 1) * d;
                        let s: f64 = go[row.clone()].iter().sum();
                        for i in row {
                            g[i] += go[i] - y[i].exp() * s;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.shape(*logits)[1];
                let scale = go[0] / targets.len() as f64;
                accumulate(grads, *logits, probs.len(), |g| {
                    for (r, &t) in targets.iter().enumerate() {
                        for i in 0..v {
                            g[r * v + i] += scale * probs[r * v + i];
                        }
                        g[r * v + t] -= scale;
                    }
                });
            }
            Op::Mse { a, b } => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                let scale = 2.0 * go[0] / x.len() as f64;
                if self.rg(*a) {
                    accumulate(grads, *a, x.len(), |g| {
                        for i in 0..x.len() {
                            g[i] += scale * (x[i] - y[i]);
                        }
                    });
                }
                if self.rg(*b) {
                    accumulate(grads, *b, x.len(), |g| {
                        for i in 0..x.len() {
                            g[i] -= scale * (x[i] - y[i]);
                        }
                    });
                }
            }
            Op::Sum { a } => {
                let n = self.value(*a).numel();
                accumulate(grads, *a, n, |g| g.iter_mut().for_each(|x| *x += go[0]));
            }
            Op::KlDiv {
                student,
                teacher_probs,
                student_probs,
                tau,
            } => {
                let rows = self.shape(*student)[0];
                let scale = go[0] * tau / rows as f64;
                accumulate(grads, *student, student_probs.len(), |g| {
                    for i in 0..g.len() {
                        g[i] += scale * (student_probs[i] - teacher_probs[i]);
                    }
                });
            }
        }
    }
}
