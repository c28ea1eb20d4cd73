//! Define-by-run reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node holding its output and the
//! information its backward rule needs. Nodes are only ever appended, so the
//! node list is already in topological order and `backward` is one reverse
//! sweep. A tape lives for one forward pass and is confined to one thread.

use super::kernels::{self, transpose};
use super::{numel, Float, Param, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One source tap of a separable bilinear resampler.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

enum Op<T> {
    Leaf,
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    MatMul { a: Var, b: Var, batched: bool },
    Gelu { x: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Pad { x: Var, axis: usize, before: usize },
    Roll { x: Var, shifts: Vec<isize> },
    Sum { x: Var },
    Mean { x: Var },
    CrossEntropy { logits: Var, probs: Vec<T>, labels: Vec<u32>, count: usize },
    Gather { table: Var, index: Vec<usize> },
    Upsample { x: Var, rows: Vec<Tap>, cols: Vec<Tap> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Coefficient of the tanh approximation of gelu, sqrt(2/pi).
pub const GELU_COEFF: f64 = 0.7978845608;
const GELU_CUBIC: f64 = 0.044715;

pub struct Tape<T: Float = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(usize, Var)>,
    macs: u64,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Length of the repeating block when `b` broadcasts against `a`, if it does.
/// `b` may equal `a`, be a trailing-suffix of `a`'s shape, or hold one element.
fn broadcast_block(a: &[usize], b: &[usize]) -> Option<usize> {
    let nb = numel(b);
    if nb == 1 {
        return Some(1);
    }
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        return Some(nb);
    }
    None
}

fn sum_blocks<T: Float>(g: &[T], block: usize) -> Vec<T> {
    let mut out = vec![T::zero(); block];
    for chunk in g.chunks(block) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Half-pixel source mapping with edge clamping.
fn bilinear_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
            Tap {
                i0,
                i1,
                w0: 1.0 - frac,
                w1: frac,
            }
        })
        .collect()
}

fn gelu<T: Float>(x: T) -> T {
    let k = T::lit(GELU_COEFF);
    let c = T::lit(GELU_CUBIC);
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let k = T::lit(GELU_COEFF);
    let c = T::lit(GELU_CUBIC);
    let half = T::lit(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates spent by the forward ops recorded so far. Matrix
    /// products count `m*k*n`; softmax, layer norm and gelu one per element;
    /// bilinear upsampling four per output element. Other ops are free.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Records an input tensor; its `requires_grad` flag is honored.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut value: Tensor<T>) -> Var {
        value.requires_grad = false;
        value.grad = None;
        self.leaf(value)
    }

    /// Records a model parameter as a differentiable leaf.
    pub fn param(&mut self, p: &Param) -> Var {
        let mut value = p.tensor.cast::<T>();
        value.requires_grad = true;
        value.grad = None;
        let v = self.leaf(value);
        self.params.push((p.id, v));
        v
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{name} output at flat index {bad}")));
        }
        let mut value = Tensor::new(shape, data)?;
        value.requires_grad = inputs.iter().any(|&v| self.needs_grad(v));
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_finite_input(&self, name: &str, x: Var) -> Result<()> {
        if self.value(x).is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{name} input")))
        }
    }

    // ---- elementwise -------------------------------------------------------

    /// Elementwise sum. One operand may broadcast over the other's leading
    /// dimensions or be a single element.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.order_broadcast("add", a, b)?;
        let block = broadcast_block(self.shape(a), self.shape(b)).expect("checked");
        let bd = self.data(b);
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % block])
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("add", shape, data, &[a, b], Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.order_broadcast("mul", a, b)?;
        let block = broadcast_block(self.shape(a), self.shape(b)).expect("checked");
        let bd = self.data(b);
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bd[i % block])
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", shape, data, &[a, b], Op::Mul { a, b })
    }

    fn order_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        if broadcast_block(self.shape(a), self.shape(b)).is_some() {
            Ok((a, b))
        } else if broadcast_block(self.shape(b), self.shape(a)).is_some() {
            Ok((b, a))
        } else {
            Err(Error::shape(op, self.shape(a), self.shape(b)))
        }
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::lit(s);
        let data = self.data(x).iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, data, &[x], Op::Scale { x, s })
    }

    /// Gaussian error linear unit, tanh approximation with coefficient
    /// [`GELU_COEFF`].
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.macs += self.value(x).numel() as u64;
        let data = self.data(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push("gelu", shape, data, &[x], Op::Gelu { x })
    }

    // ---- linear algebra ----------------------------------------------------

    /// Matrix product over the last two axes.
    ///
    /// `b` is either a plain `[k,n]` matrix shared by every leading index of
    /// `a`, or carries exactly the same leading batch dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        let n = sb[sb.len() - 1];
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        if sb.len() == 2 {
            let m = numel(&sa) / k;
            self.macs += (m * k * n) as u64;
            let data = kernels::gemm(self.data(a), self.data(b), m, k, n);
            return self.push("matmul", out_shape, data, &[a, b], Op::MatMul { a, b, batched: false });
        }
        if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let m = sa[sa.len() - 2];
        let batches = numel(&sa[..sa.len() - 2]);
        self.macs += (batches * m * k * n) as u64;
        let mut data = vec![T::zero(); batches * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        par::for_each_chunk_mut(&mut data, m * n, batches > 1, |bi, out| {
            let r = kernels::gemm_sequential(&ad[bi * m * k..(bi + 1) * m * k], &bd[bi * k * n..(bi + 1) * k * n], m, k, n);
            out.copy_from_slice(&r);
        });
        self.push("matmul", out_shape, data, &[a, b], Op::MatMul { a, b, batched: true })
    }

    /// Affine map over the last axis: `x · weight (+ bias)`, weight `[in,out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => {
                let (sy, sb) = (self.shape(y).to_vec(), self.shape(b).to_vec());
                if sb.len() != 1 || sy.last() != sb.last() {
                    return Err(Error::shape("linear bias", &sy, &sb));
                }
                self.add(y, b)
            }
            None => Ok(y),
        }
    }

    // ---- normalization -----------------------------------------------------

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        self.check_finite_input("softmax", x)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        self.macs += (outer * len * inner) as u64;
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(xd[at(j)]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (xd[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
        self.push("softmax", shape, out, &[x], Op::Softmax { x, axis })
    }

    /// Layer normalization over the last axis with learned gain and offset.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("layernorm", "eps must be positive"));
        }
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::contract("layernorm", "scalar input"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape("layernorm", &shape, self.shape(p)));
            }
        }
        self.macs += self.value(x).numel() as u64;
        let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        let rows = xd.len() / c;
        let eps = T::lit(eps);
        let inv_c = T::lit(1.0 / c as f64);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gd[j] + bd[j];
            }
        }
        self.push(
            "layernorm",
            shape,
            out,
            &[x, gamma, beta],
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
        )
    }

    // ---- data movement -----------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let data = self.data(x).to_vec();
        self.push("reshape", shape.to_vec(), data, &[x], Op::Reshape { x })
    }

    /// Reorders axes; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::contract("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let (data, out_shape) = kernels::permute_data(self.data(x), &shape, perm);
        self.push("permute", out_shape, data, &[x], Op::Permute { x, perm: perm.to_vec() })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::contract("concat", "no operands"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::contract("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in xs {
                let s = self.shape(v);
                let block = s[axis..].iter().product::<usize>();
                data.extend_from_slice(&self.data(v)[o * block..(o + 1) * block]);
            }
        }
        self.push("concat", out_shape, data, xs, Op::Concat { xs: xs.to_vec(), axis })
    }

    /// Contiguous sub-range `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::contract("narrow", format!("range {start}+{len} on axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let xd = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push("narrow", out_shape, data, &[x], Op::Narrow { x, axis, start })
    }

    /// Zero padding along one axis.
    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract("pad", format!("axis {axis} out of range for {shape:?}")));
        }
        if before == 0 && after == 0 {
            return Ok(x);
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let m = n + before + after;
        let xd = self.data(x);
        let mut data = vec![T::zero(); outer * m * inner];
        for o in 0..outer {
            let src = o * n * inner;
            let dst = (o * m + before) * inner;
            data[dst..dst + n * inner].copy_from_slice(&xd[src..src + n * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = m;
        self.push("pad", out_shape, data, &[x], Op::Pad { x, axis, before })
    }

    /// Cyclic shift per axis; index `i` moves to `(i + shift) mod len`.
    pub fn roll(&mut self, x: Var, shifts: &[isize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shifts.len() != shape.len() {
            return Err(Error::contract("roll", format!("{} shifts for rank {}", shifts.len(), shape.len())));
        }
        let data = kernels::roll_data(self.data(x), &shape, shifts);
        self.push("roll", shape, data, &[x], Op::Roll { x, shifts: shifts.to_vec() })
    }

    /// Rows of a `[rows, d]` table selected by `index`, giving `[index.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::contract("gather_rows", format!("table must be 2-D, got {shape:?}")));
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::contract("gather_rows", format!("index {bad} >= {rows}")));
        }
        let td = self.data(table);
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in index {
            data.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        self.push("gather_rows", vec![index.len(), d], data, &[table], Op::Gather { table, index: index.to_vec() })
    }

    /// Bilinear resize of an `[h,w,c]` map to a larger or equal size using the
    /// half-pixel convention `src = (dst + 0.5) * in/out - 0.5`, clamped to the edges.
    pub fn upsample_bilinear(&mut self, x: Var, target_h: usize, target_w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::contract("upsample_bilinear", format!("expected [h,w,c], got {shape:?}")));
        }
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        if target_h < h || target_w < w {
            return Err(Error::contract(
                "upsample_bilinear",
                format!("cannot downsample {h}x{w} to {target_h}x{target_w}"),
            ));
        }
        self.macs += 4 * (target_h * target_w * c) as u64;
        let rows = bilinear_taps(h, target_h);
        let cols = bilinear_taps(w, target_w);
        let xd = self.data(x);
        let mut data = vec![T::zero(); target_h * target_w * c];
        for (ty, r) in rows.iter().enumerate() {
            let (wr0, wr1) = (T::lit(r.w0), T::lit(r.w1));
            for (tx, q) in cols.iter().enumerate() {
                let (wc0, wc1) = (T::lit(q.w0), T::lit(q.w1));
                let out = &mut data[(ty * target_w + tx) * c..(ty * target_w + tx + 1) * c];
                let px = |y: usize, xx: usize| &xd[(y * w + xx) * c..(y * w + xx + 1) * c];
                let (p00, p01, p10, p11) = (px(r.i0, q.i0), px(r.i0, q.i1), px(r.i1, q.i0), px(r.i1, q.i1));
                for ch in 0..c {
                    out[ch] = wr0 * (wc0 * p00[ch] + wc1 * p01[ch]) + wr1 * (wc0 * p10[ch] + wc1 * p11[ch]);
                }
            }
        }
        self.push(
            "upsample_bilinear",
            vec![target_h, target_w, c],
            data,
            &[x],
            Op::Upsample { x, rows, cols },
        )
    }

    // ---- reductions and losses --------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().copied().sum::<T>();
        self.push("sum", vec![], vec![s], &[x], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.data(x).iter().copied().sum::<T>() / T::lit(n as f64);
        self.push("mean", vec![], vec![s], &[x], Op::Mean { x })
    }

    /// Mean cross-entropy between `logits[.., n_cls]` and integer `labels`
    /// (one per logit row). Rows labelled `ignore_index` contribute nothing;
    /// with no valid rows the loss is zero.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u32], ignore_index: u32) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let n_cls = *shape.last().ok_or_else(|| Error::contract("cross_entropy", "scalar logits"))?;
        let rows = numel(&shape) / n_cls;
        if labels.len() != rows {
            return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
        }
        self.check_finite_input("cross_entropy", logits)?;
        let ld = self.data(logits);
        let mut probs = vec![T::zero(); ld.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, &label) in labels.iter().enumerate() {
            let row = &ld[r * n_cls..(r + 1) * n_cls];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_sum = sum.ln() + max;
            for (p, &v) in probs[r * n_cls..(r + 1) * n_cls].iter_mut().zip(row) {
                *p = (v - log_sum).exp();
            }
            if label == ignore_index {
                continue;
            }
            if label as usize >= n_cls {
                return Err(Error::Data(format!("label {label} at row {r} is outside 0..{n_cls}")));
            }
            total += log_sum - row[label as usize];
            count += 1;
        }
        let loss = if count == 0 { T::zero() } else { total / T::lit(count as f64) };
        self.push(
            "cross_entropy",
            vec![],
            vec![loss],
            &[logits],
            Op::CrossEntropy { logits, probs, labels: labels.to_vec(), count },
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Populates gradients of the scalar `loss` with respect to every
    /// recorded value that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.needs_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                if self.needs_grad(*b) {
                    let block = self.value(*b).numel();
                    self.accumulate(grads, *b, sum_blocks(g, block));
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let block = bd.len();
                if self.needs_grad(*a) {
                    let ga = g.iter().enumerate().map(|(j, &gv)| gv * bd[j % block]).collect();
                    self.accumulate(grads, *a, ga);
                }
                if self.needs_grad(*b) {
                    let prod: Vec<T> = g.iter().zip(ad).map(|(&gv, &av)| gv * av).collect();
                    self.accumulate(grads, *b, sum_blocks(&prod, block));
                }
            }
            Op::Scale { x, s } => {
                self.accumulate(grads, *x, g.iter().map(|&v| v * *s).collect());
            }
            Op::MatMul { a, b, batched } => self.matmul_backward(*a, *b, *batched, g, grads),
            Op::Gelu { x } => {
                let xd = self.data(*x);
                self.accumulate(grads, *x, g.iter().zip(xd).map(|(&gv, &xv)| gv * gelu_grad(xv)).collect());
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + k;
                        let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = self.value(*gamma).numel();
                let gd = self.data(*gamma);
                let rows = xhat.len() / c;
                if self.needs_grad(*x) {
                    let inv_c = T::lit(1.0 / c as f64);
                    let mut gx = vec![T::zero(); xhat.len()];
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut sum_d = T::zero();
                        let mut sum_dh = T::zero();
                        for j in 0..c {
                            let d = gr[j] * gd[j];
                            sum_d += d;
                            sum_dh += d * hr[j];
                        }
                        for j in 0..c {
                            let d = gr[j] * gd[j];
                            gx[r * c + j] = rstd[r] * (d - inv_c * sum_d - hr[j] * inv_c * sum_dh);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.needs_grad(*gamma) {
                    let prod: Vec<T> = g.iter().zip(xhat).map(|(&gv, &h)| gv * h).collect();
                    self.accumulate(grads, *gamma, sum_blocks(&prod, c));
                }
                if self.needs_grad(*beta) {
                    self.accumulate(grads, *beta, sum_blocks(g, c));
                }
            }
            Op::Reshape { x } => self.accumulate(grads, *x, g.to_vec()),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (gx, _) = kernels::permute_data(g, node.value.shape(), &inverse);
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { xs, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let out_block: usize = out_shape[*axis..].iter().product();
                let mut offset = 0;
                for &v in xs {
                    let block: usize = self.shape(v)[*axis..].iter().product();
                    if self.needs_grad(v) {
                        let mut gv = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let base = o * out_block + offset;
                            gv.extend_from_slice(&g[base..base + block]);
                        }
                        self.accumulate(grads, v, gv);
                    }
                    offset += block;
                }
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = self.shape(*x);
                let (outer, n, inner) = axis_split(in_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Pad { x, axis, before } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let m = node.value.shape()[*axis];
                let mut gx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    let src = (o * m + before) * inner;
                    gx.extend_from_slice(&g[src..src + n * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Roll { x, shifts } => {
                let back: Vec<isize> = shifts.iter().map(|s| -s).collect();
                self.accumulate(grads, *x, kernels::roll_data(g, node.value.shape(), &back));
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::CrossEntropy { logits, probs, labels, count } => {
                let mut gx = vec![T::zero(); probs.len()];
                if *count > 0 {
                    let n_cls = probs.len() / labels.len();
                    let scale = g[0] / T::lit(*count as f64);
                    for (r, &label) in labels.iter().enumerate() {
                        if label as usize >= n_cls {
                            continue;
                        }
                        for j in 0..n_cls {
                            let onehot = if j == label as usize { T::one() } else { T::zero() };
                            gx[r * n_cls + j] = (probs[r * n_cls + j] - onehot) * scale;
                        }
                    }
                }
                self.accumulate(grads, *logits, gx);
            }
            Op::Gather { table, index } => {
                let shape = self.shape(*table);
                let d = shape[1];
                let mut gt = vec![T::zero(); shape[0] * d];
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g[r * d + j];
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::Upsample { x, rows, cols } => {
                let s = self.shape(*x);
                let (w, c) = (s[1], s[2]);
                let tw = cols.len();
                let mut gx = vec![T::zero(); numel(s)];
                for (ty, r) in rows.iter().enumerate() {
                    for (tx, q) in cols.iter().enumerate() {
                        let go = &g[(ty * tw + tx) * c..(ty * tw + tx + 1) * c];
                        for (y, wy) in [(r.i0, r.w0), (r.i1, r.w1)] {
                            for (xx, wx) in [(q.i0, q.w0), (q.i1, q.w1)] {
                                let wgt = T::lit(wy * wx);
                                let dst = &mut gx[(y * w + xx) * c..(y * w + xx + 1) * c];
                                for (d, &gv) in dst.iter_mut().zip(go) {
                                    *d += wgt * gv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, batched: bool, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let k = sa[sa.len() - 1];
        let n = sb[sb.len() - 1];
        let (ad, bd) = (self.data(a), self.data(b));
        if !batched {
            let m = numel(sa) / k;
            if self.needs_grad(a) {
                let bt = transpose(bd, k, n);
                self.accumulate(grads, a, kernels::gemm(g, &bt, m, n, k));
            }
            if self.needs_grad(b) {
                let at = transpose(ad, m, k);
                self.accumulate(grads, b, kernels::gemm(&at, g, k, m, n));
            }
            return;
        }
        let m = sa[sa.len() - 2];
        let batches = numel(&sa[..sa.len() - 2]);
        if self.needs_grad(a) {
            let mut ga = vec![T::zero(); batches * m * k];
            par::for_each_chunk_mut(&mut ga, m * k, batches > 1, |bi, out| {
                let bt = transpose(&bd[bi * k * n..(bi + 1) * k * n], k, n);
                out.copy_from_slice(&kernels::gemm_sequential(&g[bi * m * n..(bi + 1) * m * n], &bt, m, n, k));
            });
            self.accumulate(grads, a, ga);
        }
        if self.needs_grad(b) {
            let mut gb = vec![T::zero(); batches * k * n];
            par::for_each_chunk_mut(&mut gb, k * n, batches > 1, |bi, out| {
                let at = transpose(&ad[bi * m * k..(bi + 1) * m * k], m, k);
                out.copy_from_slice(&kernels::gemm_sequential(&at, &g[bi * m * n..(bi + 1) * m * n], k, m, n));
            });
            self.accumulate(grads, b, gb);
        }
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients per parameter id, summed over every registration of the same
    /// parameter. Entries are `None` for parameters the loss does not reach.
    pub fn param_grads(&self, n_params: usize) -> Vec<Option<Vec<T>>> {
        let mut out: Vec<Option<Vec<T>>> = (0..n_params).map(|_| None).collect();
        for &(id, v) in &self.params {
            let Some(g) = self.grad(v) else { continue };
            match &mut out[id] {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(g.to_vec()),
            }
        }
        out
    }

    /// Copies gradients into each parameter's `grad` slot.
    pub fn write_grads<'a>(&self, params: impl IntoIterator<Item = &'a mut Param>) {
        let params: Vec<&mut Param> = params.into_iter().collect();
        let grads = self.param_grads(params.iter().map(|p| p.id + 1).max().unwrap_or(0));
        for p in params {
            p.tensor.grad = grads[p.id]
                .as_ref()
                .map(|g| g.iter().map(|v| v.as_f64() as f32).collect());
        }
    }
}
