//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients for every node that
//! (transitively) depends on a leaf created with `requires_grad = true`.

use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::{col2im, gemm, im2col, ConvGeom, MatView};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization grouping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormMode {
    /// Per channel over batch and space; divides by `sqrt(var + eps)`.
    Batch { eps: f64 },
    /// Per sample and channel over space; divides by `max(std, eps)`.
    InstanceFloor { eps: f64 },
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    AddBias(Var, Var),
    ChannelAffine { x: Var, gamma: Var, beta: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvT2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Softplus(Var),
    Abs(Var),
    Normalize { x: Var, mode: NormMode, inv_std: Vec<f64>, floored: Vec<bool> },
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    SoftmaxRows(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Mean(Var),
    Sum(Var),
    RowL2Norm(Var),
    Focal { logits: Var, labels: Vec<usize>, gamma: f64, alpha: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// `(outer, channels, inner)` for axis-1 broadcasting.
fn split_axis1(shape: &[usize]) -> (usize, usize, usize) {
    let outer = shape[0];
    let c = if shape.len() > 1 { shape[1] } else { 1 };
    let inner = if shape.len() > 2 { shape[2..].iter().product() } else { 1 };
    (outer, c, inner)
}

/// Batched matrix dims: `(batch, rows, cols)`; rank-2 tensors are one batch.
fn mat_dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [r, c] => (1, *r, *c),
        [b, r, c] => (*b, *r, *c),
        _ => panic!("bmm expects rank 2 or 3, got {shape:?}"),
    }
}

fn view(rows: usize, cols: usize, transposed: bool) -> MatView {
    if transposed {
        MatView::transposed(rows, cols)
    } else {
        MatView::row_major(rows, cols)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-libm::fabs(x)))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Row-wise softmax of a `[N, K]` slice.
fn softmax_rows_into(x: &[f64], k: usize, out: &mut [f64]) {
    for (row, orow) in x.chunks(k).zip(out.chunks_mut(k)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = libm::exp(v - m);
            s += *o;
        }
        orow.iter_mut().for_each(|o| *o /= s);
    }
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

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(value, op, needs)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A gradient-free copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.derived(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.derived(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.derived(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.derived(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.derived(v, Op::AddScalar(a), &[a])
    }

    /// `x * s` for a one-element tensor `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let v = self.value(x).map(|a| a * sv);
        self.derived(v, Op::MulScalarVar(x, s), &[x, s])
    }

    /// Adds `b[c]` along axis 1.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let (outer, c, inner) = split_axis1(xv.shape());
        let bv = self.value(b).data();
        assert_eq!(bv.len(), c, "bias length");
        let mut out = xv.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for ci in 0..c {
                let base = (o * c + ci) * inner;
                d[base..base + inner].iter_mut().for_each(|v| *v += bv[ci]);
            }
        }
        self.derived(out, Op::AddBias(x, b), &[x, b])
    }

    /// `gamma[g, c] * x + beta[g, c]` with `g` either the sample index or 0
    /// (shared across the batch).
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (outer, c, inner) = split_axis1(xv.shape());
        let gv = self.value(gamma);
        let bv = self.value(beta);
        assert_eq!(gv.shape(), bv.shape(), "gamma/beta shape");
        assert_eq!(gv.shape()[1], c, "gamma channels");
        let shared = gv.shape()[0] == 1;
        assert!(shared || gv.shape()[0] == outer, "gamma batch");
        let mut out = xv.clone();
        let d = out.data_mut();
        for o in 0..outer {
            let go = if shared { 0 } else { o };
            for ci in 0..c {
                let gm = gv.data()[go * c + ci];
                let bt = bv.data()[go * c + ci];
                let base = (o * c + ci) * inner;
                d[base..base + inner].iter_mut().for_each(|v| *v = gm * *v + bt);
            }
        }
        self.derived(out, Op::ChannelAffine { x, gamma, beta }, &[x, gamma, beta])
    }

    /// 2-D convolution; `x: [N, Ci, H, W]`, `w: [Co, Ci, k, k]`, `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let [n, ci, h, wd] = self.value(x).dims4();
        let [co, wci, k, k2] = self.value(w).dims4();
        assert_eq!(ci, wci, "conv2d input channels");
        assert_eq!(k, k2, "square kernels only");
        let geom = ConvGeom::conv(ci, h, wd, k, stride, pad);
        let npos = geom.col_cols();
        let ckk = geom.col_rows();
        let mut out = vec![0.0; n * co * npos];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; ckk * npos] };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for s in 0..n {
                let xs = &xv[s * ci * h * wd..(s + 1) * ci * h * wd];
                let src: &[f64] = if geom.is_pointwise() {
                    xs
                } else {
                    im2col(xs, &geom, &mut cols);
                    &cols
                };
                gemm(
                    1.0,
                    wv,
                    MatView::row_major(co, ckk),
                    src,
                    MatView::row_major(ckk, npos),
                    0.0,
                    &mut out[s * co * npos..(s + 1) * co * npos],
                    MatView::row_major(co, npos),
                );
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for s in 0..n {
                    for c in 0..co {
                        let base = (s * co + c) * npos;
                        out[base..base + npos].iter_mut().for_each(|v| *v += bv[c]);
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, co, geom.ho, geom.wo], out);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.derived(value, Op::Conv2d { x, w, b, geom }, &parents)
    }

    /// Transposed 2-D convolution; `x: [N, Ci, H, W]`, `w: [Ci, Co, k, k]`.
    /// Output side is `(H - 1)·stride − 2·pad + k + out_pad`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, out_pad: usize) -> Var {
        let [n, ci, h, wd] = self.value(x).dims4();
        let [wci, co, k, k2] = self.value(w).dims4();
        assert_eq!(ci, wci, "conv_transpose2d input channels");
        assert_eq!(k, k2, "square kernels only");
        assert!(out_pad < stride.max(1) || out_pad == 0, "out_pad must be < stride");
        let ho = (h - 1) * stride + k + out_pad - 2 * pad;
        let wo = (wd - 1) * stride + k + out_pad - 2 * pad;
        // geometry of the adjoint convolution mapping the output back to `x`
        let geom = ConvGeom { channels: co, h: ho, w: wo, k, stride, pad, ho: h, wo: wd };
        let ckk = geom.col_rows();
        let npos = h * wd;
        let mut out = vec![0.0; n * co * ho * wo];
        let mut cols = vec![0.0; ckk * npos];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for s in 0..n {
                let xs = &xv[s * ci * npos..(s + 1) * ci * npos];
                gemm(
                    1.0,
                    wv,
                    MatView::transposed(ci, ckk),
                    xs,
                    MatView::row_major(ci, npos),
                    0.0,
                    &mut cols,
                    MatView::row_major(ckk, npos),
                );
                col2im(&cols, &geom, &mut out[s * co * ho * wo..(s + 1) * co * ho * wo]);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for s in 0..n {
                    for c in 0..co {
                        let base = (s * co + c) * ho * wo;
                        out[base..base + ho * wo].iter_mut().for_each(|v| *v += bv[c]);
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, co, ho, wo], out);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.derived(value, Op::ConvT2d { x, w, b, geom }, &parents)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        self.derived(v, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { slope * a });
        self.derived(v, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(libm::tanh);
        self.derived(v, Op::Tanh(x), &[x])
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(softplus);
        self.derived(v, Op::Softplus(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(libm::fabs);
        self.derived(v, Op::Abs(x), &[x])
    }

    /// Zero-mean / unit-scale normalization without affine parameters.
    pub fn normalize(&mut self, x: Var, mode: NormMode) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.dims4();
        let hw = h * w;
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        let mut inv_std;
        let mut floored;
        match mode {
            NormMode::Batch { eps } => {
                inv_std = vec![0.0; c];
                floored = vec![false; c];
                let count = (n * hw) as f64;
                for ci in 0..c {
                    let planes = (0..n).map(|s| (s * c + ci) * hw);
                    let mean = planes.clone().map(|b| src[b..b + hw].iter().sum::<f64>()).sum::<f64>() / count;
                    let var = planes
                        .clone()
                        .map(|b| src[b..b + hw].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
                        .sum::<f64>()
                        / count;
                    let inv = 1.0 / libm::sqrt(var + eps);
                    inv_std[ci] = inv;
                    for b in planes {
                        for i in b..b + hw {
                            out[i] = (src[i] - mean) * inv;
                        }
                    }
                }
                floored.clear();
            }
            NormMode::InstanceFloor { eps } => {
                inv_std = vec![0.0; n * c];
                floored = vec![false; n * c];
                for gi in 0..n * c {
                    let plane = &src[gi * hw..(gi + 1) * hw];
                    // exact for constant planes so they map to exactly zero
                    let mean = if plane.iter().all(|v| *v == plane[0]) { plane[0] } else { plane.iter().sum::<f64>() / hw as f64 };
                    let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
                    let std = libm::sqrt(var);
                    let (inv, fl) = if std > eps { (1.0 / std, false) } else { (1.0 / eps, true) };
                    inv_std[gi] = inv;
                    floored[gi] = fl;
                    for (o, v) in out[gi * hw..(gi + 1) * hw].iter_mut().zip(plane) {
                        *o = (v - mean) * inv;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, h, w], out);
        self.derived(value, Op::Normalize { x, mode, inv_std, floored }, &[x])
    }

    /// Batched matrix product `op(a) · op(b)` where `op` optionally transposes
    /// the trailing two axes. Rank-2 operands are a batch of one.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ba, ra, ca) = mat_dims(self.value(a).shape());
        let (bb, rb, cb) = mat_dims(self.value(b).shape());
        assert_eq!(ba, bb, "bmm batch mismatch");
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        assert_eq!(k, k2, "bmm inner dims");
        let mut out = vec![0.0; ba * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..ba {
                gemm(
                    1.0,
                    &av[i * ra * ca..(i + 1) * ra * ca],
                    view(ra, ca, ta),
                    &bv[i * rb * cb..(i + 1) * rb * cb],
                    view(rb, cb, tb),
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                    MatView::row_major(m, n),
                );
            }
        }
        let shape: Vec<usize> = if self.value(a).ndim() == 2 { vec![m, n] } else { vec![ba, m, n] };
        let value = Tensor::from_vec(&shape, out);
        self.derived(value, Op::Bmm { a, b, ta, tb }, &[a, b])
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let k = *xv.shape().last().unwrap();
        let mut out = vec![0.0; xv.numel()];
        softmax_rows_into(xv.data(), k, &mut out);
        let value = Tensor::from_vec(xv.shape(), out);
        self.derived(value, Op::SoftmaxRows(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape);
        self.derived(v, Op::Reshape(x), &[x])
    }

    /// Concatenate along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        for t in &tensors {
            assert!(t.ndim() >= 2, "concat needs a batch axis");
        }
        let v = Tensor::concat_channels(&tensors);
        self.derived(v, Op::Concat(parts.to_vec()), parts)
    }

    /// Slice `[start, start + len)` along axis 1.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (outer, c, inner) = split_axis1(xv.shape());
        assert!(start + len <= c, "narrow out of range");
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * c * inner;
            data.extend_from_slice(&xv.data()[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[1] = len;
        let v = Tensor::from_vec(&shape, data);
        self.derived(v, Op::Narrow { x, start }, &[x])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let v = self.value(x).avg_pool2();
        self.derived(v, Op::AvgPool2(x), &[x])
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.dims4();
        let hw = h * w;
        let data = xv.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let v = Tensor::from_vec(&[n, c], data);
        self.derived(v, Op::GlobalAvgPool(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        self.derived(v, Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.derived(v, Op::Sum(x), &[x])
    }

    /// Euclidean norm of each sample (leading axis) -> `[N]`. The gradient at a
    /// zero norm is taken as zero.
    pub fn row_l2_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.shape()[0];
        let inner = xv.numel() / n;
        let data = xv.data().chunks(inner).map(|r| libm::sqrt(r.iter().map(|v| v * v).sum())).collect();
        let v = Tensor::from_vec(&[n], data);
        self.derived(v, Op::RowL2Norm(x), &[x])
    }

    /// Mean over the batch of `−α_y · (1 − p_y)^γ · ln p_y`, `p = softmax(logits)`.
    pub fn focal(&mut self, logits: Var, labels: &[usize], gamma: f64, alpha: &[f64]) -> Var {
        let lv = self.value(logits);
        let [n, k] = match lv.shape() {
            [n, k] => [*n, *k],
            s => panic!("focal expects [N, K], got {s:?}"),
        };
        assert_eq!(labels.len(), n, "focal label count");
        assert_eq!(alpha.len(), k, "focal alpha length");
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &lv.data()[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + libm::log(row.iter().map(|v| libm::exp(v - m)).sum::<f64>());
            let logp = row[y] - lse;
            let q = 1.0 - libm::exp(logp);
            let modulating = if gamma == 0.0 { 1.0 } else { libm::pow(q.max(0.0), gamma) };
            total += -alpha[y] * modulating * logp;
        }
        let v = Tensor::scalar(total / n as f64);
        let op = Op::Focal { logits, labels: labels.to_vec(), gamma, alpha: alpha.to_vec() };
        self.derived(v, op, &[logits])
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(gy);
            }
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, gy.clone());
                }
                if self.wants(*b) {
                    self.acc(grads, *b, gy.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, gy.clone());
                }
                if self.wants(*b) {
                    self.acc(grads, *b, gy.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, gy.zip_map(self.value(*b), |g, v| g * v));
                }
                if self.wants(*b) {
                    self.acc(grads, *b, gy.zip_map(self.value(*a), |g, v| g * v));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, gy.map(|g| g * s));
            }
            Op::AddScalar(a) => self.acc(grads, *a, gy.clone()),
            Op::MulScalarVar(x, s) => {
                let sv = self.value(*s).item();
                if self.wants(*x) {
                    self.acc(grads, *x, gy.map(|g| g * sv));
                }
                if self.wants(*s) {
                    let d: f64 = gy.data().iter().zip(self.value(*x).data()).map(|(g, v)| g * v).sum();
                    self.acc(grads, *s, Tensor::from_vec(self.value(*s).shape(), vec![d]));
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    self.acc(grads, *x, gy.clone());
                }
                if self.wants(*b) {
                    let (outer, c, inner) = split_axis1(gy.shape());
                    let mut db = vec![0.0; c];
                    for o in 0..outer {
                        for (ci, slot) in db.iter_mut().enumerate() {
                            let base = (o * c + ci) * inner;
                            *slot += gy.data()[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    self.acc(grads, *b, Tensor::from_vec(self.value(*b).shape(), db));
                }
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let (outer, c, inner) = split_axis1(xv.shape());
                let shared = gv.shape()[0] == 1;
                let mut dx = if self.wants(*x) { Some(vec![0.0; xv.numel()]) } else { None };
                let mut dg = vec![0.0; gv.numel()];
                let mut db = vec![0.0; gv.numel()];
                for o in 0..outer {
                    let go = if shared { 0 } else { o };
                    for ci in 0..c {
                        let base = (o * c + ci) * inner;
                        let gm = gv.data()[go * c + ci];
                        let gys = &gy.data()[base..base + inner];
                        let xs = &xv.data()[base..base + inner];
                        dg[go * c + ci] += gys.iter().zip(xs).map(|(g, v)| g * v).sum::<f64>();
                        db[go * c + ci] += gys.iter().sum::<f64>();
                        if let Some(dx) = dx.as_mut() {
                            for (d, g) in dx[base..base + inner].iter_mut().zip(gys) {
                                *d = g * gm;
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    self.acc(grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
                if self.wants(*gamma) {
                    self.acc(grads, *gamma, Tensor::from_vec(gv.shape(), dg));
                }
                if self.wants(*beta) {
                    self.acc(grads, *beta, Tensor::from_vec(gv.shape(), db));
                }
            }
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(*x, *w, *b, geom, gy, grads),
            Op::ConvT2d { x, w, b, geom } => self.conv_t2d_backward(*x, *w, *b, geom, gy, grads),
            Op::Relu(x) => {
                let d = gy.zip_map(y, |g, v| if v > 0.0 { g } else { 0.0 });
                self.acc(grads, *x, d);
            }
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                let d = gy.zip_map(self.value(*x), |g, v| if v > 0.0 { g } else { s * g });
                self.acc(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = gy.zip_map(y, |g, t| g * (1.0 - t * t));
                self.acc(grads, *x, d);
            }
            Op::Softplus(x) => {
                let d = gy.zip_map(self.value(*x), |g, v| g * sigmoid(v));
                self.acc(grads, *x, d);
            }
            Op::Abs(x) => {
                let d = gy.zip_map(self.value(*x), |g, v| {
                    if v > 0.0 {
                        g
                    } else if v < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
                self.acc(grads, *x, d);
            }
            Op::Normalize { x, mode, inv_std, floored } => {
                let [n, c, h, w] = y.dims4();
                let hw = h * w;
                let yd = y.data();
                let gd = gy.data();
                let mut dx = vec![0.0; yd.len()];
                match mode {
                    NormMode::Batch { .. } => {
                        let count = (n * hw) as f64;
                        for ci in 0..c {
                            let planes = (0..n).map(|s| (s * c + ci) * hw);
                            let mut mg = 0.0;
                            let mut mgy = 0.0;
                            for b in planes.clone() {
                                for j in b..b + hw {
                                    mg += gd[j];
                                    mgy += gd[j] * yd[j];
                                }
                            }
                            mg /= count;
                            mgy /= count;
                            let inv = inv_std[ci];
                            for b in planes {
                                for j in b..b + hw {
                                    dx[j] = inv * (gd[j] - mg - yd[j] * mgy);
                                }
                            }
                        }
                    }
                    NormMode::InstanceFloor { .. } => {
                        for gi in 0..n * c {
                            let r = gi * hw..(gi + 1) * hw;
                            let mg = gd[r.clone()].iter().sum::<f64>() / hw as f64;
                            let mgy = if floored[gi] {
                                0.0
                            } else {
                                gd[r.clone()].iter().zip(&yd[r.clone()]).map(|(g, v)| g * v).sum::<f64>() / hw as f64
                            };
                            let inv = inv_std[gi];
                            for j in r {
                                dx[j] = inv * (gd[j] - mg - yd[j] * mgy);
                            }
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(y.shape(), dx));
            }
            Op::Bmm { a, b, ta, tb } => self.bmm_backward(*a, *b, *ta, *tb, gy, grads),
            Op::SoftmaxRows(x) => {
                let k = *y.shape().last().unwrap();
                let mut dx = vec![0.0; y.numel()];
                for ((yr, gr), dr) in y.data().chunks(k).zip(gy.data().chunks(k)).zip(dx.chunks_mut(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(y.shape(), dx));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.acc(grads, *x, gy.clone().reshape(&shape));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let c = self.value(*p).shape()[1];
                    if self.wants(*p) {
                        self.acc(grads, *p, gy.narrow_channels(start, c));
                    }
                    start += c;
                }
            }
            Op::Narrow { x, start } => {
                let xs = self.value(*x).shape();
                let (outer, c, inner) = split_axis1(xs);
                let len = gy.shape()[1];
                let mut dx = vec![0.0; outer * c * inner];
                for o in 0..outer {
                    let dst = o * c * inner + start * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&gy.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, *x, Tensor::from_vec(xs, dx));
            }
            Op::AvgPool2(x) => {
                let d = gy.upsample_nearest2().map(|v| v * 0.25);
                let xs = self.value(*x).shape();
                if d.shape() == xs {
                    self.acc(grads, *x, d);
                } else {
                    // odd trailing row/column dropped by pooling receives no gradient
                    let r = xs.len();
                    let (h, w) = (xs[r - 2], xs[r - 1]);
                    let (dh, dw) = (d.shape()[r - 2], d.shape()[r - 1]);
                    let planes = d.numel() / (dh * dw);
                    let mut out = vec![0.0; planes * h * w];
                    for p in 0..planes {
                        for yy in 0..dh {
                            for xx in 0..dw {
                                out[p * h * w + yy * w + xx] = d.data()[p * dh * dw + yy * dw + xx];
                            }
                        }
                    }
                    self.acc(grads, *x, Tensor::from_vec(xs, out));
                }
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.value(*x).shape();
                let hw = xs[2] * xs[3];
                let mut dx = Vec::with_capacity(self.value(*x).numel());
                for &g in gy.data() {
                    dx.extend(core::iter::repeat_n(g / hw as f64, hw));
                }
                self.acc(grads, *x, Tensor::from_vec(xs, dx));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                let g = gy.item() / n;
                self.acc(grads, *x, Tensor::full(self.value(*x).shape(), g));
            }
            Op::Sum(x) => self.acc(grads, *x, Tensor::full(self.value(*x).shape(), gy.item())),
            Op::RowL2Norm(x) => {
                let xv = self.value(*x);
                let n = xv.shape()[0];
                let inner = xv.numel() / n;
                let mut dx = vec![0.0; xv.numel()];
                for s in 0..n {
                    let norm = y.data()[s];
                    if norm > 0.0 {
                        let f = gy.data()[s] / norm;
                        for j in s * inner..(s + 1) * inner {
                            dx[j] = f * xv.data()[j];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(xv.shape(), dx));
            }
            Op::Focal { logits, labels, gamma, alpha } => {
                let lv = self.value(*logits);
                let k = lv.shape()[1];
                let n = labels.len();
                let mut probs = vec![0.0; lv.numel()];
                softmax_rows_into(lv.data(), k, &mut probs);
                let mut dz = vec![0.0; lv.numel()];
                let scale = gy.item() / n as f64;
                for (i, &yl) in labels.iter().enumerate() {
                    let p = &probs[i * k..(i + 1) * k];
                    let py = p[yl];
                    let q = (1.0 - py).max(0.0);
                    let logp = {
                        let row = &lv.data()[i * k..(i + 1) * k];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        row[yl] - m - libm::log(row.iter().map(|v| libm::exp(v - m)).sum::<f64>())
                    };
                    let modulating = if *gamma == 0.0 { 1.0 } else { libm::pow(q, *gamma) };
                    let focus = if *gamma == 0.0 || q == 0.0 {
                        0.0
                    } else {
                        gamma * libm::pow(q, gamma - 1.0) * py * logp
                    };
                    // dL/dz_j = -α (q^γ − γ q^(γ−1) p_y ln p_y)(δ_jy − p_j)
                    let coeff = -alpha[yl] * (modulating - focus) * scale;
                    for j in 0..k {
                        let delta = if j == yl { 1.0 } else { 0.0 };
                        dz[i * k + j] = coeff * (delta - p[j]);
                    }
                }
                self.acc(grads, *logits, Tensor::from_vec(lv.shape(), dz));
            }
        }
    }

    fn conv2d_backward(&self, x: Var, w: Var, b: Option<Var>, geom: &ConvGeom, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let [n, co, _, _] = gy.dims4();
        let npos = geom.col_cols();
        let ckk = geom.col_rows();
        let xv = self.value(x);
        let wv = self.value(w);
        let in_size = geom.channels * geom.h * geom.w;
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let mut dx = if want_x { vec![0.0; xv.numel()] } else { Vec::new() };
        let mut dw = if want_w { vec![0.0; wv.numel()] } else { Vec::new() };
        let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { ckk * npos }];
        let mut dcols = vec![0.0; if geom.is_pointwise() || !want_x { 0 } else { ckk * npos }];
        for s in 0..n {
            let gys = &gy.data()[s * co * npos..(s + 1) * co * npos];
            if want_w {
                let xs = &xv.data()[s * in_size..(s + 1) * in_size];
                let src: &[f64] = if geom.is_pointwise() {
                    xs
                } else {
                    im2col(xs, geom, &mut cols);
                    &cols
                };
                gemm(
                    1.0,
                    gys,
                    MatView::row_major(co, npos),
                    src,
                    MatView::transposed(ckk, npos),
                    1.0,
                    &mut dw,
                    MatView::row_major(co, ckk),
                );
            }
            if want_x {
                let dxs = &mut dx[s * in_size..(s + 1) * in_size];
                if geom.is_pointwise() {
                    gemm(1.0, wv.data(), MatView::transposed(co, ckk), gys, MatView::row_major(co, npos), 0.0, dxs, MatView::row_major(ckk, npos));
                } else {
                    gemm(
                        1.0,
                        wv.data(),
                        MatView::transposed(co, ckk),
                        gys,
                        MatView::row_major(co, npos),
                        0.0,
                        &mut dcols,
                        MatView::row_major(ckk, npos),
                    );
                    col2im(&dcols, geom, dxs);
                }
            }
        }
        if want_x {
            self.acc(grads, x, Tensor::from_vec(xv.shape(), dx));
        }
        if want_w {
            self.acc(grads, w, Tensor::from_vec(wv.shape(), dw));
        }
        if let Some(b) = b {
            if self.wants(b) {
                let db: Vec<f64> = (0..co)
                    .map(|c| (0..n).map(|s| gy.data()[(s * co + c) * npos..(s * co + c + 1) * npos].iter().sum::<f64>()).sum())
                    .collect();
                self.acc(grads, b, Tensor::from_vec(&[co], db));
            }
        }
    }

    fn conv_t2d_backward(&self, x: Var, w: Var, b: Option<Var>, geom: &ConvGeom, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let [n, co, ho, wo] = gy.dims4();
        let xv = self.value(x);
        let wv = self.value(w);
        let ci = xv.shape()[1];
        let npos = geom.ho * geom.wo;
        let ckk = geom.col_rows();
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let mut dx = if want_x { vec![0.0; xv.numel()] } else { Vec::new() };
        let mut dw = if want_w { vec![0.0; wv.numel()] } else { Vec::new() };
        let mut gcols = vec![0.0; ckk * npos];
        if want_x || want_w {
            for s in 0..n {
                im2col(&gy.data()[s * co * ho * wo..(s + 1) * co * ho * wo], geom, &mut gcols);
                if want_x {
                    gemm(
                        1.0,
                        wv.data(),
                        MatView::row_major(ci, ckk),
                        &gcols,
                        MatView::row_major(ckk, npos),
                        0.0,
                        &mut dx[s * ci * npos..(s + 1) * ci * npos],
                        MatView::row_major(ci, npos),
                    );
                }
                if want_w {
                    gemm(
                        1.0,
                        &xv.data()[s * ci * npos..(s + 1) * ci * npos],
                        MatView::row_major(ci, npos),
                        &gcols,
                        MatView::transposed(ckk, npos),
                        1.0,
                        &mut dw,
                        MatView::row_major(ci, ckk),
                    );
                }
            }
        }
        if want_x {
            self.acc(grads, x, Tensor::from_vec(xv.shape(), dx));
        }
        if want_w {
            self.acc(grads, w, Tensor::from_vec(wv.shape(), dw));
        }
        if let Some(b) = b {
            if self.wants(b) {
                let plane = ho * wo;
                let db: Vec<f64> = (0..co)
                    .map(|c| (0..n).map(|s| gy.data()[(s * co + c) * plane..(s * co + c + 1) * plane].iter().sum::<f64>()).sum())
                    .collect();
                self.acc(grads, b, Tensor::from_vec(&[co], db));
            }
        }
    }

    fn bmm_backward(&self, a: Var, b: Var, ta: bool, tb: bool, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let av = self.value(a);
        let bv = self.value(b);
        let (batch, ra, ca) = mat_dims(av.shape());
        let (_, rb, cb) = mat_dims(bv.shape());
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let n = if tb { rb } else { cb };
        if self.wants(a) {
            let mut da = vec![0.0; av.numel()];
            for i in 0..batch {
                // d op(A) = gC · op(B)ᵀ, written through op's layout
                let out_view = if ta { MatView { rows: m, cols: k, rs: 1, cs: m } } else { MatView::row_major(m, k) };
                let bview = if tb { MatView::row_major(n, k) } else { MatView::transposed(k, n) };
                gemm(
                    1.0,
                    &gy.data()[i * m * n..(i + 1) * m * n],
                    MatView::row_major(m, n),
                    &bv.data()[i * rb * cb..(i + 1) * rb * cb],
                    bview,
                    0.0,
                    &mut da[i * ra * ca..(i + 1) * ra * ca],
                    out_view,
                );
            }
            self.acc(grads, a, Tensor::from_vec(av.shape(), da));
        }
        if self.wants(b) {
            let mut db = vec![0.0; bv.numel()];
            for i in 0..batch {
                // d op(B) = op(A)ᵀ · gC
                let out_view = if tb { MatView { rows: k, cols: n, rs: 1, cs: k } } else { MatView::row_major(k, n) };
                let aview = if ta { MatView::row_major(k, m) } else { MatView::transposed(m, k) };
                gemm(
                    1.0,
                    &av.data()[i * ra * ca..(i + 1) * ra * ca],
                    aview,
                    &gy.data()[i * m * n..(i + 1) * m * n],
                    MatView::row_major(m, n),
                    0.0,
                    &mut db[i * rb * cb..(i + 1) * rb * cb],
                    out_view,
                );
            }
            self.acc(grads, b, Tensor::from_vec(bv.shape(), db));
        }
    }
}
