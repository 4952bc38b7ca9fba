//! Define-by-run tape and backward rules.
//!
//! A [`Graph`] records one step's dataflow; `backward` walks the tape in
//! reverse creation order (which is a topological order), visiting each node
//! exactly once. Elementwise binaries broadcast the right operand when its
//! shape is a suffix of the left's, i.e. over leading batch axes.

use super::custom::{self, CustomOpId};
use super::kernels::{col2im, conv_out_dim, gemm, im2col};
use super::Tensor;
use crate::rng::randn_vec;
use rand::Rng;
use std::cell::RefCell;
use std::rc::Rc;

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar(f32),
    SubFromScalar,
    PowScalar(f32),
    MaxScalar(f32),
    MinScalar(f32),
    Exp,
    Log,
    Sqrt,
    Sigmoid,
    Tanh,
    Relu,
    Softmax { axis: usize },
    Sum { axis: usize },
    Mean { axis: usize },
    SumAll,
    MeanAll,
    Concat { axis: usize, parts: Vec<usize> },
    Slice { axis: usize, start: usize },
    Reshape,
    Expand,
    MatMul,
    Transpose2,
    Conv2d { stride: usize, pad: usize },
    ConvT2d { stride: usize, pad: usize },
    LayerNorm { eps: f32 },
    ScaleRows,
    OuterSpatial,
    OuterDiff,
    RenderGaussian { h: usize, w: usize, sigma_min: f32 },
    Custom(CustomOpId),
    Bce,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::AddScalar => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::SubFromScalar => "sub_from_scalar",
            Op::PowScalar(_) => "pow_scalar",
            Op::MaxScalar(_) => "max_scalar",
            Op::MinScalar(_) => "min_scalar",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Softmax { .. } => "softmax",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SumAll => "sum_all",
            Op::MeanAll => "mean_all",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape => "reshape",
            Op::Expand => "expand",
            Op::MatMul => "matmul",
            Op::Transpose2 => "transpose2",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvT2d { .. } => "conv2d_transposed",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ScaleRows => "scale_rows",
            Op::OuterSpatial => "outer_spatial",
            Op::OuterDiff => "outer_diff",
            Op::RenderGaussian { .. } => "render_gaussian",
            Op::Custom(id) => custom::op_name(*id),
            Op::Bce => "bce",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    out: Rc<Vec<f32>>,
    shape: Vec<usize>,
    needs: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

/// Dynamic differentiation tape. One per step; single-threaded.
pub struct Graph {
    inner: RefCell<Inner>,
    recording: bool,
}

impl Graph {
    /// A recording graph for training.
    pub fn new() -> Self {
        Graph { inner: RefCell::new(Inner::default()), recording: true }
    }

    /// Value-only evaluation: ops compute without recording, tensors carry
    /// no nodes and `backward` is unavailable.
    pub fn inference() -> Self {
        Graph { inner: RefCell::new(Inner::default()), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Registers a tensor as a leaf. With `requires_grad`, gradients are
    /// retained and queryable after `backward`.
    pub fn leaf(&self, t: &Tensor, requires_grad: bool) -> Tensor {
        if !self.recording {
            return t.detach();
        }
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            out: t.data_rc(),
            shape: t.shape().to_vec(),
            needs: requires_grad,
        });
        Tensor::with_node(t.data_rc(), t.shape().to_vec(), Some(id))
    }

    /// Node id of `t`, wrapping plain values as constant leaves.
    fn src(&self, t: &Tensor) -> NodeId {
        if let Some(id) = t.node() {
            return id;
        }
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            out: t.data_rc(),
            shape: t.shape().to_vec(),
            needs: false,
        });
        id
    }

    fn push(&self, op: Op, inputs: &[&Tensor], data: Vec<f32>, shape: Vec<usize>) -> Tensor {
        let out = Rc::new(data);
        if !self.recording {
            return Tensor::with_node(out, shape, None);
        }
        let ids: Vec<NodeId> = inputs.iter().map(|t| self.src(t)).collect();
        let mut inner = self.inner.borrow_mut();
        let needs = ids.iter().any(|&i| inner.nodes[i].needs);
        let id = inner.nodes.len();
        inner.nodes.push(Node { op, inputs: ids, out: Rc::clone(&out), shape: shape.clone(), needs });
        Tensor::with_node(out, shape, Some(id))
    }

    // ── Elementwise binaries (rhs broadcast over leading axes) ─────────

    fn binary(&self, op: Op, a: &Tensor, b: &Tensor) -> Tensor {
        let reps = broadcast_reps(a.shape(), b.shape()).unwrap_or_else(|| {
            panic!("{}: shapes do not conform: lhs {:?}, rhs {:?}", op.name(), a.shape(), b.shape())
        });
        let bn = b.numel();
        let (ad, bd) = (a.data(), b.data());
        let mut out = Vec::with_capacity(a.numel());
        for r in 0..reps {
            let base = r * bn;
            for j in 0..bn {
                let (x, y) = (ad[base + j], bd[j]);
                out.push(match op {
                    Op::Add => x + y,
                    Op::Sub => x - y,
                    Op::Mul => x * y,
                    Op::Div => x / y,
                    _ => unreachable!(),
                });
            }
        }
        let shape = a.shape().to_vec();
        self.push(op, &[a, b], out, shape)
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Tensor {
        self.binary(Op::Add, a, b)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Tensor {
        self.binary(Op::Sub, a, b)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Tensor {
        self.binary(Op::Mul, a, b)
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Tensor {
        self.binary(Op::Div, a, b)
    }

    // ── Scalar and unary ops ────────────────────────────────────────────

    fn map(&self, op: Op, x: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
        let out: Vec<f32> = x.data().iter().map(|&v| f(v)).collect();
        let shape = x.shape().to_vec();
        self.push(op, &[x], out, shape)
    }

    pub fn add_scalar(&self, x: &Tensor, c: f32) -> Tensor {
        self.map(Op::AddScalar, x, |v| v + c)
    }

    pub fn mul_scalar(&self, x: &Tensor, c: f32) -> Tensor {
        self.map(Op::MulScalar(c), x, |v| v * c)
    }

    /// c - x elementwise.
    pub fn sub_from_scalar(&self, c: f32, x: &Tensor) -> Tensor {
        self.map(Op::SubFromScalar, x, |v| c - v)
    }

    pub fn pow_scalar(&self, x: &Tensor, p: f32) -> Tensor {
        self.map(Op::PowScalar(p), x, |v| v.powf(p))
    }

    pub fn max_scalar(&self, x: &Tensor, c: f32) -> Tensor {
        self.map(Op::MaxScalar(c), x, |v| v.max(c))
    }

    pub fn min_scalar(&self, x: &Tensor, c: f32) -> Tensor {
        self.map(Op::MinScalar(c), x, |v| v.min(c))
    }

    pub fn clamp(&self, x: &Tensor, lo: f32, hi: f32) -> Tensor {
        self.min_scalar(&self.max_scalar(x, lo), hi)
    }

    pub fn exp(&self, x: &Tensor) -> Tensor {
        self.map(Op::Exp, x, f32::exp)
    }

    pub fn log(&self, x: &Tensor) -> Tensor {
        self.map(Op::Log, x, f32::ln)
    }

    pub fn sqrt(&self, x: &Tensor) -> Tensor {
        self.map(Op::Sqrt, x, f32::sqrt)
    }

    pub fn sigmoid(&self, x: &Tensor) -> Tensor {
        self.map(Op::Sigmoid, x, stable_sigmoid)
    }

    pub fn tanh(&self, x: &Tensor) -> Tensor {
        self.map(Op::Tanh, x, f32::tanh)
    }

    pub fn relu(&self, x: &Tensor) -> Tensor {
        self.map(Op::Relu, x, |v| v.max(0.0))
    }

    pub fn neg(&self, x: &Tensor) -> Tensor {
        self.mul_scalar(x, -1.0)
    }

    /// Unary op with a registered custom pseudo-derivative.
    pub fn custom(&self, x: &Tensor, id: CustomOpId) -> Tensor {
        let mut out = vec![0.0; x.numel()];
        custom::apply_forward(id, x.data(), &mut out);
        let shape = x.shape().to_vec();
        self.push(Op::Custom(id), &[x], out, shape)
    }

    pub fn rectified_tanh(&self, x: &Tensor) -> Tensor {
        self.custom(x, custom::custom_op_id("rectified_tanh").unwrap())
    }

    pub fn heaviside(&self, x: &Tensor) -> Tensor {
        self.custom(x, custom::custom_op_id("heaviside").unwrap())
    }

    /// x + std * eps with eps ~ N(0,1) drawn now; backward is the identity.
    pub fn gauss_noise(&self, x: &Tensor, std: f32, rng: &mut impl Rng) -> Tensor {
        let eps = randn_vec(rng, x.numel());
        let noise = Tensor::new(eps.iter().map(|&e| e * std).collect(), x.shape());
        self.add(x, &noise)
    }

    // ── Softmax and reductions ──────────────────────────────────────────

    pub fn softmax(&self, x: &Tensor, axis: usize) -> Tensor {
        let rank = x.shape().len();
        if axis >= rank {
            panic!("softmax: axis {axis} out of range for rank {rank} tensor {:?}", x.shape());
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![0.0f32; x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mut m = f32::NEG_INFINITY;
                for j in 0..n {
                    m = m.max(xd[idx(j)]);
                }
                let mut z = 0.0f64;
                for j in 0..n {
                    let e = (xd[idx(j)] - m).exp();
                    out[idx(j)] = e;
                    z += e as f64;
                }
                let inv = (1.0 / z) as f32;
                for j in 0..n {
                    out[idx(j)] *= inv;
                }
            }
        }
        let shape = x.shape().to_vec();
        self.push(Op::Softmax { axis }, &[x], out, shape)
    }

    pub fn sum_axis(&self, x: &Tensor, axis: usize) -> Tensor {
        self.reduce(x, axis, false)
    }

    pub fn mean_axis(&self, x: &Tensor, axis: usize) -> Tensor {
        self.reduce(x, axis, true)
    }

    fn reduce(&self, x: &Tensor, axis: usize, mean: bool) -> Tensor {
        let rank = x.shape().len();
        if axis >= rank {
            panic!("reduce: axis {axis} out of range for rank {rank} tensor {:?}", x.shape());
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0f64;
                for j in 0..n {
                    acc += xd[(o * n + j) * inner + i] as f64;
                }
                if mean {
                    acc /= n as f64;
                }
                out[o * inner + i] = acc as f32;
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let op = if mean { Op::Mean { axis } } else { Op::Sum { axis } };
        self.push(op, &[x], out, shape)
    }

    pub fn sum_all(&self, x: &Tensor) -> Tensor {
        let acc: f64 = x.data().iter().map(|&v| v as f64).sum();
        self.push(Op::SumAll, &[x], vec![acc as f32], vec![1])
    }

    pub fn mean_all(&self, x: &Tensor) -> Tensor {
        let acc: f64 = x.data().iter().map(|&v| v as f64).sum();
        self.push(Op::MeanAll, &[x], vec![(acc / x.numel() as f64) as f32], vec![1])
    }

    // ── Shape ops ───────────────────────────────────────────────────────

    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat: no inputs");
        let rank = parts[0].shape().len();
        if axis >= rank {
            panic!("concat: axis {axis} out of range for rank {rank}");
        }
        for p in parts {
            assert_eq!(p.shape().len(), rank, "concat: rank mismatch {:?} vs {:?}", parts[0].shape(), p.shape());
            for d in 0..rank {
                if d != axis && p.shape()[d] != parts[0].shape()[d] {
                    panic!("concat: shapes do not conform off-axis: {:?} vs {:?}", parts[0].shape(), p.shape());
                }
            }
        }
        let (outer, _, inner) = split_axis(parts[0].shape(), axis);
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut out = vec![0.0f32; outer * total * inner];
        for o in 0..outer {
            let mut off = 0;
            for (p, &sz) in parts.iter().zip(&sizes) {
                let pd = p.data();
                let src = &pd[o * sz * inner..(o + 1) * sz * inner];
                let dst_start = (o * total + off) * inner;
                out[dst_start..dst_start + sz * inner].copy_from_slice(src);
                off += sz;
            }
        }
        let mut shape = parts[0].shape().to_vec();
        shape[axis] = total;
        self.push(Op::Concat { axis, parts: sizes }, &parts.to_vec(), out, shape)
    }

    pub fn slice(&self, x: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
        let rank = x.shape().len();
        if axis >= rank {
            panic!("slice: axis {axis} out of range for rank {rank}");
        }
        let n = x.shape()[axis];
        assert!(start + len <= n, "slice: [{start}, {}) out of bounds for axis size {n}", start + len);
        let (outer, _, inner) = split_axis(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![0.0f32; outer * len * inner];
        for o in 0..outer {
            let src = &xd[(o * n + start) * inner..(o * n + start + len) * inner];
            out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        self.push(Op::Slice { axis, start }, &[x], out, shape)
    }

    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, x.numel(), "reshape: {:?} -> {:?} changes element count", x.shape(), shape);
        self.push(Op::Reshape, &[x], x.data().to_vec(), shape.to_vec())
    }

    /// Repeats x along a new leading axis of size k.
    pub fn expand_leading(&self, x: &Tensor, k: usize) -> Tensor {
        let mut out = Vec::with_capacity(k * x.numel());
        for _ in 0..k {
            out.extend_from_slice(x.data());
        }
        let mut shape = vec![k];
        shape.extend_from_slice(x.shape());
        self.push(Op::Expand, &[x], out, shape)
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// a [.., M, K] @ b [K, N] -> [.., M, N]; leading axes of a are batch.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Tensor {
        let ar = a.shape().len();
        assert!(ar >= 2 && b.shape().len() == 2, "matmul: need lhs rank>=2 and rhs rank 2, got {:?} @ {:?}", a.shape(), b.shape());
        let m = a.shape()[ar - 2];
        let k = a.shape()[ar - 1];
        let (bk, n) = (b.shape()[0], b.shape()[1]);
        if k != bk {
            panic!("matmul: inner dimensions do not match: lhs {:?}, rhs {:?}", a.shape(), b.shape());
        }
        let batch: usize = a.shape()[..ar - 2].iter().product();
        let mut out = vec![0.0f32; batch * m * n];
        for t in 0..batch {
            gemm(m, k, n, &a.data()[t * m * k..(t + 1) * m * k], b.data(), 0.0, &mut out[t * m * n..(t + 1) * m * n]);
        }
        let mut shape = a.shape()[..ar - 2].to_vec();
        shape.push(m);
        shape.push(n);
        self.push(Op::MatMul, &[a, b], out, shape)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.shape().len(), 2, "transpose2: need rank 2, got {:?}", x.shape());
        let (m, n) = (x.shape()[0], x.shape()[1]);
        let xd = x.data();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        self.push(Op::Transpose2, &[x], out, vec![n, m])
    }

    /// x [B, C, H, W] * w [OC, C, KH, KW] (+ bias [OC]) with zero padding.
    pub fn conv2d(&self, x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
        assert!(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2, got {stride}");
        let (b, c, h, wd) = rank4(x.shape(), "conv2d input");
        let (oc, wc, kh, kw) = rank4(w.shape(), "conv2d kernel");
        if c != wc {
            panic!("conv2d: shapes do not conform: input {:?}, kernel {:?}", x.shape(), w.shape());
        }
        let oh = conv_out_dim(h, kh, stride, pad);
        let ow = conv_out_dim(wd, kw, stride, pad);
        let mut out = vec![0.0f32; b * oc * oh * ow];
        let mut cols = vec![0.0f32; c * kh * kw * oh * ow];
        for t in 0..b {
            im2col(&x.data()[t * c * h * wd..(t + 1) * c * h * wd], c, h, wd, kh, kw, stride, pad, &mut cols);
            gemm(oc, c * kh * kw, oh * ow, w.data(), &cols, 0.0, &mut out[t * oc * oh * ow..(t + 1) * oc * oh * ow]);
            if let Some(bs) = bias {
                assert_eq!(bs.numel(), oc, "conv2d: bias length {} != out channels {oc}", bs.numel());
                let block = &mut out[t * oc * oh * ow..(t + 1) * oc * oh * ow];
                for o in 0..oc {
                    let bv = bs.data()[o];
                    for v in &mut block[o * oh * ow..(o + 1) * oh * ow] {
                        *v += bv;
                    }
                }
            }
        }
        let shape = vec![b, oc, oh, ow];
        match bias {
            Some(bs) => self.push(Op::Conv2d { stride, pad }, &[x, w, bs], out, shape),
            None => self.push(Op::Conv2d { stride, pad }, &[x, w], out, shape),
        }
    }

    /// Transposed convolution: x [B, IC, H, W] * w [IC, OC, KH, KW].
    /// Output spatial size is (H-1)*stride - 2*pad + KH.
    pub fn conv2d_transposed(&self, x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
        assert!(stride == 1 || stride == 2, "conv2d_transposed: stride must be 1 or 2, got {stride}");
        let (b, ic, h, wd) = rank4(x.shape(), "conv2d_transposed input");
        let (wic, oc, kh, kw) = rank4(w.shape(), "conv2d_transposed kernel");
        if ic != wic {
            panic!("conv2d_transposed: shapes do not conform: input {:?}, kernel {:?}", x.shape(), w.shape());
        }
        let oh = (h - 1) * stride + kh - 2 * pad;
        let ow = (wd - 1) * stride + kw - 2 * pad;
        let mut out = vec![0.0f32; b * oc * oh * ow];
        let mut cols = vec![0.0f32; oc * kh * kw * h * wd];
        for t in 0..b {
            // cols = w^T [OC*KH*KW, IC] @ x [IC, H*W]
            gemm_at_b(ic, oc * kh * kw, h * wd, w.data(), &x.data()[t * ic * h * wd..(t + 1) * ic * h * wd], &mut cols);
            let dst = &mut out[t * oc * oh * ow..(t + 1) * oc * oh * ow];
            col2im(&cols, oc, oh, ow, kh, kw, stride, pad, dst);
            if let Some(bs) = bias {
                assert_eq!(bs.numel(), oc, "conv2d_transposed: bias length {} != out channels {oc}", bs.numel());
                for o in 0..oc {
                    let bv = bs.data()[o];
                    for v in &mut dst[o * oh * ow..(o + 1) * oh * ow] {
                        *v += bv;
                    }
                }
            }
        }
        let shape = vec![b, oc, oh, ow];
        match bias {
            Some(bs) => self.push(Op::ConvT2d { stride, pad }, &[x, w, bs], out, shape),
            None => self.push(Op::ConvT2d { stride, pad }, &[x, w], out, shape),
        }
    }

    /// Per-row layer norm over the last axis with learned gain and bias.
    pub fn layer_norm(&self, x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Tensor {
        let rank = x.shape().len();
        assert!(rank >= 1, "layer_norm: rank 0");
        let d = x.shape()[rank - 1];
        assert_eq!(gain.numel(), d, "layer_norm: gain length {} != {d}", gain.numel());
        assert_eq!(bias.numel(), d, "layer_norm: bias length {} != {d}", bias.numel());
        let rows = x.numel() / d;
        let xd = x.data();
        let mut out = vec![0.0f32; x.numel()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps as f64).sqrt();
            for j in 0..d {
                let xn = ((row[j] as f64 - mu) * inv) as f32;
                out[r * d + j] = xn * gain.data()[j] + bias.data()[j];
            }
        }
        let shape = x.shape().to_vec();
        self.push(Op::LayerNorm { eps }, &[x, gain, bias], out, shape)
    }

    // ── Structured products ─────────────────────────────────────────────

    /// Scales each leading-index slice of x by the matching scalar in s.
    /// x: [K, ...], s: K elements.
    pub fn scale_rows(&self, x: &Tensor, s: &Tensor) -> Tensor {
        let k = x.shape()[0];
        assert_eq!(s.numel(), k, "scale_rows: scale count {} != leading dim {k}", s.numel());
        let stride = x.numel() / k;
        let mut out = vec![0.0f32; x.numel()];
        for r in 0..k {
            let sv = s.data()[r];
            for j in 0..stride {
                out[r * stride + j] = x.data()[r * stride + j] * sv;
            }
        }
        let shape = x.shape().to_vec();
        self.push(Op::ScaleRows, &[x, s], out, shape)
    }

    /// Per-pixel outer product: q [K, H, W] x v [K, D] -> [K, D, H, W].
    pub fn outer_spatial(&self, q: &Tensor, v: &Tensor) -> Tensor {
        assert_eq!(q.shape().len(), 3, "outer_spatial: q must be [K,H,W], got {:?}", q.shape());
        assert_eq!(v.shape().len(), 2, "outer_spatial: v must be [K,D], got {:?}", v.shape());
        let (k, h, w) = (q.shape()[0], q.shape()[1], q.shape()[2]);
        assert_eq!(v.shape()[0], k, "outer_spatial: slot counts differ: {:?} vs {:?}", q.shape(), v.shape());
        let d = v.shape()[1];
        let hw = h * w;
        let mut out = vec![0.0f32; k * d * hw];
        for s in 0..k {
            let qp = &q.data()[s * hw..(s + 1) * hw];
            for c in 0..d {
                let val = v.data()[s * d + c];
                let dst = &mut out[(s * d + c) * hw..(s * d + c + 1) * hw];
                for (dv, &qv) in dst.iter_mut().zip(qp) {
                    *dv = qv * val;
                }
            }
        }
        self.push(Op::OuterSpatial, &[q, v], out, vec![k, d, h, w])
    }

    /// Pairwise differences a[i] - b[j] -> [len(a), len(b)].
    pub fn outer_diff(&self, a: &Tensor, b: &Tensor) -> Tensor {
        let (m, n) = (a.numel(), b.numel());
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = a.data()[i] - b.data()[j];
            }
        }
        self.push(Op::OuterDiff, &[a, b], out, vec![m, n])
    }

    /// Isotropic Gaussian maps on an h x w grid with pixel coordinates
    /// normalized to [-1, 1]. mu: [K, 2] as (x, y); sigma: K values,
    /// clamped below by sigma_min.
    pub fn render_gaussian(&self, mu: &Tensor, sigma: &Tensor, h: usize, w: usize, sigma_min: f32) -> Tensor {
        assert!(h >= 2 && w >= 2, "render_gaussian: grid must be at least 2x2, got {h}x{w}");
        assert_eq!(mu.shape().len(), 2, "render_gaussian: mu must be [K,2], got {:?}", mu.shape());
        assert_eq!(mu.shape()[1], 2, "render_gaussian: mu must be [K,2], got {:?}", mu.shape());
        let k = mu.shape()[0];
        assert_eq!(sigma.numel(), k, "render_gaussian: sigma count {} != slots {k}", sigma.numel());
        let mut out = vec![0.0f32; k * h * w];
        for s in 0..k {
            let mx = mu.data()[s * 2];
            let my = mu.data()[s * 2 + 1];
            let se = sigma.data()[s].max(sigma_min);
            let denom = 2.0 * se * se;
            for i in 0..h {
                let py = grid_coord(i, h);
                for j in 0..w {
                    let px = grid_coord(j, w);
                    let d2 = (px - mx) * (px - mx) + (py - my) * (py - my);
                    out[(s * h + i) * w + j] = (-d2 / denom).exp();
                }
            }
        }
        self.push(Op::RenderGaussian { h, w, sigma_min }, &[mu, sigma], out, vec![k, h, w])
    }

    /// Mean binary cross entropy with predictions clamped to
    /// [1e-6, 1 - 1e-6].
    pub fn bce(&self, pred: &Tensor, target: &Tensor) -> Tensor {
        if pred.shape() != target.shape() {
            panic!("bce: shapes do not conform: pred {:?}, target {:?}", pred.shape(), target.shape());
        }
        let mut acc = 0.0f64;
        for (&p, &y) in pred.data().iter().zip(target.data()) {
            let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS) as f64;
            let y = y as f64;
            acc -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        let out = vec![(acc / pred.numel() as f64) as f32];
        self.push(Op::Bce, &[pred, target], out, vec![1])
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Each node is visited once, in
    /// reverse creation order.
    pub fn backward(&self, loss: &Tensor) {
        assert!(self.recording, "backward on a non-recording graph");
        let root = loss.node().expect("backward: loss has no node on this graph");
        assert_eq!(loss.numel(), 1, "backward: loss must be scalar, got {:?}", loss.shape());
        let mut inner = self.inner.borrow_mut();
        let n = inner.nodes.len();
        inner.grads = vec![None; n];
        inner.grads[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            if !inner.nodes[id].needs {
                continue;
            }
            let Some(g) = inner.grads[id].take() else { continue };
            backprop(&mut inner, id, &g);
            inner.grads[id] = Some(g);
        }
    }

    /// Gradient of a leaf or intermediate tensor after `backward`.
    pub fn grad(&self, t: &Tensor) -> Option<Tensor> {
        let id = t.node()?;
        let inner = self.inner.borrow();
        inner.grads.get(id)?.as_ref().map(|g| Tensor::new(g.clone(), t.shape()))
    }

    /// Adds the gradient of `t` into `out` (no-op when absent).
    pub fn grad_into(&self, t: &Tensor, out: &mut [f32]) {
        if let Some(id) = t.node() {
            let inner = self.inner.borrow();
            if let Some(Some(g)) = inner.grads.get(id) {
                for (o, &v) in out.iter_mut().zip(g) {
                    *o += v;
                }
            }
        }
    }

    /// Index of the first non-finite forward value, with its op name.
    pub fn find_non_finite(&self) -> Option<(usize, &'static str)> {
        let inner = self.inner.borrow();
        for (i, node) in inner.nodes.iter().enumerate() {
            if node.out.iter().any(|v| !v.is_finite()) {
                return Some((i, node.op.name()));
            }
        }
        None
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

const BCE_EPS: f32 = 1e-6;

fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Normalized grid coordinate in [-1, 1] for index i of n (n >= 2).
pub fn grid_coord(i: usize, n: usize) -> f32 {
    -1.0 + 2.0 * i as f32 / (n - 1) as f32
}

/// How many copies of rhs tile into lhs (rhs shape must equal a suffix of
/// lhs shape). None when the shapes do not conform.
fn broadcast_reps(lhs: &[usize], rhs: &[usize]) -> Option<usize> {
    if rhs.len() > lhs.len() {
        return None;
    }
    let off = lhs.len() - rhs.len();
    if lhs[off..] != rhs[..] {
        // Allow scalar rhs.
        if rhs == [1] {
            return Some(lhs.iter().product());
        }
        return None;
    }
    Some(lhs[..off].iter().product())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

fn rank4(shape: &[usize], what: &str) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "{what} must be rank 4, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

/// a^T @ b for row-major a [K, M], b [K, N] -> out [M, N].
fn gemm_at_b(k: usize, m: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), 1, m as isize, b.as_ptr(), n as isize, 1, 0.0, out.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// a @ b^T for row-major a [M, K], b [N, K] -> out [M, N], accumulating.
fn gemm_a_bt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, 1.0, out.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Sums g (shape reps x n) over its leading tiles into an n-element buffer,
/// accumulating in f64.
fn reduce_to_suffix(g: &[f32], n: usize, acc: &mut [f32]) {
    let reps = g.len() / n;
    for j in 0..n {
        let mut s = 0.0f64;
        for r in 0..reps {
            s += g[r * n + j] as f64;
        }
        acc[j] += s as f32;
    }
}

fn ensure_grad(grads: &mut Vec<Option<Vec<f32>>>, id: usize, numel: usize) -> &mut Vec<f32> {
    grads[id].get_or_insert_with(|| vec![0.0; numel])
}

#[allow(clippy::too_many_lines)]
fn backprop(inner: &mut Inner, id: usize, g: &[f32]) {
    // Split borrows: clone the light parts of the node up front.
    let op = inner.nodes[id].op.clone();
    let inputs = inner.nodes[id].inputs.clone();
    let out = Rc::clone(&inner.nodes[id].out);
    let out_shape = inner.nodes[id].shape.clone();
    let needs = |inner: &Inner, slot: usize| -> bool {
        inputs.get(slot).map(|&i| inner.nodes[i].needs).unwrap_or(false)
    };
    let in_data = |inner: &Inner, slot: usize| -> Rc<Vec<f32>> { Rc::clone(&inner.nodes[inputs[slot]].out) };
    let in_shape = |inner: &Inner, slot: usize| -> Vec<usize> { inner.nodes[inputs[slot]].shape.clone() };

    match op {
        Op::Leaf => {}
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let a = in_data(inner, 0);
            let b = in_data(inner, 1);
            let bn = b.len();
            if needs(inner, 0) {
                let ga = ensure_grad(&mut inner.grads, inputs[0], a.len());
                match op {
                    Op::Add => {
                        for (x, &u) in ga.iter_mut().zip(g) {
                            *x += u;
                        }
                    }
                    Op::Sub => {
                        for (x, &u) in ga.iter_mut().zip(g) {
                            *x += u;
                        }
                    }
                    Op::Mul => {
                        for (i, x) in ga.iter_mut().enumerate() {
                            *x += g[i] * b[i % bn];
                        }
                    }
                    Op::Div => {
                        for (i, x) in ga.iter_mut().enumerate() {
                            *x += g[i] / b[i % bn];
                        }
                    }
                    _ => unreachable!(),
                }
            }
            if needs(inner, 1) {
                let mut tmp = vec![0.0f32; bn];
                match op {
                    Op::Add => reduce_to_suffix(g, bn, &mut tmp),
                    Op::Sub => {
                        reduce_to_suffix(g, bn, &mut tmp);
                        for v in &mut tmp {
                            *v = -*v;
                        }
                    }
                    Op::Mul => {
                        let prod: Vec<f32> = g.iter().enumerate().map(|(i, &u)| u * a[i]).collect();
                        reduce_to_suffix(&prod, bn, &mut tmp);
                    }
                    Op::Div => {
                        let prod: Vec<f32> =
                            g.iter().enumerate().map(|(i, &u)| -u * a[i] / (b[i % bn] * b[i % bn])).collect();
                        reduce_to_suffix(&prod, bn, &mut tmp);
                    }
                    _ => unreachable!(),
                }
                let gb = ensure_grad(&mut inner.grads, inputs[1], bn);
                for (x, v) in gb.iter_mut().zip(tmp) {
                    *x += v;
                }
            }
        }
        Op::AddScalar => unary_bwd(inner, &inputs, &out, g, |_, _, u| u),
        Op::MulScalar(c) => unary_bwd(inner, &inputs, &out, g, |_, _, u| c * u),
        Op::SubFromScalar => unary_bwd(inner, &inputs, &out, g, |_, _, u| -u),
        Op::PowScalar(p) => unary_bwd(inner, &inputs, &out, g, |x, _, u| {
            if x == 0.0 && p < 1.0 {
                0.0
            } else {
                u * p * x.powf(p - 1.0)
            }
        }),
        Op::MaxScalar(c) => unary_bwd(inner, &inputs, &out, g, |x, _, u| if x > c { u } else { 0.0 }),
        Op::MinScalar(c) => unary_bwd(inner, &inputs, &out, g, |x, _, u| if x < c { u } else { 0.0 }),
        Op::Exp => unary_bwd(inner, &inputs, &out, g, |_, y, u| u * y),
        Op::Log => unary_bwd(inner, &inputs, &out, g, |x, _, u| u / x),
        Op::Sqrt => unary_bwd(inner, &inputs, &out, g, |x, y, u| if x == 0.0 { 0.0 } else { u * 0.5 / y }),
        Op::Sigmoid => unary_bwd(inner, &inputs, &out, g, |_, y, u| u * y * (1.0 - y)),
        Op::Tanh => unary_bwd(inner, &inputs, &out, g, |_, y, u| u * (1.0 - y * y)),
        Op::Relu => unary_bwd(inner, &inputs, &out, g, |x, _, u| if x > 0.0 { u } else { 0.0 }),
        Op::Custom(cid) => {
            if needs(inner, 0) {
                let x = in_data(inner, 0);
                let gx = ensure_grad(&mut inner.grads, inputs[0], x.len());
                custom::apply_pseudo(cid, &x, g, gx);
            }
        }
        Op::Softmax { axis } => {
            if needs(inner, 0) {
                let (outer, n, inner_sz) = split_axis(&out_shape, axis);
                let gx = ensure_grad(&mut inner.grads, inputs[0], out.len());
                for o in 0..outer {
                    for i in 0..inner_sz {
                        let idx = |j: usize| (o * n + j) * inner_sz + i;
                        let mut dot = 0.0f64;
                        for j in 0..n {
                            dot += (g[idx(j)] * out[idx(j)]) as f64;
                        }
                        for j in 0..n {
                            gx[idx(j)] += out[idx(j)] * (g[idx(j)] - dot as f32);
                        }
                    }
                }
            }
        }
        Op::Sum { axis } | Op::Mean { axis } => {
            if needs(inner, 0) {
                let xs = in_shape(inner, 0);
                let (outer, n, inner_sz) = split_axis(&xs, axis);
                let scale = if matches!(op, Op::Mean { .. }) { 1.0 / n as f32 } else { 1.0 };
                let gx = ensure_grad(&mut inner.grads, inputs[0], outer * n * inner_sz);
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner_sz {
                            gx[(o * n + j) * inner_sz + i] += g[o * inner_sz + i] * scale;
                        }
                    }
                }
            }
        }
        Op::SumAll | Op::MeanAll => {
            if needs(inner, 0) {
                let numel = in_data(inner, 0).len();
                let scale = if matches!(op, Op::MeanAll) { 1.0 / numel as f32 } else { 1.0 };
                let gx = ensure_grad(&mut inner.grads, inputs[0], numel);
                let u = g[0] * scale;
                for v in gx.iter_mut() {
                    *v += u;
                }
            }
        }
        Op::Concat { axis, parts } => {
            let (outer, total, inner_sz) = split_axis(&out_shape, axis);
            let mut off = 0;
            for (slot, &sz) in parts.iter().enumerate() {
                if needs(inner, slot) {
                    let gx = ensure_grad(&mut inner.grads, inputs[slot], outer * sz * inner_sz);
                    for o in 0..outer {
                        let src = &g[(o * total + off) * inner_sz..(o * total + off + sz) * inner_sz];
                        let dst = &mut gx[o * sz * inner_sz..(o + 1) * sz * inner_sz];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                off += sz;
            }
        }
        Op::Slice { axis, start } => {
            if needs(inner, 0) {
                let xs = in_shape(inner, 0);
                let (outer, n, inner_sz) = split_axis(&xs, axis);
                let len = out_shape[axis];
                let gx = ensure_grad(&mut inner.grads, inputs[0], outer * n * inner_sz);
                for o in 0..outer {
                    let dst = &mut gx[(o * n + start) * inner_sz..(o * n + start + len) * inner_sz];
                    let src = &g[o * len * inner_sz..(o + 1) * len * inner_sz];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
        Op::Reshape => unary_bwd(inner, &inputs, &out, g, |_, _, u| u),
        Op::Expand => {
            if needs(inner, 0) {
                let numel = in_data(inner, 0).len();
                let gx = ensure_grad(&mut inner.grads, inputs[0], numel);
                for (i, &u) in g.iter().enumerate() {
                    gx[i % numel] += u;
                }
            }
        }
        Op::MatMul => {
            let a = in_data(inner, 0);
            let b = in_data(inner, 1);
            let ashape = in_shape(inner, 0);
            let ar = ashape.len();
            let m = ashape[ar - 2];
            let k = ashape[ar - 1];
            let n = in_shape(inner, 1)[1];
            let batch: usize = ashape[..ar - 2].iter().product();
            if needs(inner, 0) {
                let ga = ensure_grad(&mut inner.grads, inputs[0], a.len());
                for t in 0..batch {
                    gemm_a_bt(m, n, k, &g[t * m * n..(t + 1) * m * n], &b, &mut ga[t * m * k..(t + 1) * m * k]);
                }
            }
            if needs(inner, 1) {
                let gb = ensure_grad(&mut inner.grads, inputs[1], b.len());
                let mut tmp = vec![0.0f32; k * n];
                for t in 0..batch {
                    gemm_at_b(m, k, n, &a[t * m * k..(t + 1) * m * k], &g[t * m * n..(t + 1) * m * n], &mut tmp);
                    for (x, &v) in gb.iter_mut().zip(&tmp) {
                        *x += v;
                    }
                }
            }
        }
        Op::Transpose2 => {
            if needs(inner, 0) {
                let (n, m) = (out_shape[0], out_shape[1]);
                let gx = ensure_grad(&mut inner.grads, inputs[0], m * n);
                for i in 0..n {
                    for j in 0..m {
                        gx[j * n + i] += g[i * m + j];
                    }
                }
            }
        }
        Op::Conv2d { stride, pad } => {
            let x = in_data(inner, 0);
            let w = in_data(inner, 1);
            let xs = in_shape(inner, 0);
            let ws = in_shape(inner, 1);
            let (bsz, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
            let (oc, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
            let (oh, ow) = (out_shape[2], out_shape[3]);
            let ck = c * kh * kw;
            let mut cols = vec![0.0f32; ck * oh * ow];
            let need_x = needs(inner, 0);
            let need_w = needs(inner, 1);
            let need_b = inputs.len() > 2 && needs(inner, 2);
            let mut gw_acc = if need_w { Some(vec![0.0f32; oc * ck]) } else { None };
            let mut gx_acc = if need_x { Some(vec![0.0f32; bsz * c * h * wd]) } else { None };
            let mut dcols = vec![0.0f32; ck * oh * ow];
            for t in 0..bsz {
                let gout = &g[t * oc * oh * ow..(t + 1) * oc * oh * ow];
                if need_w {
                    im2col(&x[t * c * h * wd..(t + 1) * c * h * wd], c, h, wd, kh, kw, stride, pad, &mut cols);
                    gemm_a_bt(oc, oh * ow, ck, gout, &cols, gw_acc.as_mut().unwrap());
                }
                if need_x {
                    gemm_at_b(oc, ck, oh * ow, &w, gout, &mut dcols);
                    col2im(&dcols, c, h, wd, kh, kw, stride, pad, &mut gx_acc.as_mut().unwrap()[t * c * h * wd..(t + 1) * c * h * wd]);
                }
            }
            if let Some(gw) = gw_acc {
                let dst = ensure_grad(&mut inner.grads, inputs[1], oc * ck);
                for (d, v) in dst.iter_mut().zip(gw) {
                    *d += v;
                }
            }
            if let Some(gx) = gx_acc {
                let dst = ensure_grad(&mut inner.grads, inputs[0], gx.len());
                for (d, v) in dst.iter_mut().zip(gx) {
                    *d += v;
                }
            }
            if need_b {
                let gb = ensure_grad(&mut inner.grads, inputs[2], oc);
                for t in 0..bsz {
                    for o in 0..oc {
                        let mut s = 0.0f64;
                        for v in &g[(t * oc + o) * oh * ow..(t * oc + o + 1) * oh * ow] {
                            s += *v as f64;
                        }
                        gb[o] += s as f32;
                    }
                }
            }
        }
        Op::ConvT2d { stride, pad } => {
            let x = in_data(inner, 0);
            let w = in_data(inner, 1);
            let xs = in_shape(inner, 0);
            let ws = in_shape(inner, 1);
            let (bsz, ic, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
            let (_, oc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
            let (oh, ow) = (out_shape[2], out_shape[3]);
            let ck = oc * kh * kw;
            let need_x = needs(inner, 0);
            let need_w = needs(inner, 1);
            let need_b = inputs.len() > 2 && needs(inner, 2);
            let mut gcols = vec![0.0f32; ck * h * wd];
            let mut gw_acc = if need_w { Some(vec![0.0f32; ic * ck]) } else { None };
            let mut gx_acc = if need_x { Some(vec![0.0f32; bsz * ic * h * wd]) } else { None };
            for t in 0..bsz {
                let gout = &g[t * oc * oh * ow..(t + 1) * oc * oh * ow];
                // gcols = im2col(gout) on the output grid
                im2col(gout, oc, oh, ow, kh, kw, stride, pad, &mut gcols);
                if need_x {
                    // dx = w [IC, CK] @ gcols [CK, H*W]
                    gemm(ic, ck, h * wd, &w, &gcols, 1.0, &mut gx_acc.as_mut().unwrap()[t * ic * h * wd..(t + 1) * ic * h * wd]);
                }
                if need_w {
                    // dW [IC, CK] = x [IC, H*W] @ gcols^T [H*W, CK]
                    gemm_a_bt(ic, h * wd, ck, &x[t * ic * h * wd..(t + 1) * ic * h * wd], &gcols, gw_acc.as_mut().unwrap());
                }
            }
            if let Some(gw) = gw_acc {
                let dst = ensure_grad(&mut inner.grads, inputs[1], ic * ck);
                for (d, v) in dst.iter_mut().zip(gw) {
                    *d += v;
                }
            }
            if let Some(gx) = gx_acc {
                let dst = ensure_grad(&mut inner.grads, inputs[0], gx.len());
                for (d, v) in dst.iter_mut().zip(gx) {
                    *d += v;
                }
            }
            if need_b {
                let gb = ensure_grad(&mut inner.grads, inputs[2], oc);
                for t in 0..bsz {
                    for o in 0..oc {
                        let mut s = 0.0f64;
                        for v in &g[(t * oc + o) * oh * ow..(t * oc + o + 1) * oh * ow] {
                            s += *v as f64;
                        }
                        gb[o] += s as f32;
                    }
                }
            }
        }
        Op::LayerNorm { eps } => {
            let x = in_data(inner, 0);
            let gain = in_data(inner, 1);
            let d = in_shape(inner, 1).iter().product::<usize>();
            let rows = x.len() / d;
            let need_x = needs(inner, 0);
            let need_gain = needs(inner, 1);
            let need_bias = needs(inner, 2);
            let mut gx_acc = if need_x { Some(vec![0.0f32; x.len()]) } else { None };
            let mut ggain = if need_gain { Some(vec![0.0f32; d]) } else { None };
            let mut gbias = if need_bias { Some(vec![0.0f32; d]) } else { None };
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let mu: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                let var: f64 = row.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps as f64).sqrt();
                if need_gain || need_bias {
                    for j in 0..d {
                        let xn = ((row[j] as f64 - mu) * inv) as f32;
                        if let Some(gg) = ggain.as_mut() {
                            gg[j] += gr[j] * xn;
                        }
                        if let Some(gb) = gbias.as_mut() {
                            gb[j] += gr[j];
                        }
                    }
                }
                if need_x {
                    let mut mean_gy = 0.0f64;
                    let mut mean_gyxn = 0.0f64;
                    for j in 0..d {
                        let gy = (gr[j] * gain[j]) as f64;
                        let xn = (row[j] as f64 - mu) * inv;
                        mean_gy += gy;
                        mean_gyxn += gy * xn;
                    }
                    mean_gy /= d as f64;
                    mean_gyxn /= d as f64;
                    let gx = gx_acc.as_mut().unwrap();
                    for j in 0..d {
                        let gy = (gr[j] * gain[j]) as f64;
                        let xn = (row[j] as f64 - mu) * inv;
                        gx[r * d + j] += ((gy - mean_gy - xn * mean_gyxn) * inv) as f32;
                    }
                }
            }
            if let Some(v) = gx_acc {
                let dst = ensure_grad(&mut inner.grads, inputs[0], v.len());
                for (d0, s) in dst.iter_mut().zip(v) {
                    *d0 += s;
                }
            }
            if let Some(v) = ggain {
                let dst = ensure_grad(&mut inner.grads, inputs[1], d);
                for (d0, s) in dst.iter_mut().zip(v) {
                    *d0 += s;
                }
            }
            if let Some(v) = gbias {
                let dst = ensure_grad(&mut inner.grads, inputs[2], d);
                for (d0, s) in dst.iter_mut().zip(v) {
                    *d0 += s;
                }
            }
        }
        Op::ScaleRows => {
            let x = in_data(inner, 0);
            let s = in_data(inner, 1);
            let k = s.len();
            let stride = x.len() / k;
            if needs(inner, 0) {
                let gx = ensure_grad(&mut inner.grads, inputs[0], x.len());
                for r in 0..k {
                    let sv = s[r];
                    for j in 0..stride {
                        gx[r * stride + j] += g[r * stride + j] * sv;
                    }
                }
            }
            if needs(inner, 1) {
                let gs = ensure_grad(&mut inner.grads, inputs[1], k);
                for r in 0..k {
                    let mut acc = 0.0f64;
                    for j in 0..stride {
                        acc += (g[r * stride + j] * x[r * stride + j]) as f64;
                    }
                    gs[r] += acc as f32;
                }
            }
        }
        Op::OuterSpatial => {
            let q = in_data(inner, 0);
            let v = in_data(inner, 1);
            let qs = in_shape(inner, 0);
            let (k, h, w) = (qs[0], qs[1], qs[2]);
            let d = in_shape(inner, 1)[1];
            let hw = h * w;
            if needs(inner, 0) {
                let gq = ensure_grad(&mut inner.grads, inputs[0], k * hw);
                for s in 0..k {
                    for c in 0..d {
                        let val = v[s * d + c];
                        let gb = &g[(s * d + c) * hw..(s * d + c + 1) * hw];
                        let dst = &mut gq[s * hw..(s + 1) * hw];
                        for (dv, &gvv) in dst.iter_mut().zip(gb) {
                            *dv += gvv * val;
                        }
                    }
                }
            }
            if needs(inner, 1) {
                let gv = ensure_grad(&mut inner.grads, inputs[1], k * d);
                for s in 0..k {
                    let qp = &q[s * hw..(s + 1) * hw];
                    for c in 0..d {
                        let gb = &g[(s * d + c) * hw..(s * d + c + 1) * hw];
                        let mut acc = 0.0f64;
                        for (&gvv, &qv) in gb.iter().zip(qp) {
                            acc += (gvv * qv) as f64;
                        }
                        gv[s * d + c] += acc as f32;
                    }
                }
            }
        }
        Op::OuterDiff => {
            let m = in_data(inner, 0).len();
            let n = in_data(inner, 1).len();
            if needs(inner, 0) {
                let ga = ensure_grad(&mut inner.grads, inputs[0], m);
                for i in 0..m {
                    let mut acc = 0.0f64;
                    for j in 0..n {
                        acc += g[i * n + j] as f64;
                    }
                    ga[i] += acc as f32;
                }
            }
            if needs(inner, 1) {
                let gb = ensure_grad(&mut inner.grads, inputs[1], n);
                for j in 0..n {
                    let mut acc = 0.0f64;
                    for i in 0..m {
                        acc += g[i * n + j] as f64;
                    }
                    gb[j] -= acc as f32;
                }
            }
        }
        Op::RenderGaussian { h, w, sigma_min } => {
            let mu = in_data(inner, 0);
            let sigma = in_data(inner, 1);
            let k = sigma.len();
            let need_mu = needs(inner, 0);
            let need_sigma = needs(inner, 1);
            let mut gmu = if need_mu { Some(vec![0.0f32; 2 * k]) } else { None };
            let mut gsig = if need_sigma { Some(vec![0.0f32; k]) } else { None };
            for s in 0..k {
                let mx = mu[s * 2];
                let my = mu[s * 2 + 1];
                let se = sigma[s].max(sigma_min);
                let inv2 = 1.0 / (se * se);
                let clamped = sigma[s] <= sigma_min;
                let (mut ax, mut ay, mut asig) = (0.0f64, 0.0f64, 0.0f64);
                for i in 0..h {
                    let py = grid_coord(i, h);
                    for j in 0..w {
                        let px = grid_coord(j, w);
                        let u = g[(s * h + i) * w + j];
                        if u == 0.0 {
                            continue;
                        }
                        let q = out[(s * h + i) * w + j];
                        let dx = px - mx;
                        let dy = py - my;
                        ax += (u * q * dx * inv2) as f64;
                        ay += (u * q * dy * inv2) as f64;
                        if !clamped {
                            asig += (u * q * (dx * dx + dy * dy) * inv2 / se) as f64;
                        }
                    }
                }
                if let Some(gm) = gmu.as_mut() {
                    gm[s * 2] += ax as f32;
                    gm[s * 2 + 1] += ay as f32;
                }
                if let Some(gs) = gsig.as_mut() {
                    gs[s] += asig as f32;
                }
            }
            if let Some(v) = gmu {
                let dst = ensure_grad(&mut inner.grads, inputs[0], 2 * k);
                for (d0, s0) in dst.iter_mut().zip(v) {
                    *d0 += s0;
                }
            }
            if let Some(v) = gsig {
                let dst = ensure_grad(&mut inner.grads, inputs[1], k);
                for (d0, s0) in dst.iter_mut().zip(v) {
                    *d0 += s0;
                }
            }
        }
        Op::Bce => {
            let p = in_data(inner, 0);
            let y = in_data(inner, 1);
            let n = p.len() as f32;
            let u = g[0];
            if needs(inner, 0) {
                let gp = ensure_grad(&mut inner.grads, inputs[0], p.len());
                for i in 0..p.len() {
                    let pv = p[i];
                    if pv < BCE_EPS || pv > 1.0 - BCE_EPS {
                        continue;
                    }
                    gp[i] += u * (pv - y[i]) / (pv * (1.0 - pv)) / n;
                }
            }
            if needs(inner, 1) {
                let gy = ensure_grad(&mut inner.grads, inputs[1], y.len());
                for i in 0..y.len() {
                    let pc = p[i].clamp(BCE_EPS, 1.0 - BCE_EPS);
                    gy[i] += u * ((1.0 - pc).ln() - pc.ln()) / n;
                }
            }
        }
    }
}

/// Backward for unary ops: rule(x, y, upstream) with x the input value and
/// y the op's forward output.
fn unary_bwd(inner: &mut Inner, inputs: &[NodeId], out: &[f32], g: &[f32], f: impl Fn(f32, f32, f32) -> f32) {
    if !inner.nodes[inputs[0]].needs {
        return;
    }
    let x = Rc::clone(&inner.nodes[inputs[0]].out);
    let gx = ensure_grad(&mut inner.grads, inputs[0], x.len());
    for i in 0..x.len() {
        gx[i] += f(x[i], out[i], g[i]);
    }
}
