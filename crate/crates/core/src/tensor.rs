//! Dense-tensor engine with reverse-mode differentiation.
//!
//! Values live in a [`Graph`] arena and are addressed by [`TensorId`]
//! handles. Ops executed on a recording graph append tape nodes; calling
//! [`Graph::backward`] on a scalar loss replays the tape in reverse and
//! accumulates adjoints into every `requires_grad` tensor. A non-recording
//! graph runs the same forward kernels without building a tape.
//!
//! Storage is the generic [`Scalar`] type; reductions (sums, means, softmax
//! denominators, normalization statistics, filter taps) accumulate in `f64`.

use crate::scalar::Scalar;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tensor data length {len} does not match shape {shape:?} ({expected} elements)")]
    LengthMismatch {
        len: usize,
        shape: Vec<usize>,
        expected: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense multi-dimensional array, row-major, with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub grad: Option<Vec<S>>,
    pub requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expected = numel(&shape);
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape,
                expected,
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            data: vec![S::zero(); n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            data: vec![value; n],
            grad: None,
            requires_grad: false,
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_f64_slice(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        let data = values.iter().map(|&v| S::cast(v)).collect();
        Self::new(shape, data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }
}

/// Handle into a [`Graph`] arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// One executed operation, recorded with enough state to replay its adjoint.
enum Node<S> {
    Add { a: TensorId, b: TensorId, out: TensorId },
    Sub { a: TensorId, b: TensorId, out: TensorId },
    Mul { a: TensorId, b: TensorId, out: TensorId },
    MatMul { a: TensorId, b: TensorId, out: TensorId },
    Scale { x: TensorId, c: S, out: TensorId },
    AddScalar { x: TensorId, out: TensorId },
    Abs { x: TensorId, out: TensorId },
    Sigmoid { x: TensorId, out: TensorId },
    Gelu { x: TensorId, out: TensorId },
    Softmax { x: TensorId, axis: usize, out: TensorId },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, mean: Vec<S>, rstd: Vec<S>, out: TensorId },
    GaussianFilter2d { x: TensorId, sigma: f64, out: TensorId },
    BilinearResize { x: TensorId, out: TensorId },
    Transpose { x: TensorId, ax0: usize, ax1: usize, out: TensorId },
    Reshape { x: TensorId, out: TensorId },
    Slice { x: TensorId, axis: usize, start: usize, out: TensorId },
    Concat { xs: Vec<TensorId>, axis: usize, out: TensorId },
    Repeat { x: TensorId, out: TensorId },
    SumAll { x: TensorId, out: TensorId },
    MeanAll { x: TensorId, out: TensorId },
    SumAxis { x: TensorId, axis: usize, out: TensorId },
    CrossEntropy { logits: TensorId, labels: Vec<usize>, out: TensorId },
}

/// Arena of tensors plus the tape of executed operations.
///
/// Recording is explicit: a graph built with [`Graph::recording`] collects
/// tape nodes, one built with [`Graph::inference`] does not. Tensors are
/// immutable once their producing op completes; only the gradient slots are
/// written afterwards, by [`Graph::backward`].
pub struct Graph<S: Scalar> {
    tensors: Vec<Tensor<S>>,
    nodes: Vec<Node<S>>,
    recording: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::recording()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn recording() -> Self {
        Self {
            tensors: Vec::new(),
            nodes: Vec::new(),
            recording: true,
        }
    }

    pub fn inference() -> Self {
        Self {
            tensors: Vec::new(),
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Adds a tensor to the arena as a leaf.
    pub fn value(&mut self, t: Tensor<S>) -> TensorId {
        self.tensors.push(t);
        TensorId(self.tensors.len() - 1)
    }

    /// Leaf with `requires_grad = false` (inputs, frozen weights, constants).
    pub fn constant(&mut self, t: Tensor<S>) -> TensorId {
        let mut t = t;
        t.requires_grad = false;
        self.value(t)
    }

    /// Leaf that participates in differentiation.
    pub fn variable(&mut self, t: Tensor<S>) -> TensorId {
        let mut t = t;
        t.requires_grad = true;
        self.value(t)
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        &self.tensors[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.tensors[id.0].grad.as_deref()
    }

    /// Value of a single-element tensor as f64.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.tensors[id.0].data.len(), 1);
        self.tensors[id.0].data[0].as_f64()
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<S>, requires_grad: bool, node: impl FnOnce(TensorId) -> Node<S>) -> TensorId {
        #[cfg(debug_assertions)]
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by an op on finite inputs"
        );
        let id = self.value(Tensor {
            shape,
            data,
            grad: None,
            requires_grad,
        });
        if self.recording && requires_grad {
            self.nodes.push(node(id));
        }
        id
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.tensors[id.0].requires_grad)
    }

    // ---- elementwise binary ops (numpy-style broadcasting) ----

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_op("add", a, b, |x, y| x + y, |id| Node::Add { a, b, out: id })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_op("sub", a, b, |x, y| x - y, |id| Node::Sub { a, b, out: id })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_op("mul", a, b, |x, y| x * y, |id| Node::Mul { a, b, out: id })
    }

    fn binary_op(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(S, S) -> S,
        node: impl FnOnce(TensorId) -> Node<S>,
    ) -> Result<TensorId> {
        let (ash, bsh) = (&self.tensors[a.0].shape, &self.tensors[b.0].shape);
        let out_shape = broadcast_shapes(name, ash, bsh)?;
        let data = broadcast_map(ash, &self.tensors[a.0].data, bsh, &self.tensors[b.0].data, &out_shape, f);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push_op(out_shape, data, rg, node))
    }

    // ---- matmul ----

    /// Batched matrix product `[..., m, k] x [..., k, n] -> [..., m, n]`.
    /// Batch dimensions must match exactly, or one operand may omit them
    /// entirely (shared weights).
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ash, bsh) = (self.tensors[a.0].shape.clone(), self.tensors[b.0].shape.clone());
        let (out_shape, data) = batched_matmul(&ash, &self.tensors[a.0].data, &bsh, &self.tensors[b.0].data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push_op(out_shape, data, rg, |id| Node::MatMul { a, b, out: id }))
    }

    // ---- elementwise unary ops ----

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let cs = S::cast(c);
        let data: Vec<S> = self.tensors[x.0].data.iter().map(|&v| v * cs).collect();
        let shape = self.tensors[x.0].shape.clone();
        let rg = self.tensors[x.0].requires_grad;
        self.push_op(shape, data, rg, |id| Node::Scale { x, c: cs, out: id })
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        let cs = S::cast(c);
        let data: Vec<S> = self.tensors[x.0].data.iter().map(|&v| v + cs).collect();
        let shape = self.tensors[x.0].shape.clone();
        let rg = self.tensors[x.0].requires_grad;
        self.push_op(shape, data, rg, |id| Node::AddScalar { x, out: id })
    }

    pub fn abs(&mut self, x: TensorId) -> TensorId {
        let data: Vec<S> = self.tensors[x.0].data.iter().map(|&v| v.abs()).collect();
        let shape = self.tensors[x.0].shape.clone();
        let rg = self.tensors[x.0].requires_grad;
        self.push_op(shape, data, rg, |id| Node::Abs { x, out: id })
    }

    /// Elementwise logistic function, overflow-safe on both tails.
    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let data: Vec<S> = self.tensors[x.0].data.iter().map(|&v| sigmoid_scalar(v)).collect();
        let shape = self.tensors[x.0].shape.clone();
        let rg = self.tensors[x.0].requires_grad;
        self.push_op(shape, data, rg, |id| Node::Sigmoid { x, out: id })
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<S> = self.tensors[x.0].data.iter().map(|&v| S::cast(gelu_f64(v.as_f64()))).collect();
        let shape = self.tensors[x.0].shape.clone();
        let rg = self.tensors[x.0].requires_grad;
        self.push_op(shape, data, rg, |id| Node::Gelu { x, out: id })
    }

    // ---- normalization / attention primitives ----

    /// Softmax along `axis`, max-subtracted for stability.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.tensors[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { op: "softmax", axis, rank: shape.len() });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = &self.tensors[x.0].data;
        let mut data = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(src[base + j * inner].as_f64());
                }
                let mut sum = 0.0f64;
                let mut exps = vec![0.0f64; len];
                for j in 0..len {
                    let e = (src[base + j * inner].as_f64() - max).exp();
                    exps[j] = e;
                    sum += e;
                }
                for j in 0..len {
                    data[base + j * inner] = S::cast(exps[j] / sum);
                }
            }
        }
        let rg = self.tensors[x.0].requires_grad;
        Ok(self.push_op(shape, data, rg, |id| Node::Softmax { x, axis, out: id }))
    }

    /// Layer normalization over the last dimension followed by an affine map.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: f64) -> Result<TensorId> {
        let shape = self.tensors[x.0].shape.clone();
        let d = *shape.last().ok_or_else(|| TensorError::InvalidArgument {
            op: "layer_norm",
            msg: "input must have rank >= 1".into(),
        })?;
        for (name, t) in [("gain", gain), ("bias", bias)] {
            let s = &self.tensors[t.0].shape;
            if s.as_slice() != [d] {
                return Err(TensorError::InvalidArgument {
                    op: "layer_norm",
                    msg: format!("{name} shape {s:?} does not match last dimension {d}"),
                });
            }
        }
        let rows = numel(&shape) / d;
        let src = &self.tensors[x.0].data;
        let g = &self.tensors[gain.0].data;
        let b = &self.tensors[bias.0].data;
        let mut data = vec![S::zero(); src.len()];
        let mut means = vec![S::zero(); rows];
        let mut rstds = vec![S::zero(); rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mut sum = 0.0f64;
            for v in row {
                sum += v.as_f64();
            }
            let mean = sum / d as f64;
            let mut var = 0.0f64;
            for v in row {
                let dv = v.as_f64() - mean;
                var += dv * dv;
            }
            var /= d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            means[r] = S::cast(mean);
            rstds[r] = S::cast(rstd);
            for j in 0..d {
                let xhat = (row[j].as_f64() - mean) * rstd;
                data[r * d + j] = S::cast(xhat * g[j].as_f64() + b[j].as_f64());
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push_op(shape, data, rg, |id| Node::LayerNorm {
            x,
            gain,
            bias,
            mean: means,
            rstd: rstds,
            out: id,
        }))
    }

    // ---- spatial ops ----

    /// 3x3 Gaussian smoothing of the last two dimensions. At borders the
    /// kernel is renormalized over in-bounds taps, so constant maps are
    /// fixed points.
    pub fn gaussian_filter_2d(&mut self, x: TensorId, sigma: f64) -> Result<TensorId> {
        let shape = self.tensors[x.0].shape.clone();
        if shape.len() < 2 {
            return Err(TensorError::InvalidArgument {
                op: "gaussian_filter_2d",
                msg: format!("input must have rank >= 2, got shape {shape:?}"),
            });
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes = numel(&shape) / (h * w);
        let taps = gaussian_taps(sigma);
        let src = &self.tensors[x.0].data;
        let mut data = vec![S::zero(); src.len()];
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let out = &mut data[p * h * w..(p + 1) * h * w];
            gaussian_blur_plane(plane, h, w, &taps, out);
        }
        let rg = self.tensors[x.0].requires_grad;
        Ok(self.push_op(shape, data, rg, |id| Node::GaussianFilter2d { x, sigma, out: id }))
    }

    /// Bilinear interpolation of the last two dimensions to `(out_h, out_w)`,
    /// align-corners = false.
    pub fn bilinear_resize(&mut self, x: TensorId, out_h: usize, out_w: usize) -> Result<TensorId> {
        let shape = self.tensors[x.0].shape.clone();
        if shape.len() < 2 {
            return Err(TensorError::InvalidArgument {
                op: "bilinear_resize",
                msg: format!("input must have rank >= 2, got shape {shape:?}"),
            });
        }
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::InvalidArgument {
                op: "bilinear_resize",
                msg: format!("output size {out_h}x{out_w} must be nonzero"),
            });
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes = numel(&shape) / (h * w);
        let src = &self.tensors[x.0].data;
        let mut data = vec![S::zero(); planes * out_h * out_w];
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let out = &mut data[p * out_h * out_w..(p + 1) * out_h * out_w];
            bilinear_resize_plane(plane, h, w, out_h, out_w, out);
        }
        let mut out_shape = shape.clone();
        let rank = out_shape.len();
        out_shape[rank - 2] = out_h;
        out_shape[rank - 1] = out_w;
        let rg = self.tensors[x.0].requires_grad;
        Ok(self.push_op(out_shape, data, rg, |id| Node::BilinearResize { x, out: id }))
    }

    // ---- structural ops ----

    pub fn transpose(&mut self, x: TensorId, ax0: usize, ax1: usize) -> Result<TensorId> {
        let shape = self.tensors[x.0].shape.clone();
        let rank = shape.len();
        if ax0 >= rank || ax1 >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "transpose",
                axis: ax0.max(ax1),
                rank,
            });
        }
        let data = transpose_copy(&shape, &self.tensors[x.0].data, ax0, ax1);
        let mut out_shape = shape;
        out_shape.swap(ax0, ax1);
        let rg = self.tensors[x.0].requires_grad;
        Ok(self.push_op(out_shape, data, rg, |id| Node::Transpose { x, ax0, ax1, out: id }))
    }

    pub fn reshape(&mut self, x: TensorId, new_shape: Vec<usize>) -> Result<TensorId> {
        let old = &self.tensors[x.0].shape;
        if numel(old) != numel(&new_shape) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: old.clone(),
                rhs: new_shape,
            });
        }
        let data = self.tensors[x.0].data.clone();
        let rg = self.tensors[x.0].requires_grad;
        Ok(self.push_op(new_shape, data, rg, |id| Node::Reshape { x, out: id }))
    }

    /// Keeps `start..end` along `axis`.
    pub fn slice(&mut self, x: TensorId, axis: usize, start: usize, end: usize) -> Result<TensorId> {
        let shape = self.tensors[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { op: "slice", axis, rank: shape.len() });
        }
        if start >= end || end > shape[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{end} invalid for axis of size {}", shape[axis]),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let keep = end - start;
        let src = &self.tensors[x.0].data;
        let mut data = vec![S::zero(); outer * keep * inner];
        for o in 0..outer {
            let src_base = (o * len + start) * inner;
            let dst_base = o * keep * inner;
            data[dst_base..dst_base + keep * inner].copy_from_slice(&src[src_base..src_base + keep * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = keep;
        let rg = self.tensors[x.0].requires_grad;
        Ok(self.push_op(out_shape, data, rg, |id| Node::Slice { x, axis, start, out: id }))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[TensorId], axis: usize) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: "need at least one input".into(),
            });
        }
        let first = self.tensors[xs[0].0].shape.clone();
        if axis >= first.len() {
            return Err(TensorError::AxisOutOfRange { op: "concat", axis, rank: first.len() });
        }
        let mut total = 0usize;
        for &x in xs {
            let s = &self.tensors[x.0].shape;
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out_shape = first;
        out_shape[axis] = total;
        let mut data = vec![S::zero(); outer * total * inner];
        for o in 0..outer {
            let mut offset = 0usize;
            for &x in xs {
                let len = self.tensors[x.0].shape[axis];
                let src = &self.tensors[x.0].data;
                let src_base = o * len * inner;
                let dst_base = (o * total + offset) * inner;
                data[dst_base..dst_base + len * inner].copy_from_slice(&src[src_base..src_base + len * inner]);
                offset += len;
            }
        }
        let rg = self.any_grad(xs);
        let xs_owned = xs.to_vec();
        Ok(self.push_op(out_shape, data, rg, |id| Node::Concat { xs: xs_owned, axis, out: id }))
    }

    /// Repeats the whole tensor `n` times along a new leading axis.
    pub fn repeat(&mut self, x: TensorId, n: usize) -> Result<TensorId> {
        if n == 0 {
            return Err(TensorError::InvalidArgument {
                op: "repeat",
                msg: "repeat count must be positive".into(),
            });
        }
        let shape = self.tensors[x.0].shape.clone();
        let src = &self.tensors[x.0].data;
        let mut data = Vec::with_capacity(src.len() * n);
        for _ in 0..n {
            data.extend_from_slice(src);
        }
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(&shape);
        let rg = self.tensors[x.0].requires_grad;
        Ok(self.push_op(out_shape, data, rg, |id| Node::Repeat { x, out: id }))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let sum: f64 = self.tensors[x.0].data.iter().map(|v| v.as_f64()).sum();
        let rg = self.tensors[x.0].requires_grad;
        self.push_op(vec![], vec![S::cast(sum)], rg, |id| Node::SumAll { x, out: id })
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.tensors[x.0].data.len().max(1);
        let sum: f64 = self.tensors[x.0].data.iter().map(|v| v.as_f64()).sum();
        let rg = self.tensors[x.0].requires_grad;
        self.push_op(vec![], vec![S::cast(sum / n as f64)], rg, |id| Node::MeanAll { x, out: id })
    }

    /// Sums out one axis.
    pub fn sum_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.tensors[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { op: "sum_axis", axis, rank: shape.len() });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = &self.tensors[x.0].data;
        let mut data = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut sum = 0.0f64;
                for j in 0..len {
                    sum += src[(o * len + j) * inner + i].as_f64();
                }
                data[o * inner + i] = S::cast(sum);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.tensors[x.0].requires_grad;
        Ok(self.push_op(out_shape, data, rg, |id| Node::SumAxis { x, axis, out: id }))
    }

    /// Mean over one axis (sum_axis then scale).
    pub fn mean_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let len = *self.tensors[x.0].shape.get(axis).ok_or(TensorError::AxisOutOfRange {
            op: "mean_axis",
            axis,
            rank: self.tensors[x.0].shape.len(),
        })?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stable via
    /// log-sum-exp.
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let shape = self.tensors[logits.0].shape.clone();
        if shape.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("logits must be [batch, classes], got {shape:?}"),
            });
        }
        let (b, c) = (shape[0], shape[1]);
        if labels.len() != b {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("{} labels for batch of {b}", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("label {bad} out of range for {c} classes"),
            });
        }
        let src = &self.tensors[logits.0].data;
        let mut total = 0.0f64;
        for (i, &label) in labels.iter().enumerate() {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let lse: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            total += max + lse - row[label].as_f64();
        }
        let rg = self.tensors[logits.0].requires_grad;
        let labels_owned = labels.to_vec();
        Ok(self.push_op(vec![], vec![S::cast(total / b as f64)], rg, |id| Node::CrossEntropy {
            logits,
            labels: labels_owned,
            out: id,
        }))
    }

    // ---- backward ----

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Reverse pass from a scalar loss. Adjoints accumulate additively when a
    /// tensor feeds multiple consumers; every `requires_grad` tensor ends up
    /// with a populated gradient slot.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let lt = &self.tensors[loss.0];
        if lt.data.len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: lt.shape.clone() });
        }
        if !lt.requires_grad {
            return Err(TensorError::InvalidArgument {
                op: "backward",
                msg: "loss does not depend on any differentiable tensor".into(),
            });
        }
        for t in &mut self.tensors {
            if t.requires_grad {
                t.grad = Some(vec![S::zero(); t.data.len()]);
            }
        }
        self.tensors[loss.0].grad.as_mut().unwrap()[0] = S::one();

        let nodes = std::mem::take(&mut self.nodes);
        for node in nodes.iter().rev() {
            self.backward_node(node);
        }
        self.nodes = nodes;
        Ok(())
    }

    fn out_grad(&self, out: TensorId) -> Option<Vec<S>> {
        self.tensors[out.0].grad.clone()
    }

    fn accumulate(&mut self, id: TensorId, contrib: &[S]) {
        if !self.tensors[id.0].requires_grad {
            return;
        }
        let grad = self.tensors[id.0].grad.as_mut().expect("grad allocated");
        debug_assert_eq!(grad.len(), contrib.len());
        for (g, c) in grad.iter_mut().zip(contrib) {
            *g = *g + *c;
        }
    }

    fn backward_node(&mut self, node: &Node<S>) {
        match node {
            Node::Add { a, b, out } => {
                let Some(dy) = self.out_grad(*out) else { return };
                let oshape = self.tensors[out.0].shape.clone();
                let da = reduce_to_shape(&dy, &oshape, &self.tensors[a.0].shape);
                self.accumulate(*a, &da);
                let db = reduce_to_shape(&dy, &oshape, &self.tensors[b.0].shape);
                self.accumulate(*b, &db);
            }
            Node::Sub { a, b, out } => {
                let Some(dy) = self.out_grad(*out) else { return };
                let oshape = self.tensors[out.0].shape.clone();
                let da = reduce_to_shape(&dy, &oshape, &self.tensors[a.0].shape);
                self.accumulate(*a, &da);
                let neg: Vec<S> = dy.iter().map(|&v| -v).collect();
                let db = reduce_to_shape(&neg, &oshape, &self.tensors[b.0].shape);
                self.accumulate(*b, &db);
            }
            Node::Mul { a, b, out } => {
                let Some(dy) = self.out_grad(*out) else { return };
                let oshape = self.tensors[out.0].shape.clone();
                let ash = self.tensors[a.0].shape.clone();
                let bsh = self.tensors[b.0].shape.clone();
                // dy * b (in out-space), reduced to a's shape; symmetric for b.
                let dyb = broadcast_map(&oshape, &dy, &bsh, &self.tensors[b.0].data, &oshape, |g, v| g * v);
                let da = reduce_to_shape(&dyb, &oshape, &ash);
                self.accumulate(*a, &da);
                let dya = broadcast_map(&oshape, &dy, &ash, &self.tensors[a.0].data, &oshape, |g, v| g * v);
                let db = reduce_to_shape(&dya, &oshape, &bsh);
                self.accumulate(*b, &db);
            }
            Node::MatMul { a, b, out } => {
                let Some(dy) = self.out_grad(*out) else { return };
                let ash = self.tensors[a.0].shape.clone();
                let bsh = self.tensors[b.0].shape.clone();
                let oshape = self.tensors[out.0].shape.clone();
                let (da, db) = matmul_backward(
                    &ash,
                    &self.tensors[a.0].data,
                    &bsh,
                    &self.tensors[b.0].data,
                    &oshape,
                    &dy,
                );
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Node::Scale { x, c, out } => {
                let Some(dy) = self.out_grad(*out) else { return };
                let dx: Vec<S> = dy.iter().map(|&g| g * *c).collect();
                self.accumulate(*x, &dx);
            }
            Node::AddScalar { x, out } => {
                let Some(dy) = self.out_grad(*out) else { return };
                self.accumulate(*x, &dy);
            }
            Node::Abs { x, out } => {
                let Some(dy) = self.out_grad(*out) else { return };
                // Subgradient 0 at the kink.
                let dx: Vec<S> = self.tensors[x.0]
                    .data
                    .iter()
                    .zip(&dy)
                    .map(|(&v, &g)| {
                        if v > S::zero() {
                            g
                        } else if v < S::zero() {
                            -g
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                self.accumulate(*x, &dx);
            }
            Node::Sigmoid { x, out } => {
                let Some(dy) = self.out_grad(*out) else { return };
                let y = &self.tensors[out.0].data;
                let dx: Vec<S> = y.iter().zip(&dy).map(|(&yv, &g)| g * yv * (S::one() - yv)).collect();
                self.accumulate(*x, &dx);
            }
            Node::Gelu { x, out } => {
                let Some(dy) = self.out_grad(*out) else { return };
                let dx: Vec<S> = self.tensors[x.0]
                    .data
                    .iter()
                    .zip(&dy)
                    .map(|(&v, &g)| S::cast(gelu_grad_f64(v.as_f64()) * g.as_f64()))
                    .collect();
                self.accumulate(*x, &dx);
            }
            Node::Softmax { x, axis, out } => {
                let Some(dy) = self.out_grad(*out) else { return };
                let shape = self.tensors[out.0].shape.clone();
                let (outer, len, inner) = axis_split(&shape, *axis);
                let y = &self.tensors[out.0].data;
                let mut dx = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0f64;
                        for j in 0..len {
                            let idx = base + j * inner;
                            dot += dy[idx].as_f64() * y[idx].as_f64();
                        }
                        for j in 0..len {
                            let idx = base + j * inner;
                            dx[idx] = S::cast(y[idx].as_f64() * (dy[idx].as_f64() - dot));
                        }
                    }
                }
                self.accumulate(*x, &dx);
            }
            Node::LayerNorm { x, gain, bias, mean, rstd, out } => {
                let Some(dy) = self.out_grad(*out) else { return };
                let shape = self.tensors[x.0].shape.clone();
                let d = *shape.last().unwrap();
                let rows = numel(&shape) / d;
                let src = &self.tensors[x.0].data;
                let g = &self.tensors[gain.0].data;
                let mut dx = vec![S::zero(); src.len()];
                let mut dgain = vec![0.0f64; d];
                let mut dbias = vec![0.0f64; d];
                for r in 0..rows {
                    let m = mean[r].as_f64();
                    let rs = rstd[r].as_f64();
                    let mut m1 = 0.0f64;
                    let mut m2 = 0.0f64;
                    for j in 0..d {
                        let idx = r * d + j;
                        let xhat = (src[idx].as_f64() - m) * rs;
                        let dxhat = dy[idx].as_f64() * g[j].as_f64();
                        m1 += dxhat;
                        m2 += dxhat * xhat;
                        dgain[j] += dy[idx].as_f64() * xhat;
                        dbias[j] += dy[idx].as_f64();
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let idx = r * d + j;
                        let xhat = (src[idx].as_f64() - m) * rs;
                        let dxhat = dy[idx].as_f64() * g[j].as_f64();
                        dx[idx] = S::cast(rs * (dxhat - m1 - xhat * m2));
                    }
                }
                self.accumulate(*x, &dx);
                let dgain_s: Vec<S> = dgain.iter().map(|&v| S::cast(v)).collect();
                self.accumulate(*gain, &dgain_s);
                let dbias_s: Vec<S> = dbias.iter().map(|&v| S::cast(v)).collect();
                self.accumulate(*bias, &dbias_s);
            }
            Node::GaussianFilter2d { x, sigma, out } => {
                let Some(dy) = self.out_grad(*out) else { return };
                let shape = self.tensors[x.0].shape.clone();
                let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let planes = numel(&shape) / (h * w);
                let taps = gaussian_taps(*sigma);
                let mut dx = vec![S::zero(); dy.len()];
                for p in 0..planes {
                    let dyp = &dy[p * h * w..(p + 1) * h * w];
                    let dxp = &mut dx[p * h * w..(p + 1) * h * w];
                    gaussian_blur_adjoint_plane(dyp, h, w, &taps, dxp);
                }
                self.accumulate(*x, &dx);
            }
            Node::BilinearResize { x, out } => {
                let Some(dy) = self.out_grad(*out) else { return };
                let ishape = self.tensors[x.0].shape.clone();
                let oshape = self.tensors[out.0].shape.clone();
                let (h, w) = (ishape[ishape.len() - 2], ishape[ishape.len() - 1]);
                let (oh, ow) = (oshape[oshape.len() - 2], oshape[oshape.len() - 1]);
                let planes = numel(&ishape) / (h * w);
                let mut dx = vec![S::zero(); numel(&ishape)];
                for p in 0..planes {
                    let dyp = &dy[p * oh * ow..(p + 1) * oh * ow];
                    let dxp = &mut dx[p * h * w..(p + 1) * h * w];
                    bilinear_adjoint_plane(dyp, h, w, oh, ow, dxp);
                }
                self.accumulate(*x, &dx);
            }
            Node::Transpose { x, ax0, ax1, out } => {
                let Some(dy) = self.out_grad(*out) else { return };
                let oshape = self.tensors[out.0].shape.clone();
                let dx = transpose_copy(&oshape, &dy, *ax0, *ax1);
                self.accumulate(*x, &dx);
            }
            Node::Reshape { x, out } => {
                let Some(dy) = self.out_grad(*out) else { return };
                self.accumulate(*x, &dy);
            }
            Node::Slice { x, axis, start, out } => {
                let Some(dy) = self.out_grad(*out) else { return };
                let ishape = self.tensors[x.0].shape.clone();
                let (outer, len, inner) = axis_split(&ishape, *axis);
                let keep = self.tensors[out.0].shape[*axis];
                let mut dx = vec![S::zero(); numel(&ishape)];
                for o in 0..outer {
                    let dst_base = (o * len + start) * inner;
                    let src_base = o * keep * inner;
                    dx[dst_base..dst_base + keep * inner].copy_from_slice(&dy[src_base..src_base + keep * inner]);
                }
                self.accumulate(*x, &dx);
            }
            Node::Concat { xs, axis, out } => {
                let Some(dy) = self.out_grad(*out) else { return };
                let oshape = self.tensors[out.0].shape.clone();
                let (outer, total, inner) = axis_split(&oshape, *axis);
                let mut offset = 0usize;
                for &x in xs {
                    let len = self.tensors[x.0].shape[*axis];
                    let mut dx = vec![S::zero(); outer * len * inner];
                    for o in 0..outer {
                        let src_base = (o * total + offset) * inner;
                        let dst_base = o * len * inner;
                        dx[dst_base..dst_base + len * inner]
                            .copy_from_slice(&dy[src_base..src_base + len * inner]);
                    }
                    self.accumulate(x, &dx);
                    offset += len;
                }
            }
            Node::Repeat { x, out } => {
                let Some(dy) = self.out_grad(*out) else { return };
                let n = self.tensors[out.0].shape[0];
                let len = self.tensors[x.0].data.len();
                let mut dx = vec![S::zero(); len];
                for r in 0..n {
                    for i in 0..len {
                        dx[i] = dx[i] + dy[r * len + i];
                    }
                }
                self.accumulate(*x, &dx);
            }
            Node::SumAll { x, out } => {
                let Some(dy) = self.out_grad(*out) else { return };
                let g = dy[0];
                let dx = vec![g; self.tensors[x.0].data.len()];
                self.accumulate(*x, &dx);
            }
            Node::MeanAll { x, out } => {
                let Some(dy) = self.out_grad(*out) else { return };
                let n = self.tensors[x.0].data.len().max(1);
                let g = S::cast(dy[0].as_f64() / n as f64);
                let dx = vec![g; self.tensors[x.0].data.len()];
                self.accumulate(*x, &dx);
            }
            Node::SumAxis { x, axis, out } => {
                let Some(dy) = self.out_grad(*out) else { return };
                let ishape = self.tensors[x.0].shape.clone();
                let (outer, len, inner) = axis_split(&ishape, *axis);
                let mut dx = vec![S::zero(); numel(&ishape)];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            dx[(o * len + j) * inner + i] = dy[o * inner + i];
                        }
                    }
                }
                self.accumulate(*x, &dx);
            }
            Node::CrossEntropy { logits, labels, out } => {
                let Some(dy) = self.out_grad(*out) else { return };
                let g = dy[0].as_f64();
                let shape = self.tensors[logits.0].shape.clone();
                let (b, c) = (shape[0], shape[1]);
                let src = &self.tensors[logits.0].data;
                let mut dx = vec![S::zero(); b * c];
                for (i, &label) in labels.iter().enumerate() {
                    let row = &src[i * c..(i + 1) * c];
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
                    let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
                    for j in 0..c {
                        let p = (row[j].as_f64() - max).exp() / sum;
                        let ind = if j == label { 1.0 } else { 0.0 };
                        dx[i * c + j] = S::cast(g * (p - ind) / b as f64);
                    }
                }
                self.accumulate(*logits, &dx);
            }
        }
    }
}

// ---- scalar math helpers ----

fn sigmoid_scalar<S: Scalar>(v: S) -> S {
    let x = v.as_f64();
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    S::cast(y)
}

const GELU_COEF: f64 = 0.044_715;

fn gelu_f64(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad_f64(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let u = k * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * k * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// Unnormalized 3x3 Gaussian tap weights for offsets (-1..=1, -1..=1).
pub fn gaussian_taps(sigma: f64) -> [f64; 9] {
    let mut taps = [0.0f64; 9];
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            let r2 = (dx * dx + dy * dy) as f64;
            taps[((dy + 1) * 3 + (dx + 1)) as usize] = (-r2 / (2.0 * sigma * sigma)).exp();
        }
    }
    taps
}

/// Normalized convolution of one H x W plane: each output pixel divides by
/// the sum of in-bounds tap weights.
pub fn gaussian_blur_plane<S: Scalar>(src: &[S], h: usize, w: usize, taps: &[f64; 9], out: &mut [S]) {
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            let mut wsum = 0.0f64;
            for dy in -1i64..=1 {
                let yy = y as i64 + dy;
                if yy < 0 || yy >= h as i64 {
                    continue;
                }
                for dx in -1i64..=1 {
                    let xx = x as i64 + dx;
                    if xx < 0 || xx >= w as i64 {
                        continue;
                    }
                    let t = taps[((dy + 1) * 3 + (dx + 1)) as usize];
                    acc += t * src[yy as usize * w + xx as usize].as_f64();
                    wsum += t;
                }
            }
            out[y * w + x] = S::cast(acc / wsum);
        }
    }
}

fn gaussian_blur_adjoint_plane<S: Scalar>(dout: &[S], h: usize, w: usize, taps: &[f64; 9], dsrc: &mut [S]) {
    let mut acc = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut wsum = 0.0f64;
            for dy in -1i64..=1 {
                let yy = y as i64 + dy;
                if yy < 0 || yy >= h as i64 {
                    continue;
                }
                for dx in -1i64..=1 {
                    let xx = x as i64 + dx;
                    if xx < 0 || xx >= w as i64 {
                        continue;
                    }
                    wsum += taps[((dy + 1) * 3 + (dx + 1)) as usize];
                }
            }
            let g = dout[y * w + x].as_f64() / wsum;
            for dy in -1i64..=1 {
                let yy = y as i64 + dy;
                if yy < 0 || yy >= h as i64 {
                    continue;
                }
                for dx in -1i64..=1 {
                    let xx = x as i64 + dx;
                    if xx < 0 || xx >= w as i64 {
                        continue;
                    }
                    let t = taps[((dy + 1) * 3 + (dx + 1)) as usize];
                    acc[yy as usize * w + xx as usize] += g * t;
                }
            }
        }
    }
    for (d, a) in dsrc.iter_mut().zip(&acc) {
        *d = S::cast(*a);
    }
}

/// Align-corners = false bilinear interpolation of one plane.
pub fn bilinear_resize_plane<S: Scalar>(src: &[S], h: usize, w: usize, oh: usize, ow: usize, out: &mut [S]) {
    for oy in 0..oh {
        let (y0, y1, fy) = bilinear_axis(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = bilinear_axis(ox, w, ow);
            let v00 = src[y0 * w + x0].as_f64();
            let v01 = src[y0 * w + x1].as_f64();
            let v10 = src[y1 * w + x0].as_f64();
            let v11 = src[y1 * w + x1].as_f64();
            let v = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
            out[oy * ow + ox] = S::cast(v);
        }
    }
}

fn bilinear_adjoint_plane<S: Scalar>(dout: &[S], h: usize, w: usize, oh: usize, ow: usize, dsrc: &mut [S]) {
    let mut acc = vec![0.0f64; h * w];
    for oy in 0..oh {
        let (y0, y1, fy) = bilinear_axis(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = bilinear_axis(ox, w, ow);
            let g = dout[oy * ow + ox].as_f64();
            acc[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
            acc[y0 * w + x1] += g * (1.0 - fy) * fx;
            acc[y1 * w + x0] += g * fy * (1.0 - fx);
            acc[y1 * w + x1] += g * fy * fx;
        }
    }
    for (d, a) in dsrc.iter_mut().zip(&acc) {
        *d = S::cast(*a);
    }
}

fn bilinear_axis(o: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let s = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let f = (s - i0 as f64).clamp(0.0, 1.0);
    (i0, i1, f)
}

// ---- shape helpers ----

/// Splits `shape` into (product before axis, axis length, product after).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Strides of `shape` right-aligned into `out_shape`, with 0 where the
/// dimension broadcasts.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[offset + i] = acc;
        }
        acc *= shape[i];
    }
    strides
}

fn broadcast_map<S: Scalar>(
    ash: &[usize],
    a: &[S],
    bsh: &[usize],
    b: &[S],
    out_shape: &[usize],
    f: impl Fn(S, S) -> S,
) -> Vec<S> {
    let n = numel(out_shape);
    // Fast path: identical shapes.
    if ash == bsh {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let rank = out_shape.len();
    if rank == 0 {
        return vec![f(a[0], b[0])];
    }
    let sa = broadcast_strides(ash, out_shape);
    let sb = broadcast_strides(bsh, out_shape);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut oa = 0usize;
    let mut ob = 0usize;
    for _ in 0..n {
        out.push(f(a[oa], b[ob]));
        // Odometer increment, last axis fastest.
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
        }
    }
    out
}

/// Sums `src` (laid out as `from_shape`) down to `to_shape` (right-aligned
/// broadcast inverse).
fn reduce_to_shape<S: Scalar>(src: &[S], from_shape: &[usize], to_shape: &[usize]) -> Vec<S> {
    if from_shape == to_shape {
        return src.to_vec();
    }
    let rank = from_shape.len();
    let st = broadcast_strides(to_shape, from_shape);
    let mut acc = vec![0.0f64; numel(to_shape)];
    let mut idx = vec![0usize; rank];
    let mut ot = 0usize;
    for &v in src {
        acc[ot] += v.as_f64();
        for d in (0..rank).rev() {
            idx[d] += 1;
            ot += st[d];
            if idx[d] < from_shape[d] {
                break;
            }
            idx[d] = 0;
            ot -= st[d] * from_shape[d];
        }
    }
    acc.into_iter().map(S::cast).collect()
}

fn transpose_copy<S: Scalar>(shape: &[usize], data: &[S], ax0: usize, ax1: usize) -> Vec<S> {
    if ax0 == ax1 {
        return data.to_vec();
    }
    let rank = shape.len();
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax0, ax1);
    // Source strides rearranged into output axis order.
    let mut src_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        src_strides[i] = src_strides[i + 1] * shape[i + 1];
    }
    src_strides.swap(ax0, ax1);
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            off -= src_strides[d] * out_shape[d];
        }
    }
    out
}

// ---- matmul kernels ----

const PAR_FLOP_THRESHOLD: usize = 1 << 16;

/// `out[m x n] (+)= a[m x k] . b[k x n]`
fn gemm_nn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], out: &mut [S]) {
    let work = m * k * n;
    let body = |i: usize, row: &mut [S]| {
        for l in 0..k {
            let av = a[i * k + l];
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                row[j] = row[j] + av * brow[j];
            }
        }
    };
    if work >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

/// `out[m x k] += dy[m x n] . b^T` where `b` is stored `[k x n]`.
fn gemm_nt<S: Scalar>(m: usize, k: usize, n: usize, dy: &[S], b: &[S], out: &mut [S]) {
    let work = m * k * n;
    let body = |i: usize, row: &mut [S]| {
        let dyrow = &dy[i * n..(i + 1) * n];
        for (j, slot) in row.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = S::zero();
            for l in 0..n {
                acc = acc + dyrow[l] * brow[l];
            }
            *slot = *slot + acc;
        }
    };
    if work >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(k).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(k).enumerate() {
            body(i, row);
        }
    }
}

/// `out[k x n] += a^T . dy` where `a` is stored `[m x k]`, `dy` is `[m x n]`.
fn gemm_tn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], dy: &[S], out: &mut [S]) {
    for l in 0..m {
        let arow = &a[l * k..(l + 1) * k];
        let dyrow = &dy[l * n..(l + 1) * n];
        for i in 0..k {
            let av = arow[i];
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * dyrow[j];
            }
        }
    }
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    batch_shape: Vec<usize>,
}

fn matmul_dims(op: &'static str, ash: &[usize], bsh: &[usize]) -> Result<MatmulDims> {
    if ash.len() < 2 || bsh.len() < 2 {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: ash.to_vec(),
            rhs: bsh.to_vec(),
        });
    }
    let (m, ka) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
    if ka != kb {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: ash.to_vec(),
            rhs: bsh.to_vec(),
        });
    }
    let abatch = &ash[..ash.len() - 2];
    let bbatch = &bsh[..bsh.len() - 2];
    let (batch_shape, a_batched, b_batched) = if abatch == bbatch {
        (abatch.to_vec(), !abatch.is_empty(), !bbatch.is_empty())
    } else if bbatch.is_empty() {
        (abatch.to_vec(), true, false)
    } else if abatch.is_empty() {
        (bbatch.to_vec(), false, true)
    } else {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: ash.to_vec(),
            rhs: bsh.to_vec(),
        });
    };
    Ok(MatmulDims {
        batch: numel(&batch_shape),
        m,
        k: ka,
        n,
        a_batched,
        b_batched,
        batch_shape,
    })
}

fn batched_matmul<S: Scalar>(ash: &[usize], a: &[S], bsh: &[usize], b: &[S]) -> Result<(Vec<usize>, Vec<S>)> {
    let d = matmul_dims("matmul", ash, bsh)?;
    let mut out_shape = d.batch_shape.clone();
    out_shape.push(d.m);
    out_shape.push(d.n);
    let mut out = vec![S::zero(); d.batch * d.m * d.n];
    if d.batch <= 1 {
        gemm_nn(d.m, d.k, d.n, a, b, &mut out);
    } else if !d.b_batched {
        // Shared rhs: flatten batch into rows.
        gemm_nn(d.batch * d.m, d.k, d.n, a, b, &mut out);
    } else {
        out.par_chunks_mut(d.m * d.n).enumerate().for_each(|(i, chunk)| {
            let asl = if d.a_batched { &a[i * d.m * d.k..(i + 1) * d.m * d.k] } else { a };
            let bsl = if d.b_batched { &b[i * d.k * d.n..(i + 1) * d.k * d.n] } else { b };
            gemm_nn(d.m, d.k, d.n, asl, bsl, chunk);
        });
    }
    Ok((out_shape, out))
}

fn matmul_backward<S: Scalar>(
    ash: &[usize],
    a: &[S],
    bsh: &[usize],
    b: &[S],
    oshape: &[usize],
    dy: &[S],
) -> (Vec<S>, Vec<S>) {
    let d = matmul_dims("matmul", ash, bsh).expect("shapes validated in forward");
    let _ = oshape;
    let mut da = vec![S::zero(); numel(ash)];
    let mut db = vec![S::zero(); numel(bsh)];
    if d.batch <= 1 {
        gemm_nt(d.m, d.k, d.n, dy, b, &mut da);
        gemm_tn(d.m, d.k, d.n, a, dy, &mut db);
        return (da, db);
    }
    if d.a_batched && !d.b_batched {
        // dA per batch is independent; dB accumulates over the batch.
        gemm_nt(d.batch * d.m, d.k, d.n, dy, b, &mut da);
        gemm_tn(d.batch * d.m, d.k, d.n, a, dy, &mut db);
        return (da, db);
    }
    if d.a_batched {
        da.par_chunks_mut(d.m * d.k).enumerate().for_each(|(i, chunk)| {
            let bsl = if d.b_batched { &b[i * d.k * d.n..(i + 1) * d.k * d.n] } else { b };
            gemm_nt(d.m, d.k, d.n, &dy[i * d.m * d.n..(i + 1) * d.m * d.n], bsl, chunk);
        });
    } else {
        for i in 0..d.batch {
            let bsl = &b[i * d.k * d.n..(i + 1) * d.k * d.n];
            gemm_nt(d.m, d.k, d.n, &dy[i * d.m * d.n..(i + 1) * d.m * d.n], bsl, &mut da);
        }
    }
    if d.b_batched {
        db.par_chunks_mut(d.k * d.n).enumerate().for_each(|(i, chunk)| {
            let asl = if d.a_batched { &a[i * d.m * d.k..(i + 1) * d.m * d.k] } else { a };
            gemm_tn(d.m, d.k, d.n, asl, &dy[i * d.m * d.n..(i + 1) * d.m * d.n], chunk);
        });
    } else {
        for i in 0..d.batch {
            let asl = &a[i * d.m * d.k..(i + 1) * d.m * d.k];
            gemm_tn(d.m, d.k, d.n, asl, &dy[i * d.m * d.n..(i + 1) * d.m * d.n], &mut db);
        }
    }
    (da, db)
}
