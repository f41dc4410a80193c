//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive operation executed during a forward
//! pass in topological order. [`Tape::backward`] walks the record in exact
//! reverse order and accumulates gradients into per-node buffers. The op set
//! is exactly what the segmentation network needs: 3D convolution, ReLU,
//! max pooling, nearest upsampling, average pooling, channel concatenation,
//! channel softmax, the 2D kernels behind attention, and the two losses.
//!
//! Gradients accumulate across repeated `backward` calls; create a fresh tape
//! (or fresh leaves) per training step to reset them.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::conv::{
    avgpool3d_backward, avgpool3d_forward, conv3d_backward_input, conv3d_backward_params,
    conv3d_forward, maxpool3d_backward, maxpool3d_forward, upsample3d_backward,
    upsample3d_forward, Extent3,
};
use crate::linalg::{matmul, row_softmax, row_softmax_backward, transpose};
use crate::tensor::{Real, Tensor};

/// Probabilities are clamped to `[PROB_FLOOR, 1]` before any logarithm.
pub const PROB_FLOOR: f64 = 1e-7;

/// Smoothing term in the soft-Dice loss.
pub const DICE_EPSILON: f64 = 1e-6;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

#[derive(Clone, Debug, PartialEq)]
pub enum TapeError {
    ShapeMismatch(String),
    EvenKernel(usize),
    OddExtent(String),
    NonFiniteInput(&'static str),
    IndivisibleHeads { d_model: usize, heads: usize },
    NotOneHot,
    NotScalarRoot,
}

impl core::fmt::Display for TapeError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TapeError::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            TapeError::EvenKernel(k) => write!(f, "convolution kernel must be odd, got {k}"),
            TapeError::OddExtent(msg) => write!(f, "extent must be even: {msg}"),
            TapeError::NonFiniteInput(op) => write!(f, "non-finite input to {op}"),
            TapeError::IndivisibleHeads { d_model, heads } => {
                write!(f, "d_model {d_model} not divisible by {heads} heads")
            }
            TapeError::NotOneHot => write!(f, "target is not one-hot"),
            TapeError::NotScalarRoot => write!(f, "backward root must be a scalar"),
        }
    }
}

impl core::error::Error for TapeError {}

pub type TapeResult<T> = Result<T, TapeError>;

enum Op<E: Real> {
    Leaf,
    Add(ValueId, ValueId),
    Scale(ValueId, E),
    Relu(ValueId),
    Conv3d {
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
        c_in: usize,
        c_out: usize,
        k: usize,
        ext: Extent3,
    },
    MaxPool3d {
        input: ValueId,
        argmax: Vec<u32>,
    },
    AvgPool3d {
        input: ValueId,
        channels: usize,
        in_ext: Extent3,
    },
    Upsample3d {
        input: ValueId,
        channels: usize,
        in_ext: Extent3,
    },
    ConcatChannels {
        a: ValueId,
        b: ValueId,
        a_len: usize,
    },
    SoftmaxChannels {
        input: ValueId,
        classes: usize,
        locations: usize,
    },
    MatMul {
        a: ValueId,
        b: ValueId,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose2d {
        input: ValueId,
        rows: usize,
        cols: usize,
    },
    RowSoftmax {
        input: ValueId,
        rows: usize,
        cols: usize,
    },
    SliceCols {
        input: ValueId,
        cols: usize,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<(ValueId, usize)>,
        rows: usize,
    },
    Reshape(ValueId),
    SumAll(ValueId),
    WeightedSum {
        input: ValueId,
        weights: Tensor<E>,
    },
    ChannelAffine {
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        channels: usize,
        locations: usize,
    },
    CrossEntropy {
        probs: ValueId,
        target: Tensor<E>,
        locations: usize,
    },
    CrossEntropyLogits {
        logits: ValueId,
        /// Softmax of the logits, saved for the backward identity.
        probs: Tensor<E>,
        target: Tensor<E>,
        locations: usize,
    },
    DiceLoss {
        probs: ValueId,
        target: Tensor<E>,
        classes: usize,
        locations: usize,
    },
}

struct Node<E: Real> {
    value: Tensor<E>,
    requires_grad: bool,
    op: Op<E>,
}

/// Ordered record of executed primitives; inputs always precede consumers.
pub struct Tape<E: Real> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Real> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Real> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient buffer populated by `backward`, if this value needed one.
    pub fn grad(&self, id: ValueId) -> Option<&[E]> {
        self.grads[id.0].as_deref()
    }

    fn push(&mut self, value: Tensor<E>, requires_grad: bool, op: Op<E>) -> ValueId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        ValueId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> ValueId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> ValueId {
        self.push(value, false, Op::Leaf)
    }

    fn needs_grad(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> TapeResult<ValueId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TapeError::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape(), data);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: ValueId, factor: E) -> ValueId {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.needs_grad(&[x]);
        self.push(out, rg, Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let out = self.value(x).map(|v| v.maximum(E::ZERO));
        let rg = self.needs_grad(&[x]);
        self.push(out, rg, Op::Relu(x))
    }

    /// Same-padded stride-1 3D convolution over a `[C_in, D, H, W]` input
    /// with `[C_out, C_in, k, k, k]` weights and a `[C_out]` bias.
    pub fn conv3d(&mut self, input: ValueId, weight: ValueId, bias: ValueId) -> TapeResult<ValueId> {
        let in_shape = self.value(input).shape().to_vec();
        let w_shape = self.value(weight).shape().to_vec();
        let b_shape = self.value(bias).shape().to_vec();
        if in_shape.len() != 4 || w_shape.len() != 5 || b_shape.len() != 1 {
            return Err(TapeError::ShapeMismatch(format!(
                "conv3d: input {:?}, weight {:?}, bias {:?}",
                in_shape, w_shape, b_shape
            )));
        }
        let (c_in, ext) = (
            in_shape[0],
            Extent3 {
                d: in_shape[1],
                h: in_shape[2],
                w: in_shape[3],
            },
        );
        let (c_out, k) = (w_shape[0], w_shape[2]);
        if w_shape[1] != c_in || w_shape[3] != k || w_shape[4] != k || b_shape[0] != c_out {
            return Err(TapeError::ShapeMismatch(format!(
                "conv3d: weight {:?} does not match input channels {} / bias {:?}",
                w_shape, c_in, b_shape
            )));
        }
        if k % 2 == 0 {
            return Err(TapeError::EvenKernel(k));
        }
        let mut out = vec![E::ZERO; c_out * ext.voxels()];
        conv3d_forward(
            self.value(input).data(),
            c_in,
            ext,
            self.value(weight).data(),
            self.value(bias).data(),
            c_out,
            k,
            &mut out,
        );
        let out = Tensor::from_vec(&[c_out, ext.d, ext.h, ext.w], out);
        let rg = self.needs_grad(&[input, weight, bias]);
        Ok(self.push(
            out,
            rg,
            Op::Conv3d {
                input,
                weight,
                bias,
                c_in,
                c_out,
                k,
                ext,
            },
        ))
    }

    /// 2x2x2 max pooling with stride 2 over `[C, D, H, W]`.
    pub fn maxpool3d(&mut self, input: ValueId) -> TapeResult<ValueId> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 4 {
            return Err(TapeError::ShapeMismatch(format!(
                "maxpool3d: expected [C,D,H,W], got {:?}",
                shape
            )));
        }
        let (c, ext) = (
            shape[0],
            Extent3 {
                d: shape[1],
                h: shape[2],
                w: shape[3],
            },
        );
        if ext.d % 2 != 0 || ext.h % 2 != 0 || ext.w % 2 != 0 {
            return Err(TapeError::OddExtent(format!("maxpool3d over {:?}", shape)));
        }
        let out_len = c * ext.voxels() / 8;
        let mut out = vec![E::ZERO; out_len];
        let mut argmax = vec![0u32; out_len];
        maxpool3d_forward(self.value(input).data(), c, ext, &mut out, &mut argmax);
        let out = Tensor::from_vec(&[c, ext.d / 2, ext.h / 2, ext.w / 2], out);
        let rg = self.needs_grad(&[input]);
        Ok(self.push(out, rg, Op::MaxPool3d { input, argmax }))
    }

    /// 2x2x2 average pooling with stride 2 over `[C, D, H, W]`.
    pub fn avgpool3d(&mut self, input: ValueId) -> TapeResult<ValueId> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 4 {
            return Err(TapeError::ShapeMismatch(format!(
                "avgpool3d: expected [C,D,H,W], got {:?}",
                shape
            )));
        }
        let (c, ext) = (
            shape[0],
            Extent3 {
                d: shape[1],
                h: shape[2],
                w: shape[3],
            },
        );
        if ext.d % 2 != 0 || ext.h % 2 != 0 || ext.w % 2 != 0 {
            return Err(TapeError::OddExtent(format!("avgpool3d over {:?}", shape)));
        }
        let mut out = vec![E::ZERO; c * ext.voxels() / 8];
        avgpool3d_forward(self.value(input).data(), c, ext, &mut out);
        let out = Tensor::from_vec(&[c, ext.d / 2, ext.h / 2, ext.w / 2], out);
        let rg = self.needs_grad(&[input]);
        Ok(self.push(
            out,
            rg,
            Op::AvgPool3d {
                input,
                channels: c,
                in_ext: ext,
            },
        ))
    }

    /// Nearest-neighbour upsampling by 2 along each spatial axis.
    pub fn upsample3d(&mut self, input: ValueId) -> TapeResult<ValueId> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 4 {
            return Err(TapeError::ShapeMismatch(format!(
                "upsample3d: expected [C,D,H,W], got {:?}",
                shape
            )));
        }
        let (c, ext) = (
            shape[0],
            Extent3 {
                d: shape[1],
                h: shape[2],
                w: shape[3],
            },
        );
        let mut out = vec![E::ZERO; 8 * c * ext.voxels()];
        upsample3d_forward(self.value(input).data(), c, ext, &mut out);
        let out = Tensor::from_vec(&[c, 2 * ext.d, 2 * ext.h, 2 * ext.w], out);
        let rg = self.needs_grad(&[input]);
        Ok(self.push(
            out,
            rg,
            Op::Upsample3d {
                input,
                channels: c,
                in_ext: ext,
            },
        ))
    }

    /// Stacks `a` channels before `b` channels; spatial extents must match.
    pub fn concat_channels(&mut self, a: ValueId, b: ValueId) -> TapeResult<ValueId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 4 || sb.len() != 4 || sa[1..] != sb[1..] {
            return Err(TapeError::ShapeMismatch(format!(
                "concat_channels: {:?} vs {:?}",
                sa, sb
            )));
        }
        let mut data = Vec::with_capacity(self.value(a).len() + self.value(b).len());
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let out = Tensor::from_vec(&[sa[0] + sb[0], sa[1], sa[2], sa[3]], data);
        let a_len = self.value(a).len();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(out, rg, Op::ConcatChannels { a, b, a_len }))
    }

    /// Softmax across the channel axis of `[K, ...]`, per spatial location.
    pub fn softmax_channels(&mut self, input: ValueId) -> TapeResult<ValueId> {
        let shape = self.value(input).shape().to_vec();
        if shape.is_empty() {
            return Err(TapeError::ShapeMismatch(
                "softmax_channels: scalar input".into(),
            ));
        }
        if !self.value(input).all_finite() {
            return Err(TapeError::NonFiniteInput("softmax_channels"));
        }
        let classes = shape[0];
        let locations: usize = shape[1..].iter().product();
        let x = self.value(input).data();
        let mut out = vec![E::ZERO; x.len()];

        let mut max = vec![E::from_f64(f64::NEG_INFINITY); locations];
        for k in 0..classes {
            for (m, &v) in max.iter_mut().zip(&x[k * locations..(k + 1) * locations]) {
                *m = m.maximum(v);
            }
        }
        let mut sum = vec![E::ZERO; locations];
        for k in 0..classes {
            let row = &x[k * locations..(k + 1) * locations];
            let out_row = &mut out[k * locations..(k + 1) * locations];
            for ((o, &v), (&m, s)) in out_row
                .iter_mut()
                .zip(row)
                .zip(max.iter().zip(sum.iter_mut()))
            {
                let e = (v - m).exp();
                *o = e;
                *s += e;
            }
        }
        for k in 0..classes {
            let out_row = &mut out[k * locations..(k + 1) * locations];
            for (o, &s) in out_row.iter_mut().zip(&sum) {
                *o = *o / s;
            }
        }
        let out = Tensor::from_vec(&shape, out);
        let rg = self.needs_grad(&[input]);
        Ok(self.push(
            out,
            rg,
            Op::SoftmaxChannels {
                input,
                classes,
                locations,
            },
        ))
    }

    /// `a (m x k) * b (k x n)`.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> TapeResult<ValueId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TapeError::ShapeMismatch(format!(
                "matmul: {:?} x {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::ZERO; m * n];
        matmul(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let out = Tensor::from_vec(&[m, n], out);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(out, rg, Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose2d(&mut self, input: ValueId) -> TapeResult<ValueId> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 2 {
            return Err(TapeError::ShapeMismatch(format!(
                "transpose2d: expected matrix, got {:?}",
                shape
            )));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let mut out = vec![E::ZERO; rows * cols];
        transpose(self.value(input).data(), rows, cols, &mut out);
        let out = Tensor::from_vec(&[cols, rows], out);
        let rg = self.needs_grad(&[input]);
        Ok(self.push(out, rg, Op::Transpose2d { input, rows, cols }))
    }

    /// Softmax over each row of a matrix (attention weights).
    pub fn row_softmax(&mut self, input: ValueId) -> TapeResult<ValueId> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 2 {
            return Err(TapeError::ShapeMismatch(format!(
                "row_softmax: expected matrix, got {:?}",
                shape
            )));
        }
        if !self.value(input).all_finite() {
            return Err(TapeError::NonFiniteInput("row_softmax"));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let mut out = vec![E::ZERO; rows * cols];
        row_softmax(self.value(input).data(), rows, cols, &mut out);
        let out = Tensor::from_vec(&shape, out);
        let rg = self.needs_grad(&[input]);
        Ok(self.push(out, rg, Op::RowSoftmax { input, rows, cols }))
    }

    /// Copies columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, input: ValueId, start: usize, len: usize) -> TapeResult<ValueId> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 2 || start + len > shape[1] {
            return Err(TapeError::ShapeMismatch(format!(
                "slice_cols: columns {}..{} of {:?}",
                start,
                start + len,
                shape
            )));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::from_vec(&[rows, len], out);
        let rg = self.needs_grad(&[input]);
        Ok(self.push(
            out,
            rg,
            Op::SliceCols {
                input,
                cols,
                start,
                len,
            },
        ))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, inputs: &[ValueId]) -> TapeResult<ValueId> {
        if inputs.is_empty() {
            return Err(TapeError::ShapeMismatch("concat_cols: no inputs".into()));
        }
        let rows = self.value(inputs[0]).shape()[0];
        let mut parts = Vec::with_capacity(inputs.len());
        let mut total_cols = 0;
        for &id in inputs {
            let s = self.value(id).shape();
            if s.len() != 2 || s[0] != rows {
                return Err(TapeError::ShapeMismatch(format!(
                    "concat_cols: {:?} does not have {} rows",
                    s, rows
                )));
            }
            parts.push((id, s[1]));
            total_cols += s[1];
        }
        let mut out = vec![E::ZERO; rows * total_cols];
        let mut offset = 0;
        for &(id, cols) in &parts {
            let src = self.value(id).data();
            for r in 0..rows {
                out[r * total_cols + offset..r * total_cols + offset + cols]
                    .copy_from_slice(&src[r * cols..(r + 1) * cols]);
            }
            offset += cols;
        }
        let out = Tensor::from_vec(&[rows, total_cols], out);
        let rg = self.needs_grad(inputs);
        Ok(self.push(out, rg, Op::ConcatCols { parts, rows }))
    }

    /// Same data under a new shape (element count preserved).
    pub fn reshape(&mut self, input: ValueId, shape: &[usize]) -> TapeResult<ValueId> {
        if shape.iter().product::<usize>() != self.value(input).len() {
            return Err(TapeError::ShapeMismatch(format!(
                "reshape: {:?} -> {:?}",
                self.value(input).shape(),
                shape
            )));
        }
        let out = Tensor::from_vec(shape, self.value(input).data().to_vec());
        let rg = self.needs_grad(&[input]);
        Ok(self.push(out, rg, Op::Reshape(input)))
    }

    pub fn sum_all(&mut self, input: ValueId) -> ValueId {
        let mut acc = E::ZERO;
        for &v in self.value(input).data() {
            acc += v;
        }
        let rg = self.needs_grad(&[input]);
        self.push(Tensor::scalar(acc), rg, Op::SumAll(input))
    }

    /// Per-channel affine map over `[C, ...]`: `out[c, s] = x[c, s] * gamma[c] + beta[c]`.
    pub fn channel_affine(
        &mut self,
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
    ) -> TapeResult<ValueId> {
        let shape = self.value(input).shape().to_vec();
        if shape.is_empty() {
            return Err(TapeError::ShapeMismatch(
                "channel_affine: scalar input".into(),
            ));
        }
        let channels = shape[0];
        let locations: usize = shape[1..].iter().product();
        if self.value(gamma).shape() != [channels] || self.value(beta).shape() != [channels] {
            return Err(TapeError::ShapeMismatch(format!(
                "channel_affine: gamma {:?} / beta {:?} vs {channels} channels",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = Vec::with_capacity(x.len());
        for c in 0..channels {
            let (gc, bc) = (g[c], b[c]);
            for &v in &x[c * locations..(c + 1) * locations] {
                out.push(v * gc + bc);
            }
        }
        let out = Tensor::from_vec(&shape, out);
        let rg = self.needs_grad(&[input, gamma, beta]);
        Ok(self.push(
            out,
            rg,
            Op::ChannelAffine {
                input,
                gamma,
                beta,
                channels,
                locations,
            },
        ))
    }

    /// Fixed linear readout `sum(x * weights)`; the probe of choice for
    /// gradient checks because it weights every element differently.
    pub fn weighted_sum(&mut self, input: ValueId, weights: Tensor<E>) -> TapeResult<ValueId> {
        if self.value(input).shape() != weights.shape() {
            return Err(TapeError::ShapeMismatch(format!(
                "weighted_sum: {:?} vs {:?}",
                self.value(input).shape(),
                weights.shape()
            )));
        }
        let mut acc = E::ZERO;
        for (&x, &w) in self.value(input).data().iter().zip(weights.data()) {
            acc += x * w;
        }
        let rg = self.needs_grad(&[input]);
        Ok(self.push(
            Tensor::scalar(acc),
            rg,
            Op::WeightedSum { input, weights },
        ))
    }

    fn check_one_hot(probs: &Tensor<E>, target: &Tensor<E>) -> TapeResult<(usize, usize)> {
        if probs.shape() != target.shape() || probs.shape().is_empty() {
            return Err(TapeError::ShapeMismatch(format!(
                "loss: probs {:?} vs target {:?}",
                probs.shape(),
                target.shape()
            )));
        }
        let classes = probs.shape()[0];
        let locations: usize = probs.shape()[1..].iter().product();
        let t = target.data();
        let mut sums = vec![E::ZERO; locations];
        for k in 0..classes {
            for (s, &v) in sums.iter_mut().zip(&t[k * locations..(k + 1) * locations]) {
                if v != E::ZERO && v != E::ONE {
                    return Err(TapeError::NotOneHot);
                }
                *s += v;
            }
        }
        if sums.iter().any(|&s| s != E::ONE) {
            return Err(TapeError::NotOneHot);
        }
        Ok((classes, locations))
    }

    /// Mean negative log-probability of the true class per spatial location,
    /// with probabilities clamped to `[1e-7, 1]` before the log.
    pub fn cross_entropy(&mut self, probs: ValueId, target: Tensor<E>) -> TapeResult<ValueId> {
        let (_, locations) = Self::check_one_hot(self.value(probs), &target)?;
        let p = self.value(probs).data();
        let t = target.data();
        let floor = E::from_f64(PROB_FLOOR);
        let mut acc = E::ZERO;
        for (&pv, &tv) in p.iter().zip(t) {
            if tv == E::ONE {
                let clamped = pv.maximum(floor);
                let clamped = if clamped > E::ONE { E::ONE } else { clamped };
                acc += -(clamped.ln());
            }
        }
        let loss = acc / E::from_f64(locations as f64);
        let rg = self.needs_grad(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                probs,
                target,
                locations,
            },
        ))
    }

    /// Cross-entropy fused with the channel softmax: same clamped value as
    /// `softmax_channels` + `cross_entropy`, but the backward rule is the
    /// exact identity d(loss)/d(logits) = (softmax - target) / N, which
    /// stays alive even when saturated probabilities underflow to zero.
    pub fn cross_entropy_logits(
        &mut self,
        logits: ValueId,
        target: Tensor<E>,
    ) -> TapeResult<ValueId> {
        if !self.value(logits).all_finite() {
            return Err(TapeError::NonFiniteInput("cross_entropy_logits"));
        }
        let (_, locations) = Self::check_one_hot(self.value(logits), &target)?;
        let shape = self.value(logits).shape().to_vec();
        let classes = shape[0];
        let x = self.value(logits).data();

        // Stable softmax over the channel axis.
        let mut max = vec![E::from_f64(f64::NEG_INFINITY); locations];
        for k in 0..classes {
            for (m, &v) in max.iter_mut().zip(&x[k * locations..(k + 1) * locations]) {
                *m = m.maximum(v);
            }
        }
        let mut probs = vec![E::ZERO; x.len()];
        let mut sum = vec![E::ZERO; locations];
        for k in 0..classes {
            let row = &x[k * locations..(k + 1) * locations];
            let out_row = &mut probs[k * locations..(k + 1) * locations];
            for ((o, &v), (&m, s)) in out_row
                .iter_mut()
                .zip(row)
                .zip(max.iter().zip(sum.iter_mut()))
            {
                let e = (v - m).exp();
                *o = e;
                *s += e;
            }
        }
        for k in 0..classes {
            let out_row = &mut probs[k * locations..(k + 1) * locations];
            for (o, &s) in out_row.iter_mut().zip(&sum) {
                *o = *o / s;
            }
        }

        let floor = E::from_f64(PROB_FLOOR);
        let mut acc = E::ZERO;
        for (&pv, &tv) in probs.iter().zip(target.data()) {
            if tv == E::ONE {
                let clamped = pv.maximum(floor);
                let clamped = if clamped > E::ONE { E::ONE } else { clamped };
                acc += -(clamped.ln());
            }
        }
        let loss = acc / E::from_f64(locations as f64);
        let probs = Tensor::from_vec(&shape, probs);
        let rg = self.needs_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropyLogits {
                logits,
                probs,
                target,
                locations,
            },
        ))
    }

    /// `1 - mean_k soft-Dice(probs_k, target_k)` with epsilon smoothing.
    pub fn dice_loss(&mut self, probs: ValueId, target: Tensor<E>) -> TapeResult<ValueId> {
        let (classes, locations) = Self::check_one_hot(self.value(probs), &target)?;
        let p = self.value(probs).data();
        let t = target.data();
        let eps = E::from_f64(DICE_EPSILON);
        let mut mean_dice = E::ZERO;
        for k in 0..classes {
            let pr = &p[k * locations..(k + 1) * locations];
            let tr = &t[k * locations..(k + 1) * locations];
            let mut inter = E::ZERO;
            let mut p_sum = E::ZERO;
            let mut t_sum = E::ZERO;
            for (&pv, &tv) in pr.iter().zip(tr) {
                inter += pv * tv;
                p_sum += pv;
                t_sum += tv;
            }
            let num = E::from_f64(2.0) * inter + eps;
            let den = p_sum + t_sum + eps;
            mean_dice += num / den;
        }
        mean_dice = mean_dice / E::from_f64(classes as f64);
        let loss = E::ONE - mean_dice;
        let rg = self.needs_grad(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::DiceLoss {
                probs,
                target,
                classes,
                locations,
            },
        ))
    }

    fn wants_grad(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Propagates `d(root)/d(node)` into every `requires_grad` ancestor of a
    /// scalar root. Each call runs in fresh buffers and then adds its result
    /// into the persistent per-node gradients, so repeated calls without a
    /// fresh tape accumulate.
    pub fn backward(&mut self, root: ValueId) -> TapeResult<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(TapeError::NotScalarRoot);
        }
        let mut pass: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        pass[root.0] = Some(vec![E::ONE]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = pass[i].take() else {
                continue;
            };
            self.propagate(i, &gout, &mut pass);
            match &mut self.grads[i] {
                None => self.grads[i] = Some(gout),
                Some(acc) => {
                    for (a, &g) in acc.iter_mut().zip(&gout) {
                        *a += g;
                    }
                }
            }
        }
        Ok(())
    }

    /// Pass-local gradient buffer for `id`, created zeroed on first touch.
    fn pass_grad<'p>(&self, pass: &'p mut [Option<Vec<E>>], id: ValueId) -> &'p mut Vec<E> {
        pass[id.0].get_or_insert_with(|| vec![E::ZERO; self.nodes[id.0].value.len()])
    }

    fn propagate(&self, idx: usize, gout: &[E], pass: &mut [Option<Vec<E>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &side in &[*a, *b] {
                    if self.wants_grad(side) {
                        let g = self.pass_grad(pass, side);
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    }
                }
            }
            Op::Scale(x, factor) => {
                if self.wants_grad(*x) {
                    let factor = *factor;
                    let g = self.pass_grad(pass, *x);
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += factor * go;
                    }
                }
            }
            Op::Relu(x) => {
                if self.wants_grad(*x) {
                    // Subgradient at exactly 0 is defined as 0.
                    let xv = self.nodes[x.0].value.data();
                    let g = self.pass_grad(pass, *x);
                    for ((gi, &go), &v) in g.iter_mut().zip(gout).zip(xv) {
                        if v > E::ZERO {
                            *gi += go;
                        }
                    }
                }
            }
            Op::Conv3d {
                input,
                weight,
                bias,
                c_in,
                c_out,
                k,
                ext,
            } => {
                if self.wants_grad(*input) {
                    let w_data = self.nodes[weight.0].value.data();
                    let gin = self.pass_grad(pass, *input);
                    conv3d_backward_input(gout, *c_out, *ext, w_data, *c_in, *k, gin);
                }
                if self.wants_grad(*weight) || self.wants_grad(*bias) {
                    let input_data = self.nodes[input.0].value.data();
                    self.pass_grad(pass, *weight);
                    self.pass_grad(pass, *bias);
                    let mut gw = pass[weight.0].take().unwrap();
                    let mut gb = pass[bias.0].take().unwrap();
                    conv3d_backward_params(
                        gout, *c_out, *ext, input_data, *c_in, *k, &mut gw, &mut gb,
                    );
                    pass[weight.0] = Some(gw);
                    pass[bias.0] = Some(gb);
                }
            }
            Op::MaxPool3d { input, argmax } => {
                if self.wants_grad(*input) {
                    let gin = self.pass_grad(pass, *input);
                    maxpool3d_backward(gout, argmax, gin);
                }
            }
            Op::AvgPool3d {
                input,
                channels,
                in_ext,
            } => {
                if self.wants_grad(*input) {
                    let (channels, in_ext) = (*channels, *in_ext);
                    let gin = self.pass_grad(pass, *input);
                    avgpool3d_backward(gout, channels, in_ext, gin);
                }
            }
            Op::Upsample3d {
                input,
                channels,
                in_ext,
            } => {
                if self.wants_grad(*input) {
                    let (channels, in_ext) = (*channels, *in_ext);
                    let gin = self.pass_grad(pass, *input);
                    upsample3d_backward(gout, channels, in_ext, gin);
                }
            }
            Op::ConcatChannels { a, b, a_len } => {
                if self.wants_grad(*a) {
                    let g = self.pass_grad(pass, *a);
                    for (gi, &go) in g.iter_mut().zip(&gout[..*a_len]) {
                        *gi += go;
                    }
                }
                if self.wants_grad(*b) {
                    let g = self.pass_grad(pass, *b);
                    for (gi, &go) in g.iter_mut().zip(&gout[*a_len..]) {
                        *gi += go;
                    }
                }
            }
            Op::SoftmaxChannels {
                input,
                classes,
                locations,
            } => {
                if self.wants_grad(*input) {
                    let (classes, locations) = (*classes, *locations);
                    let s = self.nodes[idx].value.data();
                    // dot[loc] = sum_k gout[k,loc] * p[k,loc]
                    let mut dot = vec![E::ZERO; locations];
                    for k in 0..classes {
                        let sp = &s[k * locations..(k + 1) * locations];
                        let gp = &gout[k * locations..(k + 1) * locations];
                        for ((d, &sv), &gv) in dot.iter_mut().zip(sp).zip(gp) {
                            *d += sv * gv;
                        }
                    }
                    let gin = self.pass_grad(pass, *input);
                    for k in 0..classes {
                        let sp = &s[k * locations..(k + 1) * locations];
                        let gp = &gout[k * locations..(k + 1) * locations];
                        let gi = &mut gin[k * locations..(k + 1) * locations];
                        for (((g, &sv), &gv), &d) in gi.iter_mut().zip(sp).zip(gp).zip(&dot) {
                            *g += sv * (gv - d);
                        }
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.wants_grad(*a) {
                    let b_data = self.nodes[b.0].value.data();
                    let ga = self.pass_grad(pass, *a);
                    // gA[i,p] += dot(gout_row_i, b_row_p)
                    for i in 0..m {
                        let g_row = &gout[i * n..(i + 1) * n];
                        let ga_row = &mut ga[i * k..(i + 1) * k];
                        for (p, gaa) in ga_row.iter_mut().enumerate() {
                            let b_row = &b_data[p * n..(p + 1) * n];
                            let mut acc = E::ZERO;
                            for (&g, &bv) in g_row.iter().zip(b_row) {
                                acc += g * bv;
                            }
                            *gaa += acc;
                        }
                    }
                }
                if self.wants_grad(*b) {
                    let a_data = self.nodes[a.0].value.data();
                    let gb = self.pass_grad(pass, *b);
                    // gB[p,j] += sum_i a[i,p] * gout[i,j]
                    for i in 0..m {
                        let a_row = &a_data[i * k..(i + 1) * k];
                        let g_row = &gout[i * n..(i + 1) * n];
                        for (p, &av) in a_row.iter().enumerate() {
                            let gb_row = &mut gb[p * n..(p + 1) * n];
                            for (gbb, &g) in gb_row.iter_mut().zip(g_row) {
                                *gbb += av * g;
                            }
                        }
                    }
                }
            }
            Op::Transpose2d { input, rows, cols } => {
                if self.wants_grad(*input) {
                    let (rows, cols) = (*rows, *cols);
                    let g = self.pass_grad(pass, *input);
                    // gout has shape [cols, rows].
                    for r in 0..rows {
                        for c in 0..cols {
                            g[r * cols + c] += gout[c * rows + r];
                        }
                    }
                }
            }
            Op::RowSoftmax { input, rows, cols } => {
                if self.wants_grad(*input) {
                    let (rows, cols) = (*rows, *cols);
                    let s = self.nodes[idx].value.data();
                    let gin = self.pass_grad(pass, *input);
                    row_softmax_backward(s, gout, rows, cols, gin);
                }
            }
            Op::SliceCols {
                input,
                cols,
                start,
                len,
            } => {
                if self.wants_grad(*input) {
                    let (cols, start, len) = (*cols, *start, *len);
                    let g = self.pass_grad(pass, *input);
                    let rows = g.len() / cols;
                    for r in 0..rows {
                        let src = &gout[r * len..(r + 1) * len];
                        let dst = &mut g[r * cols + start..r * cols + start + len];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::ConcatCols { parts, rows } => {
                let rows = *rows;
                let total_cols: usize = parts.iter().map(|&(_, c)| c).sum();
                let mut offset = 0;
                for &(id, cols) in parts {
                    if self.wants_grad(id) {
                        let g = self.pass_grad(pass, id);
                        for r in 0..rows {
                            let src =
                                &gout[r * total_cols + offset..r * total_cols + offset + cols];
                            let dst = &mut g[r * cols..(r + 1) * cols];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += cols;
                }
            }
            Op::Reshape(input) => {
                if self.wants_grad(*input) {
                    let g = self.pass_grad(pass, *input);
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                }
            }
            Op::SumAll(input) => {
                if self.wants_grad(*input) {
                    let go = gout[0];
                    let g = self.pass_grad(pass, *input);
                    for gi in g.iter_mut() {
                        *gi += go;
                    }
                }
            }
            Op::WeightedSum { input, weights } => {
                if self.wants_grad(*input) {
                    let go = gout[0];
                    let g = self.pass_grad(pass, *input);
                    for (gi, &w) in g.iter_mut().zip(weights.data()) {
                        *gi += go * w;
                    }
                }
            }
            Op::ChannelAffine {
                input,
                gamma,
                beta,
                channels,
                locations,
            } => {
                let (channels, locations) = (*channels, *locations);
                if self.wants_grad(*input) {
                    let g_data = self.nodes[gamma.0].value.data();
                    let gin = self.pass_grad(pass, *input);
                    for (c, &gc) in g_data.iter().enumerate().take(channels) {
                        let rng = c * locations..(c + 1) * locations;
                        for (gi, &go) in gin[rng.clone()].iter_mut().zip(&gout[rng]) {
                            *gi += go * gc;
                        }
                    }
                }
                if self.wants_grad(*gamma) {
                    let x = self.nodes[input.0].value.data();
                    let gg = self.pass_grad(pass, *gamma);
                    for (c, slot) in gg.iter_mut().enumerate().take(channels) {
                        let rng = c * locations..(c + 1) * locations;
                        let mut acc = E::ZERO;
                        for (&go, &xv) in gout[rng.clone()].iter().zip(&x[rng]) {
                            acc += go * xv;
                        }
                        *slot += acc;
                    }
                }
                if self.wants_grad(*beta) {
                    let gb = self.pass_grad(pass, *beta);
                    for (c, slot) in gb.iter_mut().enumerate().take(channels) {
                        let mut acc = E::ZERO;
                        for &go in &gout[c * locations..(c + 1) * locations] {
                            acc += go;
                        }
                        *slot += acc;
                    }
                }
            }
            Op::CrossEntropy {
                probs,
                target,
                locations,
            } => {
                if self.wants_grad(*probs) {
                    let floor = E::from_f64(PROB_FLOOR);
                    let inv_n = E::ONE / E::from_f64(*locations as f64);
                    let go = gout[0];
                    let p = self.nodes[probs.0].value.data();
                    let t = target.data();
                    let g = self.pass_grad(pass, *probs);
                    for ((gi, &pv), &tv) in g.iter_mut().zip(p).zip(t) {
                        // Clamped entries sit on the flat part of the clamp.
                        if tv == E::ONE && pv > floor && pv <= E::ONE {
                            *gi += -(go * inv_n) / pv;
                        }
                    }
                }
            }
            Op::CrossEntropyLogits {
                logits,
                probs,
                target,
                locations,
            } => {
                if self.wants_grad(*logits) {
                    let inv_n = E::ONE / E::from_f64(*locations as f64);
                    let go = gout[0];
                    let g = self.pass_grad(pass, *logits);
                    for ((gi, &pv), &tv) in g.iter_mut().zip(probs.data()).zip(target.data()) {
                        *gi += go * inv_n * (pv - tv);
                    }
                }
            }
            Op::DiceLoss {
                probs,
                target,
                classes,
                locations,
            } => {
                if self.wants_grad(*probs) {
                    let (classes, locations) = (*classes, *locations);
                    let eps = E::from_f64(DICE_EPSILON);
                    let two = E::from_f64(2.0);
                    let inv_k = E::ONE / E::from_f64(classes as f64);
                    let go = gout[0];
                    let p = self.nodes[probs.0].value.data();
                    let t = target.data();
                    let g = self.pass_grad(pass, *probs);
                    for k in 0..classes {
                        let pr = &p[k * locations..(k + 1) * locations];
                        let tr = &t[k * locations..(k + 1) * locations];
                        let mut inter = E::ZERO;
                        let mut p_sum = E::ZERO;
                        let mut t_sum = E::ZERO;
                        for (&pv, &tv) in pr.iter().zip(tr) {
                            inter += pv * tv;
                            p_sum += pv;
                            t_sum += tv;
                        }
                        let num = two * inter + eps;
                        let den = p_sum + t_sum + eps;
                        let inv_den2 = E::ONE / (den * den);
                        let gr = &mut g[k * locations..(k + 1) * locations];
                        // d(loss)/dp = -(1/K) * (2*t*den - num) / den^2
                        for (gi, &tv) in gr.iter_mut().zip(tr) {
                            *gi += -(go * inv_k) * (two * tv * den - num) * inv_den2;
                        }
                    }
                }
            }
        }
    }
}
