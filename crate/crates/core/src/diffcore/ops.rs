//! Differentiable primitives.
//!
//! Sequence-shaped inputs use the layout `[..batch, positions, channels]`; all
//! leading axes are flattened into one batch axis. Position masks hold one flag
//! per `(batch, position)` cell.

use super::array::Array;
use super::graph::{GradSink, Graph, NodeId};
use crate::error::{shape_err, Error, Result};

/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel statistics used by batch norm in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScaleConst(NodeId, f64),
    AddConst(NodeId),
    Relu(NodeId),
    Square(NodeId),
    SumAll(NodeId),
    SumLast(NodeId),
    Dot(NodeId, NodeId),
    Euclidean(NodeId, NodeId),
    ConcatLast { inputs: Vec<NodeId>, widths: Vec<usize> },
    StackLast(Vec<NodeId>),
    Reshape(NodeId),
    SliceSequence { input: NodeId, offset: usize },
    ApplyMask { input: NodeId, mask: Vec<bool> },
    Conv1dSame { input: NodeId, kernels: NodeId, bias: NodeId },
    BatchNorm(Box<BatchNormRecord>),
    Prelu { input: NodeId, slopes: NodeId },
    PoolSame { input: NodeId, argmax: Vec<usize> },
    ScaleUnit { input: NodeId, scale: NodeId },
    Affine { input: NodeId, weights: NodeId, bias: NodeId },
    SoftmaxMasked(NodeId),
    MatMul(NodeId, NodeId),
    MatMulTransB(NodeId, NodeId),
    BlockMix { weights: NodeId, maps: Vec<NodeId> },
}

pub(crate) struct BatchNormRecord {
    input: NodeId,
    gamma: NodeId,
    beta: NodeId,
    mode: Mode,
    mask: Option<Vec<bool>>,
    /// Normalized input, zero at masked cells.
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Batch statistics (train mode only).
    batch: Option<RunningStats>,
    valid_count: usize,
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Dot(a, b) | Op::Euclidean(a, b) => {
                vec![*a, *b]
            }
            Op::MatMul(a, b) | Op::MatMulTransB(a, b) => vec![*a, *b],
            Op::ScaleConst(x, _)
            | Op::AddConst(x)
            | Op::Relu(x)
            | Op::Square(x)
            | Op::SumAll(x)
            | Op::SumLast(x)
            | Op::Reshape(x) => vec![*x],
            Op::ConcatLast { inputs, .. } => inputs.clone(),
            Op::StackLast(inputs) => inputs.clone(),
            Op::SliceSequence { input, .. }
            | Op::ApplyMask { input, .. }
            | Op::PoolSame { input, .. }
            | Op::SoftmaxMasked(input) => vec![*input],
            Op::Conv1dSame {
                input,
                kernels,
                bias,
            } => vec![*input, *kernels, *bias],
            Op::BatchNorm(r) => vec![r.input, r.gamma, r.beta],
            Op::Prelu { input, slopes } => vec![*input, *slopes],
            Op::ScaleUnit { input, scale } => vec![*input, *scale],
            Op::Affine {
                input,
                weights,
                bias,
            } => vec![*input, *weights, *bias],
            Op::BlockMix { weights, maps } => {
                let mut v = vec![*weights];
                v.extend(maps);
                v
            }
        }
    }

    pub(crate) fn backward(&self, out: &Array, dy: &[f64], sink: &mut GradSink<'_>) {
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                sink.add(*a, |g| axpy(g, dy, 1.0));
                sink.add(*b, |g| axpy(g, dy, 1.0));
            }
            Op::Sub(a, b) => {
                sink.add(*a, |g| axpy(g, dy, 1.0));
                sink.add(*b, |g| axpy(g, dy, -1.0));
            }
            Op::Mul(a, b) => {
                let av = sink.value(*a).data().to_vec();
                let bv = sink.value(*b).data().to_vec();
                sink.add(*a, |g| {
                    for ((g, d), y) in g.iter_mut().zip(dy).zip(&bv) {
                        *g += d * y;
                    }
                });
                sink.add(*b, |g| {
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(&av) {
                        *g += d * x;
                    }
                });
            }
            Op::ScaleConst(x, c) => sink.add(*x, |g| axpy(g, dy, *c)),
            Op::AddConst(x) => sink.add(*x, |g| axpy(g, dy, 1.0)),
            Op::Relu(x) => {
                let xv = sink.value(*x).data().to_vec();
                sink.add(*x, |g| {
                    for ((g, d), v) in g.iter_mut().zip(dy).zip(&xv) {
                        if *v > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::Square(x) => {
                let xv = sink.value(*x).data().to_vec();
                sink.add(*x, |g| {
                    for ((g, d), v) in g.iter_mut().zip(dy).zip(&xv) {
                        *g += 2.0 * v * d;
                    }
                });
            }
            Op::SumAll(x) => sink.add(*x, |g| g.iter_mut().for_each(|g| *g += dy[0])),
            Op::SumLast(x) => {
                let k = sink.value(*x).last_dim();
                sink.add(*x, |g| {
                    for (row, d) in g.chunks_mut(k).zip(dy) {
                        row.iter_mut().for_each(|g| *g += d);
                    }
                });
            }
            Op::Dot(a, b) => {
                let k = sink.value(*a).last_dim();
                let av = sink.value(*a).data().to_vec();
                let bv = sink.value(*b).data().to_vec();
                sink.add(*a, |g| {
                    for (r, d) in dy.iter().enumerate() {
                        for j in 0..k {
                            g[r * k + j] += d * bv[r * k + j];
                        }
                    }
                });
                sink.add(*b, |g| {
                    for (r, d) in dy.iter().enumerate() {
                        for j in 0..k {
                            g[r * k + j] += d * av[r * k + j];
                        }
                    }
                });
            }
            Op::Euclidean(a, b) => {
                let k = sink.value(*a).last_dim();
                let av = sink.value(*a).data();
                let bv = sink.value(*b).data();
                // d dist / d a = (a - b) / dist, subgradient 0 at dist == 0
                let mut da = vec![0.0; av.len()];
                for (r, (d, dist)) in dy.iter().zip(out.data()).enumerate() {
                    if *dist > 0.0 {
                        for j in 0..k {
                            da[r * k + j] = d * (av[r * k + j] - bv[r * k + j]) / dist;
                        }
                    }
                }
                sink.add(*a, |g| axpy(g, &da, 1.0));
                sink.add(*b, |g| axpy(g, &da, -1.0));
            }
            Op::ConcatLast { inputs, widths } => {
                let total: usize = widths.iter().sum();
                let rows = dy.len() / total.max(1);
                let mut offset = 0;
                for (id, &w) in inputs.iter().zip(widths) {
                    sink.add(*id, |g| {
                        for r in 0..rows {
                            for j in 0..w {
                                g[r * w + j] += dy[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::StackLast(inputs) => {
                let k = inputs.len();
                for (t, id) in inputs.iter().enumerate() {
                    sink.add(*id, |g| {
                        for (p, g) in g.iter_mut().enumerate() {
                            *g += dy[p * k + t];
                        }
                    });
                }
            }
            Op::Reshape(x) => sink.add(*x, |g| axpy(g, dy, 1.0)),
            Op::SliceSequence { input, offset } => sink.add(*input, |g| {
                axpy(&mut g[*offset..*offset + dy.len()], dy, 1.0)
            }),
            Op::ApplyMask { input, mask } => {
                let c = out.last_dim();
                sink.add(*input, |g| {
                    for (p, valid) in mask.iter().enumerate() {
                        if *valid {
                            axpy(&mut g[p * c..(p + 1) * c], &dy[p * c..(p + 1) * c], 1.0);
                        }
                    }
                });
            }
            Op::Conv1dSame {
                input,
                kernels,
                bias,
            } => conv1d_backward(*input, *kernels, *bias, dy, sink),
            Op::BatchNorm(rec) => batch_norm_backward(rec, dy, sink),
            Op::Prelu { input, slopes } => {
                let xv = sink.value(*input).data().to_vec();
                let a = sink.value(*slopes).data().to_vec();
                let c = a.len();
                sink.add(*input, |g| {
                    for (i, (g, d)) in g.iter_mut().zip(dy).enumerate() {
                        *g += if xv[i] >= 0.0 { *d } else { a[i % c] * d };
                    }
                });
                sink.add(*slopes, |g| {
                    for (i, d) in dy.iter().enumerate() {
                        if xv[i] < 0.0 {
                            g[i % c] += d * xv[i];
                        }
                    }
                });
            }
            Op::PoolSame { input, argmax } => sink.add(*input, |g| {
                for (d, &src) in dy.iter().zip(argmax) {
                    if src != usize::MAX {
                        g[src] += d;
                    }
                }
            }),
            Op::ScaleUnit { input, scale } => {
                let sc = sink.value(*scale).data()[0];
                let xv = sink.value(*input).data().to_vec();
                sink.add(*input, |g| axpy(g, dy, sc));
                sink.add(*scale, |g| {
                    g[0] += dy.iter().zip(&xv).map(|(d, x)| d * x).sum::<f64>();
                });
            }
            Op::Affine {
                input,
                weights,
                bias,
            } => {
                let x = sink.value(*input).data().to_vec();
                let w = sink.value(*weights).clone();
                let (a, b) = (w.shape()[0], w.shape()[1]);
                let rows = x.len() / a;
                sink.add(*input, |g| {
                    for r in 0..rows {
                        for i in 0..a {
                            let mut acc = 0.0;
                            for o in 0..b {
                                acc += dy[r * b + o] * w.data()[i * b + o];
                            }
                            g[r * a + i] += acc;
                        }
                    }
                });
                sink.add(*weights, |g| {
                    for r in 0..rows {
                        for i in 0..a {
                            let xi = x[r * a + i];
                            for o in 0..b {
                                g[i * b + o] += xi * dy[r * b + o];
                            }
                        }
                    }
                });
                sink.add(*bias, |g| {
                    for r in 0..rows {
                        axpy(g, &dy[r * b..(r + 1) * b], 1.0);
                    }
                });
            }
            Op::SoftmaxMasked(input) => {
                let k = out.last_dim();
                let y = out.data();
                sink.add(*input, |g| {
                    for r in 0..y.len() / k {
                        let row = r * k..(r + 1) * k;
                        let inner: f64 = y[row.clone()].iter().zip(&dy[row.clone()]).map(|(a, b)| a * b).sum();
                        for j in row {
                            g[j] += y[j] * (dy[j] - inner);
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let av = sink.value(*a).clone();
                let bv = sink.value(*b).clone();
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                sink.add(*a, |g| {
                    for i in 0..m {
                        for t in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += dy[i * n + j] * bv.data()[t * n + j];
                            }
                            g[i * k + t] += acc;
                        }
                    }
                });
                sink.add(*b, |g| {
                    for i in 0..m {
                        for t in 0..k {
                            let x = av.data()[i * k + t];
                            for j in 0..n {
                                g[t * n + j] += x * dy[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::MatMulTransB(a, b) => {
                let av = sink.value(*a).clone();
                let bv = sink.value(*b).clone();
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                sink.add(*a, |g| {
                    for i in 0..m {
                        for j in 0..n {
                            let d = dy[i * n + j];
                            for t in 0..k {
                                g[i * k + t] += d * bv.data()[j * k + t];
                            }
                        }
                    }
                });
                sink.add(*b, |g| {
                    for i in 0..m {
                        for j in 0..n {
                            let d = dy[i * n + j];
                            for t in 0..k {
                                g[j * k + t] += d * av.data()[i * k + t];
                            }
                        }
                    }
                });
            }
            Op::BlockMix { weights, maps } => {
                let w = sink.value(*weights).clone();
                let blocks = maps.len();
                let s = out.last_dim();
                let rows = w.shape()[0];
                if sink.wants(*weights) {
                    let mut dw = vec![0.0; w.len()];
                    for (n, id) in maps.iter().enumerate() {
                        let g = sink.value(*id).data();
                        for i in 0..rows {
                            dw[i * blocks + n] = (0..s).map(|j| dy[i * s + j] * g[i * s + j]).sum();
                        }
                    }
                    sink.add(*weights, |g| axpy(g, &dw, 1.0));
                }
                for (n, id) in maps.iter().enumerate() {
                    sink.add(*id, |g| {
                        for i in 0..rows {
                            let a = w.data()[i * blocks + n];
                            for j in 0..s {
                                g[i * s + j] += a * dy[i * s + j];
                            }
                        }
                    });
                }
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn same_shape(a: &Array, b: &Array, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

/// `(batch, positions, channels)` of a sequence-shaped array.
fn seq_dims(a: &Array, what: &str) -> Result<(usize, usize, usize)> {
    let s = a.shape();
    if s.len() < 2 {
        return Err(shape_err!("{what}: expected [.., positions, channels], got {:?}", s));
    }
    let c = s[s.len() - 1];
    let h = s[s.len() - 2];
    let b = s[..s.len() - 2].iter().product();
    Ok((b, h, c))
}

fn check_mask(mask: Option<&[bool]>, cells: usize, what: &str) -> Result<()> {
    match mask {
        Some(m) if m.len() != cells => Err(shape_err!("{what}: mask has {} flags, expected {cells}", m.len())),
        _ => Ok(()),
    }
}

fn lead_shape(a: &Array) -> Vec<usize> {
    a.shape()[..a.rank().saturating_sub(1)].to_vec()
}

impl Graph {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "add")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let v = Array::new(x.shape().to_vec(), data)?;
        self.push(Op::Add(a, b), v, false, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "sub")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let v = Array::new(x.shape().to_vec(), data)?;
        self.push(Op::Sub(a, b), v, false, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "mul")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let v = Array::new(x.shape().to_vec(), data)?;
        self.push(Op::Mul(a, b), v, false, "mul")
    }

    pub fn scale_const(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let xv = self.value(x);
        let v = Array::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * c).collect())?;
        self.push(Op::ScaleConst(x, c), v, false, "scale_const")
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let xv = self.value(x);
        let v = Array::new(xv.shape().to_vec(), xv.data().iter().map(|v| v + c).collect())?;
        self.push(Op::AddConst(x), v, false, "add_const")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let v = Array::new(xv.shape().to_vec(), xv.data().iter().map(|v| v.max(0.0)).collect())?;
        self.push(Op::Relu(x), v, false, "relu")
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let v = Array::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * v).collect())?;
        self.push(Op::Square(x), v, false, "square")
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let total = self.value(x).data().iter().sum();
        self.push(Op::SumAll(x), Array::scalar(total), false, "sum_all")
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let k = xv.last_dim();
        let data = xv.data().chunks(k).map(|r| r.iter().sum()).collect();
        let v = Array::new(lead_shape(xv), data)?;
        self.push(Op::SumLast(x), v, false, "sum_last")
    }

    /// Inner product over the last axis.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "dot")?;
        let k = x.last_dim();
        let data = x
            .data()
            .chunks(k)
            .zip(y.data().chunks(k))
            .map(|(p, q)| p.iter().zip(q).map(|(u, v)| u * v).sum())
            .collect();
        let v = Array::new(lead_shape(x), data)?;
        self.push(Op::Dot(a, b), v, false, "dot")
    }

    /// Euclidean distance over the last axis.
    pub fn euclidean(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "euclidean")?;
        let k = x.last_dim();
        let data = x
            .data()
            .chunks(k)
            .zip(y.data().chunks(k))
            .map(|(p, q)| p.iter().zip(q).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt())
            .collect();
        let v = Array::new(lead_shape(x), data)?;
        self.push(Op::Euclidean(a, b), v, false, "euclidean")
    }

    /// Concatenates along the channel (last) axis, in argument order.
    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = inputs.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let lead = lead_shape(self.value(*first));
        let mut widths = Vec::with_capacity(inputs.len());
        for id in inputs {
            let v = self.value(*id);
            if lead_shape(v) != lead || v.rank() == 0 {
                return Err(shape_err!("concat: leading extents {:?} vs {:?}", lead_shape(v), lead));
            }
            widths.push(v.last_dim());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (id, &w) in inputs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*id).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let v = Array::new(shape, data)?;
        self.push(
            Op::ConcatLast {
                inputs: inputs.to_vec(),
                widths,
            },
            v,
            false,
            "concat_channels",
        )
    }

    /// Stacks equally shaped arrays along a new last axis.
    pub fn stack_last(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = inputs.first().ok_or_else(|| shape_err!("stack of nothing"))?;
        let shape = self.value(*first).shape().to_vec();
        for id in inputs {
            if self.value(*id).shape() != shape.as_slice() {
                return Err(shape_err!("stack: shape {:?} vs {:?}", self.value(*id).shape(), shape));
            }
        }
        let n = self.value(*first).len();
        let k = inputs.len();
        let mut data = vec![0.0; n * k];
        for (t, id) in inputs.iter().enumerate() {
            for (p, v) in self.value(*id).data().iter().enumerate() {
                data[p * k + t] = *v;
            }
        }
        let mut out_shape = shape;
        out_shape.push(k);
        let v = Array::new(out_shape, data)?;
        self.push(Op::StackLast(inputs.to_vec()), v, false, "stack_last")
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        self.push(Op::Reshape(x), v, false, "reshape")
    }

    /// First `len` positions of batch entry `index` from `[batch, positions, channels]`.
    pub fn slice_sequence(&mut self, x: NodeId, index: usize, len: usize) -> Result<NodeId> {
        let (b, h, c) = seq_dims(self.value(x), "slice_sequence")?;
        if index >= b || len > h {
            return Err(shape_err!("slice_sequence: entry {index} len {len} outside [{b}, {h}]"));
        }
        let offset = index * h * c;
        let data = self.value(x).data()[offset..offset + len * c].to_vec();
        let v = Array::new(vec![len, c], data)?;
        self.push(Op::SliceSequence { input: x, offset }, v, false, "slice_sequence")
    }

    /// Zeros every position whose mask flag is false.
    pub fn apply_mask(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.last_dim();
        check_mask(Some(mask), xv.len() / c.max(1), "apply_mask")?;
        let mut data = xv.data().to_vec();
        for (p, valid) in mask.iter().enumerate() {
            if !valid {
                data[p * c..(p + 1) * c].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let v = Array::new(xv.shape().to_vec(), data)?;
        self.push(
            Op::ApplyMask {
                input: x,
                mask: mask.to_vec(),
            },
            v,
            false,
            "apply_mask",
        )
    }

    /// Length-preserving 1-D convolution with zero padding of `(win-1)/2`.
    ///
    /// `kernels` is `[c_out, win, c_in]`, `bias` is `[c_out]`.
    pub fn conv1d_same(&mut self, input: NodeId, kernels: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let k = self.value(kernels);
        let bv = self.value(bias);
        let (batch, h, c_in) = seq_dims(x, "conv1d_same")?;
        if k.rank() != 3 {
            return Err(shape_err!("conv1d_same: kernels must be [c_out, win, c_in], got {:?}", k.shape()));
        }
        let (c_out, win, k_in) = (k.shape()[0], k.shape()[1], k.shape()[2]);
        if win % 2 == 0 {
            return Err(Error::Config(format!("conv1d_same: window {win} must be odd")));
        }
        if k_in != c_in {
            return Err(shape_err!("conv1d_same: input has {c_in} channels, kernels expect {k_in}"));
        }
        if bv.shape() != [c_out] {
            return Err(shape_err!("conv1d_same: bias {:?} for {c_out} outputs", bv.shape()));
        }
        let r = (win - 1) / 2;
        let (xd, kd, bd) = (x.data(), k.data(), bv.data());
        let mut out = vec![0.0; batch * h * c_out];
        for b in 0..batch {
            for i in 0..h {
                let dst = &mut out[(b * h + i) * c_out..(b * h + i + 1) * c_out];
                dst.copy_from_slice(bd);
                for d in 0..win {
                    let Some(p) = (i + d).checked_sub(r).filter(|p| *p < h) else {
                        continue;
                    };
                    let src = &xd[(b * h + p) * c_in..(b * h + p + 1) * c_in];
                    for (o, acc) in dst.iter_mut().enumerate() {
                        let kr = &kd[(o * win + d) * c_in..(o * win + d + 1) * c_in];
                        *acc += kr.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = c_out;
        let v = Array::new(shape, out)?;
        self.push(
            Op::Conv1dSame {
                input,
                kernels,
                bias,
            },
            v,
            false,
            "conv1d_same",
        )
    }

    /// Per-channel batch normalization over valid `(batch, position)` cells.
    ///
    /// Train mode normalizes with batch statistics (biased variance) and records
    /// them for [`Graph::batch_stats`]; eval mode uses `running`. Masked cells
    /// output zero.
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: Mode,
        running: Option<&RunningStats>,
        mask: Option<&[bool]>,
    ) -> Result<NodeId> {
        let x = self.value(input);
        let c = x.last_dim();
        if x.rank() == 0 {
            return Err(shape_err!("batch_norm: scalar input"));
        }
        let cells = x.len() / c.max(1);
        check_mask(mask, cells, "batch_norm")?;
        let (g, bt) = (self.value(gamma), self.value(beta));
        if g.shape() != [c] || bt.shape() != [c] {
            return Err(shape_err!("batch_norm: gamma/beta must be [{c}]"));
        }
        let valid = |p: usize| mask.is_none_or(|m| m[p]);
        let valid_count = (0..cells).filter(|&p| valid(p)).count();
        let (mean, var, batch) = match mode {
            Mode::Train => {
                if valid_count == 0 {
                    return Err(Error::Domain("batch_norm: no valid positions in train mode".into()));
                }
                let m = valid_count as f64;
                let mut mean = vec![0.0; c];
                for p in (0..cells).filter(|&p| valid(p)) {
                    for ch in 0..c {
                        mean[ch] += x.data()[p * c + ch];
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                let mut var = vec![0.0; c];
                for p in (0..cells).filter(|&p| valid(p)) {
                    for ch in 0..c {
                        let d = x.data()[p * c + ch] - mean[ch];
                        var[ch] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                let stats = RunningStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(stats))
            }
            Mode::Eval => {
                let stats = running.ok_or_else(|| {
                    Error::State("batch_norm: eval mode needs initialized running statistics".into())
                })?;
                if stats.mean.len() != c || stats.var.len() != c {
                    return Err(shape_err!("batch_norm: running statistics are not [{c}]"));
                }
                (stats.mean.clone(), stats.var.clone(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for p in (0..cells).filter(|&p| valid(p)) {
            for ch in 0..c {
                let i = p * c + ch;
                xhat[i] = (x.data()[i] - mean[ch]) * inv_std[ch];
                out[i] = g.data()[ch] * xhat[i] + bt.data()[ch];
            }
        }
        let v = Array::new(x.shape().to_vec(), out)?;
        let rec = BatchNormRecord {
            input,
            gamma,
            beta,
            mode,
            mask: mask.map(<[bool]>::to_vec),
            xhat,
            inv_std,
            batch,
            valid_count,
        };
        self.push(Op::BatchNorm(Box::new(rec)), v, false, "batch_norm")
    }

    /// Batch statistics computed by a train-mode batch-norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<&RunningStats> {
        match &self.nodes[id.0].op {
            Op::BatchNorm(rec) => rec.batch.as_ref(),
            _ => None,
        }
    }

    /// `x` where `x >= 0`, else `slope[channel] * x`.
    pub fn prelu(&mut self, input: NodeId, slopes: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let a = self.value(slopes);
        let c = x.last_dim();
        if a.shape() != [c] {
            return Err(shape_err!("prelu: {} slopes for {c} channels", a.len()));
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v >= 0.0 { v } else { a.data()[i % c] * v })
            .collect();
        let v = Array::new(x.shape().to_vec(), data)?;
        self.push(Op::Prelu { input, slopes }, v, false, "prelu")
    }

    /// Length-preserving max pooling over a centred window of `width` positions.
    ///
    /// Positions outside the sequence or masked never win; masked outputs are 0.
    pub fn pool_same(&mut self, input: NodeId, width: usize, mask: Option<&[bool]>) -> Result<NodeId> {
        if width.is_multiple_of(2) {
            return Err(Error::Config(format!("pool_same: width {width} must be odd")));
        }
        let x = self.value(input);
        let (batch, h, c) = seq_dims(x, "pool_same")?;
        check_mask(mask, batch * h, "pool_same")?;
        let valid = |p: usize| mask.is_none_or(|m| m[p]);
        let r = (width - 1) / 2;
        let mut out = vec![0.0; x.len()];
        let mut argmax = vec![usize::MAX; x.len()];
        for b in 0..batch {
            for i in 0..h {
                if !valid(b * h + i) {
                    continue;
                }
                let lo = i.saturating_sub(r);
                let hi = (i + r).min(h - 1);
                for ch in 0..c {
                    let mut best = usize::MAX;
                    for j in (lo..=hi).filter(|&j| valid(b * h + j)) {
                        let src = (b * h + j) * c + ch;
                        if best == usize::MAX || x.data()[src] > x.data()[best] {
                            best = src;
                        }
                    }
                    let dst = (b * h + i) * c + ch;
                    out[dst] = x.data()[best];
                    argmax[dst] = best;
                }
            }
        }
        let v = Array::new(x.shape().to_vec(), out)?;
        self.push(Op::PoolSame { input, argmax }, v, false, "pool_same")
    }

    /// Multiplies every element by a learnable one-element scale.
    pub fn scale_unit(&mut self, input: NodeId, scale: NodeId) -> Result<NodeId> {
        let sc = self.value(scale);
        if sc.len() != 1 {
            return Err(shape_err!("scale_unit: scale must have one element, got {:?}", sc.shape()));
        }
        let s = sc.data()[0];
        let x = self.value(input);
        let v = Array::new(x.shape().to_vec(), x.data().iter().map(|v| v * s).collect())?;
        self.push(Op::ScaleUnit { input, scale }, v, false, "scale_unit")
    }

    /// `input · weights + bias` applied to every row of the last axis.
    pub fn affine(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weights);
        let bv = self.value(bias);
        if w.rank() != 2 {
            return Err(shape_err!("affine: weights must be rank 2, got {:?}", w.shape()));
        }
        let (a, b) = (w.shape()[0], w.shape()[1]);
        if x.last_dim() != a || x.rank() == 0 {
            return Err(shape_err!("affine: input {:?} vs weights {:?}", x.shape(), w.shape()));
        }
        if bv.shape() != [b] {
            return Err(shape_err!("affine: bias {:?} for {b} outputs", bv.shape()));
        }
        let rows = x.len() / a;
        let mut out = vec![0.0; rows * b];
        for r in 0..rows {
            let dst = &mut out[r * b..(r + 1) * b];
            dst.copy_from_slice(bv.data());
            for i in 0..a {
                let xi = x.data()[r * a + i];
                for (o, d) in dst.iter_mut().enumerate() {
                    *d += xi * w.data()[i * b + o];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = b;
        let v = Array::new(shape, out)?;
        self.push(
            Op::Affine {
                input,
                weights,
                bias,
            },
            v,
            false,
            "affine",
        )
    }

    /// Row-wise softmax over the last axis; masked positions get exactly 0.
    pub fn softmax_masked(&mut self, input: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let x = self.value(input);
        let k = x.last_dim();
        if let Some(m) = mask {
            if m.len() != k {
                return Err(shape_err!("softmax_masked: mask has {} flags for {k} scores", m.len()));
            }
            if !m.iter().any(|v| *v) {
                return Err(Error::Domain("softmax_masked: every position is masked".into()));
            }
        }
        if k == 0 {
            return Err(Error::Domain("softmax_masked: no positions".into()));
        }
        let valid = |j: usize| mask.is_none_or(|m| m[j]);
        let mut out = vec![0.0; x.len()];
        for (row, dst) in x.data().chunks(k).zip(out.chunks_mut(k)) {
            let max = (0..k).filter(|&j| valid(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in (0..k).filter(|&j| valid(j)) {
                dst[j] = (row[j] - max).exp();
                total += dst[j];
            }
            dst.iter_mut().for_each(|v| *v /= total);
        }
        let v = Array::new(x.shape().to_vec(), out)?;
        self.push(Op::SoftmaxMasked(input), v, false, "softmax_masked")
    }

    /// `[m, k] × [k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0] {
            return Err(shape_err!("matmul: {:?} × {:?}", x.shape(), y.shape()));
        }
        let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for t in 0..k {
                let xv = x.data()[i * k + t];
                for j in 0..n {
                    out[i * n + j] += xv * y.data()[t * n + j];
                }
            }
        }
        let v = Array::new(vec![m, n], out)?;
        self.push(Op::MatMul(a, b), v, false, "matmul")
    }

    /// `[m, k] × [n, k]ᵀ`: every row of `a` dotted with every row of `b`.
    pub fn matmul_trans_b(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[1] {
            return Err(shape_err!("matmul_trans_b: {:?} × {:?}ᵀ", x.shape(), y.shape()));
        }
        let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[0]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|t| x.data()[i * k + t] * y.data()[j * k + t]).sum();
            }
        }
        let v = Array::new(vec![m, n], out)?;
        self.push(Op::MatMulTransB(a, b), v, false, "matmul_trans_b")
    }

    /// Position-wise weighted sum of equally shaped maps.
    ///
    /// `weights` is `[rows, N]`, each map is `[rows, s]`; output row `i` is
    /// `Σ_n weights[i][n] · maps[n][i]`.
    pub fn block_mix(&mut self, weights: NodeId, maps: &[NodeId]) -> Result<NodeId> {
        let w = self.value(weights);
        let n = maps.len();
        if n == 0 || w.rank() != 2 || w.shape()[1] != n {
            return Err(shape_err!("block_mix: weights {:?} for {n} maps", w.shape()));
        }
        let rows = w.shape()[0];
        let shape = self.value(maps[0]).shape().to_vec();
        if shape.len() != 2 || shape[0] != rows {
            return Err(shape_err!("block_mix: map {:?} for {rows} rows", shape));
        }
        let s = shape[1];
        let mut out = vec![0.0; rows * s];
        for (b, id) in maps.iter().enumerate() {
            let g = self.value(*id);
            if g.shape() != shape.as_slice() {
                return Err(shape_err!("block_mix: map shapes {:?} vs {:?}", g.shape(), shape));
            }
            for i in 0..rows {
                let a = w.data()[i * n + b];
                for j in 0..s {
                    out[i * s + j] += a * g.data()[i * s + j];
                }
            }
        }
        let v = Array::new(shape, out)?;
        self.push(
            Op::BlockMix {
                weights,
                maps: maps.to_vec(),
            },
            v,
            false,
            "block_mix",
        )
    }
}

fn conv1d_backward(input: NodeId, kernels: NodeId, bias: NodeId, dy: &[f64], sink: &mut GradSink<'_>) {
    let x = sink.value(input).clone();
    let k = sink.value(kernels).clone();
    let (c_out, win, c_in) = (k.shape()[0], k.shape()[1], k.shape()[2]);
    let h = x.shape()[x.rank() - 2];
    let batch = x.len() / (h * c_in).max(1);
    let r = (win - 1) / 2;
    let (xd, kd) = (x.data(), k.data());
    sink.add(input, |g| {
        for b in 0..batch {
            for i in 0..h {
                let dyr = &dy[(b * h + i) * c_out..(b * h + i + 1) * c_out];
                for d in 0..win {
                    let Some(p) = (i + d).checked_sub(r).filter(|p| *p < h) else {
                        continue;
                    };
                    let dst = &mut g[(b * h + p) * c_in..(b * h + p + 1) * c_in];
                    for (o, dv) in dyr.iter().enumerate() {
                        let kr = &kd[(o * win + d) * c_in..(o * win + d + 1) * c_in];
                        axpy(dst, kr, *dv);
                    }
                }
            }
        }
    });
    sink.add(kernels, |g| {
        for b in 0..batch {
            for i in 0..h {
                let dyr = &dy[(b * h + i) * c_out..(b * h + i + 1) * c_out];
                for d in 0..win {
                    let Some(p) = (i + d).checked_sub(r).filter(|p| *p < h) else {
                        continue;
                    };
                    let src = &xd[(b * h + p) * c_in..(b * h + p + 1) * c_in];
                    for (o, dv) in dyr.iter().enumerate() {
                        axpy(&mut g[(o * win + d) * c_in..(o * win + d + 1) * c_in], src, *dv);
                    }
                }
            }
        }
    });
    sink.add(bias, |g| {
        for row in dy.chunks(c_out) {
            axpy(g, row, 1.0);
        }
    });
}

fn batch_norm_backward(rec: &BatchNormRecord, dy: &[f64], sink: &mut GradSink<'_>) {
    let c = rec.inv_std.len();
    let cells = dy.len() / c;
    let valid = |p: usize| rec.mask.as_ref().is_none_or(|m| m[p]);
    let gamma = sink.value(rec.gamma).data().to_vec();
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for p in (0..cells).filter(|&p| valid(p)) {
        for ch in 0..c {
            let i = p * c + ch;
            sum_dy[ch] += dy[i];
            sum_dy_xhat[ch] += dy[i] * rec.xhat[i];
        }
    }
    sink.add(rec.input, |g| {
        let m = rec.valid_count as f64;
        for p in (0..cells).filter(|&p| valid(p)) {
            for ch in 0..c {
                let i = p * c + ch;
                g[i] += match rec.mode {
                    Mode::Train => {
                        gamma[ch] * rec.inv_std[ch] / m
                            * (m * dy[i] - sum_dy[ch] - rec.xhat[i] * sum_dy_xhat[ch])
                    }
                    Mode::Eval => gamma[ch] * rec.inv_std[ch] * dy[i],
                };
            }
        }
    });
    sink.add(rec.gamma, |g| axpy(g, &sum_dy_xhat, 1.0));
    sink.add(rec.beta, |g| axpy(g, &sum_dy, 1.0));
}
