//! Tape-based reverse-mode automatic differentiation.
//!
//! Every forward op appends a [`GraphNode`] (operation kind, input ids,
//! saved context) and the produced [`Tensor`] to the tape; node ids are
//! creation-ordered, so the tape is acyclic by construction. A single
//! [`Tape::backward`] pass then walks the records in reverse and
//! accumulates gradients additively into every reachable node that
//! requires them.
//!
//! The explicit node records keep the graph inspectable: tests can walk
//! [`Tape::nodes`] and check what was recorded.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, DeconvGeom, PoolGeom, PoolKind};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// One recorded differentiable operation. The variant payload is the
/// saved context its backward rule needs (argmax maps, dropout masks,
/// batch statistics, ...).
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add { broadcast_b: bool },
    Sub { broadcast_b: bool },
    Mul { broadcast_b: bool },
    Neg,
    Scale { factor: f64 },
    Matmul { m: usize, k: usize, n: usize },
    Transpose2d,
    Reshape,
    Relu,
    Softmax { axis: usize },
    Sum,
    Mean,
    Conv3d { geom: ConvGeom },
    Deconv3dTemporal { geom: DeconvGeom },
    Pool3d { kind: PoolKind, geom: PoolGeom, argmax: Vec<usize> },
    ChannelMean,
    ChannelMax { argmax: Vec<usize> },
    ChannelExpand { channels: usize },
    Concat0,
    BatchNormTrain { eps: f64, mean: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { mean: Vec<f64>, inv_std: Vec<f64> },
    Linear,
    Dropout { mask: Vec<f64> },
    CrossEntropy { label: usize, softmax: Vec<f64> },
    NegPearson,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Neg => "neg",
            Op::Scale { .. } => "scale",
            Op::Matmul { .. } => "matmul",
            Op::Transpose2d => "transpose2d",
            Op::Reshape => "reshape",
            Op::Relu => "relu",
            Op::Softmax { .. } => "softmax",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Conv3d { .. } => "conv3d",
            Op::Deconv3dTemporal { .. } => "deconv3d_temporal",
            Op::Pool3d { kind: PoolKind::Max, .. } => "maxpool3d",
            Op::Pool3d { kind: PoolKind::Avg, .. } => "avgpool3d",
            Op::ChannelMean => "channel_mean",
            Op::ChannelMax { .. } => "channel_max",
            Op::ChannelExpand { .. } => "channel_expand",
            Op::Concat0 => "concat0",
            Op::BatchNormTrain { .. } => "batchnorm_train",
            Op::BatchNormEval { .. } => "batchnorm_eval",
            Op::Linear => "linear",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::NegPearson => "neg_pearson",
        }
    }
}

#[derive(Debug, Clone)]
pub struct GraphNode {
    op: Op,
    inputs: Vec<NodeId>,
}

impl GraphNode {
    pub fn op_kind(&self) -> &'static str {
        self.op.kind()
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }
}

/// Per-channel batch statistics observed by a train-mode batchnorm,
/// returned so the layer can maintain its running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct Tape {
    nodes: Vec<GraphNode>,
    values: Vec<Tensor>,
    needs_grad: Vec<bool>,
    check_finite: bool,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Non-finite detection follows the build: on with debug assertions
    /// (tests), off otherwise. Override with [`Tape::set_finite_checks`].
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            values: Vec::new(),
            needs_grad: Vec::new(),
            check_finite: cfg!(debug_assertions),
            backward_done: false,
        }
    }

    pub fn set_finite_checks(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }

    /// Gradient of the last `backward` loss w.r.t. node `id`, if one was
    /// computed for it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.values[id].grad.as_deref()
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let needs = t.requires_grad;
        self.push_unchecked(t, Op::Leaf, vec![], needs)
    }

    /// Leaf that does not participate in differentiation.
    pub fn constant(&mut self, mut t: Tensor) -> NodeId {
        t.requires_grad = false;
        self.push_unchecked(t, Op::Leaf, vec![], false)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, inputs: Vec<NodeId>, needs: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(GraphNode { op, inputs });
        self.values.push(value);
        self.needs_grad.push(needs);
        id
    }

    fn push(&mut self, mut value: Tensor, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        if self.check_finite {
            if let Some(pos) = value.has_non_finite() {
                return Err(Error::numeric(
                    op.kind(),
                    format!("produced non-finite value at flat index {}", pos),
                ));
            }
        }
        let needs = inputs.iter().any(|&i| self.needs_grad[i]);
        value.requires_grad = needs;
        Ok(self.push_unchecked(value, op, inputs, needs))
    }

    // -- elementwise ---------------------------------------------------

    /// `b` must match `a` exactly or match with its leading axis collapsed
    /// to 1 (the channel-broadcast case used by expanded attention maps).
    fn broadcast_kind(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<bool> {
        let sa = self.values[a].shape();
        let sb = self.values[b].shape();
        if sa == sb {
            return Ok(false);
        }
        if sa.len() == sb.len() && !sa.is_empty() && sb[0] == 1 && sa[1..] == sb[1..] {
            return Ok(true);
        }
        Err(Error::dim(op, format!("incompatible shapes {:?} vs {:?}", sa, sb)))
    }

    fn zip_elementwise(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        make_op: impl Fn(bool) -> Op,
    ) -> Result<NodeId> {
        let broadcast = self.broadcast_kind(op_name, a, b)?;
        let av = &self.values[a];
        let bv = &self.values[b];
        let inner = bv.numel();
        let data: Vec<f64> = if broadcast {
            av.data().iter().enumerate().map(|(i, &x)| f(x, bv.data()[i % inner])).collect()
        } else {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        };
        let t = Tensor::from_vec(av.shape(), data).map_err(|_| Error::numeric(op_name, "non-finite result".into()))?;
        self.push(t, make_op(broadcast), vec![a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise("add", a, b, |x, y| x + y, |broadcast_b| Op::Add { broadcast_b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise("sub", a, b, |x, y| x - y, |broadcast_b| Op::Sub { broadcast_b })
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise("mul", a, b, |x, y| x * y, |broadcast_b| Op::Mul { broadcast_b })
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.values[a];
        let t = Tensor::from_vec(v.shape(), v.data().iter().map(|x| -x).collect())?;
        self.push(t, Op::Neg, vec![a])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let v = &self.values[a];
        let t = Tensor::from_vec(v.shape(), v.data().iter().map(|x| factor * x).collect())?;
        self.push(t, Op::Scale { factor }, vec![a])
    }

    // -- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.values[a].shape().to_vec();
        let sb = self.values[b].shape().to_vec();
        let (&[m, k], &[k2, n]) = (&sa[..], &sb[..]) else {
            return Err(Error::dim("matmul", format!("expected rank-2 operands, got {:?} and {:?}", sa, sb)));
        };
        if k != k2 {
            return Err(Error::dim("matmul", format!("inner dimensions disagree: {:?} vs {:?}", sa, sb)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.values[a].data(), self.values[b].data(), m, k, n, &mut out);
        self.push(Tensor::from_vec(&[m, n], out)?, Op::Matmul { m, k, n }, vec![a, b])
    }

    pub fn transpose2d(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.values[a];
        let &[r, c] = v.shape() else {
            return Err(Error::dim("transpose2d", format!("expected rank-2, got {:?}", v.shape())));
        };
        let mut out = vec![0.0; r * c];
        kernels::transpose2d(v.data(), r, c, &mut out);
        self.push(Tensor::from_vec(&[c, r], out)?, Op::Transpose2d, vec![a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = &self.values[a];
        let numel: usize = shape.iter().product();
        if numel != v.numel() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} ({} elems) as {:?}", v.shape(), v.numel(), shape),
            ));
        }
        let t = Tensor::from_vec(shape, v.data().to_vec())?;
        self.push(t, Op::Reshape, vec![a])
    }

    // -- activations / normalizers ---------------------------------------

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.values[a];
        let t = Tensor::from_vec(v.shape(), v.data().iter().map(|&x| x.max(0.0)).collect())?;
        self.push(t, Op::Relu, vec![a])
    }

    /// Max-subtracted softmax along `axis`; each slice along that axis
    /// sums to 1.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let v = &self.values[a];
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {} out of range for shape {:?}", axis, shape)));
        }
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; v.numel()];
        let data = v.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * axis_len * inner + j * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..axis_len {
                    max = max.max(data[at(j)]);
                }
                if !max.is_finite() {
                    return Err(Error::numeric("softmax", "non-finite input".into()));
                }
                let mut denom = 0.0;
                for j in 0..axis_len {
                    let e = (data[at(j)] - max).exp();
                    out[at(j)] = e;
                    denom += e;
                }
                for j in 0..axis_len {
                    out[at(j)] /= denom;
                }
            }
        }
        self.push(Tensor::from_vec(&shape, out)?, Op::Softmax { axis }, vec![a])
    }

    // -- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.values[a].data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum, vec![a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.values[a];
        let s: f64 = v.data().iter().sum();
        let n = v.numel() as f64;
        self.push(Tensor::scalar(s / n), Op::Mean, vec![a])
    }

    // -- convolution family ------------------------------------------------

    /// Cross-correlation of a `(c_in, t, h, w)` map with `(c_out, c_in,
    /// k_t, k_h, k_w)` weights plus a `(c_out,)` bias.
    pub fn conv3d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    ) -> Result<NodeId> {
        let in_dims = self.values[x].dims4("conv3d")?;
        let (co, ci, kt, kh, kw) = self.values[weight].dims5("conv3d")?;
        if self.values[bias].shape() != [co] {
            return Err(Error::dim(
                "conv3d",
                format!("bias shape {:?} does not match {} output channels", self.values[bias].shape(), co),
            ));
        }
        if ci != in_dims.0 {
            return Err(Error::dim(
                "conv3d",
                format!("input has {} channels, weights expect {}", in_dims.0, ci),
            ));
        }
        let ot = kernels::conv_out_dim(in_dims.1, kt, stride.0, pad.0);
        let oh = kernels::conv_out_dim(in_dims.2, kh, stride.1, pad.1);
        let ow = kernels::conv_out_dim(in_dims.3, kw, stride.2, pad.2);
        let (Some(ot), Some(oh), Some(ow)) = (ot, oh, ow) else {
            return Err(Error::dim(
                "conv3d",
                format!(
                    "kernel {:?} stride {:?} pad {:?} does not fit input {:?}",
                    (kt, kh, kw),
                    stride,
                    pad,
                    in_dims
                ),
            ));
        };
        let geom = ConvGeom { c_in: ci, c_out: co, kernel: (kt, kh, kw), stride, pad };
        let out_dims = (co, ot, oh, ow);
        let mut out = vec![0.0; co * ot * oh * ow];
        kernels::conv3d_forward(
            self.values[x].data(),
            in_dims,
            self.values[weight].data(),
            self.values[bias].data(),
            &geom,
            &mut out,
            out_dims,
        );
        self.push(
            Tensor::from_vec(&[co, ot, oh, ow], out)?,
            Op::Conv3d { geom },
            vec![x, weight, bias],
        )
    }

    /// Temporal transposed convolution (spatial kernel 1x1). Weight layout
    /// `(c_in, c_out, k_t)`; output length `(t - 1) * s + k - 2p`.
    pub fn deconv3d_temporal(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride_t: usize,
        pad_t: usize,
    ) -> Result<NodeId> {
        let in_dims = self.values[x].dims4("deconv3d_temporal")?;
        let ws = self.values[x].shape().to_vec();
        let &[ci, co, kt] = self.values[weight].shape() else {
            return Err(Error::dim(
                "deconv3d_temporal",
                format!("expected (c_in, c_out, k_t) weights, got {:?}", self.values[weight].shape()),
            ));
        };
        let _ = ws;
        if ci != in_dims.0 {
            return Err(Error::dim(
                "deconv3d_temporal",
                format!("input has {} channels, weights expect {}", in_dims.0, ci),
            ));
        }
        if self.values[bias].shape() != [co] {
            return Err(Error::dim("deconv3d_temporal", "bias/output channel mismatch".into()));
        }
        let Some(out_t) = kernels::deconv_out_dim(in_dims.1, kt, stride_t, pad_t) else {
            return Err(Error::dim(
                "deconv3d_temporal",
                format!("t={} k={} s={} p={} yields non-positive output length", in_dims.1, kt, stride_t, pad_t),
            ));
        };
        let geom = DeconvGeom { c_in: ci, c_out: co, k_t: kt, stride_t, pad_t };
        let mut out = vec![0.0; co * out_t * in_dims.2 * in_dims.3];
        kernels::deconv3d_temporal_forward(
            self.values[x].data(),
            in_dims,
            self.values[weight].data(),
            self.values[bias].data(),
            &geom,
            &mut out,
            out_t,
        );
        self.push(
            Tensor::from_vec(&[co, out_t, in_dims.2, in_dims.3], out)?,
            Op::Deconv3dTemporal { geom },
            vec![x, weight, bias],
        )
    }

    pub fn pool3d(
        &mut self,
        x: NodeId,
        kind: PoolKind,
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    ) -> Result<NodeId> {
        let in_dims = self.values[x].dims4("pool3d")?;
        if pad.0 * 2 >= kernel.0 + 1 || pad.1 * 2 >= kernel.1 + 1 || pad.2 * 2 >= kernel.2 + 1 {
            return Err(Error::dim("pool3d", format!("padding {:?} too large for kernel {:?}", pad, kernel)));
        }
        let ot = kernels::conv_out_dim(in_dims.1, kernel.0, stride.0, pad.0);
        let oh = kernels::conv_out_dim(in_dims.2, kernel.1, stride.1, pad.1);
        let ow = kernels::conv_out_dim(in_dims.3, kernel.2, stride.2, pad.2);
        let (Some(ot), Some(oh), Some(ow)) = (ot, oh, ow) else {
            return Err(Error::dim(
                "pool3d",
                format!("window {:?}/{:?}/{:?} does not fit input {:?}", kernel, stride, pad, in_dims),
            ));
        };
        let geom = PoolGeom { kernel, stride, pad };
        let out_dims = (in_dims.0, ot, oh, ow);
        let numel = in_dims.0 * ot * oh * ow;
        let mut out = vec![0.0; numel];
        let mut argmax = vec![0usize; if kind == PoolKind::Max { numel } else { 0 }];
        kernels::pool3d_forward(self.values[x].data(), in_dims, kind, &geom, &mut out, out_dims, &mut argmax);
        self.push(
            Tensor::from_vec(&[in_dims.0, ot, oh, ow], out)?,
            Op::Pool3d { kind, geom, argmax },
            vec![x],
        )
    }

    /// Global average pool over `(t, h, w)`, yielding a `(c,)` vector.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, t, h, w) = self.values[x].dims4("global_avg_pool")?;
        let pooled = self.pool3d(x, PoolKind::Avg, (t, h, w), (1, 1, 1), (0, 0, 0))?;
        self.reshape(pooled, &[c])
    }

    /// Average pool over `(h, w)` only, preserving the temporal axis.
    pub fn spatial_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (_c, _t, h, w) = self.values[x].dims4("spatial_avg_pool")?;
        self.pool3d(x, PoolKind::Avg, (1, h, w), (1, 1, 1), (0, 0, 0))
    }

    // -- channel-axis primitives -------------------------------------------

    /// Per-position mean over channels: `(c, t, h, w) -> (1, t, h, w)`.
    pub fn channel_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, t, h, w) = self.values[x].dims4("channel_mean")?;
        let plane = t * h * w;
        let data = self.values[x].data();
        let mut out = vec![0.0; plane];
        for ch in 0..c {
            for (o, v) in out.iter_mut().zip(&data[ch * plane..(ch + 1) * plane]) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= c as f64;
        }
        self.push(Tensor::from_vec(&[1, t, h, w], out)?, Op::ChannelMean, vec![x])
    }

    /// Per-position max over channels: `(c, t, h, w) -> (1, t, h, w)`.
    /// Ties resolve to the lowest channel index.
    pub fn channel_max(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, t, h, w) = self.values[x].dims4("channel_max")?;
        let plane = t * h * w;
        let data = self.values[x].data();
        let mut out = vec![f64::NEG_INFINITY; plane];
        let mut argmax = vec![0usize; plane];
        for ch in 0..c {
            for p in 0..plane {
                let v = data[ch * plane + p];
                if v > out[p] {
                    out[p] = v;
                    argmax[p] = ch * plane + p;
                }
            }
        }
        self.push(Tensor::from_vec(&[1, t, h, w], out)?, Op::ChannelMax { argmax }, vec![x])
    }

    /// Replicates a single-channel map `c` times along the channel axis.
    pub fn channel_expand(&mut self, x: NodeId, channels: usize) -> Result<NodeId> {
        if channels < 1 {
            return Err(Error::contract("channel_expand requires c >= 1".into()));
        }
        let (c1, t, h, w) = self.values[x].dims4("channel_expand")?;
        if c1 != 1 {
            return Err(Error::dim("channel_expand", format!("expected single-channel map, got {} channels", c1)));
        }
        let plane = t * h * w;
        let mut out = Vec::with_capacity(channels * plane);
        for _ in 0..channels {
            out.extend_from_slice(self.values[x].data());
        }
        self.push(Tensor::from_vec(&[channels, t, h, w], out)?, Op::ChannelExpand { channels }, vec![x])
    }

    /// Concatenation along the leading axis; trailing dims must agree.
    pub fn concat0(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat0 of zero tensors".into()));
        }
        let first = self.values[parts[0]].shape().to_vec();
        if first.is_empty() {
            return Err(Error::dim("concat0", "cannot concatenate scalars".into()));
        }
        let mut lead = 0;
        for &p in parts {
            let s = self.values[p].shape();
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::dim(
                    "concat0",
                    format!("incompatible shapes {:?} vs {:?}", first, s),
                ));
            }
            lead += s[0];
        }
        let mut data = Vec::with_capacity(lead * first[1..].iter().product::<usize>());
        for &p in parts {
            data.extend_from_slice(self.values[p].data());
        }
        let mut shape = first;
        shape[0] = lead;
        self.push(Tensor::from_vec(&shape, data)?, Op::Concat0, parts.to_vec())
    }

    // -- layers --------------------------------------------------------------

    /// Train-mode batch normalization over a `(c, ...)` tensor: per-channel
    /// statistics over all remaining axes (biased variance). Returns the
    /// normalized node and the observed batch statistics so the caller can
    /// update its running estimates.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BatchStats)> {
        let shape = self.values[x].shape().to_vec();
        let c = *shape.first().ok_or_else(|| Error::dim("batchnorm", "scalar input".into()))?;
        self.check_bn_params(c, gamma, beta)?;
        let plane = self.values[x].numel() / c;
        let data = self.values[x].data();
        let g = self.values[gamma].data().to_vec();
        let b = self.values[beta].data().to_vec();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let slice = &data[ch * plane..(ch + 1) * plane];
            let m = slice.iter().sum::<f64>() / plane as f64;
            let v = slice.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / plane as f64;
            mean[ch] = m;
            var[ch] = v;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; data.len()];
        for ch in 0..c {
            for p in 0..plane {
                let i = ch * plane + p;
                out[i] = (data[i] - mean[ch]) * inv_std[ch] * g[ch] + b[ch];
            }
        }
        let stats = BatchStats { mean: mean.clone(), var };
        let id = self.push(
            Tensor::from_vec(&shape, out)?,
            Op::BatchNormTrain { eps, mean, inv_std },
            vec![x, gamma, beta],
        )?;
        Ok((id, stats))
    }

    /// Eval-mode batch normalization against fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let shape = self.values[x].shape().to_vec();
        let c = *shape.first().ok_or_else(|| Error::dim("batchnorm", "scalar input".into()))?;
        self.check_bn_params(c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("batchnorm", "running statistics length mismatch".into()));
        }
        let plane = self.values[x].numel() / c;
        let data = self.values[x].data();
        let g = self.values[gamma].data();
        let b = self.values[beta].data();
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; data.len()];
        for ch in 0..c {
            for p in 0..plane {
                let i = ch * plane + p;
                out[i] = (data[i] - running_mean[ch]) * inv_std[ch] * g[ch] + b[ch];
            }
        }
        self.push(
            Tensor::from_vec(&shape, out)?,
            Op::BatchNormEval { mean: running_mean.to_vec(), inv_std },
            vec![x, gamma, beta],
        )
    }

    fn check_bn_params(&self, c: usize, gamma: NodeId, beta: NodeId) -> Result<()> {
        if self.values[gamma].shape() != [c] || self.values[beta].shape() != [c] {
            return Err(Error::dim(
                "batchnorm",
                format!(
                    "gamma {:?} / beta {:?} must both be ({},)",
                    self.values[gamma].shape(),
                    self.values[beta].shape(),
                    c
                ),
            ));
        }
        Ok(())
    }

    /// `y = W x + b` with `x: (in,)`, `W: (out, in)`, `b: (out,)`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.values[x].shape().to_vec();
        let wv = self.values[weight].shape().to_vec();
        let (&[n_in], &[n_out, n_in2]) = (&xv[..], &wv[..]) else {
            return Err(Error::dim("linear", format!("expected x (in,), W (out,in); got {:?} and {:?}", xv, wv)));
        };
        if n_in != n_in2 || self.values[bias].shape() != [n_out] {
            return Err(Error::dim(
                "linear",
                format!("x {:?}, W {:?}, b {:?} disagree", xv, wv, self.values[bias].shape()),
            ));
        }
        let xd = self.values[x].data();
        let wd = self.values[weight].data();
        let bd = self.values[bias].data();
        let mut out = vec![0.0; n_out];
        for o in 0..n_out {
            out[o] = bd[o] + wd[o * n_in..(o + 1) * n_in].iter().zip(xd).map(|(w, x)| w * x).sum::<f64>();
        }
        self.push(Tensor::from_vec(&[n_out], out)?, Op::Linear, vec![x, weight, bias])
    }

    /// Inverted dropout with a caller-supplied keep mask; entries of `mask`
    /// must be either `0` or `1/(1-p)`.
    pub fn dropout(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        let v = &self.values[x];
        if mask.len() != v.numel() {
            return Err(Error::dim("dropout", "mask length mismatch".into()));
        }
        let data: Vec<f64> = v.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let t = Tensor::from_vec(v.shape(), data)?;
        self.push(t, Op::Dropout { mask }, vec![x])
    }

    // -- losses ----------------------------------------------------------------

    /// Log-softmax cross-entropy of a `(k,)` logit vector against a class index.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let v = &self.values[logits];
        let k = v.numel();
        if v.rank() != 1 {
            return Err(Error::dim("cross_entropy", format!("expected (k,) logits, got {:?}", v.shape())));
        }
        if label >= k {
            return Err(Error::contract(format!("label {} out of range for {} classes", label, k)));
        }
        let data = v.data();
        let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = data.iter().map(|&x| (x - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let softmax: Vec<f64> = exps.iter().map(|e| e / denom).collect();
        let loss = -(data[label] - max - denom.ln());
        self.push(Tensor::scalar(loss), Op::CrossEntropy { label, softmax }, vec![logits])
    }

    /// `1 - r(x, y)` with `r` the Pearson correlation over two equal-length
    /// series, computed from the raw-sum form
    /// `(T*sum(xy) - sum(x)sum(y)) / sqrt((T*sum(x^2)-sum(x)^2)(T*sum(y^2)-sum(y)^2))`.
    /// Range `[0, 2]`; zero variance in either series is an error.
    pub fn neg_pearson(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        let (loss, _) = self.pearson_parts(x, y)?;
        self.push(Tensor::scalar(loss), Op::NegPearson, vec![x, y])
    }

    fn pearson_parts(&self, x: NodeId, y: NodeId) -> Result<(f64, f64)> {
        let xv = &self.values[x];
        let yv = &self.values[y];
        if xv.shape() != yv.shape() || xv.rank() != 1 {
            return Err(Error::dim(
                "neg_pearson",
                format!("expected equal-length vectors, got {:?} and {:?}", xv.shape(), yv.shape()),
            ));
        }
        let t = xv.numel();
        if t < 2 {
            return Err(Error::contract("pearson needs at least 2 samples".into()));
        }
        let tf = t as f64;
        let (xd, yd) = (xv.data(), yv.data());
        let sx: f64 = xd.iter().sum();
        let sy: f64 = yd.iter().sum();
        let sxx: f64 = xd.iter().map(|v| v * v).sum();
        let syy: f64 = yd.iter().map(|v| v * v).sum();
        let sxy: f64 = xd.iter().zip(yd).map(|(a, b)| a * b).sum();
        let var_x = tf * sxx - sx * sx;
        let var_y = tf * syy - sy * sy;
        if var_x <= 0.0 {
            return Err(Error::Degenerate("x has zero variance; correlation undefined".into()));
        }
        if var_y <= 0.0 {
            return Err(Error::Degenerate("y has zero variance; correlation undefined".into()));
        }
        let r = (tf * sxy - sx * sy) / (var_x * var_y).sqrt();
        if !r.is_finite() {
            return Err(Error::Degenerate("correlation evaluated non-finite".into()));
        }
        Ok((1.0 - r, r))
    }

    // -- backward -----------------------------------------------------------

    /// Reverse pass from a scalar `loss` node. Populates `grad` on every
    /// node that transitively requires it; gradients accumulate additively
    /// when a node feeds multiple consumers. A tape can run backward once.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract("backward already ran on this tape".into()));
        }
        if !self.values[loss].is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.values[loss].shape()
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);

        for i in (0..=loss).rev() {
            if !self.needs_grad[i] || grads[i].is_none() {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if self.needs_grad[i] {
                    self.values[i].grad = Some(g);
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: NodeId, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        let needs = |id: NodeId| self.needs_grad[id];
        let numel = |id: NodeId| self.values[id].numel();

        // Fetch-or-init the gradient buffer for an input node.
        macro_rules! slot {
            ($id:expr) => {{
                let n = numel($id);
                grads[$id].get_or_insert_with(|| vec![0.0; n])
            }};
        }

        match &node.op {
            Op::Leaf => {}

            Op::Add { broadcast_b } => {
                let (a, b) = (ins[0], ins[1]);
                if needs(a) {
                    let ga = slot!(a);
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if needs(b) {
                    let inner = numel(b);
                    let gb = slot!(b);
                    if *broadcast_b {
                        for (j, y) in g.iter().enumerate() {
                            gb[j % inner] += y;
                        }
                    } else {
                        for (x, y) in gb.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }

            Op::Sub { broadcast_b } => {
                let (a, b) = (ins[0], ins[1]);
                if needs(a) {
                    let ga = slot!(a);
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if needs(b) {
                    let inner = numel(b);
                    let gb = slot!(b);
                    if *broadcast_b {
                        for (j, y) in g.iter().enumerate() {
                            gb[j % inner] -= y;
                        }
                    } else {
                        for (x, y) in gb.iter_mut().zip(g) {
                            *x -= y;
                        }
                    }
                }
            }

            Op::Mul { broadcast_b } => {
                let (a, b) = (ins[0], ins[1]);
                let av = self.values[a].data();
                let bv = self.values[b].data();
                let inner = bv.len();
                if needs(a) {
                    let ga = slot!(a);
                    if *broadcast_b {
                        for (j, y) in g.iter().enumerate() {
                            ga[j] += y * bv[j % inner];
                        }
                    } else {
                        for ((x, y), bvv) in ga.iter_mut().zip(g).zip(bv) {
                            *x += y * bvv;
                        }
                    }
                }
                if needs(b) {
                    let gb = slot!(b);
                    if *broadcast_b {
                        for (j, y) in g.iter().enumerate() {
                            gb[j % inner] += y * av[j];
                        }
                    } else {
                        for ((x, y), avv) in gb.iter_mut().zip(g).zip(av) {
                            *x += y * avv;
                        }
                    }
                }
            }

            Op::Neg => {
                if needs(ins[0]) {
                    let ga = slot!(ins[0]);
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x -= y;
                    }
                }
            }

            Op::Scale { factor } => {
                if needs(ins[0]) {
                    let f = *factor;
                    let ga = slot!(ins[0]);
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += f * y;
                    }
                }
            }

            Op::Matmul { m, k, n } => {
                let (a, b) = (ins[0], ins[1]);
                let (m, k, n) = (*m, *k, *n);
                if needs(a) {
                    // dA = G * B^T
                    let mut bt = vec![0.0; k * n];
                    kernels::transpose2d(self.values[b].data(), k, n, &mut bt);
                    let mut da = vec![0.0; m * k];
                    kernels::matmul(g, &bt, m, n, k, &mut da);
                    let ga = slot!(a);
                    for (x, y) in ga.iter_mut().zip(&da) {
                        *x += y;
                    }
                }
                if needs(b) {
                    // dB = A^T * G
                    let mut at = vec![0.0; m * k];
                    kernels::transpose2d(self.values[a].data(), m, k, &mut at);
                    let mut db = vec![0.0; k * n];
                    kernels::matmul(&at, g, k, m, n, &mut db);
                    let gb = slot!(b);
                    for (x, y) in gb.iter_mut().zip(&db) {
                        *x += y;
                    }
                }
            }

            Op::Transpose2d => {
                if needs(ins[0]) {
                    let out_shape = self.values[i].shape();
                    let (r, c) = (out_shape[0], out_shape[1]);
                    let mut gt = vec![0.0; r * c];
                    kernels::transpose2d(g, r, c, &mut gt);
                    let ga = slot!(ins[0]);
                    for (x, y) in ga.iter_mut().zip(&gt) {
                        *x += y;
                    }
                }
            }

            Op::Reshape => {
                if needs(ins[0]) {
                    let ga = slot!(ins[0]);
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }

            Op::Relu => {
                if needs(ins[0]) {
                    let xv = self.values[ins[0]].data();
                    let ga = slot!(ins[0]);
                    for ((x, y), &v) in ga.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *x += y;
                        }
                    }
                }
            }

            Op::Softmax { axis } => {
                if needs(ins[0]) {
                    let s = self.values[i].data();
                    let shape = self.values[i].shape();
                    let axis_len = shape[*axis];
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let ga = slot!(ins[0]);
                    for o in 0..outer {
                        for p in 0..inner {
                            let at = |j: usize| o * axis_len * inner + j * inner + p;
                            let mut dot = 0.0;
                            for j in 0..axis_len {
                                dot += g[at(j)] * s[at(j)];
                            }
                            for j in 0..axis_len {
                                ga[at(j)] += s[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }

            Op::Sum => {
                if needs(ins[0]) {
                    let g0 = g[0];
                    let ga = slot!(ins[0]);
                    for x in ga.iter_mut() {
                        *x += g0;
                    }
                }
            }

            Op::Mean => {
                if needs(ins[0]) {
                    let g0 = g[0] / numel(ins[0]) as f64;
                    let ga = slot!(ins[0]);
                    for x in ga.iter_mut() {
                        *x += g0;
                    }
                }
            }

            Op::Conv3d { geom } => {
                let (x, w, b) = (ins[0], ins[1], ins[2]);
                let in_dims = self.values[x].dims4("conv3d").expect("validated at forward");
                let out_shape = self.values[i].shape();
                let out_dims = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
                if needs(x) {
                    let mut gx = vec![0.0; numel(x)];
                    kernels::conv3d_grad_input(g, out_dims, self.values[w].data(), geom, &mut gx, in_dims);
                    let slot = slot!(x);
                    for (a, b) in slot.iter_mut().zip(&gx) {
                        *a += b;
                    }
                }
                if needs(w) {
                    let mut gw = vec![0.0; numel(w)];
                    kernels::conv3d_grad_weight(g, out_dims, self.values[x].data(), in_dims, geom, &mut gw);
                    let slot = slot!(w);
                    for (a, b) in slot.iter_mut().zip(&gw) {
                        *a += b;
                    }
                }
                if needs(b) {
                    let mut gb = vec![0.0; numel(b)];
                    kernels::conv3d_grad_bias(g, out_dims, &mut gb);
                    let slot = slot!(b);
                    for (a, b) in slot.iter_mut().zip(&gb) {
                        *a += b;
                    }
                }
            }

            Op::Deconv3dTemporal { geom } => {
                let (x, w, b) = (ins[0], ins[1], ins[2]);
                let in_dims = self.values[x].dims4("deconv3d_temporal").expect("validated at forward");
                let out_t = self.values[i].shape()[1];
                if needs(x) {
                    let mut gx = vec![0.0; numel(x)];
                    kernels::deconv3d_temporal_grad_input(g, out_t, self.values[w].data(), geom, &mut gx, in_dims);
                    let slot = slot!(x);
                    for (a, b) in slot.iter_mut().zip(&gx) {
                        *a += b;
                    }
                }
                if needs(w) {
                    let mut gw = vec![0.0; numel(w)];
                    kernels::deconv3d_temporal_grad_weight(g, out_t, self.values[x].data(), in_dims, geom, &mut gw);
                    let slot = slot!(w);
                    for (a, b) in slot.iter_mut().zip(&gw) {
                        *a += b;
                    }
                }
                if needs(b) {
                    let spatial = in_dims.2 * in_dims.3;
                    let plane = out_t * spatial;
                    let slot = slot!(b);
                    for (o, s) in slot.iter_mut().enumerate() {
                        *s += g[o * plane..(o + 1) * plane].iter().sum::<f64>();
                    }
                }
            }

            Op::Pool3d { kind, geom, argmax } => {
                if needs(ins[0]) {
                    match kind {
                        PoolKind::Max => {
                            let ga = slot!(ins[0]);
                            for (o, &src) in argmax.iter().enumerate() {
                                ga[src] += g[o];
                            }
                        }
                        PoolKind::Avg => {
                            let in_dims = self.values[ins[0]].dims4("pool3d").expect("validated");
                            let out_shape = self.values[i].shape();
                            let out_dims = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
                            let mut gx = vec![0.0; numel(ins[0])];
                            kernels::pool3d_avg_grad(g, out_dims, geom, &mut gx, in_dims);
                            let slot = slot!(ins[0]);
                            for (a, b) in slot.iter_mut().zip(&gx) {
                                *a += b;
                            }
                        }
                    }
                }
            }

            Op::ChannelMean => {
                if needs(ins[0]) {
                    let c = self.values[ins[0]].shape()[0];
                    let plane = g.len();
                    let inv = 1.0 / c as f64;
                    let ga = slot!(ins[0]);
                    for ch in 0..c {
                        for p in 0..plane {
                            ga[ch * plane + p] += g[p] * inv;
                        }
                    }
                }
            }

            Op::ChannelMax { argmax } => {
                if needs(ins[0]) {
                    let ga = slot!(ins[0]);
                    for (p, &src) in argmax.iter().enumerate() {
                        ga[src] += g[p];
                    }
                }
            }

            Op::ChannelExpand { channels } => {
                if needs(ins[0]) {
                    let plane = numel(ins[0]);
                    let ga = slot!(ins[0]);
                    for ch in 0..*channels {
                        for p in 0..plane {
                            ga[p] += g[ch * plane + p];
                        }
                    }
                }
            }

            Op::Concat0 => {
                let mut offset = 0;
                for &p in ins {
                    let n = numel(p);
                    if needs(p) {
                        let gp = slot!(p);
                        for (x, y) in gp.iter_mut().zip(&g[offset..offset + n]) {
                            *x += y;
                        }
                    }
                    offset += n;
                }
            }

            Op::BatchNormTrain { mean, inv_std, .. } => {
                let (x, gamma, beta) = (ins[0], ins[1], ins[2]);
                let c = mean.len();
                let plane = numel(x) / c;
                let xd = self.values[x].data();
                let gd = self.values[gamma].data();
                for ch in 0..c {
                    let (m, is) = (mean[ch], inv_std[ch]);
                    let gs = &g[ch * plane..(ch + 1) * plane];
                    let xs = &xd[ch * plane..(ch + 1) * plane];
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for (gv, xv) in gs.iter().zip(xs) {
                        let xhat = (xv - m) * is;
                        sum_g += gv;
                        sum_gx += gv * xhat;
                    }
                    if needs(gamma) {
                        slot!(gamma)[ch] += sum_gx;
                    }
                    if needs(beta) {
                        slot!(beta)[ch] += sum_g;
                    }
                    if needs(x) {
                        let n = plane as f64;
                        let scale = gd[ch] * is;
                        let gx = slot!(x);
                        for (p, (gv, xv)) in gs.iter().zip(xs).enumerate() {
                            let xhat = (xv - m) * is;
                            gx[ch * plane + p] += scale * (gv - sum_g / n - xhat * sum_gx / n);
                        }
                    }
                }
            }

            Op::BatchNormEval { mean, inv_std } => {
                let (x, gamma, beta) = (ins[0], ins[1], ins[2]);
                let c = mean.len();
                let plane = numel(x) / c;
                let xd = self.values[x].data();
                let gd = self.values[gamma].data();
                for ch in 0..c {
                    let (m, is) = (mean[ch], inv_std[ch]);
                    let gs = &g[ch * plane..(ch + 1) * plane];
                    let xs = &xd[ch * plane..(ch + 1) * plane];
                    if needs(x) {
                        let scale = gd[ch] * is;
                        let gx = slot!(x);
                        for (p, gv) in gs.iter().enumerate() {
                            gx[ch * plane + p] += scale * gv;
                        }
                    }
                    if needs(gamma) {
                        let mut acc = 0.0;
                        for (gv, xv) in gs.iter().zip(xs) {
                            acc += gv * (xv - m) * is;
                        }
                        slot!(gamma)[ch] += acc;
                    }
                    if needs(beta) {
                        slot!(beta)[ch] += gs.iter().sum::<f64>();
                    }
                }
            }

            Op::Linear => {
                let (x, w, b) = (ins[0], ins[1], ins[2]);
                let n_in = numel(x);
                let xd = self.values[x].data();
                let wd = self.values[w].data();
                if needs(x) {
                    let gx = slot!(x);
                    for (o, gv) in g.iter().enumerate() {
                        let wrow = &wd[o * n_in..(o + 1) * n_in];
                        for (x, wv) in gx.iter_mut().zip(wrow) {
                            *x += gv * wv;
                        }
                    }
                }
                if needs(w) {
                    let gw = slot!(w);
                    for (o, gv) in g.iter().enumerate() {
                        let grow = &mut gw[o * n_in..(o + 1) * n_in];
                        for (x, xv) in grow.iter_mut().zip(xd) {
                            *x += gv * xv;
                        }
                    }
                }
                if needs(b) {
                    let gb = slot!(b);
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }

            Op::Dropout { mask } => {
                if needs(ins[0]) {
                    let ga = slot!(ins[0]);
                    for ((x, y), m) in ga.iter_mut().zip(g).zip(mask) {
                        *x += y * m;
                    }
                }
            }

            Op::CrossEntropy { label, softmax } => {
                if needs(ins[0]) {
                    let g0 = g[0];
                    let ga = slot!(ins[0]);
                    for (c, (x, s)) in ga.iter_mut().zip(softmax).enumerate() {
                        let target = if c == *label { 1.0 } else { 0.0 };
                        *x += g0 * (s - target);
                    }
                }
            }

            Op::NegPearson => {
                let (x, y) = (ins[0], ins[1]);
                let xd = self.values[x].data();
                let yd = self.values[y].data();
                let t = xd.len() as f64;
                let mx = xd.iter().sum::<f64>() / t;
                let my = yd.iter().sum::<f64>() / t;
                let mut sxx = 0.0;
                let mut syy = 0.0;
                let mut sxy = 0.0;
                for (a, b) in xd.iter().zip(yd) {
                    let (cx, cy) = (a - mx, b - my);
                    sxx += cx * cx;
                    syy += cy * cy;
                    sxy += cx * cy;
                }
                let denom = (sxx * syy).sqrt();
                let g0 = g[0];
                // d(1 - r)/dx_i = -(cy_i - (sxy/sxx) cx_i) / sqrt(sxx*syy)
                if needs(x) {
                    let gx = slot!(x);
                    for (i, (a, b)) in xd.iter().zip(yd).enumerate() {
                        let (cx, cy) = (a - mx, b - my);
                        gx[i] += g0 * ((sxy / sxx) * cx - cy) / denom;
                    }
                }
                if needs(y) {
                    let gy = slot!(y);
                    for (i, (a, b)) in xd.iter().zip(yd).enumerate() {
                        let (cx, cy) = (a - mx, b - my);
                        gy[i] += g0 * ((sxy / syy) * cy - cx) / denom;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_grad(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> NodeId {
        tape.leaf(Tensor::from_vec(shape, data).unwrap().with_grad())
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = leaf_grad(&mut tape, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let eye = tape.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_2x2_frozen() {
        // Triple-loop oracle over [[1,2],[3,4]]*[[5,6],[7,8]] gives [[19,22],[43,50]].
        let mut tape = Tape::new();
        let a = leaf_grad(&mut tape, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf_grad(&mut tape, &[2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf_grad(&mut tape, &[2, 3], vec![0.0; 6]);
        let b = leaf_grad(&mut tape, &[2, 2], vec![0.0; 4]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn grad_of_sum_matmul_wrt_a_is_row_sums_of_b() {
        // d sum(A*B) / dA = ones * B^T; with B all-ones this is [[2,2],[2,2]].
        let mut tape = Tape::new();
        let a = leaf_grad(&mut tape, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = tape.constant(Tensor::full(&[2, 2], 1.0));
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let mut tape = Tape::new();
        let x = leaf_grad(&mut tape, &[4], vec![0.0; 4]);
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.25; 4]);

        let big = leaf_grad(&mut tape, &[2], vec![1000.0, 1000.0]);
        let s2 = tape.softmax(big, 0).unwrap();
        assert_eq!(tape.value(s2).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        // Direct e^{x-max}/sum oracle on [1,2,3].
        let x = [1.0, 2.0, 3.0];
        let max = 3.0;
        let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let expect: Vec<f64> = exps.iter().map(|e| e / denom).collect();

        let mut tape = Tape::new();
        let xs = leaf_grad(&mut tape, &[3], x.to_vec());
        let s = tape.softmax(xs, 0).unwrap();
        for (a, b) in tape.value(s).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn elementwise_identities() {
        let mut tape = Tape::new();
        let z = leaf_grad(&mut tape, &[2, 3], (0..6).map(|i| i as f64).collect());
        let zero = tape.constant(Tensor::zeros(&[2, 3]));
        let ones = tape.constant(Tensor::full(&[2, 3], 1.0));
        let add = tape.add(z, zero).unwrap();
        let mul = tape.mul(z, ones).unwrap();
        assert_eq!(tape.value(add).data(), tape.value(z).data());
        assert_eq!(tape.value(mul).data(), tape.value(z).data());
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let mut tape = Tape::new();
        let a = leaf_grad(&mut tape, &[2, 3], vec![0.0; 6]);
        let b = leaf_grad(&mut tape, &[3, 2], vec![0.0; 6]);
        assert!(matches!(tape.add(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut tape = Tape::new();
        let x = leaf_grad(&mut tape, &[3], vec![5.0, -1.0, 2.0]);
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_sum_of_square_is_2x() {
        let mut tape = Tape::new();
        let x = leaf_grad(&mut tape, &[3], vec![1.0, 2.0, 3.0]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn gradient_accumulates_across_reuse() {
        // x used twice: loss = sum(x) + sum(x) has gradient 2 everywhere.
        let mut tape = Tape::new();
        let x = leaf_grad(&mut tape, &[2], vec![1.0, 4.0]);
        let s1 = tape.sum(x).unwrap();
        let s2 = tape.sum(x).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_double_run() {
        let mut tape = Tape::new();
        let x = leaf_grad(&mut tape, &[2], vec![1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));

        let mut tape = Tape::new();
        let x = leaf_grad(&mut tape, &[2], vec![1.0, 2.0]);
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
    }

    #[test]
    fn forward_is_pure() {
        let run = || {
            let mut tape = Tape::new();
            let x = leaf_grad(&mut tape, &[4], vec![0.3, -0.7, 1.9, 0.11]);
            let s = tape.softmax(x, 0).unwrap();
            let r = tape.relu(s).unwrap();
            let loss = tape.sum(r).unwrap();
            tape.value(loss).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let logits = leaf_grad(&mut tape, &[5], vec![0.0; 5]);
        let loss = tape.cross_entropy(logits, 2).unwrap();
        assert!((tape.value(loss).item().unwrap() - 5.0f64.ln()).abs() < 1e-15);

        let logits2 = leaf_grad(&mut tape, &[5], vec![0.0; 5]);
        assert!(matches!(tape.cross_entropy(logits2, 5), Err(Error::Contract(_))));
    }

    #[test]
    fn neg_pearson_limits() {
        let x: Vec<f64> = vec![0.0, 1.0, 2.0, 5.0, 3.0];

        let mut tape = Tape::new();
        let a = leaf_grad(&mut tape, &[5], x.clone());
        let same = tape.constant(Tensor::from_vec(&[5], x.clone()).unwrap());
        let l0 = tape.neg_pearson(a, same).unwrap();
        assert!(tape.value(l0).item().unwrap().abs() < 1e-12);

        let anti: Vec<f64> = x.iter().map(|v| -v + 7.0).collect();
        let b = tape.constant(Tensor::from_vec(&[5], anti).unwrap());
        let l2 = tape.neg_pearson(a, b).unwrap();
        assert!((tape.value(l2).item().unwrap() - 2.0).abs() < 1e-12);

        let affine: Vec<f64> = x.iter().map(|v| 3.0 * v + 5.0).collect();
        let c = tape.constant(Tensor::from_vec(&[5], affine).unwrap());
        let l1 = tape.neg_pearson(a, c).unwrap();
        assert!(tape.value(l1).item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn neg_pearson_degenerate_is_an_error() {
        let mut tape = Tape::new();
        let x = leaf_grad(&mut tape, &[4], vec![1.0, 2.0, 3.0, 4.0]);
        let flat = tape.constant(Tensor::full(&[4], 2.5));
        assert!(matches!(tape.neg_pearson(x, flat), Err(Error::Degenerate(_))));
        assert!(matches!(tape.neg_pearson(flat, x), Err(Error::Degenerate(_))));
    }

    #[test]
    fn finite_check_catches_overflow() {
        let mut tape = Tape::new();
        tape.set_finite_checks(true);
        let x = leaf_grad(&mut tape, &[2], vec![1e308, 1e308]);
        let doubled = tape.add(x, x);
        assert!(matches!(doubled, Err(Error::Numeric { .. })));
    }

    #[test]
    fn tape_records_are_inspectable() {
        let mut tape = Tape::new();
        let x = leaf_grad(&mut tape, &[2], vec![1.0, 2.0]);
        let y = tape.relu(x).unwrap();
        let _ = tape.sum(y).unwrap();
        let kinds: Vec<&str> = tape.nodes().iter().map(|n| n.op_kind()).collect();
        assert_eq!(kinds, vec!["leaf", "relu", "sum"]);
        assert_eq!(tape.nodes()[1].inputs(), &[x]);
    }
}
