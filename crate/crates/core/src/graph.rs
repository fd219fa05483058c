//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! Every forward call appends a node holding its output value; `backward`
//! walks the tape in reverse and accumulates gradients, summing over fan-out.
//! Parameter leaves copy their value from a [`ParamStore`] and
//! [`Graph::accumulate_param_grads`] writes their gradients back.

use crate::error::{Error, Result};
use crate::kernels::{self, BatchStats, ConvDims, ConvGeometry};
use crate::loss::AttentionWeight;
use crate::params::{ParamId, ParamStore, StatsId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-pixel target of the weighted log loss: the ground-truth class and the
/// band balancing weight. `None` marks an ignored pixel.
pub type PixelTarget = Option<(usize, f64)>;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Reshape(NodeId),
    Relu(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sum(NodeId),
    WeightedSum(NodeId, Vec<f64>),
    Concat(Vec<NodeId>),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        dims: ConvDims,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        dims: ConvDims,
        geom: ConvGeometry,
    },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        stats: BatchStats,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: NodeId,
        k: usize,
        s: usize,
    },
    Bilinear(NodeId),
    Softmax(NodeId),
    WeightedLogLoss {
        probs: NodeId,
        targets: Vec<PixelTarget>,
        weight: AttentionWeight,
        norm: f64,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "input",
            Op::Param(_) => "param",
            Op::Reshape(_) => "reshape",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Sum(_) => "sum",
            Op::WeightedSum(..) => "weighted_sum",
            Op::Concat(_) => "concat",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::BatchNormTrain { .. } => "batch_norm_train",
            Op::BatchNormEval { .. } => "batch_norm_eval",
            Op::MaxPool { .. } => "max_pool",
            Op::AvgPool { .. } => "avg_pool",
            Op::Bilinear(_) => "bilinear_upsample",
            Op::Softmax(_) => "softmax_channels",
            Op::WeightedLogLoss { .. } => "boundary_aware_loss",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    label: String,
}

/// Batch statistics of a training-mode batch-norm node, to be folded into
/// the layer's running averages once the step is committed.
#[derive(Clone, Debug)]
pub struct StatsUpdate {
    pub stats: StatsId,
    pub mean: Vec<f64>,
    /// Unbiased batch variance.
    pub var: Vec<f64>,
}

/// Diagnostics from the weighted log loss: how many pixels hit the
/// probability floor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LossDiagnostics {
    pub clamped_pixels: usize,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    scope: String,
    stats_updates: Vec<StatsUpdate>,
    diagnostics: LossDiagnostics,
    backward_done: bool,
}

/// Log-probability floor used by the weighted log loss.
pub const PROB_FLOOR: f64 = 1e-12;

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

    /// Prefix used when naming nodes in error messages.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn label(&self, id: NodeId) -> &str {
        &self.nodes[id.0].label
    }

    /// Gradient of the loss with respect to `id`, after [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        let g = self.grads.get(id.0)?.as_ref()?;
        Tensor::new(self.shape(id).to_vec(), g.clone()).ok()
    }

    pub fn stats_updates(&self) -> &[StatsUpdate] {
        &self.stats_updates
    }

    pub fn diagnostics(&self) -> LossDiagnostics {
        self.diagnostics
    }

    /// Hash of every ReLU sign pattern and max-pool argmax on the tape. Two
    /// evaluations with equal fingerprints lie on the same smooth piece.
    pub fn kink_fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.nodes[x.0].value.data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn next_label(&self, op: &Op) -> String {
        if self.scope.is_empty() {
            format!("{}#{}", op.kind(), self.nodes.len())
        } else {
            format!("{}/{}#{}", self.scope, op.kind(), self.nodes.len())
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        let label = self.next_label(&op);
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite(label));
        }
        self.nodes.push(Node { op, value, label });
        self.backward_done = false;
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn mismatch(&self, op: &str, expected: impl Into<String>, actual: impl Into<String>) -> Error {
        let node = if self.scope.is_empty() {
            format!("{}#{}", op, self.nodes.len())
        } else {
            format!("{}/{}#{}", self.scope, op, self.nodes.len())
        };
        Error::ShapeMismatch {
            node,
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    fn dims4(&self, id: NodeId, op: &str) -> Result<(usize, usize, usize, usize)> {
        self.value(id)
            .dims4()
            .map_err(|_| self.mismatch(op, "rank-4 N x C x H x W", format!("{:?}", self.shape(id))))
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value).expect("finite input")
    }

    /// Leaf that checks its value for non-finite entries instead of panicking.
    pub fn try_input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, value)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let value = store.get(id).value.clone();
        let label = store.get(id).name.clone();
        let node = self.push(Op::Param(id), value).expect("finite parameter");
        self.nodes[node.0].label = label;
        node
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(Op::Reshape(x), value)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(x), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", format!("{:?}", self.shape(a)), format!("{:?}", self.shape(b))));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(Op::Add(a, b), value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", format!("{:?}", self.shape(a)), format!("{:?}", self.shape(b))));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(Op::Mul(a, b), value)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), value)
    }

    /// `sum_i weights[i] * x[i]`: a fixed linear functional used by gradient checks.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<f64>) -> Result<NodeId> {
        if weights.len() != self.value(x).len() {
            return Err(self.mismatch("weighted_sum", format!("{} weights", self.value(x).len()), format!("{}", weights.len())));
        }
        let value = Tensor::scalar(self.value(x).data().iter().zip(&weights).map(|(a, b)| a * b).sum());
        self.push(Op::WeightedSum(x, weights), value)
    }

    /// Concatenates rank-4 tensors along the channel axis, in list order.
    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(self.mismatch("concat", "at least one input", "none"));
        }
        let mut dims = Vec::with_capacity(inputs.len());
        for &i in inputs {
            dims.push(self.dims4(i, "concat")?);
        }
        let (n, _, h, w) = dims[0];
        if dims.iter().any(|&(dn, _, dh, dw)| dn != n || dh != h || dw != w) {
            let extents = dims
                .iter()
                .map(|(dn, _, dh, dw)| format!("{}:{}x{}", dn, dh, dw))
                .collect::<Vec<_>>()
                .join(", ");
            return Err(Error::SpatialMismatch { extents });
        }
        let c_total: usize = dims.iter().map(|d| d.1).sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * c_total * hw);
        for s in 0..n {
            for (&i, d) in inputs.iter().zip(&dims) {
                let len = d.1 * hw;
                data.extend_from_slice(&self.value(i).data()[s * len..(s + 1) * len]);
            }
        }
        let value = Tensor::new(vec![n, c_total, h, w], data)?;
        self.push(Op::Concat(inputs.to_vec()), value)
    }

    /// Cross-correlation; weight shape `c_out x c_in x kh x kw`, optional bias of length `c_out`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeometry) -> Result<NodeId> {
        let (n, c_in, h, wd) = self.dims4(x, "conv2d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != c_in || (ws[2], ws[3]) != geom.kernel {
            return Err(self.mismatch(
                "conv2d",
                format!("weight [_, {}, {}, {}]", c_in, geom.kernel.0, geom.kernel.1),
                format!("{:?}", ws),
            ));
        }
        let c_out = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(self.mismatch("conv2d", format!("bias [{}]", c_out), format!("{:?}", self.shape(b))));
            }
        }
        let (oh, ow) = geom.conv_output(h, wd).ok_or_else(|| Error::DegenerateOutput {
            node: format!("{}conv2d#{}", scope_prefix(&self.scope), self.nodes.len()),
            detail: format!("{}x{} input with {:?}", h, wd, geom),
        })?;
        let dims = ConvDims { n, c_in, h, w: wd, c_out, oh, ow };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &dims,
            &geom,
        );
        let value = Tensor::new(vec![n, c_out, oh, ow], out)?;
        self.push(Op::Conv2d { x, w, b, dims, geom }, value)
    }

    /// Transposed convolution; weight shape `c_in x c_out x kh x kw`.
    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, geom: ConvGeometry) -> Result<NodeId> {
        let (n, c_in, h, wd) = self.dims4(x, "conv_transpose2d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[0] != c_in || (ws[2], ws[3]) != geom.kernel {
            return Err(self.mismatch(
                "conv_transpose2d",
                format!("weight [{}, _, {}, {}]", c_in, geom.kernel.0, geom.kernel.1),
                format!("{:?}", ws),
            ));
        }
        let c_out = ws[1];
        let (oh, ow) = geom.transpose_output(h, wd).ok_or_else(|| Error::DegenerateOutput {
            node: format!("{}conv_transpose2d#{}", scope_prefix(&self.scope), self.nodes.len()),
            detail: format!("{}x{} input with {:?}", h, wd, geom),
        })?;
        let dims = ConvDims { n, c_in, h, w: wd, c_out, oh, ow };
        let out = kernels::conv_transpose2d_forward(self.value(x).data(), self.value(w).data(), &dims, &geom);
        let value = Tensor::new(vec![n, c_out, oh, ow], out)?;
        self.push(Op::ConvTranspose2d { x, w, dims, geom }, value)
    }

    fn check_affine(&self, x: NodeId, gamma: NodeId, beta: NodeId, op: &str) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = self.dims4(x, op)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(self.mismatch(
                op,
                format!("gamma/beta [{}]", c),
                format!("{:?}/{:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        Ok((n, c, h * w))
    }

    /// Training-mode batch norm; when `stats` is given, the batch statistics are
    /// recorded as a pending running-average update.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        stats: Option<StatsId>,
    ) -> Result<NodeId> {
        let (n, c, hw) = self.check_affine(x, gamma, beta, "batch_norm_train")?;
        if n * hw < 2 {
            return Err(Error::InsufficientStatistics(n * hw));
        }
        let (y, xhat, batch) = kernels::batch_norm_train_forward(
            self.value(x).data(),
            n,
            c,
            hw,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        if let Some(stats) = stats {
            let m = batch.count as f64;
            self.stats_updates.push(StatsUpdate {
                stats,
                mean: batch.mean.clone(),
                var: batch.var.iter().map(|v| v * m / (m - 1.0)).collect(),
            });
        }
        let value = Tensor::new(self.shape(x).to_vec(), y)?;
        self.push(Op::BatchNormTrain { x, gamma, beta, xhat, stats: batch }, value)
    }

    /// Inference-mode batch norm with frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let (n, c, hw) = self.check_affine(x, gamma, beta, "batch_norm_eval")?;
        if mean.len() != c || var.len() != c {
            return Err(self.mismatch("batch_norm_eval", format!("running stats [{}]", c), format!("[{}]", mean.len())));
        }
        let (y, xhat) = kernels::batch_norm_eval_forward(
            self.value(x).data(),
            n,
            c,
            hw,
            self.value(gamma).data(),
            self.value(beta).data(),
            mean,
            var,
            eps,
        );
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let value = Tensor::new(self.shape(x).to_vec(), y)?;
        self.push(Op::BatchNormEval { x, gamma, beta, xhat, inv_std }, value)
    }

    fn pool_extent(&self, x: NodeId, k: usize, s: usize, op: &str) -> Result<(usize, usize, usize, usize, usize, usize)> {
        let (n, c, h, w) = self.dims4(x, op)?;
        if k == 0 || s == 0 || k > h || k > w {
            return Err(Error::DegenerateOutput {
                node: format!("{}{}#{}", scope_prefix(&self.scope), op, self.nodes.len()),
                detail: format!("{}x{} window on {}x{} input", k, k, h, w),
            });
        }
        Ok((n, c, h, w, (h - k) / s + 1, (w - k) / s + 1))
    }

    pub fn max_pool(&mut self, x: NodeId, k: usize, s: usize) -> Result<NodeId> {
        let (n, c, h, w, oh, ow) = self.pool_extent(x, k, s, "max_pool")?;
        let (out, argmax) = kernels::max_pool_forward(self.value(x).data(), n * c, h, w, k, s, oh, ow);
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push(Op::MaxPool { x, argmax }, value)
    }

    pub fn avg_pool(&mut self, x: NodeId, k: usize, s: usize) -> Result<NodeId> {
        let (n, c, h, w, oh, ow) = self.pool_extent(x, k, s, "avg_pool")?;
        let out = kernels::avg_pool_forward(self.value(x).data(), n * c, h, w, k, s, oh, ow);
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push(Op::AvgPool { x, k, s }, value)
    }

    /// Align-corners bilinear upsampling to `out_h x out_w` (no downscaling).
    pub fn bilinear_upsample(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let (n, c, h, w) = self.dims4(x, "bilinear_upsample")?;
        if out_h < h || out_w < w {
            return Err(Error::DownscaleRequest { from_h: h, from_w: w, to_h: out_h, to_w: out_w });
        }
        let out = kernels::bilinear_forward(self.value(x).data(), n * c, h, w, out_h, out_w);
        let value = Tensor::new(vec![n, c, out_h, out_w], out)?;
        self.push(Op::Bilinear(x), value)
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.dims4(x, "softmax_channels")?;
        if c < 2 {
            return Err(self.mismatch("softmax_channels", "at least 2 channels", format!("{}", c)));
        }
        let out = kernels::softmax_channels_forward(self.value(x).data(), n, c, h * w);
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push(Op::Softmax(x), value)
    }

    /// `-(1/norm) * sum_i alpha_i * w(p_i) * log(max(p_i, floor))` over the
    /// non-ignored pixels, where `p_i` is the probability of the target class.
    pub fn weighted_log_loss(
        &mut self,
        probs: NodeId,
        targets: Vec<PixelTarget>,
        weight: AttentionWeight,
        norm: f64,
    ) -> Result<NodeId> {
        let (n, c, h, w) = self.dims4(probs, "boundary_aware_loss")?;
        if targets.len() != n * h * w {
            return Err(self.mismatch("boundary_aware_loss", format!("{} pixel targets", n * h * w), format!("{}", targets.len())));
        }
        let hw = h * w;
        let p = self.value(probs).data();
        let mut total = 0.0;
        let mut clamped = 0;
        for (i, t) in targets.iter().enumerate() {
            let Some((class, alpha)) = *t else { continue };
            if class >= c {
                return Err(self.mismatch("boundary_aware_loss", format!("class < {}", c), format!("{}", class)));
            }
            let (s, pix) = (i / hw, i % hw);
            let pg = p[(s * c + class) * hw + pix];
            if pg < PROB_FLOOR {
                clamped += 1;
            }
            total += alpha * weight.eval(pg) * pg.max(PROB_FLOOR).ln();
        }
        self.diagnostics.clamped_pixels += clamped;
        let value = Tensor::scalar(if norm > 0.0 { -total / norm } else { 0.0 });
        self.push(Op::WeightedLogLoss { probs, targets, weight, norm }, value)
    }

    /// Reverse sweep from a scalar `loss` node with seed 1.0.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::BackwardBeforeForward);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = self.grads[idx].take() else { continue };
            self.propagate(idx, &dy);
            self.grads[idx] = Some(dy);
        }
        self.backward_done = true;
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, g: Vec<f64>) {
        match &mut self.grads[id.0] {
            Some(existing) => {
                for (a, b) in existing.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, idx: usize, dy: &[f64]) {
        let node = &self.nodes[idx];
        let mut out: Vec<(NodeId, Vec<f64>)> = Vec::new();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Reshape(x) => out.push((*x, dy.to_vec())),
            Op::Relu(x) => {
                let xv = self.nodes[x.0].value.data();
                out.push((*x, xv.iter().zip(dy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect()));
            }
            Op::Add(a, b) => {
                out.push((*a, dy.to_vec()));
                out.push((*b, dy.to_vec()));
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                out.push((*a, bv.iter().zip(dy).map(|(v, g)| v * g).collect()));
                out.push((*b, av.iter().zip(dy).map(|(v, g)| v * g).collect()));
            }
            Op::Sum(x) => out.push((*x, vec![dy[0]; self.nodes[x.0].value.len()])),
            Op::WeightedSum(x, weights) => out.push((*x, weights.iter().map(|w| w * dy[0]).collect())),
            Op::Concat(inputs) => {
                let (n, c_total, h, w) = node.value.dims4().expect("rank-4");
                let hw = h * w;
                let mut offset = 0;
                for &i in inputs {
                    let c = self.nodes[i.0].value.shape()[1];
                    let mut g = Vec::with_capacity(n * c * hw);
                    for s in 0..n {
                        let start = (s * c_total + offset) * hw;
                        g.extend_from_slice(&dy[start..start + c * hw]);
                    }
                    offset += c;
                    out.push((i, g));
                }
            }
            Op::Conv2d { x, w, b, dims, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.nodes[x.0].value.data(),
                    self.nodes[w.0].value.data(),
                    dy,
                    dims,
                    geom,
                );
                out.push((*x, dx));
                out.push((*w, dw));
                if let Some(b) = b {
                    out.push((*b, db));
                }
            }
            Op::ConvTranspose2d { x, w, dims, geom } => {
                let (dx, dw) = kernels::conv_transpose2d_backward(
                    self.nodes[x.0].value.data(),
                    self.nodes[w.0].value.data(),
                    dy,
                    dims,
                    geom,
                );
                out.push((*x, dx));
                out.push((*w, dw));
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, stats } => {
                let (n, c, h, w) = node.value.dims4().expect("rank-4");
                let (dx, dg, db) = kernels::batch_norm_train_backward(
                    dy,
                    xhat,
                    n,
                    c,
                    h * w,
                    self.nodes[gamma.0].value.data(),
                    stats,
                );
                out.push((*x, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
                let (n, c, h, w) = node.value.dims4().expect("rank-4");
                let hw = h * w;
                let gv = self.nodes[gamma.0].value.data();
                let mut dx = vec![0.0; dy.len()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for s in 0..n {
                    for ci in 0..c {
                        let base = (s * c + ci) * hw;
                        for i in base..base + hw {
                            dx[i] = dy[i] * gv[ci] * inv_std[ci];
                            dg[ci] += dy[i] * xhat[i];
                            db[ci] += dy[i];
                        }
                    }
                }
                out.push((*x, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.nodes[x.0].value.len()];
                for (o, &i) in argmax.iter().enumerate() {
                    dx[i] += dy[o];
                }
                out.push((*x, dx));
            }
            Op::AvgPool { x, k, s } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4().expect("rank-4");
                let (_, _, oh, ow) = node.value.dims4().expect("rank-4");
                out.push((*x, kernels::avg_pool_backward(dy, n * c, h, w, *k, *s, oh, ow)));
            }
            Op::Bilinear(x) => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4().expect("rank-4");
                let (_, _, oh, ow) = node.value.dims4().expect("rank-4");
                out.push((*x, kernels::bilinear_backward(dy, n * c, h, w, oh, ow)));
            }
            Op::Softmax(x) => {
                let (n, c, h, w) = node.value.dims4().expect("rank-4");
                out.push((*x, kernels::softmax_channels_backward(node.value.data(), dy, n, c, h * w)));
            }
            Op::WeightedLogLoss { probs, targets, weight, norm } => {
                let pv = &self.nodes[probs.0].value;
                let (_, c, h, w) = pv.dims4().expect("rank-4");
                let hw = h * w;
                let mut dp = vec![0.0; pv.len()];
                if *norm > 0.0 {
                    let scale = -dy[0] / norm;
                    for (i, t) in targets.iter().enumerate() {
                        let Some((class, alpha)) = *t else { continue };
                        let j = ((i / hw) * c + class) * hw + i % hw;
                        let p = pv.data()[j];
                        let dw = weight.derivative(p);
                        let log_term = if dw == 0.0 { 0.0 } else { dw * p.max(PROB_FLOOR).ln() };
                        let inv_term = if p < PROB_FLOOR { 0.0 } else { weight.eval(p) / p };
                        dp[j] = scale * alpha * (log_term + inv_term);
                    }
                }
                out.push((*probs, dp));
            }
        }
        for (id, g) in out {
            self.accumulate(id, g);
        }
    }

    /// Adds the gradients of every parameter leaf into the store's accumulators.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        if !self.backward_done {
            return Err(Error::BackwardBeforeForward);
        }
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, grad) {
                let p = store.get_mut(*id);
                for (a, b) in p.grad.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        Ok(())
    }
}

fn scope_prefix(scope: &str) -> String {
    if scope.is_empty() {
        String::new()
    } else {
        format!("{}/", scope)
    }
}
