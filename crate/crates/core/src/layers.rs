//! Layers that own parameters: convolution, transposed convolution, batch
//! norm, the `BN -> ReLU -> conv` unit and the dense-layer composite function.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::ConvGeometry;
use crate::params::{ParamId, ParamStore, StatsId};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Evaluation context threaded through layer forward calls.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub params: &'a ParamStore,
    pub mode: Mode,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, params: &'a ParamStore, mode: Mode) -> Self {
        Ctx { g, params, mode }
    }

    fn param(&mut self, id: ParamId) -> NodeId {
        self.g.param(self.params, id)
    }
}

/// Registers parameters under a dotted path prefix with seeded initialisation.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Init { store, rng, prefix: Vec::new() }
    }

    pub fn push(&mut self, segment: impl Into<String>) {
        self.prefix.push(segment.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    pub fn path(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    /// Runs `f` with `segment` appended to the prefix.
    pub fn scoped<T>(&mut self, segment: impl Into<String>, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.push(segment);
        let out = f(self);
        self.pop();
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl ConvSpec {
    pub fn square(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, dilation: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
            dilation: (dilation, dilation),
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::square(in_channels, out_channels, 1, 1, 0, 1)
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            dilation: self.dilation,
        }
    }

    /// Output extent for an `h x w` input, if at least 1.
    pub fn output_extent(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        self.geometry().conv_output(h, w)
    }

    fn weight_len(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel.0 * self.kernel.1
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new(init: &mut Init, name: &str, spec: ConvSpec, bias: bool) -> Result<Self> {
        init.scoped(name, |init| {
            let fan_in = spec.in_channels * spec.kernel.0 * spec.kernel.1;
            let weight = init.store.add_he_uniform(
                init.path("weight"),
                &[spec.out_channels, spec.in_channels, spec.kernel.0, spec.kernel.1],
                fan_in,
                init.rng,
            )?;
            let bias = if bias {
                Some(init.store.add(init.path("bias"), Tensor::zeros(&[spec.out_channels]), false)?)
            } else {
                None
            };
            Ok(Conv2d { spec, weight, bias })
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let c = cx.g.shape(x).get(1).copied().unwrap_or(0);
        if c != self.spec.in_channels {
            return Err(Error::ShapeMismatch {
                node: format!("{}conv2d", cx.params.get(self.weight).name.trim_end_matches("weight")),
                expected: format!("{} input channels", self.spec.in_channels),
                actual: format!("{}", c),
            });
        }
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        cx.g.conv2d(x, w, b, self.spec.geometry())
    }

    pub fn parameter_count(&self) -> usize {
        self.spec.weight_len() + if self.bias.is_some() { self.spec.out_channels } else { 0 }
    }
}

/// Transposed convolution without bias; weight layout `in x out x kh x kw`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
}

impl ConvTranspose2d {
    pub fn new(init: &mut Init, name: &str, spec: ConvSpec) -> Result<Self> {
        init.scoped(name, |init| {
            let fan_in = spec.in_channels * spec.kernel.0 * spec.kernel.1;
            let weight = init.store.add_he_uniform(
                init.path("weight"),
                &[spec.in_channels, spec.out_channels, spec.kernel.0, spec.kernel.1],
                fan_in,
                init.rng,
            )?;
            Ok(ConvTranspose2d { spec, weight })
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let w = cx.param(self.weight);
        cx.g.conv_transpose2d(x, w, self.spec.geometry())
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        init.scoped(name, |init| {
            let gamma = init.store.add(init.path("gamma"), Tensor::ones(&[channels]), false)?;
            let beta = init.store.add(init.path("beta"), Tensor::zeros(&[channels]), false)?;
            let stats = init.store.add_stats(init.path("running"), channels, BN_MOMENTUM);
            Ok(BatchNorm { channels, gamma, beta, stats, eps: BN_EPS })
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        match cx.mode {
            Mode::Train => cx.g.batch_norm_train(x, gamma, beta, self.eps, Some(self.stats)),
            Mode::Eval => {
                let s = cx.params.stats(self.stats);
                cx.g.batch_norm_eval(x, gamma, beta, &s.mean, &s.var, self.eps)
            }
        }
    }
}

/// `BN -> ReLU -> conv`, the building unit of compression, transition and resampling layers.
#[derive(Clone, Debug)]
pub struct BnReluConv {
    pub bn: BatchNorm,
    pub conv: Conv2d,
}

impl BnReluConv {
    pub fn new(init: &mut Init, name: &str, spec: ConvSpec) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(BnReluConv {
                bn: BatchNorm::new(init, "bn", spec.in_channels)?,
                conv: Conv2d::new(init, "conv", spec, false)?,
            })
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let y = self.bn.forward(cx, x)?;
        let y = cx.g.relu(y)?;
        self.conv.forward(cx, y)
    }

    pub fn out_channels(&self) -> usize {
        self.conv.spec.out_channels
    }
}

/// `BN -> ReLU -> transposed conv`.
#[derive(Clone, Debug)]
pub struct BnReluDeconv {
    pub bn: BatchNorm,
    pub deconv: ConvTranspose2d,
}

impl BnReluDeconv {
    pub fn new(init: &mut Init, name: &str, spec: ConvSpec) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(BnReluDeconv {
                bn: BatchNorm::new(init, "bn", spec.in_channels)?,
                deconv: ConvTranspose2d::new(init, "deconv", spec)?,
            })
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let y = self.bn.forward(cx, x)?;
        let y = cx.g.relu(y)?;
        self.deconv.forward(cx, y)
    }
}

/// Bottleneck width relative to the growth rate.
pub const BOTTLENECK_FACTOR: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositeHSpec {
    pub in_channels: usize,
    pub growth: usize,
    /// Dilation of the 3x3 convolution (atrous when > 1).
    pub dilation: usize,
}

impl CompositeHSpec {
    pub fn bottleneck(&self) -> ConvSpec {
        ConvSpec::pointwise(self.in_channels, BOTTLENECK_FACTOR * self.growth)
    }

    pub fn main(&self) -> ConvSpec {
        ConvSpec::square(BOTTLENECK_FACTOR * self.growth, self.growth, 3, 1, self.dilation, self.dilation)
    }
}

/// Dense-layer composite function: `BN, ReLU, 1x1 conv, BN, ReLU, 3x3 conv`.
#[derive(Clone, Debug)]
pub struct CompositeH {
    pub spec: CompositeHSpec,
    pub bottleneck: BnReluConv,
    pub main: BnReluConv,
}

impl CompositeH {
    pub fn new(init: &mut Init, name: &str, spec: CompositeHSpec) -> Result<Self> {
        if spec.growth == 0 || spec.in_channels == 0 || spec.dilation == 0 {
            return Err(Error::validation("composite_h", "channels, growth and dilation must be >= 1"));
        }
        init.scoped(name, |init| {
            Ok(CompositeH {
                spec,
                bottleneck: BnReluConv::new(init, "bottleneck", spec.bottleneck())?,
                main: BnReluConv::new(init, "main", spec.main())?,
            })
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let mid = self.bottleneck.forward(cx, x)?;
        self.main.forward(cx, mid)
    }

    /// Forward returning the bottleneck activation as well (for inspection).
    pub fn forward_with_bottleneck(&self, cx: &mut Ctx, x: NodeId) -> Result<(NodeId, NodeId)> {
        let mid = self.bottleneck.forward(cx, x)?;
        let out = self.main.forward(cx, mid)?;
        Ok((mid, out))
    }
}
