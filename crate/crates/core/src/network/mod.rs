//! The fully dense encoder-decoder: a DenseNet encoder producing B1..B4, then
//! three decoder stages, each aggregating (compress, resize, concat) the
//! outputs of every previous block.
//!
//! Decoder order: aggregation 1 -> compress -> block 5 -> compress ->
//! aggregation 2 -> compress -> block 6 -> compress -> aggregation 3. Every
//! aggregation output also feeds a prediction head (BN, ReLU, 1x1 conv to
//! the class count, bilinear upsampling to the input size); the last head
//! is the network prediction.

mod aggregation;
mod spec;

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use aggregation::{AdaptiveAggregation, AggregationSource, AggregationSpec, BlockId, Transform};
pub use spec::{NetworkSpec, Wiring};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{BatchNorm, BnReluConv, CompositeH, CompositeHSpec, Conv2d, ConvSpec, Ctx, Init, Mode};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Dense block: layer `l` sees the concatenation of the block input and all
/// earlier layer outputs; the block output is the full concatenation.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub in_channels: usize,
    pub growth: usize,
    pub layers: Vec<CompositeH>,
}

impl DenseBlock {
    pub fn new(init: &mut Init, name: &str, in_channels: usize, depth: usize, growth: usize, dilation: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::validation(name, "dense block depth must be >= 1"));
        }
        init.scoped(name, |init| {
            let layers = (0..depth)
                .map(|l| {
                    CompositeH::new(
                        init,
                        &format!("layer{}", l),
                        CompositeHSpec {
                            in_channels: in_channels + l * growth,
                            growth,
                            dilation,
                        },
                    )
                })
                .collect::<Result<_>>()?;
            Ok(DenseBlock { in_channels, growth, layers })
        })
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.layers.len() * self.growth
    }

    pub fn forward(&self, cx: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let mut features = vec![x];
        for layer in &self.layers {
            let input = if features.len() == 1 {
                x
            } else {
                cx.g.concat_channels(&features)?
            };
            features.push(layer.forward(cx, input)?);
        }
        cx.g.concat_channels(&features)
    }
}

/// `BN, ReLU, 1x1 conv` to `floor(in * factor)` channels, then optionally a
/// 2x2 stride-2 average pool.
#[derive(Clone, Debug)]
pub struct Transition {
    pub compress: BnReluConv,
    pub pool: bool,
}

impl Transition {
    pub fn new(init: &mut Init, name: &str, in_channels: usize, factor: f64, pool: bool) -> Result<Self> {
        if !(factor > 0.0 && factor <= 1.0) {
            return Err(Error::validation("transition_compression", "must be in (0, 1]"));
        }
        let out = (in_channels as f64 * factor).floor() as usize;
        if out == 0 {
            return Err(Error::DegenerateOutput {
                node: name.to_string(),
                detail: format!("{} channels compressed by {} leaves none", in_channels, factor),
            });
        }
        let compress = BnReluConv::new(init, name, ConvSpec::pointwise(in_channels, out))?;
        Ok(Transition { compress, pool })
    }

    pub fn out_channels(&self) -> usize {
        self.compress.out_channels()
    }

    pub fn forward(&self, cx: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let y = self.compress.forward(cx, x)?;
        if self.pool {
            cx.g.avg_pool(y, 2, 2)
        } else {
            Ok(y)
        }
    }
}

/// Stem convolution (3x3, stride 2) followed by BN, ReLU and a 2x2 max pool.
#[derive(Clone, Debug)]
struct Stem {
    conv: Conv2d,
    bn: BatchNorm,
}

#[derive(Clone, Debug)]
struct Head {
    conv: Conv2d,
}

impl Head {
    fn forward(&self, cx: &mut Ctx, x: NodeId, out: (usize, usize)) -> Result<NodeId> {
        let y = self.conv.forward(cx, x)?;
        cx.g.bilinear_upsample(y, out.0, out.1)
    }
}

#[derive(Clone, Debug)]
struct DecoderStage {
    aggregation: AdaptiveAggregation,
    head: Head,
    /// Compression, dense block and post-block compression; absent after the last stage.
    block: Option<(BnReluConv, DenseBlock, BnReluConv)>,
}

/// One edge of the decoder connectivity: `source` feeds aggregation `stage`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectivityEdge {
    pub source: BlockId,
    pub stage: usize,
    pub direct: bool,
    pub transform: Transform,
    /// Reuse compression width; for the direct input, its (already compressed) width.
    pub width: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectivityReport {
    pub edges: Vec<ConnectivityEdge>,
}

impl ConnectivityReport {
    pub fn edges_into(&self, stage: usize) -> impl Iterator<Item = &ConnectivityEdge> {
        self.edges.iter().filter(move |e| e.stage == stage)
    }

    pub fn non_direct_count(&self, stage: usize) -> usize {
        self.edges_into(stage).filter(|e| !e.direct).count()
    }
}

impl fmt::Display for ConnectivityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.edges {
            writeln!(
                f,
                "{:>7} -> stage{}  {:<8} {:<9} width {}",
                e.source.to_string(),
                e.stage,
                if e.direct { "direct" } else { "reused" },
                e.transform.to_string(),
                e.width
            )?;
        }
        write!(f, "aggregation edges: {}", self.edges.len())
    }
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Head logits of each stage, upsampled to the input resolution.
    pub stage_logits: Vec<NodeId>,
    /// Aggregated feature map `F^i` of each stage.
    pub aggregated: Vec<NodeId>,
    /// Outputs of blocks B1..B4, block 5 and block 6.
    pub blocks: Vec<(BlockId, NodeId)>,
}

impl ForwardOutput {
    /// Logits used for the prediction (last stage).
    pub fn logits(&self) -> NodeId {
        *self.stage_logits.last().expect("three stages")
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: ParamStore,
    stem: Stem,
    blocks: Vec<DenseBlock>,
    transitions: Vec<Transition>,
    encoder_compress: BnReluConv,
    stages: Vec<DecoderStage>,
}

/// Builds the network with seeded He-uniform kernels, unit BN scales and zero shifts/biases.
pub fn build_fdnet(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    spec.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init::new(&mut store, &mut rng);

    init.push("encoder");
    let stem = init.scoped("stem", |init| {
        Ok(Stem {
            conv: Conv2d::new(init, "conv", ConvSpec::square(spec.in_channels, spec.initial_channels, 3, 2, 1, 1), false)?,
            bn: BatchNorm::new(init, "bn", spec.initial_channels)?,
        })
    })?;
    let mut channels = spec.initial_channels;
    let mut blocks = Vec::new();
    let mut transitions = Vec::new();
    let mut block_channels = Vec::new();
    for (b, &depth) in spec.encoder_depths.iter().enumerate() {
        let dilation = if b == 3 && spec.encoder_stride == 16 { spec.block4_dilation } else { 1 };
        let block = DenseBlock::new(&mut init, &format!("block{}", b + 1), channels, depth, spec.growth_rate, dilation)?;
        channels = block.out_channels();
        block_channels.push(channels);
        blocks.push(block);
        if b < 3 {
            let pool = !(b == 2 && spec.encoder_stride == 16);
            let t = Transition::new(&mut init, &format!("transition{}", b + 1), channels, spec.transition_compression, pool)?;
            channels = t.out_channels();
            transitions.push(t);
        }
    }
    let encoder_compress = BnReluConv::new(&mut init, "compress", ConvSpec::pointwise(channels, spec.encoder_width))?;
    init.pop();

    init.push("decoder");
    let scales = spec.block_scales();
    // (block, scale, channels) of every block output available to later stages.
    let mut available: Vec<(BlockId, usize, usize)> =
        (0..4).map(|b| (BlockId(b + 1), scales[b], block_channels[b])).collect();
    let mut direct = (BlockId(4), scales[3], spec.encoder_width);
    let mut stages = Vec::new();
    for stage in 0..3 {
        let target = spec.stage_scales[stage];
        let agg_spec = aggregation_spec(spec, stage, &available, direct)?;
        let stage_module = init.scoped(format!("stage{}", stage + 1), |init| {
            let aggregation = AdaptiveAggregation::new(init, agg_spec)?;
            let f_channels = aggregation.spec.out_channels();
            let head = init.scoped("head", |init| {
                Ok(Head {
                    conv: Conv2d::new(init, "conv", ConvSpec::pointwise(f_channels, spec.class_count), true)?,
                })
            })?;
            Ok((aggregation, head, f_channels))
        })?;
        let (aggregation, head, f_channels) = stage_module;
        let block = if stage < 2 {
            let id = 5 + stage;
            let pre = BnReluConv::new(
                &mut init,
                &format!("stage{}.compress", stage + 1),
                ConvSpec::pointwise(f_channels, spec.aggregation_widths[stage]),
            )?;
            let dense = DenseBlock::new(
                &mut init,
                &format!("block{}", id),
                spec.aggregation_widths[stage],
                spec.decoder_depths[stage],
                spec.growth_rate,
                1,
            )?;
            let post = BnReluConv::new(
                &mut init,
                &format!("block{}.compress", id),
                ConvSpec::pointwise(dense.out_channels(), spec.block_widths[stage]),
            )?;
            available.push((BlockId(id), target, dense.out_channels()));
            direct = (BlockId(id), target, spec.block_widths[stage]);
            Some((pre, dense, post))
        } else {
            None
        };
        stages.push(DecoderStage { aggregation, head, block });
    }
    init.pop();

    Ok(Network {
        spec: spec.clone(),
        params: store,
        stem,
        blocks,
        transitions,
        encoder_compress,
        stages,
    })
}

/// Sources of aggregation stage `stage` (0-based) given the blocks produced so far.
fn aggregation_spec(
    spec: &NetworkSpec,
    stage: usize,
    available: &[(BlockId, usize, usize)],
    direct: (BlockId, usize, usize),
) -> Result<AggregationSpec> {
    let target = spec.stage_scales[stage];
    let width = spec.reuse_widths[stage];
    let reused: Vec<&(BlockId, usize, usize)> = match spec.wiring {
        Wiring::Dense => available.iter().filter(|a| a.0 != direct.0).collect(),
        Wiring::None => Vec::new(),
        Wiring::Skip => {
            let same = available
                .iter()
                .filter(|a| a.0 != direct.0 && a.0 .0 <= 4 && a.1 == target)
                .take(1)
                .collect::<Vec<_>>();
            if same.is_empty() {
                return Err(Error::validation(
                    format!("network.stage_scales[{}]", stage),
                    format!("skip wiring needs an encoder block at 1/{}", target),
                ));
            }
            same
        }
    };
    let mut sources: Vec<AggregationSource> = reused
        .into_iter()
        .map(|&(block, scale, channels)| AggregationSource {
            block,
            scale,
            channels,
            direct: false,
            transform: Transform::between(scale, target),
            compression: Some(width),
        })
        .collect();
    sources.push(AggregationSource {
        block: direct.0,
        scale: direct.1,
        channels: direct.2,
        direct: true,
        transform: Transform::between(direct.1, target),
        compression: None,
    });
    sources.sort_by_key(|s| s.block);
    Ok(AggregationSpec {
        stage: stage + 1,
        target_scale: target,
        sources,
    })
}

impl Network {
    pub fn parameter_count(&self) -> usize {
        count_parameters(self)
    }

    pub fn aggregation_specs(&self) -> Vec<&AggregationSpec> {
        self.stages.iter().map(|s| &s.aggregation.spec).collect()
    }

    pub fn connectivity_report(&self) -> ConnectivityReport {
        connectivity_report(self)
    }

    /// Forward pass of a `N x C x H x W` image batch recorded on `g`.
    pub fn forward(&self, g: &mut Graph, image: NodeId, mode: Mode) -> Result<ForwardOutput> {
        let (_, c, h, w) = g.value(image).dims4()?;
        let m = self.spec.required_multiple();
        if c != self.spec.in_channels || h % m != 0 || w % m != 0 {
            return Err(Error::ShapeMismatch {
                node: "input".into(),
                expected: format!("{} channels, extents divisible by {}", self.spec.in_channels, m),
                actual: format!("{:?}", g.shape(image)),
            });
        }
        let mut cx = Ctx::new(g, &self.params, mode);
        cx.g.set_scope("encoder.stem");
        let x = self.stem.conv.forward(&mut cx, image)?;
        let x = self.stem.bn.forward(&mut cx, x)?;
        let x = cx.g.relu(x)?;
        let mut x = cx.g.max_pool(x, 2, 2)?;

        let mut outputs: Vec<(BlockId, NodeId)> = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            cx.g.set_scope(format!("encoder.block{}", b + 1));
            let out = block.forward(&mut cx, x)?;
            outputs.push((BlockId(b + 1), out));
            if let Some(t) = self.transitions.get(b) {
                cx.g.set_scope(format!("encoder.transition{}", b + 1));
                x = t.forward(&mut cx, out)?;
            }
        }
        cx.g.set_scope("encoder.compress");
        let mut direct = self.encoder_compress.forward(&mut cx, outputs[3].1)?;

        let mut stage_logits = Vec::new();
        let mut aggregated = Vec::new();
        for stage in &self.stages {
            let spec = &stage.aggregation.spec;
            cx.g.set_scope(format!("decoder.stage{}", spec.stage));
            let inputs: Vec<NodeId> = spec
                .sources
                .iter()
                .map(|s| {
                    if s.direct {
                        Ok(direct)
                    } else {
                        outputs
                            .iter()
                            .find(|(id, _)| *id == s.block)
                            .map(|o| o.1)
                            .ok_or_else(|| Error::validation("aggregation", format!("{} not yet produced", s.block)))
                    }
                })
                .collect::<Result<_>>()?;
            let target = (h / spec.target_scale, w / spec.target_scale);
            let f = stage.aggregation.forward(&mut cx, &inputs, target)?;
            aggregated.push(f);
            stage_logits.push(stage.head.forward(&mut cx, f, (h, w))?);
            if let Some((pre, dense, post)) = &stage.block {
                let y = pre.forward(&mut cx, f)?;
                let id = BlockId(5 + spec.stage - 1);
                cx.g.set_scope(format!("decoder.{}", id));
                let out = dense.forward(&mut cx, y)?;
                outputs.push((id, out));
                direct = post.forward(&mut cx, out)?;
            }
        }
        cx.g.set_scope("");
        Ok(ForwardOutput {
            stage_logits,
            aggregated,
            blocks: outputs,
        })
    }

    /// Named-tensor forward evaluation. Expects an `image` input; returns
    /// `logits`, `probs` and `stage{i}_logits`.
    pub fn forward_eval(&self, inputs: &BTreeMap<String, Tensor>, mode: Mode) -> Result<BTreeMap<String, Tensor>> {
        let image = inputs.get("image").ok_or_else(|| Error::UnboundInput("image".into()))?;
        let mut g = Graph::new();
        let x = g.try_input(image.clone())?;
        let out = self.forward(&mut g, x, mode)?;
        let probs = g.softmax_channels(out.logits())?;
        let mut result = BTreeMap::new();
        for (i, &l) in out.stage_logits.iter().enumerate() {
            result.insert(format!("stage{}_logits", i + 1), g.value(l).clone());
        }
        result.insert("logits".into(), g.value(out.logits()).clone());
        result.insert("probs".into(), g.value(probs).clone());
        Ok(result)
    }

    /// Folds pending batch statistics from a training-mode pass into the running averages.
    pub fn commit_stats(&mut self, g: &Graph) {
        for u in g.stats_updates() {
            let s = self.params.stats_mut(u.stats);
            let m = s.momentum;
            for (r, &b) in s.mean.iter_mut().zip(&u.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, &b) in s.var.iter_mut().zip(&u.var) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }
}

/// Exact number of learnable scalars (conv/deconv weights and biases, BN scales and shifts).
pub fn count_parameters(network: &Network) -> usize {
    network.params.scalar_count()
}

/// Every aggregation edge, ordered by stage and then source block.
pub fn connectivity_report(network: &Network) -> ConnectivityReport {
    let mut edges = Vec::new();
    for spec in network.aggregation_specs() {
        for s in &spec.sources {
            edges.push(ConnectivityEdge {
                source: s.block,
                stage: spec.stage,
                direct: s.direct,
                transform: s.transform,
                width: s.out_channels(),
            });
        }
    }
    edges.sort_by_key(|e| (e.stage, e.source));
    ConnectivityReport { edges }
}
