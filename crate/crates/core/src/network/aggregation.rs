use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::layers::{BnReluConv, BnReluDeconv, ConvSpec, Ctx, Init};

/// Identifier of a dense block: 1-4 are encoder blocks, 5 and 6 decoder blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockId(pub usize);

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 <= 4 {
            write!(f, "B{}", self.0)
        } else {
            write!(f, "block{}", self.0)
        }
    }
}

/// Resampling applied to one aggregation input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "octaves", rename_all = "lowercase")]
pub enum Transform {
    /// Already at the target scale.
    Identity,
    /// Chain of stride-2 3x3 convolutions, one per octave.
    Downsample(u32),
    /// One stride-2 4x4 transposed convolution, then bilinear doubling for
    /// any further octaves.
    Upsample(u32),
}

impl Transform {
    /// Transform taking a map at `1/source_scale` to `1/target_scale`.
    pub fn between(source_scale: usize, target_scale: usize) -> Transform {
        use std::cmp::Ordering::*;
        let octaves = |a: usize, b: usize| (a / b).trailing_zeros();
        match source_scale.cmp(&target_scale) {
            Equal => Transform::Identity,
            Less => Transform::Downsample(octaves(target_scale, source_scale)),
            Greater => Transform::Upsample(octaves(source_scale, target_scale)),
        }
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Identity => f.write_str("identity"),
            Transform::Downsample(k) => write!(f, "down x{}", 1u32 << k),
            Transform::Upsample(k) => write!(f, "up x{}", 1u32 << k),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationSource {
    pub block: BlockId,
    /// Resolution divisor of the incoming map.
    pub scale: usize,
    pub channels: usize,
    /// The preceding block's already compressed output; it skips the reuse compression.
    pub direct: bool,
    pub transform: Transform,
    /// Width of the reuse compression, `None` for the direct input.
    pub compression: Option<usize>,
}

impl AggregationSource {
    pub fn out_channels(&self) -> usize {
        self.compression.unwrap_or(self.channels)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationSpec {
    /// 1-based stage index.
    pub stage: usize,
    pub target_scale: usize,
    /// Sources in concatenation order.
    pub sources: Vec<AggregationSource>,
}

impl AggregationSpec {
    pub fn validate(&self) -> Result<()> {
        let field = format!("aggregation.stage{}", self.stage);
        let direct = self.sources.iter().filter(|s| s.direct).count();
        if direct != 1 {
            return Err(Error::validation(field, format!("expected exactly one direct source, found {}", direct)));
        }
        for s in &self.sources {
            if s.transform != Transform::between(s.scale, self.target_scale) {
                return Err(Error::ScaleMismatch {
                    source_id: s.block.to_string(),
                    source_scale: s.scale,
                    target_scale: self.target_scale,
                });
            }
            if s.direct == s.compression.is_some() {
                return Err(Error::validation(field, format!("{}: only reused inputs are compressed", s.block)));
            }
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.sources.iter().map(AggregationSource::out_channels).sum()
    }
}

#[derive(Clone, Debug)]
enum Resample {
    Down(BnReluConv),
    Up(BnReluDeconv),
    Bilinear(usize),
}

#[derive(Clone, Debug)]
struct SourcePath {
    compress: Option<BnReluConv>,
    resample: Vec<Resample>,
}

/// Compress, resize and channel-concatenate all inputs of one decoder stage.
#[derive(Clone, Debug)]
pub struct AdaptiveAggregation {
    pub spec: AggregationSpec,
    paths: Vec<SourcePath>,
}

impl AdaptiveAggregation {
    pub fn new(init: &mut Init, spec: AggregationSpec) -> Result<Self> {
        spec.validate()?;
        let mut paths = Vec::with_capacity(spec.sources.len());
        for src in &spec.sources {
            let path = init.scoped(format!("from_{}", src.block), |init| {
                let compress = match src.compression {
                    Some(width) => Some(BnReluConv::new(init, "compress", ConvSpec::pointwise(src.channels, width))?),
                    None => None,
                };
                let c = src.out_channels();
                let resample = match src.transform {
                    Transform::Identity => Vec::new(),
                    Transform::Downsample(k) => (0..k)
                        .map(|o| {
                            BnReluConv::new(init, &format!("down{}", o), ConvSpec::square(c, c, 3, 2, 1, 1))
                                .map(Resample::Down)
                        })
                        .collect::<Result<_>>()?,
                    Transform::Upsample(k) => {
                        let mut steps = vec![Resample::Up(BnReluDeconv::new(init, "up", ConvSpec::square(c, c, 4, 2, 1, 1))?)];
                        if k > 1 {
                            steps.push(Resample::Bilinear(1 << (k - 1)));
                        }
                        steps
                    }
                };
                Ok(SourcePath { compress, resample })
            })?;
            paths.push(path);
        }
        Ok(AdaptiveAggregation { spec, paths })
    }

    /// `inputs` align with `spec.sources`; `target` is the expected `h x w` of the output.
    pub fn forward(&self, cx: &mut Ctx, inputs: &[NodeId], target: (usize, usize)) -> Result<NodeId> {
        if inputs.len() != self.spec.sources.len() {
            return Err(Error::ShapeMismatch {
                node: format!("aggregation.stage{}", self.spec.stage),
                expected: format!("{} inputs", self.spec.sources.len()),
                actual: format!("{}", inputs.len()),
            });
        }
        let mut resized = Vec::with_capacity(inputs.len());
        for ((src, path), &x) in self.spec.sources.iter().zip(&self.paths).zip(inputs) {
            let mut y = match &path.compress {
                Some(c) => c.forward(cx, x)?,
                None => x,
            };
            for step in &path.resample {
                y = match step {
                    Resample::Down(m) => m.forward(cx, y)?,
                    Resample::Up(m) => m.forward(cx, y)?,
                    Resample::Bilinear(f) => {
                        let (h, w) = (cx.g.shape(y)[2], cx.g.shape(y)[3]);
                        cx.g.bilinear_upsample(y, h * f, w * f)?
                    }
                };
            }
            let shape = cx.g.shape(y);
            if (shape[2], shape[3]) != target {
                return Err(Error::ScaleMismatch {
                    source_id: src.block.to_string(),
                    source_scale: src.scale,
                    target_scale: self.spec.target_scale,
                });
            }
            resized.push(y);
        }
        cx.g.concat_channels(&resized)
    }
}
