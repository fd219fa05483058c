use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How previous blocks feed each decoder aggregation stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Wiring {
    /// Only the direct input (plain encoder-decoder).
    None,
    /// Direct input plus the same-scale encoder block (U-Net style).
    Skip,
    /// Every previous block.
    Dense,
}

impl fmt::Display for Wiring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Wiring::None => "none",
            Wiring::Skip => "skip",
            Wiring::Dense => "dense",
        })
    }
}

/// Declarative description of a network variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSpec {
    pub class_count: usize,
    pub in_channels: usize,
    /// Layers in encoder dense blocks 1-4.
    pub encoder_depths: Vec<usize>,
    pub growth_rate: usize,
    /// Channels produced by the stem convolution.
    pub initial_channels: usize,
    /// Ratio of input resolution to the block-4 resolution: 16 or 32.
    pub encoder_stride: usize,
    /// Dilation of the 3x3 convolutions in block 4 when `encoder_stride == 16`.
    pub block4_dilation: usize,
    pub wiring: Wiring,
    /// Transition compression factor in (0, 1].
    pub transition_compression: f64,
    /// Width of the compression applied to block 4 before it enters stage 1.
    pub encoder_width: usize,
    /// Compression widths after aggregation stages 1 and 2.
    pub aggregation_widths: Vec<usize>,
    /// Compression widths after decoder blocks 5 and 6.
    pub block_widths: Vec<usize>,
    /// Compression widths for reused inputs of stages 1-3.
    pub reuse_widths: Vec<usize>,
    /// Layers in decoder dense blocks 5 and 6.
    pub decoder_depths: Vec<usize>,
    /// Resolution of each aggregation stage as a divisor of the input size.
    pub stage_scales: Vec<usize>,
    pub deep_supervision: bool,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            class_count: 4,
            in_channels: 3,
            encoder_depths: vec![2, 4, 8, 6],
            growth_rate: 8,
            initial_channels: 16,
            encoder_stride: 16,
            block4_dilation: 2,
            wiring: Wiring::Dense,
            transition_compression: 0.5,
            encoder_width: 768,
            aggregation_widths: vec![1024, 768],
            block_widths: vec![768, 512],
            reuse_widths: vec![384, 256, 128],
            decoder_depths: vec![2, 2],
            stage_scales: vec![8, 4, 4],
            deep_supervision: true,
        }
    }
}

impl NetworkSpec {
    /// Desk-scale variant: growth 8, depths `[2, 2, 2, 2]`, decoder widths
    /// scaled down by 8.
    pub fn toy() -> Self {
        NetworkSpec {
            encoder_depths: vec![2, 2, 2, 2],
            encoder_width: 96,
            aggregation_widths: vec![128, 96],
            block_widths: vec![96, 64],
            reuse_widths: vec![48, 32, 16],
            ..Self::default()
        }
    }

    /// The toy network with decoder widths scaled down by 32 instead, for
    /// quick experiments.
    pub fn compact() -> Self {
        NetworkSpec {
            encoder_width: 24,
            aggregation_widths: vec![32, 24],
            block_widths: vec![24, 16],
            reuse_widths: vec![16, 8, 8],
            ..Self::toy()
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.encoder_stride = stride;
        self
    }

    pub fn with_wiring(mut self, wiring: Wiring) -> Self {
        self.wiring = wiring;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str| format!("network.{}", name);
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::validation(field(name), "must be >= 1"))
            } else {
                Ok(())
            }
        };
        if self.class_count < 2 || self.class_count > 255 {
            return Err(Error::validation(field("class_count"), "must be in 2..=255"));
        }
        positive("in_channels", self.in_channels)?;
        positive("growth_rate", self.growth_rate)?;
        positive("initial_channels", self.initial_channels)?;
        positive("encoder_width", self.encoder_width)?;
        if self.encoder_depths.len() != 4 {
            return Err(Error::validation(field("encoder_depths"), "expected 4 block depths"));
        }
        if self.encoder_depths.contains(&0) {
            return Err(Error::validation(field("encoder_depths"), "depths must be >= 1"));
        }
        match self.encoder_stride {
            32 => {}
            16 => {
                if self.block4_dilation < 2 {
                    return Err(Error::validation(field("block4_dilation"), "stride 16 needs dilation >= 2 in block 4"));
                }
            }
            _ => return Err(Error::validation(field("encoder_stride"), "must be 16 or 32")),
        }
        if !(self.transition_compression > 0.0 && self.transition_compression <= 1.0) {
            return Err(Error::validation(field("transition_compression"), "must be in (0, 1]"));
        }
        let lists: [(&str, &Vec<usize>, usize); 5] = [
            ("aggregation_widths", &self.aggregation_widths, 2),
            ("block_widths", &self.block_widths, 2),
            ("reuse_widths", &self.reuse_widths, 3),
            ("decoder_depths", &self.decoder_depths, 2),
            ("stage_scales", &self.stage_scales, 3),
        ];
        for (name, list, len) in lists {
            if list.len() != len {
                return Err(Error::validation(field(name), format!("expected {} entries, got {}", len, list.len())));
            }
            if list.contains(&0) {
                return Err(Error::validation(field(name), "entries must be >= 1"));
            }
        }
        for &s in &self.stage_scales {
            if !s.is_power_of_two() || s > 32 {
                return Err(Error::validation(field("stage_scales"), format!("{} is not a power of two <= 32", s)));
            }
        }
        let mut channels = self.initial_channels;
        for (b, &depth) in self.encoder_depths.iter().enumerate() {
            channels += depth * self.growth_rate;
            if b < 3 {
                channels = self.transition_width(channels);
                if channels == 0 {
                    return Err(Error::validation(field("transition_compression"), "compresses a transition to zero channels"));
                }
            }
        }
        Ok(())
    }

    pub fn transition_width(&self, in_channels: usize) -> usize {
        (in_channels as f64 * self.transition_compression).floor() as usize
    }

    /// Downsampling factor of encoder blocks 1-4.
    pub fn block_scales(&self) -> [usize; 4] {
        [4, 8, 16, self.encoder_stride]
    }

    /// Input extents must be a multiple of this.
    pub fn required_multiple(&self) -> usize {
        self.block_scales()
            .iter()
            .chain(&self.stage_scales)
            .copied()
            .max()
            .unwrap_or(1)
    }
}
