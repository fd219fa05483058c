//! Boundary-aware weighted cross entropy and the deep-supervision sum.
//!
//! Pixels are grouped into distance bands around the label boundary
//! ([`crate::bands`]); each band gets a balancing weight `alpha_j` and each
//! pixel an attention weight `w(p)` of its ground-truth probability:
//! `poly: (1 - p)^lambda` or `exp: exp(-lambda * (1 - p))`. The loss is
//! `-(1/N') * sum alpha_j * w(p) * log p` over the `N'` non-ignored pixels, and
//! `w` is differentiated along with the log term.

use serde::{Deserialize, Serialize};

use crate::bands::{validate_kernels, BandMap};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, PixelTarget};
use crate::raster::LabelMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    Poly,
    Exp,
}

/// Attention weight function `w(p)` of the ground-truth probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionWeight {
    pub mode: WeightMode,
    pub lambda: f64,
}

impl AttentionWeight {
    pub fn eval(&self, p: f64) -> f64 {
        attention_weight(p, self.mode, self.lambda)
    }

    /// `dw/dp`. Zero when `lambda == 0`; for `poly` with `lambda < 1` the
    /// derivative diverges at `p = 1`, where the log factor is zero, so it is
    /// reported as zero there.
    pub fn derivative(&self, p: f64) -> f64 {
        if self.lambda == 0.0 {
            return 0.0;
        }
        match self.mode {
            WeightMode::Poly => {
                let q = 1.0 - p;
                if q <= 0.0 {
                    0.0
                } else {
                    -self.lambda * q.powf(self.lambda - 1.0)
                }
            }
            WeightMode::Exp => self.lambda * (-self.lambda * (1.0 - p)).exp(),
        }
    }
}

pub fn attention_weight(p: f64, mode: WeightMode, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 1.0;
    }
    match mode {
        WeightMode::Poly => (1.0 - p).max(0.0).powf(lambda),
        WeightMode::Exp => (-lambda * (1.0 - p)).exp(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Balancing weight per band; the last entry weights the remainder band.
    pub alpha: Vec<f64>,
    /// Dilation radii, strictly increasing, one fewer than `alpha`.
    pub kernels: Vec<usize>,
    pub mode: WeightMode,
    pub lambda: f64,
    pub class_count: usize,
}

impl LossConfig {
    /// Plain cross entropy: a single band with unit weight.
    pub fn cross_entropy(class_count: usize) -> Self {
        LossConfig {
            alpha: vec![1.0],
            kernels: vec![],
            mode: WeightMode::Poly,
            lambda: 0.0,
            class_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.len() != self.kernels.len() + 1 {
            return Err(Error::validation(
                "loss.alpha",
                format!("expected {} weights for {} kernels, got {}", self.kernels.len() + 1, self.kernels.len(), self.alpha.len()),
            ));
        }
        if self.alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::validation("loss.alpha", "weights must be positive and finite"));
        }
        validate_kernels(&self.kernels)?;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::validation("loss.lambda", "must be >= 0"));
        }
        if self.class_count < 2 {
            return Err(Error::validation("loss.class_count", "need at least 2 classes"));
        }
        Ok(())
    }

    pub fn weight(&self) -> AttentionWeight {
        AttentionWeight {
            mode: self.mode,
            lambda: self.lambda,
        }
    }
}

/// Builds per-pixel `(class, alpha)` targets for a batch, `None` for ignored pixels.
pub fn pixel_targets(gt: &[LabelMap], bands: &[BandMap], config: &LossConfig, ignore: u8) -> Result<Vec<PixelTarget>> {
    if gt.len() != bands.len() {
        return Err(Error::ShapeMismatch {
            node: "boundary_aware_loss".into(),
            expected: format!("{} band maps", gt.len()),
            actual: format!("{}", bands.len()),
        });
    }
    let mut targets = Vec::new();
    for (labels, bmap) in gt.iter().zip(bands) {
        if (labels.height, labels.width) != (bmap.height, bmap.width) {
            return Err(Error::ShapeMismatch {
                node: "boundary_aware_loss".into(),
                expected: format!("band map {}x{}", labels.height, labels.width),
                actual: format!("{}x{}", bmap.height, bmap.width),
            });
        }
        if bmap.band_count() != config.alpha.len() {
            return Err(Error::validation("loss.alpha", "band map and config disagree on band count"));
        }
        for (i, &l) in labels.data.iter().enumerate() {
            if l == ignore {
                targets.push(None);
                continue;
            }
            let band = bmap.band_at(i).ok_or_else(|| Error::validation("bands", "non-ignored pixel without a band"))?;
            targets.push(Some((l as usize, config.alpha[band - 1])));
        }
    }
    Ok(targets)
}

/// Scalar boundary-aware loss over softmax probabilities `probs` (`N x C x H x W`).
pub fn boundary_aware_loss(
    g: &mut Graph,
    probs: NodeId,
    gt: &[LabelMap],
    bands: &[BandMap],
    config: &LossConfig,
    ignore: u8,
) -> Result<NodeId> {
    let shape = g.shape(probs).to_vec();
    let expected_c = config.class_count;
    if shape.len() != 4 || shape[0] != gt.len() || shape[1] != expected_c {
        return Err(Error::ShapeMismatch {
            node: "boundary_aware_loss".into(),
            expected: format!("[{}, {}, H, W]", gt.len(), expected_c),
            actual: format!("{:?}", shape),
        });
    }
    if gt.iter().any(|l| (l.height, l.width) != (shape[2], shape[3])) {
        return Err(Error::ShapeMismatch {
            node: "boundary_aware_loss".into(),
            expected: format!("labels {}x{}", shape[2], shape[3]),
            actual: gt.iter().map(|l| format!("{}x{}", l.height, l.width)).collect::<Vec<_>>().join(", "),
        });
    }
    let targets = pixel_targets(gt, bands, config, ignore)?;
    let counted = targets.iter().filter(|t| t.is_some()).count();
    g.weighted_log_loss(probs, targets, config.weight(), counted as f64)
}

/// Sums the boundary-aware loss over every stage. Each entry of `stage_logits`
/// is a head output already upsampled to the label resolution; softmax is
/// applied here. Returns the total and the per-stage loss nodes.
pub fn deep_supervision_loss(
    g: &mut Graph,
    stage_logits: &[NodeId],
    gt: &[LabelMap],
    bands: &[BandMap],
    config: &LossConfig,
    ignore: u8,
) -> Result<(NodeId, Vec<NodeId>)> {
    if stage_logits.is_empty() {
        return Err(Error::validation("deep_supervision", "no stages to supervise"));
    }
    let mut stages = Vec::with_capacity(stage_logits.len());
    for &logits in stage_logits {
        let probs = g.softmax_channels(logits)?;
        stages.push(boundary_aware_loss(g, probs, gt, bands, config, ignore)?);
    }
    let mut total = stages[0];
    for &s in &stages[1..] {
        total = g.add(total, s)?;
    }
    Ok((total, stages))
}
