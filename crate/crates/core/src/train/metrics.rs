use serde::{Deserialize, Serialize};

use crate::bands::{dilate, extract_boundary};
use crate::error::{Error, Result};
use crate::raster::{LabelMap, Mask};

/// `counts[gt * C + pred]` over non-ignored pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub class_count: usize,
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrimapPoint {
    pub band_width: usize,
    /// `None` when the band holds no evaluable pixel.
    pub miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pixel_accuracy: f64,
    pub mean_accuracy: f64,
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trimap: Vec<TrimapPoint>,
}

fn check_shapes(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::ShapeMismatch {
            node: "metrics".into(),
            expected: format!("{}x{}", gt.height, gt.width),
            actual: format!("{}x{}", pred.height, pred.width),
        });
    }
    Ok(())
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> Self {
        ConfusionMatrix {
            class_count,
            counts: vec![0; class_count * class_count],
        }
    }

    /// Adds the pixels of one image, optionally restricted to `mask`.
    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap, ignore: u8, mask: Option<&Mask>) -> Result<()> {
        check_shapes(pred, gt)?;
        let c = self.class_count;
        for (i, (&p, &g)) in pred.data.iter().zip(&gt.data).enumerate() {
            if g == ignore || mask.is_some_and(|m| !m.data[i]) {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if g >= c || p >= c {
                return Err(Error::validation("labels", format!("class index {} outside 0..{}", g.max(p), c)));
            }
            self.counts[g * c + p] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn at(&self, g: usize, p: usize) -> u64 {
        self.counts[g * self.class_count + p]
    }

    /// Per-class IoU, `None` where the class occurs in neither map.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.class_count)
            .map(|k| {
                let tp = self.at(k, k);
                let gt: u64 = (0..self.class_count).map(|p| self.at(k, p)).sum();
                let pred: u64 = (0..self.class_count).map(|g| self.at(g, k)).sum();
                let union = gt + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes present in either map; `None` if no pixel was counted.
    pub fn mean_iou(&self) -> Option<f64> {
        let ious: Vec<f64> = self.iou().into_iter().flatten().collect();
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn report(&self) -> MetricsReport {
        let total = self.total();
        let trace: u64 = (0..self.class_count).map(|k| self.at(k, k)).sum();
        let recalls: Vec<f64> = (0..self.class_count)
            .filter_map(|k| {
                let gt: u64 = (0..self.class_count).map(|p| self.at(k, p)).sum();
                (gt > 0).then(|| self.at(k, k) as f64 / gt as f64)
            })
            .collect();
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        MetricsReport {
            pixel_accuracy: if total == 0 { 0.0 } else { trace as f64 / total as f64 },
            mean_accuracy: mean(&recalls),
            per_class_iou: self.iou(),
            mean_iou: self.mean_iou().unwrap_or(0.0),
            trimap: Vec::new(),
        }
    }
}

pub fn compute_metrics(pred: &LabelMap, gt: &LabelMap, class_count: usize, ignore: u8) -> Result<MetricsReport> {
    let mut cm = ConfusionMatrix::new(class_count);
    cm.add(pred, gt, ignore, None)?;
    Ok(cm.report())
}

/// Pixels within Chebyshev distance `band_width` of the ground-truth boundary.
pub fn trimap_mask(gt: &LabelMap, band_width: usize, ignore: u8) -> Result<Mask> {
    if band_width == 0 {
        return Err(Error::validation("band_width", "must be >= 1"));
    }
    Ok(dilate(&extract_boundary(gt, ignore), band_width))
}

/// mIoU restricted to the boundary band; `None` when the band is empty.
pub fn trimap_miou(pred: &LabelMap, gt: &LabelMap, band_width: usize, class_count: usize, ignore: u8) -> Result<Option<f64>> {
    let mask = trimap_mask(gt, band_width, ignore)?;
    let mut cm = ConfusionMatrix::new(class_count);
    cm.add(pred, gt, ignore, Some(&mask))?;
    Ok(cm.mean_iou())
}

/// Dataset-level metrics: confusion matrices summed over all pairs, plus the
/// trimap curve at each requested width.
pub fn evaluate_pairs(pairs: &[(LabelMap, LabelMap)], class_count: usize, ignore: u8, trimap_widths: &[usize]) -> Result<MetricsReport> {
    let mut global = ConfusionMatrix::new(class_count);
    let mut bands: Vec<ConfusionMatrix> = trimap_widths.iter().map(|_| ConfusionMatrix::new(class_count)).collect();
    for (pred, gt) in pairs {
        global.add(pred, gt, ignore, None)?;
        let boundary = extract_boundary(gt, ignore);
        for (cm, &w) in bands.iter_mut().zip(trimap_widths) {
            if w == 0 {
                return Err(Error::validation("band_width", "must be >= 1"));
            }
            cm.add(pred, gt, ignore, Some(&dilate(&boundary, w)))?;
        }
    }
    let mut report = global.report();
    report.trimap = trimap_widths
        .iter()
        .zip(&bands)
        .map(|(&band_width, cm)| TrimapPoint {
            band_width,
            miou: cm.mean_iou(),
        })
        .collect();
    Ok(report)
}
