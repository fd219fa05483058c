use std::collections::BTreeMap;

use crate::data::{flip_image, pad_to_mean};
use crate::error::{Error, Result};
use crate::kernels::bilinear_forward;
use crate::layers::Mode;
use crate::network::Network;
use crate::raster::LabelMap;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceOptions {
    pub scales: Vec<f64>,
    pub flip: bool,
    /// Padding value per input channel.
    pub channel_means: Vec<f64>,
    /// Upper bound on concurrently evaluated passes.
    pub jobs: usize,
}

impl InferenceOptions {
    pub fn single_scale(channel_means: Vec<f64>) -> Self {
        InferenceOptions {
            scales: vec![1.0],
            flip: false,
            channel_means,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: LabelMap,
    /// `1 x C x H x W` averaged class probabilities.
    pub probs: Tensor,
    /// Number of forward passes that were averaged.
    pub passes: usize,
}

/// Parses `lo:hi:step` (inclusive) or a comma-separated list.
pub fn parse_scales(text: &str) -> Result<Vec<f64>> {
    let bad = |why: &str| Error::validation("scales", format!("`{}`: {}", text, why));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad("not a number"));
    let scales: Vec<f64> = if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            return Err(bad("expected lo:hi:step"));
        }
        let (lo, hi, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if !(step > 0.0) || hi < lo {
            return Err(bad("need step > 0 and hi >= lo"));
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        // Rounded so that 0.6 + 4 * 0.2 reads as 1.4.
        (0..=n).map(|i| ((lo + i as f64 * step) * 1e9).round() / 1e9).collect()
    } else {
        text.split(',').map(num).collect::<Result<_>>()?
    };
    if scales.is_empty() || scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(bad("scales must be positive"));
    }
    Ok(scales)
}

/// Per-pixel argmax over channels of a `1 x C x H x W` tensor, ties to the lowest class.
pub fn argmax_labels(probs: &Tensor) -> Result<LabelMap> {
    let (n, c, h, w) = probs.dims4()?;
    if n != 1 || c > 256 {
        return Err(Error::InvalidShape {
            shape: probs.shape().to_vec(),
            reason: "expected one image with at most 256 classes".into(),
        });
    }
    let d = probs.data();
    let hw = h * w;
    let data = (0..hw)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if d[k * hw + i] > d[best * hw + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, data)
}

fn resize(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (n, c, h, w) = x.dims4().expect("rank-4");
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    Tensor::new(vec![n, c, oh, ow], bilinear_forward(x.data(), n * c, h, w, oh, ow)).expect("resize shape")
}

fn crop_top_left(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (n, c, h, w) = x.dims4().expect("rank-4");
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks_exact(h * w) {
        for y in 0..oh {
            out.extend_from_slice(&plane[y * w..y * w + ow]);
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).expect("crop shape")
}

/// One inference pass at `scale`, returning probabilities at native resolution.
fn single_pass(net: &Network, image: &Tensor, scale: f64, flip: bool, means: &[f64]) -> Result<Option<Tensor>> {
    let (_, _, h, w) = image.dims4()?;
    let m = net.spec.required_multiple();
    let sh = (h as f64 * scale).round() as usize;
    let sw = (w as f64 * scale).round() as usize;
    if sh < m || sw < m {
        log::warn!("skipping scale {}: {}x{} is below the network minimum {}", scale, sh, sw, m);
        return Ok(None);
    }
    let mut x = resize(image, sh, sw);
    if flip {
        x = flip_image(&x);
    }
    let x = pad_to_mean(&x, sh.div_ceil(m) * m, sw.div_ceil(m) * m, means)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("image".to_string(), x);
    let out = net.forward_eval(&inputs, Mode::Eval)?;
    let mut p = crop_top_left(&out["probs"], sh, sw);
    if flip {
        p = flip_image(&p);
    }
    Ok(Some(resize(&p, h, w)))
}

/// Averages class probabilities over every (scale, flip) pass, in scale order
/// with the unflipped pass first.
pub fn predict_multiscale(net: &Network, image: &Tensor, opts: &InferenceOptions) -> Result<Prediction> {
    let (n, c, _, _) = image.dims4()?;
    if n != 1 || c != net.spec.in_channels {
        return Err(Error::ShapeMismatch {
            node: "predict_multiscale".into(),
            expected: format!("1 x {} x H x W", net.spec.in_channels),
            actual: format!("{:?}", image.shape()),
        });
    }
    if opts.scales.is_empty() {
        return Err(Error::validation("scales", "at least one scale is required"));
    }
    let passes: Vec<(f64, bool)> = opts
        .scales
        .iter()
        .flat_map(|&s| std::iter::once((s, false)).chain(opts.flip.then_some((s, true))))
        .collect();
    let results: Vec<Result<Option<Tensor>>> = if opts.jobs > 1 && passes.len() > 1 {
        let chunk = passes.len().div_ceil(opts.jobs);
        std::thread::scope(|scope| {
            let handles: Vec<_> = passes
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|&(s, f)| single_pass(net, image, s, f, &opts.channel_means))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("inference worker panicked")).collect()
        })
    } else {
        passes
            .iter()
            .map(|&(s, f)| single_pass(net, image, s, f, &opts.channel_means))
            .collect()
    };
    let mut acc: Option<Tensor> = None;
    let mut count = 0usize;
    for r in results {
        if let Some(p) = r? {
            match &mut acc {
                Some(a) => a.add_assign(&p),
                None => acc = Some(p),
            }
            count += 1;
        }
    }
    let mut probs = acc.ok_or_else(|| Error::validation("scales", "every scale is below the network minimum"))?;
    if count > 1 {
        let inv = count as f64;
        probs.data_mut().iter_mut().for_each(|v| *v /= inv);
    }
    Ok(Prediction {
        labels: argmax_labels(&probs)?,
        probs,
        passes: count,
    })
}
