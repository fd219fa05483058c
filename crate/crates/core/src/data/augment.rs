use rand::Rng;

use super::Sample;
use crate::error::{Error, Result};
use crate::raster::LabelMap;
use crate::tensor::Tensor;

/// Pads a `N x C x H x W` image at the bottom and right with per-channel values.
pub fn pad_to_mean(image: &Tensor, target_h: usize, target_w: usize, means: &[f64]) -> Result<Tensor> {
    let (n, c, h, w) = image.dims4()?;
    if target_h < h || target_w < w {
        return Err(Error::ShrinkRequest { h, w, target_h, target_w });
    }
    if means.len() != c {
        return Err(Error::ShapeMismatch {
            node: "pad_to_mean".into(),
            expected: format!("{} channel means", c),
            actual: format!("{}", means.len()),
        });
    }
    if (target_h, target_w) == (h, w) {
        return Ok(image.clone());
    }
    let mut out = Vec::with_capacity(n * c * target_h * target_w);
    let src = image.data();
    for b in 0..n {
        for (ch, &m) in means.iter().enumerate() {
            let plane = &src[(b * c + ch) * h * w..][..h * w];
            for y in 0..target_h {
                if y < h {
                    out.extend_from_slice(&plane[y * w..(y + 1) * w]);
                    out.extend(std::iter::repeat(m).take(target_w - w));
                } else {
                    out.extend(std::iter::repeat(m).take(target_w));
                }
            }
        }
    }
    Tensor::new(vec![n, c, target_h, target_w], out)
}

pub fn pad_labels(labels: &LabelMap, target_h: usize, target_w: usize, ignore: u8) -> Result<LabelMap> {
    let (h, w) = (labels.height, labels.width);
    if target_h < h || target_w < w {
        return Err(Error::ShrinkRequest { h, w, target_h, target_w });
    }
    let mut out = LabelMap::filled(target_h, target_w, ignore);
    for y in 0..h {
        out.data[y * target_w..y * target_w + w].copy_from_slice(&labels.data[y * w..(y + 1) * w]);
    }
    Ok(out)
}

/// Mirrors every plane of a `N x C x H x W` tensor left to right.
pub fn flip_image(image: &Tensor) -> Tensor {
    let (_, _, _, w) = image.dims4().expect("rank-4 image");
    let mut out = image.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    out
}

fn crop_image(image: &Tensor, top: usize, left: usize, ch: usize, cw: usize) -> Tensor {
    let (n, c, h, w) = image.dims4().expect("rank-4 image");
    assert!(top + ch <= h && left + cw <= w, "crop window out of bounds");
    let src = image.data();
    let mut out = Vec::with_capacity(n * c * ch * cw);
    for p in 0..n * c {
        for y in top..top + ch {
            out.extend_from_slice(&src[p * h * w + y * w + left..][..cw]);
        }
    }
    Tensor::new(vec![n, c, ch, cw], out).expect("crop shape")
}

/// Crop window and flip decision applied jointly to image and labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub flip: bool,
}

/// Applies `window` to a sample already at least `window.size` on each side.
pub fn crop_flip(sample: &Sample, window: CropWindow) -> Sample {
    let CropWindow { top, left, size, flip } = window;
    let mut image = crop_image(&sample.image, top, left, size, size);
    let mut labels = sample.labels.crop(top, left, size, size);
    if flip {
        image = flip_image(&image);
        labels = labels.flip_horizontal();
    }
    Sample {
        id: sample.id.clone(),
        image,
        labels,
    }
}

/// Mean-pads (labels: `ignore`) up to `crop` if needed, then draws the window
/// position and a fair flip from `rng`, in that order.
pub fn random_crop_flip(sample: &Sample, crop: usize, means: &[f64], ignore: u8, rng: &mut impl Rng) -> Result<(Sample, CropWindow)> {
    if crop == 0 {
        return Err(Error::validation("crop", "must be >= 1"));
    }
    let (h, w) = (sample.height(), sample.width());
    let padded;
    let src = if h < crop || w < crop {
        let (th, tw) = (h.max(crop), w.max(crop));
        padded = Sample {
            id: sample.id.clone(),
            image: pad_to_mean(&sample.image, th, tw, means)?,
            labels: pad_labels(&sample.labels, th, tw, ignore)?,
        };
        &padded
    } else {
        sample
    };
    let top = rng.gen_range(0..=src.height() - crop);
    let left = rng.gen_range(0..=src.width() - crop);
    let flip = rng.gen_bool(0.5);
    let window = CropWindow { top, left, size: crop, flip };
    Ok((crop_flip(src, window), window))
}
