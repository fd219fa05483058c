#![allow(dead_code)]

use fdnet_core::raster::LabelMap;
use fdnet_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const IGNORE: u8 = 255;

pub fn checkerboard(h: usize, w: usize) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|i| ((i / w + i % w) % 2) as u8).collect()).unwrap()
}

/// Band of every pixel from explicit Chebyshev distances to the boundary set.
pub fn brute_force_bands(labels: &LabelMap, kernels: &[usize], ignore: u8) -> Vec<u16> {
    let (h, w) = (labels.height, labels.width);
    let get = |y: usize, x: usize| labels.data[y * w + x];
    let mut boundary = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = get(y, x);
            if v == ignore {
                continue;
            }
            let nbrs = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
            if nbrs.iter().any(|&(ny, nx)| ny < h && nx < w && get(ny, nx) != ignore && get(ny, nx) != v) {
                boundary.push((y, x));
            }
        }
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            if get(y, x) == ignore {
                out.push(0);
                continue;
            }
            let d = boundary.iter().map(|&(by, bx)| y.abs_diff(by).max(x.abs_diff(bx))).min();
            let band = match d {
                Some(d) => kernels.iter().position(|&k| d <= k).map_or(kernels.len() + 1, |j| j + 1),
                None => kernels.len() + 1,
            };
            out.push(band as u16);
        }
    }
    out
}

pub fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: u8, ignore_rate: f64, block: usize) -> LabelMap {
    let bh = h.div_ceil(block);
    let bw = w.div_ceil(block);
    let cells: Vec<u8> = (0..bh * bw).map(|_| rng.gen_range(0..classes)).collect();
    let data = (0..h * w)
        .map(|i| {
            if rng.gen_bool(ignore_rate) {
                IGNORE
            } else {
                cells[(i / w / block) * bw + (i % w) / block]
            }
        })
        .collect();
    LabelMap::new(h, w, data).unwrap()
}

pub fn random_kernels(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = rng.gen_range(0..5);
    let mut k = 0;
    (0..n)
        .map(|_| {
            k += rng.gen_range(1..6);
            k
        })
        .collect()
}

pub fn mean_cross_entropy(probs: &Tensor, gt: &[LabelMap], ignore: u8) -> f64 {
    let (_, c, h, w) = probs.dims4().unwrap();
    let (mut sum, mut count) = (0.0, 0usize);
    for (s, l) in gt.iter().enumerate() {
        for (i, &v) in l.data.iter().enumerate() {
            if v != ignore {
                sum -= probs.data()[(s * c + v as usize) * h * w + i].ln();
                count += 1;
            }
        }
    }
    sum / count as f64
}
