//! Boundary extraction, square-element dilation and the distance-band
//! partition used by the boundary-aware loss and the trimap metrics.

use crate::error::{Error, Result};
use crate::raster::{LabelMap, Mask};

/// A pixel is on the boundary iff one of its 4-neighbours carries a different
/// non-ignore label. Ignore-labelled pixels are never boundary.
pub fn extract_boundary(labels: &LabelMap, ignore: u8) -> Mask {
    let (h, w) = (labels.height, labels.width);
    let mut mask = Mask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let v = labels.get(y, x);
            if v == ignore {
                continue;
            }
            let differs = |ny: usize, nx: usize| {
                let n = labels.get(ny, nx);
                n != ignore && n != v
            };
            let edge = (y > 0 && differs(y - 1, x))
                || (y + 1 < h && differs(y + 1, x))
                || (x > 0 && differs(y, x - 1))
                || (x + 1 < w && differs(y, x + 1));
            if edge {
                mask.set(y, x, true);
            }
        }
    }
    mask
}

/// Morphological dilation with a `(2k+1) x (2k+1)` square, i.e. every pixel
/// within Chebyshev distance `k` of a set pixel. Separable: a row pass and a
/// column pass, each a sliding-window count.
pub fn dilate(mask: &Mask, k: usize) -> Mask {
    let (h, w) = (mask.height, mask.width);
    let mut rows = vec![false; h * w];
    for y in 0..h {
        sliding_any(&mask.data[y * w..(y + 1) * w], k, &mut rows[y * w..(y + 1) * w]);
    }
    let mut out = Mask::empty(h, w);
    let mut column = vec![false; h];
    let mut dilated = vec![false; h];
    for x in 0..w {
        for y in 0..h {
            column[y] = rows[y * w + x];
        }
        sliding_any(&column, k, &mut dilated);
        for y in 0..h {
            out.data[y * w + x] = dilated[y];
        }
    }
    out
}

fn sliding_any(line: &[bool], k: usize, out: &mut [bool]) {
    let n = line.len();
    let mut prefix = vec![0usize; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + line[i] as usize;
    }
    for (i, o) in out.iter_mut().enumerate() {
        let lo = i.saturating_sub(k);
        let hi = (i + k + 1).min(n);
        *o = prefix[hi] > prefix[lo];
    }
}

/// Per-pixel band index in `1..=K`, with `0` marking ignored pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BandMap {
    pub height: usize,
    pub width: usize,
    pub kernels: Vec<usize>,
    bands: Vec<u16>,
}

impl BandMap {
    /// Number of bands `K` (one per kernel plus the remainder).
    pub fn band_count(&self) -> usize {
        self.kernels.len() + 1
    }

    /// Band of pixel `(y, x)`, `None` if ignored.
    pub fn band(&self, y: usize, x: usize) -> Option<usize> {
        self.band_at(y * self.width + x)
    }

    pub fn band_at(&self, i: usize) -> Option<usize> {
        match self.bands[i] {
            0 => None,
            b => Some(b as usize),
        }
    }

    pub fn is_ignored(&self, y: usize, x: usize) -> bool {
        self.band(y, x).is_none()
    }

    /// Pixel count per band, index 0 holding band 1.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.band_count()];
        for &b in &self.bands {
            if b > 0 {
                counts[b as usize - 1] += 1;
            }
        }
        counts
    }

    pub fn ignored_count(&self) -> usize {
        self.bands.iter().filter(|&&b| b == 0).count()
    }

    /// Raw band indices, row-major, `0` for ignored pixels.
    pub fn raw(&self) -> &[u16] {
        &self.bands
    }

    /// 8-bit visualisation: band index times 50 (saturating), ignored pixels 0.
    pub fn to_visual(&self) -> Vec<u8> {
        self.bands
            .iter()
            .map(|&b| (b as usize * 50).min(255) as u8)
            .collect()
    }
}

pub fn validate_kernels(kernels: &[usize]) -> Result<()> {
    if kernels.iter().any(|&k| k == 0) {
        return Err(Error::validation("loss.kernels", "kernel radii must be >= 1"));
    }
    if kernels.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::validation("loss.kernels", "kernel radii must be strictly increasing"));
    }
    Ok(())
}

/// Splits the non-ignored pixels into `K = kernels.len() + 1` nested bands:
/// band `j` is `dilate(boundary, k_j)` minus `dilate(boundary, k_{j-1})`,
/// band `K` is everything else.
pub fn band_partition(labels: &LabelMap, kernels: &[usize], ignore: u8) -> Result<BandMap> {
    validate_kernels(kernels)?;
    let boundary = extract_boundary(labels, ignore);
    let k_count = kernels.len() + 1;
    let mut bands = vec![k_count as u16; labels.height * labels.width];
    // Widest first so narrower bands overwrite.
    for (j, &k) in kernels.iter().enumerate().rev() {
        let grown = dilate(&boundary, k);
        for (b, &inside) in bands.iter_mut().zip(&grown.data) {
            if inside {
                *b = (j + 1) as u16;
            }
        }
    }
    for (b, &l) in bands.iter_mut().zip(&labels.data) {
        if l == ignore {
            *b = 0;
        }
    }
    Ok(BandMap {
        height: labels.height,
        width: labels.width,
        kernels: kernels.to_vec(),
        bands,
    })
}
