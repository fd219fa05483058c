//! Forward and backward numeric kernels on flat `N x C x H x W` buffers.
//!
//! These are free functions over slices; `graph` wires them into the tape.

use serde::{Deserialize, Serialize};

/// Kernel size, stride, padding and dilation of a 2-D (transposed) convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl ConvGeometry {
    pub fn square(kernel: usize, stride: usize, padding: usize, dilation: usize) -> Self {
        ConvGeometry {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
            dilation: (dilation, dilation),
        }
    }

    /// Output extent of a convolution over an `h x w` input, `None` if it would be < 1.
    pub fn conv_output(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            conv_extent(h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0)?,
            conv_extent(w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1)?,
        ))
    }

    /// Output extent of the transposed convolution over an `h x w` input.
    pub fn transpose_output(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            transpose_extent(h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0)?,
            transpose_extent(w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1)?,
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.padding == (0, 0)
    }

    fn patch_len(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }
}

fn conv_extent(n: usize, k: usize, s: usize, p: usize, d: usize) -> Option<usize> {
    let span = d * (k - 1) + 1;
    if k == 0 || s == 0 || d == 0 || n + 2 * p < span {
        return None;
    }
    Some((n + 2 * p - span) / s + 1)
}

fn transpose_extent(n: usize, k: usize, s: usize, p: usize, d: usize) -> Option<usize> {
    let full = (n - 1) * s + d * (k - 1) + 1;
    if k == 0 || s == 0 || d == 0 || full <= 2 * p {
        return None;
    }
    Some(full - 2 * p)
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major matrices, with `op(a)` of
/// shape `m x k` and `op(b)` of shape `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds are asserted above and the strides describe exactly the
    // row-major (or transposed) layouts of those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `c x h x w` image into a `(c*kh*kw) x (oh*ow)` patch matrix.
pub fn im2col(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeometry,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let (kh, kw) = g.kernel;
    let p = oh * ow;
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride.0 + ki * g.dilation.0) as isize - g.padding.0 as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride.1 + kj * g.dilation.1) as isize
                            - g.padding.1 as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a patch matrix back into a `c x h x w` image.
pub fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeometry,
    oh: usize,
    ow: usize,
    out: &mut [f64],
) {
    let (kh, kw) = g.kernel;
    let p = oh * ow;
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride.0 + ki * g.dilation.0) as isize - g.padding.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride.1 + kj * g.dilation.1) as isize
                            - g.padding.1 as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Extents shared by the convolution kernels.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Cross-correlation. `weight` is `c_out x c_in x kh x kw`.
pub fn conv2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    d: &ConvDims,
    g: &ConvGeometry,
) -> Vec<f64> {
    let k = d.c_in * g.patch_len();
    let p = d.oh * d.ow;
    let mut out = vec![0.0; d.n * d.c_out * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    for s in 0..d.n {
        let xs = &x[s * d.c_in * d.h * d.w..(s + 1) * d.c_in * d.h * d.w];
        let patches: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, d.c_in, d.h, d.w, g, d.oh, d.ow, &mut cols);
            &cols
        };
        let os = &mut out[s * d.c_out * p..(s + 1) * d.c_out * p];
        if let Some(b) = bias {
            for (co, row) in os.chunks_mut(p).enumerate() {
                row.fill(b[co]);
            }
        }
        gemm(d.c_out, k, p, weight, false, patches, false, 1.0, os);
    }
    out
}

/// Returns `(dx, dweight, dbias)`.
pub fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    d: &ConvDims,
    g: &ConvGeometry,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let k = d.c_in * g.patch_len();
    let p = d.oh * d.ow;
    let in_len = d.c_in * d.h * d.w;
    let mut dx = vec![0.0; d.n * in_len];
    let mut dw = vec![0.0; d.c_out * k];
    let mut db = vec![0.0; d.c_out];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    let mut dcols = vec![0.0; k * p];
    for s in 0..d.n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let dys = &dy[s * d.c_out * p..(s + 1) * d.c_out * p];
        for (co, row) in dys.chunks(p).enumerate() {
            db[co] += row.iter().sum::<f64>();
        }
        let patches: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, d.c_in, d.h, d.w, g, d.oh, d.ow, &mut cols);
            &cols
        };
        gemm(d.c_out, p, k, dys, false, patches, true, 1.0, &mut dw);
        let dxs = &mut dx[s * in_len..(s + 1) * in_len];
        if g.is_pointwise() {
            gemm(k, d.c_out, p, weight, true, dys, false, 0.0, dxs);
        } else {
            gemm(k, d.c_out, p, weight, true, dys, false, 0.0, &mut dcols);
            col2im(&dcols, d.c_in, d.h, d.w, g, d.oh, d.ow, dxs);
        }
    }
    (dx, dw, db)
}

/// Transposed convolution (the adjoint of [`conv2d_forward`] with respect to its input).
/// `weight` is `c_in x c_out x kh x kw`; `d.h, d.w` are the input extents and
/// `d.oh, d.ow` the (larger) output extents.
pub fn conv_transpose2d_forward(
    x: &[f64],
    weight: &[f64],
    d: &ConvDims,
    g: &ConvGeometry,
) -> Vec<f64> {
    let k = d.c_out * g.patch_len();
    let p = d.h * d.w;
    let out_len = d.c_out * d.oh * d.ow;
    let mut out = vec![0.0; d.n * out_len];
    let mut cols = vec![0.0; k * p];
    for s in 0..d.n {
        let xs = &x[s * d.c_in * p..(s + 1) * d.c_in * p];
        gemm(k, d.c_in, p, weight, true, xs, false, 0.0, &mut cols);
        // The output plays the role of the convolution input here.
        col2im(&cols, d.c_out, d.oh, d.ow, g, d.h, d.w, &mut out[s * out_len..(s + 1) * out_len]);
    }
    out
}

/// Returns `(dx, dweight)`.
pub fn conv_transpose2d_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    d: &ConvDims,
    g: &ConvGeometry,
) -> (Vec<f64>, Vec<f64>) {
    let k = d.c_out * g.patch_len();
    let p = d.h * d.w;
    let out_len = d.c_out * d.oh * d.ow;
    let mut dx = vec![0.0; d.n * d.c_in * p];
    let mut dw = vec![0.0; d.c_in * k];
    let mut dcols = vec![0.0; k * p];
    for s in 0..d.n {
        im2col(&dy[s * out_len..(s + 1) * out_len], d.c_out, d.oh, d.ow, g, d.h, d.w, &mut dcols);
        let xs = &x[s * d.c_in * p..(s + 1) * d.c_in * p];
        gemm(d.c_in, k, p, weight, false, &dcols, false, 0.0, &mut dx[s * d.c_in * p..(s + 1) * d.c_in * p]);
        gemm(d.c_in, p, k, xs, false, &dcols, true, 1.0, &mut dw);
    }
    (dx, dw)
}

/// Per-channel statistics saved by the training-mode batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Values per channel (`n * h * w`).
    pub count: usize,
}

/// Training-mode normalization. Returns `(y, xhat, stats)`.
pub fn batch_norm_train_forward(
    x: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, BatchStats) {
    let count = n * hw;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut sum = 0.0;
        for s in 0..n {
            sum += x[(s * c + ci) * hw..(s * c + ci + 1) * hw].iter().sum::<f64>();
        }
        let m = sum / count as f64;
        let mut sq = 0.0;
        for s in 0..n {
            sq += x[(s * c + ci) * hw..(s * c + ci + 1) * hw]
                .iter()
                .map(|v| (v - m) * (v - m))
                .sum::<f64>();
        }
        mean[ci] = m;
        var[ci] = sq / count as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for s in 0..n {
        for ci in 0..c {
            let base = (s * c + ci) * hw;
            for i in base..base + hw {
                let h = (x[i] - mean[ci]) * inv_std[ci];
                xhat[i] = h;
                y[i] = gamma[ci] * h + beta[ci];
            }
        }
    }
    (
        y,
        xhat,
        BatchStats {
            mean,
            var,
            inv_std,
            count,
        },
    )
}

/// Returns `(dx, dgamma, dbeta)` for training-mode normalization.
pub fn batch_norm_train_backward(
    dy: &[f64],
    xhat: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[f64],
    stats: &BatchStats,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for s in 0..n {
        for ci in 0..c {
            let base = (s * c + ci) * hw;
            for i in base..base + hw {
                dbeta[ci] += dy[i];
                dgamma[ci] += dy[i] * xhat[i];
            }
        }
    }
    let m = stats.count as f64;
    let mut dx = vec![0.0; dy.len()];
    for s in 0..n {
        for ci in 0..c {
            let scale = gamma[ci] * stats.inv_std[ci] / m;
            let base = (s * c + ci) * hw;
            for i in base..base + hw {
                dx[i] = scale * (m * dy[i] - dbeta[ci] - xhat[i] * dgamma[ci]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Inference-mode normalization with frozen statistics. Returns `(y, xhat)`.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_eval_forward(
    x: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for s in 0..n {
        for ci in 0..c {
            let inv = 1.0 / (var[ci] + eps).sqrt();
            let base = (s * c + ci) * hw;
            for i in base..base + hw {
                let h = (x[i] - mean[ci]) * inv;
                xhat[i] = h;
                y[i] = gamma[ci] * h + beta[ci];
            }
        }
    }
    (y, xhat)
}

/// Window pooling without padding; returns the output and, for max pooling,
/// the flat input index selected for each output (first maximum wins).
pub fn max_pool_forward(
    x: &[f64],
    nc: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    oh: usize,
    ow: usize,
) -> (Vec<f64>, Vec<usize>) {
    let mut out = vec![0.0; nc * oh * ow];
    let mut arg = vec![0usize; nc * oh * ow];
    for p in 0..nc {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = p * h * w + (oy * s + ky) * w + ox * s + kx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                let o = (p * oh + oy) * ow + ox;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (out, arg)
}

#[allow(clippy::too_many_arguments)]
pub fn avg_pool_forward(
    x: &[f64],
    nc: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; nc * oh * ow];
    for p in 0..nc {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..k {
                    let row = p * h * w + (oy * s + ky) * w + ox * s;
                    acc += x[row..row + k].iter().sum::<f64>();
                }
                out[(p * oh + oy) * ow + ox] = acc * norm;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn avg_pool_backward(
    dy: &[f64],
    nc: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let norm = 1.0 / (k * k) as f64;
    let mut dx = vec![0.0; nc * h * w];
    for p in 0..nc {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy[(p * oh + oy) * ow + ox] * norm;
                for ky in 0..k {
                    let row = p * h * w + (oy * s + ky) * w + ox * s;
                    for v in &mut dx[row..row + k] {
                        *v += g;
                    }
                }
            }
        }
    }
    dx
}

/// Source index pair and interpolation fraction for each output coordinate
/// under align-corners mapping.
fn align_corners_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|o| {
            if dst == 1 || src == 1 {
                return (0, 0, 0.0);
            }
            let pos = o as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Align-corners bilinear resize of `nc` planes (any direction).
pub fn bilinear_forward(x: &[f64], nc: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = align_corners_taps(h, oh);
    let tx = align_corners_taps(w, ow);
    let mut out = vec![0.0; nc * oh * ow];
    for p in 0..nc {
        let plane = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn bilinear_backward(dy: &[f64], nc: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = align_corners_taps(h, oh);
    let tx = align_corners_taps(w, ow);
    let mut dx = vec![0.0; nc * h * w];
    for p in 0..nc {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let plane = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                plane[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                plane[y0 * w + x1] += g * (1.0 - fy) * fx;
                plane[y1 * w + x0] += g * fy * (1.0 - fx);
                plane[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    dx
}

/// Softmax over the channel axis, stabilized by subtracting the per-pixel max.
pub fn softmax_channels_forward(x: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        let base = s * c * hw;
        for i in 0..hw {
            let mut max = f64::NEG_INFINITY;
            for ci in 0..c {
                max = max.max(x[base + ci * hw + i]);
            }
            let mut sum = 0.0;
            for ci in 0..c {
                let e = (x[base + ci * hw + i] - max).exp();
                out[base + ci * hw + i] = e;
                sum += e;
            }
            for ci in 0..c {
                out[base + ci * hw + i] /= sum;
            }
        }
    }
    out
}

pub fn softmax_channels_backward(p: &[f64], dy: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut dx = vec![0.0; p.len()];
    for s in 0..n {
        let base = s * c * hw;
        for i in 0..hw {
            let mut dot = 0.0;
            for ci in 0..c {
                let j = base + ci * hw + i;
                dot += dy[j] * p[j];
            }
            for ci in 0..c {
                let j = base + ci * hw + i;
                dx[j] = p[j] * (dy[j] - dot);
            }
        }
    }
    dx
}
