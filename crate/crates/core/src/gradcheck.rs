//! Central finite-difference checks of the analytic gradients.
//!
//! Outputs are reduced to a scalar by a fixed random linear functional
//! `sum_i r_i * y_i`, so that ops whose plain sum is constant (batch norm,
//! softmax) are still exercised. Error is
//! `max |analytic - numeric| / max(1, |numeric|)` over the checked coordinates.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bands::band_partition;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::ConvGeometry;
use crate::layers::{CompositeH, CompositeHSpec, Ctx, Init, Mode};
use crate::loss::{deep_supervision_loss, LossConfig, WeightMode};
use crate::network::{build_fdnet, Network, NetworkSpec};
use crate::params::ParamStore;
use crate::raster::LabelMap;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
/// Pass threshold for every differentiable op.
pub const TOLERANCE: f64 = 1e-4;

/// Ops covered by [`run_check`], in table order.
pub const OPS: &[&str] = &[
    "relu",
    "conv2d",
    "conv2d_weight",
    "conv2d_dilated",
    "conv_transpose2d",
    "conv_transpose2d_weight",
    "batch_norm_train",
    "batch_norm_eval",
    "max_pool",
    "avg_pool",
    "bilinear_upsample",
    "softmax_channels",
    "concat_channels",
    "composite_h",
    "boundary_aware_loss",
    "fdnet",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub op: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("valid shape")
}

/// Uniform values in `[-1, 1]` with magnitude at least `gap`, keeping ReLU
/// inputs away from the kink.
pub fn random_away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-1.0..1.0);
            if v.abs() >= gap {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::validation("eps", "must lie in [1e-7, 1e-3]"));
    }
    Ok(())
}

/// Compares the analytic gradient of `sum(r * f(x))` with central differences
/// in every coordinate of `input`. `f` records its computation on the graph it
/// is given, starting from the input node.
pub fn finite_diff_check<F>(input: &Tensor, eps: f64, seed: u64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    check_eps(eps)?;
    let mut weights: Option<Vec<f64>> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eval = |x: &Tensor, grad: bool| -> Result<(f64, Option<Tensor>)> {
        let mut g = Graph::new();
        let xn = g.try_input(x.clone())?;
        let y = f(&mut g, xn)?;
        if !g.value(y).all_finite() {
            return Err(Error::NonFinite(g.label(y).to_string()));
        }
        let r = weights
            .get_or_insert_with(|| (0..g.value(y).len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .clone();
        let s = g.weighted_sum(y, r)?;
        let value = g.value(s).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite("finite_diff_check".into()));
        }
        if grad {
            g.backward(s)?;
            let gx = g.grad(xn).unwrap_or_else(|| Tensor::zeros(x.shape()));
            Ok((value, Some(gx)))
        } else {
            Ok((value, None))
        }
    };
    let (_, analytic) = eval(input, true)?;
    let analytic = analytic.expect("gradient requested");
    let mut worst: f64 = 0.0;
    let mut probe = input.clone();
    for i in 0..input.len() {
        let orig = input.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (plus, _) = eval(&probe, false)?;
        probe.data_mut()[i] = orig - eps;
        let (minus, _) = eval(&probe, false)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Training-mode deep-supervision loss of `net` on a fixed batch.
pub fn network_loss(
    net: &Network,
    image: &Tensor,
    gt: &[LabelMap],
    config: &LossConfig,
    ignore: u8,
    backward: bool,
) -> Result<(f64, Graph)> {
    let bands = gt
        .iter()
        .map(|l| band_partition(l, &config.kernels, ignore))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new();
    let x = g.try_input(image.clone())?;
    let out = net.forward(&mut g, x, Mode::Train)?;
    let stages = if net.spec.deep_supervision { out.stage_logits.clone() } else { vec![out.logits()] };
    let (loss, _) = deep_supervision_loss(&mut g, &stages, gt, &bands, config, ignore)?;
    let value = g.value(loss).data()[0];
    if backward {
        g.backward(loss)?;
    }
    Ok((value, g))
}

/// Finite-difference check of the full network loss on `samples` randomly
/// chosen parameter scalars whose perturbation stays off every kink.
pub fn network_param_check(
    net: &Network,
    image: &Tensor,
    gt: &[LabelMap],
    config: &LossConfig,
    samples: usize,
    eps: f64,
    seed: u64,
) -> Result<f64> {
    check_eps(eps)?;
    let ignore = 255;
    let (_, g) = network_loss(net, image, gt, config, ignore, true)?;
    let mut analytic = net.params.clone();
    analytic.zero_grads();
    g.accumulate_param_grads(&mut analytic)?;

    let base = g.kink_fingerprint();

    let total = net.params.scalar_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Candidates in random order; a draw whose perturbation flips a ReLU sign
    // or a max-pool winner is replaced by the next one.
    let order = sample(&mut rng, total, total).into_vec();
    let mut offsets = Vec::new();
    let mut acc = 0;
    for p in net.params.params() {
        offsets.push(acc);
        acc += p.value.len();
    }
    let ids: Vec<_> = net.params.ids().collect();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut probe = net.clone();
    for flat in order {
        if checked == samples {
            break;
        }
        let pi = offsets.partition_point(|&o| o <= flat) - 1;
        let off = flat - offsets[pi];
        let id = ids[pi];
        let orig = net.params.get(id).value.data()[off];
        probe.params.get_mut(id).value.data_mut()[off] = orig + eps;
        let (plus, gp) = network_loss(&probe, image, gt, config, ignore, false)?;
        probe.params.get_mut(id).value.data_mut()[off] = orig - eps;
        let (minus, gm) = network_loss(&probe, image, gt, config, ignore, false)?;
        probe.params.get_mut(id).value.data_mut()[off] = orig;
        if gp.kink_fingerprint() != base || gm.kink_fingerprint() != base {
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.get(id).grad.data()[off], numeric));
        checked += 1;
    }
    Ok(worst)
}

fn random_labels(h: usize, w: usize, classes: u8, rng: &mut ChaCha8Rng) -> LabelMap {
    // Blocky rasters so that bands are non-trivial.
    let mut l = LabelMap::filled(h, w, 0);
    let cell = 4;
    for by in 0..h.div_ceil(cell) {
        for bx in 0..w.div_ceil(cell) {
            let v = rng.gen_range(0..classes);
            for y in by * cell..((by + 1) * cell).min(h) {
                for x in bx * cell..((bx + 1) * cell).min(w) {
                    l.set(y, x, v);
                }
            }
        }
    }
    l
}

/// Runs the named gradient check with its fixed fixture.
pub fn run_check(op: &str, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = DEFAULT_EPS;
    let (err, coords) = match op {
        "relu" => {
            let x = random_away_from_zero(&[2, 3, 4, 4], 1e-3, &mut rng);
            (finite_diff_check(&x, eps, seed, |g, x| g.relu(x))?, x.len())
        }
        "conv2d" | "conv2d_dilated" => {
            let dil = if op == "conv2d" { 1 } else { 2 };
            let x = random_tensor(&[1, 2, 8, 8], -1.0, 1.0, &mut rng);
            let w = random_tensor(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
            let b = random_tensor(&[3], -1.0, 1.0, &mut rng);
            let geom = ConvGeometry::square(3, 1, dil, dil);
            let e = finite_diff_check(&x, eps, seed, |g, x| {
                let wn = g.input(w.clone());
                let bn = g.input(b.clone());
                g.conv2d(x, wn, Some(bn), geom)
            })?;
            (e, x.len())
        }
        "conv2d_weight" => {
            let x = random_tensor(&[2, 2, 6, 6], -1.0, 1.0, &mut rng);
            let w = random_tensor(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
            let geom = ConvGeometry::square(3, 2, 1, 1);
            let e = finite_diff_check(&w, eps, seed, |g, wn| {
                let xn = g.input(x.clone());
                g.conv2d(xn, wn, None, geom)
            })?;
            (e, w.len())
        }
        "conv_transpose2d" => {
            let x = random_tensor(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
            let w = random_tensor(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
            let geom = ConvGeometry::square(4, 2, 1, 1);
            let e = finite_diff_check(&x, eps, seed, |g, x| {
                let wn = g.input(w.clone());
                g.conv_transpose2d(x, wn, geom)
            })?;
            (e, x.len())
        }
        "conv_transpose2d_weight" => {
            let x = random_tensor(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
            let w = random_tensor(&[2, 2, 4, 4], -1.0, 1.0, &mut rng);
            let geom = ConvGeometry::square(4, 2, 1, 1);
            let e = finite_diff_check(&w, eps, seed, |g, wn| {
                let xn = g.input(x.clone());
                g.conv_transpose2d(xn, wn, geom)
            })?;
            (e, w.len())
        }
        "batch_norm_train" | "batch_norm_eval" => {
            let x = random_tensor(&[4, 3, 3, 3], -2.0, 2.0, &mut rng);
            let gamma = random_tensor(&[3], 0.5, 1.5, &mut rng);
            let beta = random_tensor(&[3], -0.5, 0.5, &mut rng);
            let mean = random_tensor(&[3], -0.5, 0.5, &mut rng);
            let var = random_tensor(&[3], 0.5, 2.0, &mut rng);
            let train = op == "batch_norm_train";
            let e = finite_diff_check(&x, eps, seed, |g, x| {
                let gn = g.input(gamma.clone());
                let bn = g.input(beta.clone());
                if train {
                    g.batch_norm_train(x, gn, bn, 1e-5, None)
                } else {
                    g.batch_norm_eval(x, gn, bn, mean.data(), var.data(), 1e-5)
                }
            })?;
            (e, x.len())
        }
        "max_pool" | "avg_pool" => {
            let x = random_tensor(&[2, 2, 6, 6], -1.0, 1.0, &mut rng);
            let max = op == "max_pool";
            let e = finite_diff_check(&x, eps, seed, |g, x| if max { g.max_pool(x, 2, 2) } else { g.avg_pool(x, 2, 2) })?;
            (e, x.len())
        }
        "bilinear_upsample" => {
            let x = random_tensor(&[1, 2, 3, 3], -1.0, 1.0, &mut rng);
            (finite_diff_check(&x, eps, seed, |g, x| g.bilinear_upsample(x, 5, 5))?, x.len())
        }
        "softmax_channels" => {
            let x = random_tensor(&[2, 4, 3, 3], -3.0, 3.0, &mut rng);
            (finite_diff_check(&x, eps, seed, |g, x| g.softmax_channels(x))?, x.len())
        }
        "concat_channels" => {
            let x = random_tensor(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
            let other = random_tensor(&[2, 3, 3, 3], -1.0, 1.0, &mut rng);
            let e = finite_diff_check(&x, eps, seed, |g, x| {
                let o = g.input(other.clone());
                let c = g.concat_channels(&[o, x, x])?;
                g.mul(c, c)
            })?;
            (e, x.len())
        }
        "composite_h" => {
            let mut store = ParamStore::new();
            let mut init_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let mut init = Init::new(&mut store, &mut init_rng);
            let h = CompositeH::new(&mut init, "h", CompositeHSpec { in_channels: 6, growth: 3, dilation: 1 })?;
            let x = random_tensor(&[2, 6, 5, 5], -1.0, 1.0, &mut rng);
            let e = finite_diff_check(&x, eps, seed, |g, x| {
                let mut cx = Ctx::new(g, &store, Mode::Train);
                h.forward(&mut cx, x)
            })?;
            (e, x.len())
        }
        "boundary_aware_loss" => {
            let x = random_tensor(&[2, 3, 8, 8], -2.0, 2.0, &mut rng);
            let gt: Vec<LabelMap> = (0..2).map(|_| random_labels(8, 8, 3, &mut rng)).collect();
            let mut worst: f64 = 0.0;
            for (mode, lambda) in [(WeightMode::Exp, 0.75), (WeightMode::Poly, 2.0), (WeightMode::Poly, 0.0)] {
                let cfg = LossConfig {
                    alpha: vec![8.0, 6.0, 4.0, 2.0, 1.0],
                    kernels: vec![1, 2, 3, 4],
                    mode,
                    lambda,
                    class_count: 3,
                };
                let bands = gt.iter().map(|l| band_partition(l, &cfg.kernels, 255)).collect::<Result<Vec<_>>>()?;
                let e = finite_diff_check(&x, eps, seed, |g, x| {
                    let (l, _) = deep_supervision_loss(g, &[x], &gt, &bands, &cfg, 255)?;
                    Ok(l)
                })?;
                worst = worst.max(e);
            }
            (worst, x.len())
        }
        "fdnet" => {
            let spec = NetworkSpec::toy();
            let net = build_fdnet(&spec, seed)?;
            let image = random_tensor(&[2, 3, 32, 32], 0.0, 1.0, &mut rng);
            let gt: Vec<LabelMap> = (0..2).map(|_| random_labels(32, 32, spec.class_count as u8, &mut rng)).collect();
            let cfg = LossConfig {
                alpha: vec![8.0, 6.0, 4.0, 2.0, 1.0],
                kernels: vec![2, 4, 6, 8],
                mode: WeightMode::Exp,
                lambda: 0.75,
                class_count: spec.class_count,
            };
            (network_param_check(&net, &image, &gt, &cfg, 50, eps, seed)?, 50)
        }
        other => return Err(Error::validation("gradcheck.ops", format!("unknown op `{}`", other))),
    };
    Ok(CheckResult {
        op: op.to_string(),
        max_rel_error: err,
        coordinates: coords,
    })
}

pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    OPS.iter().map(|op| run_check(op, seed)).collect()
}
