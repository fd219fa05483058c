use fdnet_core::bands::{band_partition, dilate, extract_boundary, BandMap};
use fdnet_core::gradcheck::{finite_diff_check, random_tensor};
use fdnet_core::layers::Mode;
use fdnet_core::loss::{attention_weight, AttentionWeight, boundary_aware_loss, deep_supervision_loss, LossConfig, WeightMode};
use fdnet_core::network::{build_fdnet, NetworkSpec};
use fdnet_core::raster::{LabelMap, Mask};
use fdnet_core::{Graph, Tensor};
use proptest::prelude::*;

mod common;
use common::{brute_force_bands, checkerboard, mean_cross_entropy, random_kernels, random_labels, IGNORE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;


fn reference_config(class_count: usize) -> LossConfig {
    LossConfig {
        alpha: vec![8.0, 6.0, 4.0, 2.0, 1.0],
        kernels: vec![10, 20, 30, 40],
        mode: WeightMode::Exp,
        lambda: 0.75,
        class_count,
    }
}

fn half_split(h: usize, w: usize) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|i| (i % w >= w / 2) as u8).collect()).unwrap()
}

#[test]
fn checkerboard_is_all_boundary() {
    assert_eq!(extract_boundary(&checkerboard(6, 7), IGNORE).count(), 42);
}

#[test]
fn ignore_pixels_are_never_boundary() {
    let mut l = half_split(4, 4);
    for y in 0..4 {
        l.set(y, 2, IGNORE);
    }
    assert_eq!(extract_boundary(&l, IGNORE).count(), 0);
}

#[test]
fn dilation_examples() {
    assert_eq!(dilate(&Mask::empty(5, 5), 3).count(), 0);

    let mut m = Mask::empty(9, 9);
    m.set(4, 4, true);
    let d = dilate(&m, 1);
    for y in 0..9 {
        for x in 0..9 {
            assert_eq!(d.get(y, x), (3..=5).contains(&y) && (3..=5).contains(&x));
        }
    }

    let mut m = Mask::empty(9, 9);
    m.set(1, 2, true);
    let d = dilate(&m, 4);
    for y in 0..9usize {
        for x in 0..9usize {
            assert_eq!(d.get(y, x), y.abs_diff(1) <= 4 && x.abs_diff(2) <= 4);
        }
    }
}

#[test]
fn half_split_bands_match_distances() {
    let l = half_split(64, 64);
    let b = band_partition(&l, &[2, 4], IGNORE).unwrap();
    assert_eq!(b.raw(), &brute_force_bands(&l, &[2, 4], IGNORE)[..]);
    // Boundary columns 31, 32; radius 2 -> columns 29..=34, radius 4 -> 27..=36.
    assert_eq!(b.counts(), vec![6 * 64, 4 * 64, 54 * 64]);
}

#[test]
fn reference_kernels_have_five_bands() {
    let l = half_split(128, 128);
    let b = band_partition(&l, &[10, 20, 30, 40], IGNORE).unwrap();
    assert_eq!(b.band_count(), 5);
    assert_eq!(b.counts(), vec![22 * 128, 20 * 128, 20 * 128, 20 * 128, 46 * 128]);
}

#[test]
fn two_pixel_hand_evaluation() {
    // Bands come from a raster whose boundary sits at the left edge; the loss
    // only counts the first and last pixel.
    let w = 60;
    let mut shape = vec![1u8; w];
    shape[0] = 0;
    let bands = band_partition(&LabelMap::new(1, w, shape).unwrap(), &[10, 20, 30, 40], IGNORE).unwrap();
    assert_eq!((bands.band_at(0), bands.band_at(w - 1)), (Some(1), Some(5)));
    let mut gt = vec![IGNORE; w];
    gt[0] = 0;
    gt[w - 1] = 1;
    let gt = LabelMap::new(1, w, gt).unwrap();
    let mut probs = vec![0.5; 2 * w];
    probs[0] = 0.6;
    probs[w] = 0.4;
    probs[w - 1] = 0.4;
    probs[2 * w - 1] = 0.6;
    let mut g = Graph::new();
    let p = g.input(Tensor::new(vec![1, 2, 1, w], probs).unwrap());
    let l = boundary_aware_loss(&mut g, p, &[gt], &[bands], &reference_config(2), IGNORE).unwrap();
    assert!((g.value(l).data()[0] - 1.702_930_183_546_274_7).abs() < 1e-12);
}

#[test]
fn perfect_prediction_has_zero_loss() {
    let gt = half_split(4, 4);
    let bands = band_partition(&gt, &[10, 20, 30, 40], IGNORE).unwrap();
    let probs: Vec<f64> = (0..2).flat_map(|c| gt.data.iter().map(move |&l| if l == c { 1.0 } else { 0.0 })).collect();
    let mut g = Graph::new();
    let p = g.input(Tensor::new(vec![1, 2, 4, 4], probs).unwrap());
    let l = boundary_aware_loss(&mut g, p, &[gt], &[bands], &reference_config(2), IGNORE).unwrap();
    assert_eq!(g.value(l).data()[0], 0.0);
}

#[test]
fn zero_probability_is_clamped_and_flagged() {
    let gt = LabelMap::filled(1, 2, 0);
    let bands = band_partition(&gt, &[], IGNORE).unwrap();
    let mut g = Graph::new();
    let p = g.input(Tensor::new(vec![1, 2, 1, 2], vec![0.0, 0.5, 1.0, 0.5]).unwrap());
    let l = boundary_aware_loss(&mut g, p, &[gt], &[bands], &LossConfig::cross_entropy(2), IGNORE).unwrap();
    let v = g.value(l).data()[0];
    assert!(v.is_finite());
    assert!((v - 0.5 * (-(1e-12f64).ln() + 2f64.ln())).abs() < 1e-9);
    assert_eq!(g.diagnostics().clamped_pixels, 1);
}

fn random_stage_logits(seed: u64) -> (Vec<Tensor>, LabelMap) {
    let net = build_fdnet(&NetworkSpec::toy(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let x = g.input(random_tensor(&[1, 3, 32, 32], 0.0, 1.0, &mut rng));
    let out = net.forward(&mut g, x, Mode::Train).unwrap();
    let logits = out.stage_logits.iter().map(|&l| g.value(l).clone()).collect();
    let gt = LabelMap::new(32, 32, (0..1024).map(|i| ((i / 32 / 8 + i % 32 / 12) % 4) as u8).collect()).unwrap();
    (logits, gt)
}

fn stage_loss(logits: &Tensor, gt: &LabelMap, bands: &BandMap, cfg: &LossConfig) -> f64 {
    let mut g = Graph::new();
    let x = g.input(logits.clone());
    let p = g.softmax_channels(x).unwrap();
    let l = boundary_aware_loss(&mut g, p, &[gt.clone()], &[bands.clone()], cfg, IGNORE).unwrap();
    g.value(l).data()[0]
}

#[test]
fn deep_supervision_sums_stages() {
    let cfg = LossConfig { kernels: vec![2, 4, 6, 8], ..reference_config(4) };
    let (logits, gt) = random_stage_logits(3);
    let bands = band_partition(&gt, &cfg.kernels, IGNORE).unwrap();
    let singles: Vec<f64> = logits.iter().map(|l| stage_loss(l, &gt, &bands, &cfg)).collect();

    let mut g = Graph::new();
    let nodes: Vec<_> = logits.iter().map(|l| g.input(l.clone())).collect();
    let (total, stages) = deep_supervision_loss(&mut g, &nodes, &[gt.clone()], &[bands.clone()], &cfg, IGNORE).unwrap();
    assert_eq!(stages.len(), 3);
    let expected: f64 = singles.iter().sum();
    assert!((g.value(total).data()[0] - expected).abs() < 1e-12);

    let mut g = Graph::new();
    let one = g.input(logits[0].clone());
    let (total, _) = deep_supervision_loss(&mut g, &[one], &[gt.clone()], &[bands.clone()], &cfg, IGNORE).unwrap();
    assert_eq!(g.value(total).data()[0], singles[0]);

    let mut g = Graph::new();
    let one = g.input(logits[0].clone());
    let (total, _) = deep_supervision_loss(&mut g, &[one, one], &[gt.clone()], &[bands], &cfg, IGNORE).unwrap();
    assert_eq!(g.value(total).data()[0], 2.0 * singles[0]);
}

#[test]
fn deep_supervision_rejects_mismatched_heads() {
    let gt = LabelMap::filled(8, 8, 0);
    let bands = band_partition(&gt, &[], IGNORE).unwrap();
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 2, 4, 4]));
    assert!(deep_supervision_loss(&mut g, &[x], &[gt], &[bands], &LossConfig::cross_entropy(2), IGNORE).is_err());
}

#[test]
fn uniform_raster_has_no_boundary() {
    let l = LabelMap::filled(8, 8, 3);
    assert_eq!(extract_boundary(&l, 255).count(), 0);
    let b = band_partition(&l, &[1, 2], 255).unwrap();
    assert_eq!(b.counts(), vec![0, 0, 64]);
}

#[test]
fn half_split_boundary_is_the_two_middle_columns() {
    let m = extract_boundary(&half_split(8, 8), 255);
    for y in 0..8 {
        for x in 0..8 {
            assert_eq!(m.get(y, x), x == 3 || x == 4, "({}, {})", y, x);
        }
    }
}

#[test]
fn kernels_must_increase() {
    let l = LabelMap::filled(4, 4, 0);
    assert!(band_partition(&l, &[2, 2], 255).is_err());
    assert!(band_partition(&l, &[0], 255).is_err());
}

#[test]
fn visual_scales_by_fifty() {
    let l = half_split(4, 8);
    let b = band_partition(&l, &[1, 2, 3, 4], 255).unwrap();
    let v = b.to_visual();
    assert_eq!(v[3], 50);
    assert_eq!(v[0], 150);
}

#[test]
fn attention_weight_closed_forms() {
    for mode in [WeightMode::Poly, WeightMode::Exp] {
        for p in [0.0, 0.3, 1.0] {
            assert_eq!(attention_weight(p, mode, 0.0), 1.0);
        }
    }
    assert!((attention_weight(0.9, WeightMode::Poly, 2.0) - 0.01).abs() < 1e-15);
    // exp(-0.075) evaluated independently.
    assert!((attention_weight(0.9, WeightMode::Exp, 0.75) - 0.927_743_486_328_553).abs() < 1e-12);
}

#[test]
fn exp_weight_strictly_below_one_unless_certain() {
    for &p in &[0.0, 0.2, 0.5, 0.99] {
        assert!(attention_weight(p, WeightMode::Exp, 0.75) < 1.0);
    }
    assert_eq!(attention_weight(1.0, WeightMode::Exp, 0.75), 1.0);
}

#[test]
fn derivative_matches_finite_difference() {
    for w in [
        AttentionWeight { mode: WeightMode::Poly, lambda: 2.0 },
        AttentionWeight { mode: WeightMode::Poly, lambda: 0.5 },
        AttentionWeight { mode: WeightMode::Exp, lambda: 0.75 },
    ] {
        for p in [0.1, 0.4, 0.8] {
            let eps = 1e-6;
            let num = (w.eval(p + eps) - w.eval(p - eps)) / (2.0 * eps);
            assert!((num - w.derivative(p)).abs() < 1e-6, "{:?} p={}", w, p);
        }
    }
}

fn one_pixel(probs: &[f64], gt: u8, config: &LossConfig) -> f64 {
    let mut g = Graph::new();
    let p = g.input(Tensor::new(vec![1, probs.len(), 1, 1], probs.to_vec()).unwrap());
    let labels = LabelMap::new(1, 1, vec![gt]).unwrap();
    let bands = band_partition(&labels, &config.kernels, 255).unwrap();
    let l = boundary_aware_loss(&mut g, p, &[labels], &[bands], config, 255).unwrap();
    g.value(l).data()[0]
}

#[test]
fn single_pixel_values() {
    let ce = LossConfig::cross_entropy(2);
    assert!((one_pixel(&[0.5, 0.5], 0, &ce) - std::f64::consts::LN_2).abs() < 1e-15);
    let cfg = LossConfig {
        alpha: vec![8.0, 6.0, 4.0, 2.0, 1.0],
        kernels: vec![10, 20, 30, 40],
        mode: WeightMode::Exp,
        lambda: 0.75,
        class_count: 2,
    };
    assert_eq!(one_pixel(&[1.0, 0.0], 0, &cfg), 0.0);
}

#[test]
fn config_validation() {
    let mut cfg = LossConfig::cross_entropy(3);
    assert!(cfg.validate().is_ok());
    cfg.alpha.push(2.0);
    assert!(cfg.validate().is_err());
    cfg.kernels.push(3);
    assert!(cfg.validate().is_ok());
    cfg.lambda = -1.0;
    assert!(cfg.validate().is_err());
}

#[test]
fn label_and_band_shape_mismatch_is_reported() {
    let mut g = Graph::new();
    let p = g.input(Tensor::full(&[1, 2, 2, 2], 0.5));
    let labels = LabelMap::filled(3, 3, 0);
    let bands = band_partition(&labels, &[], 255).unwrap();
    let cfg = LossConfig::cross_entropy(2);
    assert!(boundary_aware_loss(&mut g, p, &[labels], &[bands], &cfg, 255).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_agrees_with_brute_force(seed in 0u64..100_000, h in 1usize..40, w in 1usize..40, kind in 0u8..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = match kind {
            0 => LabelMap::filled(h, w, 2),
            1 => checkerboard(h, w),
            2 => random_labels(&mut rng, h, w, 3, 0.0, 5),
            _ => random_labels(&mut rng, h, w, 4, 0.1, 3),
        };
        let kernels = random_kernels(&mut rng);
        let b = band_partition(&labels, &kernels, IGNORE).unwrap();
        prop_assert_eq!(b.raw(), &brute_force_bands(&labels, &kernels, IGNORE)[..]);
        let ignored = labels.data.iter().filter(|&&v| v == IGNORE).count();
        prop_assert_eq!(b.counts().iter().sum::<usize>() + ignored, h * w);
        prop_assert_eq!(b.ignored_count(), ignored);
        if kind == 0 {
            prop_assert_eq!(b.counts()[kernels.len()], h * w);
        }
        let boundary = extract_boundary(&labels, IGNORE);
        for (j, &k) in kernels.iter().enumerate() {
            let grown = dilate(&boundary, k);
            for i in 0..h * w {
                let inside = b.raw()[i] != 0 && b.raw()[i] as usize <= j + 1;
                prop_assert_eq!(inside, grown.data[i] && labels.data[i] != IGNORE);
            }
        }
    }

    #[test]
    fn dilation_is_monotone(seed in 0u64..100_000, k in 1usize..6, extra in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Mask::empty(20, 17);
        for i in 0..m.data.len() {
            m.data[i] = rng.gen_bool(0.05);
        }
        prop_assert!(dilate(&m, k).is_subset_of(&dilate(&m, k + extra)));
        prop_assert!(m.is_subset_of(&dilate(&m, k)));
    }

    #[test]
    fn loss_degenerates_to_cross_entropy(seed in 0u64..100_000, n in 1usize..3, c in 2usize..5, exp_mode: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let mut gt: Vec<LabelMap> = (0..n).map(|_| random_labels(&mut rng, h, w, c as u8, 0.1, 2)).collect();
        gt[0].data[0] = 0;
        let kernels = random_kernels(&mut rng);
        let bands: Vec<BandMap> = gt.iter().map(|l| band_partition(l, &kernels, IGNORE).unwrap()).collect();
        let logits = random_tensor(&[n, c, h, w], -4.0, 4.0, &mut rng);
        let mut g = Graph::new();
        let x = g.input(logits);
        let p = g.softmax_channels(x).unwrap();
        let cfg = LossConfig {
            alpha: vec![1.0; kernels.len() + 1],
            kernels,
            mode: if exp_mode { WeightMode::Exp } else { WeightMode::Poly },
            lambda: 0.0,
            class_count: c,
        };
        let l = boundary_aware_loss(&mut g, p, &gt, &bands, &cfg, IGNORE).unwrap();
        let expected = mean_cross_entropy(g.value(p), &gt, IGNORE);
        prop_assert!((g.value(l).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn exp_weight_below_plain(p in 0.0f64..1.0, lambda in 0.01f64..5.0) {
        prop_assert!(attention_weight(p, WeightMode::Exp, lambda) < attention_weight(p, WeightMode::Exp, 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn loss_gradient_wrt_logits(seed in 0u64..100_000, exp_mode: bool, lambda in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = vec![random_labels(&mut rng, 6, 6, 3, 0.1, 2), random_labels(&mut rng, 6, 6, 3, 0.1, 2)];
        let cfg = LossConfig {
            alpha: vec![4.0, 2.0, 1.0],
            kernels: vec![1, 2],
            mode: if exp_mode { WeightMode::Exp } else { WeightMode::Poly },
            lambda,
            class_count: 3,
        };
        let bands: Vec<BandMap> = gt.iter().map(|l| band_partition(l, &cfg.kernels, IGNORE).unwrap()).collect();
        let logits = random_tensor(&[2, 3, 6, 6], -2.0, 2.0, &mut rng);
        let err = finite_diff_check(&logits, 1e-5, seed, |g, x| {
            let p = g.softmax_channels(x)?;
            boundary_aware_loss(g, p, &gt, &bands, &cfg, IGNORE)
        })
        .unwrap();
        prop_assert!(err < 1e-4, "{}", err);
    }
}
