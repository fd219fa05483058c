use std::collections::BTreeMap;

use fdnet_core::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta};
use fdnet_core::config::RunConfig;
use fdnet_core::data::{flip_image, Dataset, SyntheticSpec};
use fdnet_core::gradcheck::random_tensor;
use fdnet_core::layers::Mode;
use fdnet_core::loss::LossConfig;
use fdnet_core::network::{build_fdnet, Network, NetworkSpec};
use fdnet_core::params::ParamStore;
use fdnet_core::raster::LabelMap;
use fdnet_core::train::{
    argmax_labels, batch_indices, compute_metrics, evaluate_pairs, log_csv, parse_scales, poly_lr, predict_multiscale,
    sgd_step, train, train_step, trimap_miou, ConfusionMatrix, InferenceOptions, LogRow, OptimizerState, SgdStep,
    TrainConfig, TrainHooks,
};
use fdnet_core::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn halves() -> LabelMap {
    let mut gt = LabelMap::filled(4, 4, 0);
    for y in 0..4 {
        for x in 2..4 {
            gt.set(y, x, 1);
        }
    }
    gt
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: u8) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0..classes)).collect()).unwrap()
}

fn blocky_map(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: u8) -> LabelMap {
    let cells: Vec<u8> = (0..16).map(|_| rng.gen_range(0..classes)).collect();
    LabelMap::new(h, w, (0..h * w).map(|i| cells[(i / w * 4 / h) * 4 + (i % w) * 4 / w]).collect()).unwrap()
}

fn small_data(samples: usize, seed: u64) -> Dataset {
    Dataset::synthetic(&SyntheticSpec { samples, seed, canvas: 32, size_range: [5, 10], ..Default::default() }).unwrap()
}

fn quick_config(max_iter: usize) -> TrainConfig {
    TrainConfig { base_lr: 2.5e-3, max_iter, batch_size: 2, crop: 32, ..Default::default() }
}

fn forward_probs(net: &Network, image: &Tensor) -> Tensor {
    let mut inputs = BTreeMap::new();
    inputs.insert("image".to_string(), image.clone());
    net.forward_eval(&inputs, Mode::Eval).unwrap().remove("probs").unwrap()
}

#[test]
fn poly_schedule_points() {
    assert_eq!(poly_lr(0, 0.00025, 300, 0.9), 0.00025);
    assert_eq!(poly_lr(300, 0.00025, 300, 0.9), 0.0);
    assert!((poly_lr(150, 0.00025, 300, 0.9) - 1.339_716_828_170_366_5e-4).abs() < 1e-15);
}

#[test]
fn decay_only_step() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::ones(&[1]), true).unwrap();
    let mut st = OptimizerState::new(&store);
    sgd_step(&mut store, &mut st, SgdStep { lr: 0.1, momentum: 0.0, weight_decay: 0.0005 }).unwrap();
    assert!((store.params()[0].value.data()[0] - 0.99995).abs() < 1e-15);
    assert_eq!(st.iteration, 1);
}

#[test]
fn undecayed_parameters_ignore_weight_decay() {
    let mut store = ParamStore::new();
    store.add("gamma", Tensor::ones(&[1]), false).unwrap();
    let mut st = OptimizerState::new(&store);
    sgd_step(&mut store, &mut st, SgdStep { lr: 0.1, momentum: 0.9, weight_decay: 0.5 }).unwrap();
    assert_eq!(store.params()[0].value.data()[0], 1.0);
}

#[test]
fn velocity_decays_geometrically() {
    let mut store = ParamStore::new();
    store.add("b", Tensor::zeros(&[2]), false).unwrap();
    let mut st = OptimizerState::new(&store);
    st.velocity[0] = Tensor::full(&[2], 1.0);
    for k in 1..=5 {
        sgd_step(&mut store, &mut st, SgdStep { lr: 0.0, momentum: 0.9, weight_decay: 0.0 }).unwrap();
        assert!((st.velocity[0].data()[0] - 0.9f64.powi(k)).abs() < 1e-15);
    }
}

#[test]
fn sgd_rejects_misaligned_state() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::ones(&[2]), true).unwrap();
    let mut st = OptimizerState::new(&store);
    st.velocity[0] = Tensor::zeros(&[3]);
    assert!(matches!(
        sgd_step(&mut store, &mut st, SgdStep { lr: 0.1, momentum: 0.0, weight_decay: 0.0 }),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn batches_cover_each_epoch() {
    let mut seen: Vec<usize> = (0..4).flat_map(|it| batch_indices(8, 2, it, 3)).collect();
    seen.sort();
    assert_eq!(seen, (0..8).collect::<Vec<_>>());
    assert_eq!(batch_indices(8, 2, 5, 3), batch_indices(8, 2, 5, 3));
}

#[test]
fn csv_rows() {
    let rows = [
        LogRow { iter: 0, lr: 0.5, loss: 1.25, eval_miou: None },
        LogRow { iter: 1, lr: 0.25, loss: 1.0, eval_miou: Some(0.5) },
    ];
    assert_eq!(log_csv(&rows), "iter,lr,loss,eval_miou\n0,0.5,1.25,\n1,0.25,1,0.5\n");
}

#[test]
fn scale_ranges() {
    assert_eq!(parse_scales("0.6:1.4:0.2").unwrap(), vec![0.6, 0.8, 1.0, 1.2, 1.4]);
    assert_eq!(parse_scales("1.0").unwrap(), vec![1.0]);
    assert_eq!(parse_scales("0.5,1").unwrap(), vec![0.5, 1.0]);
    assert!(parse_scales("1:0.5:0.1").is_err());
    assert!(parse_scales("0").is_err());
}

#[test]
fn argmax_ties_go_low() {
    let p = Tensor::new(vec![1, 3, 1, 2], vec![0.4, 0.2, 0.4, 0.2, 0.2, 0.6]).unwrap();
    assert_eq!(argmax_labels(&p).unwrap().data, vec![0, 2]);
}

#[test]
fn hand_counted_confusion() {
    let gt = halves();
    let pred = LabelMap::filled(4, 4, 0);
    let r = compute_metrics(&pred, &gt, 2, 255).unwrap();
    assert_eq!(r.pixel_accuracy, 0.5);
    assert_eq!(r.per_class_iou, vec![Some(0.5), Some(0.0)]);
    assert_eq!(r.mean_iou, 0.25);
    assert_eq!(r.mean_accuracy, 0.5);
}

#[test]
fn perfect_and_disjoint() {
    let gt = halves();
    let r = compute_metrics(&gt, &gt, 3, 255).unwrap();
    assert_eq!((r.pixel_accuracy, r.mean_accuracy, r.mean_iou), (1.0, 1.0, 1.0));
    assert_eq!(r.per_class_iou[2], None);
    let mut inv = gt.clone();
    inv.data.iter_mut().for_each(|v| *v = 1 - *v);
    assert_eq!(compute_metrics(&inv, &gt, 2, 255).unwrap().mean_iou, 0.0);
}

#[test]
fn uniform_ground_truth_has_no_band() {
    let gt = LabelMap::filled(8, 8, 1);
    assert_eq!(trimap_miou(&gt, &gt, 3, 2, 255).unwrap(), None);
    assert_eq!(trimap_miou(&halves(), &halves(), 1, 2, 255).unwrap(), Some(1.0));
}

#[test]
fn ignored_pixels_are_not_counted() {
    let mut gt = halves();
    gt.set(0, 0, 255);
    let pred = LabelMap::filled(4, 4, 1);
    let mut cm = ConfusionMatrix::new(2);
    cm.add(&pred, &gt, 255, None).unwrap();
    assert_eq!(cm.total(), 15);
}

#[test]
fn metrics_reject_shape_mismatch() {
    assert!(compute_metrics(&LabelMap::filled(2, 2, 0), &LabelMap::filled(2, 3, 0), 2, 255).is_err());
}

#[test]
fn unknown_config_field_reports_its_path() {
    let err = RunConfig::from_json(r#"{"train": {"base_lr": 0.1, "learning_rate": 2}}"#).unwrap_err();
    match err {
        Error::Config { path, .. } => assert_eq!(path, "train.learning_rate"),
        other => panic!("unexpected {:?}", other),
    }
}

#[test]
fn invalid_config_value_names_the_field() {
    let err = RunConfig::from_json(r#"{"network": {"encoder_stride": 8}}"#).unwrap_err();
    assert!(err.is_config_error());
    assert!(err.to_string().contains("network.encoder_stride"), "{}", err);
    let err = RunConfig::from_json(r#"{"train": {"max_iter": 0}}"#).unwrap_err();
    assert!(err.to_string().contains("train.max_iter"), "{}", err);
}

#[test]
fn config_class_counts_must_agree() {
    let err = RunConfig::from_json(r#"{"data": {"synthetic": {"class_count": 3}}}"#).unwrap_err();
    assert!(err.to_string().contains("data.synthetic.class_count"), "{}", err);
}

#[test]
fn empty_config_is_valid() {
    assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
}

#[test]
fn config_round_trips_through_json() {
    let mut cfg = RunConfig::default();
    cfg.network = NetworkSpec::toy();
    cfg.train.max_iter = 17;
    cfg.loss.alpha = vec![8.0, 6.0, 4.0, 2.0, 1.0];
    cfg.loss.kernels = vec![2, 4, 6, 8];
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
}

#[test]
fn single_scale_prediction_equals_forward() {
    let net = build_fdnet(&NetworkSpec::compact(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let image = random_tensor(&[1, 3, 32, 32], 0.0, 1.0, &mut rng);
    let p = predict_multiscale(&net, &image, &InferenceOptions::single_scale(vec![0.5; 3])).unwrap();
    assert_eq!(p.passes, 1);
    assert_eq!(p.probs, forward_probs(&net, &image));
    assert_eq!(p.labels, argmax_labels(&p.probs).unwrap());
}

#[test]
fn flip_pass_is_unmirrored() {
    let net = build_fdnet(&NetworkSpec::compact(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let image = random_tensor(&[1, 3, 32, 32], 0.0, 1.0, &mut rng);
    let opts = InferenceOptions { flip: true, ..InferenceOptions::single_scale(vec![0.5; 3]) };
    let both = predict_multiscale(&net, &image, &opts).unwrap();
    assert_eq!(both.passes, 2);
    let plain = forward_probs(&net, &image);
    let mirrored = flip_image(&forward_probs(&net, &flip_image(&image)));
    let mut expected = plain.clone();
    expected.add_assign(&mirrored);
    expected.data_mut().iter_mut().for_each(|v| *v /= 2.0);
    assert!(both.probs.max_abs_diff(&expected) <= 1e-15);
}

#[test]
fn multiscale_flip_averages_ten_passes() {
    let net = build_fdnet(&NetworkSpec::compact(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let image = random_tensor(&[1, 3, 40, 40], 0.0, 1.0, &mut rng);
    let opts = InferenceOptions {
        scales: parse_scales("0.6:1.4:0.2").unwrap(),
        flip: true,
        channel_means: vec![0.5; 3],
        jobs: 1,
    };
    let serial = predict_multiscale(&net, &image, &opts).unwrap();
    assert_eq!(serial.passes, 10);
    assert_eq!(serial.probs.shape(), &[1, 4, 40, 40]);
    let sums_to_one = (0..1600).all(|i| ((0..4).map(|c| serial.probs.data()[c * 1600 + i]).sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(sums_to_one);
    let parallel = predict_multiscale(&net, &image, &InferenceOptions { jobs: 3, ..opts }).unwrap();
    assert_eq!(parallel, serial);
}

#[test]
fn scales_below_minimum_are_skipped() {
    let net = build_fdnet(&NetworkSpec::compact(), 0).unwrap();
    let image = Tensor::full(&[1, 3, 32, 32], 0.5);
    let opts = InferenceOptions { scales: vec![0.25, 1.0], ..InferenceOptions::single_scale(vec![0.5; 3]) };
    assert_eq!(predict_multiscale(&net, &image, &opts).unwrap().passes, 1);
    let opts = InferenceOptions { scales: vec![0.25], ..opts };
    assert!(predict_multiscale(&net, &image, &opts).is_err());
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let mut net = build_fdnet(&NetworkSpec::compact(), 0).unwrap();
    let before: Vec<Tensor> = net.params.params().iter().map(|p| p.value.clone()).collect();
    let stats_before = net.params.all_stats()[0].mean.clone();
    let data = small_data(2, 0);
    let image = Tensor::stack(&[data.samples[0].image.clone(), data.samples[1].image.clone()]).unwrap();
    let labels = vec![data.samples[0].labels.clone(), data.samples[1].labels.clone()];
    let mut state = OptimizerState::new(&net.params);
    let step = SgdStep { lr: 0.0, momentum: 0.9, weight_decay: 0.0005 };
    let loss = train_step(&mut net, &mut state, &image, &labels, &LossConfig::cross_entropy(4), 255, step).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    for (p, b) in net.params.params().iter().zip(&before) {
        assert_eq!(&p.value, b, "{}", p.name);
    }
    assert_ne!(net.params.all_stats()[0].mean, stats_before);
}

#[test]
fn training_lowers_the_loss() {
    let mut net = build_fdnet(&NetworkSpec::compact(), 0).unwrap();
    let out = train(&mut net, &small_data(4, 1), &quick_config(40), &LossConfig::cross_entropy(4), TrainHooks::default()).unwrap();
    let mean = |rows: &[LogRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
    assert!(mean(&out.log[20..]) < mean(&out.log[..20]), "{} vs {}", mean(&out.log[20..]), mean(&out.log[..20]));
    assert_eq!(out.log.len(), 40);
    assert_eq!(out.log[0].lr, 2.5e-3);
}

#[test]
fn training_is_byte_deterministic() {
    let data = small_data(3, 2);
    let eval = small_data(2, 3);
    let cfg = TrainConfig { checkpoint_interval: 2, eval_interval: 2, ..quick_config(5) };
    let run = |dir: &std::path::Path| {
        let mut net = build_fdnet(&NetworkSpec::compact(), 9).unwrap();
        let hooks = TrainHooks { out_dir: Some(dir), eval_set: Some(&eval) };
        train(&mut net, &data, &cfg, &LossConfig::cross_entropy(4), hooks).unwrap()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (run(a.path()), run(b.path()));
    assert_eq!(ra.log, rb.log);
    assert_eq!(ra.log.iter().filter(|r| r.eval_miou.is_some()).count(), 3);
    for name in ["checkpoint.fdckpt", "checkpoint_000002.fdckpt", "checkpoint_000004.fdckpt", "train_log.csv"] {
        let (x, y) = (std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
        assert!(x == y, "{} differs", name);
    }
    let csv = std::fs::read_to_string(a.path().join("train_log.csv")).unwrap();
    assert!(csv.starts_with("iter,lr,loss,eval_miou\n"));
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn training_rejects_mismatched_classes() {
    let mut net = build_fdnet(&NetworkSpec { class_count: 3, ..NetworkSpec::compact() }, 0).unwrap();
    let err = train(&mut net, &small_data(2, 0), &quick_config(1), &LossConfig::cross_entropy(3), TrainHooks::default());
    assert!(matches!(err, Err(Error::Validation { .. })));
}

#[test]
fn checkpoint_round_trip() {
    let mut net = build_fdnet(&NetworkSpec::compact(), 4).unwrap();
    train(&mut net, &small_data(2, 0), &quick_config(2), &LossConfig::cross_entropy(4), TrainHooks::default()).unwrap();
    let meta = CheckpointMeta { iteration: 2, channel_means: vec![0.1, 0.2, 0.3], ignore: 255 };
    let bytes = encode_checkpoint(&net, &meta).unwrap();
    assert_eq!(&bytes[..8], b"FDCKPT01");
    let (back, back_meta) = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back_meta, meta);
    assert_eq!(encode_checkpoint(&back, &meta).unwrap(), bytes);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let image = random_tensor(&[1, 3, 32, 32], 0.0, 1.0, &mut rng);
    assert_eq!(forward_probs(&back, &image), forward_probs(&net, &image));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.fdckpt");
    save_checkpoint(&net, &meta, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(load_checkpoint(&path).unwrap().1, meta);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let net = build_fdnet(&NetworkSpec::compact(), 0).unwrap();
    let bytes = encode_checkpoint(&net, &CheckpointMeta::default()).unwrap();
    assert!(matches!(decode_checkpoint(b"NOTACKPT"), Err(Error::MalformedCheckpoint(_))));
    assert!(decode_checkpoint(&bytes[..bytes.len() - 9]).is_err());
    assert!(decode_checkpoint(&bytes[..40]).is_err());
}

#[test]
fn evaluate_pairs_reports_trimap_curve() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pairs: Vec<(LabelMap, LabelMap)> = (0..3).map(|_| (random_map(&mut rng, 16, 16, 3), blocky_map(&mut rng, 16, 16, 3))).collect();
    let r = evaluate_pairs(&pairs, 3, 255, &[1, 5, 10, 20, 40]).unwrap();
    let widths: Vec<usize> = r.trimap.iter().map(|p| p.band_width).collect();
    assert_eq!(widths, [1, 5, 10, 20, 40]);
    assert_eq!(r.trimap[4].miou, Some(r.mean_iou));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn poly_lr_strictly_decreases(max_iter in 2usize..5000, power in 0.05f64..3.0, frac in 0.0f64..1.0) {
        let i = ((max_iter - 1) as f64 * frac) as usize;
        prop_assert!(poly_lr(i + 1, 0.01, max_iter, power) < poly_lr(i, 0.01, max_iter, power));
    }

    #[test]
    fn sgd_without_momentum_is_gradient_descent(seed in 0u64..10_000, lr in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = random_tensor(&[3, 4], -1.0, 1.0, &mut rng);
        let grad = random_tensor(&[3, 4], -1.0, 1.0, &mut rng);
        let mut store = ParamStore::new();
        store.add("w", theta.clone(), true).unwrap();
        store.params_mut()[0].grad = grad.clone();
        let mut st = OptimizerState::new(&store);
        sgd_step(&mut store, &mut st, SgdStep { lr, momentum: 0.0, weight_decay: 0.0 }).unwrap();
        let expected: Vec<f64> = theta.data().iter().zip(grad.data()).map(|(t, g)| t - lr * g).collect();
        prop_assert_eq!(store.params()[0].value.data(), &expected[..]);
    }

    #[test]
    fn metrics_are_permutation_equivariant(seed in 0u64..10_000, ignore_rate in 0.0f64..0.3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = random_map(&mut rng, 9, 11, 4);
        let mut gt = random_map(&mut rng, 9, 11, 4);
        for v in gt.data.iter_mut() {
            if rng.gen_bool(ignore_rate) {
                *v = 255;
            }
        }
        let mut perm = [0u8, 1, 2, 3];
        for i in (1..4).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let relabel = |l: &LabelMap| LabelMap::new(l.height, l.width, l.data.iter().map(|&v| if v == 255 { v } else { perm[v as usize] }).collect()).unwrap();
        let a = compute_metrics(&pred, &gt, 4, 255).unwrap();
        let b = compute_metrics(&relabel(&pred), &relabel(&gt), 4, 255).unwrap();
        prop_assert!((a.mean_iou - b.mean_iou).abs() < 1e-12);
        prop_assert!((a.pixel_accuracy - b.pixel_accuracy).abs() < 1e-12);
        prop_assert!((a.mean_accuracy - b.mean_accuracy).abs() < 1e-12);
        for c in 0..4 {
            prop_assert_eq!(a.per_class_iou[c], b.per_class_iou[perm[c] as usize]);
        }
    }

    #[test]
    fn wide_trimap_equals_global(seed in 0u64..10_000, h in 2usize..20, w in 2usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = random_map(&mut rng, h, w, 3);
        let mut gt = blocky_map(&mut rng, h, w, 3);
        gt.data[0] = 0;
        gt.data[1] = 1;
        let global = compute_metrics(&pred, &gt, 3, 255).unwrap().mean_iou;
        let band = trimap_miou(&pred, &gt, h.max(w), 3, 255).unwrap();
        prop_assert_eq!(band, Some(global));
    }

    #[test]
    fn metrics_stay_in_unit_interval(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = compute_metrics(&random_map(&mut rng, 7, 7, 5), &random_map(&mut rng, 7, 7, 5), 5, 255).unwrap();
        for v in [r.pixel_accuracy, r.mean_accuracy, r.mean_iou] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
