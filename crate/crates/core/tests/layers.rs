use fdnet_core::gradcheck::{finite_diff_check, random_tensor, run_check, TOLERANCE};
use fdnet_core::kernels::{col2im, gemm, im2col, ConvGeometry};
use fdnet_core::layers::{CompositeH, CompositeHSpec, Conv2d, ConvSpec, Ctx, Init, Mode};
use fdnet_core::params::ParamStore;
use fdnet_core::{Error, Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn conv(x: &Tensor, w: &Tensor, geom: ConvGeometry) -> Result<Tensor, Error> {
    let mut g = Graph::new();
    let (xi, wi) = (g.input(x.clone()), g.input(w.clone()));
    let y = g.conv2d(xi, wi, None, geom)?;
    Ok(g.value(y).clone())
}

fn deconv(x: &Tensor, w: &Tensor, geom: ConvGeometry) -> Result<Tensor, Error> {
    let mut g = Graph::new();
    let (xi, wi) = (g.input(x.clone()), g.input(w.clone()));
    let y = g.conv_transpose2d(xi, wi, geom)?;
    Ok(g.value(y).clone())
}

#[test]
fn pointwise_identity_kernel() {
    let x = t(&[1, 1, 4, 4], &(0..16).map(f64::from).collect::<Vec<_>>());
    let y = conv(&x, &t(&[1, 1, 1, 1], &[1.0]), ConvGeometry::square(1, 1, 0, 1)).unwrap();
    assert_eq!(y, x);
}

#[test]
fn all_ones_counts_overlap() {
    let y = conv(&Tensor::ones(&[1, 1, 5, 5]), &Tensor::ones(&[1, 1, 3, 3]), ConvGeometry::square(3, 1, 1, 1)).unwrap();
    assert_eq!(y.data()[12], 9.0);
    assert_eq!(y.data()[0], 4.0);
    assert_eq!(y.data()[24], 4.0);
}

#[test]
fn atrous_preserves_extent() {
    let y = conv(&Tensor::ones(&[1, 1, 8, 8]), &Tensor::ones(&[1, 1, 3, 3]), ConvGeometry::square(3, 1, 2, 2)).unwrap();
    assert_eq!(y.shape(), &[1, 1, 8, 8]);
    assert_eq!(y.data()[9 * 3], 9.0);
}

#[test]
fn conv_errors() {
    let x = Tensor::ones(&[1, 2, 4, 4]);
    let w = Tensor::ones(&[1, 3, 3, 3]);
    assert!(matches!(conv(&x, &w, ConvGeometry::square(3, 1, 1, 1)), Err(Error::ShapeMismatch { .. })));
    let w = Tensor::ones(&[1, 2, 5, 5]);
    assert!(matches!(conv(&x, &w, ConvGeometry::square(5, 1, 0, 1)), Err(Error::DegenerateOutput { .. })));
}

#[test]
fn deconv_doubles_extent() {
    let y = deconv(&Tensor::ones(&[1, 1, 4, 4]), &Tensor::ones(&[1, 3, 4, 4]), ConvGeometry::square(4, 2, 1, 1)).unwrap();
    assert_eq!(y.shape(), &[1, 3, 8, 8]);
}

#[test]
fn deconv_degenerate_output() {
    let r = deconv(&Tensor::ones(&[1, 1, 1, 1]), &Tensor::ones(&[1, 1, 1, 1]), ConvGeometry::square(1, 1, 1, 1));
    assert!(matches!(r, Err(Error::DegenerateOutput { .. })));
}

#[test]
fn deconv_stamps_kernel_for_delta() {
    let mut x = Tensor::zeros(&[1, 1, 3, 3]);
    x.data_mut()[4] = 1.0;
    let k: Vec<f64> = (1..=16).map(f64::from).collect();
    let y = deconv(&x, &t(&[1, 1, 4, 4], &k), ConvGeometry::square(4, 2, 1, 1)).unwrap();
    assert_eq!(y.shape(), &[1, 1, 6, 6]);
    for r in 0..6 {
        for c in 0..6 {
            let expected = if (1..5).contains(&r) && (1..5).contains(&c) { k[(r - 1) * 4 + (c - 1)] } else { 0.0 };
            assert_eq!(y.data()[r * 6 + c], expected, "({}, {})", r, c);
        }
    }
}

fn channel_moments(y: &Tensor) -> Vec<(f64, f64)> {
    let (n, c, h, w) = y.dims4().unwrap();
    let hw = h * w;
    (0..c)
        .map(|ch| {
            let vals: Vec<f64> = (0..n).flat_map(|s| y.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            (m, v)
        })
        .collect()
}

fn bn_train(x: &Tensor, gamma: f64, beta: f64) -> Result<Tensor, Error> {
    let c = x.shape()[1];
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let gm = g.input(Tensor::full(&[c], gamma));
    let bt = g.input(Tensor::full(&[c], beta));
    let y = g.batch_norm_train(xi, gm, bt, 1e-5, None)?;
    Ok(g.value(y).clone())
}

#[test]
fn batch_norm_standardizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(&[3, 4, 5, 5], -30.0, 70.0, &mut rng);
    for (m, v) in channel_moments(&bn_train(&x, 1.0, 0.0).unwrap()) {
        assert!(m.abs() < 1e-9);
        assert!((v - 1.0).abs() < 1e-6);
    }
    for (m, v) in channel_moments(&bn_train(&x, 2.0, 3.0).unwrap()) {
        assert!((m - 3.0).abs() < 1e-9);
        assert!((v.sqrt() - 2.0).abs() < 1e-6);
    }
}

#[test]
fn batch_norm_needs_two_values() {
    assert!(matches!(bn_train(&Tensor::ones(&[1, 2, 1, 1]), 1.0, 0.0), Err(Error::InsufficientStatistics(1))));
}

#[test]
fn batch_norm_eval_at_running_mean_returns_beta() {
    let mut g = Graph::new();
    let x = g.input(t(&[1, 2, 2, 2], &[0.3, 0.3, 0.3, 0.3, -1.5, -1.5, -1.5, -1.5]));
    let gm = g.input(t(&[2], &[2.0, 0.5]));
    let bt = g.input(t(&[2], &[0.25, -4.0]));
    let y = g.batch_norm_eval(x, gm, bt, &[0.3, -1.5], &[2.0, 0.7], 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.25, 0.25, 0.25, 0.25, -4.0, -4.0, -4.0, -4.0]);
}

#[test]
fn pooling_examples() {
    let mut g = Graph::new();
    let x = g.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let m = g.max_pool(x, 2, 2).unwrap();
    let a = g.avg_pool(x, 2, 2).unwrap();
    assert_eq!(g.value(m).data(), &[4.0]);
    assert_eq!(g.value(a).data(), &[2.5]);
    assert!(matches!(g.max_pool(x, 3, 1), Err(Error::DegenerateOutput { .. })));
}

#[test]
fn relu_subgradient() {
    let mut g = Graph::new();
    let x = g.input(t(&[3], &[-1.0, 5.0, 0.0]));
    let y = g.relu(x).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn bilinear_examples() {
    let mut g = Graph::new();
    let c = g.input(Tensor::full(&[1, 2, 3, 2], 5.0));
    let up = g.bilinear_upsample(c, 7, 9).unwrap();
    assert!(g.value(up).data().iter().all(|&v| (v - 5.0).abs() < 1e-15));

    let x = g.input(t(&[1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]));
    let y = g.bilinear_upsample(x, 4, 4).unwrap();
    let d = g.value(y).data();
    assert_eq!([d[0], d[3], d[12], d[15]], [0.0, 1.0, 2.0, 3.0]);
    assert!((d[1] - 1.0 / 3.0).abs() < 1e-15);

    assert!(matches!(g.bilinear_upsample(x, 1, 4), Err(Error::DownscaleRequest { .. })));
}

#[test]
fn bilinear_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&[1, 2, 3, 3], -1.0, 1.0, &mut rng);
    let err = finite_diff_check(&x, 1e-5, 1, |g, x| g.bilinear_upsample(x, 5, 5)).unwrap();
    assert!(err < 1e-6, "{}", err);
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.input(t(&[1, logits.len(), 1, 1], logits));
    let y = g.softmax_channels(x).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
    assert_eq!(softmax(&[1000.0, 1000.0]), vec![0.5, 0.5]);
    let p = softmax(&[1f64.ln(), 3f64.ln()]);
    assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
}

#[test]
fn composite_gradient() {
    let r = run_check("composite_h", 0).unwrap();
    assert!(r.max_rel_error < TOLERANCE, "{:?}", r);
}

#[test]
fn composite_h_shapes() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut init = Init::new(&mut store, &mut rng);
    let h = CompositeH::new(&mut init, "h", CompositeHSpec { in_channels: 8, growth: 4, dilation: 1 }).unwrap();
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[1, 8, 16, 16], 0.5));
    let mut cx = Ctx::new(&mut g, &store, Mode::Train);
    let (mid, out) = h.forward_with_bottleneck(&mut cx, x).unwrap();
    assert_eq!(g.shape(mid), &[1, 16, 16, 16]);
    assert_eq!(g.shape(out), &[1, 4, 16, 16]);
}

#[test]
fn channel_mismatch_is_reported() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut init = Init::new(&mut store, &mut rng);
    let conv = Conv2d::new(&mut init, "c", ConvSpec::pointwise(3, 2), false).unwrap();
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 2, 4, 4]));
    let mut cx = Ctx::new(&mut g, &store, Mode::Eval);
    assert!(matches!(conv.forward(&mut cx, x), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn gemm_transposes() {
    // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
    let a = [1.0, 2.0, 3.0, 4.0];
    let b = [5.0, 6.0, 7.0, 8.0];
    let mut c = [0.0; 4];
    gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
    assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
    assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
    assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
}

#[test]
fn extents() {
    let g = ConvGeometry::square(3, 1, 2, 2);
    assert_eq!(g.conv_output(8, 8), Some((8, 8)));
    let t = ConvGeometry::square(4, 2, 1, 1);
    assert_eq!(t.transpose_output(4, 4), Some((8, 8)));
    assert_eq!(ConvGeometry::square(5, 1, 0, 1).conv_output(3, 3), None);
}

#[test]
fn col2im_is_adjoint_of_im2col() {
    let g = ConvGeometry::square(3, 2, 1, 1);
    let (c, h, w) = (2, 5, 6);
    let (oh, ow) = g.conv_output(h, w).unwrap();
    let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
    let y: Vec<f64> = (0..c * 9 * oh * ow).map(|i| ((i * 5) % 13) as f64 - 6.0).collect();
    let mut cols = vec![0.0; y.len()];
    im2col(&x, c, h, w, &g, oh, ow, &mut cols);
    let mut back = vec![0.0; x.len()];
    col2im(&y, c, h, w, &g, oh, ow, &mut back);
    let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
    assert_eq!(lhs, rhs);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn conv_deconv_adjoint(
        combo in prop::sample::select(vec![(1usize, 1usize, 0usize, 1usize), (3, 1, 1, 1), (3, 1, 2, 2), (3, 2, 1, 1), (4, 2, 1, 1)]),
        cin in 1usize..4,
        cout in 1usize..4,
        half in 2usize..5,
        seed in 0u64..10_000,
    ) {
        let (k, s, p, d) = combo;
        // Extents for which the transposed convolution lands back on the input size.
        let h = if k == 3 && s == 2 { 2 * half + 1 } else { 2 * half };
        let geom = ConvGeometry::square(k, s, p, d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&[2, cin, h, h], -1.0, 1.0, &mut rng);
        let w = random_tensor(&[cout, cin, k, k], -1.0, 1.0, &mut rng);
        let cx = conv(&x, &w, geom).unwrap();
        let y = random_tensor(cx.shape(), -1.0, 1.0, &mut rng);
        let ty = deconv(&y, &w, geom).unwrap();
        prop_assert_eq!(ty.shape(), x.shape());
        prop_assert!((cx.dot(&y) - x.dot(&ty)).abs() < 1e-9);
    }

    #[test]
    fn softmax_sums_to_one(c in 2usize..6, seed in 0u64..10_000, scale in 0.1f64..500.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&[2, c, 3, 3], -scale, scale, &mut rng);
        let mut g = Graph::new();
        let xi = g.input(x);
        let y = g.softmax_channels(xi).unwrap();
        let v = g.value(y).data();
        for s in 0..2 {
            for px in 0..9 {
                let total: f64 = (0..c).map(|ch| v[(s * c + ch) * 9 + px]).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!((0..c).all(|ch| v[(s * c + ch) * 9 + px] >= 0.0));
            }
        }
    }

    #[test]
    fn batch_norm_inverse_affine(c in 1usize..4, seed in 0u64..10_000, gamma in 0.5f64..3.0, beta in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&[3, c, 3, 3], -5.0, 5.0, &mut rng);
        let plain = bn_train(&x, 1.0, 0.0).unwrap();
        let affine = bn_train(&x, gamma, beta).unwrap();
        let recovered = affine.map(|v| (v - beta) / gamma);
        prop_assert!(recovered.max_abs_diff(&plain) < 1e-9);
    }
}
