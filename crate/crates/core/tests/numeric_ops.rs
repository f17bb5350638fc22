mod common;

use std::sync::Arc;

use common::{max_grad_error, naive_conv2d, random_tensor, rng};
use crackseg::numeric::{ResizeMode, Tape, Tensor};
use crackseg::params::{ParamGroup, ParamRole, ParamStore};
use crackseg::Error;
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_hand_values() {
    let mut r = rng(1);
    let a = random_tensor(&[3, 3], &mut r);
    let mut tape = Tape::new();
    let va = tape.constant(a.clone());
    let vi = tape.constant(Tensor::eye(3));
    let out = tape.matmul(va, vi).unwrap();
    assert_eq!(tape.value(out), &a);

    let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let ones = tape.constant(t(&[2, 1], &[1.0, 1.0]));
    let y = tape.matmul(x, ones).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut r = rng(2);
    let a = random_tensor(&[3, 4], &mut r);
    let b = random_tensor(&[4, 2], &mut r);
    assert!(max_grad_error(&[a.clone(), b], |tp, v| tp.matmul(v[0], v[1]).unwrap()) < 1e-3);
    // gradient of sum(A·B) specifically
    let b2 = random_tensor(&[4, 5], &mut r);
    let mut tape = Tape::new();
    let va = tape.leaf(a.clone());
    let vb = tape.constant(b2.clone());
    let prod = tape.matmul(va, vb).unwrap();
    let loss = tape.sum(prod);
    let g = tape.backward(loss).unwrap();
    let numeric = crackseg::numeric::gradcheck::numeric_gradient(&a, 1e-3, |x| {
        let mut tp = Tape::new();
        let (x, y) = (tp.constant(x.clone()), tp.constant(b2.clone()));
        let p = tp.matmul(x, y).unwrap();
        tp.value(p).sum()
    });
    for (an, nu) in g.wrt(va).unwrap().data().iter().zip(&numeric) {
        assert!(crackseg::numeric::gradcheck::relative_error(*an, *nu) < 1e-3);
    }
}

#[test]
fn batched_and_transposed_matmul_gradients() {
    let mut r = rng(3);
    let a = random_tensor(&[2, 3, 4], &mut r);
    let b = random_tensor(&[2, 5, 4], &mut r);
    let c = random_tensor(&[2, 4, 5], &mut r);
    assert!(max_grad_error(&[a.clone(), b], |tp, v| tp.matmul_nt(v[0], v[1]).unwrap()) < 1e-3);
    assert!(max_grad_error(&[a, c], |tp, v| tp.matmul(v[0], v[1]).unwrap()) < 1e-3);
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.constant(t(&[2], &[1f64.ln(), 3f64.ln()]));
    let y = tape.softmax(x, 0).unwrap();
    assert!((tape.value(y).data()[0] - 0.25).abs() < 1e-12);
    assert!((tape.value(y).data()[1] - 0.75).abs() < 1e-12);

    let base = t(&[2, 3], &[0.3, -1.2, 2.0, 0.0, 0.5, 0.1]);
    let shifted = base.map(|v| v + 17.5);
    let (a, b) = (tape.constant(base), tape.constant(shifted));
    let (sa, sb) = (tape.softmax(a, 1).unwrap(), tape.softmax(b, 1).unwrap());
    assert!(tape.value(sa).max_rel_diff(tape.value(sb), 1.0) < 1e-12);
}

#[test]
fn softmax_rejects_nan_and_bad_axis() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[f64::NAN, 0.0]));
    assert!(matches!(tape.softmax(x, 0), Err(Error::Numeric(_))));
    assert!(tape.softmax(x, 1).is_err());
}

#[test]
fn softmax_gradient_on_every_axis() {
    let mut r = rng(4);
    let x = random_tensor(&[2, 3, 4], &mut r);
    for axis in 0..3 {
        assert!(
            max_grad_error(std::slice::from_ref(&x), |tp, v| tp
                .softmax(v[0], axis)
                .unwrap())
                < 1e-3
        );
    }
}

proptest! {
    #[test]
    fn softmax_slices_sum_to_one(values in proptest::collection::vec(-30.0f32..30.0, 12), axis in 0usize..2) {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new([3, 4], values).unwrap());
        let y = tape.softmax(x, axis).unwrap();
        let out = tape.value(y);
        if axis == 1 {
            for r in 0..3 {
                let s: f32 = (0..4).map(|c| out.at(&[r, c])).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        } else {
            for c in 0..4 {
                let s: f32 = (0..3).map(|r| out.at(&[r, c])).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn gelu_examples_and_gradient() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[0.0, 10.0, 1.0]));
    let y = tape.gelu(x);
    let v = tape.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 10.0).abs() < 1e-6);
    // 1·Φ(1) = 0.841344746...
    assert!((v[2] - 0.841_344_746).abs() < 1e-6);
    let mut r = rng(5);
    let x = random_tensor(&[10], &mut r).map(|v| v * 3.0);
    assert!(max_grad_error(&[x], |tp, v| tp.gelu(v[0])) < 1e-3);
}

#[test]
fn layer_norm_examples_and_gradient() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full([2, 4], 3.25));
    let g = tape.constant(Tensor::full([4], 1.0));
    let b = tape.constant(Tensor::zeros([4]));
    let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
    assert!(tape.value(y).data().iter().all(|v| *v == 0.0));

    let mut r = rng(6);
    let xr = tape.constant(random_tensor(&[5, 7], &mut r).map(|v| v * 4.0 + 1.0));
    let g7 = tape.constant(Tensor::full([7], 1.0));
    let b7 = tape.constant(Tensor::zeros([7]));
    let y = tape.layer_norm(xr, g7, b7, 1e-6).unwrap();
    for row in tape.value(y).data().chunks(7) {
        let mean: f64 = row.iter().sum::<f64>() / 7.0;
        assert!(mean.abs() < 1e-5);
    }

    let inputs = [
        random_tensor(&[3, 6], &mut r),
        random_tensor(&[6], &mut r),
        random_tensor(&[6], &mut r),
    ];
    let err = max_grad_error(&inputs, |tp, v| {
        tp.layer_norm(v[0], v[1], v[2], 1e-6).unwrap()
    });
    assert!(err < 1e-3, "layer norm gradient error {err}");
}

#[test]
fn conv2d_identity_and_downsampling_geometry() {
    let mut r = rng(7);
    let img = random_tensor(&[1, 5, 5], &mut r);
    let mut tape = Tape::new();
    let x = tape.constant(img.clone());
    let k = tape.constant(Tensor::full([1, 1, 1, 1], 1.0));
    let y = tape.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(tape.value(y), &img);

    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([3, 448, 448]));
    let k = tape.constant(Tensor::zeros([2, 3, 16, 16]));
    let y = tape.conv2d(x, k, None, 16, 0).unwrap();
    assert_eq!(tape.shape(y), &[2, 28, 28]);
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    let mut r = rng(8);
    for (stride, pad, k) in [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 2), (3, 2, 4)] {
        let x = random_tensor(&[2, 6, 6], &mut r);
        let w = random_tensor(&[3, 2, k, k], &mut r);
        let mut tape = Tape::new();
        let (vx, vw) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let y = tape.conv2d(vx, vw, None, stride, pad).unwrap();
        let oracle = naive_conv2d(&x, &w, stride, pad);
        assert_eq!(tape.shape(y), oracle.shape());
        assert!(tape.value(y).max_rel_diff(&oracle, 1.0) < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn conv2d_f32_agrees_with_oracle_up_to_8x8(h in 3usize..=8, w in 3usize..=8, k in 1usize..=3, stride in 1usize..=2, seed in 0u64..1000) {
        let mut r = rng(seed);
        let x = random_tensor(&[2, h, w], &mut r);
        let kern = random_tensor(&[2, 2, k, k], &mut r);
        let mut tape = Tape::<f32>::new();
        let vx = tape.constant(x.cast());
        let vw = tape.constant(kern.cast());
        let y = tape.conv2d(vx, vw, None, stride, k / 2).unwrap();
        let oracle = naive_conv2d(&x.cast::<f32>().cast(), &kern.cast::<f32>().cast(), stride, k / 2);
        let got: Tensor<f64> = tape.value(y).cast();
        for (a, b) in got.data().iter().zip(oracle.data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn conv2d_invalid_geometry() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros([1, 2, 2]));
    let k = tape.constant(Tensor::zeros([1, 1, 5, 5]));
    assert!(matches!(
        tape.conv2d(x, k, None, 1, 0),
        Err(Error::Geometry { .. })
    ));
    let k3 = tape.constant(Tensor::zeros([1, 2, 3, 3]));
    assert!(matches!(
        tape.conv2d(x, k3, None, 1, 1),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn conv2d_gradients() {
    let mut r = rng(9);
    let inputs = [
        random_tensor(&[2, 5, 5], &mut r),
        random_tensor(&[3, 2, 3, 3], &mut r),
        random_tensor(&[3], &mut r),
    ];
    let err = max_grad_error(&inputs, |tp, v| {
        tp.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap()
    });
    assert!(err < 1e-3, "{err}");
}

#[test]
fn transposed_conv_geometry_and_identity() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([8, 28, 28]));
    let k1 = tape.constant(Tensor::zeros([8, 4, 2, 2]));
    let k2 = tape.constant(Tensor::zeros([4, 2, 2, 2]));
    let y = tape.conv_transpose2d(x, k1, None, 2).unwrap();
    let y = tape.conv_transpose2d(y, k2, None, 2).unwrap();
    assert_eq!(tape.shape(y), &[2, 112, 112]);

    let mut r = rng(10);
    let img = random_tensor(&[1, 4, 3], &mut r);
    let mut tape = Tape::new();
    let x = tape.constant(img.clone());
    let k = tape.constant(Tensor::full([1, 1, 1, 1], 1.0));
    let y = tape.conv_transpose2d(x, k, None, 1).unwrap();
    assert_eq!(tape.value(y), &img);
}

#[test]
fn transposed_conv_is_adjoint_of_conv() {
    let mut r = rng(11);
    for (k, stride, h) in [(2, 2, 6), (3, 1, 5), (3, 2, 7), (4, 2, 8)] {
        let kernel = random_tensor(&[3, 2, k, k], &mut r);
        let x = random_tensor(&[2, h, h], &mut r);
        // backward of conv with upstream `up`
        let mut tape = Tape::new();
        let vx = tape.leaf(x.clone());
        let vk = tape.constant(kernel.clone());
        let y = tape.conv2d(vx, vk, None, stride, 0).unwrap();
        let up = random_tensor(tape.shape(y), &mut r);
        let vu = tape.constant(up.clone());
        let prod = tape.mul(y, vu).unwrap();
        let loss = tape.sum(prod);
        let grad_x = tape.backward(loss).unwrap().wrt(vx).unwrap().clone();
        // forward of transposed conv on `up` with the same kernel
        let mut t2 = Tape::new();
        let vu2 = t2.constant(up);
        let vk2 = t2.constant(kernel);
        let z = t2.conv_transpose2d(vu2, vk2, None, stride).unwrap();
        let z = t2.value(z);
        // transposed output may be smaller when (h - k) % stride != 0
        for c in 0..2 {
            for i in 0..z.shape()[1] {
                for j in 0..z.shape()[2] {
                    assert!((z.at(&[c, i, j]) - grad_x.at(&[c, i, j])).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn transposed_conv_gradients() {
    let mut r = rng(12);
    let inputs = [
        random_tensor(&[3, 3, 2], &mut r),
        random_tensor(&[3, 2, 2, 2], &mut r),
        random_tensor(&[2], &mut r),
    ];
    let err = max_grad_error(&inputs, |tp, v| {
        tp.conv_transpose2d(v[0], v[1], Some(v[2]), 2).unwrap()
    });
    assert!(err < 1e-3, "{err}");
}

#[test]
fn resize_passthrough_and_constant() {
    let mut r = rng(13);
    let img = random_tensor(&[2, 5, 7], &mut r);
    let mut tape = Tape::new();
    let x = tape.constant(img.clone());
    for mode in [
        ResizeMode::Bilinear,
        ResizeMode::Bicubic,
        ResizeMode::Nearest,
    ] {
        let y = tape.resize(x, 5, 7, mode).unwrap();
        assert!(tape.value(y).bitwise_eq(&img));
    }
    let c = tape.constant(Tensor::full([1, 4, 4], 0.3));
    for mode in [ResizeMode::Bilinear, ResizeMode::Bicubic] {
        for (h, w) in [(9, 3), (2, 2), (13, 17)] {
            let y = tape.resize(c, h, w, mode).unwrap();
            assert!(tape.value(y).data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        }
    }
}

#[test]
fn bilinear_checkerboard_centre_samples() {
    // Half-pixel sampling of [[0,1],[1,0]] to 4×4: interior rows/cols sample
    // source coordinates 0.25 and 0.75, giving weights (0.75, 0.25) and
    // (0.25, 0.75).
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2, 2], &[0.0, 1.0, 1.0, 0.0]));
    let y = tape.resize(x, 4, 4, ResizeMode::Bilinear).unwrap();
    let out = tape.value(y);
    let expect = [
        [0.0, 0.25, 0.75, 1.0],
        [0.25, 0.375, 0.625, 0.75],
        [0.75, 0.625, 0.375, 0.25],
        [1.0, 0.75, 0.25, 0.0],
    ];
    for i in 0..4 {
        for j in 0..4 {
            assert!(
                (out.at(&[0, i, j]) - expect[i][j]).abs() < 1e-12,
                "({i},{j})"
            );
        }
    }
}

#[test]
fn resize_gradients() {
    let mut r = rng(14);
    let x = random_tensor(&[2, 3, 4], &mut r);
    for mode in [ResizeMode::Bilinear, ResizeMode::Bicubic] {
        let err = max_grad_error(std::slice::from_ref(&x), |tp, v| {
            tp.resize(v[0], 7, 5, mode).unwrap()
        });
        assert!(err < 1e-3);
        let err = max_grad_error(std::slice::from_ref(&x), |tp, v| {
            tp.resize(v[0], 2, 2, mode).unwrap()
        });
        assert!(err < 1e-3);
    }
}

#[test]
fn gather_permute_and_broadcast_gradients() {
    let mut r = rng(15);
    let x = random_tensor(&[2, 3, 4], &mut r);
    assert!(
        max_grad_error(std::slice::from_ref(&x), |tp, v| tp
            .permute(v[0], &[2, 0, 1])
            .unwrap())
            < 1e-3
    );
    let idx: Arc<[usize]> = vec![0, 5, crackseg::numeric::GATHER_PAD, 5, 23].into();
    assert!(
        max_grad_error(std::slice::from_ref(&x), |tp, v| tp
            .gather(v[0], idx.clone(), [5])
            .unwrap())
            < 1e-3
    );
    let b = random_tensor(&[3, 4], &mut r);
    assert!(max_grad_error(&[x, b], |tp, v| tp.add_bcast(v[0], v[1]).unwrap()) < 1e-3);
}

#[test]
fn loss_op_gradients() {
    let mut r = rng(16);
    let p = Tensor::from_fn([12], |_| rand::Rng::random_range(&mut r, 0.05..0.95));
    let y: Arc<[f64]> = (0..12)
        .map(|i| (i % 3 == 0) as u8 as f64)
        .collect::<Vec<_>>()
        .into();
    let err = max_grad_error(std::slice::from_ref(&p), |tp, v| {
        tp.binary_cross_entropy(v[0], y.clone(), 1e-7).unwrap()
    });
    assert!(err < 1e-3);
    let err = max_grad_error(&[p], |tp, v| tp.dice_loss(v[0], y.clone(), 1e-6).unwrap());
    assert!(err < 1e-3);
}

#[test]
fn backward_contracts() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::<f64>::full([4], 2.0));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[1.0; 4]);
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    assert!(matches!(
        Tape::<f64>::new().backward(x),
        Err(Error::Contract(_))
    ));
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let mut store = ParamStore::<f64>::new();
    let frozen = store
        .add(
            "frozen",
            Tensor::full([3, 3], 0.5),
            ParamRole::Weight,
            ParamGroup::Backbone,
        )
        .unwrap();
    let live = store
        .add(
            "live",
            Tensor::full([3], 0.1),
            ParamRole::Bias,
            ParamGroup::Delta,
        )
        .unwrap();
    store.set_tunable(frozen, false);
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(Tensor::full([2, 3], 1.0));
    let (w, b) = (tape.param(frozen), tape.param(live));
    let y = tape.linear(x, w, Some(b)).unwrap();
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap();
    assert!(g.param(frozen).is_none());
    assert_eq!(g.param(live).unwrap().data(), &[2.0, 2.0, 2.0]);
    assert_eq!(g.param_ids().collect::<Vec<_>>(), vec![live]);
}
