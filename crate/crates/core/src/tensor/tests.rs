use proptest::prelude::*;

use super::*;
use crate::rng::Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = Rng::new(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.range(-1.0, 1.0))
}

#[test]
fn tensor_rejects_wrong_length() {
    assert!(Tensor::new([2, 2], vec![1.0; 3]).is_err());
    assert!(Tensor::new([0], vec![]).is_err());
}

#[test]
fn conv2d_identity_kernel() {
    let mut tape = Tape::new();
    let x = tape.constant(random(&[1, 1, 3, 3], 1));
    let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
    let b = tape.constant(t(&[1], &[0.0]));
    let y = tape.conv2d(x, k, b, 1, 0).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn conv2d_sum_of_products() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let k = tape.constant(Tensor::full([1, 1, 2, 2], 1.0));
    let b = tape.constant(t(&[1], &[0.0]));
    let y = tape.conv2d(x, k, b, 1, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y).item(), 10.0);
}

#[test]
fn conv2d_zero_kernel_gives_bias() {
    let mut tape = Tape::new();
    let x = tape.constant(random(&[2, 3, 5, 4], 2));
    let k = tape.constant(Tensor::zeros([2, 3, 3, 3]));
    let b = tape.constant(t(&[2], &[0.7, 0.7]));
    let y = tape.conv2d(x, k, b, 2, 1).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.7));
}

#[test]
fn conv2d_channel_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
    let k = tape.constant(Tensor::zeros([1, 3, 3, 3]));
    let b = tape.constant(Tensor::zeros([1]));
    let msg = tape.conv2d(x, k, b, 1, 1).unwrap_err().to_string();
    assert!(msg.contains("[1, 3, 3, 3]") && msg.contains("[1, 2, 4, 4]"), "{msg}");
}

#[test]
fn avgpool_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.avgpool2d(x, 2).unwrap();
    assert_eq!(tape.value(y).item(), 2.5);

    let c = tape.constant(Tensor::full([1, 2, 4, 4], 3.25));
    let yc = tape.avgpool2d(c, 2).unwrap();
    assert!(tape.value(yc).data().iter().all(|&v| v == 3.25));

    let r = tape.constant(random(&[1, 2, 3, 3], 5));
    let y1 = tape.avgpool2d(r, 1).unwrap();
    assert_eq!(tape.value(y1), tape.value(r));

    let odd = tape.constant(Tensor::zeros([1, 1, 3, 4]));
    assert!(tape.avgpool2d(odd, 2).is_err());
}

#[test]
fn relu_examples_and_kink_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.5]), true);
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.5]);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn linear_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let zb = tape.constant(Tensor::zeros([2]));
    let y = tape.linear(x, eye, zb).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let zw = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(t(&[3], &[1.0, -2.0, 0.5]));
    let y = tape.linear(x, zw, b).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);

    let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let w = tape.constant(t(&[2, 1], &[1.0, 1.0]));
    let b = tape.constant(t(&[1], &[0.0]));
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0]);

    let bad = tape.constant(Tensor::zeros([3, 1]));
    assert!(tape.linear(x, bad, b).is_err());
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2], &[0.0, 0.0]));
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.constant(t(&[1, 2], &[1f64.ln(), 3f64.ln()]));
    let y = tape.softmax(x).unwrap();
    assert!((tape.value(y).data()[0] - 0.25).abs() < 1e-15);
    assert!((tape.value(y).data()[1] - 0.75).abs() < 1e-15);

    let nan = tape.constant(t(&[1, 2], &[f64::NAN, 0.0]));
    assert!(matches!(tape.softmax(nan), Err(crate::Error::NonFinite(_))));
    let one = tape.constant(t(&[2, 1], &[0.0, 0.0]));
    assert!(tape.softmax(one).is_err());
}

#[test]
fn add_scaled_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[1], &[1.0]));
    let b = tape.constant(t(&[1], &[2.0]));
    let y = tape.add_scaled(a, 0.0, b, 1.0).unwrap();
    assert_eq!(tape.value(y).item(), 2.0);
    let y = tape.add_scaled(a, 0.5, a, 0.5).unwrap();
    assert_eq!(tape.value(y).item(), 1.0);
    let y = tape.add_scaled(a, 0.1, b, 0.9).unwrap();
    assert!((tape.value(y).item() - 1.9).abs() < 1e-12);
    let c = tape.constant(Tensor::zeros([2]));
    assert!(tape.add_scaled(a, 1.0, c, 1.0).is_err());
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(random(&[4], 9), true);
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);

    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1], &[3.0]), true);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 6.0);
    // A second pass accumulates.
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 12.0);
    tape.zero_grads();
    assert!(tape.grad(x).is_none());

    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::zeros([2]), true);
    assert!(tape.backward(v).is_err());
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut tape = Tape::new();
        let x = tape.leaf(random(&[1, 2, 6, 6], 11), true);
        let k = tape.leaf(random(&[3, 2, 3, 3], 12), true);
        let b = tape.leaf(random(&[3], 13), true);
        let y = tape.conv2d(x, k, b, 1, 1).unwrap();
        let y = tape.relu(y);
        let y = tape.avgpool2d(y, 2).unwrap();
        let r = tape.channels_to_rows(y, 3).unwrap();
        let p = tape.softmax(r).unwrap();
        let picks = (0..9).map(|row| NllPick { row, class: row % 3, weight: 0.1 }).collect();
        let l = tape.nll(p, picks).unwrap();
        tape.backward(l).unwrap();
        (
            tape.grad(x).unwrap().clone(),
            tape.grad(k).unwrap().clone(),
            tape.grad(b).unwrap().clone(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn gradcheck_sum_is_exact() {
    let err = gradcheck(|tape, x| Ok(tape.sum(x)), &random(&[3, 4], 3), 1e-5).unwrap();
    assert!(err <= 1e-10, "{err}");
}

#[test]
fn gradcheck_rejects_bad_eps() {
    assert!(gradcheck(|tape, x| Ok(tape.sum(x)), &Tensor::scalar(1.0), 1e-2).is_err());
}

#[test]
fn gradcheck_softmax_cross_entropy() {
    let f = |tape: &mut Tape, x: Var| {
        let p = tape.softmax(x)?;
        let picks = vec![
            NllPick { row: 0, class: 1, weight: 1.0 },
            NllPick { row: 1, class: 0, weight: 0.5 },
            NllPick { row: 2, class: 2, weight: 2.0 },
        ];
        tape.nll(p, picks)
    };
    let err = gradcheck(f, &random(&[3, 3], 4), 1e-5).unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn gradcheck_each_op() {
    let eps = 1e-5;
    // Values are drawn in [-1, 1]; relu inputs are shifted off the kink.
    let conv = gradcheck_many(
        |tape, v| {
            let y = tape.conv2d(v[0], v[1], v[2], 2, 1)?;
            let w = tape.constant(random(tape.shape(y), 21));
            let yw = tape.mul(y, w)?;
            Ok(tape.sum(yw))
        },
        &[random(&[2, 2, 5, 5], 1), random(&[3, 2, 3, 3], 2), random(&[3], 3)],
        eps,
    )
    .unwrap();
    assert!(conv <= 1e-4, "conv2d {conv}");

    let pool = gradcheck(
        |tape, x| {
            let y = tape.avgpool2d(x, 2)?;
            let w = tape.constant(random(tape.shape(y), 22));
            let yw = tape.mul(y, w)?;
            Ok(tape.sum(yw))
        },
        &random(&[1, 2, 4, 4], 4),
        eps,
    )
    .unwrap();
    assert!(pool <= 1e-4, "avgpool {pool}");

    let mut point = random(&[10], 5);
    for v in point.data_mut() {
        *v += 0.05f64.copysign(*v);
    }
    let relu = gradcheck(
        |tape, x| {
            let y = tape.relu(x);
            let w = tape.constant(random(&[10], 23));
            let yw = tape.mul(y, w)?;
            Ok(tape.sum(yw))
        },
        &point,
        eps,
    )
    .unwrap();
    assert!(relu <= 1e-4, "relu {relu}");

    let linear = gradcheck_many(
        |tape, v| {
            let y = tape.linear(v[0], v[1], v[2])?;
            let w = tape.constant(random(&[3, 2], 24));
            let yw = tape.mul(y, w)?;
            Ok(tape.sum(yw))
        },
        &[random(&[3, 4], 6), random(&[4, 2], 7), random(&[2], 8)],
        eps,
    )
    .unwrap();
    assert!(linear <= 1e-4, "linear {linear}");

    let add = gradcheck_many(
        |tape, v| {
            let y = tape.add_scaled(v[0], 0.1, v[1], 0.9)?;
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum(y2))
        },
        &[random(&[5], 9), random(&[5], 10)],
        eps,
    )
    .unwrap();
    assert!(add <= 1e-4, "add_scaled {add}");

    let rows = gradcheck(
        |tape, x| {
            let r = tape.channels_to_rows(x, 2)?;
            let w = tape.constant(random(tape.shape(r), 25));
            let rw = tape.mul(r, w)?;
            Ok(tape.sum(rw))
        },
        &random(&[1, 6, 2, 3], 11),
        eps,
    )
    .unwrap();
    assert!(rows <= 1e-4, "channels_to_rows {rows}");

    let gather = gradcheck(
        |tape, x| {
            let g = tape.gather(x, vec![Some(0), None, Some(3), Some(3)], [4])?;
            let g2 = tape.mul(g, g)?;
            Ok(tape.sum(g2))
        },
        &random(&[5], 12),
        eps,
    )
    .unwrap();
    assert!(gather <= 1e-4, "gather {gather}");

    let sl1 = gradcheck(
        |tape, x| {
            tape.smooth_l1(
                x,
                vec![SmoothL1Pick { row: 1, col: 2, target: [0.3, -2.0, 0.1, 1.5], weight: 0.5 }],
            )
        },
        &random(&[2, 6], 13),
        eps,
    )
    .unwrap();
    assert!(sl1 <= 1e-4, "smooth_l1 {sl1}");
}

#[test]
fn channels_to_rows_orders_cells_then_slots() {
    let mut tape = Tape::new();
    // 2 anchor slots × 2 values, 1×2 grid.
    let x = tape.constant(Tensor::from_fn([1, 4, 1, 2], |i| i as f64));
    let r = tape.channels_to_rows(x, 2).unwrap();
    // channel c at cell j holds 2c + j.
    assert_eq!(tape.value(r).shape(), &[4, 2]);
    assert_eq!(tape.value(r).data(), &[0.0, 2.0, 4.0, 6.0, 1.0, 3.0, 5.0, 7.0]);
}

#[test]
fn nll_floors_probabilities() {
    let mut tape = Tape::new();
    let p = tape.leaf(t(&[1, 2], &[0.0, 1.0]), true);
    let l = tape.nll(p, vec![NllPick { row: 0, class: 0, weight: 1.0 }]).unwrap();
    assert!((tape.value(l).item() + 1e-12f64.ln()).abs() < 1e-9);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(p).unwrap().data(), &[0.0, 0.0]);
}

proptest! {
    #[test]
    fn conv_output_shape(
        h in 1usize..9, w in 1usize..9, kh in 1usize..4, kw in 1usize..4,
        stride in 1usize..4, padding in 0usize..3, c in 1usize..3, k in 1usize..3,
    ) {
        prop_assume!(kh <= h + 2 * padding && kw <= w + 2 * padding);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, c, h, w]));
        let kern = tape.constant(Tensor::zeros([k, c, kh, kw]));
        let b = tape.constant(Tensor::zeros([k]));
        let y = tape.conv2d(x, kern, b, stride, padding).unwrap();
        prop_assert_eq!(
            tape.shape(y),
            &[1, k, (h + 2 * padding - kh) / stride + 1, (w + 2 * padding - kw) / stride + 1][..]
        );
    }

    #[test]
    fn avgpool_output_shape(size in 1usize..4, oh in 1usize..5, ow in 1usize..5, c in 1usize..3) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([2, c, oh * size, ow * size]));
        let y = tape.avgpool2d(x, size).unwrap();
        prop_assert_eq!(tape.shape(y), &[2, c, oh, ow][..]);
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        logits in prop::collection::vec(-30.0f64..30.0, 2..6), shift in -50.0f64..50.0,
    ) {
        let k = logits.len();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, k], &logits));
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let xs = tape.constant(t(&[1, k], &shifted));
        let y = tape.softmax(x).unwrap();
        let ys = tape.softmax(xs).unwrap();
        let total: f64 = tape.value(y).data().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        for (a, b) in tape.value(y).data().iter().zip(tape.value(ys).data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn randomized_composite_gradcheck(seed in 0u64..1000) {
        let f = |tape: &mut Tape, v: &[Var]| {
            let y = tape.conv2d(v[0], v[1], v[2], 1, 1)?;
            let y = tape.avgpool2d(y, 2)?;
            let r = tape.channels_to_rows(y, 2)?;
            let p = tape.softmax(r)?;
            tape.nll(p, vec![NllPick { row: 0, class: 1, weight: 1.0 }, NllPick { row: 3, class: 0, weight: 0.3 }])
        };
        let err = gradcheck_many(
            f,
            &[random(&[1, 2, 4, 4], seed), random(&[2, 2, 3, 3], seed + 1), random(&[2], seed + 2)],
            1e-5,
        ).unwrap();
        prop_assert!(err <= 1e-4, "{}", err);
    }
}
