use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data)
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Contracts a tensor-valued output with fixed pseudo-random weights so the
/// gradient check sees every output element.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let w = random(tape.shape(out), seed);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

const TOL: f64 = 1e-6;

#[test]
fn conv1d_hand_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 1, 3], &[1.0, 2.0, 3.0]));
    let w = tape.constant(t(&[1, 1, 3], &[1.0, 0.0, -1.0]));
    let b = tape.constant(t(&[1], &[0.0]));
    let y = tape.conv1d(x, w, Some(b), 1).unwrap();
    assert_close(tape.value(y).data(), &[-2.0, -2.0, 2.0], 1e-12);

    let x = tape.constant(t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
    let w = tape.constant(t(&[1, 1, 3], &[0.0, 1.0, 0.0]));
    let y = tape.conv1d(x, w, Some(b), 2).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 2]);
    assert_close(tape.value(y).data(), &[1.0, 3.0], 1e-12);
}

#[test]
fn conv1d_zero_kernel_gives_bias() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(random(&[2, 3, 7], 1));
    let w = tape.constant(Tensor::zeros(&[4, 3, 3]));
    let b = tape.constant(t(&[4], &[0.5, -1.0, 2.0, 0.0]));
    let y = tape.conv1d(x, w, Some(b), 2).unwrap();
    assert_eq!(tape.shape(y), &[2, 4, 4]);
    for (i, v) in tape.value(y).data().iter().enumerate() {
        assert_eq!(*v, [0.5, -1.0, 2.0, 0.0][(i / 4) % 4]);
    }
}

#[test]
fn conv1d_rejects_channel_mismatch() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 5]));
    let w = tape.constant(Tensor::zeros(&[2, 4, 3]));
    assert!(matches!(tape.conv1d(x, w, None, 1), Err(Error::Config(_))));
}

#[test]
fn conv1d_output_length_is_ceil() {
    for t_in in 1..20 {
        for stride in 1..4 {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::zeros(&[1, 1, t_in]));
            let w = tape.constant(Tensor::zeros(&[1, 1, 3]));
            let y = tape.conv1d(x, w, None, stride).unwrap();
            assert_eq!(tape.shape(y)[2], t_in.div_ceil(stride));
        }
    }
}

#[test]
fn batchnorm_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 1, 2], &[1.0, 3.0]));
    let g = tape.constant(t(&[1], &[1.0]));
    let b = tape.constant(t(&[1], &[0.0]));
    let (y, stats) = tape.batch_norm_train(x, g, b, 0.0).unwrap();
    assert_close(tape.value(y).data(), &[-1.0, 1.0], 1e-12);
    assert_eq!(stats.mean, vec![2.0]);
    assert_eq!(stats.var, vec![1.0]);

    let g0 = tape.constant(t(&[1], &[0.0]));
    let b3 = tape.constant(t(&[1], &[3.0]));
    let (y, _) = tape.batch_norm_train(x, g0, b3, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 3.0]);

    let x = tape.constant(random(&[2, 2, 3], 5));
    let g = tape.constant(t(&[2], &[1.0, 1.0]));
    let b = tape.constant(t(&[2], &[0.0, 0.0]));
    let y = tape.batch_norm_eval(x, g, b, &[0.0, 0.0], &[1.0, 1.0], 0.0).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());
}

#[test]
fn batchnorm_train_needs_two_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 1]));
    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    assert!(tape.batch_norm_train(x, g, b, 1e-5).is_err());
}

#[test]
fn batchnorm_train_standardises_each_channel() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(random(&[4, 3, 9], 11));
    let g = tape.constant(Tensor::full(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    let (y, _) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
    let yv = tape.value(y).data();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|bi| yv[(bi * 3 + c) * 9..(bi * 3 + c + 1) * 9].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() <= 1e-6);
        assert!((v - 1.0).abs() <= 1e-4);
    }
}

#[test]
fn attention_single_position_is_value_path() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(random(&[1, 1, 4], 2));
    let q = tape.constant(random(&[1, 1, 4], 3));
    let a = tape.attention(q, q, x, 1).unwrap();
    assert_eq!(tape.attention_probs(a).unwrap(), &[1.0]);
    assert_eq!(tape.value(a).data(), tape.value(x).data());
}

#[test]
fn attention_zero_logits_are_uniform() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros(&[2, 5, 4]));
    let v = tape.constant(random(&[2, 5, 4], 4));
    let a = tape.attention(z, z, v, 2).unwrap();
    for p in tape.attention_probs(a).unwrap() {
        assert!((p - 0.2).abs() < 1e-15);
    }
}

#[test]
fn attention_two_step_hand_example() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 2, 1], &[1.0, 0.0]));
    let a = tape.attention(x, x, x, 1).unwrap();
    let e = core::f64::consts::E;
    let p = tape.attention_probs(a).unwrap();
    assert_close(p, &[e / (e + 1.0), 1.0 / (e + 1.0), 0.5, 0.5], 1e-12);
    assert_close(tape.value(a).data(), &[e / (e + 1.0), 0.5], 1e-12);
}

#[test]
fn linear_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2], &[1.0, 2.0]));
    let w = tape.constant(t(&[2, 2], &[1.0, 1.0, 1.0, -1.0]));
    let b = tape.constant(t(&[2], &[0.0, 1.0]));
    let y = tape.linear(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 0.0]);

    let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let x = tape.constant(random(&[3, 2], 9));
    let y = tape.linear(x, eye, None).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());

    let zero = tape.constant(Tensor::zeros(&[2]));
    let y = tape.linear(zero, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 1.0]);

    let bad = tape.constant(Tensor::zeros(&[3]));
    assert!(tape.linear(bad, w, Some(b)).is_err());
}

#[test]
fn activation_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    let z = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(s).item(), 0.5);
    for c in [-300.0, 0.0, 7.5, 1e3] {
        let x = tape.constant(t(&[3], &[c, c, c]));
        let s = tape.softmax(x);
        assert_close(tape.value(s).data(), &[1.0 / 3.0; 3], 1e-15);
    }
}

#[test]
fn mean_time_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 2, 2], &[1.0, 3.0, 5.0, 7.0]));
    let m = tape.mean_time(x).unwrap();
    assert_eq!(tape.value(m).data(), &[3.0, 5.0]);
    let one = tape.constant(t(&[1, 1, 3], &[4.0, 5.0, 6.0]));
    let m = tape.mean_time(one).unwrap();
    assert_eq!(tape.value(m).data(), &[4.0, 5.0, 6.0]);
    let c = tape.constant(Tensor::full(&[2, 7, 3], 1.25));
    let m = tape.mean_time(c).unwrap();
    assert!(tape.value(m).data().iter().all(|&v| (v - 1.25).abs() < 1e-15));
}

#[test]
fn pairwise_distance_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[2], &[3.0, 4.0]));
    let y = tape.constant(t(&[2], &[0.0, 0.0]));
    let d = tape.pairwise_distance(x, y, 2.0).unwrap();
    assert_eq!(tape.value(d).item(), 5.0);
    let same = tape.pairwise_distance(x, x, 2.0).unwrap();
    assert_eq!(tape.value(same).item(), 0.0);
    tape.backward(same).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);

    let a = tape.constant(t(&[1], &[1.0]));
    let b = tape.constant(t(&[1], &[0.0]));
    let d = tape.pairwise_distance(a, b, 1.0).unwrap();
    assert_eq!(tape.value(d).item(), 1.0);
}

#[test]
fn backward_examples() {
    // loss = sum(w * x) → grad(w) = x
    let mut tape = Tape::<f64>::new();
    let w = tape.param(t(&[3], &[0.3, -0.2, 0.9]));
    let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let p = tape.mul(w, x).unwrap();
    let l = tape.sum(p);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[1.0, 2.0, 3.0]);
    assert!(tape.grad(x).is_none());

    // loss = sigmoid(0 * w)
    let mut tape = Tape::<f64>::new();
    let w = tape.param(Tensor::scalar(1.7));
    let z = tape.scale(w, 0.0);
    let s = tape.sigmoid(z);
    tape.backward(s).unwrap();
    assert_eq!(tape.value(s).item(), 0.5);
    assert_eq!(tape.grad(w).unwrap(), &[0.0]);

    // loss = w + w
    let mut tape = Tape::<f64>::new();
    let w = tape.param(Tensor::scalar(4.0));
    let l = tape.add(w, w).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[2.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(Tensor::zeros(&[2]));
    let r = tape.relu(w);
    assert!(matches!(tape.backward(r), Err(Error::Usage(_))));
}

#[test]
fn backward_is_bit_reproducible() {
    let run = || {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(random(&[2, 3, 6], 21).cast());
        let w = tape.param(random(&[4, 3, 3], 22).cast());
        let y = tape.conv1d(x, w, None, 2).unwrap();
        let y = tape.transpose_last2(y).unwrap();
        let a = tape.attention(y, y, y, 2).unwrap();
        let s = tape.softmax(a);
        let l = tape.sum(s);
        tape.backward(l).unwrap();
        (tape.grad(x).unwrap().to_vec(), tape.grad(w).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    assert!(a.0.iter().zip(&b.0).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(a.1.iter().zip(&b.1).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn gradcheck_linear_and_relu() {
    let r = gradient_check(
        &[random(&[3, 3], 1), random(&[3, 3], 2), random(&[3], 3)],
        |tape, v| {
            let y = tape.linear(v[0], v[1], Some(v[2]))?;
            project(tape, y, 4)
        },
        1e-5,
    )
    .unwrap();
    assert!(r.passes(TOL), "{r:?}");

    // keep relu inputs away from the kink
    let mut x = random(&[4, 5], 7);
    for v in x.data_mut() {
        if v.abs() < 0.1 {
            *v += 0.2f64.copysign(*v);
        }
    }
    let r = gradient_check(
        &[x],
        |tape, v| {
            let y = tape.relu(v[0]);
            project(tape, y, 8)
        },
        1e-5,
    )
    .unwrap();
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn gradcheck_every_op() {
    type Case = (&'static str, Vec<Tensor<f64>>, fn(&mut Tape<f64>, &[Var]) -> Result<Var>);
    let cases: Vec<Case> = vec![
        ("add", vec![random(&[2, 3], 1), random(&[2, 3], 2)], |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, 9)
        }),
        ("sub", vec![random(&[2, 3], 1), random(&[2, 3], 2)], |t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y, 9)
        }),
        ("mul", vec![random(&[2, 3], 1), random(&[2, 3], 2)], |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, 9)
        }),
        ("add_broadcast", vec![random(&[2, 3, 4], 1), random(&[3, 4], 2)], |t, v| {
            let y = t.add_broadcast(v[0], v[1])?;
            project(t, y, 9)
        }),
        ("scale+add_scalar+mean", vec![random(&[5], 1)], |t, v| {
            let y = t.scale(v[0], -1.5);
            let y = t.add_scalar(y, 0.25);
            let y = t.mul(y, y)?;
            Ok(t.mean(y))
        }),
        ("sigmoid", vec![random(&[3, 4], 3)], |t, v| {
            let y = t.scale(v[0], 4.0);
            let y = t.sigmoid(y);
            project(t, y, 9)
        }),
        ("softmax", vec![random(&[3, 4], 3)], |t, v| {
            let y = t.scale(v[0], 3.0);
            let y = t.softmax(y);
            project(t, y, 9)
        }),
        ("conv1d k3 s1", vec![random(&[2, 3, 7], 1), random(&[4, 3, 3], 2), random(&[4], 3)], |t, v| {
            let y = t.conv1d(v[0], v[1], Some(v[2]), 1)?;
            project(t, y, 9)
        }),
        ("conv1d k3 s2", vec![random(&[2, 3, 7], 1), random(&[4, 3, 3], 2), random(&[4], 3)], |t, v| {
            let y = t.conv1d(v[0], v[1], Some(v[2]), 2)?;
            project(t, y, 9)
        }),
        ("conv1d k1 s2", vec![random(&[2, 3, 8], 1), random(&[5, 3, 1], 2)], |t, v| {
            let y = t.conv1d(v[0], v[1], None, 2)?;
            project(t, y, 9)
        }),
        ("batchnorm train", vec![random(&[3, 2, 5], 1), random(&[2], 2), random(&[2], 3)], |t, v| {
            let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            project(t, y, 9)
        }),
        ("batchnorm eval", vec![random(&[3, 2, 5], 1), random(&[2], 2), random(&[2], 3)], |t, v| {
            let y = t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5)?;
            project(t, y, 9)
        }),
        ("transpose", vec![random(&[2, 3, 4], 1)], |t, v| {
            let y = t.transpose_last2(v[0])?;
            project(t, y, 9)
        }),
        ("mean_time", vec![random(&[2, 3, 4], 1)], |t, v| {
            let y = t.mean_time(v[0])?;
            project(t, y, 9)
        }),
        ("attention 1 head", vec![random(&[2, 4, 4], 1), random(&[2, 4, 4], 2), random(&[2, 4, 4], 3)], |t, v| {
            let y = t.attention(v[0], v[1], v[2], 1)?;
            project(t, y, 9)
        }),
        ("attention 2 heads", vec![random(&[2, 5, 4], 1), random(&[2, 5, 4], 2), random(&[2, 5, 4], 3)], |t, v| {
            let y = t.attention(v[0], v[1], v[2], 2)?;
            project(t, y, 9)
        }),
        ("pairwise p2", vec![random(&[3, 4], 1), random(&[3, 4], 2)], |t, v| {
            let y = t.pairwise_distance(v[0], v[1], 2.0)?;
            project(t, y, 9)
        }),
        ("pairwise p3", vec![random(&[3, 4], 1), random(&[3, 4], 2)], |t, v| {
            let y = t.pairwise_distance(v[0], v[1], 3.0)?;
            project(t, y, 9)
        }),
        ("select_rows", vec![random(&[4, 3], 1)], |t, v| {
            let y = t.select_rows(v[0], &[2, 0, 2, 3])?;
            project(t, y, 9)
        }),
        ("l2_normalize", vec![random(&[3, 4], 1)], |t, v| {
            let y = t.l2_normalize_rows(v[0])?;
            project(t, y, 9)
        }),
        ("bce_with_logits", vec![random(&[3, 4], 1)], |t, v| {
            let y = t.scale(v[0], 5.0);
            let targets = Tensor::from_f64(&[3, 4], &[1., 0., 0., 0., 0., 0., 1., 0., 0., 1., 0., 0.]);
            t.bce_with_logits(y, &targets, Some(&[1.0, 0.5, 2.0]))
        }),
    ];
    for (name, inputs, f) in cases {
        let r = gradient_check(&inputs, f, 1e-5).unwrap();
        assert!(r.passes(1e-6), "{name}: {r:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-50.0f64..50.0, 1..40), width in 1usize..8) {
        let n = vals.len() / width * width;
        prop_assume!(n > 0);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(&[n / width, width], vals[..n].to_vec()));
        let s = tape.softmax(x);
        for row in tape.value(s).data().chunks(width) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn identity_center_kernel_is_identity(vals in proptest::collection::vec(-10.0f64..10.0, 3..30)) {
        let n = vals.len();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(&[1, 1, n], vals.clone()));
        let w = tape.constant(Tensor::from_f64(&[1, 1, 3], &[0.0, 1.0, 0.0]));
        let y = tape.conv1d(x, w, None, 1).unwrap();
        prop_assert_eq!(tape.value(y).data(), vals.as_slice());
    }
}
