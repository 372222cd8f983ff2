use mvaformer_core::tensor::gradcheck::grad_check;
use mvaformer_core::{Elem, Tape, Tensor};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn matmul_identity() {
    let tape = Tape::<f64>::new();
    let a = tape.leaf(&t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let id = tape.leaf(&t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let c = a.matmul(&id).unwrap();
    assert_eq!(c.value().data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_permutation() {
    let tape = Tape::<f64>::new();
    let a = tape.leaf(&t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = tape.leaf(&t64(&[2, 2], &[0.0, 1.0, 1.0, 0.0]));
    let c = a.matmul(&p).unwrap();
    assert_eq!(c.value().data(), &[2.0, 1.0, 4.0, 3.0]);
}

#[test]
fn matmul_shape_mismatch_names_shapes() {
    let tape = Tape::<f64>::new();
    let a = tape.leaf(&Tensor::zeros(vec![2, 3]));
    let b = tape.leaf(&Tensor::zeros(vec![2, 3]));
    let err = a.matmul(&b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "error should name shapes: {err}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random_tensor(&[3, 3], &mut rng);
    let b = random_tensor(&[3, 3], &mut rng);
    let err = grad_check(|_, v| v[0].matmul(&v[1]), &[a, b], 1e-5).unwrap();
    assert!(err < 1e-5, "matmul grad error {err}");
}

#[test]
fn matmul_batched_broadcast() {
    // [2,2,3] x [3,2] broadcast over leading 2
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random_tensor(&[2, 2, 3], &mut rng);
    let b = random_tensor(&[3, 2], &mut rng);
    let tape = Tape::<f64>::new();
    let va = tape.leaf(&a);
    let vb = tape.leaf(&b);
    let c = va.matmul(&vb).unwrap();
    assert_eq!(c.shape(), &[2, 2, 2]);
    // each batch slice equals the plain 2-D product
    for batch in 0..2 {
        let s = va.slice(0, batch, 1).unwrap().reshape(vec![2, 3]).unwrap();
        let expect = s.matmul(&vb).unwrap().value();
        let got = c.value();
        for i in 0..4 {
            assert!((got.data()[batch * 4 + i] - expect.data()[i]).abs() < 1e-12);
        }
    }
    let err = grad_check(|_, v| v[0].matmul(&v[1]), &[a, b], 1e-5).unwrap();
    assert!(err < 1e-5, "batched matmul grad error {err}");
}

#[test]
fn masked_softmax_single_unmasked_entry() {
    let tape = Tape::<f64>::new();
    let logits = tape.leaf(&t64(&[2], &[0.0, 0.0]));
    let mask = t64(&[2], &[0.0, f64::mask_value()]);
    let sm = logits.masked_softmax_lastdim(Some(&mask)).unwrap();
    assert!(sm.all_masked_rows.is_empty());
    assert_eq!(sm.out.value().data(), &[1.0, 0.0]);
}

#[test]
fn softmax_uniform() {
    let tape = Tape::<f64>::new();
    let logits = tape.leaf(&t64(&[4], &[0.0; 4]));
    let sm = logits.masked_softmax_lastdim(None).unwrap();
    assert_eq!(sm.out.value().data(), &[0.25; 4]);
}

#[test]
fn softmax_scalar_oracle() {
    // frozen from the scalar oracle: exp(x_i) / sum_j exp(x_j) at [1,2,3]
    let tape = Tape::<f64>::new();
    let logits = tape.leaf(&t64(&[3], &[1.0, 2.0, 3.0]));
    let sm = logits.masked_softmax_lastdim(None).unwrap();
    let expect = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
    for (got, want) in sm.out.value().data().iter().zip(expect) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn softmax_all_masked_row_flagged_and_zero() {
    let tape = Tape::<f64>::new();
    let logits = tape.leaf(&t64(&[2, 2], &[0.5, 0.1, 0.2, 0.3]));
    let mask = t64(
        &[2, 2],
        &[f64::mask_value(), f64::mask_value(), 0.0, 0.0],
    );
    let sm = logits.masked_softmax_lastdim(Some(&mask)).unwrap();
    assert_eq!(sm.all_masked_rows, vec![0]);
    let v = sm.out.value();
    assert_eq!(&v.data()[..2], &[0.0, 0.0]);
    assert!((v.data()[2] + v.data()[3] - 1.0).abs() < 1e-12);
}

#[test]
fn masked_softmax_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_tensor(&[3, 4], &mut rng);
    let mask = t64(
        &[4],
        &[0.0, f64::mask_value(), 0.0, 0.0],
    );
    // weight the output so the gradient is not trivially uniform
    let w = random_tensor(&[3, 4], &mut rng);
    let err = grad_check(
        move |tape, v| {
            let sm = v[0].masked_softmax_lastdim(Some(&mask))?;
            sm.out.mul(&tape.leaf(&w))
        },
        &[x],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-5, "softmax grad error {err}");
}

#[test]
fn layer_norm_constant_input() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(&t64(&[4], &[1.0; 4]));
    let gamma = tape.leaf(&t64(&[4], &[1.0; 4]));
    let beta = tape.leaf(&t64(&[4], &[0.0; 4]));
    let y = x.layer_norm(&gamma, &beta, 1e-12).unwrap();
    for &v in y.value().data() {
        assert!(v.abs() < 1e-5);
    }
}

#[test]
fn layer_norm_already_normalized() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(&t64(&[2], &[-1.0, 1.0]));
    let gamma = tape.leaf(&t64(&[2], &[1.0; 2]));
    let beta = tape.leaf(&t64(&[2], &[0.0; 2]));
    let y = x.layer_norm(&gamma, &beta, 1e-14).unwrap();
    assert!((y.value().data()[0] + 1.0).abs() < 1e-6);
    assert!((y.value().data()[1] - 1.0).abs() < 1e-6);
}

#[test]
fn layer_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random_tensor(&[2, 8], &mut rng);
    let gamma = random_tensor(&[8], &mut rng);
    let beta = random_tensor(&[8], &mut rng);
    let w = random_tensor(&[2, 8], &mut rng);
    let err = grad_check(
        move |tape, v| v[0].layer_norm(&v[1], &v[2], 1e-6)?.mul(&tape.leaf(&w)),
        &[x, gamma, beta],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "layer_norm grad error {err}");
}

#[test]
fn elementwise_trivia() {
    let tape = Tape::<f64>::new();
    let z = tape.leaf(&t64(&[1], &[0.0]));
    assert_eq!(z.sigmoid().value().data(), &[0.5]);

    let m = tape.leaf(&t64(&[2, 2], &[1.0, -2.0, 0.0, 5.0]));
    assert_eq!(m.max_axis(0).unwrap().value().data(), &[1.0, 5.0]);

    // frozen from the erf oracle: 0.5 * (1 + erf(1/sqrt(2)))
    let one = tape.leaf(&t64(&[1], &[1.0]));
    assert!((one.gelu().value().data()[0] - 0.8413447460685429).abs() < 1e-10);
}

#[test]
fn max_axis_ties_route_to_first_index() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(&t64(&[3], &[2.0, 2.0, 1.0]));
    let y = x.max_axis(0).unwrap();
    let loss = y.sum_all();
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = random_tensor(&[2, 5], &mut rng);
    for (name, f) in [
        ("gelu", 0usize),
        ("relu", 1),
        ("sigmoid", 2),
        ("mean_axis", 3),
        ("max_axis", 4),
    ] {
        let err = grad_check(
            move |_, v| {
                Ok(match f {
                    0 => v[0].gelu(),
                    1 => v[0].relu(),
                    2 => v[0].sigmoid(),
                    3 => v[0].mean_axis(1)?,
                    _ => v[0].max_axis(1)?,
                })
            },
            &[x.clone()],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{name} grad error {err}");
    }
}

#[test]
fn backward_sum_gives_ones() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(&t64(&[3], &[4.0, 5.0, 6.0]));
    let loss = x.sum_all();
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_quadratic() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(&t64(&[3], &[1.0, 2.0, 3.0]));
    let loss = x.mul(&x).unwrap().sum_all();
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_requires_scalar_loss() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(&t64(&[3], &[1.0, 2.0, 3.0]));
    assert!(tape.backward(&x).is_err());
}

#[test]
fn backward_unreachable_parameter_has_no_grad() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(&t64(&[2], &[1.0, 2.0]));
    let unused = tape.leaf(&t64(&[2], &[3.0, 4.0]));
    let loss = x.sum_all();
    tape.backward(&loss).unwrap();
    assert!(unused.grad().is_none());
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let tape = Tape::<f64>::new();
        let a = tape.leaf(&random_tensor(&[4, 4], &mut rng));
        let b = tape.leaf(&random_tensor(&[4, 4], &mut rng));
        let y = a.matmul(&b).unwrap().gelu().sum_all();
        tape.backward(&y).unwrap();
        (a.grad().unwrap(), b.grad().unwrap())
    };
    let (g1a, g1b) = run();
    let (g2a, g2b) = run();
    assert_eq!(g1a.data(), g2a.data());
    assert_eq!(g1b.data(), g2b.data());
}

#[test]
fn grad_check_identity_is_exact() {
    let x = t64(&[4], &[0.3, -0.2, 0.7, 1.1]);
    let err = grad_check(|_, v| Ok(v[0].clone()), &[x], 1e-5).unwrap();
    assert!(err < 1e-9, "identity grad error {err}");
}

#[test]
fn grad_check_matmul_chain_depth_3() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let a = random_tensor(&[3, 3], &mut rng);
    let b = random_tensor(&[3, 3], &mut rng);
    let c = random_tensor(&[3, 3], &mut rng);
    let d = random_tensor(&[3, 3], &mut rng);
    let err = grad_check(
        |_, v| v[0].matmul(&v[1])?.matmul(&v[2])?.matmul(&v[3]),
        &[a, b, c, d],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "chain grad error {err}");
}

#[test]
fn concat_slice_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = random_tensor(&[3, 4], &mut rng);
    let tape = Tape::<f64>::new();
    let v = tape.leaf(&x);
    let top = v.slice(0, 0, 1).unwrap();
    let rest = v.slice(0, 1, 2).unwrap();
    let back = tape.concat(&[&top, &rest], 0).unwrap();
    assert_eq!(back.value().data(), x.data());

    let left = v.slice(1, 0, 2).unwrap();
    let right = v.slice(1, 2, 2).unwrap();
    let back2 = tape.concat(&[&left, &right], 1).unwrap();
    assert_eq!(back2.value().data(), x.data());
}

#[test]
fn concat_and_slice_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let a = random_tensor(&[2, 3], &mut rng);
    let b = random_tensor(&[2, 3], &mut rng);
    let w = random_tensor(&[4, 3], &mut rng);
    let err = grad_check(
        move |tape, v| {
            let cat = tape.concat(&[&v[0], &v[1]], 0)?;
            let s = cat.slice(0, 1, 3)?; // crosses the seam
            cat.mul(&tape.leaf(&w))?.sum_all().add(&s.sum_all())
        },
        &[a, b],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "concat/slice grad error {err}");
}
