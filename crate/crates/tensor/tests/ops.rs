use af_tensor::{Graph, Tensor, TensorError};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(&[i, p]) * b.at(&[p, j]);
            }
        }
    }
    Tensor::from_vec(&[m, n], out).unwrap()
}

#[test]
fn matmul_examples() {
    let g = Graph::<f64>::new();
    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let eye = g.constant(Tensor::eye(2));
    let av = g.constant(a.clone());
    let out = g.matmul(eye, av).unwrap();
    assert_eq!(*g.value(out), a);

    let ones = g.constant(t(&[2, 1], &[1.0, 1.0]));
    let out = g.matmul(av, ones).unwrap();
    assert_eq!(g.value(out).data(), &[3.0, 7.0]);

    let zero = g.constant(Tensor::zeros(&[3, 2]));
    let out = g.matmul(zero, av).unwrap();
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn batched_matmul_matches_per_batch() {
    let g = Graph::<f64>::new();
    let a: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
    let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect();
    let av = g.constant(t(&[2, 2, 3], &a));
    let bv = g.constant(t(&[2, 3, 2], &b));
    let out = g.matmul(av, bv).unwrap();
    for batch in 0..2 {
        let a_b = t(&[2, 3], &a[batch * 6..batch * 6 + 6]);
        let b_b = t(&[3, 2], &b[batch * 6..batch * 6 + 6]);
        let expect = naive_matmul(&a_b, &b_b);
        for (a, b) in g.value(out).data()[batch * 4..batch * 4 + 4].iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_examples() {
    let g = Graph::<f64>::new();
    let x = g.constant(t(&[3, 3], &[0.0, 0.0, 0.0, 1000.0, 0.0, -1000.0, 1f64.ln(), 2f64.ln(), 3f64.ln()]));
    let p = g.softmax_rows(x);
    let v = g.value(p);
    for &x in v.row(0) {
        assert!((x - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!((v.row(1)[0] - 1.0).abs() < 1e-15 && v.row(1)[1] < 1e-300);
    for (i, &x) in v.row(2).iter().enumerate() {
        assert!((x - (i + 1) as f64 / 6.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_fully_masked_row_is_zero() {
    let g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(&[1, 4], f32::NEG_INFINITY));
    let p = g.softmax_rows(x);
    assert!(g.value(p).data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_examples() {
    let g = Graph::<f64>::new();
    let gain = g.constant(Tensor::ones(&[2]));
    let bias = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(t(&[2, 2], &[3.0, 3.0, 1.0, -1.0]));
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    let v = g.value(y);
    assert_eq!(v.row(0), &[0.0, 0.0]);
    assert!((v.row(1)[0] - 1.0).abs() < 1e-9 && (v.row(1)[1] + 1.0).abs() < 1e-9);
    drop(v);

    let zero_gain = g.constant(Tensor::zeros(&[2]));
    let b = g.constant(t(&[2], &[0.5, -2.0]));
    let y = g.layer_norm(x, zero_gain, b, 1e-5).unwrap();
    assert_eq!(g.value(y).row(0), &[0.5, -2.0]);
    assert_eq!(g.value(y).row(1), &[0.5, -2.0]);
}

#[test]
fn activation_examples() {
    let g = Graph::<f64>::new();
    let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    assert_eq!(g.value(g.relu(x)).data(), &[0.0, 0.0, 2.0]);
    assert_eq!(g.value(g.sigmoid(x)).data()[1], 0.5);
    assert_eq!(g.value(g.gelu(x)).data()[1], 0.0);
    // tanh-approximate GELU(2) = 1.9545976...
    assert!((g.value(g.gelu(x)).data()[2] - 1.954_597_694_087_775).abs() < 1e-12);
}

#[test]
fn conv1d_identity_kernel() {
    let g = Graph::<f64>::new();
    let xs = t(&[4, 2], &[1.0, -1.0, 2.0, 0.5, 3.0, 0.0, -4.0, 9.0]);
    let x = g.constant(xs.clone());
    let w = g.constant(Tensor::eye(2).reshape(&[1, 2, 2]).unwrap());
    let y = g.conv1d(x, w, None, 1, false, &[true; 4]).unwrap();
    assert_eq!(*g.value(y), xs);
}

#[test]
fn conv1d_hand_example_and_lengths() {
    let g = Graph::<f64>::new();
    let x = g.constant(t(&[3, 1], &[1.0, 2.0, 3.0]));
    let w = g.constant(Tensor::ones(&[3, 1, 1]));
    let y = g.conv1d(x, w, None, 1, false, &[true; 3]).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 6.0, 5.0]);

    let x = g.constant(Tensor::ones(&[6, 2]));
    let w = g.constant(Tensor::ones(&[3, 2, 4]));
    let y = g.conv1d(x, w, None, 2, false, &[true; 6]).unwrap();
    assert_eq!(g.shape(y), vec![3, 4]);
    let dw = g.constant(Tensor::ones(&[3, 1, 2]));
    let y = g.conv1d(x, dw, None, 2, true, &[true; 6]).unwrap();
    assert_eq!(g.shape(y), vec![3, 2]);
}

#[test]
fn conv1d_rejects_even_kernel() {
    let g = Graph::<f32>::new();
    let x = g.constant(Tensor::ones(&[4, 1]));
    let w = g.constant(Tensor::ones(&[2, 1, 1]));
    assert!(matches!(
        g.conv1d(x, w, None, 1, false, &[true; 4]),
        Err(TensorError::InvalidArgument(_))
    ));
}

#[test]
fn conv1d_masked_inputs_contribute_nothing() {
    let g = Graph::<f64>::new();
    let x = g.constant(t(&[4, 1], &[1.0, 2.0, 100.0, 100.0]));
    let w = g.constant(Tensor::ones(&[3, 1, 1]));
    let y = g.conv1d(x, w, None, 1, false, &[true, true, false, false]).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 3.0, 0.0, 0.0]);
}

#[test]
fn backward_examples() {
    let g = Graph::<f64>::new();
    let x = g.leaf(t(&[3], &[1.0, -2.0, 5.0]));
    let loss = g.sum(x);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let g = Graph::<f64>::new();
    let x = g.leaf(t(&[2], &[1.0, 2.0]));
    let loss = g.sum(g.square(x));
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_requires_scalar_loss() {
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::ones(&[2]));
    let y = g.scale(x, 2.0);
    assert!(matches!(g.backward(y), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn backward_rejects_non_finite_loss() {
    let g = Graph::<f64>::new();
    let x = g.leaf(t(&[1], &[-1.0]));
    let y = g.sum(g.ln(x));
    assert!(matches!(g.backward(y), Err(TensorError::NonFiniteLoss(_))));
}

#[test]
fn broadcast_add_and_mul_gradients_reduce() {
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::ones(&[3, 2]));
    let b = g.leaf(t(&[2], &[2.0, 3.0]));
    let y = g.sum(g.mul(g.add(x, b).unwrap(), b).unwrap());
    let grads = g.backward(y).unwrap();
    // d/db sum((x + b) * b) = sum(x + 2b) over rows
    assert_eq!(grads.get(b).unwrap().data(), &[15.0, 21.0]);
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 3.0, 2.0, 3.0, 2.0, 3.0]);
}

proptest! {
    #[test]
    fn matmul_matches_naive(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let gen = |len: usize, s: u64| -> Vec<f64> {
            (0..len).map(|i| ((((i as u64 + 1) * 2654435761) ^ s) % 1000) as f64 / 250.0 - 2.0).collect()
        };
        let a = t(&[m, k], &gen(m * k, seed));
        let b = t(&[k, n], &gen(k * n, seed.rotate_left(7)));
        let g = Graph::new();
        let out = g.matmul(g.constant(a.clone()), g.constant(b.clone())).unwrap();
        let expect = naive_matmul(&a, &b);
        prop_assert!(g.value(out).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_permute(row in prop::collection::vec(-30.0f64..30.0, 1..12), rot in 0usize..12) {
        let n = row.len();
        let g = Graph::new();
        let p = g.softmax_rows(g.constant(t(&[1, n], &row)));
        let p = g.value(p).clone();
        prop_assert!((p.sum() - 1.0).abs() < 1e-6);
        prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let mut rotated = row.clone();
        rotated.rotate_left(rot % n);
        let q = g.softmax_rows(g.constant(t(&[1, n], &rotated)));
        let mut expect = p.data().to_vec();
        expect.rotate_left(rot % n);
        for (a, b) in g.value(q).data().iter().zip(&expect) {
            prop_assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn conv1d_valid_outputs_ignore_padding(
        valid in 1usize..20,
        extra in 0usize..20,
        stride in 1usize..3,
        seed in any::<u64>(),
    ) {
        let c = 3;
        let gen = |len: usize, s: u64| -> Vec<f32> {
            (0..len).map(|i| (((i as u64 * 7919) ^ s) % 997) as f32 / 400.0 - 1.0).collect()
        };
        let w = Tensor::<f32>::from_vec(&[3, c, 2], gen(3 * c * 2, seed)).unwrap();
        let base = gen(valid * c, seed.rotate_left(13));
        let run = |pad: usize, fill: f32| {
            let mut data = base.clone();
            data.extend(std::iter::repeat_n(fill, pad * c));
            let mask: Vec<bool> = (0..valid + pad).map(|i| i < valid).collect();
            let g = Graph::new();
            let y = g.conv1d(
                g.constant(Tensor::from_vec(&[valid + pad, c], data).unwrap()),
                g.constant(w.clone()),
                None,
                stride,
                false,
                &mask,
            ).unwrap();
            let v = g.value(y).clone();
            v
        };
        let short = run(0, 0.0);
        let long = run(extra, 123.0);
        let n_valid = valid.div_ceil(stride);
        for r in 0..n_valid {
            prop_assert_eq!(short.row(r), long.row(r));
        }
    }
}
