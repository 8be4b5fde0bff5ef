use approx::assert_abs_diff_eq;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::error::Error;

pub(crate) fn randn(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Independent index-triple-loop matmul oracle.
fn matmul_oracle(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, k, p) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        for j in 0..p {
            let mut acc = 0.0;
            for kk in 0..k {
                acc += a.data()[i * k + kk] * b.data()[kk * p + j];
            }
            out[i * p + j] = acc;
        }
    }
    out
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let i2 = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let m = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let out = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_unit_row_selection() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
    let b = g.constant(Tensor::from_rows(&[vec![2.0], vec![3.0]]).unwrap());
    let out = g.matmul(a, b).unwrap();
    assert_eq!(g.value(out).data(), &[2.0]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = randn(vec![3, 4], &mut rng);
    let b = randn(vec![4, 2], &mut rng);
    let expect = matmul_oracle(&a, &b);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a), g.constant(b));
    let out = g.matmul(av, bv).unwrap();
    for (got, want) in g.value(out).data().iter().zip(&expect) {
        assert_abs_diff_eq!(got, want, epsilon = 1e-12);
    }
}

#[test]
fn matmul_shape_mismatch_errors() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn sigmoid_values_and_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(0.0).with_grad());
    let y = g.sigmoid(x).unwrap();
    assert_eq!(g.value(y).item(), 0.5);
    g.backward(y, &Tensor::scalar(1.0)).unwrap();
    assert_abs_diff_eq!(g.grad(x).unwrap().item(), 0.25, epsilon = 1e-15);

    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(40.0));
    let y = g.sigmoid(x).unwrap();
    assert_abs_diff_eq!(g.value(y).item(), 1.0, epsilon = 1e-15);

    // Stable far into the tails.
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2], vec![-700.0, 700.0]).unwrap());
    let y = g.sigmoid(x).unwrap();
    assert!(g.value(y).is_all_finite());
}

#[test]
fn softmax_rows_basics() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![1000.0, 0.0]]).unwrap());
    let y = g.softmax_rows(x).unwrap();
    assert_abs_diff_eq!(g.value(y).get2(0, 0), 0.5, epsilon = 1e-15);
    assert_abs_diff_eq!(g.value(y).get2(0, 1), 0.5, epsilon = 1e-15);
    assert_abs_diff_eq!(g.value(y).get2(1, 0), 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(g.value(y).get2(1, 1), 0.0, epsilon = 1e-12);
}

#[test]
fn softmax_shift_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = randn(vec![4, 6], &mut rng);
    let shifted = Tensor::new(
        vec![4, 6],
        x.data().iter().map(|v| v + 13.25).collect(),
    )
    .unwrap();
    let mut g = Graph::new();
    let (a, b) = (g.constant(x), g.constant(shifted));
    let ya = g.softmax_rows(a).unwrap();
    let yb = g.softmax_rows(b).unwrap();
    for (u, v) in g.value(ya).data().iter().zip(g.value(yb).data()) {
        assert_abs_diff_eq!(u, v, epsilon = 1e-12);
    }
}

#[test]
fn reduce_max_rows_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![1.0, 5.0, 3.0]]).unwrap());
    let y = g.reduce_max_rows(x).unwrap();
    assert_eq!(g.value(y).data(), &[5.0]);

    let single = g.constant(Tensor::from_rows(&[vec![2.0], vec![-1.0]]).unwrap());
    let y = g.reduce_max_rows(single).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, -1.0]);

    let empty = g.constant(Tensor::new(vec![2, 0], vec![]).unwrap());
    assert!(matches!(g.reduce_max_rows(empty), Err(Error::EmptyReduction { .. })));
}

#[test]
fn reduce_max_gradient_is_one_hot_at_argmax() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_rows(&[vec![1.0, 5.0, 3.0], vec![7.0, 2.0, 7.0]]).unwrap().with_grad());
    let y = g.reduce_max_rows(x).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s, &Tensor::scalar(1.0)).unwrap();
    // First index wins ties.
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);

    // Finite differences agree entry-wise at a tie-free random point.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = randn(vec![3, 4], &mut rng);
    let err = grad_check(
        |g, vars| {
            let y = g.reduce_max_rows(vars[0])?;
            g.sum(y)
        },
        &[p],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "err = {err}");
}

#[test]
fn backward_identity_and_square() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0).with_grad());
    g.backward(x, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 1.0);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
    let sq = g.mul(x, x).unwrap();
    let y = g.sum(sq).unwrap();
    g.backward(y, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_bad_seed_and_double_run() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
    let y = g.sum(x).unwrap();
    assert!(matches!(
        g.backward(y, &Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()),
        Err(Error::SeedShape { .. })
    ));
    g.backward(y, &Tensor::scalar(1.0)).unwrap();
    assert!(matches!(g.backward(y, &Tensor::scalar(1.0)), Err(Error::BackwardAlreadyRun)));
    g.reset_grads();
    g.backward(y, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn off_path_leaves_get_zero_gradients() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(1.0).with_grad());
    let unused = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad());
    let y = g.sigmoid(x).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(g.grad(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn grad_check_sum_sigmoid_and_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = randn(vec![3, 3], &mut rng);
    let err = grad_check(
        |g, vars| {
            let y = g.sigmoid(vars[0])?;
            g.sum(y)
        },
        &[p],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "err = {err}");

    let p = randn(vec![2, 2], &mut rng);
    let err = grad_check(
        |g, vars| {
            let _ = vars;
            let c = g.constant(Tensor::scalar(4.0));
            g.sum(c)
        },
        &[p],
        1e-5,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn batchnorm_eval_identity_stats() {
    let mut st = BatchNormState::new(2);
    st.mode = BnMode::Eval;
    let x = Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.5]]).unwrap();
    let y = batchnorm(&x, &mut st).unwrap();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-4);
    }
}

#[test]
fn batchnorm_train_two_point_standardization() {
    let mut st = BatchNormState::new(1);
    let x = Tensor::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
    let y = batchnorm(&x, &mut st).unwrap();
    assert_abs_diff_eq!(y.get2(0, 0), -1.0, epsilon = 1e-4);
    assert_abs_diff_eq!(y.get2(1, 0), 1.0, epsilon = 1e-4);
    // Running stats moved toward the batch moments.
    assert_abs_diff_eq!(st.running_mean[0], 0.1 * 2.0, epsilon = 1e-12);
    assert_abs_diff_eq!(st.running_var[0], 0.9 + 0.1 * 2.0, epsilon = 1e-12);
}

#[test]
fn batchnorm_train_output_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = randn(vec![64, 5], &mut rng);
    let mut st = BatchNormState::new(5);
    let y = batchnorm(&x, &mut st).unwrap();
    let (n, d) = (y.rows(), y.cols());
    for j in 0..d {
        let mean: f64 = (0..n).map(|i| y.get2(i, j)).sum::<f64>() / n as f64;
        let var: f64 = (0..n).map(|i| (y.get2(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-4);
    }
}

#[test]
fn batchnorm_train_needs_two_rows() {
    let mut st = BatchNormState::new(2);
    let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
    assert!(matches!(batchnorm(&x, &mut st), Err(Error::InsufficientBatch { n: 1 })));
}

#[test]
fn batchnorm_graph_gradcheck_train_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for mode in [BnMode::Train, BnMode::Eval] {
        let mut st = BatchNormState::new(3);
        st.mode = mode;
        st.running_mean = vec![0.2, -0.1, 0.4];
        st.running_var = vec![1.3, 0.7, 2.0];
        let x = randn(vec![6, 3], &mut rng);
        let gamma = randn(vec![3], &mut rng);
        let beta = randn(vec![3], &mut rng);
        let err = grad_check(
            |g, vars| {
                let (y, _) = g.batchnorm(vars[0], vars[1], vars[2], &st)?;
                // Square to make the scalar depend nonlinearly on the output.
                let sq = g.mul(y, y)?;
                g.sum(sq)
            },
            &[x, gamma, beta],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "mode {mode:?}: err = {err}");
    }
}

#[test]
fn conv3d_and_zpool_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let input = randn(vec![4, 4, 3, 2], &mut rng);
    let weight = randn(vec![3, 3, 3, 2, 2], &mut rng);
    let bias = randn(vec![2], &mut rng);
    let err = grad_check(
        |g, vars| {
            let y = g.conv3d(vars[0], vars[1], vars[2], [1, 1, 1])?;
            let p = g.z_pool_max(y)?;
            let flat = g.reshape(p, &[16, 2])?;
            let sq = g.mul(flat, flat)?;
            g.sum(sq)
        },
        &[input, weight, bias],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "err = {err}");
}

#[test]
fn strided_conv3d_output_shape() {
    let mut g = Graph::new();
    let input = g.constant(Tensor::zeros(vec![8, 8, 4, 1]));
    let weight = g.constant(Tensor::zeros(vec![3, 3, 3, 1, 5]));
    let bias = g.constant(Tensor::new(vec![5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
    let y = g.conv3d(input, weight, bias, [2, 2, 1]).unwrap();
    assert_eq!(g.value(y).shape(), &[4, 4, 4, 5]);
    // Zero weights: output is the broadcast bias.
    assert_eq!(&g.value(y).data()[..5], &[1.0, 2.0, 3.0, 4.0, 5.0]);
}

#[test]
fn loss_ops_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let logits = randn(vec![4, 3], &mut rng);
    let target = Tensor::new(
        vec![4, 3],
        vec![0.0, 1.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.3, 0.0],
    )
    .unwrap();
    let t = target.clone();
    let err = grad_check(
        move |g, vars| g.bce_with_logits_mean(vars[0], &t),
        &[logits.clone()],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "bce err = {err}");

    let rows = Tensor::new(
        vec![4, 3],
        vec![0.0, 1.0, 0.0, 0.25, 0.75, 0.0, 0.0, 0.0, 0.0, 0.2, 0.3, 0.5],
    )
    .unwrap();
    let active = vec![true, true, false, true];
    let err = grad_check(
        move |g, vars| g.softmax_ce_mean_rows(vars[0], &rows, &active),
        &[logits.clone()],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "softmax-ce err = {err}");

    let pred = randn(vec![2, 4], &mut rng);
    let tgt = randn(vec![2, 4], &mut rng);
    let err = grad_check(move |g, vars| g.l1_mean(vars[0], &tgt), &[pred], 1e-5).unwrap();
    assert!(err < 1e-6, "l1 err = {err}");
}

#[test]
fn composite_ops_gradcheck_ten_points() {
    // One composite touching matmul, transpose, row ops, softmax, relu,
    // layernorm, gather/assemble and the scalar affine ops.
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = randn(vec![4, 3], &mut rng);
        let w = randn(vec![3, 3], &mut rng);
        let bias = randn(vec![3], &mut rng);
        let s = randn(vec![4], &mut rng);
        let alpha = randn(vec![1], &mut rng);
        let err = grad_check(
            |g, vars| {
                let (x, w, bias, s, alpha) = (vars[0], vars[1], vars[2], vars[3], vars[4]);
                let h = g.matmul(x, w)?;
                let h = g.add_row_bias(h, bias)?;
                let h = g.relu(h)?;
                let h = g.row_scale(h, s)?;
                let wt = g.transpose(w)?;
                let h2 = g.matmul(h, wt)?;
                let h2 = g.layernorm_rows(h2, 1e-5)?;
                let sm = g.softmax_rows(h2)?;
                let top = g.gather_rows(sm, &[1, 3])?;
                let bottom = g.gather_rows(sm, &[0, 2])?;
                let mixed = g.assemble_rows(&[top, bottom], &[vec![1, 3], vec![0, 2]], 4)?;
                let scaled = g.mul_scalar_var(mixed, alpha)?;
                let shifted = g.add_scalar_var(scaled, alpha)?;
                let sq = g.mul(shifted, shifted)?;
                g.sum(sq)
            },
            &[x, w, bias, s, alpha],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: err = {err}");
    }
}

#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = randn(vec![rows, cols], &mut rng);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let y = g.softmax_rows(xv).unwrap();
            for i in 0..rows {
                let s: f64 = (0..cols).map(|j| g.value(y).get2(i, j)).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn batchnorm_train_zero_mean(rows in 2usize..12, cols in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = randn(vec![rows, cols], &mut rng);
            let mut st = BatchNormState::new(cols);
            let y = batchnorm(&x, &mut st).unwrap();
            for j in 0..cols {
                let mean: f64 = (0..rows).map(|i| y.get2(i, j)).sum::<f64>() / rows as f64;
                prop_assert!(mean.abs() < 1e-9);
            }
        }
    }
}
