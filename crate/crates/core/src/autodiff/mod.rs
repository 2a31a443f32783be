//! Reverse-mode differentiation over dense tensors, plus the optimizer and
//! learning-rate schedule used by every training stage.

mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use gradcheck::{
    grad_check, grad_check_sampled, relative_error, GradCheckReport, REL_ERROR_FLOOR,
};
pub use graph::{Graph, Var};
pub use optim::{adamw_step, lr_schedule, AdamWConfig, AdamWState};
pub use tensor::{Scalar, Tensor};

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::error::Error;

    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, rng)
    }

    /// Fixed random readout so every output coordinate gets a distinct weight.
    fn readout(g: &mut Graph<f64>, y: Var, rng_seed: u64) -> super::super::error::Result<Var> {
        let shape = g.value(y).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let w = g.constant(Tensor::randn(&shape, 1.0, &mut rng));
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    }

    fn check_at_points<F>(name: &str, shapes: &[&[usize]], f: F)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> crate::error::Result<Var>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for point in 0..10 {
            let pts: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_t(&mut rng, s)).collect();
            let err = grad_check(&f, &pts, STEP).unwrap();
            assert!(err < TOL, "{name}: point {point} relative error {err}");
        }
    }

    #[test]
    fn sum_of_squares_gradient_is_exact() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.25]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[2.0, -4.0, 0.5]);
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.param(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let l = g.scale(x, 2.0);
        g.backward(l).unwrap();
        assert_eq!(g.grad(y).data(), &[0.0, 0.0]);
        assert_eq!(g.grad(x).data(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeats() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.param(Tensor::zeros(&[2, 3]));
        let b = g.param(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 4], 3.0));
        let gain = g.constant(Tensor::full(&[4], 2.0));
        let bias = g.constant(Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let y = g.layer_norm(x, gain, bias, LAYER_NORM_EPS).unwrap();
        assert_eq!(g.value(y).data(), &[0.1, 0.2, 0.3, 0.4]);
        assert!(g.value(y).is_finite());
    }

    #[test]
    fn cross_entropy_peaked_on_target_goes_to_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![50.0, 0.0, 0.0, 0.0, 0.0, 50.0]).unwrap());
        let l = g.cross_entropy(x, &[Some(0), Some(2)]).unwrap();
        assert!(g.value(l).data()[0] < 1e-20);
        assert!(g.cross_entropy(x, &[None, None]).is_err());
    }

    #[test]
    fn cross_entropy_ignores_unmarked_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![2, 2], vec![0.0, 0.0, 9.0, -9.0]).unwrap());
        let l = g.cross_entropy(x, &[Some(1), None]).unwrap();
        assert!((g.value(l).data()[0] - 2f64.ln()).abs() < 1e-12);
        g.backward(l).unwrap();
        assert_eq!(&g.grad(x).data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn grad_check_linear_function_is_near_exact() {
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let s = g.scale(v[0], 3.0);
            Ok(g.sum(s))
        };
        let p = Tensor::new(vec![4], vec![0.1, -0.4, 2.0, 7.0]).unwrap();
        let err = grad_check(f, &[p], STEP).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn grad_check_matmul() {
        check_at_points("matmul", &[&[3, 4], &[4, 2]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            readout(g, y, 1)
        });
    }

    #[test]
    fn grad_check_transpose_add_add_row_scale() {
        check_at_points(
            "add/add_row/transpose/scale",
            &[&[3, 2], &[2, 3], &[2]],
            |g, v| {
                let t = g.transpose(v[1])?;
                let s = g.add(v[0], t)?;
                let b = g.add_row(s, v[2])?;
                let y = g.scale(b, -1.7);
                readout(g, y, 2)
            },
        );
    }

    #[test]
    fn grad_check_relu_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            // coordinates bounded away from zero
            let data: Vec<f64> = (0..6)
                .map(|_| {
                    let m = rng.random_range(0.1..2.0);
                    if rng.random_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                })
                .collect();
            let p = Tensor::new(vec![2, 3], data).unwrap();
            let err = grad_check(
                |g, v| {
                    let y = g.relu(v[0]);
                    readout(g, y, 3)
                },
                &[p],
                STEP,
            )
            .unwrap();
            assert!(err < TOL, "relu {err}");
        }
    }

    #[test]
    fn grad_check_softmax_masked_and_plain() {
        check_at_points("softmax", &[&[3, 4]], |g, v| {
            let y = g.softmax(v[0])?;
            readout(g, y, 4)
        });
        check_at_points("softmax_masked", &[&[3, 4]], |g, v| {
            let y = g.softmax_masked(v[0], Some(&[true, false, true, true]))?;
            readout(g, y, 5)
        });
    }

    #[test]
    fn grad_check_layer_norm() {
        check_at_points("layer_norm", &[&[3, 5], &[5], &[5]], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)?;
            readout(g, y, 6)
        });
    }

    #[test]
    fn grad_check_embedding_mean_concat() {
        check_at_points("embedding/mean/concat", &[&[5, 3], &[2, 2]], |g, v| {
            let e = g.embedding(v[0], &[4, 0, 4])?;
            let m = g.mean_rows(e, &[0, 2])?;
            let r = g.concat_rows(&[e, m])?;
            let w = g.concat_cols(&[v[1], v[1]])?;
            let wr = g.sum(w);
            let y = readout(g, r, 7)?;
            g.add(y, wr)
        });
    }

    #[test]
    fn grad_check_normalize_and_cross_entropy() {
        check_at_points("normalize/cross_entropy", &[&[3, 4]], |g, v| {
            let n = g.normalize_rows(v[0])?;
            let t = g.transpose(n)?;
            let s = g.matmul(n, t)?;
            let s = g.scale(s, 2.0);
            g.cross_entropy(s, &[Some(0), None, Some(2)])
        });
    }

    #[test]
    fn grad_check_dropout_with_fixed_mask() {
        check_at_points("dropout", &[&[4, 3]], |g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let y = g.dropout(v[0], 0.3, &mut rng)?;
            readout(g, y, 8)
        });
    }

    #[test]
    fn shared_subexpression_accumulates_like_duplicated_subgraph() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_t(&mut rng, &[2, 3]);
        let w0 = rand_t(&mut rng, &[3, 3]);

        // shared: h = x·W used twice
        let mut g = Graph::<f64>::new();
        let (x, w) = (g.param(x0.clone()), g.param(w0.clone()));
        let h = g.matmul(x, w).unwrap();
        let a = g.relu(h);
        let b = g.mul(h, h).unwrap();
        let c = g.add(a, b).unwrap();
        let l = g.sum(c);
        g.backward(l).unwrap();

        // duplicated: h computed twice from the same leaves
        let mut d = Graph::<f64>::new();
        let (x2, w2) = (d.param(x0), d.param(w0));
        let h1 = d.matmul(x2, w2).unwrap();
        let h2 = d.matmul(x2, w2).unwrap();
        let h3 = d.matmul(x2, w2).unwrap();
        let a = d.relu(h1);
        let b = d.mul(h2, h3).unwrap();
        let c = d.add(a, b).unwrap();
        let l = d.sum(c);
        d.backward(l).unwrap();

        for (p, q) in [(x, x2), (w, w2)] {
            for (u, v) in g.grad(p).data().iter().zip(d.grad(q).data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_are_stochastic_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_t(&mut rng, &[4, 6]);
        let mut shifted = x.clone();
        for (i, v) in shifted.data_mut().iter_mut().enumerate() {
            *v += (i / 6) as f64 * 13.0 - 20.0;
        }
        let mut g = Graph::<f64>::new();
        let a = g.constant(x);
        let b = g.constant(shifted);
        let (ya, yb) = (g.softmax(a).unwrap(), g.softmax(b).unwrap());
        for r in 0..4 {
            let s: f64 = g.value(ya).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            for (p, q) in g.value(ya).row(r).iter().zip(g.value(yb).row(r)) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::randn(&[5, 16], 3.0, &mut rng));
        let gain = g.constant(Tensor::full(&[16], 1.0));
        let bias = g.constant(Tensor::zeros(&[16]));
        let y = g.layer_norm(x, gain, bias, LAYER_NORM_EPS).unwrap();
        for r in 0..5 {
            let row = g.value(y).row(r);
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
