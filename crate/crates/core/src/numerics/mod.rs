//! Deterministic dense tensor math and gradient verification.

mod gradcheck;
mod ops;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, grad_check_at, GradCheckReport};
pub use ops::{
    gelu, gelu_grad, gemm_acc, gemm_tn_acc, layer_norm, layer_norm_backward, layer_norm_cached,
    matmul, matmul_nt, matmul_tn, silu, silu_grad, softmax, softmax_in_place, softmax_rows,
    softmax_rows_backward, LayerNormCache, LN_EPS,
};
pub use rng::SeededRng;
pub use tensor::Tensor;

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in prop::collection::vec(-50.0f64..50.0, 1..40)) {
            let n = vals.len();
            let y = softmax(&Tensor::new(&[n], vals).unwrap(), 0).unwrap();
            prop_assert!(y.data().iter().all(|&v| v >= 0.0));
            prop_assert!((y.sum() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn layer_norm_shift_and_scale_invariant(
            vals in prop::collection::vec(-10.0f64..10.0, 2..32),
            shift in -100.0f64..100.0,
            scale in 0.1f64..50.0,
        ) {
            let n = vals.len();
            let spread = vals.iter().cloned().fold(f64::MIN, f64::max)
                - vals.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-2);
            let x = Tensor::new(&[1, n], vals).unwrap();
            let y = layer_norm(&x, 1e-12);
            let moved = layer_norm(&x.map(|v| v * scale + shift), 1e-12);
            prop_assert!(y.max_abs_diff(&moved).unwrap() < 1e-6);
        }

        #[test]
        fn layer_norm_backward_matches_differences(
            vals in prop::collection::vec(-3.0f64..3.0, 3..8),
            weights in prop::collection::vec(-1.0f64..1.0, 8),
        ) {
            let n = vals.len();
            let w = &weights[..n];
            let loss = |p: &[f64]| -> f64 {
                let y = layer_norm(&Tensor::new(&[1, n], p.to_vec()).unwrap(), 1e-3);
                y.data().iter().zip(w).map(|(a, b)| a * b).sum::<f64>()
            };
            let x = Tensor::new(&[1, n], vals.clone()).unwrap();
            let cache = layer_norm_cached(&x, 1e-3);
            let dy = Tensor::new(&[1, n], w.to_vec()).unwrap();
            let dx = layer_norm_backward(&cache, &dy);
            let r = grad_check(loss, &vals, dx.data(), 1e-5).unwrap();
            prop_assert!(r.max_abs_error < 1e-7, "{:?}", r);
        }

        #[test]
        fn softmax_backward_matches_differences(
            vals in prop::collection::vec(-3.0f64..3.0, 2..8),
            weights in prop::collection::vec(-1.0f64..1.0, 8),
        ) {
            let n = vals.len();
            let w = &weights[..n];
            let loss = |p: &[f64]| -> f64 {
                let y = softmax_rows(&Tensor::new(&[1, n], p.to_vec()).unwrap()).unwrap();
                y.data().iter().zip(w).map(|(a, b)| a * b).sum::<f64>()
            };
            let y = softmax_rows(&Tensor::new(&[1, n], vals.clone()).unwrap()).unwrap();
            let dx = softmax_rows_backward(&y, &Tensor::new(&[1, n], w.to_vec()).unwrap()).unwrap();
            let r = grad_check(loss, &vals, dx.data(), 1e-5).unwrap();
            prop_assert!(r.max_abs_error < 1e-8, "{:?}", r);
        }
    }
}
