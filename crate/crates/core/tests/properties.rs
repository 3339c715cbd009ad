use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use krrmix::linalg::{masked_softmax, matmul, solve_general, solve_lower_triangular, Mask};
use krrmix::mixers::{llr_forward, nw_attention};
use krrmix::Tensor;

fn square(max: usize) -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1..=max).prop_flat_map(|n| (Just(n), prop::collection::vec(-20.0..20.0f64, n * n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one((n, s) in square(12), shift in -100.0..100.0f64, causal in any::<bool>()) {
        let mask = if causal { Mask::Causal } else { Mask::None };
        let scores = Tensor::new(&[n, n], s.clone()).unwrap();
        let p = masked_softmax(&scores, &mask).unwrap();
        for i in 0..n {
            let row: f64 = (0..n).map(|j| p.get(&[i, j])).sum();
            assert_abs_diff_eq!(row, 1.0, epsilon = 1e-12);
            for j in 0..n {
                if !mask.allows(i, j) {
                    prop_assert_eq!(p.get(&[i, j]), 0.0);
                }
            }
        }
        let shifted = Tensor::new(&[n, n], s.iter().map(|v| v + shift).collect()).unwrap();
        prop_assert!(masked_softmax(&shifted, &mask).unwrap().max_abs_diff(&p) < 1e-12);
    }

    #[test]
    fn triangular_solve_inverts_product((n, raw) in square(10), rhs in prop::collection::vec(-5.0..5.0f64, 10)) {
        // unit-scale diagonal keeps the system well conditioned
        let l: Vec<f64> = (0..n * n)
            .map(|k| {
                let (i, j) = (k / n, k % n);
                match i.cmp(&j) {
                    std::cmp::Ordering::Less => 0.0,
                    std::cmp::Ordering::Equal => 1.0 + raw[k].abs() / 20.0,
                    std::cmp::Ordering::Greater => raw[k] / (20.0 * n as f64),
                }
            })
            .collect();
        let l = Tensor::new(&[n, n], l).unwrap();
        let b = Tensor::new(&[n, 1], rhs[..n].to_vec()).unwrap();
        let x = solve_lower_triangular(&l, &b).unwrap();
        prop_assert!(matmul(&l, &x).unwrap().max_abs_diff(&b) < 1e-12);
        prop_assert!(solve_general(&l, &b).unwrap().max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn single_token_mixers_return_their_value(q in prop::collection::vec(-3.0..3.0f64, 4), v in prop::collection::vec(-3.0..3.0f64, 4)) {
        let (q, v) = (Tensor::new(&[1, 4], q).unwrap(), Tensor::new(&[1, 4], v).unwrap());
        prop_assert!(nw_attention(&q, &q, &v, &Mask::Causal).unwrap().max_abs_diff(&v) < 1e-15);
        prop_assert!(llr_forward(&q, &q, &v, &Mask::Causal, 1.0).unwrap().max_abs_diff(&v) < 1e-12);
    }
}
