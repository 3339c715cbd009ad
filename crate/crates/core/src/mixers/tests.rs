use super::*;
use crate::linalg::{explicit_inverse, matmul, Mask};
use crate::verify::oracle::{self, Mat};
use crate::verify::random;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

#[test]
fn nw_uniform_scores_average_values() {
    let q = Tensor::<f64>::zeros(&[3, 2]);
    let v = t(&[3, 2], &[1., 2., 3., 4., 5., 9.]);
    let out = nw_attention(&q, &q, &v, &Mask::None).unwrap();
    for i in 0..3 {
        assert!((out.get(&[i, 0]) - 3.0).abs() < 1e-15);
        assert!((out.get(&[i, 1]) - 5.0).abs() < 1e-15);
    }
}

#[test]
fn nw_single_token_returns_value() {
    let q = t(&[1, 2], &[0.3, -1.0]);
    let v = t(&[1, 2], &[7., -2.]);
    assert_eq!(nw_attention(&q, &q, &v, &Mask::Causal).unwrap(), v);
}

#[test]
fn nw_hand_evaluated_causal_rows() {
    // d = 1 so the score scale is 1; scores s_ij = q_i k_j.
    let q = t(&[3, 1], &[1.0, 2.0, -1.0]);
    let k = t(&[3, 1], &[0.5, 1.0, 2.0]);
    let v = t(&[3, 1], &[10., 20., 40.]);
    let out = nw_attention(&q, &k, &v, &Mask::Causal).unwrap();
    // row 0: only j = 0
    assert!((out.data()[0] - 10.0).abs() < 1e-12);
    // row 1: scores (1, 2) -> weights e/(e+e²), e²/(e+e²)
    let (a, b) = (1f64.exp(), 2f64.exp());
    let want1 = (a * 10.0 + b * 20.0) / (a + b);
    assert!((out.data()[1] - want1).abs() < 1e-12);
    // row 2: scores (-0.5, -1, -2)
    let w: Vec<f64> = [-0.5f64, -1.0, -2.0].iter().map(|s| s.exp()).collect();
    let want2 = (w[0] * 10.0 + w[1] * 20.0 + w[2] * 40.0) / w.iter().sum::<f64>();
    assert!((out.data()[2] - want2).abs() < 1e-12);
}

fn lrr_weights(d: usize, h: usize) -> MixerWeights<f64> {
    let cfg = MixerConfig::new(d, h, Variant::Krr);
    let mut rng = random::rng(7);
    MixerWeights::init(&cfg, 0.02, &mut rng).unwrap()
}

#[test]
fn lrr_zero_logit_gives_midpoint() {
    let mut w = lrr_weights(4, 2);
    w.w_s = Some(Tensor::zeros(&[4, 2]));
    let x = t(&[2, 4], &[1., 2., 3., 4., -1., 0., 1., 0.]);
    let s = lrr_scale(&x, &w).unwrap();
    assert_eq!(s.shape(), &[2, 2]);
    for v in s.data() {
        assert!((v - 1.25).abs() < 1e-12, "{v}");
    }
}

#[test]
fn lrr_saturates_toward_but_not_onto_bounds() {
    let mut w = lrr_weights(2, 1);
    w.w_s = Some(t(&[2, 1], &[1.0, 0.0]));
    let x = t(&[2, 2], &[30., 0., -30., 0.]);
    let s = lrr_scale(&x, &w).unwrap();
    let (hi, lo) = (s.data()[0], s.data()[1]);
    assert!(hi < 2.0 && 2.0 - hi < 1e-10);
    assert!(lo > 0.5 && lo - 0.5 < 1e-10);
}

#[test]
fn krr_normalize_singleton() {
    let lambda: f64 = 0.25;
    let r = t(&[1, 1, 2], &[0.3, 0.4]);
    let v = t(&[1, 1, 2], &[2.0, -5.0]);
    let o = krr_normalize(&r, &v, &Mask::Causal, &[1.7], &[lambda.ln()]).unwrap();
    assert!((o.data()[0] - 2.0 / 1.25).abs() < 1e-15);
    assert!((o.data()[1] + 5.0 / 1.25).abs() < 1e-15);
}

#[test]
fn krr_normalize_identity_bypass() {
    let mut rng = random::rng(3);
    let r = random::normal::<f64>(&[2, 5, 4], 1.0, &mut rng);
    let v = random::normal::<f64>(&[2, 5, 4], 1.0, &mut rng);
    let o = krr_normalize_with(&r, &v, &Mask::Causal, &[1.0, 1.0], &[0.0, 0.0], SolvePath::Auto, true).unwrap();
    assert_eq!(o, v);
}

#[test]
fn krr_normalize_matches_explicit_inverse() {
    let mut rng = random::rng(11);
    let (n, d) = (4, 3);
    let r = random::normal::<f64>(&[1, n, d], 1.0, &mut rng);
    let v = random::normal::<f64>(&[1, n, d], 1.0, &mut rng);
    let (c, log_lambda) = (1.3, (1e-3f64).ln());
    let o = krr_normalize(&r, &v, &Mask::Causal, &[c], &[log_lambda]).unwrap();

    let rm = Mat::from_tensor(&r.reshape(&[n, d]).unwrap());
    let mut reference = rm.clone();
    for i in 0..n {
        let norm = (0..d).map(|j| rm.at(i, j).powi(2)).sum::<f64>().sqrt();
        for j in 0..d {
            reference.put(i, j, c * rm.at(i, j) / norm);
        }
    }
    let mut sigma_inv = oracle::softmax_rows(&rm.mul(&reference.transpose()), &Mask::Causal);
    for i in 0..n {
        sigma_inv.data[i * n + i] += log_lambda.exp();
    }
    let inv = explicit_inverse(&sigma_inv.to_tensor()).unwrap();
    let want = matmul(&inv, &v.reshape(&[n, d]).unwrap()).unwrap();
    assert!(o.reshape(&[n, d]).unwrap().max_abs_diff(&want) < 1e-8);
}

#[test]
fn non_causal_krr_uses_general_solve() {
    let mut rng = random::rng(5);
    let r = random::normal::<f64>(&[1, 6, 4], 1.0, &mut rng);
    let v = random::normal::<f64>(&[1, 6, 4], 1.0, &mut rng);
    let o = krr_normalize(&r, &v, &Mask::None, &[1.0], &[(0.5f64).ln()]).unwrap();
    // residual check against Σ⁻¹ built independently
    let rm = Mat::from_tensor(&r.reshape(&[6, 4]).unwrap());
    let mut reference = rm.clone();
    for i in 0..6 {
        let norm = (0..4).map(|j| rm.at(i, j).powi(2)).sum::<f64>().sqrt();
        for j in 0..4 {
            reference.put(i, j, rm.at(i, j) / norm);
        }
    }
    let mut s = oracle::softmax_rows(&rm.mul(&reference.transpose()), &Mask::None);
    for i in 0..6 {
        s.data[i * 6 + i] += 0.5;
    }
    let back = s.mul(&Mat::from_tensor(&o.reshape(&[6, 4]).unwrap()));
    assert!(back.to_tensor().max_abs_diff(&v.reshape(&[6, 4]).unwrap()) < 1e-10);
}

fn cubit_cfg(d: usize, h: usize, variant: Variant) -> MixerConfig {
    MixerConfig {
        lambda_init: 1e-2,
        ..MixerConfig::new(d, h, variant)
    }
}

#[test]
fn cubit_identity_bypass_is_softmax_attention() {
    let mut rng = random::rng(21);
    let cfg = MixerConfig {
        identity_bypass: true,
        ..cubit_cfg(8, 2, Variant::Krr)
    };
    let w = random::mixer_weights::<f64>(&cfg, 0.5, &mut rng);
    let x = random::normal::<f64>(&[7, 8], 1.0, &mut rng);
    let got = cubit_forward(&x, &w, &cfg).unwrap();
    let nw_cfg = MixerConfig::new(8, 2, Variant::Nw);
    let nw_w = MixerParams {
        w_q: w.w_q.clone(),
        w_k: w.w_k.clone(),
        w_v: w.w_v.clone(),
        w_r: None,
        w_s: None,
        lrr_lower: None,
        lrr_range_raw: None,
        ref_scale: None,
        log_lambda: None,
        temperature: None,
    };
    let want = mixer_forward(&x, &nw_w, &nw_cfg).unwrap();
    assert!(got.max_abs_diff(&want) <= 1e-12);
}

#[test]
fn cubit_single_token() {
    let mut rng = random::rng(4);
    let cfg = cubit_cfg(4, 1, Variant::Krr);
    let w = random::mixer_weights::<f64>(&cfg, 0.5, &mut rng);
    let x = random::normal::<f64>(&[1, 4], 1.0, &mut rng);
    let out = cubit_forward(&x, &w, &cfg).unwrap();
    let s = lrr_scale(&x, &w).unwrap().data()[0];
    let lambda = w.log_lambda.as_ref().unwrap().data()[0].exp();
    let v = matmul(&x, &w.w_v).unwrap();
    for j in 0..4 {
        let want = s * v.data()[j] / (1.0 + lambda);
        assert!((out.data()[j] - want).abs() < 1e-12);
    }
}

#[test]
fn cubit_matches_composition_oracle() {
    let mut rng = random::rng(99);
    for variant in [Variant::Krr, Variant::KrrShare, Variant::KrrNoLrr] {
        for causal in [true, false] {
            let cfg = MixerConfig {
                causal,
                lambda_init: 0.1,
                ..MixerConfig::new(8, 2, variant)
            };
            let w = random::mixer_weights::<f64>(&cfg, 0.4, &mut rng);
            let x = random::normal::<f64>(&[6, 8], 1.0, &mut rng);
            let got = cubit_forward(&x, &w, &cfg).unwrap();
            let want = oracle::cubit_oracle(&Mat::from_tensor(&x), &w, &cfg).unwrap();
            let err = got.max_abs_diff(&want.to_tensor());
            assert!(err <= 1e-8, "{variant} causal={causal}: {err:e}");
        }
    }
}

#[test]
fn cubit_rejects_non_krr_variants() {
    let cfg = MixerConfig::new(4, 1, Variant::Nw);
    let mut rng = random::rng(1);
    let w = MixerWeights::<f64>::init(&cfg, 0.1, &mut rng).unwrap();
    assert!(cubit_forward(&Tensor::zeros(&[2, 4]), &w, &cfg).is_err());
}

#[test]
fn llr_constant_values_are_reproduced() {
    let mut rng = random::rng(8);
    let q = random::normal::<f64>(&[6, 3], 1.0, &mut rng);
    let k = random::normal::<f64>(&[6, 3], 1.0, &mut rng);
    let mut v = Tensor::zeros(&[6, 3]);
    for i in 0..6 {
        for (j, c) in [1.5, -2.0, 0.25].into_iter().enumerate() {
            v.set(&[i, j], c);
        }
    }
    for eps in [0.0, 1.0, 1e4] {
        let mask = if eps == 0.0 { Mask::None } else { Mask::Causal };
        let out = llr_forward(&q, &k, &v, &mask, eps).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-10, "eps {eps}");
    }
}

#[test]
fn llr_large_ridge_approaches_softmax_attention() {
    let mut rng = random::rng(12);
    let q = random::normal::<f64>(&[8, 4], 1.0, &mut rng);
    let k = random::normal::<f64>(&[8, 4], 1.0, &mut rng);
    let v = random::normal::<f64>(&[8, 4], 1.0, &mut rng);
    let nw = nw_attention(&q, &k, &v, &Mask::Causal).unwrap();
    let llr = llr_forward(&q, &k, &v, &Mask::Causal, 1e8).unwrap();
    assert!(llr.max_abs_diff(&nw) / nw.max_abs() <= 1e-3);
}

#[test]
fn llr_matches_normal_equations() {
    let mut rng = random::rng(13);
    let q = random::normal::<f64>(&[4, 2], 1.0, &mut rng);
    let k = random::normal::<f64>(&[4, 2], 1.0, &mut rng);
    let v = random::normal::<f64>(&[4, 2], 1.0, &mut rng);
    for mask in [Mask::Causal, Mask::None] {
        let got = llr_forward(&q, &k, &v, &mask, 0.5).unwrap();
        let want = oracle::llr_oracle(&Mat::from_tensor(&q), &Mat::from_tensor(&k), &Mat::from_tensor(&v), &mask, 0.5).unwrap();
        assert!(got.max_abs_diff(&want.to_tensor()) <= 1e-8);
    }
}

#[test]
fn llr_degenerate_prefix_without_ridge_is_singular() {
    let mut rng = random::rng(2);
    let q = random::normal::<f64>(&[3, 2], 1.0, &mut rng);
    let err = llr_forward(&q, &q, &q, &Mask::Causal, 0.0).unwrap_err();
    assert!(matches!(err, Error::SingularMatrix { .. }));
}

#[test]
fn krr_oracle_small_cases() {
    let x = t(&[1, 2], &[1.0, 0.0]);
    let y = t(&[1, 1], &[3.0]);
    let exact = krr_predict_oracle(&x, &y, &[1.0, 0.0], Kernel::Linear, 0.0).unwrap();
    assert!((exact.data()[0] - 3.0).abs() < 1e-15);
    let shrunk = krr_predict_oracle(&x, &y, &[1.0, 0.0], Kernel::Linear, 1.0).unwrap();
    assert!((shrunk.data()[0] - 1.5).abs() < 1e-15);
    let singular = krr_predict_oracle(&t(&[2, 1], &[1., 1.]), &t(&[2, 1], &[1., 2.]), &[1.0], Kernel::Linear, 0.0);
    assert!(matches!(singular, Err(Error::SingularMatrix { .. })));
}

#[test]
fn config_validation() {
    assert!(MixerConfig::new(10, 3, Variant::Nw).validate().is_err());
    let bad = MixerConfig {
        lrr_lower: 2.0,
        lrr_upper: 1.0,
        ..MixerConfig::new(8, 2, Variant::Krr)
    };
    assert!(bad.validate().is_err());
    assert_eq!("KRR_Share".parse::<Variant>().unwrap(), Variant::KrrShare);
    assert!("gpt".parse::<Variant>().is_err());
}

#[test]
fn share_variant_adds_only_scalar_and_rescale_parameters() {
    let (d, h) = (16, 4);
    let nw = MixerParams::shapes(&MixerConfig::new(d, h, Variant::Nw)).count();
    let share = MixerParams::shapes(&MixerConfig::new(d, h, Variant::KrrShare)).count();
    let full = MixerParams::shapes(&MixerConfig::new(d, h, Variant::Krr)).count();
    assert_eq!(share - nw, d * h + 2 * h + h + h);
    assert_eq!(full - share, d * d);
}
