//! Seeded random inputs for the verification suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::softplus_inverse;
use crate::mixers::{MixerConfig, MixerWeights};
use crate::tensor::{r, Real, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Real>(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r(rng.random_range(lo..hi))).collect()).expect("finite")
}

pub fn normal<T: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r(dist.sample(rng))).collect()).expect("finite")
}

/// Mixer weights with projections ~ N(0, std²) and the per-head scalars moved
/// off their defaults so every parameter matters.
pub fn mixer_weights<T: Real>(cfg: &MixerConfig, std: f64, rng: &mut impl Rng) -> MixerWeights<T> {
    let mut w = MixerWeights::init(cfg, std, rng).expect("valid mixer config");
    let h = cfg.heads;
    let mut per_head = |lo: f64, hi: f64| -> Tensor<T> { uniform(&[h], lo, hi, rng) };
    if w.lrr_lower.is_some() {
        w.lrr_lower = Some(per_head(0.3, 0.8));
        let ranges: Vec<T> = per_head(0.8, 2.0).data().iter().map(|v| r(softplus_inverse(v.to_f64().unwrap()))).collect();
        w.lrr_range_raw = Some(Tensor::new(&[h], ranges).expect("finite"));
    }
    if w.ref_scale.is_some() {
        w.ref_scale = Some(per_head(0.5, 2.0));
    }
    if w.log_lambda.is_some() {
        let base = cfg.lambda_init.ln();
        w.log_lambda = Some(per_head(base - 0.5, base + 0.5));
    }
    if w.temperature.is_some() {
        w.temperature = Some(per_head(0.2, 0.6));
    }
    w
}
