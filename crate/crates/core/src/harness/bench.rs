//! Forward-pass timing of one mixer layer.

use std::fmt;
use std::time::Instant;

use crate::error::Result;
use crate::mixers::{mixer_forward, MixerConfig, MixerWeights, SolvePath, Variant};
use crate::verify::random;

use super::rng::{stream, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchVariant {
    Nw,
    KrrTriangular,
    KrrGeneral,
    Llr,
}

impl BenchVariant {
    pub const ALL: [BenchVariant; 4] = [Self::Nw, Self::KrrTriangular, Self::KrrGeneral, Self::Llr];

    pub fn label(self) -> &'static str {
        match self {
            Self::Nw => "nw",
            Self::KrrTriangular => "krr-triangular",
            Self::KrrGeneral => "krr-general",
            Self::Llr => "llr",
        }
    }

    fn mixer(self, hidden: usize, heads: usize) -> MixerConfig {
        let (variant, solve_path) = match self {
            Self::Nw => (Variant::Nw, SolvePath::Auto),
            Self::KrrTriangular => (Variant::Krr, SolvePath::Auto),
            Self::KrrGeneral => (Variant::Krr, SolvePath::General),
            Self::Llr => (Variant::Llr, SolvePath::Auto),
        };
        MixerConfig {
            solve_path,
            lambda_init: 1e-2,
            ..MixerConfig::new(hidden, heads, variant)
        }
    }
}

impl fmt::Display for BenchVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub variant: BenchVariant,
    pub n: usize,
    pub median_us: f64,
    pub p90_us: f64,
}

pub const BENCH_HEADER: &str = "variant,N,median_us,p90_us";

impl BenchRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{:.1},{:.1}", self.variant, self.n, self.median_us, self.p90_us)
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub head_dim: usize,
    pub heads: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![128, 256, 512, 1024],
            head_dim: 32,
            heads: 4,
            reps: 5,
            seed: 0,
        }
    }
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Times `variants` at every length; one warm-up pass precedes the timed reps.
pub fn bench(cfg: &BenchConfig, variants: &[BenchVariant], mut on_row: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>> {
    let hidden = cfg.head_dim * cfg.heads;
    let reps = cfg.reps.max(1);
    let mut rows = Vec::new();
    for &n in &cfg.lengths {
        let mut rng = stream(cfg.seed, Purpose::Bench, n as u64);
        let x = random::normal::<f32>(&[n, hidden], 1.0, &mut rng);
        for &v in variants {
            let mcfg = v.mixer(hidden, cfg.heads);
            let w = MixerWeights::<f32>::init(&mcfg, 1.0 / (hidden as f64).sqrt(), &mut rng)?;
            mixer_forward(&x, &w, &mcfg)?;
            let mut times: Vec<f64> = (0..reps)
                .map(|_| {
                    let t = Instant::now();
                    let out = mixer_forward(&x, &w, &mcfg);
                    let us = t.elapsed().as_secs_f64() * 1e6;
                    out.map(|_| us)
                })
                .collect::<Result<_>>()?;
            times.sort_by(f64::total_cmp);
            let row = BenchRow {
                variant: v,
                n,
                median_us: percentile(&times, 0.5),
                p90_us: percentile(&times, 0.9),
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_rep_one_length_gives_one_row_per_variant() {
        let cfg = BenchConfig {
            lengths: vec![16],
            head_dim: 4,
            heads: 2,
            reps: 1,
            seed: 0,
        };
        let rows = bench(&cfg, &BenchVariant::ALL, |_| {}).unwrap();
        assert_eq!(rows.len(), 4);
        for (r, v) in rows.iter().zip(BenchVariant::ALL) {
            assert_eq!((r.variant, r.n), (v, 16));
            assert!(r.median_us > 0.0 && r.p90_us >= r.median_us);
        }
        assert_eq!(rows[1].csv_line().split(',').count(), BENCH_HEADER.split(',').count());
    }

    #[test]
    fn percentiles() {
        let s: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile(&s, 0.5), 5.0);
        assert_eq!(percentile(&s, 0.9), 9.0);
        assert_eq!(percentile(&[3.0], 0.9), 3.0);
    }
}
