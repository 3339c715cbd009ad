//! Regression-based token mixers.
//!
//! * [`nw_attention`]: softmax attention read as Nadaraya-Watson smoothing.
//! * [`cubit_forward`]: kernel-ridge-regression attention. Values are rescaled
//!   by a sigmoid-bounded per-token factor, passed through the inverse of a
//!   regularized reference-similarity matrix, then aggregated by softmax
//!   attention.
//! * [`llr_forward`]: local linear regression attention, a per-query weighted
//!   affine fit whose intercept is left unregularized.
//!
//! Each mixer is written once against the [`Tape`](crate::autograd::Tape);
//! the tensor-level functions here run a throwaway tape and return the value.

mod cubit;
mod krr;
mod llr;
mod nw;

pub use cubit::{cubit_forward, krr_normalize, krr_normalize_with, lrr_scale};
pub use krr::{krr_predict_oracle, Kernel};
pub use llr::llr_forward;
pub use nw::nw_attention;

pub(crate) use cubit::cubit_tape;
pub(crate) use llr::llr_tape;
pub(crate) use nw::nw_tape;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{softplus_inverse, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Mask;
use crate::tensor::{r, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "nw")]
    Nw,
    #[serde(rename = "krr")]
    Krr,
    #[serde(rename = "krr-share")]
    KrrShare,
    #[serde(rename = "krr-nolrr")]
    KrrNoLrr,
    #[serde(rename = "llr")]
    Llr,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Nw,
        Variant::Krr,
        Variant::KrrShare,
        Variant::KrrNoLrr,
        Variant::Llr,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Nw => "nw",
            Variant::Krr => "krr",
            Variant::KrrShare => "krr-share",
            Variant::KrrNoLrr => "krr-nolrr",
            Variant::Llr => "llr",
        }
    }

    pub fn is_krr(self) -> bool {
        matches!(self, Variant::Krr | Variant::KrrShare | Variant::KrrNoLrr)
    }

    pub fn has_reference_projection(self) -> bool {
        matches!(self, Variant::Krr | Variant::KrrNoLrr)
    }

    pub fn has_lrr(self) -> bool {
        matches!(self, Variant::Krr | Variant::KrrShare)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.label() == norm)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown mixer variant `{s}` (expected nw, krr, krr-share, krr-nolrr, llr)")))
    }
}

/// How the Σ⁻¹ system is solved.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolvePath {
    /// Triangular solve under a causal mask, LU otherwise.
    #[default]
    Auto,
    /// Always LU with partial pivoting.
    General,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixerConfig {
    pub hidden: usize,
    pub heads: usize,
    pub variant: Variant,
    pub causal: bool,
    /// β: lower end of the rescale interval.
    pub lrr_lower: f64,
    /// α + β: upper end of the rescale interval.
    pub lrr_upper: f64,
    pub lambda_init: f64,
    /// Ridge strength on the slope terms of the local linear fit.
    pub llr_reg: f64,
    /// Learn a per-head score temperature instead of the fixed `1/√d_h`.
    pub learnable_temperature: bool,
    pub solve_path: SolvePath,
    /// Test hook: Σ⁻¹ := I and ŝ := 1, reducing the KRR mixer to softmax attention.
    pub identity_bypass: bool,
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            heads: 4,
            variant: Variant::Krr,
            causal: true,
            lrr_lower: 0.5,
            lrr_upper: 2.0,
            lambda_init: 1e-10,
            llr_reg: 1.0,
            learnable_temperature: false,
            solve_path: SolvePath::Auto,
            identity_bypass: false,
        }
    }
}

impl MixerConfig {
    pub fn new(hidden: usize, heads: usize, variant: Variant) -> Self {
        Self {
            hidden,
            heads,
            variant,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn score_scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    pub fn mask(&self) -> Mask {
        if self.causal {
            Mask::Causal
        } else {
            Mask::None
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.heads == 0 || self.hidden == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("heads ({}) must divide hidden ({})", self.heads, self.hidden));
        }
        if !(self.lrr_lower > 0.0 && self.lrr_lower < self.lrr_upper) {
            return bad(format!(
                "need 0 < lrr_lower < lrr_upper, got {} and {}",
                self.lrr_lower, self.lrr_upper
            ));
        }
        if !(self.lambda_init > 0.0) {
            return bad(format!("lambda_init must be positive, got {}", self.lambda_init));
        }
        if !(self.llr_reg >= 0.0) || !self.llr_reg.is_finite() {
            return bad(format!("llr_reg must be finite and ≥ 0, got {}", self.llr_reg));
        }
        Ok(())
    }
}

/// Learnable parameters of one mixer, generic over the slot type so the same
/// layout serves tensors, tape handles and shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct MixerParams<P> {
    pub w_q: P,
    pub w_k: P,
    pub w_v: P,
    /// Reference projection; absent when the reference is tied to the keys.
    pub w_r: Option<P>,
    /// Rescale logits projection `D × H`.
    pub w_s: Option<P>,
    /// Per-head β.
    pub lrr_lower: Option<P>,
    /// Per-head range, stored before the softplus that keeps it positive.
    pub lrr_range_raw: Option<P>,
    /// Per-head scale on the normalized reference.
    pub ref_scale: Option<P>,
    pub log_lambda: Option<P>,
    pub temperature: Option<P>,
}

pub type MixerWeights<T> = MixerParams<Tensor<T>>;
pub type MixerVars = MixerParams<Var>;

impl<P> MixerParams<P> {
    /// Present parameters in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, &P)> {
        let mut out = vec![("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)];
        let optional = [
            ("w_r", &self.w_r),
            ("w_s", &self.w_s),
            ("lrr_lower", &self.lrr_lower),
            ("lrr_range_raw", &self.lrr_range_raw),
            ("ref_scale", &self.ref_scale),
            ("log_lambda", &self.log_lambda),
            ("temperature", &self.temperature),
        ];
        out.extend(optional.into_iter().filter_map(|(n, p)| p.as_ref().map(|p| (n, p))));
        out
    }

    pub fn try_map<Q, E>(&self, mut f: impl FnMut(&'static str, &P) -> std::result::Result<Q, E>) -> std::result::Result<MixerParams<Q>, E> {
        let (w_q, w_k, w_v) = (f("w_q", &self.w_q)?, f("w_k", &self.w_k)?, f("w_v", &self.w_v)?);
        let mut opt = |name: &'static str, p: &Option<P>| p.as_ref().map(|p| f(name, p)).transpose();
        Ok(MixerParams {
            w_q,
            w_k,
            w_v,
            w_r: opt("w_r", &self.w_r)?,
            w_s: opt("w_s", &self.w_s)?,
            lrr_lower: opt("lrr_lower", &self.lrr_lower)?,
            lrr_range_raw: opt("lrr_range_raw", &self.lrr_range_raw)?,
            ref_scale: opt("ref_scale", &self.ref_scale)?,
            log_lambda: opt("log_lambda", &self.log_lambda)?,
            temperature: opt("temperature", &self.temperature)?,
        })
    }
}

impl MixerParams<Vec<usize>> {
    /// Parameter shapes implied by a configuration.
    pub fn shapes(cfg: &MixerConfig) -> Self {
        let (d, h) = (cfg.hidden, cfg.heads);
        let v = cfg.variant;
        let per_head = |on: bool| on.then(|| vec![h]);
        MixerParams {
            w_q: vec![d, d],
            w_k: vec![d, d],
            w_v: vec![d, d],
            w_r: v.has_reference_projection().then(|| vec![d, d]),
            w_s: v.has_lrr().then(|| vec![d, h]),
            lrr_lower: per_head(v.has_lrr()),
            lrr_range_raw: per_head(v.has_lrr()),
            ref_scale: per_head(v.is_krr()),
            log_lambda: per_head(v.is_krr()),
            temperature: per_head(cfg.learnable_temperature),
        }
    }

    pub fn count(&self) -> usize {
        self.entries().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

impl<T: Real> MixerWeights<T> {
    /// Initial value for one named parameter: projections ~ N(0, std²), scalars
    /// from the configuration.
    pub fn init_param<R: Rng>(cfg: &MixerConfig, name: &str, shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
        let fill = |v: f64| Tensor::full(shape, r::<T>(v));
        match name {
            "lrr_lower" => fill(cfg.lrr_lower),
            "lrr_range_raw" => fill(softplus_inverse(cfg.lrr_upper - cfg.lrr_lower)),
            "ref_scale" => fill(1.0),
            "log_lambda" => fill(cfg.lambda_init.ln()),
            "temperature" => fill(cfg.score_scale()),
            _ => {
                let normal = Normal::new(0.0, std).expect("finite std");
                let n = shape.iter().product();
                Tensor::from_parts(shape.to_vec(), (0..n).map(|_| r(normal.sample(rng))).collect())
            }
        }
    }

    pub fn init<R: Rng>(cfg: &MixerConfig, std: f64, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        MixerParams::shapes(cfg).try_map(|name, shape| Ok(Self::init_param(cfg, name, shape, std, rng)))
    }

    /// Effective per-head rescale range, `softplus(raw)`.
    pub fn lrr_range(&self) -> Option<Vec<T>> {
        self.lrr_range_raw
            .as_ref()
            .map(|t| t.data().iter().map(|&v| crate::autograd::softplus(v)).collect())
    }

    pub fn count(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn check_shapes(&self, cfg: &MixerConfig) -> Result<()> {
        let want = MixerParams::shapes(cfg);
        let have: Vec<(&str, Vec<usize>)> = self.entries().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        let want: Vec<(&str, Vec<usize>)> = want.entries().into_iter().map(|(n, s)| (n, s.clone())).collect();
        if have != want {
            return Err(crate::error::shape_err(
                "mixer weights",
                format!("have {have:?}, configuration needs {want:?}"),
            ));
        }
        Ok(())
    }

    /// Registers every parameter as a tape leaf.
    pub fn to_vars(&self, tape: &Tape<T>) -> MixerVars {
        self.try_map::<_, std::convert::Infallible>(|_, t| Ok(tape.leaf(t.clone())))
            .unwrap_or_else(|e| match e {})
    }
}

/// Records the configured mixer on `tape`. `x` is `[B, N, D]`; the result has
/// the same shape.
pub fn mixer_tape<T: Real>(tape: &Tape<T>, x: Var, w: &MixerVars, cfg: &MixerConfig) -> Result<Var> {
    match cfg.variant {
        Variant::Nw => {
            let (q, k, v) = project_qkv(tape, x, w, cfg)?;
            let n = tape.shape(q)[2];
            let positions: Vec<usize> = (0..n).collect();
            let q = tape.rope(q, &positions)?;
            let k = tape.rope(k, &positions)?;
            let heads = nw_tape(tape, q, k, v, &cfg.mask(), score_factor(w, cfg))?;
            merge_heads(tape, heads)
        }
        Variant::Llr => {
            let (q, k, v) = project_qkv(tape, x, w, cfg)?;
            let s = tape.shape(q);
            let positions: Vec<usize> = (0..s[2]).collect();
            let q = tape.rope(q, &positions)?;
            let k = tape.rope(k, &positions)?;
            let flat = [s[0] * s[1], s[2], s[3]];
            let (qf, kf, vf) = (tape.reshape(q, &flat)?, tape.reshape(k, &flat)?, tape.reshape(v, &flat)?);
            let out = llr_tape(tape, qf, kf, vf, &cfg.mask(), cfg.llr_reg, cfg.score_scale())?;
            let out = tape.reshape(out, &s)?;
            merge_heads(tape, out)
        }
        _ => cubit_tape(tape, x, w, cfg),
    }
}

pub(crate) enum ScoreFactor {
    Fixed(f64),
    Learned(Var),
}

pub(crate) fn score_factor(w: &MixerVars, cfg: &MixerConfig) -> ScoreFactor {
    match w.temperature {
        Some(t) if cfg.learnable_temperature => ScoreFactor::Learned(t),
        _ => ScoreFactor::Fixed(cfg.score_scale()),
    }
}

/// `x [B,N,D] · W [D,D]` split into heads `[B,H,N,d_h]`.
pub(crate) fn project_heads<T: Real>(tape: &Tape<T>, x: Var, w: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() != 3 {
        return Err(crate::error::shape_err("mixer", format!("input must be [B, N, D], got {s:?}")));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    let p = tape.matmul(x, w)?;
    let p = tape.reshape(p, &[b, n, heads, d / heads])?;
    tape.permute(p, &[0, 2, 1, 3])
}

pub(crate) fn project_qkv<T: Real>(tape: &Tape<T>, x: Var, w: &MixerVars, cfg: &MixerConfig) -> Result<(Var, Var, Var)> {
    Ok((
        project_heads(tape, x, w.w_q, cfg.heads)?,
        project_heads(tape, x, w.w_k, cfg.heads)?,
        project_heads(tape, x, w.w_v, cfg.heads)?,
    ))
}

/// `[B,H,N,d_h]` back to `[B,N,H·d_h]`.
pub(crate) fn merge_heads<T: Real>(tape: &Tape<T>, heads: Var) -> Result<Var> {
    let s = tape.shape(heads);
    let p = tape.permute(heads, &[0, 2, 1, 3])?;
    tape.reshape(p, &[s[0], s[2], s[1] * s[3]])
}

/// Per-head vector `[H]` viewed as `[1,H,1,1]` for broadcasting against head tensors.
pub(crate) fn per_head<T: Real>(tape: &Tape<T>, v: Var) -> Result<Var> {
    let h = tape.shape(v)[0];
    tape.reshape(v, &[1, h, 1, 1])
}

/// Lifts `[N, D]` to `[1, N, D]`; leaves `[B, N, D]` alone.
pub(crate) fn as_batched<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    match x.rank() {
        2 => x.reshape(&[1, x.rows(), x.cols()]),
        3 => Ok(x.clone()),
        _ => Err(crate::error::shape_err("mixer", format!("input must be [N, D] or [B, N, D], got {:?}", x.shape()))),
    }
}

/// Runs the configured mixer on tensors: `x` is `[N, D]` or `[B, N, D]`.
pub fn mixer_forward<T: Real>(x: &Tensor<T>, w: &MixerWeights<T>, cfg: &MixerConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    w.check_shapes(cfg)?;
    let tape = Tape::new();
    let xv = tape.constant(as_batched(x)?);
    let vars = w.to_vars(&tape);
    let out = mixer_tape(&tape, xv, &vars, cfg)?;
    tape.value(out).reshape(x.shape())
}

#[cfg(test)]
mod tests;
