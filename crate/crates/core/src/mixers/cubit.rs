use super::{as_batched, merge_heads, nw_tape, per_head, project_heads, project_qkv, score_factor, MixerConfig, MixerVars, MixerWeights, SolvePath};
use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::linalg::Mask;
use crate::tensor::{Real, Tensor};

/// ŝ = lower + softplus(range_raw) · σ(x·W_s), shaped `[B, H, N, 1]`.
pub(crate) fn lrr_tape<T: Real>(tape: &Tape<T>, x: Var, w_s: Var, lower: Var, range_raw: Var) -> Result<Var> {
    let s = tape.shape(x);
    let h = tape.shape(w_s)[1];
    let logits = tape.matmul(x, w_s)?;
    let logits = tape.permute(logits, &[0, 2, 1])?;
    let logits = tape.reshape(logits, &[s[0], h, s[1], 1])?;
    let gate = tape.sigmoid(logits)?;
    let range = tape.softplus(range_raw)?;
    let range = per_head(tape, range)?;
    let lower = per_head(tape, lower)?;
    let spread = tape.mul(range, gate)?;
    tape.add(lower, spread)
}

/// Solves `(softmax(r·refᵀ) + λI) · O = rhs` per head, with `λ = exp(log_lambda)`.
///
/// Under a causal mask the softmax matrix is lower triangular with a positive
/// diagonal, so forward substitution applies.
pub(crate) fn sigma_solve_tape<T: Real>(
    tape: &Tape<T>,
    r: Var,
    reference: Var,
    rhs: Var,
    log_lambda: Var,
    mask: &Mask,
    path: SolvePath,
) -> Result<Var> {
    let n = tape.shape(r)[tape.shape(r).len() - 2];
    let ref_t = tape.transpose(reference)?;
    let sim = tape.matmul(r, ref_t)?;
    let sm = tape.masked_softmax(sim, mask)?;
    let lambda = tape.exp(log_lambda)?;
    let lambda = per_head(tape, lambda)?;
    let eye = tape.constant(Tensor::eye(n));
    let ridge = tape.mul(lambda, eye)?;
    let sigma_inv = tape.add(sm, ridge)?;
    if mask.is_causal() && path == SolvePath::Auto {
        tape.solve_lower_triangular(sigma_inv, rhs)
    } else {
        tape.solve_general(sigma_inv, rhs)
    }
}

pub(crate) fn cubit_tape<T: Real>(tape: &Tape<T>, x: Var, w: &MixerVars, cfg: &MixerConfig) -> Result<Var> {
    if !cfg.variant.is_krr() {
        return Err(Error::InvalidConfig(format!("{} is not a kernel-ridge variant", cfg.variant)));
    }
    let (q, k, v) = project_qkv(tape, x, w, cfg)?;
    let n = tape.shape(q)[2];
    let positions: Vec<usize> = (0..n).collect();
    let mask = cfg.mask();

    if cfg.identity_bypass {
        let q = tape.rope(q, &positions)?;
        let k = tape.rope(k, &positions)?;
        let out = nw_tape(tape, q, k, v, &mask, score_factor(w, cfg))?;
        return merge_heads(tape, out);
    }

    let r = match w.w_r {
        Some(w_r) => project_heads(tape, x, w_r, cfg.heads)?,
        None => k,
    };
    let rhs = if cfg.variant.has_lrr() {
        let missing = || Error::InvalidConfig("rescale parameters missing".into());
        let s = lrr_tape(
            tape,
            x,
            w.w_s.ok_or_else(missing)?,
            w.lrr_lower.ok_or_else(missing)?,
            w.lrr_range_raw.ok_or_else(missing)?,
        )?;
        tape.mul(s, v)?
    } else {
        v
    };
    let scale = w.ref_scale.ok_or_else(|| Error::InvalidConfig("ref_scale missing".into()))?;
    let log_lambda = w.log_lambda.ok_or_else(|| Error::InvalidConfig("log_lambda missing".into()))?;

    let unit = tape.l2_normalize_rows(r)?;
    let scale = per_head(tape, scale)?;
    let reference = tape.mul(unit, scale)?;

    let q = tape.rope(q, &positions)?;
    let k = tape.rope(k, &positions)?;
    let r = tape.rope(r, &positions)?;
    let reference = tape.rope(reference, &positions)?;

    let o = sigma_solve_tape(tape, r, reference, rhs, log_lambda, &mask, cfg.solve_path)?;
    let out = nw_tape(tape, q, k, o, &mask, score_factor(w, cfg))?;
    merge_heads(tape, out)
}

/// Kernel-ridge-regression mixer on `[N, D]` or `[B, N, D]` input.
pub fn cubit_forward<T: Real>(x: &Tensor<T>, w: &MixerWeights<T>, cfg: &MixerConfig) -> Result<Tensor<T>> {
    if !cfg.variant.is_krr() {
        return Err(Error::InvalidConfig(format!("{} is not a kernel-ridge variant", cfg.variant)));
    }
    super::mixer_forward(x, w, cfg)
}

/// Rescale factors ŝ for `x` (`[N, D]` → `[H, N]`, `[B, N, D]` → `[B, H, N]`).
pub fn lrr_scale<T: Real>(x: &Tensor<T>, w: &MixerWeights<T>) -> Result<Tensor<T>> {
    let missing = || Error::InvalidConfig("weights carry no rescale parameters".into());
    let tape = Tape::new();
    let xb = as_batched(x)?;
    let xv = tape.constant(xb.clone());
    let s = lrr_tape(
        &tape,
        xv,
        tape.constant(w.w_s.clone().ok_or_else(missing)?),
        tape.constant(w.lrr_lower.clone().ok_or_else(missing)?),
        tape.constant(w.lrr_range_raw.clone().ok_or_else(missing)?),
    )?;
    let v = tape.value(s);
    let h = v.shape()[1];
    if x.rank() == 2 {
        v.reshape(&[h, x.rows()])
    } else {
        v.reshape(&[xb.shape()[0], h, x.rows()])
    }
}

/// `O` solving `(softmax(R·(c·R̂)ᵀ) + λI)·O = V_scaled`, where `R̂` is `R` with
/// unit rows. `r` and `v_scaled` are `[H, N, d]` or `[B, H, N, d]`; `ref_scale`
/// and `log_lambda` hold one value per head.
pub fn krr_normalize<T: Real>(
    r: &Tensor<T>,
    v_scaled: &Tensor<T>,
    mask: &Mask,
    ref_scale: &[T],
    log_lambda: &[T],
) -> Result<Tensor<T>> {
    krr_normalize_with(r, v_scaled, mask, ref_scale, log_lambda, SolvePath::Auto, false)
}

/// [`krr_normalize`] with an explicit solve path; `identity_sigma` replaces Σ⁻¹ by `I`.
pub fn krr_normalize_with<T: Real>(
    r: &Tensor<T>,
    v_scaled: &Tensor<T>,
    mask: &Mask,
    ref_scale: &[T],
    log_lambda: &[T],
    path: SolvePath,
    identity_sigma: bool,
) -> Result<Tensor<T>> {
    let lift = |t: &Tensor<T>| match t.rank() {
        3 => t.reshape(&[1, t.shape()[0], t.rows(), t.cols()]),
        4 => Ok(t.clone()),
        _ => Err(shape_err("krr_normalize", format!("expected [H,N,d] or [B,H,N,d], got {:?}", t.shape()))),
    };
    let (r4, v4) = (lift(r)?, lift(v_scaled)?);
    let h = r4.shape()[1];
    if r4.shape()[..3] != v4.shape()[..3] || ref_scale.len() != h || log_lambda.len() != h {
        return Err(shape_err(
            "krr_normalize",
            format!(
                "r {:?}, v {:?}, {} scales, {} log-lambdas",
                r.shape(),
                v_scaled.shape(),
                ref_scale.len(),
                log_lambda.len()
            ),
        ));
    }
    if identity_sigma {
        return Ok(v_scaled.clone());
    }
    let tape = Tape::new();
    let rv = tape.constant(r4);
    let vv = tape.constant(v4);
    let scale = tape.constant(Tensor::new(&[h], ref_scale.to_vec())?);
    let ll = tape.constant(Tensor::new(&[h], log_lambda.to_vec())?);
    let unit = tape.l2_normalize_rows(rv)?;
    let scale = per_head(&tape, scale)?;
    let reference = tape.mul(unit, scale)?;
    let o = sigma_solve_tape(&tape, rv, reference, vv, ll, mask, path)?;
    tape.value(o).reshape(v_scaled.shape())
}
