use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::linalg::Mask;
use crate::tensor::{r, Real, Tensor};

/// Local linear regression attention on `[G, N, d]` inputs.
///
/// Uses the non-centered design `M = [1 | K]`: for query `i` the weighted
/// normal equations `(Mᵀ Wᵢ M + ε·diag(0,1,…,1)) θᵢ = Mᵀ Wᵢ V` are solved and
/// the fit is evaluated at `[1 | qᵢ]`. Both Gram and moment matrices are
/// formed as `W · (row-wise outer products)`, one batched matmul each.
pub(crate) fn llr_tape<T: Real>(
    tape: &Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: &Mask,
    eps: f64,
    score_scale: f64,
) -> Result<Var> {
    let s = tape.shape(q);
    if s.len() != 3 || tape.shape(k) != s || tape.shape(v) != s {
        return Err(shape_err(
            "llr",
            format!("q, k, v must share shape [G, N, d]: {:?} {:?} {:?}", s, tape.shape(k), tape.shape(v)),
        ));
    }
    if !(eps >= 0.0) {
        return Err(Error::InvalidConfig(format!("llr_reg must be ≥ 0, got {eps}")));
    }
    let (g, n, d) = (s[0], s[1], s[2]);
    let p = d + 1;

    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, r(score_scale))?;
    let weights = tape.masked_softmax(scores, mask)?;

    let ones = tape.constant(Tensor::ones(&[g, n, 1]));
    let design = tape.concat_last(ones, k)?;
    let design_col = tape.reshape(design, &[g, n, p, 1])?;
    let design_row = tape.reshape(design, &[g, n, 1, p])?;
    let outer = tape.mul(design_col, design_row)?;
    let outer = tape.reshape(outer, &[g, n, p * p])?;
    let gram = tape.matmul(weights, outer)?;
    let gram = tape.reshape(gram, &[g, n, p, p])?;

    let mut ridge = Tensor::zeros(&[p, p]);
    for j in 1..p {
        ridge.set(&[j, j], r(eps));
    }
    let ridge = tape.constant(ridge);
    let gram = tape.add(gram, ridge)?;

    let v_row = tape.reshape(v, &[g, n, 1, d])?;
    let cross = tape.mul(design_col, v_row)?;
    let cross = tape.reshape(cross, &[g, n, p * d])?;
    let moments = tape.matmul(weights, cross)?;
    let moments = tape.reshape(moments, &[g, n, p, d])?;

    let theta = tape.solve_general(gram, moments)?;

    let query_design = tape.concat_last(ones, q)?;
    let query_design = tape.reshape(query_design, &[g, n, 1, p])?;
    let out = tape.matmul(query_design, theta)?;
    tape.reshape(out, &[g, n, d])
}

/// Local linear regression attention on `[N, d]` or `[G, N, d]` inputs, with
/// scores scaled by `1/√d` and slope ridge `eps`.
pub fn llr_forward<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, mask: &Mask, eps: f64) -> Result<Tensor<T>> {
    let lift = |t: &Tensor<T>| match t.rank() {
        2 => t.reshape(&[1, t.rows(), t.cols()]),
        3 => Ok(t.clone()),
        _ => Err(shape_err("llr_forward", format!("expected [N,d] or [G,N,d], got {:?}", t.shape()))),
    };
    let tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(lift(q)?), tape.constant(lift(k)?), tape.constant(lift(v)?));
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let out = llr_tape(&tape, qv, kv, vv, mask, eps, scale)?;
    tape.value(out).reshape(q.shape())
}
