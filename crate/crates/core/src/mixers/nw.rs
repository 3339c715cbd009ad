use super::{per_head, ScoreFactor};
use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::linalg::Mask;
use crate::tensor::{r, Real, Tensor};

/// `q·kᵀ` times the fixed scale or the learned per-head temperature.
pub(crate) fn scaled_scores<T: Real>(tape: &Tape<T>, q: Var, k: Var, factor: &ScoreFactor) -> Result<Var> {
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    match factor {
        ScoreFactor::Fixed(c) => tape.scale(s, r(*c)),
        ScoreFactor::Learned(t) => {
            let t = per_head(tape, *t)?;
            tape.mul(s, t)
        }
    }
}

pub(crate) fn nw_tape<T: Real>(tape: &Tape<T>, q: Var, k: Var, v: Var, mask: &Mask, factor: ScoreFactor) -> Result<Var> {
    let scores = scaled_scores(tape, q, k, &factor)?;
    let a = tape.masked_softmax(scores, mask)?;
    tape.matmul(a, v)
}

/// Softmax attention `softmax(QKᵀ/√d)·V`: every output row is a convex
/// combination of the value rows its mask allows.
pub fn nw_attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, mask: &Mask) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let out = nw_tape(&tape, qv, kv, vv, mask, ScoreFactor::Fixed(scale))?;
    Ok((*tape.value(out)).clone())
}
