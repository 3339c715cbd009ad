//! Reference computations written with plain loops over `f64`.
//!
//! Nothing here goes through the tape, the batched kernels or the LU solver;
//! inverses come from [`explicit_inverse`] (Gauss-Jordan) and every softmax,
//! rotation and projection is re-derived element by element.

#![allow(clippy::needless_range_loop)]

use crate::error::Result;
use crate::linalg::{explicit_inverse, Mask};
use crate::mixers::{MixerConfig, MixerWeights, Variant};
use crate::model::rope::ROPE_BASE;
use crate::tensor::Tensor;

/// Row-major dense matrix used only by the oracles.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        Self {
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(&[self.rows, self.cols], self.data.clone()).expect("finite oracle output")
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn put(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn mul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut s = 0.0;
                for p in 0..self.cols {
                    s += self.at(i, p) * other.at(p, j);
                }
                out.put(i, j, s);
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.put(j, i, self.at(i, j));
            }
        }
        out
    }

    pub fn inverse(&self) -> Result<Mat> {
        Ok(Mat::from_tensor(&explicit_inverse(&self.to_tensor())?))
    }

    /// Columns `[from, from + width)`.
    pub fn cols_slice(&self, from: usize, width: usize) -> Mat {
        let mut out = Mat::zeros(self.rows, width);
        for i in 0..self.rows {
            for j in 0..width {
                out.put(i, j, self.at(i, from + j));
            }
        }
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

/// Softmax over allowed entries of each row, computed one scalar at a time.
pub fn softmax_rows(scores: &Mat, mask: &Mask) -> Mat {
    let mut out = Mat::zeros(scores.rows, scores.cols);
    for i in 0..scores.rows {
        let allowed: Vec<usize> = (0..scores.cols).filter(|&j| mask.allows(i, j)).collect();
        let max = allowed.iter().map(|&j| scores.at(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = allowed.iter().map(|&j| (scores.at(i, j) - max).exp()).sum();
        for &j in &allowed {
            out.put(i, j, (scores.at(i, j) - max).exp() / denom);
        }
    }
    out
}

/// Rotary rotation of row `i` by position `i`, pairs `(2j, 2j+1)`.
pub fn rotate_rows(m: &Mat) -> Mat {
    let d = m.cols;
    let mut out = m.clone();
    for i in 0..m.rows {
        for j in 0..d / 2 {
            let freq = 1.0 / ROPE_BASE.powf((2 * j) as f64 / d as f64);
            let angle = i as f64 * freq;
            let (a, b) = (m.at(i, 2 * j), m.at(i, 2 * j + 1));
            out.put(i, 2 * j, a * angle.cos() - b * angle.sin());
            out.put(i, 2 * j + 1, a * angle.sin() + b * angle.cos());
        }
    }
    out
}

/// `softmax(QKᵀ/√d)·V` for one head.
pub fn nw_oracle(q: &Mat, k: &Mat, v: &Mat, mask: &Mask) -> Mat {
    let scale = 1.0 / (q.cols as f64).sqrt();
    let mut scores = q.mul(&k.transpose());
    scores.data.iter_mut().for_each(|s| *s *= scale);
    softmax_rows(&scores, mask).mul(v)
}

/// Local linear regression by explicit normal equations, one query at a time.
pub fn llr_oracle(q: &Mat, k: &Mat, v: &Mat, mask: &Mask, eps: f64) -> Result<Mat> {
    let (n, d) = (q.rows, q.cols);
    let p = d + 1;
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = q.mul(&k.transpose());
    scores.data.iter_mut().for_each(|s| *s *= scale);
    let w = softmax_rows(&scores, mask);
    let design = |j: usize, a: usize| if a == 0 { 1.0 } else { k.at(j, a - 1) };
    let mut out = Mat::zeros(n, d);
    for i in 0..n {
        let mut h = Mat::zeros(p, p);
        let mut g = Mat::zeros(p, d);
        for j in 0..n {
            let wij = w.at(i, j);
            if wij == 0.0 {
                continue;
            }
            for a in 0..p {
                for b in 0..p {
                    h.data[a * p + b] += wij * design(j, a) * design(j, b);
                }
                for c in 0..d {
                    g.data[a * d + c] += wij * design(j, a) * v.at(j, c);
                }
            }
        }
        for a in 1..p {
            h.data[a * p + a] += eps;
        }
        let theta = h.inverse()?.mul(&g);
        for c in 0..d {
            let mut y = theta.at(0, c);
            for a in 1..p {
                y += q.at(i, a - 1) * theta.at(a, c);
            }
            out.put(i, c, y);
        }
    }
    Ok(out)
}

/// Kernel-ridge mixer for one sequence `x: [N, D]`, composed as
/// `A · (Σ⁻¹)⁻¹ · diag(ŝ) · V` per head with an explicit inverse.
pub fn cubit_oracle(x: &Mat, w: &MixerWeights<f64>, cfg: &MixerConfig) -> Result<Mat> {
    let (n, d_model, heads) = (x.rows, cfg.hidden, cfg.heads);
    let dh = d_model / heads;
    let mask = cfg.mask();
    let proj = |t: &Tensor<f64>| x.mul(&Mat::from_tensor(t));
    let (q_all, k_all, v_all) = (proj(&w.w_q), proj(&w.w_k), proj(&w.w_v));
    let r_all = match (&w.w_r, cfg.variant) {
        (Some(wr), _) => proj(wr),
        (None, _) => k_all.clone(),
    };
    let logits = w.w_s.as_ref().map(proj);
    let mut out = Mat::zeros(n, d_model);
    for h in 0..heads {
        let q = q_all.cols_slice(h * dh, dh);
        let k = k_all.cols_slice(h * dh, dh);
        let v = v_all.cols_slice(h * dh, dh);
        let r = r_all.cols_slice(h * dh, dh);

        let s_hat: Vec<f64> = match (&logits, cfg.variant) {
            (Some(lg), Variant::Krr | Variant::KrrShare) => {
                let lower = w.lrr_lower.as_ref().expect("lower").data()[h];
                let range = softplus(w.lrr_range_raw.as_ref().expect("range").data()[h]);
                (0..n).map(|i| lower + range * sigmoid(lg.at(i, h))).collect()
            }
            _ => vec![1.0; n],
        };
        let c = w.ref_scale.as_ref().expect("scale").data()[h];
        let lambda = w.log_lambda.as_ref().expect("log_lambda").data()[h].exp();

        let mut reference = r.clone();
        for i in 0..n {
            let norm = (0..dh).map(|j| r.at(i, j).powi(2)).sum::<f64>().sqrt().max(1e-12);
            for j in 0..dh {
                reference.put(i, j, c * r.at(i, j) / norm);
            }
        }
        let (q, k, r, reference) = (rotate_rows(&q), rotate_rows(&k), rotate_rows(&r), rotate_rows(&reference));

        let mut sigma_inv = softmax_rows(&r.mul(&reference.transpose()), &mask);
        for i in 0..n {
            sigma_inv.data[i * n + i] += lambda;
        }
        let mut scaled_v = v.clone();
        for i in 0..n {
            for j in 0..dh {
                scaled_v.put(i, j, s_hat[i] * v.at(i, j));
            }
        }
        let o = sigma_inv.inverse()?.mul(&scaled_v);
        let mut scores = q.mul(&k.transpose());
        let scale = 1.0 / (dh as f64).sqrt();
        scores.data.iter_mut().for_each(|s| *s *= scale);
        let z = softmax_rows(&scores, &mask).mul(&o);
        for i in 0..n {
            for j in 0..dh {
                out.put(i, h * dh + j, z.at(i, j));
            }
        }
    }
    Ok(out)
}

/// Primal ridge regression `(XᵀX + λI)⁻¹ Xᵀ Y`, evaluated at `query`.
pub fn primal_ridge_predict(x: &Mat, y: &Mat, query: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let mut gram = x.transpose().mul(x);
    for i in 0..gram.rows {
        gram.data[i * gram.cols + i] += lambda;
    }
    let coef = gram.inverse()?.mul(&x.transpose().mul(y));
    Ok((0..y.cols)
        .map(|c| query.iter().enumerate().map(|(a, &qa)| qa * coef.at(a, c)).sum())
        .collect())
}
