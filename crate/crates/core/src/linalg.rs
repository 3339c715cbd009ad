//! Dense kernels shared by every mixer: masked softmax, row normalization,
//! batched matrix products and triangular / general linear solves.
//!
//! All batched routines treat the last two axes as a matrix and iterate the
//! leading axes as independent slices.

use rayon::prelude::*;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{r, Real, Tensor};

pub const DIAG_FLOOR: f64 = 1e-12;
pub const PIVOT_FLOOR: f64 = 1e-12;
pub const NORM_FLOOR: f64 = 1e-12;

/// Which score entries a query row may attend to.
#[derive(Clone, Debug, PartialEq)]
pub enum Mask {
    None,
    /// Row `i` attends to columns `j <= i`.
    Causal,
    /// Explicit `n × n` allow-list, row-major.
    Explicit { n: usize, allowed: Arc<Vec<bool>> },
}

impl Mask {
    pub fn explicit(n: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != n * n {
            return Err(shape_err(
                "Mask::explicit",
                format!("need {} entries, got {}", n * n, allowed.len()),
            ));
        }
        Ok(Mask::Explicit {
            n,
            allowed: Arc::new(allowed),
        })
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        match self {
            Mask::None => true,
            Mask::Causal => j <= i,
            Mask::Explicit { n, allowed } => allowed[i * n + j],
        }
    }

    pub fn is_causal(&self) -> bool {
        matches!(self, Mask::Causal)
    }

    fn check(&self, rows: usize, cols: usize) -> Result<()> {
        match self {
            Mask::Explicit { n, .. } if *n != rows || *n != cols => Err(shape_err(
                "mask",
                format!("mask is {n}×{n}, scores are {rows}×{cols}"),
            )),
            Mask::Causal if rows != cols => Err(shape_err(
                "mask",
                format!("causal mask needs square scores, got {rows}×{cols}"),
            )),
            _ => Ok(()),
        }
    }
}

/// Row-wise softmax over allowed entries; masked entries come out as exact zeros.
pub fn masked_softmax<T: Real>(scores: &Tensor<T>, mask: &Mask) -> Result<Tensor<T>> {
    let (rows, cols) = (scores.rows(), scores.cols());
    mask.check(rows, cols)?;
    if let Some(index) = scores.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "masked_softmax input", index });
    }
    let mut out = vec![T::zero(); scores.numel()];
    if cols == 0 {
        return Ok(Tensor::from_parts(scores.shape().to_vec(), out));
    }
    out.par_chunks_mut(rows * cols)
        .zip(scores.data().par_chunks(rows * cols))
        .try_for_each(|(o, s)| softmax_slice(s, o, rows, cols, mask))?;
    Tensor::from_parts(scores.shape().to_vec(), out).ensure_finite("masked_softmax")
}

fn softmax_slice<T: Real>(
    s: &[T],
    o: &mut [T],
    rows: usize,
    cols: usize,
    mask: &Mask,
) -> Result<()> {
    for i in 0..rows {
        let row = &s[i * cols..(i + 1) * cols];
        let out = &mut o[i * cols..(i + 1) * cols];
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if mask.allows(i, j) && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            return Err(Error::FullyMaskedRow { row: i });
        }
        let mut total = T::zero();
        for (j, (&v, o)) in row.iter().zip(out.iter_mut()).enumerate() {
            if mask.allows(i, j) {
                let e = (v - max).exp();
                *o = e;
                total += e;
            }
        }
        let inv = T::one() / total;
        for o in out.iter_mut() {
            *o *= inv;
        }
    }
    Ok(())
}

/// Backward of row softmax: `s ⊙ (g − rowsum(g ⊙ s))`.
pub fn softmax_backward<T: Real>(s: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let cols = s.cols();
    let mut out = vec![T::zero(); s.numel()];
    out.par_chunks_mut(cols.max(1))
        .zip(s.data().par_chunks(cols.max(1)).zip(g.data().par_chunks(cols.max(1))))
        .for_each(|(o, (s, g))| {
            let dot: T = s.iter().zip(g).map(|(&a, &b)| a * b).sum();
            for ((o, &s), &g) in o.iter_mut().zip(s).zip(g) {
                *o = s * (g - dot);
            }
        });
    Tensor::from_parts(s.shape().to_vec(), out)
}

/// Swaps the last two axes.
pub fn transpose_last<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (a.rows(), a.cols());
    let mut shape = a.shape().to_vec();
    match shape.len() {
        0 => return a.clone(),
        1 => shape.insert(0, 1),
        _ => {}
    }
    let k = shape.len();
    shape.swap(k - 2, k - 1);
    let mut out = vec![T::zero(); a.numel()];
    if m * n > 0 {
        out.chunks_mut(m * n)
            .zip(a.data().chunks(m * n))
            .for_each(|(o, s)| {
                for i in 0..m {
                    for j in 0..n {
                        o[j * m + i] = s[i * n + j];
                    }
                }
            });
    }
    Tensor::from_parts(shape, out)
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
#[inline]
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (c, &b) in crow.iter_mut().zip(brow) {
                *c += aip * b;
            }
        }
    }
}

/// Batched matrix product.
///
/// Either both operands carry the same leading axes, or `b` is a plain
/// matrix shared by every slice of `a` (the projection case).
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(shape_err(
            "matmul",
            format!("operands must be at least matrices: {:?} · {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(shape_err(
            "matmul",
            format!("inner dims differ: {:?} · {:?}", a.shape(), b.shape()),
        ));
    }
    let lead_a = &a.shape()[..a.rank() - 2];
    let lead_b = &b.shape()[..b.rank() - 2];
    let mut shape = lead_a.to_vec();
    shape.extend([m, n]);
    let mut out = vec![T::zero(); shape.iter().product()];
    if m * n == 0 {
        return Ok(Tensor::from_parts(shape, out));
    }
    if k == 0 {
        return Ok(Tensor::from_parts(shape, out));
    }
    if lead_b.is_empty() {
        // Shared right operand: fold every leading axis of `a` into rows.
        const ROW_BLOCK: usize = 64;
        out.par_chunks_mut(ROW_BLOCK * n)
            .zip(a.data().par_chunks(ROW_BLOCK * k))
            .for_each(|(c, a)| gemm_acc(a, b.data(), c, c.len() / n, k, n));
    } else if lead_a == lead_b {
        out.par_chunks_mut(m * n)
            .zip(a.data().par_chunks(m * k))
            .zip(b.data().par_chunks(k * n))
            .for_each(|((c, a), b)| gemm_acc(a, b, c, m, k, n));
    } else {
        return Err(shape_err(
            "matmul",
            format!("batch axes differ: {:?} · {:?}", a.shape(), b.shape()),
        ));
    }
    Tensor::from_parts(shape, out).ensure_finite("matmul")
}

fn check_solve_shapes<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize)> {
    let n = a.cols();
    if a.rank() < 2 || a.rows() != n || b.rank() < 2 || b.rows() != n {
        return Err(shape_err(
            op,
            format!("need square A (…,N,N) and B (…,N,d): {:?}, {:?}", a.shape(), b.shape()),
        ));
    }
    if a.shape()[..a.rank() - 2] != b.shape()[..b.rank() - 2] {
        return Err(shape_err(
            op,
            format!("batch axes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok((n, b.cols()))
}

/// Forward substitution `L X = B`; entries above the diagonal are ignored.
pub fn solve_lower_triangular<T: Real>(l: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = check_solve_shapes("solve_lower_triangular", l, b)?;
    let mut x = b.data().to_vec();
    if n * d > 0 {
        x.par_chunks_mut(n * d)
            .zip(l.data().par_chunks(n * n))
            .try_for_each(|(x, l)| forward_subst(l, x, n, d))?;
    }
    Tensor::from_parts(b.shape().to_vec(), x).ensure_finite("solve_lower_triangular")
}

fn forward_subst<T: Real>(l: &[T], x: &mut [T], n: usize, d: usize) -> Result<()> {
    let floor: T = r(DIAG_FLOOR);
    for i in 0..n {
        let diag = l[i * n + i];
        if !(diag.abs() >= floor) {
            return Err(Error::SingularDiagonal {
                index: i,
                magnitude: diag.abs().to_f64().unwrap_or(f64::NAN),
            });
        }
        let (done, rest) = x.split_at_mut(i * d);
        let xi = &mut rest[..d];
        for j in 0..i {
            let lij = l[i * n + j];
            if lij == T::zero() {
                continue;
            }
            for (xi, &xj) in xi.iter_mut().zip(&done[j * d..(j + 1) * d]) {
                *xi -= lij * xj;
            }
        }
        let inv = T::one() / diag;
        for v in xi.iter_mut() {
            *v *= inv;
        }
    }
    Ok(())
}

/// Solves `Lᵀ X = B` for lower-triangular `L` (an upper-triangular back substitution).
pub fn solve_lower_triangular_transposed<T: Real>(l: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = check_solve_shapes("solve_lower_triangular_transposed", l, b)?;
    let mut x = b.data().to_vec();
    if n * d > 0 {
        x.par_chunks_mut(n * d)
            .zip(l.data().par_chunks(n * n))
            .try_for_each(|(x, l)| back_subst_transposed(l, x, n, d))?;
    }
    Tensor::from_parts(b.shape().to_vec(), x).ensure_finite("solve_lower_triangular_transposed")
}

fn back_subst_transposed<T: Real>(l: &[T], x: &mut [T], n: usize, d: usize) -> Result<()> {
    let floor: T = r(DIAG_FLOOR);
    for i in (0..n).rev() {
        let diag = l[i * n + i];
        if !(diag.abs() >= floor) {
            return Err(Error::SingularDiagonal {
                index: i,
                magnitude: diag.abs().to_f64().unwrap_or(f64::NAN),
            });
        }
        let (head, done) = x.split_at_mut((i + 1) * d);
        let xi = &mut head[i * d..];
        for j in i + 1..n {
            // (Lᵀ)[i, j] = L[j, i]
            let lji = l[j * n + i];
            if lji == T::zero() {
                continue;
            }
            let xj = &done[(j - i - 1) * d..(j - i) * d];
            for (xi, &xj) in xi.iter_mut().zip(xj) {
                *xi -= lji * xj;
            }
        }
        let inv = T::one() / diag;
        for v in xi.iter_mut() {
            *v *= inv;
        }
    }
    Ok(())
}

/// LU factorization with partial pivoting of a batch of square matrices.
#[derive(Clone, Debug)]
pub struct Lu<T> {
    n: usize,
    /// Packed factors per slice: unit-lower `L` below the diagonal, `U` on and above.
    factors: Vec<T>,
    /// Row permutation per slice: row `i` of `PA` is row `perm[i]` of `A`.
    perm: Vec<usize>,
    batch_shape: Vec<usize>,
}

impl<T: Real> Lu<T> {
    pub fn factor(a: &Tensor<T>) -> Result<Self> {
        let n = a.cols();
        if a.rank() < 2 || a.rows() != n {
            return Err(shape_err("lu", format!("need square matrices, got {:?}", a.shape())));
        }
        let mut factors = a.data().to_vec();
        let batch = a.batch();
        let mut perm = vec![0usize; batch * n];
        if n > 0 {
            factors
                .par_chunks_mut(n * n)
                .zip(perm.par_chunks_mut(n))
                .try_for_each(|(f, p)| lu_in_place(f, p, n))?;
        }
        Ok(Self {
            n,
            factors,
            perm,
            batch_shape: a.shape()[..a.rank() - 2].to_vec(),
        })
    }

    fn check_rhs(&self, b: &Tensor<T>) -> Result<usize> {
        if b.rank() < 2 || b.rows() != self.n || b.shape()[..b.rank() - 2] != self.batch_shape[..] {
            return Err(shape_err(
                "lu solve",
                format!("rhs {:?} does not match factors of {:?}×{}", b.shape(), self.batch_shape, self.n),
            ));
        }
        Ok(b.cols())
    }

    /// Solves `A X = B`.
    pub fn solve(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.check_rhs(b)?;
        let n = self.n;
        let mut x = vec![T::zero(); b.numel()];
        if n * d > 0 {
            x.par_chunks_mut(n * d)
                .zip(b.data().par_chunks(n * d))
                .zip(self.factors.par_chunks(n * n).zip(self.perm.par_chunks(n)))
                .for_each(|((x, b), (f, p))| {
                    for i in 0..n {
                        x[i * d..(i + 1) * d].copy_from_slice(&b[p[i] * d..(p[i] + 1) * d]);
                    }
                    // L y = Pb (unit diagonal)
                    for i in 0..n {
                        let (done, rest) = x.split_at_mut(i * d);
                        let xi = &mut rest[..d];
                        for j in 0..i {
                            let lij = f[i * n + j];
                            if lij != T::zero() {
                                for (a, &b) in xi.iter_mut().zip(&done[j * d..(j + 1) * d]) {
                                    *a -= lij * b;
                                }
                            }
                        }
                    }
                    // U x = y
                    for i in (0..n).rev() {
                        let (head, done) = x.split_at_mut((i + 1) * d);
                        let xi = &mut head[i * d..];
                        for j in i + 1..n {
                            let uij = f[i * n + j];
                            if uij != T::zero() {
                                let xj = &done[(j - i - 1) * d..(j - i) * d];
                                for (a, &b) in xi.iter_mut().zip(xj) {
                                    *a -= uij * b;
                                }
                            }
                        }
                        let inv = T::one() / f[i * n + i];
                        for v in xi.iter_mut() {
                            *v *= inv;
                        }
                    }
                });
        }
        Tensor::from_parts(b.shape().to_vec(), x).ensure_finite("lu solve")
    }

    /// Solves `Aᵀ X = B` reusing the factors of `A`.
    pub fn solve_transposed(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.check_rhs(b)?;
        let n = self.n;
        let mut x = vec![T::zero(); b.numel()];
        if n * d > 0 {
            x.par_chunks_mut(n * d)
                .zip(b.data().par_chunks(n * d))
                .zip(self.factors.par_chunks(n * n).zip(self.perm.par_chunks(n)))
                .for_each(|((x, b), (f, p))| {
                    // Aᵀ = Uᵀ Lᵀ P, so solve Uᵀ y = b, Lᵀ z = y, x = Pᵀ z.
                    let mut z = b.to_vec();
                    for i in 0..n {
                        let (done, rest) = z.split_at_mut(i * d);
                        let zi = &mut rest[..d];
                        for j in 0..i {
                            let uji = f[j * n + i];
                            if uji != T::zero() {
                                for (a, &b) in zi.iter_mut().zip(&done[j * d..(j + 1) * d]) {
                                    *a -= uji * b;
                                }
                            }
                        }
                        let inv = T::one() / f[i * n + i];
                        for v in zi.iter_mut() {
                            *v *= inv;
                        }
                    }
                    for i in (0..n).rev() {
                        let (head, done) = z.split_at_mut((i + 1) * d);
                        let zi = &mut head[i * d..];
                        for j in i + 1..n {
                            let lji = f[j * n + i];
                            if lji != T::zero() {
                                let zj = &done[(j - i - 1) * d..(j - i) * d];
                                for (a, &b) in zi.iter_mut().zip(zj) {
                                    *a -= lji * b;
                                }
                            }
                        }
                    }
                    for i in 0..n {
                        x[p[i] * d..(p[i] + 1) * d].copy_from_slice(&z[i * d..(i + 1) * d]);
                    }
                });
        }
        Tensor::from_parts(b.shape().to_vec(), x).ensure_finite("lu solve_transposed")
    }
}

fn lu_in_place<T: Real>(a: &mut [T], perm: &mut [usize], n: usize) -> Result<()> {
    let floor: T = r(PIVOT_FLOOR);
    for (i, p) in perm.iter_mut().enumerate() {
        *p = i;
    }
    for k in 0..n {
        let (mut piv, mut best) = (k, a[k * n + k].abs());
        for i in k + 1..n {
            let v = a[i * n + k].abs();
            if v > best {
                piv = i;
                best = v;
            }
        }
        if !(best >= floor) {
            return Err(Error::SingularMatrix {
                index: k,
                magnitude: best.to_f64().unwrap_or(f64::NAN),
            });
        }
        if piv != k {
            for j in 0..n {
                a.swap(k * n + j, piv * n + j);
            }
            perm.swap(k, piv);
        }
        let inv = T::one() / a[k * n + k];
        for i in k + 1..n {
            let factor = a[i * n + k] * inv;
            a[i * n + k] = factor;
            if factor != T::zero() {
                for j in k + 1..n {
                    let u = a[k * n + j];
                    a[i * n + j] -= factor * u;
                }
            }
        }
    }
    Ok(())
}

/// Solves `A X = B` by LU with partial pivoting, without forming `A⁻¹`.
pub fn solve_general<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_solve_shapes("solve_general", a, b)?;
    Lu::factor(a)?.solve(b)
}

/// Divides each row by `max(‖row‖₂, NORM_FLOOR)`. Returns the normalized rows and
/// the clamped norms.
pub fn l2_normalize_rows_with_norms<T: Real>(m: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let d = m.cols().max(1);
    let floor: T = r(NORM_FLOOR);
    let mut out = m.data().to_vec();
    let mut norms = vec![T::zero(); m.numel() / d];
    out.chunks_mut(d).zip(norms.iter_mut()).for_each(|(row, nrm)| {
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
        *nrm = n;
        for v in row.iter_mut() {
            *v /= n;
        }
    });
    (Tensor::from_parts(m.shape().to_vec(), out), norms)
}

pub fn l2_normalize_rows<T: Real>(m: &Tensor<T>) -> Tensor<T> {
    l2_normalize_rows_with_norms(m).0
}

/// Gauss-Jordan inverse of a single matrix. Oracle-scale only (N ≤ 256).
pub fn explicit_inverse<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let n = a.cols();
    if a.rank() != 2 || a.rows() != n {
        return Err(shape_err("explicit_inverse", format!("need one square matrix, got {:?}", a.shape())));
    }
    if n > 256 {
        return Err(shape_err("explicit_inverse", format!("N = {n} exceeds oracle scale 256")));
    }
    let floor: T = r(PIVOT_FLOOR);
    let w = 2 * n;
    let mut m = vec![T::zero(); n * w];
    for i in 0..n {
        m[i * w..i * w + n].copy_from_slice(&a.data()[i * n..(i + 1) * n]);
        m[i * w + n + i] = T::one();
    }
    for col in 0..n {
        let mut piv = col;
        for i in col + 1..n {
            if m[i * w + col].abs() > m[piv * w + col].abs() {
                piv = i;
            }
        }
        let best = m[piv * w + col].abs();
        if !(best >= floor) {
            return Err(Error::SingularMatrix {
                index: col,
                magnitude: best.to_f64().unwrap_or(f64::NAN),
            });
        }
        if piv != col {
            for j in 0..w {
                m.swap(col * w + j, piv * w + j);
            }
        }
        let inv = T::one() / m[col * w + col];
        for j in 0..w {
            m[col * w + j] *= inv;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = m[i * w + col];
            if f != T::zero() {
                for j in 0..w {
                    let v = m[col * w + j];
                    m[i * w + j] -= f * v;
                }
            }
        }
    }
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        out.extend_from_slice(&m[i * w + n..(i + 1) * w]);
    }
    Tensor::from_parts(vec![n, n], out).ensure_finite("explicit_inverse")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let s = masked_softmax(&t(&[1, 3], &[0., 0., 0.]), &Mask::None).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let only_first = Mask::explicit(3, vec![true, false, false, true, true, false, true, true, true]).unwrap();
        let s = masked_softmax(&t(&[3, 3], &[5., 7., 5., 0., 0., 0., 0., 0., 0.]), &only_first).unwrap();
        assert_eq!(&s.data()[..3], &[1.0, 0.0, 0.0]);
        let s = masked_softmax(&t(&[1, 2], &[0., 3f64.ln()]), &Mask::None).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_fully_masked_row_is_an_error() {
        let m = Mask::explicit(2, vec![true, false, false, false]).unwrap();
        let err = masked_softmax(&t(&[2, 2], &[0.; 4]), &m).unwrap_err();
        assert!(matches!(err, Error::FullyMaskedRow { row: 1 }));
    }

    #[test]
    fn causal_softmax_zeroes_future() {
        let s = masked_softmax(&t(&[3, 3], &[1., 9., 9., 2., 3., 9., 0., 0., 0.]), &Mask::Causal).unwrap();
        assert_eq!(s.get(&[0, 0]), 1.0);
        assert_eq!(s.get(&[0, 1]), 0.0);
        assert_eq!(s.get(&[1, 2]), 0.0);
    }

    #[test]
    fn triangular_examples() {
        let x = solve_lower_triangular(&t(&[2, 2], &[1., 0., 0., 1.]), &t(&[2, 1], &[1., 3.])).unwrap();
        assert_eq!(x.data(), &[1., 3.]);
        let x = solve_lower_triangular(&t(&[2, 2], &[2., 0., 0., 4.]), &t(&[2, 1], &[2., 8.])).unwrap();
        assert_eq!(x.data(), &[1., 2.]);
        let x = solve_lower_triangular(&t(&[2, 2], &[1., 0., 1., 1.]), &t(&[2, 1], &[1., 3.])).unwrap();
        assert_eq!(x.data(), &[1., 2.]);
        // strictly-upper garbage is ignored
        let x = solve_lower_triangular(&t(&[2, 2], &[1., 77., 1., 1.]), &t(&[2, 1], &[1., 3.])).unwrap();
        assert_eq!(x.data(), &[1., 2.]);
        let err = solve_lower_triangular(&t(&[2, 2], &[1., 0., 1., 0.]), &t(&[2, 1], &[1., 3.])).unwrap_err();
        assert!(matches!(err, Error::SingularDiagonal { index: 1, .. }));
    }

    #[test]
    fn transposed_triangular_solve() {
        let l = t(&[3, 3], &[2., 0., 0., 1., 3., 0., -1., 0.5, 4.]);
        let b = t(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
        let x = solve_lower_triangular_transposed(&l, &b).unwrap();
        let lt = transpose_last(&l);
        let back = matmul(&lt, &x).unwrap();
        assert!(back.max_abs_diff(&b) < 1e-14);
    }

    #[test]
    fn general_examples() {
        let b = t(&[2, 2], &[1., 2., 3., 4.]);
        let x = solve_general(&Tensor::eye(2), &b).unwrap();
        assert_eq!(x, b);
        let x = solve_general(&t(&[2, 2], &[2., 1., 1., 2.]), &t(&[2, 1], &[3., 3.])).unwrap();
        assert!(x.max_abs_diff(&t(&[2, 1], &[1., 1.])) < 1e-15);
        let err = solve_general(&t(&[2, 2], &[1., 1., 1., 1.]), &t(&[2, 1], &[1., 2.])).unwrap_err();
        assert!(matches!(err, Error::SingularMatrix { .. }));
    }

    #[test]
    fn lu_transposed_solve_needs_pivoting() {
        let a = t(&[3, 3], &[0., 2., 1., 1., 1., 0., 3., 0., 1.]);
        let b = t(&[3, 1], &[1., 2., 3.]);
        let lu = Lu::factor(&a).unwrap();
        let x = lu.solve_transposed(&b).unwrap();
        let back = matmul(&transpose_last(&a), &x).unwrap();
        assert!(back.max_abs_diff(&b) < 1e-14);
        let x = lu.solve(&b).unwrap();
        assert!(matmul(&a, &x).unwrap().max_abs_diff(&b) < 1e-14);
    }

    #[test]
    fn normalize_examples() {
        let n = l2_normalize_rows(&t(&[3, 2], &[3., 4., 1., 0., 0., 0.]));
        assert!(n.max_abs_diff(&t(&[3, 2], &[0.6, 0.8, 1., 0., 0., 0.])) < 1e-15);
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(explicit_inverse(&Tensor::<f64>::eye(3)).unwrap(), Tensor::eye(3));
        let inv = explicit_inverse(&t(&[2, 2], &[2., 0., 0., 4.])).unwrap();
        assert_eq!(inv.data(), &[0.5, 0., 0., 0.25]);
        let a = t(&[3, 3], &[4., 1., 0.5, -1., 3., 0.2, 0.3, 0.1, 2.]);
        let inv = explicit_inverse(&a).unwrap();
        assert!(matmul(&a, &inv).unwrap().max_abs_diff(&Tensor::eye(3)) < 1e-14);
        assert!(explicit_inverse(&t(&[2, 2], &[1., 2., 2., 4.])).is_err());
    }

    #[test]
    fn matmul_shared_and_batched() {
        let a = t(&[2, 2, 3], &[1., 2., 3., 4., 5., 6., 1., 0., 0., 0., 1., 0.]);
        let w = t(&[3, 1], &[1., 1., 1.]);
        let c = matmul(&a, &w).unwrap();
        assert_eq!(c.shape(), &[2, 2, 1]);
        assert_eq!(c.data(), &[6., 15., 1., 1.]);
        let b = t(&[2, 3, 1], &[1., 0., 0., 0., 0., 1.]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[1., 4., 0., 0.]);
        assert!(matmul(&a, &t(&[2, 1], &[1., 1.])).is_err());
    }
}
