//! Rotary positional encoding over the last axis, with positions taken along
//! the sequence axis (second to last).

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const ROPE_BASE: f64 = 10_000.0;

/// Rotates each consecutive feature pair `(2j, 2j+1)` of row `i` by
/// `positions[i] · base^(−2j/d)`.
pub fn rope_apply<T: Real>(x: &Tensor<T>, positions: &[usize]) -> Result<Tensor<T>> {
    rotate(x, positions, ROPE_BASE, false)
}

/// Same rotation with positions `0..N`.
pub fn rope_apply_sequential<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let positions: Vec<usize> = (0..x.rows()).collect();
    rope_apply(x, &positions)
}

/// Inverse rotation; also the adjoint, so it serves as the backward pass.
pub fn rope_inverse<T: Real>(x: &Tensor<T>, positions: &[usize]) -> Result<Tensor<T>> {
    rotate(x, positions, ROPE_BASE, true)
}

fn rotate<T: Real>(x: &Tensor<T>, positions: &[usize], base: f64, inverse: bool) -> Result<Tensor<T>> {
    let d = x.cols();
    if !d.is_multiple_of(2) {
        return Err(Error::OddHeadDim(d));
    }
    let n = x.rows();
    if positions.len() != n {
        return Err(crate::error::shape_err(
            "rope",
            format!("{} positions for {n} rows", positions.len()),
        ));
    }
    let half = d / 2;
    let mut table = Vec::with_capacity(n * half);
    for &p in positions {
        for j in 0..half {
            let theta = base.powf(-2.0 * j as f64 / d as f64);
            let angle = p as f64 * theta;
            let (s, c) = angle.sin_cos();
            table.push((T::from_f64(c), T::from_f64(if inverse { -s } else { s })));
        }
    }
    let mut out = x.data().to_vec();
    if n * d > 0 {
        for slice in out.chunks_mut(n * d) {
            for i in 0..n {
                let row = &mut slice[i * d..(i + 1) * d];
                for j in 0..half {
                    let (c, s) = table[i * half + j];
                    let (a, b) = (row[2 * j], row[2 * j + 1]);
                    row[2 * j] = a * c - b * s;
                    row[2 * j + 1] = a * s + b * c;
                }
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}
