use crate::error::{shape_err, Result};
use crate::linalg::{explicit_inverse, matmul};
use crate::tensor::{r, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kernel {
    /// `⟨x, y⟩`
    Linear,
    /// `exp(−γ‖x − y‖²)`
    Rbf { gamma: f64 },
    /// `exp(⟨x, y⟩ · scale)`, the unnormalized softmax kernel.
    Exponential { scale: f64 },
}

impl Kernel {
    pub fn eval<T: Real>(&self, x: &[T], y: &[T]) -> T {
        match *self {
            Kernel::Linear => dot(x, y),
            Kernel::Rbf { gamma } => {
                let d2: T = x.iter().zip(y).map(|(&a, &b)| (a - b) * (a - b)).sum();
                (-(r::<T>(gamma)) * d2).exp()
            }
            Kernel::Exponential { scale } => (dot(x, y) * r(scale)).exp(),
        }
    }
}

fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    x.iter().zip(y).map(|(&a, &b)| a * b).sum()
}

/// Literal kernel ridge regression prediction `k(x)ᵀ (K + λI)⁻¹ Y`.
///
/// Forms the inverse explicitly, so it is only meant as a reference for small
/// problems.
pub fn krr_predict_oracle<T: Real>(
    train_x: &Tensor<T>,
    train_y: &Tensor<T>,
    query_x: &[T],
    kernel: Kernel,
    lambda: f64,
) -> Result<Tensor<T>> {
    let (n, d) = (train_x.rows(), train_x.cols());
    if train_x.rank() != 2 || train_y.rank() != 2 || train_y.rows() != n || query_x.len() != d {
        return Err(shape_err(
            "krr_predict_oracle",
            format!(
                "train_x {:?}, train_y {:?}, query of length {}",
                train_x.shape(),
                train_y.shape(),
                query_x.len()
            ),
        ));
    }
    let row = |i: usize| &train_x.data()[i * d..(i + 1) * d];
    let mut gram = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let mut v = kernel.eval(row(i), row(j));
            if i == j {
                v += r(lambda);
            }
            gram.set(&[i, j], v);
        }
    }
    let inv = explicit_inverse(&gram)?;
    let kx: Vec<T> = (0..n).map(|i| kernel.eval(query_x, row(i))).collect();
    let kx = Tensor::new(&[1, n], kx)?;
    let coef = matmul(&inv, train_y)?;
    let pred = matmul(&kx, &coef)?;
    pred.reshape(&[train_y.cols()])
}
