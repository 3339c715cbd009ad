//! Dense row-major tensors of rank at most 4.
//!
//! Axes are read as `batch × head × sequence × feature`; lower-rank tensors drop
//! leading axes. The element type is generic over [`Real`] so that the same code
//! runs in `f32` for training and `f64` for verification.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, ToPrimitive};

use crate::error::{shape_err, Error, Result};

pub const MAX_RANK: usize = 4;

/// Floating-point element type.
pub trait Real:
    Float
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    const BITS: u32;

    fn from_f64(v: f64) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const BITS: u32 = 32;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const BITS: u32 = 64;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

#[inline]
pub fn r<T: Real>(v: f64) -> T {
    <T as Real>::from_f64(v)
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, rejecting inconsistent shapes and non-finite elements.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_rank(shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            ));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "Tensor::new",
                index,
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a tensor without the finiteness scan. Shape consistency is still
    /// checked in debug builds.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert!(shape.len() <= MAX_RANK);
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| r(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![T::zero(); n])
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Size of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Size of the second-to-last axis (1 for rank < 2).
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[self.shape.len() - 2]
        } else {
            1
        }
    }

    /// Number of independent matrices when the last two axes are a matrix.
    pub fn batch(&self) -> usize {
        self.numel().checked_div(self.rows() * self.cols()).unwrap_or(0)
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                assert!(i < n, "index {i} out of bounds for axis of size {n}");
                acc * n + i
            })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        check_rank(shape)?;
        if shape.iter().product::<usize>() != self.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { op, index }),
            None => Ok(self),
        }
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().to_f64().unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|a| a.abs().to_f64().unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .map(|v| <U as Real>::from_f64(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        )
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= 32 {
            f.debug_list().entries(self.data.iter()).finish()
        } else {
            write!(f, "[{} elements]", self.data.len())
        }
    }
}

pub(crate) fn check_rank(shape: &[usize]) -> Result<()> {
    if shape.len() > MAX_RANK {
        Err(Error::RankTooLarge(shape.len()))
    } else {
        Ok(())
    }
}

/// Shapes padded on the left to rank 4, with row-major strides.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout4 {
    pub dims: [usize; 4],
    pub strides: [usize; 4],
}

impl Layout4 {
    pub fn of(shape: &[usize]) -> Self {
        let mut dims = [1usize; 4];
        let off = 4 - shape.len();
        dims[off..].copy_from_slice(shape);
        let mut strides = [0usize; 4];
        let mut acc = 1;
        for ax in (0..4).rev() {
            strides[ax] = acc;
            acc *= dims[ax];
        }
        Self { dims, strides }
    }

    /// Strides for reading this layout broadcast into `out` dims (0 on broadcast axes).
    pub fn broadcast_strides(&self, out: &[usize; 4]) -> [usize; 4] {
        let mut s = self.strides;
        for ax in 0..4 {
            if self.dims[ax] == 1 && out[ax] != 1 {
                s[ax] = 0;
            }
        }
        s
    }
}

/// Numpy-style broadcast of two shapes (rank ≤ 4).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(shape_err(
                    "broadcast",
                    format!("{a:?} and {b:?} are not broadcast-compatible"),
                ))
            }
        };
    }
    Ok(out)
}

/// Elementwise binary op with broadcasting.
pub fn broadcast_zip<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape == b.shape {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(&a.shape, &b.shape)?;
    let out = Layout4::of(&shape);
    let sa = Layout4::of(&a.shape).broadcast_strides(&out.dims);
    let sb = Layout4::of(&b.shape).broadcast_strides(&out.dims);
    let d = out.dims;
    let mut data = Vec::with_capacity(shape.iter().product());
    for i0 in 0..d[0] {
        for i1 in 0..d[1] {
            for i2 in 0..d[2] {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..d[3] {
                    data.push(f(a.data[ba + i3 * sa[3]], b.data[bb + i3 * sb[3]]));
                }
            }
        }
    }
    Ok(Tensor::from_parts(shape, data))
}

/// Sums `grad` (shaped like the broadcast output) back down to `shape`.
pub fn reduce_to_shape<T: Real>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape == shape {
        return grad.clone();
    }
    let out = Layout4::of(&grad.shape);
    let target = Layout4::of(shape);
    let st = target.broadcast_strides(&out.dims);
    let mut acc = vec![T::zero(); shape.iter().product()];
    let d = out.dims;
    let mut k = 0;
    for i0 in 0..d[0] {
        for i1 in 0..d[1] {
            for i2 in 0..d[2] {
                let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                for i3 in 0..d[3] {
                    acc[base + i3 * st[3]] += grad.data[k];
                    k += 1;
                }
            }
        }
    }
    Tensor::from_parts(shape.to_vec(), acc)
}

/// Permutes axes: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Real>(a: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = a.rank();
    let mut seen = [false; MAX_RANK];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(shape_err(
            "permute",
            format!("{perm:?} is not a permutation of {rank} axes"),
        ));
    }
    let in_layout = Layout4::of(&a.shape);
    let off = MAX_RANK - rank;
    let shape: Vec<usize> = perm.iter().map(|&p| a.shape[p]).collect();
    let out = Layout4::of(&shape);
    let mut st = [0usize; 4];
    for (i, &p) in perm.iter().enumerate() {
        st[off + i] = in_layout.strides[off + p];
    }
    let d = out.dims;
    let mut data = Vec::with_capacity(a.numel());
    for i0 in 0..d[0] {
        for i1 in 0..d[1] {
            for i2 in 0..d[2] {
                let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                for i3 in 0..d[3] {
                    data.push(a.data[base + i3 * st[3]]);
                }
            }
        }
    }
    Ok(Tensor::from_parts(shape, data))
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
