//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! Every primitive evaluates eagerly and appends one entry to the [`Tape`].
//! [`Tape::backward`] walks the entries in reverse and returns a [`GradMap`]
//! holding a gradient for every node that the loss depends on.
//!
//! ```
//! use krrmix::autograd::Tape;
//! use krrmix::tensor::Tensor;
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::scalar(0.0));
//! let y = tape.sigmoid(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert!((grads.get(x).unwrap().data()[0] - 0.25).abs() < 1e-15);
//! ```

mod gradcheck;

pub use gradcheck::{finite_difference_check, GradCheckReport};

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::linalg::{self, Lu, Mask};
use crate::model::rope;
use crate::tensor::{self, r, Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Leaf,
    Constant,
    MatMul,
    Transpose,
    Permute,
    Reshape,
    Add,
    Sub,
    Mul,
    ScalarMul,
    MaskedSoftmax,
    Sigmoid,
    Exp,
    Softplus,
    Gelu,
    L2NormalizeRows,
    SolveGeneral,
    SolveLowerTriangular,
    ReduceSum,
    GatherRows,
    CrossEntropy,
    LayerNorm,
    Concat,
    Rope,
}

enum Op<T> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, T),
    MaskedSoftmax(Var),
    Sigmoid(Var),
    Exp(Var),
    Softplus(Var),
    Gelu(Var),
    L2NormalizeRows(Var, Vec<T>),
    SolveGeneral { a: Var, b: Var, lu: Lu<T> },
    SolveLowerTriangular { l: Var, b: Var },
    ReduceSum(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Tensor<T>, count: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, rstd: Vec<T> },
    Concat(Var, Var),
    Rope(Var, Vec<usize>),
}

impl<T> Op<T> {
    fn primitive(&self) -> Primitive {
        match self {
            Op::Leaf => Primitive::Leaf,
            Op::Constant => Primitive::Constant,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Transpose(_) => Primitive::Transpose,
            Op::Permute(..) => Primitive::Permute,
            Op::Reshape(_) => Primitive::Reshape,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::ScalarMul(..) => Primitive::ScalarMul,
            Op::MaskedSoftmax(_) => Primitive::MaskedSoftmax,
            Op::Sigmoid(_) => Primitive::Sigmoid,
            Op::Exp(_) => Primitive::Exp,
            Op::Softplus(_) => Primitive::Softplus,
            Op::Gelu(_) => Primitive::Gelu,
            Op::L2NormalizeRows(..) => Primitive::L2NormalizeRows,
            Op::SolveGeneral { .. } => Primitive::SolveGeneral,
            Op::SolveLowerTriangular { .. } => Primitive::SolveLowerTriangular,
            Op::ReduceSum(_) => Primitive::ReduceSum,
            Op::GatherRows { .. } => Primitive::GatherRows,
            Op::CrossEntropy { .. } => Primitive::CrossEntropy,
            Op::LayerNorm { .. } => Primitive::LayerNorm,
            Op::Concat(..) => Primitive::Concat,
            Op::Rope(..) => Primitive::Rope,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Concat(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(a)
            | Op::Permute(a, _)
            | Op::Reshape(a)
            | Op::ScalarMul(a, _)
            | Op::MaskedSoftmax(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Softplus(a)
            | Op::Gelu(a)
            | Op::L2NormalizeRows(a, _)
            | Op::ReduceSum(a)
            | Op::Rope(a, _) => vec![*a],
            Op::SolveGeneral { a, b, .. } => vec![*a, *b],
            Op::SolveLowerTriangular { l, b } => vec![*l, *b],
            Op::GatherRows { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

thread_local! {
    static CORRUPT_SOLVE_BACKWARD: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with the solve backward rule deliberately broken (the `∇A` term
/// loses its sign) on this thread. Used to prove the gradient suite can fail.
pub fn with_corrupted_solve_backward<R>(f: impl FnOnce() -> R) -> R {
    struct Reset(bool);
    impl Drop for Reset {
        fn drop(&mut self) {
            CORRUPT_SOLVE_BACKWARD.with(|c| c.set(self.0));
        }
    }
    let _reset = Reset(CORRUPT_SOLVE_BACKWARD.with(|c| c.replace(true)));
    f()
}

fn solve_sign<T: Real>() -> T {
    if CORRUPT_SOLVE_BACKWARD.with(|c| c.get()) {
        T::one()
    } else {
        -T::one()
    }
}

/// Single-writer operation record.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients by node id, shaped like the node values.
pub struct GradMap<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> GradMap<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input (masks, identity matrices, data).
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn primitive(&self, v: Var) -> Primitive {
        self.nodes.borrow()[v.0].op.primitive()
    }

    /// Input node ids of `v`, in recording order.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes.borrow()[v.0].op.inputs()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, leaf_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = leaf_grad || op.inputs().iter().any(|i| nodes[i.0].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn val(&self, v: Var) -> Rc<Tensor<T>> {
        self.value(v)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = linalg::matmul(&self.val(a), &self.val(b))?;
        Ok(self.push(out, Op::MatMul(a, b), false))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let va = self.val(a);
        if va.rank() < 2 {
            return Err(shape_err("transpose", format!("rank {} < 2", va.rank())));
        }
        let out = linalg::transpose_last(&va);
        Ok(self.push(out, Op::Transpose(a), false))
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = tensor::permute(&self.val(a), perm)?;
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), false))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), false))
    }

    /// Broadcasting sum.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::broadcast_zip(&self.val(a), &self.val(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), false))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::broadcast_zip(&self.val(a), &self.val(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), false))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::broadcast_zip(&self.val(a), &self.val(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), false))
    }

    pub fn scale(&self, a: Var, c: T) -> Result<Var> {
        let out = self.val(a).map(|x| x * c);
        Ok(self.push(out, Op::ScalarMul(a, c), false))
    }

    pub fn masked_softmax(&self, a: Var, mask: &Mask) -> Result<Var> {
        let out = linalg::masked_softmax(&self.val(a), mask)?;
        Ok(self.push(out, Op::MaskedSoftmax(a), false))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        let out = self.val(a).map(sigmoid);
        Ok(self.push(out, Op::Sigmoid(a), false))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        let out = self.val(a).map(|x| x.exp()).ensure_finite("exp")?;
        Ok(self.push(out, Op::Exp(a), false))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&self, a: Var) -> Result<Var> {
        let out = self.val(a).map(softplus);
        Ok(self.push(out, Op::Softplus(a), false))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        let out = self.val(a).map(|x| gelu(x).0);
        Ok(self.push(out, Op::Gelu(a), false))
    }

    pub fn l2_normalize_rows(&self, a: Var) -> Result<Var> {
        let (out, norms) = linalg::l2_normalize_rows_with_norms(&self.val(a));
        Ok(self.push(out, Op::L2NormalizeRows(a, norms), false))
    }

    pub fn solve_general(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.val(a), self.val(b));
        let lu = Lu::factor(&va)?;
        let out = lu.solve(&vb)?;
        Ok(self.push(out, Op::SolveGeneral { a, b, lu }, false))
    }

    pub fn solve_lower_triangular(&self, l: Var, b: Var) -> Result<Var> {
        let out = linalg::solve_lower_triangular(&self.val(l), &self.val(b))?;
        Ok(self.push(out, Op::SolveLowerTriangular { l, b }, false))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.val(a).sum());
        Ok(self.push(out, Op::ReduceSum(a), false))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.val(a).numel().max(1);
        let s = self.sum(a)?;
        self.scale(s, r(1.0 / n as f64))
    }

    /// Row lookup: `table[ids[i], :]`, output `[ids.len(), cols]`.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.val(table);
        if t.rank() != 2 {
            return Err(shape_err("gather_rows", format!("table must be a matrix, got {:?}", t.shape())));
        }
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::TargetOutOfRange { target: id, vocab: rows });
            }
            data.extend_from_slice(&t.data()[id * cols..(id + 1) * cols]);
        }
        let out = Tensor::from_parts(vec![ids.len(), cols], data);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            false,
        ))
    }

    /// Mean next-token cross-entropy over rows whose target is `Some`.
    /// `logits` is viewed as `[rows, vocab]`.
    pub fn cross_entropy(&self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let z = self.val(logits);
        let vocab = z.cols();
        let rows = z.numel() / vocab.max(1);
        if rows != targets.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("{rows} logit rows for {} targets", targets.len()),
            ));
        }
        let mut probs = vec![T::zero(); z.numel()];
        let mut total = T::zero();
        let mut count = 0usize;
        for (i, t) in targets.iter().enumerate() {
            let row = &z.data()[i * vocab..(i + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (p, &v) in probs[i * vocab..].iter_mut().zip(row) {
                *p = (v - max).exp();
                s += *p;
            }
            for p in probs[i * vocab..(i + 1) * vocab].iter_mut() {
                *p /= s;
            }
            if let Some(t) = *t {
                if t >= vocab {
                    return Err(Error::TargetOutOfRange { target: t, vocab });
                }
                total += s.ln() + max - row[t];
                count += 1;
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / r(count as f64)
        };
        let probs = Tensor::from_parts(z.shape().to_vec(), probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            false,
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.val(x), self.val(gamma), self.val(beta));
        let d = vx.cols();
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", vx.shape(), vg.shape(), vb.shape()),
            ));
        }
        let eps: T = r(LAYER_NORM_EPS);
        let inv_d: T = r(1.0 / d as f64);
        let mut xhat = vx.data().to_vec();
        let mut rstd = Vec::with_capacity(vx.numel() / d.max(1));
        let mut out = vec![T::zero(); vx.numel()];
        for (row, o) in xhat.chunks_mut(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, (v, o)) in row.iter_mut().zip(o.iter_mut()).enumerate() {
                *v = (*v - mean) * rs;
                *o = *v * vg.data()[j] + vb.data()[j];
            }
        }
        let xhat = Tensor::from_parts(vx.shape().to_vec(), xhat);
        let out = Tensor::from_parts(vx.shape().to_vec(), out);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            false,
        ))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.val(a), self.val(b));
        if va.rank() == 0 || va.rank() != vb.rank() || va.shape()[..va.rank() - 1] != vb.shape()[..vb.rank() - 1] {
            return Err(shape_err("concat", format!("{:?} ++ {:?}", va.shape(), vb.shape())));
        }
        let (ca, cb) = (va.cols(), vb.cols());
        let rows = va.numel() / ca.max(1);
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        for i in 0..rows {
            data.extend_from_slice(&va.data()[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&vb.data()[i * cb..(i + 1) * cb]);
        }
        let mut shape = va.shape().to_vec();
        *shape.last_mut().expect("rank > 0") = ca + cb;
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(a, b), false))
    }

    /// Rotary encoding along the sequence axis with the given positions.
    pub fn rope(&self, a: Var, positions: &[usize]) -> Result<Var> {
        let out = rope::rope_apply(&self.val(a), positions)?;
        Ok(self.push(out, Op::Rope(a, positions.to_vec()), false))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<GradMap<T>> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let contributions = self.node_backward(&nodes, node, &g)?;
            grads[id] = Some(g);
            for (input, contrib) in contributions {
                if !nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(contrib.shape(), nodes[input.0].value.shape());
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += *c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(GradMap { grads })
    }

    fn node_backward(&self, nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &nodes[v.0].value;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if needs(*a) {
                    out.push((*a, linalg::matmul(g, &linalg::transpose_last(vb))?));
                }
                if needs(*b) {
                    let gb = if vb.rank() == 2 && va.rank() > 2 {
                        let k = va.cols();
                        let a2 = va.reshape(&[va.numel() / k, k])?;
                        let g2 = g.reshape(&[g.numel() / g.cols(), g.cols()])?;
                        linalg::matmul(&linalg::transpose_last(&a2), &g2)?
                    } else {
                        linalg::matmul(&linalg::transpose_last(va), g)?
                    };
                    out.push((*b, gb));
                }
            }
            Op::Transpose(a) => out.push((*a, linalg::transpose_last(g))),
            Op::Permute(a, perm) => {
                out.push((*a, tensor::permute(g, &tensor::inverse_permutation(perm))?));
            }
            Op::Reshape(a) => out.push((*a, g.reshape(val(*a).shape())?)),
            Op::Add(a, b) => {
                out.push((*a, tensor::reduce_to_shape(g, val(*a).shape())));
                out.push((*b, tensor::reduce_to_shape(g, val(*b).shape())));
            }
            Op::Sub(a, b) => {
                out.push((*a, tensor::reduce_to_shape(g, val(*a).shape())));
                out.push((*b, tensor::reduce_to_shape(&g.map(|x| -x), val(*b).shape())));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if needs(*a) {
                    let ga = tensor::broadcast_zip(g, vb, |x, y| x * y)?;
                    out.push((*a, tensor::reduce_to_shape(&ga, va.shape())));
                }
                if needs(*b) {
                    let gb = tensor::broadcast_zip(g, va, |x, y| x * y)?;
                    out.push((*b, tensor::reduce_to_shape(&gb, vb.shape())));
                }
            }
            Op::ScalarMul(a, c) => out.push((*a, g.map(|x| x * *c))),
            Op::MaskedSoftmax(a) => out.push((*a, linalg::softmax_backward(&node.value, g))),
            Op::Sigmoid(a) => {
                out.push((*a, node.value.zip_map(g, |s, g| g * s * (T::one() - s))?));
            }
            Op::Exp(a) => out.push((*a, node.value.zip_map(g, |y, g| g * y)?)),
            Op::Softplus(a) => out.push((*a, val(*a).zip_map(g, |x, g| g * sigmoid(x))?)),
            Op::Gelu(a) => out.push((*a, val(*a).zip_map(g, |x, g| g * gelu(x).1)?)),
            Op::L2NormalizeRows(a, norms) => {
                let y = &node.value;
                let d = y.cols().max(1);
                let mut gx = vec![T::zero(); y.numel()];
                for (((gx, y), g), &n) in gx
                    .chunks_mut(d)
                    .zip(y.data().chunks(d))
                    .zip(g.data().chunks(d))
                    .zip(norms)
                {
                    let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    for ((o, &y), &g) in gx.iter_mut().zip(y).zip(g) {
                        *o = (g - y * dot) / n;
                    }
                }
                out.push((*a, Tensor::from_parts(y.shape().to_vec(), gx)));
            }
            Op::SolveGeneral { a, b, lu } => {
                let gb = lu.solve_transposed(g)?;
                if needs(*a) {
                    let ga = linalg::matmul(&gb, &linalg::transpose_last(&node.value))?;
                    let sign = solve_sign::<T>();
                    out.push((*a, ga.map(|v| v * sign)));
                }
                out.push((*b, gb));
            }
            Op::SolveLowerTriangular { l, b } => {
                let vl = val(*l);
                let gb = linalg::solve_lower_triangular_transposed(vl, g)?;
                if needs(*l) {
                    let mut gl = linalg::matmul(&gb, &linalg::transpose_last(&node.value))?;
                    let n = vl.cols();
                    let sign = solve_sign::<T>();
                    for slice in gl.data_mut().chunks_mut(n * n) {
                        for i in 0..n {
                            for j in 0..n {
                                let v = &mut slice[i * n + j];
                                *v = if j <= i { *v * sign } else { T::zero() };
                            }
                        }
                    }
                    out.push((*l, gl));
                }
                out.push((*b, gb));
            }
            Op::ReduceSum(a) => {
                let s = g.data()[0];
                out.push((*a, Tensor::full(val(*a).shape(), s)));
            }
            Op::GatherRows { table, ids } => {
                let t = val(*table);
                let cols = t.cols();
                let mut gt = Tensor::zeros(t.shape());
                let data = gt.data_mut();
                for (k, &id) in ids.iter().enumerate() {
                    for (d, &s) in data[id * cols..(id + 1) * cols]
                        .iter_mut()
                        .zip(&g.data()[k * cols..(k + 1) * cols])
                    {
                        *d += s;
                    }
                }
                out.push((*table, gt));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let vocab = probs.cols();
                let mut gl = Tensor::zeros(probs.shape());
                if *count > 0 {
                    let scale = g.data()[0] / r(*count as f64);
                    let data = gl.data_mut();
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for j in 0..vocab {
                                data[i * vocab + j] = probs.data()[i * vocab + j] * scale;
                            }
                            data[i * vocab + t] -= scale;
                        }
                    }
                }
                out.push((*logits, gl));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let vg = val(*gamma);
                let d = xhat.cols();
                let inv_d: T = r(1.0 / d as f64);
                let mut gx = vec![T::zero(); xhat.numel()];
                let mut ggamma = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                for (((gx, xh), g), &rs) in gx
                    .chunks_mut(d)
                    .zip(xhat.data().chunks(d))
                    .zip(g.data().chunks(d))
                    .zip(rstd)
                {
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for j in 0..d {
                        let dxh = g[j] * vg.data()[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                        ggamma[j] += g[j] * xh[j];
                        gbeta[j] += g[j];
                    }
                    mean_dxh *= inv_d;
                    mean_dxh_xh *= inv_d;
                    for j in 0..d {
                        let dxh = g[j] * vg.data()[j];
                        gx[j] = rs * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                out.push((*x, Tensor::from_parts(xhat.shape().to_vec(), gx)));
                out.push((*gamma, Tensor::from_parts(vec![d], ggamma)));
                out.push((*beta, Tensor::from_parts(vec![d], gbeta)));
            }
            Op::Concat(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (ca, cb) = (va.cols(), vb.cols());
                let rows = va.numel() / ca.max(1);
                let mut ga = Vec::with_capacity(va.numel());
                let mut gb = Vec::with_capacity(vb.numel());
                for i in 0..rows {
                    let row = &g.data()[i * (ca + cb)..(i + 1) * (ca + cb)];
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                out.push((*a, Tensor::from_parts(va.shape().to_vec(), ga)));
                out.push((*b, Tensor::from_parts(vb.shape().to_vec(), gb)));
            }
            Op::Rope(a, positions) => out.push((*a, rope::rope_inverse(g, positions)?)),
        }
        Ok(out)
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of softplus for positive `y`.
pub(crate) fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// GELU (tanh form) and its derivative.
#[inline]
fn gelu<T: Real>(x: T) -> (T, T) {
    let c: T = r((2.0 / std::f64::consts::PI).sqrt());
    let k: T = r(0.044_715);
    let half: T = r(0.5);
    let three: T = r(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let du = c * (T::one() + three * k * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
    (y, dy)
}
