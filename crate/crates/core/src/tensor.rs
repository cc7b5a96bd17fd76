//! Dense row-major tensors and the small set of kernels the model needs.
//!
//! Everything is generic over [`Scalar`] so the same network code runs in
//! 32-bit for training and in 64-bit for finite-difference verification.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Raw GEMM: `c = alpha * a * b + beta * c` with arbitrary strides.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must be
    /// in bounds of the pointed-to buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A strided matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatView {
    pub fn row_major(offset: usize, rows: usize, cols: usize) -> Self {
        MatView {
            offset,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatView {
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.rs as usize + (self.cols - 1) * self.cs as usize
    }
}

/// Safe wrapper: `c = a * b + beta * c`.
pub(crate) fn gemm<F: Scalar>(a: &[F], av: MatView, b: &[F], bv: MatView, beta: F, c: &mut [F], cv: MatView) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension");
    assert_eq!(av.rows, cv.rows, "gemm rows");
    assert_eq!(bv.cols, cv.cols, "gemm cols");
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    if av.cols == 0 {
        // Empty inner product: only the beta scaling applies.
        for i in 0..cv.rows {
            for j in 0..cv.cols {
                let idx = cv.offset + i * cv.rs as usize + j * cv.cs as usize;
                c[idx] = if beta == F::zero() { F::zero() } else { c[idx] * beta };
            }
        }
        return;
    }
    assert!(av.max_index() < a.len(), "gemm a out of bounds");
    assert!(bv.max_index() < b.len(), "gemm b out of bounds");
    assert!(cv.max_index() < c.len(), "gemm c out of bounds");
    unsafe {
        F::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            F::one(),
            a.as_ptr().add(av.offset),
            av.rs,
            av.cs,
            b.as_ptr().add(bv.offset),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs,
            cv.cs,
        );
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match {} elements",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Self::new(shape.to_vec(), data.iter().map(|&v| F::c(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape {:?} -> {:?}",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        self
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| G::c(v.f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shapes");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shapes");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element at a 2-D index.
    pub fn at2(&self, i: usize, j: usize) -> F {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Row `i` of the tensor seen as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[F] {
        let w = self.data.len() / self.shape[0];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Number of matrices stacked in front of the last two axes.
pub(crate) fn batch_of(shape: &[usize]) -> usize {
    shape[..shape.len() - 2].iter().product()
}

/// Batched product `op(a) * op(b)` where `a` is `[.., m, k]` and `b` is
/// `[.., k, n]` (before the optional transposes).  A batch count of 1 on
/// either side broadcasts.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, ta: bool, tb: bool) -> Tensor<F> {
    assert!(a.rank() >= 2 && b.rank() >= 2, "matmul needs rank >= 2");
    let (ba, bb) = (batch_of(a.shape()), batch_of(b.shape()));
    assert!(ba == bb || ba == 1 || bb == 1, "matmul batch {} vs {}", ba, bb);
    let (ar, ac) = (a.dim(a.rank() - 2), a.dim(a.rank() - 1));
    let (br, bc) = (b.dim(b.rank() - 2), b.dim(b.rank() - 1));
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
    let batch = ba.max(bb);
    let mut out_shape: Vec<usize> = if ba >= bb {
        a.shape()[..a.rank() - 2].to_vec()
    } else {
        b.shape()[..b.rank() - 2].to_vec()
    };
    out_shape.push(m);
    out_shape.push(n);
    let mut out = vec![F::zero(); batch * m * n];
    if bb == 1 && !ta && ba == batch {
        // Shared right operand: one tall GEMM over all batch rows.
        let av = MatView::row_major(0, batch * m, k);
        let bv = mview(0, br, bc, tb);
        let cv = MatView::row_major(0, batch * m, n);
        gemm(a.data(), av, b.data(), bv, F::zero(), &mut out, cv);
        return Tensor::new(out_shape, out);
    }
    for p in 0..batch {
        let ao = if ba == 1 { 0 } else { p * ar * ac };
        let bo = if bb == 1 { 0 } else { p * br * bc };
        let av = mview(ao, ar, ac, ta);
        let bv = mview(bo, br, bc, tb);
        let cv = MatView::row_major(p * m * n, m, n);
        gemm(a.data(), av, b.data(), bv, F::zero(), &mut out, cv);
    }
    Tensor::new(out_shape, out)
}

pub(crate) fn mview(offset: usize, rows: usize, cols: usize, transposed: bool) -> MatView {
    let v = MatView::row_major(offset, rows, cols);
    if transposed {
        v.t()
    } else {
        v
    }
}

/// Softmax over the last axis.
pub fn softmax_last<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let n = *x.shape().last().expect("non-scalar");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        softmax_in_place(row);
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let mx = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let mut s = F::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub fn log_softmax_in_place<F: Scalar>(row: &mut [F]) {
    let mx = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let lse = row.iter().map(|&v| (v - mx).exp()).sum::<F>().ln() + mx;
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<F: Scalar>(v: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
