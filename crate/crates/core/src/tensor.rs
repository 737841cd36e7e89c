//! Dense rank-4 tensors in `(n, c, h, w)` row-major layout.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type of a [`Tensor`].
///
/// `f32` is used for training and inference, `f64` for gradient checking.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const NAME: &'static str;

    /// Raw strided GEMM: `C = alpha * A * B + beta * C`.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// matrices; `c` must not alias `a` or `b`.
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
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal fits in scalar type")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix operand for [`gemm`]; `transposed` reads the stored
/// `rows x cols` buffer as its transpose.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Mat {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize, isize, isize) {
        if self.transposed {
            (self.cols, self.rows, 1, self.cols as isize)
        } else {
            (self.rows, self.cols, self.cols as isize, 1)
        }
    }
}

/// `out = a * b + beta * out`, with `out` row-major.
pub(crate) fn gemm<T: Scalar>(a: Mat<'_, T>, b: Mat<'_, T>, beta: T, out: &mut [T]) {
    let (m, k, rsa, csa) = a.logical();
    let (k2, n, rsb, csb) = b.logical();
    assert_eq!(k, k2, "gemm inner dimensions");
    assert_eq!(out.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|x| *x = *x * beta);
        return;
    }
    // SAFETY: the asserts above pin every operand to its buffer length and
    // `out` is a unique borrow distinct from `a` and `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::Shape {
                op: "tensor",
                dim: "data length",
                got: data.len(),
                expected,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([i, j, y, x]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.shape[3]
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Elements of one sample (all channels) of the batch.
    pub fn sample(&self, i: usize) -> &[T] {
        let len = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[i * len..(i + 1) * len]
    }

    /// One `h x w` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.shape[2] * self.shape[3];
        let off = (n * self.shape[1] + c) * hw;
        &self.data[off..off + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let hw = self.shape[2] * self.shape[3];
        let off = (n * self.shape[1] + c) * hw;
        &mut self.data[off..off + hw]
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let [_, cc, h, w] = self.shape;
        self.data[((n * cc + c) * h + y) * w + x]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let [_, cc, h, w] = self.shape;
        self.data[((n * cc + c) * h + y) * w + x] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|x| x.max(lo).min(hi))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|x| U::from_f64(x.f64()).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn reshape(self, shape: [usize; 4]) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Channels `start..start + len` of every sample.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape;
        if start + len > c {
            return Err(Error::Shape {
                op: "narrow_channels",
                dim: "channel range end",
                got: start + len,
                expected: c,
            });
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * len * hw);
        for i in 0..n {
            let base = (i * c + start) * hw;
            data.extend_from_slice(&self.data[base..base + len * hw]);
        }
        Ok(Tensor {
            shape: [n, len, h, w],
            data,
        })
    }

    /// Samples `start..start + len` of the batch.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape;
        if start + len > n {
            return Err(Error::Shape {
                op: "narrow_batch",
                dim: "batch range end",
                got: start + len,
                expected: n,
            });
        }
        let per = c * h * w;
        Ok(Tensor {
            shape: [len, c, h, w],
            data: self.data[start * per..(start + len) * per].to_vec(),
        })
    }

    /// Stacks single-or-multi-sample tensors of equal `(c, h, w)` along the batch axis.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors to stack"))?;
        let [_, c, h, w] = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::Shape {
                    op: "stack",
                    dim: "sample shape",
                    got: p.shape[1] * p.shape[2] * p.shape[3],
                    expected: c * h * w,
                });
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Spatial window `[y0, y0 + h) x [x0, x0 + w)` of every plane.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let [n, c, hh, ww] = self.shape;
        if y0 + h > hh || x0 + w > ww {
            return Err(Error::invalid(
                "crop",
                format!("window {h}x{w} at ({y0},{x0}) exceeds {hh}x{ww}"),
            ));
        }
        Ok(Tensor::from_fn([n, c, h, w], |[i, j, y, x]| {
            self.at(i, j, y0 + y, x0 + x)
        }))
    }

    pub fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        const DIMS: [&str; 4] = ["batch", "channels", "height", "width"];
        for k in 0..4 {
            if self.shape[k] != other.shape[k] {
                return Err(Error::Shape {
                    op,
                    dim: DIMS[k],
                    got: other.shape[k],
                    expected: self.shape[k],
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        let err = Tensor::<f32>::new([1, 2, 3, 3], vec![0.0; 17]).unwrap_err();
        assert!(matches!(err, Error::Shape { got: 17, expected: 18, .. }));
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 + 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64) * 0.5 - 2.0).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(Mat::new(&a, 2, 3), Mat::new(&b, 3, 4), 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // a^T (3x2) times c (2x4)
        let mut d = vec![1.0; 12];
        gemm(Mat::new(&a, 2, 3).t(), Mat::new(&c, 2, 4), 1.0, &mut d);
        for i in 0..3 {
            for j in 0..4 {
                let want: f64 = 1.0 + (0..2).map(|k| a[k * 3 + i] * c[k * 4 + j]).sum::<f64>();
                assert!((d[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn narrow_and_stack() {
        let t = Tensor::<f32>::from_fn([2, 3, 2, 2], |[n, c, y, x]| (n * 100 + c * 10 + y * 2 + x) as f32);
        let mid = t.narrow_channels(1, 1).unwrap();
        assert_eq!(mid.shape(), [2, 1, 2, 2]);
        assert_eq!(mid.at(1, 0, 1, 1), 113.0);
        let a = t.narrow_batch(0, 1).unwrap();
        let b = t.narrow_batch(1, 1).unwrap();
        assert_eq!(Tensor::stack(&[&a, &b]).unwrap(), t);
    }
}
