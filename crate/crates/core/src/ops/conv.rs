use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{gemm, Mat, Scalar, Tensor};

/// Geometry of a convolution layer.
///
/// For [`conv2d`] the weight tensor is `[c_out, c_in, kh, kw]`. For
/// [`conv_transpose2d`] `c_in`/`c_out` are the channels the transposed layer
/// consumes/produces and the weight tensor is `[c_in, c_out, kh, kw]`, i.e. the
/// weights of the strided convolution it is the adjoint of.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kh: usize,
    pub kw: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn new(k: usize, c_in: usize, c_out: usize, stride: usize) -> Self {
        ConvSpec {
            kh: k,
            kw: k,
            c_in,
            c_out,
            stride,
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kh, self.kw]
    }

    pub fn transposed_weight_shape(&self) -> [usize; 4] {
        [self.c_in, self.c_out, self.kh, self.kw]
    }

    fn check_stride(&self, op: &'static str) -> Result<()> {
        if self.stride == 0 || self.kh == 0 || self.kw == 0 {
            return Err(Error::invalid(op, "stride and kernel size must be positive"));
        }
        Ok(())
    }
}

/// SAME padding for one axis: `(output, pad_before, pad_after)`.
///
/// Odd totals put the extra row/column before (top/left).
pub fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out.saturating_sub(1)) * stride + kernel).saturating_sub(input);
    let before = total - total / 2;
    (out, before, total / 2)
}

/// Resolved geometry of a strided convolution from a `big` input to a `small` output.
#[derive(Clone, Copy, Debug)]
struct Geom {
    channels: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
}

impl Geom {
    fn new(channels: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize) -> Self {
        let (oh, pad_top, _) = same_padding(h, kh, stride);
        let (ow, pad_left, _) = same_padding(w, kw, stride);
        Geom {
            channels,
            h,
            w,
            oh,
            ow,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
        }
    }

    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// 1x1 stride-1 convolutions need no patch matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    /// Input row for output row `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, size: usize) -> Option<usize> {
        let p = (o * stride + k).checked_sub(pad)?;
        (p < size).then_some(p)
    }

    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let (oh, ow) = (self.oh, self.ow);
        let plane = self.h * self.w;
        for c in 0..self.channels {
            let xp = &x[c * plane..(c + 1) * plane];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let d = &mut dst[oy * ow..(oy + 1) * ow];
                        match Self::src(oy, ky, self.stride, self.pad_top, self.h) {
                            None => d.iter_mut().for_each(|v| *v = T::zero()),
                            Some(iy) => {
                                let src_row = &xp[iy * self.w..(iy + 1) * self.w];
                                for (ox, v) in d.iter_mut().enumerate() {
                                    *v = match Self::src(ox, kx, self.stride, self.pad_left, self.w) {
                                        Some(ix) => src_row[ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geom::im2col`]: scatters-and-adds `col` into `x` (which is zeroed first).
    fn col2im<T: Scalar>(&self, col: &[T], x: &mut [T]) {
        let (oh, ow) = (self.oh, self.ow);
        let plane = self.h * self.w;
        x.iter_mut().for_each(|v| *v = T::zero());
        for c in 0..self.channels {
            let xp = &mut x[c * plane..(c + 1) * plane];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let Some(iy) = Self::src(oy, ky, self.stride, self.pad_top, self.h) else {
                            continue;
                        };
                        let dst_row = &mut xp[iy * self.w..(iy + 1) * self.w];
                        for (ox, &v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                            if let Some(ix) = Self::src(ox, kx, self.stride, self.pad_left, self.w) {
                                dst_row[ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Patch matrix of one sample; borrowed directly for pointwise layers.
    fn patches<'a, T: Scalar>(&self, x: &'a [T], buf: &'a mut Vec<T>) -> &'a [T] {
        if self.is_pointwise() {
            x
        } else {
            buf.resize(self.rows() * self.cols(), T::zero());
            self.im2col(x, buf);
            buf
        }
    }
}

/// Gradients of a convolution layer.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Vec<T>,
}

fn check_weights<T: Scalar>(op: &'static str, w: &Tensor<T>, want: [usize; 4]) -> Result<()> {
    const DIMS: [&str; 4] = ["weight dim 0", "weight dim 1", "kernel height", "kernel width"];
    for k in 0..4 {
        if w.shape()[k] != want[k] {
            return Err(Error::Shape {
                op,
                dim: DIMS[k],
                got: w.shape()[k],
                expected: want[k],
            });
        }
    }
    Ok(())
}

fn check_bias<T>(op: &'static str, bias: Option<&[T]>, c: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != c => Err(Error::Shape {
            op,
            dim: "bias length",
            got: b.len(),
            expected: c,
        }),
        _ => Ok(()),
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: Option<&[T]>, plane: usize) {
    if let Some(b) = bias {
        for (c, chunk) in out.chunks_mut(plane).enumerate() {
            let bc = b[c % b.len()];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
    }
}

fn bias_grad<T: Scalar>(dy: &Tensor<T>) -> Vec<T> {
    let [n, c, _, _] = dy.shape();
    (0..c)
        .map(|j| (0..n).map(|i| dy.plane(i, j).iter().copied().sum::<T>()).sum())
        .collect()
}

/// Sums per-sample weight gradients in sample order.
fn reduce_in_order<T: Scalar>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in parts {
        acc.iter_mut().zip(&p).for_each(|(a, &b)| *a += b);
    }
    acc
}

fn conv_geom<T: Scalar>(op: &'static str, x: &Tensor<T>, spec: &ConvSpec) -> Result<Geom> {
    spec.check_stride(op)?;
    let [_, c, h, w] = x.shape();
    if c != spec.c_in {
        return Err(Error::Shape {
            op,
            dim: "input channels",
            got: c,
            expected: spec.c_in,
        });
    }
    if h % spec.stride != 0 {
        return Err(Error::Shape {
            op,
            dim: "height (must be divisible by stride)",
            got: h,
            expected: h.div_ceil(spec.stride) * spec.stride,
        });
    }
    if w % spec.stride != 0 {
        return Err(Error::Shape {
            op,
            dim: "width (must be divisible by stride)",
            got: w,
            expected: w.div_ceil(spec.stride) * spec.stride,
        });
    }
    Ok(Geom::new(c, h, w, spec.kh, spec.kw, spec.stride))
}

/// 2-D cross-correlation with SAME zero padding.
///
/// Output is `[n, c_out, ceil(h / stride), ceil(w / stride)]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d";
    let g = conv_geom(OP, x, spec)?;
    check_weights(OP, weights, spec.weight_shape())?;
    check_bias(OP, bias, spec.c_out)?;
    x.ensure_finite(OP)?;

    let mut out = Tensor::zeros([x.n(), spec.c_out, g.oh, g.ow]);
    let per_out = spec.c_out * g.cols();
    let wm = Mat::new(weights.data(), spec.c_out, g.rows());
    exec::for_each_chunk(out.data_mut(), per_out, |i, dst| {
        let mut buf = Vec::new();
        let col = g.patches(x.sample(i), &mut buf);
        gemm(wm, Mat::new(col, g.rows(), g.cols()), T::zero(), dst);
        add_bias(dst, bias, g.cols());
    });
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weights and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    const OP: &str = "conv2d_backward";
    let g = conv_geom(OP, x, spec)?;
    check_weights(OP, weights, spec.weight_shape())?;
    let want = [x.n(), spec.c_out, g.oh, g.ow];
    if dy.shape() != want {
        return Err(Error::Shape {
            op: OP,
            dim: "upstream gradient size",
            got: dy.len(),
            expected: want.iter().product(),
        });
    }
    let wm = Mat::new(weights.data(), spec.c_out, g.rows());
    let wlen = weights.len();
    let parts = exec::map_range(x.n(), |i| {
        let mut buf = Vec::new();
        let col = g.patches(x.sample(i), &mut buf);
        let dyi = Mat::new(dy.sample(i), spec.c_out, g.cols());
        let mut dw = vec![T::zero(); wlen];
        gemm(dyi, Mat::new(col, g.rows(), g.cols()).t(), T::zero(), &mut dw);
        let mut dx = vec![T::zero(); g.channels * g.h * g.w];
        if g.is_pointwise() {
            gemm(wm.t(), dyi, T::zero(), &mut dx);
        } else {
            let mut dcol = vec![T::zero(); g.rows() * g.cols()];
            gemm(wm.t(), dyi, T::zero(), &mut dcol);
            g.col2im(&dcol, &mut dx);
        }
        (dx, dw)
    });
    let mut dx = Vec::with_capacity(x.len());
    let mut dws = Vec::with_capacity(parts.len());
    for (dxi, dwi) in parts {
        dx.extend_from_slice(&dxi);
        dws.push(dwi);
    }
    Ok(ConvGrads {
        dx: Tensor::new(x.shape(), dx)?,
        dw: Tensor::new(weights.shape(), reduce_in_order(dws, wlen))?,
        db: bias_grad(dy),
    })
}

fn transposed_geom<T: Scalar>(op: &'static str, x: &Tensor<T>, spec: &ConvSpec) -> Result<Geom> {
    spec.check_stride(op)?;
    let [_, c, h, w] = x.shape();
    if c != spec.c_in {
        return Err(Error::Shape {
            op,
            dim: "input channels",
            got: c,
            expected: spec.c_in,
        });
    }
    // Geometry of the strided convolution this layer is the adjoint of.
    Ok(Geom::new(
        spec.c_out,
        h * spec.stride,
        w * spec.stride,
        spec.kh,
        spec.kw,
        spec.stride,
    ))
}

/// Transposed convolution: the exact adjoint of a stride-`s` [`conv2d`] with
/// SAME padding. Output is `[n, c_out, s * h, s * w]`.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
) -> Result<Tensor<T>> {
    const OP: &str = "conv_transpose2d";
    let g = transposed_geom(OP, x, spec)?;
    check_weights(OP, weights, spec.transposed_weight_shape())?;
    check_bias(OP, bias, spec.c_out)?;
    x.ensure_finite(OP)?;

    let mut out = Tensor::zeros([x.n(), spec.c_out, g.h, g.w]);
    let per_out = spec.c_out * g.h * g.w;
    let wm = Mat::new(weights.data(), spec.c_in, g.rows());
    exec::for_each_chunk(out.data_mut(), per_out, |i, dst| {
        let xi = Mat::new(x.sample(i), spec.c_in, g.cols());
        if g.is_pointwise() {
            gemm(wm.t(), xi, T::zero(), dst);
        } else {
            let mut col = vec![T::zero(); g.rows() * g.cols()];
            gemm(wm.t(), xi, T::zero(), &mut col);
            g.col2im(&col, dst);
        }
        add_bias(dst, bias, g.h * g.w);
    });
    Ok(out)
}

/// Gradients of [`conv_transpose2d`].
pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    const OP: &str = "conv_transpose2d_backward";
    let g = transposed_geom(OP, x, spec)?;
    check_weights(OP, weights, spec.transposed_weight_shape())?;
    let want = [x.n(), spec.c_out, g.h, g.w];
    if dy.shape() != want {
        return Err(Error::Shape {
            op: OP,
            dim: "upstream gradient size",
            got: dy.len(),
            expected: want.iter().product(),
        });
    }
    let wm = Mat::new(weights.data(), spec.c_in, g.rows());
    let wlen = weights.len();
    let parts = exec::map_range(x.n(), |i| {
        let mut buf = Vec::new();
        let col = g.patches(dy.sample(i), &mut buf);
        let col = Mat::new(col, g.rows(), g.cols());
        let xi = Mat::new(x.sample(i), spec.c_in, g.cols());
        let mut dx = vec![T::zero(); spec.c_in * g.cols()];
        gemm(wm, col, T::zero(), &mut dx);
        let mut dw = vec![T::zero(); wlen];
        gemm(xi, col.t(), T::zero(), &mut dw);
        (dx, dw)
    });
    let mut dx = Vec::with_capacity(x.len());
    let mut dws = Vec::with_capacity(parts.len());
    for (dxi, dwi) in parts {
        dx.extend_from_slice(&dxi);
        dws.push(dwi);
    }
    Ok(ConvGrads {
        dx: Tensor::new(x.shape(), dx)?,
        dw: Tensor::new(weights.shape(), reduce_in_order(dws, wlen))?,
        db: bias_grad(dy),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_shapes() {
        assert_eq!(same_padding(8, 3, 1), (8, 1, 1));
        assert_eq!(same_padding(8, 3, 2), (4, 1, 0));
        assert_eq!(same_padding(8, 4, 2), (4, 1, 1));
        assert_eq!(same_padding(8, 4, 1), (8, 2, 1));
        assert_eq!(same_padding(8, 1, 1), (8, 0, 0));
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::<f64>::from_fn([1, 1, 3, 3], |[_, _, y, x]| (y * 3 + x) as f64);
        let w = Tensor::full([1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &ConvSpec::new(1, 1, 1, 1), &w, Some(&[0.0])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn stride_two_counts_valid_taps() {
        // Top-biased padding of one row/column: output (i, j) sees rows 2i-1..=2i+1.
        let x = Tensor::<f64>::full([1, 1, 4, 4], 1.0);
        let w = Tensor::full([1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &ConvSpec::new(3, 1, 1, 2), &w, None).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        let taps = |o: usize| (0..3).filter(|k| (2 * o + k) >= 1 && 2 * o + k - 1 < 4).count();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(y.at(0, 0, i, j), (taps(i) * taps(j)) as f64);
            }
        }
        assert_eq!(y.data(), &[4.0, 6.0, 6.0, 9.0]);
    }

    #[test]
    fn zero_kernel_transposed_gives_bias() {
        let x = Tensor::<f32>::full([1, 1, 2, 2], 3.0);
        let w = Tensor::zeros([1, 1, 4, 4]);
        let y = conv_transpose2d(&x, &ConvSpec::new(4, 1, 1, 2), &w, Some(&[0.5])).unwrap();
        assert_eq!(y.shape(), [1, 1, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn table_shape_upsampling_row() {
        let x = Tensor::<f32>::zeros([1, 256, 4, 4]);
        let spec = ConvSpec::new(4, 256, 128, 2);
        let w = Tensor::zeros(spec.transposed_weight_shape());
        let y = conv_transpose2d(&x, &spec, &w, None).unwrap();
        assert_eq!(y.shape(), [1, 128, 8, 8]);
    }

    #[test]
    fn shape_errors_name_dimension() {
        let x = Tensor::<f32>::zeros([1, 3, 8, 8]);
        let spec = ConvSpec::new(3, 4, 8, 1);
        let w = Tensor::zeros(spec.weight_shape());
        match conv2d(&x, &spec, &w, None).unwrap_err() {
            Error::Shape { dim, got, expected, .. } => {
                assert_eq!(dim, "input channels");
                assert_eq!((got, expected), (3, 4));
            }
            e => panic!("unexpected {e}"),
        }
        let odd = Tensor::<f32>::zeros([1, 4, 7, 8]);
        let spec2 = ConvSpec::new(3, 4, 8, 2);
        assert!(matches!(
            conv2d(&odd, &spec2, &Tensor::zeros(spec2.weight_shape()), None),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn rejects_non_finite_input() {
        let mut x = Tensor::<f32>::zeros([1, 1, 4, 4]);
        x.set(0, 0, 1, 1, f32::NAN);
        let spec = ConvSpec::new(3, 1, 1, 1);
        let err = conv2d(&x, &spec, &Tensor::zeros(spec.weight_shape()), None).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }
}
