//! Camera-shake point spread functions drawn from a Gaussian process.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::image_ops::reflect_index;

pub const PSF_SIZES: [usize; 3] = [7, 11, 15];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsfOpts {
    /// Fraction in `[0, 1]` of the largest trajectory radius that fits the kernel.
    pub shake_magnitude: f64,
    /// Trajectory samples over the exposure.
    pub samples: usize,
    /// Squared-exponential length-scale as a fraction of the exposure.
    pub length_scale: f64,
}

impl Default for PsfOpts {
    fn default() -> Self {
        PsfOpts {
            shake_magnitude: 1.0,
            samples: 64,
            length_scale: 0.3,
        }
    }
}

/// Normalised `size x size` blur kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct PsfKernel {
    pub size: usize,
    pub weights: Vec<f64>,
}

impl PsfKernel {
    pub fn delta(size: usize) -> Self {
        let mut weights = vec![0.0; size * size];
        weights[(size / 2) * size + size / 2] = 1.0;
        PsfKernel { size, weights }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.weights[y * self.size + x]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Samples one camera-shake kernel.
///
/// A 2-D trajectory of `samples` points is drawn from a zero-mean Gaussian
/// process with squared-exponential covariance per axis, centred, scaled so
/// its largest excursion is `shake_magnitude` times the usable radius, then
/// splatted bilinearly with equal time weights and normalised.
pub fn sample_psf(size: usize, seed: u64, opts: &PsfOpts) -> Result<PsfKernel> {
    if size.is_multiple_of(2) || size < 3 {
        return Err(Error::invalid("sample_psf", format!("kernel size {size} must be odd and >= 3")));
    }
    let t = opts.samples.max(2);
    let ls = opts.length_scale.max(1e-3);
    let cov = DMatrix::from_fn(t, t, |i, j| {
        let d = (i as f64 - j as f64) / (t - 1) as f64;
        (-0.5 * d * d / (ls * ls)).exp() + if i == j { 1e-6 } else { 0.0 }
    });
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::invalid("sample_psf", "covariance is not positive definite"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || {
        let z = DVector::from_fn(t, |_, _| StandardNormal.sample(&mut rng));
        let path = chol.l() * z;
        let mean = path.mean();
        path.map(|v| v - mean)
    };
    let xs = draw();
    let ys = draw();

    let radius = (size as f64 - 1.0) / 2.0 - 1.0;
    let extent = xs.amax().max(ys.amax());
    let mag = opts.shake_magnitude.clamp(0.0, 1.0);
    let scale = if extent > 1e-12 { mag * radius / extent } else { 0.0 };

    let centre = (size / 2) as f64;
    let mut weights = vec![0.0; size * size];
    let w = 1.0 / t as f64;
    for (x, y) in xs.iter().zip(ys.iter()) {
        let px = (centre + x * scale).clamp(0.0, (size - 1) as f64);
        let py = (centre + y * scale).clamp(0.0, (size - 1) as f64);
        let (x0, y0) = (px.floor() as usize, py.floor() as usize);
        let (fx, fy) = (px - x0 as f64, py - y0 as f64);
        let x1 = (x0 + 1).min(size - 1);
        let y1 = (y0 + 1).min(size - 1);
        weights[y0 * size + x0] += w * (1.0 - fx) * (1.0 - fy);
        weights[y0 * size + x1] += w * fx * (1.0 - fy);
        weights[y1 * size + x0] += w * (1.0 - fx) * fy;
        weights[y1 * size + x1] += w * fx * fy;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= total);
    Ok(PsfKernel { size, weights })
}

/// Per-channel 2-D convolution with reflect padding.
pub fn apply_psf<T: Scalar>(frame: &Tensor<T>, kernel: &PsfKernel) -> Tensor<T> {
    let [n, c, h, w] = frame.shape();
    let r = (kernel.size / 2) as isize;
    let mut out = Tensor::zeros(frame.shape());
    for i in 0..n {
        for j in 0..c {
            let src = frame.plane(i, j);
            let dst = out.plane_mut(i, j);
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = 0.0f64;
                    for ky in 0..kernel.size {
                        let sy = reflect_index(y + r - ky as isize, h);
                        for kx in 0..kernel.size {
                            let k = kernel.at(ky, kx);
                            if k == 0.0 {
                                continue;
                            }
                            let sx = reflect_index(x + r - kx as isize, w);
                            acc += k * src[sy * w + sx].f64();
                        }
                    }
                    dst[y as usize * w + x as usize] = T::lit(acc);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_shake_is_centre_delta() {
        for size in PSF_SIZES {
            let k = sample_psf(size, 9, &PsfOpts { shake_magnitude: 0.0, ..Default::default() }).unwrap();
            assert_eq!(k, PsfKernel::delta(size));
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let o = PsfOpts::default();
        assert_eq!(sample_psf(11, 77, &o).unwrap(), sample_psf(11, 77, &o).unwrap());
        assert_ne!(sample_psf(11, 77, &o).unwrap(), sample_psf(11, 78, &o).unwrap());
    }

    #[test]
    fn even_size_rejected() {
        assert!(sample_psf(8, 0, &PsfOpts::default()).is_err());
    }

    #[test]
    fn delta_kernel_is_identity() {
        let f = Tensor::<f64>::from_fn([1, 3, 9, 9], |[_, c, y, x]| (c * 81 + y * 9 + x) as f64);
        assert_eq!(apply_psf(&f, &PsfKernel::delta(7)), f);
    }

    #[test]
    fn constant_image_unchanged() {
        let f = Tensor::<f64>::full([1, 3, 12, 12], 0.3);
        let k = sample_psf(15, 3, &PsfOpts::default()).unwrap();
        assert!(apply_psf(&f, &k).max_abs_diff(&f).unwrap() < 1e-12);
    }
}
