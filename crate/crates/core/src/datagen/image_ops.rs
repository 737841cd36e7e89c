//! Plane-level image helpers shared by the data forge and inference.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Single-channel `h x w` image in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn zeros(h: usize, w: usize) -> Self {
        Plane {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    /// Value at an integer position clamped to the border.
    #[inline]
    pub fn clamped(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.data[y * self.w + x]
    }

    /// Bilinear sample at a real position with edge clamping.
    #[inline]
    pub fn sample(&self, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as usize, x0 as usize);
        let y1 = (y0 + 1).min(self.h - 1);
        let x1 = (x0 + 1).min(self.w - 1);
        let top = self.at(y0, x0) + (self.at(y0, x1) - self.at(y0, x0)) * fx;
        let bottom = self.at(y1, x0) + (self.at(y1, x1) - self.at(y1, x0)) * fx;
        top + (bottom - top) * fy
    }
}

/// Rec. 601 luminance of a 3-channel single-sample tensor (1-channel input passes through).
pub fn luminance<T: Scalar>(frame: &Tensor<T>) -> Plane {
    let (h, w) = (frame.h(), frame.w());
    let mut p = Plane::zeros(h, w);
    if frame.c() >= 3 {
        let (r, g, b) = (frame.plane(0, 0), frame.plane(0, 1), frame.plane(0, 2));
        for i in 0..h * w {
            p.data[i] = 0.299 * r[i].f64() + 0.587 * g[i].f64() + 0.114 * b[i].f64();
        }
    } else {
        for (d, s) in p.data.iter_mut().zip(frame.plane(0, 0)) {
            *d = s.f64();
        }
    }
    p
}

/// Area-averaging downscale by an integer factor (trailing partial blocks dropped).
pub fn downscale_area<T: Scalar>(frame: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::invalid("downscale_area", "factor must be positive"));
    }
    if factor == 1 {
        return Ok(frame.clone());
    }
    let [n, c, h, w] = frame.shape();
    let (oh, ow) = (h / factor, w / factor);
    if oh == 0 || ow == 0 {
        return Err(Error::invalid(
            "downscale_area",
            format!("{h}x{w} is smaller than the factor {factor}"),
        ));
    }
    let norm = T::from_usize(factor * factor).unwrap_or_else(T::one);
    Ok(Tensor::from_fn([n, c, oh, ow], |[i, j, y, x]| {
        let mut s = T::zero();
        for dy in 0..factor {
            for dx in 0..factor {
                s += frame.at(i, j, y * factor + dy, x * factor + dx);
            }
        }
        s / norm
    }))
}

/// Bilinear resize with pixel-centre alignment and edge clamping.
pub fn resize_bilinear<T: Scalar>(frame: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let [n, c, h, w] = frame.shape();
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for i in 0..n {
        for j in 0..c {
            let src = Plane {
                h,
                w,
                data: frame.plane(i, j).iter().map(|v| v.f64()).collect(),
            };
            let dst = out.plane_mut(i, j);
            for y in 0..oh {
                let fy = (y as f64 + 0.5) * sy - 0.5;
                for x in 0..ow {
                    let fx = (x as f64 + 0.5) * sx - 0.5;
                    dst[y * ow + x] = T::lit(src.sample(fy, fx));
                }
            }
        }
    }
    out
}

/// Mirror index without repeating the edge sample (`-1 -> 1`, `n -> n - 2`).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Reflect-pads every plane on the bottom/right so both dims become multiples of `m`.
pub fn pad_reflect_to_multiple<T: Scalar>(frame: &Tensor<T>, m: usize) -> Tensor<T> {
    let [n, c, h, w] = frame.shape();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return frame.clone();
    }
    Tensor::from_fn([n, c, ph, pw], |[i, j, y, x]| {
        frame.at(i, j, reflect_index(y as isize, h), reflect_index(x as isize, w))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect_index(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect_index(-4, 1), 0);
    }

    #[test]
    fn area_downscale_averages_blocks() {
        let t = Tensor::<f64>::from_fn([1, 1, 4, 4], |[_, _, y, x]| (y * 4 + x) as f64);
        let d = downscale_area(&t, 2).unwrap();
        assert_eq!(d.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let t = Tensor::<f32>::full([1, 3, 5, 7], 0.25);
        let r = resize_bilinear(&t, 10, 14);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn padding_keeps_original_region() {
        let t = Tensor::<f32>::from_fn([1, 1, 70, 70], |[_, _, y, x]| (y * 70 + x) as f32);
        let p = pad_reflect_to_multiple(&t, 8);
        assert_eq!(p.shape(), [1, 1, 72, 72]);
        assert_eq!(p.crop(0, 0, 70, 70).unwrap(), t);
        assert_eq!(p.at(0, 0, 70, 3), t.at(0, 0, 68, 3));
    }
}
