//! Dense optical flow: coarse-to-fine Horn-Schunck with per-level warping.
//!
//! Convention: `estimate_flow(a, b)` returns `w` with `a(x) ~ b(x + w(x))`, so
//! backward-warping `b` by `w` reconstructs `a`. If `b` is `a` translated by
//! `d`, the flow is `d` everywhere.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::image_ops::{luminance, Plane};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FlowDirection {
    /// Carries `f_t` to `f_{t+1}` when used to backward-warp `f_t`.
    Forward,
    /// Carries `f_{t+1}` to `f_t`.
    Backward,
    Unspecified,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub h: usize,
    pub w: usize,
    /// Horizontal displacement in pixels.
    pub u: Vec<f32>,
    /// Vertical displacement in pixels.
    pub v: Vec<f32>,
    pub direction: FlowDirection,
    /// Set when the images carry too little gradient energy to estimate motion.
    pub low_confidence: bool,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField {
            h,
            w,
            u: vec![0.0; h * w],
            v: vec![0.0; h * w],
            direction: FlowDirection::Unspecified,
            low_confidence: false,
        }
    }

    /// Constant displacement everywhere.
    pub fn uniform(h: usize, w: usize, u: f32, v: f32) -> Self {
        FlowField {
            u: vec![u; h * w],
            v: vec![v; h * w],
            ..Self::zeros(h, w)
        }
    }

    pub fn with_direction(mut self, d: FlowDirection) -> Self {
        self.direction = d;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|x| x.is_finite())
    }

    /// Mean of `(u, v)` over the window `[y0, y1) x [x0, x1)`.
    pub fn mean_in(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> (f64, f64) {
        let (mut su, mut sv, mut n) = (0.0, 0.0, 0.0);
        for y in y0..y1 {
            for x in x0..x1 {
                su += self.u[y * self.w + x] as f64;
                sv += self.v[y * self.w + x] as f64;
                n += 1.0;
            }
        }
        (su / n, sv / n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FlowOpts {
    pub levels: usize,
    pub iterations: usize,
    /// Re-linearisations per pyramid level; iterations are split between them.
    pub warps: usize,
    /// Smoothness weight, in units of 8-bit intensity.
    pub smoothness: f64,
    pub max_displacement: f64,
    /// Mean gradient magnitude (8-bit units) below which the flow is declared unreliable.
    pub min_gradient: f64,
}

impl Default for FlowOpts {
    fn default() -> Self {
        FlowOpts {
            levels: 3,
            iterations: 100,
            warps: 4,
            smoothness: 15.0,
            max_displacement: 32.0,
            min_gradient: 0.05,
        }
    }
}

/// Half-resolution level: separable `[1, 3, 3, 1] / 8` prefilter centred on
/// each 2x2 cell, so fine texture is attenuated instead of aliased.
fn halve(p: &Plane) -> Plane {
    const TAPS: [f64; 4] = [0.125, 0.375, 0.375, 0.125];
    let (h, w) = (p.h / 2, p.w / 2);
    let mut rows = Plane::zeros(p.h, w);
    for y in 0..p.h as isize {
        for x in 0..w {
            let x0 = 2 * x as isize - 1;
            rows.data[y as usize * w + x] = TAPS.iter().enumerate().map(|(k, t)| t * p.clamped(y, x0 + k as isize)).sum();
        }
    }
    let mut out = Plane::zeros(h, w);
    for y in 0..h {
        let y0 = 2 * y as isize - 1;
        for x in 0..w as isize {
            out.data[y * w + x as usize] = TAPS.iter().enumerate().map(|(k, t)| t * rows.clamped(y0 + k as isize, x)).sum();
        }
    }
    out
}

/// Resamples a flow component to a new grid and rescales its magnitude.
fn resample(p: &Plane, h: usize, w: usize, gain: f64) -> Plane {
    let sy = p.h as f64 / h as f64;
    let sx = p.w as f64 / w as f64;
    let mut out = Plane::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let v = p.sample((y as f64 + 0.5) * sy - 0.5, (x as f64 + 0.5) * sx - 0.5);
            out.data[y * w + x] = v * gain;
        }
    }
    out
}

fn warp_plane(p: &Plane, u: &Plane, v: &Plane) -> Plane {
    let mut out = Plane::zeros(p.h, p.w);
    for y in 0..p.h {
        for x in 0..p.w {
            let i = y * p.w + x;
            out.data[i] = p.sample(y as f64 + v.data[i], x as f64 + u.data[i]);
        }
    }
    out
}

fn mean_gradient(p: &Plane) -> f64 {
    if p.h < 2 || p.w < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    for y in 0..p.h as isize {
        for x in 0..p.w as isize {
            let gx = 0.5 * (p.clamped(y, x + 1) - p.clamped(y, x - 1));
            let gy = 0.5 * (p.clamped(y + 1, x) - p.clamped(y - 1, x));
            s += (gx * gx + gy * gy).sqrt();
        }
    }
    s / (p.h * p.w) as f64
}

/// Horn-Schunck neighbourhood average (1/6 edge, 1/12 corner weights).
#[inline]
fn neighbour_mean(p: &Plane, y: isize, x: isize) -> f64 {
    (p.clamped(y - 1, x) + p.clamped(y + 1, x) + p.clamped(y, x - 1) + p.clamped(y, x + 1)) / 6.0
        + (p.clamped(y - 1, x - 1) + p.clamped(y - 1, x + 1) + p.clamped(y + 1, x - 1) + p.clamped(y + 1, x + 1))
            / 12.0
}

/// 5x5 median of a flow component, which removes isolated outliers after each
/// warp without smoothing across motion boundaries.
fn median5(p: &Plane) -> Plane {
    let mut out = Plane::zeros(p.h, p.w);
    let mut win = Vec::with_capacity(25);
    for y in 0..p.h as isize {
        for x in 0..p.w as isize {
            win.clear();
            for dy in -2..=2 {
                for dx in -2..=2 {
                    win.push(p.clamped(y + dy, x + dx));
                }
            }
            win.sort_by(f64::total_cmp);
            out.data[y as usize * p.w + x as usize] = win[12];
        }
    }
    out
}

/// Refines `(u, v)` on one pyramid level.
fn refine(a: &Plane, b: &Plane, u: &mut Plane, v: &mut Plane, opts: &FlowOpts) {
    let alpha2 = opts.smoothness * opts.smoothness;
    let warps = opts.warps.max(1);
    let per_warp = (opts.iterations / warps).max(1);
    let (h, w) = (a.h as isize, a.w as isize);
    for _ in 0..warps {
        let bw = warp_plane(b, u, v);
        let n = a.h * a.w;
        let (mut ix, mut iy, mut it) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) as usize;
                ix[i] = 0.25
                    * (a.clamped(y, x + 1) - a.clamped(y, x - 1) + bw.clamped(y, x + 1) - bw.clamped(y, x - 1));
                iy[i] = 0.25
                    * (a.clamped(y + 1, x) - a.clamped(y - 1, x) + bw.clamped(y + 1, x) - bw.clamped(y - 1, x));
                it[i] = bw.data[i] - a.data[i];
                // Positions warped out of the frame carry no usable brightness constraint.
                let (sy, sx) = (y as f64 + v.data[i], x as f64 + u.data[i]);
                if sy < 0.0 || sx < 0.0 || sy > (h - 1) as f64 || sx > (w - 1) as f64 {
                    ix[i] = 0.0;
                    iy[i] = 0.0;
                    it[i] = 0.0;
                }
            }
        }
        let (u0, v0) = (u.clone(), v.clone());
        for _ in 0..per_warp {
            let (uo, vo) = (u.clone(), v.clone());
            for y in 0..h {
                for x in 0..w {
                    let i = (y * w + x) as usize;
                    let ub = neighbour_mean(&uo, y, x);
                    let vb = neighbour_mean(&vo, y, x);
                    let r = ix[i] * (ub - u0.data[i]) + iy[i] * (vb - v0.data[i]) + it[i];
                    let k = r / (alpha2 + ix[i] * ix[i] + iy[i] * iy[i]);
                    u.data[i] = ub - ix[i] * k;
                    v.data[i] = vb - iy[i] * k;
                }
            }
        }
        *u = median5(u);
        *v = median5(v);
    }
}

/// Dense flow from `a` to `b` (see the module docs for the convention).
pub fn estimate_flow<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, opts: &FlowOpts) -> Result<FlowField> {
    a.expect_same_shape(b, "estimate_flow")?;
    if a.n() != 1 {
        return Err(Error::invalid("estimate_flow", "expects single frames"));
    }
    let (h, w) = (a.h(), a.w());
    let to_8bit = |p: Plane| Plane {
        data: p.data.iter().map(|v| v * 255.0).collect(),
        ..p
    };
    let ga = to_8bit(luminance(a));
    let gb = to_8bit(luminance(b));

    if mean_gradient(&ga).max(mean_gradient(&gb)) < opts.min_gradient {
        let mut f = FlowField::zeros(h, w);
        f.low_confidence = true;
        return Ok(f);
    }

    let mut pyr_a = vec![ga];
    let mut pyr_b = vec![gb];
    while pyr_a.len() < opts.levels.max(1) {
        let last = pyr_a.last().expect("non-empty");
        if last.h / 2 < 8 || last.w / 2 < 8 {
            break;
        }
        let na = halve(last);
        let nb = halve(pyr_b.last().expect("non-empty"));
        pyr_a.push(na);
        pyr_b.push(nb);
    }

    let coarsest = pyr_a.last().expect("non-empty");
    let mut u = Plane::zeros(coarsest.h, coarsest.w);
    let mut v = Plane::zeros(coarsest.h, coarsest.w);
    for level in (0..pyr_a.len()).rev() {
        let (pa, pb) = (&pyr_a[level], &pyr_b[level]);
        if u.h != pa.h || u.w != pa.w {
            let gy = pa.h as f64 / u.h as f64;
            let gx = pa.w as f64 / u.w as f64;
            u = resample(&u, pa.h, pa.w, gx);
            v = resample(&v, pa.h, pa.w, gy);
        }
        refine(pa, pb, &mut u, &mut v, opts);
    }

    let m = opts.max_displacement;
    let clamp = |p: Plane| -> Vec<f32> {
        p.data
            .iter()
            .map(|&x| if x.is_finite() { x.clamp(-m, m) as f32 } else { 0.0 })
            .collect()
    };
    Ok(FlowField {
        h,
        w,
        u: clamp(u),
        v: clamp(v),
        direction: FlowDirection::Unspecified,
        low_confidence: false,
    })
}

/// Flows for the frame pair `(f_t, f_t1)` in the orientation the subframe
/// synthesis expects: `(forward, backward)`.
pub fn bidirectional_flow<T: Scalar>(
    f_t: &Tensor<T>,
    f_t1: &Tensor<T>,
    opts: &FlowOpts,
) -> Result<(FlowField, FlowField)> {
    let fwd = estimate_flow(f_t1, f_t, opts)?.with_direction(FlowDirection::Forward);
    let bwd = estimate_flow(f_t, f_t1, opts)?.with_direction(FlowDirection::Backward);
    Ok((fwd, bwd))
}

/// Backward-warps `frame` by `alpha * flow`: output at `x` samples `frame` at
/// `x + alpha * flow(x)` bilinearly, clamping to the border.
pub fn warp_bilinear<T: Scalar>(frame: &Tensor<T>, flow: &FlowField, alpha: f64) -> Result<Tensor<T>> {
    let [n, c, h, w] = frame.shape();
    if (h, w) != (flow.h, flow.w) {
        return Err(Error::Shape {
            op: "warp_bilinear",
            dim: "flow size",
            got: flow.h * flow.w,
            expected: h * w,
        });
    }
    let mut out = Tensor::zeros(frame.shape());
    for i in 0..n {
        for j in 0..c {
            let src = Plane {
                h,
                w,
                data: frame.plane(i, j).iter().map(|v| v.f64()).collect(),
            };
            let dst = out.plane_mut(i, j);
            for y in 0..h {
                for x in 0..w {
                    let k = y * w + x;
                    let sy = y as f64 + alpha * flow.v[k] as f64;
                    let sx = x as f64 + alpha * flow.u[k] as f64;
                    dst[k] = T::lit(src.sample(sy, sx));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Smooth band-limited texture, evaluated analytically at any position.
    pub(crate) fn texture(y: f64, x: f64) -> f64 {
        0.5 + 0.12 * (0.31 * x + 0.17 * y).sin()
            + 0.1 * (0.23 * y - 0.41 * x + 1.0).sin()
            + 0.08 * (0.53 * x + 0.47 * y + 2.0).cos()
            + 0.06 * (0.71 * y + 0.05 * x).sin()
    }

    fn frame(h: usize, w: usize, dx: f64, dy: f64) -> Tensor<f32> {
        Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
            (texture(y as f64 - dy, x as f64 - dx) * (0.8 + 0.1 * c as f64)) as f32
        })
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let f = frame(48, 48, 0.0, 0.0);
        let flow = estimate_flow(&f, &f, &FlowOpts::default()).unwrap();
        assert!(!flow.low_confidence);
        assert!(flow.u.iter().chain(&flow.v).all(|&x| x.abs() < 1e-6));
    }

    #[test]
    fn constant_frames_are_low_confidence() {
        let f = Tensor::<f32>::full([1, 3, 32, 32], 0.4);
        let flow = estimate_flow(&f, &f, &FlowOpts::default()).unwrap();
        assert!(flow.low_confidence);
        assert!(flow.u.iter().chain(&flow.v).all(|&x| x == 0.0));
    }

    #[test]
    fn recovers_known_translation() {
        for (dx, dy) in [(2.0, 0.0), (0.0, -1.5), (3.0, 2.0), (-4.0, 0.0)] {
            let a = frame(64, 64, 0.0, 0.0);
            let b = frame(64, 64, dx, dy);
            let flow = estimate_flow(&a, &b, &FlowOpts::default()).unwrap();
            let (mu, mv) = flow.mean_in(12, 52, 12, 52);
            assert!((mu - dx).abs() < 0.25 && (mv - dy).abs() < 0.25, "({dx},{dy}) -> ({mu},{mv})");
        }
    }

    #[test]
    fn zero_alpha_is_identity() {
        let f = frame(16, 16, 0.0, 0.0);
        let flow = FlowField::uniform(16, 16, 3.3, -1.2);
        assert_eq!(warp_bilinear(&f, &flow, 0.0).unwrap(), f);
    }

    #[test]
    fn integer_flow_shifts_ramp() {
        let ramp = Tensor::<f64>::from_fn([1, 1, 8, 8], |[_, _, y, x]| (x + 10 * y) as f64);
        let flow = FlowField::uniform(8, 8, 1.0, 0.0);
        let out = warp_bilinear(&ramp, &flow, 1.0).unwrap();
        for y in 0..8 {
            for x in 0..7 {
                assert_eq!(out.at(0, 0, y, x), ramp.at(0, 0, y, x + 1));
            }
            assert_eq!(out.at(0, 0, y, 7), ramp.at(0, 0, y, 7));
        }
    }

    #[test]
    fn warp_round_trip_on_smooth_field() {
        let f = Tensor::<f32>::from_fn([1, 3, 40, 40], |[_, c, y, x]| {
            (0.5 + 0.2 * (0.15 * x as f64 + 0.1 * y as f64 + c as f64).sin() + 0.1 * (0.12 * y as f64).cos()) as f32
        });
        let (h, w) = (40, 40);
        let mut fwd = FlowField::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                fwd.u[y * w + x] = 1.5;
                fwd.v[y * w + x] = -0.75;
            }
        }
        let inv = FlowField::uniform(h, w, -1.5, 0.75);
        let there = warp_bilinear(&f, &fwd, 1.0).unwrap();
        let back = warp_bilinear(&there, &inv, 1.0).unwrap();
        let err = back.crop(4, 4, 32, 32).unwrap().max_abs_diff(&f.crop(4, 4, 32, 32).unwrap()).unwrap();
        assert!(err < 2e-2, "round trip error {err}");
    }
}
