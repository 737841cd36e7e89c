//! Subframe interpolation and the frame-averaging blur model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::flow::{warp_bilinear, FlowField};

/// Number of synthesised subframes per frame gap and averaging half-window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubframeSpec {
    pub n: usize,
    pub l: usize,
}

impl SubframeSpec {
    pub fn new(n: usize, l: usize) -> Result<Self> {
        if l == 0 || l > n {
            return Err(Error::invalid(
                "subframe_spec",
                format!("half-window {l} must satisfy 1 <= L <= n = {n}"),
            ));
        }
        Ok(SubframeSpec { n, l })
    }
}

impl Default for SubframeSpec {
    fn default() -> Self {
        SubframeSpec { n: 40, l: 20 }
    }
}

/// Subframe `l` of `n` between `f_t` and `f_t1`, at time `alpha = l / (n + 1)`:
///
/// `(1 - alpha) * warp(f_t, fwd, alpha) + alpha * warp(f_t1, bwd, 1 - alpha)`.
pub fn synth_subframe<T: Scalar>(
    f_t: &Tensor<T>,
    f_t1: &Tensor<T>,
    flow_fwd: &FlowField,
    flow_bwd: &FlowField,
    l: usize,
    n: usize,
) -> Result<Tensor<T>> {
    if l == 0 || l > n {
        return Err(Error::invalid(
            "synth_subframe",
            format!("subframe index {l} outside 1..={n}"),
        ));
    }
    blend_at(f_t, f_t1, flow_fwd, flow_bwd, l as f64 / (n + 1) as f64)
}

/// Two-sided warp blend at an arbitrary time `alpha` in `[0, 1]`.
pub fn blend_at<T: Scalar>(
    f_t: &Tensor<T>,
    f_t1: &Tensor<T>,
    flow_fwd: &FlowField,
    flow_bwd: &FlowField,
    alpha: f64,
) -> Result<Tensor<T>> {
    f_t.expect_same_shape(f_t1, "synth_subframe")?;
    let a = warp_bilinear(f_t, flow_fwd, alpha)?;
    let b = warp_bilinear(f_t1, flow_bwd, 1.0 - alpha)?;
    let wb = T::lit(alpha);
    a.zip_map(&b, |x, y| x + wb * (y - x))
}

/// `b_t = (f_t + sum_{l=1..L} (preceding[l-1] + following[l-1])) / (1 + 2L)`.
///
/// `preceding[l-1]` is `f_{t-1}^{(n+1-l)}` and `following[l-1]` is `f_t^{(l)}`.
pub fn average_blur<T: Scalar>(
    f_t: &Tensor<T>,
    preceding: &[Tensor<T>],
    following: &[Tensor<T>],
    l: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "average_blur";
    for (what, got) in [("preceding subframes", preceding.len()), ("following subframes", following.len())] {
        if got != l {
            return Err(Error::Shape {
                op: OP,
                dim: what,
                got,
                expected: l,
            });
        }
    }
    let mut sum = vec![(0.0f64, 0.0f64); f_t.len()];
    for part in std::iter::once(f_t).chain(preceding.iter().zip(following).flat_map(|(p, f)| [p, f])) {
        f_t.expect_same_shape(part, OP)?;
        for (acc, v) in sum.iter_mut().zip(part.data()) {
            *acc = two_sum_add(*acc, v.f64());
        }
    }
    let norm = (1 + 2 * l) as f64;
    let data = sum.into_iter().map(|(hi, lo)| T::lit(div_rounded(hi, lo, norm))).collect();
    Tensor::new(f_t.shape(), data)
}

/// Adds `v` to the double-double `(hi, lo)` without losing low-order bits.
fn two_sum_add((hi, lo): (f64, f64), v: f64) -> (f64, f64) {
    let s = hi + v;
    let bp = s - hi;
    let err = (hi - (s - bp)) + (v - bp);
    (s, lo + err)
}

/// `(hi + lo) / d`, corrected by the exact division remainder so that a mean of
/// identical values returns that value and exact sums divide with one rounding.
fn div_rounded(hi: f64, lo: f64, d: f64) -> f64 {
    let q = hi / d;
    let r = (-q).mul_add(d, hi) + lo;
    q + r / d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::flow::FlowField;

    #[test]
    fn spec_bounds() {
        assert!(SubframeSpec::new(40, 20).is_ok());
        assert!(SubframeSpec::new(40, 40).is_ok());
        assert!(SubframeSpec::new(40, 0).is_err());
        assert!(SubframeSpec::new(40, 41).is_err());
    }

    #[test]
    fn static_scene_subframe_is_exact() {
        let f = Tensor::<f64>::from_fn([1, 3, 8, 8], |[_, c, y, x]| ((c + y * x) % 7) as f64 / 7.0);
        let z = FlowField::zeros(8, 8);
        for l in 1..=40 {
            assert_eq!(synth_subframe(&f, &f, &z, &z, l, 40).unwrap(), f);
        }
        assert!(synth_subframe(&f, &f, &z, &z, 0, 40).is_err());
    }

    #[test]
    fn small_alpha_tends_to_first_frame() {
        let a = Tensor::<f64>::full([1, 1, 4, 4], 0.2);
        let b = Tensor::<f64>::full([1, 1, 4, 4], 0.9);
        let z = FlowField::zeros(4, 4);
        let s = synth_subframe(&a, &b, &z, &z, 1, 10_000).unwrap();
        assert!(s.max_abs_diff(&a).unwrap() < 1e-4);
    }

    #[test]
    fn static_blur_returns_frame() {
        let f = Tensor::<f64>::from_fn([1, 3, 5, 5], |[_, c, y, x]| (c * 25 + y * 5 + x) as f64 / 75.0);
        let subs = vec![f.clone(); 20];
        assert_eq!(average_blur(&f, &subs, &subs, 20).unwrap(), f);
    }

    #[test]
    fn count_mismatch_rejected() {
        let f = Tensor::<f32>::zeros([1, 3, 2, 2]);
        let subs = vec![f.clone(); 3];
        assert!(average_blur(&f, &subs, &subs[..2], 3).is_err());
        assert!(average_blur(&f, &subs, &subs, 4).is_err());
    }

    #[test]
    fn binary_patterns_match_direct_mean() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for l in [1, 7, 20, 40] {
            let mut bit = |_: [usize; 4]| if rng.random::<bool>() { 1.0 } else { 0.0 };
            let f = Tensor::<f64>::from_fn([1, 3, 4, 4], &mut bit);
            let pre: Vec<_> = (0..l).map(|_| Tensor::<f64>::from_fn([1, 3, 4, 4], &mut bit)).collect();
            let fol: Vec<_> = (0..l).map(|_| Tensor::<f64>::from_fn([1, 3, 4, 4], &mut bit)).collect();
            let got = average_blur(&f, &pre, &fol, l).unwrap();
            for i in 0..f.len() {
                let mut count = f.data()[i];
                for k in 0..l {
                    count += pre[k].data()[i] + fol[k].data()[i];
                }
                assert_eq!(got.data()[i], count / (1 + 2 * l) as f64);
            }
        }
    }
}
