//! Adam optimiser over a list of parameter groups.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const DEFAULT_LR: f64 = 5e-3;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    /// First moment, one buffer per parameter group.
    pub m: Vec<Vec<T>>,
    /// Second moment, one buffer per parameter group.
    pub v: Vec<Vec<T>>,
    pub t: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamState<T> {
    /// Zeroed moments for groups of the given sizes, default hyper-parameters.
    pub fn new(group_sizes: &[usize]) -> Self {
        Self::with_hyper(
            group_sizes,
            T::lit(DEFAULT_LR),
            T::lit(DEFAULT_BETA1),
            T::lit(DEFAULT_BETA2),
        )
    }

    pub fn with_hyper(group_sizes: &[usize], lr: T, beta1: T, beta2: T) -> Self {
        AdamState {
            m: group_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: group_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
            lr,
            beta1,
            beta2,
            eps: T::lit(DEFAULT_EPS),
        }
    }
}

/// One bias-corrected Adam update.
///
/// All gradients are validated before any parameter moves: a non-finite
/// gradient refuses the whole step and leaves `state` untouched.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    state: &mut AdamState<T>,
) -> Result<()> {
    const OP: &str = "adam_step";
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape {
            op: OP,
            dim: "parameter group count",
            got: grads.len(),
            expected: state.m.len(),
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::Shape {
                op: OP,
                dim: "parameter group length",
                got: g.len(),
                expected: m.len(),
            });
        }
    }
    if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite { op: OP });
    }

    state.t += 1;
    let t = state.t as i32;
    let one = T::one();
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = one - b1.powi(t);
    let bc2 = one - b2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_stored_verbatim() {
        let s = AdamState::<f32>::new(&[3]);
        assert_eq!(s.lr, 5e-3);
        assert_eq!(s.beta1, 0.9);
        assert_eq!(s.beta2, 0.999);
        assert_eq!(s.t, 0);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0f64, -2.0, 3.0];
        let g = vec![0.0; 3];
        let mut s = AdamState::new(&[3]);
        adam_step(&mut [&mut p], &[&g], &mut s).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn non_finite_gradient_refuses_step() {
        let mut p = vec![1.0f32, 2.0];
        let g = vec![0.5, f32::INFINITY];
        let mut s = AdamState::new(&[2]);
        let before = s.clone();
        assert!(adam_step(&mut [&mut p], &[&g], &mut s).is_err());
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(s, before);
    }

    #[test]
    fn quadratic_descends() {
        // Independent scalar simulation of the textbook update.
        let (lr, b1, b2, eps) = (5e-3f64, 0.9f64, 0.999f64, 1e-8f64);
        let (mut q, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut oracle = Vec::new();
        for t in 1..=200 {
            let g = 2.0 * q;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            q -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            oracle.push(q);
        }
        let mut p = vec![1.0f64];
        let mut s = AdamState::new(&[1]);
        for want in oracle {
            let g = vec![2.0 * p[0]];
            adam_step(&mut [&mut p], &[&g], &mut s).unwrap();
            assert!((p[0] - want).abs() < 1e-12);
        }
        assert!(p[0].abs() < 0.5, "p = {}", p[0]);
    }
}
