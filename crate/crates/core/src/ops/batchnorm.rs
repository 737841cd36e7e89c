use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalise with batch statistics.
    Train,
    /// Normalise with the running statistics of the current step.
    Infer,
}

/// Running mean and variance of one channel set.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// Per-channel batch normalisation parameters and running statistics.
///
/// A layer applied repeatedly in a recurrence shares `gamma` and `beta` across
/// applications but keeps one set of running statistics per step index. Steps past
/// the last set reuse it. Running statistics follow
/// `running = momentum * running + (1 - momentum) * batch`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    /// Never empty.
    pub running: Vec<RunningStats<T>>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running: vec![RunningStats::new(channels)],
            momentum: T::lit(BN_MOMENTUM),
            eps: T::lit(BN_EPS),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Running statistics used at `step`.
    pub fn stats(&self, step: usize) -> &RunningStats<T> {
        &self.running[step.min(self.running.len() - 1)]
    }

    /// Sets the number of per-step statistic sets; new sets copy the last one.
    pub fn resize_steps(&mut self, steps: usize) {
        let last = self.running.last().cloned().unwrap_or_else(|| RunningStats::new(self.channels()));
        self.running.resize(steps.max(1), last);
    }

    /// Folds the batch statistics recorded in `cache` into the running statistics of `step`.
    pub fn update_running(&mut self, cache: &BnCache<T>, step: usize) {
        if cache.mode != BnMode::Train {
            return;
        }
        if step >= self.running.len() {
            self.resize_steps(step + 1);
        }
        let m = self.momentum;
        let one = T::one();
        let count = T::from_usize(cache.count).unwrap_or_else(T::one);
        let correction = if cache.count > 1 {
            count / (count - one)
        } else {
            one
        };
        let stats = &mut self.running[step];
        for c in 0..cache.mean.len() {
            stats.mean[c] = m * stats.mean[c] + (one - m) * cache.mean[c];
            let unbiased = cache.var[c] * correction;
            stats.var[c] = (m * stats.var[c] + (one - m) * unbiased).max(T::zero());
        }
    }
}

/// What [`batchnorm_backward`] needs from the forward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub mode: BnMode,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct BnGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

fn channel_sums<T: Scalar>(x: &Tensor<T>, c: usize) -> T {
    (0..x.n()).map(|i| x.plane(i, c).iter().copied().sum::<T>()).sum()
}

/// Normalises `x` without touching the running statistics. `step` selects the
/// running statistics in infer mode.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    state: &BatchNormState<T>,
    mode: BnMode,
    step: usize,
) -> Result<(Tensor<T>, BnCache<T>)> {
    const OP: &str = "batchnorm";
    let [n, c, h, w] = x.shape();
    if c != state.channels() {
        return Err(Error::Shape {
            op: OP,
            dim: "channels",
            got: c,
            expected: state.channels(),
        });
    }
    let count = n * h * w;
    if count == 0 {
        return Err(Error::invalid(OP, "zero-size batch or spatial extent"));
    }
    let cnt = T::from_usize(count).unwrap_or_else(T::one);
    let (mean, var): (Vec<T>, Vec<T>) = match mode {
        BnMode::Train => (0..c)
            .map(|j| {
                let mu = channel_sums(x, j) / cnt;
                let var = (0..n)
                    .map(|i| x.plane(i, j).iter().map(|&v| (v - mu) * (v - mu)).sum::<T>())
                    .sum::<T>()
                    / cnt;
                (mu, var)
            })
            .unzip(),
        BnMode::Infer => {
            let stats = state.stats(step);
            (stats.mean.clone(), stats.var.clone())
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + state.eps).sqrt()).collect();

    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for i in 0..n {
        for j in 0..c {
            let (mu, is, g, b) = (mean[j], inv_std[j], state.gamma[j], state.beta[j]);
            let src = x.plane(i, j);
            let xh = xhat.plane_mut(i, j);
            for (d, &s) in xh.iter_mut().zip(src) {
                *d = (s - mu) * is;
            }
            let xh = xhat.plane(i, j).to_vec();
            for (d, s) in y.plane_mut(i, j).iter_mut().zip(xh) {
                *d = g * s + b;
            }
        }
    }
    Ok((
        y,
        BnCache {
            mode,
            xhat,
            inv_std,
            mean,
            var,
            count,
        },
    ))
}

/// Forward pass that also updates the running statistics of `step` in train mode.
pub fn batchnorm<T: Scalar>(
    x: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: BnMode,
    step: usize,
) -> Result<Tensor<T>> {
    let (y, cache) = batchnorm_forward(x, state, mode, step)?;
    state.update_running(&cache, step);
    Ok(y)
}

pub fn batchnorm_backward<T: Scalar>(
    cache: &BnCache<T>,
    state: &BatchNormState<T>,
    dy: &Tensor<T>,
) -> Result<BnGrads<T>> {
    cache.xhat.expect_same_shape(dy, "batchnorm_backward")?;
    let [n, c, _, _] = dy.shape();
    let cnt = T::from_usize(cache.count).unwrap_or_else(T::one);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for j in 0..c {
        for i in 0..n {
            for (&g, &xh) in dy.plane(i, j).iter().zip(cache.xhat.plane(i, j)) {
                dbeta[j] += g;
                dgamma[j] += g * xh;
            }
        }
    }
    let mut dx = Tensor::zeros(dy.shape());
    for j in 0..c {
        let scale = state.gamma[j] * cache.inv_std[j];
        match cache.mode {
            BnMode::Train => {
                let mean_dy = dbeta[j] / cnt;
                let mean_dy_xh = dgamma[j] / cnt;
                for i in 0..n {
                    let xh = cache.xhat.plane(i, j);
                    let g = dy.plane(i, j);
                    for ((d, &gv), &xv) in dx.plane_mut(i, j).iter_mut().zip(g).zip(xh) {
                        *d = scale * (gv - mean_dy - xv * mean_dy_xh);
                    }
                }
            }
            BnMode::Infer => {
                for i in 0..n {
                    for (d, &gv) in dx.plane_mut(i, j).iter_mut().zip(dy.plane(i, j)) {
                        *d = scale * gv;
                    }
                }
            }
        }
    }
    Ok(BnGrads { dx, dgamma, dbeta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], seed: u64, scale: f64, offset: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| offset + scale * (rng.random::<f64>() - 0.5))
    }

    #[test]
    fn train_mode_output_statistics() {
        let x = random([2, 3, 6, 6], 1, 7.0, 3.0);
        let mut st = BatchNormState::<f64>::new(3);
        st.gamma = vec![2.0, -0.5, 1.0];
        st.beta = vec![0.3, 1.0, -2.0];
        let y = batchnorm(&x, &mut st, BnMode::Train, 0).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|i| y.plane(i, c).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!((m - st.beta[c]).abs() < 1e-4);
            assert!((sd - st.gamma[c].abs()).abs() < 1e-4, "sd {sd}");
        }
        assert!(st.running[0].var.iter().all(|&v| v >= 0.0));
        assert!(st.running[0].mean.iter().all(|&m| m != 0.0));
    }

    #[test]
    fn standardised_input_passes_through() {
        // Exactly zero-mean, unit-variance per channel: +-1 checkerboard.
        let x = Tensor::<f64>::from_fn([1, 2, 8, 8], |[_, _, y, x]| if (x + y) % 2 == 0 { 1.0 } else { -1.0 });
        let st = BatchNormState::<f64>::new(2);
        let (y, _) = batchnorm_forward(&x, &st, BnMode::Train, 0).unwrap();
        let factor = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * factor).abs() < 1e-12);
        }
    }

    #[test]
    fn infer_mode_is_affine_in_running_stats() {
        let mut st = BatchNormState::<f64>::new(1);
        st.running[0] = RunningStats {
            mean: vec![2.0],
            var: vec![4.0],
        };
        st.gamma = vec![3.0];
        st.beta = vec![1.0];
        let x = Tensor::<f64>::from_fn([2, 1, 2, 2], |[n, _, y, x]| (n * 4 + y * 2 + x) as f64);
        let (y, _) = batchnorm_forward(&x, &st, BnMode::Infer, 0).unwrap();
        for (o, i) in y.data().iter().zip(x.data()) {
            let want = 3.0 * (i - 2.0) / (4.0 + BN_EPS).sqrt() + 1.0;
            assert!((o - want).abs() < 1e-12);
        }
        // Per-pixel: a single sample gives the same answer as inside a batch.
        let (y0, _) = batchnorm_forward(&x.narrow_batch(1, 1).unwrap(), &st, BnMode::Infer, 0).unwrap();
        assert_eq!(y0.data(), y.sample(1));
    }

    #[test]
    fn zero_spatial_extent_is_an_error() {
        let x = Tensor::<f32>::zeros([1, 2, 0, 4]);
        let st = BatchNormState::new(2);
        assert!(batchnorm_forward(&x, &st, BnMode::Train, 0).is_err());
    }

    #[test]
    fn backward_matches_central_differences() {
        let x = random([2, 4, 5, 5], 3, 2.0, 0.5);
        let mut st = BatchNormState::<f64>::new(4);
        st.gamma = vec![1.5, -0.7, 0.9, 2.0];
        st.beta = vec![0.1, 0.2, -0.3, 0.0];
        let probe = random(x.shape(), 4, 2.0, 0.0);
        let loss = |x: &Tensor<f64>, st: &BatchNormState<f64>| {
            batchnorm_forward(x, st, BnMode::Train, 0).unwrap().0.dot(&probe).unwrap()
        };
        let (_, cache) = batchnorm_forward(&x, &st, BnMode::Train, 0).unwrap();
        let g = batchnorm_backward(&cache, &st, &probe).unwrap();
        let h = 1e-5;
        let mut max_err: f64 = 0.0;
        let mut max_g: f64 = 0.0;
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[k] += h;
            let mut xm = x.clone();
            xm.data_mut()[k] -= h;
            let num = (loss(&xp, &st) - loss(&xm, &st)) / (2.0 * h);
            max_err = max_err.max((num - g.dx.data()[k]).abs());
            max_g = max_g.max(num.abs());
        }
        assert!(max_err / max_g < 1e-6, "dx rel err {}", max_err / max_g);
        for c in 0..4 {
            let mut sp = st.clone();
            sp.gamma[c] += h;
            let mut sm = st.clone();
            sm.gamma[c] -= h;
            let num = (loss(&x, &sp) - loss(&x, &sm)) / (2.0 * h);
            assert!((num - g.dgamma[c]).abs() < 1e-6 * num.abs().max(1.0));
            let mut sp = st.clone();
            sp.beta[c] += h;
            let mut sm = st.clone();
            sm.beta[c] -= h;
            let num = (loss(&x, &sp) - loss(&x, &sm)) / (2.0 * h);
            assert!((num - g.dbeta[c]).abs() < 1e-6 * num.abs().max(1.0));
        }
    }

    #[test]
    fn running_statistics_are_kept_per_step() {
        let mut st = BatchNormState::<f64>::new(1);
        let x = Tensor::<f64>::from_fn([1, 1, 2, 2], |[_, _, y, x]| 10.0 + (y * 2 + x) as f64);
        batchnorm(&x, &mut st, BnMode::Train, 2).unwrap();
        assert_eq!(st.running.len(), 3);
        assert_eq!(st.running[0], RunningStats::new(1));
        assert_eq!(st.running[1], RunningStats::new(1));
        assert!((st.running[2].mean[0] - 0.1 * 11.5).abs() < 1e-12);
        // Steps past the last set reuse it.
        let (a, _) = batchnorm_forward(&x, &st, BnMode::Infer, 2).unwrap();
        let (b, _) = batchnorm_forward(&x, &st, BnMode::Infer, 9).unwrap();
        let (c, _) = batchnorm_forward(&x, &st, BnMode::Infer, 0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
