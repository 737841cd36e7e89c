//! One deblur step: encoder-decoder with residual, encoder-to-decoder and
//! temporal skip connections.
//!
//! ```text
//! x0  = concat(prediction, observation)            6 ch, H
//! a0  = A0_1(x0)                                   H
//! r1  = C1_1(a0) + C1_4..C1_2                      H/2
//! e2  = r1 + C2_4..C2_1(r1)                        H/2
//! e3  = C3_1(e2) + C3_4..C3_2                      H/4
//! s4  = blend(C4_1(e3), t4)        *               H/8
//! d4  = s4 + C4_5..C4_3(s4)
//! s5  = blend(C5_1(d4), t5)        *               H/4
//! d5  = s5 + C5_5..C5_3(s5) + e3
//! s6  = blend(C6_1(d5), t6)        *               H/2
//! d6  = s6 + C6_5..C6_3(s6) + e2
//! out = prediction + OUT(C7_2(C7_1(d6)))           H
//! ```
//!
//! `blend(c, t)` is `B(concat(c, t))` when features from a previous step are
//! present and `c` otherwise. The starred activations `s4, s5, s6` are handed
//! to the next step.

use crate::error::{Error, Result};
use crate::ops::{
    batchnorm_backward, batchnorm_forward, channel_concat, conv2d, conv2d_backward,
    conv_transpose2d, conv_transpose2d_backward, relu, relu_backward, split_channels, BnCache,
    BnMode,
};
use crate::tensor::{Scalar, Tensor};

use super::params::{accumulate, idx, Layer, LayerKind, RdnGrads, RdnParams};

/// Starred activations propagated between deblur steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalFeatures<T> {
    /// Bottleneck features at H/8.
    pub t4: Tensor<T>,
    /// H/4.
    pub t5: Tensor<T>,
    /// H/2.
    pub t6: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct DeblurState<T> {
    /// Current 3-channel estimate of the target frame.
    pub prediction: Tensor<T>,
    /// `None` before the first step.
    pub temporal: Option<TemporalFeatures<T>>,
    pub step_index: usize,
}

impl<T: Scalar> DeblurState<T> {
    /// Initial state: the blurry target frame itself, no temporal features.
    pub fn new(target: Tensor<T>) -> Self {
        DeblurState {
            prediction: target,
            temporal: None,
            step_index: 0,
        }
    }
}

struct UnitCache<T> {
    /// Input after the optional pre-activation.
    activated: Tensor<T>,
    bn: Option<BnCache<T>>,
}

/// Everything the backward pass of one step needs.
pub struct BlockTape<T> {
    units: Vec<Option<UnitCache<T>>>,
    had_temporal: bool,
}

impl<T: Scalar> BlockTape<T> {
    /// Batch statistics recorded by each batchnorm layer, in layer order.
    pub fn bn_caches(&self) -> impl Iterator<Item = (usize, &BnCache<T>)> {
        self.units
            .iter()
            .enumerate()
            .filter_map(|(i, u)| u.as_ref().and_then(|u| u.bn.as_ref()).map(|b| (i, b)))
    }
}

struct Fwd<'a, T> {
    params: &'a RdnParams<T>,
    mode: BnMode,
    step: usize,
    tape: Option<Vec<Option<UnitCache<T>>>>,
}

impl<T: Scalar> Fwd<'_, T> {
    fn unit(&mut self, i: usize, x: Tensor<T>) -> Result<Tensor<T>> {
        let layer: &Layer<T> = &self.params.layers[i];
        let activated = if layer.pre_relu { relu(&x) } else { x };
        let bias = layer.bias.as_deref();
        let z = match layer.kind {
            LayerKind::Conv => conv2d(&activated, &layer.spec, &layer.weight, bias)?,
            LayerKind::ConvTranspose => conv_transpose2d(&activated, &layer.spec, &layer.weight, bias)?,
        };
        let (y, bn) = match &layer.bn {
            Some(state) => {
                let (y, cache) = batchnorm_forward(&z, state, self.mode, self.step)?;
                (y, Some(cache))
            }
            None => (z, None),
        };
        if let Some(tape) = &mut self.tape {
            tape[i] = Some(UnitCache { activated, bn });
        }
        Ok(y)
    }

    /// `x + f(x)` where `f` chains the units `first..first + len`.
    fn residual(&mut self, first: usize, len: usize, x: Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for i in first..first + len {
            h = self.unit(i, h)?;
        }
        h.add_assign(&x)?;
        Ok(h)
    }

    fn blend(&mut self, i: usize, c: Tensor<T>, t: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        match t {
            None => Ok(c),
            Some(t) => {
                if t.shape() != c.shape() {
                    return Err(Error::invalid(
                        "deblur_block",
                        format!(
                            "temporal features {:?} do not match current features {:?} at {}",
                            t.shape(),
                            c.shape(),
                            self.params.layers[i].name
                        ),
                    ));
                }
                self.unit(i, channel_concat(&c, t)?)
            }
        }
    }
}

fn check_inputs<T: Scalar>(state: &DeblurState<T>, observation: &Tensor<T>) -> Result<()> {
    const OP: &str = "deblur_block";
    let p = &state.prediction;
    if p.c() != 3 {
        return Err(Error::Shape {
            op: OP,
            dim: "prediction channels",
            got: p.c(),
            expected: 3,
        });
    }
    p.expect_same_shape(observation, OP)?;
    for (dim, v) in [("height", p.h()), ("width", p.w())] {
        if v % 8 != 0 || v == 0 {
            return Err(Error::Shape {
                op: OP,
                dim: if dim == "height" {
                    "height (must be a positive multiple of 8)"
                } else {
                    "width (must be a positive multiple of 8)"
                },
                got: v,
                expected: v.div_ceil(8).max(1) * 8,
            });
        }
    }
    Ok(())
}

fn run<T: Scalar>(
    state: &DeblurState<T>,
    observation: &Tensor<T>,
    params: &RdnParams<T>,
    mode: BnMode,
    record: bool,
) -> Result<(DeblurState<T>, Option<BlockTape<T>>)> {
    check_inputs(state, observation)?;
    // The first step never reads the temporal slots.
    let temporal = match state.step_index {
        0 => None,
        _ => state.temporal.as_ref(),
    };
    let mut f = Fwd {
        params,
        mode,
        step: state.step_index,
        tape: record.then(|| (0..params.layers.len()).map(|_| None).collect()),
    };

    let x0 = channel_concat(&state.prediction, observation)?;
    let a0 = f.unit(idx::A0_1, x0)?;
    let c11 = f.unit(idx::C1, a0)?;
    let r1 = f.residual(idx::C1 + 1, 3, c11)?;
    let e2 = f.residual(idx::C2, 4, r1)?;
    let c31 = f.unit(idx::C3, e2.clone())?;
    let e3 = f.residual(idx::C3 + 1, 3, c31)?;

    let c41 = f.unit(idx::C4_1, e3.clone())?;
    let s4 = f.blend(idx::B4_2, c41, temporal.map(|t| &t.t4))?;
    let d4 = f.residual(idx::C4_3, 3, s4.clone())?;

    let c51 = f.unit(idx::C5_1, d4)?;
    let s5 = f.blend(idx::B5_2, c51, temporal.map(|t| &t.t5))?;
    let mut d5 = f.residual(idx::C5_3, 3, s5.clone())?;
    d5.add_assign(&e3)?;

    let c61 = f.unit(idx::C6_1, d5)?;
    let s6 = f.blend(idx::B6_2, c61, temporal.map(|t| &t.t6))?;
    let mut d6 = f.residual(idx::C6_3, 3, s6.clone())?;
    d6.add_assign(&e2)?;

    let c71 = f.unit(idx::C7_1, d6)?;
    let c72 = f.unit(idx::C7_2, c71)?;
    let out = f.unit(idx::OUT, c72)?;
    let prediction = state.prediction.add(&out)?;
    prediction.ensure_finite("deblur_block")?;

    let next = DeblurState {
        prediction,
        temporal: Some(TemporalFeatures {
            t4: s4,
            t5: s5,
            t6: s6,
        }),
        step_index: state.step_index + 1,
    };
    let tape = f.tape.map(|units| BlockTape {
        units,
        had_temporal: temporal.is_some(),
    });
    Ok((next, tape))
}

/// One deblur step without recording anything for backward.
pub fn deblur_block<T: Scalar>(
    state: &DeblurState<T>,
    observation: &Tensor<T>,
    params: &RdnParams<T>,
    mode: BnMode,
) -> Result<DeblurState<T>> {
    run(state, observation, params, mode, false).map(|(s, _)| s)
}

/// One deblur step, keeping what [`deblur_block_backward`] needs.
pub fn deblur_block_forward<T: Scalar>(
    state: &DeblurState<T>,
    observation: &Tensor<T>,
    params: &RdnParams<T>,
    mode: BnMode,
) -> Result<(DeblurState<T>, BlockTape<T>)> {
    let (s, tape) = run(state, observation, params, mode, true)?;
    Ok((s, tape.expect("tape recorded")))
}

struct Bwd<'a, T> {
    params: &'a RdnParams<T>,
    tape: &'a BlockTape<T>,
    grads: &'a mut RdnGrads<T>,
}

impl<T: Scalar> Bwd<'_, T> {
    fn unit(&mut self, i: usize, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let layer = &self.params.layers[i];
        let cache = self.tape.units[i]
            .as_ref()
            .ok_or_else(|| Error::invalid("deblur_block_backward", format!("{} was not run", layer.name)))?;
        let g = &mut self.grads.layers[i];
        let dz = match (&layer.bn, &cache.bn) {
            (Some(state), Some(bc)) => {
                let r = batchnorm_backward(bc, state, dy)?;
                accumulate(g.gamma.as_mut().expect("bn grads"), &r.dgamma);
                accumulate(g.beta.as_mut().expect("bn grads"), &r.dbeta);
                r.dx
            }
            _ => dy.clone(),
        };
        let cg = match layer.kind {
            LayerKind::Conv => conv2d_backward(&cache.activated, &layer.spec, &layer.weight, &dz)?,
            LayerKind::ConvTranspose => {
                conv_transpose2d_backward(&cache.activated, &layer.spec, &layer.weight, &dz)?
            }
        };
        accumulate(&mut g.weight, cg.dw.data());
        if let Some(b) = &mut g.bias {
            accumulate(b, &cg.db);
        }
        if layer.pre_relu {
            relu_backward(&cache.activated, &cg.dx)
        } else {
            Ok(cg.dx)
        }
    }

    /// Backward of `y = x + f(x)`.
    fn residual(&mut self, first: usize, len: usize, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut d = dy.clone();
        for i in (first..first + len).rev() {
            d = self.unit(i, &d)?;
        }
        d.add_assign(dy)?;
        Ok(d)
    }

    /// Returns gradients for (current features, propagated features).
    fn blend(&mut self, i: usize, ds: &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        if !self.tape.had_temporal {
            return Ok((ds.clone(), None));
        }
        let dcat = self.unit(i, ds)?;
        let (dc, dt) = split_channels(&dcat, ds.c())?;
        Ok((dc, Some(dt)))
    }
}

/// Backward pass of one step.
///
/// Takes the gradients flowing into the step's prediction and into its
/// temporal features (from later steps), accumulates parameter gradients
/// into `grads`, and returns the gradients for the incoming prediction and
/// incoming temporal features. The observation is data and receives none.
pub fn deblur_block_backward<T: Scalar>(
    params: &RdnParams<T>,
    tape: &BlockTape<T>,
    d_prediction: &Tensor<T>,
    d_temporal: Option<&TemporalFeatures<T>>,
    grads: &mut RdnGrads<T>,
) -> Result<(Tensor<T>, Option<TemporalFeatures<T>>)> {
    let mut b = Bwd { params, tape, grads };
    let dc72 = b.unit(idx::OUT, d_prediction)?;
    let dc71 = b.unit(idx::C7_2, &dc72)?;
    let dd6 = b.unit(idx::C7_1, &dc71)?;
    let mut de2 = dd6.clone();

    let mut ds6 = b.residual(idx::C6_3, 3, &dd6)?;
    if let Some(t) = d_temporal {
        ds6.add_assign(&t.t6)?;
    }
    let (dc61, dt6) = b.blend(idx::B6_2, &ds6)?;
    let dd5 = b.unit(idx::C6_1, &dc61)?;
    let mut de3 = dd5.clone();

    let mut ds5 = b.residual(idx::C5_3, 3, &dd5)?;
    if let Some(t) = d_temporal {
        ds5.add_assign(&t.t5)?;
    }
    let (dc51, dt5) = b.blend(idx::B5_2, &ds5)?;
    let dd4 = b.unit(idx::C5_1, &dc51)?;

    let mut ds4 = b.residual(idx::C4_3, 3, &dd4)?;
    if let Some(t) = d_temporal {
        ds4.add_assign(&t.t4)?;
    }
    let (dc41, dt4) = b.blend(idx::B4_2, &ds4)?;
    de3.add_assign(&b.unit(idx::C4_1, &dc41)?)?;

    let dc31 = b.residual(idx::C3 + 1, 3, &de3)?;
    de2.add_assign(&b.unit(idx::C3, &dc31)?)?;
    let dr1 = b.residual(idx::C2, 4, &de2)?;
    let dc11 = b.residual(idx::C1 + 1, 3, &dr1)?;
    let da0 = b.unit(idx::C1, &dc11)?;
    let dx0 = b.unit(idx::A0_1, &da0)?;

    let (dpred_in, _dobs) = split_channels(&dx0, 3)?;
    let mut d_pred = d_prediction.clone();
    d_pred.add_assign(&dpred_in)?;

    let d_temporal_in = match (dt4, dt5, dt6) {
        (Some(t4), Some(t5), Some(t6)) => Some(TemporalFeatures { t4, t5, t6 }),
        _ => None,
    };
    Ok((d_pred, d_temporal_in))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([n, 3, h, w], |_| rng.random::<f32>())
    }

    #[test]
    fn shapes_through_the_block() {
        let p = init_params::<f32>("1/8".parse().unwrap(), 3).unwrap();
        let s = DeblurState::new(rand_img(1, 64, 64, 1));
        let out = deblur_block(&s, &rand_img(1, 64, 64, 2), &p, BnMode::Train).unwrap();
        assert_eq!(out.prediction.shape(), [1, 3, 64, 64]);
        let t = out.temporal.unwrap();
        assert_eq!(t.t4.shape(), [1, 32, 8, 8]);
        assert_eq!(t.t5.shape(), [1, 16, 16, 16]);
        assert_eq!(t.t6.shape(), [1, 8, 32, 32]);
        assert_eq!(out.step_index, 1);
    }

    #[test]
    fn rejects_sizes_not_divisible_by_eight() {
        let p = init_params::<f32>("1/8".parse().unwrap(), 3).unwrap();
        let s = DeblurState::new(rand_img(1, 60, 64, 1));
        assert!(deblur_block(&s, &rand_img(1, 60, 64, 2), &p, BnMode::Train).is_err());
    }

    #[test]
    fn rejects_mismatched_temporal_features() {
        let p = init_params::<f32>("1/8".parse().unwrap(), 3).unwrap();
        let s = DeblurState::new(rand_img(1, 64, 64, 1));
        let first = deblur_block(&s, &rand_img(1, 64, 64, 2), &p, BnMode::Train).unwrap();
        let mut big = DeblurState::new(rand_img(1, 96, 96, 1));
        big.temporal = first.temporal;
        big.step_index = 1;
        assert!(deblur_block(&big, &rand_img(1, 96, 96, 2), &p, BnMode::Train).is_err());
    }
}
