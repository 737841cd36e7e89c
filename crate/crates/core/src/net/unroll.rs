use crate::error::{Error, Result};
use crate::ops::{mse, mse_backward, BnMode};
use crate::tensor::{Scalar, Tensor};

use super::block::{deblur_block, deblur_block_backward, deblur_block_forward, BlockTape, DeblurState, TemporalFeatures};
use super::params::{RdnGrads, RdnParams};

#[derive(Clone, Debug)]
pub struct UnrollOutput<T> {
    /// One prediction per deblur step, `frames.len() - 1` in total.
    pub predictions: Vec<Tensor<T>>,
    /// Per-step mean squared errors against the ground truth (empty without one).
    pub step_losses: Vec<T>,
    pub total_loss: Option<T>,
}

fn check_frames<T: Scalar>(frames: &[Tensor<T>]) -> Result<()> {
    const OP: &str = "rdn_unroll";
    if frames.len() < 2 {
        return Err(Error::invalid(
            OP,
            format!("need the target plus at least one observation, got {} frame(s)", frames.len()),
        ));
    }
    for f in &frames[1..] {
        frames[0].expect_same_shape(f, OP)?;
    }
    Ok(())
}

/// Runs the recurrence `I(k) = DB(I(k-1), I_-k)` starting from `I(0) = frames[0]`.
///
/// `frames` is `[I, I_-1, I_-2, ...]`, nearest observation first.
pub fn rdn_unroll<T: Scalar>(
    frames: &[Tensor<T>],
    params: &RdnParams<T>,
    ground_truth: Option<&Tensor<T>>,
    mode: BnMode,
) -> Result<UnrollOutput<T>> {
    check_frames(frames)?;
    let mut state = DeblurState::new(frames[0].clone());
    let mut predictions = Vec::with_capacity(frames.len() - 1);
    let mut step_losses = Vec::new();
    for obs in &frames[1..] {
        state = deblur_block(&state, obs, params, mode)?;
        if let Some(gt) = ground_truth {
            step_losses.push(mse(&state.prediction, gt)?);
        }
        predictions.push(state.prediction.clone());
    }
    let total_loss = ground_truth.map(|_| step_losses.iter().copied().sum());
    Ok(UnrollOutput {
        predictions,
        step_losses,
        total_loss,
    })
}

/// Forward and backward pass through all unrolled steps.
pub struct UnrollGrad<T> {
    pub output: UnrollOutput<T>,
    /// Gradient of the total loss with respect to the shared parameters.
    pub grads: RdnGrads<T>,
    tapes: Vec<BlockTape<T>>,
}

impl<T: Scalar> UnrollGrad<T> {
    /// Folds the batch statistics of step `k` into the running statistics of step `k`.
    pub fn apply_running_stats(&self, params: &mut RdnParams<T>) {
        for (step, tape) in self.tapes.iter().enumerate() {
            for (i, cache) in tape.bn_caches() {
                if let Some(bn) = &mut params.layers[i].bn {
                    bn.update_running(cache, step);
                }
            }
        }
    }
}

/// Total loss `sum_k mse(I(k), gt)` and its gradient through every step.
pub fn rdn_unroll_grad<T: Scalar>(
    frames: &[Tensor<T>],
    params: &RdnParams<T>,
    ground_truth: &Tensor<T>,
    mode: BnMode,
) -> Result<UnrollGrad<T>> {
    check_frames(frames)?;
    frames[0].expect_same_shape(ground_truth, "rdn_unroll")?;
    let mut state = DeblurState::new(frames[0].clone());
    let mut tapes = Vec::with_capacity(frames.len() - 1);
    let mut predictions = Vec::with_capacity(frames.len() - 1);
    let mut step_losses = Vec::with_capacity(frames.len() - 1);
    for obs in &frames[1..] {
        let (next, tape) = deblur_block_forward(&state, obs, params, mode)?;
        step_losses.push(mse(&next.prediction, ground_truth)?);
        predictions.push(next.prediction.clone());
        tapes.push(tape);
        state = next;
    }

    let mut grads = RdnGrads::zeros_like(params);
    let mut d_pred = Tensor::zeros(frames[0].shape());
    let mut d_temporal: Option<TemporalFeatures<T>> = None;
    for (k, tape) in tapes.iter().enumerate().rev() {
        d_pred.add_assign(&mse_backward(&predictions[k], ground_truth)?)?;
        let (dp, dt) = deblur_block_backward(params, tape, &d_pred, d_temporal.as_ref(), &mut grads)?;
        d_pred = dp;
        d_temporal = dt;
    }

    let total = step_losses.iter().copied().sum();
    Ok(UnrollGrad {
        output: UnrollOutput {
            predictions,
            step_losses,
            total_loss: Some(total),
        },
        grads,
        tapes,
    })
}
