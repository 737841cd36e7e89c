use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Mean squared error over all elements.
pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    pred.expect_same_shape(target, "mse")?;
    let n = T::from_usize(pred.len().max(1)).unwrap_or_else(T::one);
    let sum: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n)
}

/// Gradient of [`mse`] with respect to `pred`.
pub fn mse_backward<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    let scale = T::lit(2.0) / T::from_usize(pred.len().max(1)).unwrap_or_else(T::one);
    pred.zip_map(target, |a, b| scale * (a - b))
}
