use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gates `dy` by `x > 0`.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(dy, |v, g| if v > T::zero() { g } else { T::zero() })
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.add(b)
}

/// Concatenates along channels, `a` first.
pub fn channel_concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "channel_concat";
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    for (dim, got, expected) in [("batch", nb, n), ("height", hb, h), ("width", wb, w)] {
        if got != expected {
            return Err(Error::Shape {
                op: OP,
                dim,
                got,
                expected,
            });
        }
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        data.extend_from_slice(a.sample(i));
        data.extend_from_slice(b.sample(i));
    }
    Tensor::new([n, ca + cb, h, w], data)
}

/// Inverse of [`channel_concat`]: splits after the first `ca` channels.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let c = x.c();
    if ca > c {
        return Err(Error::Shape {
            op: "split_channels",
            dim: "split point",
            got: ca,
            expected: c,
        });
    }
    Ok((x.narrow_channels(0, ca)?, x.narrow_channels(ca, c - ca)?))
}
