use crate::tensor::{Scalar, Tensor};

use super::image_ops::luminance;

pub const DEFAULT_SHARPNESS_THRESHOLD: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sharpness {
    pub score: f64,
    pub pass: bool,
}

/// Variance of the 4-neighbour Laplacian of the luminance over interior pixels.
pub fn sharpness_score<T: Scalar>(frame: &Tensor<T>, threshold: f64) -> Sharpness {
    let p = luminance(frame);
    if p.h < 3 || p.w < 3 {
        return Sharpness { score: 0.0, pass: false };
    }
    let mut vals = Vec::with_capacity((p.h - 2) * (p.w - 2));
    for y in 1..p.h - 1 {
        for x in 1..p.w - 1 {
            vals.push(p.at(y - 1, x) + p.at(y + 1, x) + p.at(y, x - 1) + p.at(y, x + 1) - 4.0 * p.at(y, x));
        }
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let score = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Sharpness {
        score,
        pass: score >= threshold,
    }
}
