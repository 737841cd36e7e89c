//! Procedural sharp clips with known motion, for fixtures and demos.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::exec::stream_rng;
use crate::tensor::Tensor;

/// Smooth random texture defined on the whole plane, so it can be sampled at
/// any sub-pixel offset without interpolation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    /// One plane wave per component, `[kx, ky, phase, amplitude]` for each channel.
    waves: Vec<[[f64; 4]; 3]>,
}

impl Texture {
    pub fn random(seed: u64, components: usize) -> Self {
        let mut rng = stream_rng(seed, &[0x7e47]);
        let mut waves = Vec::with_capacity(components);
        for i in 0..components {
            // Frequencies spread from coarse structure up to fine detail.
            let k = 0.08 + 0.72 * (i as f64 + rng.random::<f64>()) / components as f64;
            let theta = rng.random::<f64>() * std::f64::consts::TAU;
            let amp = 0.35 / (components as f64).sqrt() * (0.6 + 0.8 * rng.random::<f64>());
            let mut chan = || {
                let phase = rng.random::<f64>() * std::f64::consts::TAU;
                let a = amp * (0.7 + 0.6 * rng.random::<f64>());
                [k * theta.cos(), k * theta.sin(), phase, a]
            };
            waves.push([chan(), chan(), chan()]);
        }
        Texture { waves }
    }

    pub fn eval(&self, c: usize, y: f64, x: f64) -> f64 {
        let mut v = 0.5;
        for w in &self.waves {
            let [kx, ky, p, a] = w[c];
            v += a * (kx * x + ky * y + p).sin();
        }
        v.clamp(0.0, 1.0)
    }

    /// Renders the texture displaced by `(dy, dx)`: pixel `(y, x)` shows the
    /// texture at `(y - dy, x - dx)`.
    pub fn render(&self, h: usize, w: usize, dy: f64, dx: f64) -> Tensor<f32> {
        Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| self.eval(c, y as f64 - dy, x as f64 - dx) as f32)
    }
}

/// Frames of a texture translating by `velocity = (vy, vx)` pixels per frame.
pub fn panning_clip(texture: &Texture, h: usize, w: usize, frames: usize, velocity: (f64, f64)) -> Vec<Tensor<f32>> {
    (0..frames)
        .map(|t| texture.render(h, w, velocity.0 * t as f64, velocity.1 * t as f64))
        .collect()
}

/// Exact frame-averaging blur of frame `t` of a panning clip: the mean of the
/// texture rendered at the subframe times `t - l / (n + 1)` and
/// `t + l / (n + 1)` for `l = 1..=half_window`, together with frame `t` itself.
pub fn panning_blur_oracle(
    texture: &Texture,
    h: usize,
    w: usize,
    t: usize,
    velocity: (f64, f64),
    n: usize,
    half_window: usize,
) -> Tensor<f32> {
    let mut times = vec![t as f64];
    for l in 1..=half_window {
        times.push(t as f64 - l as f64 / (n + 1) as f64);
        times.push(t as f64 + l as f64 / (n + 1) as f64);
    }
    let count = times.len() as f64;
    Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
        let s: f64 = times
            .iter()
            .map(|&tt| texture.eval(c, y as f64 - velocity.0 * tt, x as f64 - velocity.1 * tt))
            .sum();
        (s / count) as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::sharpness::{sharpness_score, DEFAULT_SHARPNESS_THRESHOLD};

    #[test]
    fn textures_pass_the_sharpness_gate() {
        for seed in 0..8 {
            let f = Texture::random(seed, 12).render(64, 64, 0.0, 0.0);
            let s = sharpness_score(&f, DEFAULT_SHARPNESS_THRESHOLD);
            assert!(s.pass, "seed {seed}: {}", s.score);
        }
    }

    #[test]
    fn integer_pan_shifts_pixels() {
        let t = Texture::random(1, 6);
        let clip = panning_clip(&t, 16, 16, 2, (0.0, 2.0));
        for y in 0..16 {
            for x in 2..16 {
                assert!((clip[1].at(0, 0, y, x) - clip[0].at(0, 0, y, x - 2)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn static_oracle_is_the_frame() {
        let t = Texture::random(2, 6);
        let o = panning_blur_oracle(&t, 8, 8, 3, (0.0, 0.0), 40, 20);
        assert!(o.max_abs_diff(&t.render(8, 8, 0.0, 0.0)).unwrap() < 1e-6);
    }
}
