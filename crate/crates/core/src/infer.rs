//! Inference with a trained block: pairwise recurrence over a frame sequence,
//! tiling for large frames, coarse-to-fine multi-scale runs and PSNR.

use serde::{Deserialize, Serialize};

use crate::datagen::image_ops::{downscale_area, pad_reflect_to_multiple, resize_bilinear};
use crate::error::{Error, Result};
use crate::exec::map_range;
use crate::net::{rdn_unroll, RdnParams};
use crate::ops::BnMode;
use crate::tensor::Tensor;

/// Spatial dims the block accepts must be multiples of this.
pub const ALIGN: usize = 8;
pub const DEFAULT_MARGIN: usize = 48;
pub const DEFAULT_TILE: usize = 256;
pub const DEFAULT_OVERLAP: usize = 64;

/// `10 log10(1 / MSE)` for images in `[0, 1]`; identical images give `+inf`.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    a.expect_same_shape(b, "psnr")?;
    if a.is_empty() {
        return Err(Error::invalid("psnr", "empty images"));
    }
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    let mse = se / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

fn check_sequence(frames: &[Tensor<f32>]) -> Result<()> {
    const OP: &str = "deblur_sequence";
    if frames.len() < 2 {
        return Err(Error::invalid(OP, format!("need at least 2 frames, got {}", frames.len())));
    }
    for f in frames {
        if f.n() != 1 || f.c() != 3 {
            return Err(Error::invalid(OP, format!("frames must be [1, 3, h, w], got {:?}", f.shape())));
        }
        frames[0].expect_same_shape(f, OP)?;
    }
    Ok(())
}

/// Deblurs `frames[0]` using `frames[1..]` as observations, nearest first.
///
/// Frames are reflect-padded to multiples of 8 and cropped back. Returns one
/// clamped prediction per step; `max_steps` caps the number of observations used.
pub fn deblur_sequence(frames: &[Tensor<f32>], params: &RdnParams<f32>, max_steps: Option<usize>) -> Result<Vec<Tensor<f32>>> {
    check_sequence(frames)?;
    let steps = max_steps.unwrap_or(usize::MAX).clamp(1, frames.len() - 1);
    let [_, _, h, w] = frames[0].shape();
    let padded: Vec<Tensor<f32>> = frames[..=steps].iter().map(|f| pad_reflect_to_multiple(f, ALIGN)).collect();
    let out = rdn_unroll(&padded, params, None, BnMode::Infer)?;
    out.predictions
        .iter()
        .map(|p| Ok(p.crop(0, 0, h, w)?.clamp(0.0, 1.0)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileConfig {
    pub tile: usize,
    pub overlap: usize,
    /// Pixels next to an inner tile edge are unreliable up to this distance;
    /// each tile discards half of it and feathers over the rest of the overlap.
    pub margin: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        TileConfig {
            tile: DEFAULT_TILE,
            overlap: DEFAULT_OVERLAP,
            margin: DEFAULT_MARGIN,
        }
    }
}

impl TileConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "tile_config";
        if self.tile == 0 || !self.tile.is_multiple_of(ALIGN) {
            return Err(Error::invalid(OP, format!("tile size {} must be a positive multiple of {ALIGN}", self.tile)));
        }
        if !self.overlap.is_multiple_of(ALIGN) || self.overlap >= self.tile {
            return Err(Error::invalid(
                OP,
                format!(
                    "overlap {} must be a multiple of {ALIGN} below the tile size {}",
                    self.overlap, self.tile
                ),
            ));
        }
        Ok(())
    }

    /// Tile origins along an axis of length `len` (already a multiple of 8).
    pub fn origins(&self, len: usize) -> Vec<usize> {
        if len <= self.tile {
            return vec![0];
        }
        let stride = self.tile - self.overlap;
        let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|&o| o + self.tile < len).collect();
        out.push(len - self.tile);
        out
    }
}

/// Feathering weight of a pixel at distance `d` from an inner tile edge.
fn edge_weight(d: usize, discard: usize, ramp: usize) -> f64 {
    if d < discard {
        0.0
    } else if ramp == 0 {
        1.0
    } else {
        ((d - discard) as f64 + 0.5).min(ramp as f64) / ramp as f64
    }
}

fn axis_weights(origin: usize, extent: usize, len: usize, discard: usize, ramp: usize) -> Vec<f64> {
    (0..extent)
        .map(|i| {
            let lo = if origin == 0 { 1.0 } else { edge_weight(i, discard, ramp) };
            let hi = if origin + extent >= len {
                1.0
            } else {
                edge_weight(extent - 1 - i, discard, ramp)
            };
            lo.min(hi)
        })
        .collect()
}

/// Runs [`deblur_sequence`] on 8-aligned tiles with explicit origins and
/// stitches every step's predictions.
pub fn tile_infer_at(
    frames: &[Tensor<f32>],
    params: &RdnParams<f32>,
    tiles: &TileConfig,
    origins_y: &[usize],
    origins_x: &[usize],
    max_steps: Option<usize>,
) -> Result<Vec<Tensor<f32>>> {
    check_sequence(frames)?;
    tiles.validate()?;
    if let Some(&o) = origins_y.iter().chain(origins_x).find(|&&o| o % ALIGN != 0) {
        return Err(Error::Alignment { origin: o });
    }
    let [_, _, h0, w0] = frames[0].shape();
    let padded: Vec<Tensor<f32>> = frames.iter().map(|f| pad_reflect_to_multiple(f, ALIGN)).collect();
    let [_, _, h, w] = padded[0].shape();
    let (th, tw) = (tiles.tile.min(h), tiles.tile.min(w));
    for (&o, len, t) in origins_y
        .iter()
        .map(|o| (o, h, th))
        .chain(origins_x.iter().map(|o| (o, w, tw)))
    {
        if o + t > len {
            return Err(Error::invalid("tile_infer", format!("tile at {o} extends past the frame ({len})")));
        }
    }
    if tiles.overlap < tiles.margin {
        log::warn!(
            "tile overlap {} is below the receptive-field margin {}; seams may be visible",
            tiles.overlap,
            tiles.margin
        );
    }
    let discard = tiles.margin.min(tiles.overlap) / 2;
    let ramp = tiles.overlap - 2 * discard;

    let grid: Vec<(usize, usize)> = origins_y
        .iter()
        .flat_map(|&y| origins_x.iter().map(move |&x| (y, x)))
        .collect();
    let results: Vec<Vec<Tensor<f32>>> = map_range(grid.len(), |i| {
        let (y, x) = grid[i];
        let crops = padded.iter().map(|f| f.crop(y, x, th, tw)).collect::<Result<Vec<_>>>()?;
        deblur_sequence(&crops, params, max_steps)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let steps = results.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        let mut acc = vec![0.0f64; 3 * h * w];
        let mut wsum = vec![0.0f64; h * w];
        for (&(oy, ox), preds) in grid.iter().zip(&results) {
            let wy = axis_weights(oy, th, h, discard, ramp);
            let wx = axis_weights(ox, tw, w, discard, ramp);
            let p = &preds[k];
            for y in 0..th {
                for x in 0..tw {
                    let wt = wy[y] * wx[x];
                    if wt == 0.0 {
                        continue;
                    }
                    let i = (oy + y) * w + ox + x;
                    wsum[i] += wt;
                    for c in 0..3 {
                        acc[c * h * w + i] += wt * p.at(0, c, y, x) as f64;
                    }
                }
            }
        }
        if let Some(i) = wsum.iter().position(|&s| s == 0.0) {
            return Err(Error::invalid(
                "tile_infer",
                format!("tile grid leaves pixel ({}, {}) uncovered", i / w, i % w),
            ));
        }
        let full = Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
            let i = y * w + x;
            (acc[c * h * w + i] / wsum[i]) as f32
        });
        out.push(full.crop(0, 0, h0, w0)?);
    }
    Ok(out)
}

/// Tiled inference over the regular grid implied by `tiles`. Frames no larger
/// than one tile take the untiled path unchanged.
pub fn tile_infer(
    frames: &[Tensor<f32>],
    params: &RdnParams<f32>,
    tiles: &TileConfig,
    max_steps: Option<usize>,
) -> Result<Vec<Tensor<f32>>> {
    check_sequence(frames)?;
    tiles.validate()?;
    let (h, w) = (frames[0].h().div_ceil(ALIGN) * ALIGN, frames[0].w().div_ceil(ALIGN) * ALIGN);
    if h <= tiles.tile && w <= tiles.tile {
        return deblur_sequence(frames, params, max_steps);
    }
    tile_infer_at(frames, params, tiles, &tiles.origins(h), &tiles.origins(w), max_steps)
}

/// One level of a multi-scale run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelTrace {
    pub h: usize,
    pub w: usize,
    pub sequence_len: usize,
}

#[derive(Clone, Debug)]
pub struct MultiscaleOutput {
    /// Per-step predictions at full resolution.
    pub predictions: Vec<Tensor<f32>>,
    /// Coarsest level first.
    pub trace: Vec<LevelTrace>,
}

/// Coarse-to-fine inference over `levels` scales (factor 2 apart).
///
/// Each level deblurs area-downscaled frames; its final prediction is
/// bilinearly upscaled and appended as an extra observation at the next finer level.
pub fn multiscale_infer(
    frames: &[Tensor<f32>],
    params: &RdnParams<f32>,
    levels: usize,
    tiles: Option<&TileConfig>,
) -> Result<MultiscaleOutput> {
    check_sequence(frames)?;
    if !(1..=3).contains(&levels) {
        return Err(Error::invalid("multiscale_infer", format!("levels must be 1, 2 or 3, got {levels}")));
    }
    let run = |seq: &[Tensor<f32>]| match tiles {
        Some(t) => tile_infer(seq, params, t, None),
        None => deblur_sequence(seq, params, None),
    };
    let [_, _, h, w] = frames[0].shape();
    let mut trace = Vec::with_capacity(levels);
    let mut carry: Option<Tensor<f32>> = None;
    let mut last = Vec::new();
    for level in (0..levels).rev() {
        let factor = 1usize << level;
        let (lh, lw) = (h / factor, w / factor);
        if lh < ALIGN || lw < ALIGN {
            return Err(Error::invalid(
                "multiscale_infer",
                format!("{h}x{w} frames are too small for {levels} levels"),
            ));
        }
        let mut seq: Vec<Tensor<f32>> = if factor == 1 {
            frames.to_vec()
        } else {
            frames.iter().map(|f| downscale_area(f, factor)).collect::<Result<_>>()?
        };
        let [_, _, sh, sw] = seq[0].shape();
        if let Some(prev) = carry.take() {
            seq.push(resize_bilinear(&prev, sh, sw));
        }
        trace.push(LevelTrace {
            h: sh,
            w: sw,
            sequence_len: seq.len(),
        });
        last = run(&seq)?;
        carry = last.last().cloned();
    }
    Ok(MultiscaleOutput {
        predictions: last,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, WidthMultiplier};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params() -> RdnParams<f32> {
        init_params(WidthMultiplier::new(1, 16).unwrap(), 3).unwrap()
    }

    fn frames(count: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| Tensor::from_fn([1, 3, h, w], |_| rng.random::<f32>()))
            .collect()
    }

    #[test]
    fn psnr_closed_form_and_sentinel() {
        let a = Tensor::<f32>::full([1, 3, 4, 4], 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Tensor::<f32>::full([1, 3, 4, 4], 0.4);
        let expected = 20.0 - 10.0 * ((0.5f32 - 0.4f32) as f64 / 0.1).powi(2).log10();
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn psnr_matches_two_loop_oracle() {
        let f = frames(2, 7, 5, 11);
        let mut se = 0.0;
        for i in 0..f[0].len() {
            let d = f[0].data()[i] as f64 - f[1].data()[i] as f64;
            se += d * d;
        }
        let oracle = 10.0 * (1.0 / (se / f[0].len() as f64)).log10();
        assert!((psnr(&f[0], &f[1]).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn step_counts_follow_sequence_length() {
        let p = params();
        assert_eq!(deblur_sequence(&frames(2, 16, 16, 1), &p, None).unwrap().len(), 1);
        assert_eq!(deblur_sequence(&frames(17, 16, 16, 1), &p, None).unwrap().len(), 16);
        assert_eq!(deblur_sequence(&frames(17, 16, 16, 1), &p, Some(3)).unwrap().len(), 3);
        assert!(deblur_sequence(&frames(1, 16, 16, 1), &p, None).is_err());
    }

    #[test]
    fn odd_sizes_are_padded_and_cropped() {
        let out = deblur_sequence(&frames(3, 70, 70, 2), &params(), None).unwrap();
        for o in &out {
            assert_eq!(o.shape(), [1, 3, 70, 70]);
            assert!(o.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn small_frames_bypass_tiling() {
        let f = frames(3, 40, 48, 5);
        let p = params();
        let tiles = TileConfig {
            tile: 64,
            overlap: 32,
            margin: 32,
        };
        assert_eq!(tile_infer(&f, &p, &tiles, None).unwrap(), deblur_sequence(&f, &p, None).unwrap());
    }

    #[test]
    fn misaligned_origin_rejected() {
        let f = frames(2, 64, 64, 6);
        let tiles = TileConfig {
            tile: 32,
            overlap: 16,
            margin: 16,
        };
        let err = tile_infer_at(&f, &params(), &tiles, &[0, 20], &[0], None).unwrap_err();
        assert!(matches!(err, Error::Alignment { origin: 20 }), "{err}");
    }

    #[test]
    fn origins_cover_axis() {
        let t = TileConfig {
            tile: 64,
            overlap: 32,
            margin: 32,
        };
        assert_eq!(t.origins(128), vec![0, 32, 64]);
        assert_eq!(t.origins(136), vec![0, 32, 64, 72]);
        assert_eq!(t.origins(48), vec![0]);
    }

    #[test]
    fn feather_weights_partition_overlap() {
        let (discard, ramp) = (8, 16);
        let a = axis_weights(0, 64, 128, discard, ramp);
        let b = axis_weights(32, 64, 128, discard, ramp);
        for y in 32..64 {
            let s = a[y] + b[y - 32];
            assert!((s - 1.0).abs() < 1e-12, "y={y}: {s}");
        }
        assert_eq!(a[63], 0.0);
        assert_eq!(b[0], 0.0);
    }

    #[test]
    fn multiscale_schedule() {
        let f = frames(3, 64, 64, 7);
        let p = params();
        let one = multiscale_infer(&f, &p, 1, None).unwrap();
        assert_eq!(one.predictions, deblur_sequence(&f, &p, None).unwrap());
        let three = multiscale_infer(&f, &p, 3, None).unwrap();
        let sizes: Vec<(usize, usize)> = three.trace.iter().map(|t| (t.h, t.sequence_len)).collect();
        assert_eq!(sizes, vec![(16, 3), (32, 4), (64, 4)]);
        assert_eq!(three.predictions.len(), 3);
        assert!(multiscale_infer(&frames(2, 16, 16, 1), &p, 3, None).is_err());
    }
}
