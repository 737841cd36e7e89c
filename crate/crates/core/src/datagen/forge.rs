//! End-to-end synthesis of blurry/sharp training samples from sharp clips.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_range, stream_rng, with_workers};
use crate::io::{load_frame, parse_frame_name};
use crate::tensor::Tensor;

use super::flow::{bidirectional_flow, FlowField, FlowOpts};
use super::image_ops::downscale_area;
use super::psf::{apply_psf, sample_psf, PsfOpts, PSF_SIZES};
use super::sharpness::{sharpness_score, DEFAULT_SHARPNESS_THRESHOLD};
use super::subframe::{average_blur, blend_at, SubframeSpec};

/// Blurry frames per sample: the target followed by four older observations.
pub const FRAMES_PER_SAMPLE: usize = 5;

/// Consecutive sharp frames needed to build one sample: each blurry frame
/// needs its two neighbours.
pub const MIN_CLIP_FRAMES: usize = FRAMES_PER_SAMPLE + 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgeConfig {
    pub n: usize,
    /// Half-windows to draw from, one per sample.
    pub ls: Vec<usize>,
    pub crop: usize,
    pub psf_sizes: Vec<usize>,
    pub shake_magnitude: f64,
    pub seed: u64,
    /// Worker threads; 0 uses the library default.
    pub workers: usize,
    pub sharpness_threshold: f64,
    pub flow: FlowOpts,
    pub psf_samples: usize,
    pub psf_length_scale: f64,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        let psf = PsfOpts::default();
        ForgeConfig {
            n: 40,
            ls: vec![20, 40],
            crop: 128,
            psf_sizes: PSF_SIZES.to_vec(),
            shake_magnitude: psf.shake_magnitude,
            seed: 0,
            workers: 0,
            sharpness_threshold: DEFAULT_SHARPNESS_THRESHOLD,
            flow: FlowOpts::default(),
            psf_samples: psf.samples,
            psf_length_scale: psf.length_scale,
        }
    }
}

impl ForgeConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "forge_config";
        if self.ls.is_empty() {
            return Err(Error::invalid(OP, "at least one half-window L is required"));
        }
        for &l in &self.ls {
            SubframeSpec::new(self.n, l)?;
        }
        if self.crop == 0 {
            return Err(Error::invalid(OP, "crop size must be positive"));
        }
        if self.psf_sizes.is_empty() {
            return Err(Error::invalid(OP, "at least one PSF size is required"));
        }
        if let Some(s) = self.psf_sizes.iter().find(|&&s| s % 2 == 0 || s < 3) {
            return Err(Error::invalid(OP, format!("PSF size {s} must be odd and >= 3")));
        }
        if !(0.0..=1.0).contains(&self.shake_magnitude) {
            return Err(Error::invalid(OP, "shake magnitude must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn psf_opts(&self) -> PsfOpts {
        PsfOpts {
            shake_magnitude: self.shake_magnitude,
            samples: self.psf_samples,
            length_scale: self.psf_length_scale,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    /// Source frame number of the target (sharp) frame.
    pub frame_index: usize,
    /// Window in the downscaled frame.
    pub crop: CropRect,
    pub downscale: usize,
    pub l: usize,
    pub n: usize,
    /// One entry per blurry frame; a size of 0 means no PSF was applied.
    pub psf_sizes: Vec<usize>,
    pub psf_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    /// Target first, then older observations nearest-first; each `[1, 3, h, w]`.
    pub blurry: Vec<Tensor<f32>>,
    pub sharp: Tensor<f32>,
    pub provenance: Provenance,
}

/// A run of consecutively numbered frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Clip {
    pub id: String,
    pub indices: Vec<usize>,
    pub paths: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedClip {
    pub source: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForgeSummary {
    pub samples: usize,
    pub skipped: Vec<SkippedClip>,
}

/// Finds `frame_%06d.png` runs in `dir` and its subdirectories.
///
/// Gaps in the numbering split a directory into several clips.
pub fn discover_clips(dir: &Path) -> Result<Vec<Clip>> {
    let mut clips = Vec::new();
    scan_dir(dir, dir, &mut clips)?;
    Ok(clips)
}

fn scan_dir(root: &Path, dir: &Path, clips: &mut Vec<Clip>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::new();
    let mut subdirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            subdirs.push(path);
        } else if let Some(i) = path.file_name().and_then(|n| n.to_str()).and_then(parse_frame_name) {
            frames.push((i, path));
        }
    }
    frames.sort();
    subdirs.sort();

    let rel = dir.strip_prefix(root).unwrap_or(dir);
    let base = if rel.as_os_str().is_empty() {
        ".".to_string()
    } else {
        rel.to_string_lossy().into_owned()
    };
    let mut runs: Vec<Vec<(usize, PathBuf)>> = Vec::new();
    for (i, p) in frames {
        match runs.last_mut() {
            Some(run) if run.last().map(|(j, _)| j + 1) == Some(i) => run.push((i, p)),
            _ => runs.push(vec![(i, p)]),
        }
    }
    let split = runs.len() > 1;
    for run in runs {
        let id = if split { format!("{base}#{}", run[0].0) } else { base.clone() };
        let (indices, paths) = run.into_iter().unzip();
        clips.push(Clip { id, indices, paths });
    }
    for sub in subdirs {
        scan_dir(root, &sub, clips)?;
    }
    Ok(())
}

/// Integer area-downscale factor that brings the short side closest to `crop`
/// without going below it.
pub fn downscale_factor(h: usize, w: usize, crop: usize) -> usize {
    (h.min(w) / crop.max(1)).max(1)
}

/// Frame-averaging blur of frame `s` from its neighbours `s - 1` and `s + 1`.
///
/// `gaps[g]` holds the `(forward, backward)` flows between frames `g` and `g + 1`.
pub fn blurred_frame(
    frames: &[Tensor<f32>],
    gaps: &[(FlowField, FlowField)],
    s: usize,
    spec: SubframeSpec,
) -> Result<Tensor<f32>> {
    if s == 0 || s + 1 >= frames.len() {
        return Err(Error::invalid(
            "blurred_frame",
            format!("frame {s} needs both neighbours in a clip of {}", frames.len()),
        ));
    }
    let n = spec.n;
    let time = |k: usize| k as f64 / (n + 1) as f64;
    let (prev_fwd, prev_bwd) = &gaps[s - 1];
    let (next_fwd, next_bwd) = &gaps[s];
    let mut preceding = Vec::with_capacity(spec.l);
    let mut following = Vec::with_capacity(spec.l);
    for l in 1..=spec.l {
        preceding.push(blend_at(&frames[s - 1], &frames[s], prev_fwd, prev_bwd, time(n + 1 - l))?);
        following.push(blend_at(&frames[s], &frames[s + 1], next_fwd, next_bwd, time(l))?);
    }
    average_blur(&frames[s], &preceding, &following, spec.l)
}

/// Flows for every consecutive pair of `frames`.
pub fn clip_flows(frames: &[Tensor<f32>], opts: &FlowOpts) -> Result<Vec<(FlowField, FlowField)>> {
    map_range(frames.len().saturating_sub(1), |g| {
        bidirectional_flow(&frames[g], &frames[g + 1], opts)
    })
    .into_iter()
    .collect()
}

/// Builds every sample of one clip of already loaded, already downscaled frames.
///
/// `indices[i]` is the source frame number of `frames[i]`.
pub fn forge_frames(
    frames: &[Tensor<f32>],
    indices: &[usize],
    source: &str,
    downscale: usize,
    clip_key: u64,
    cfg: &ForgeConfig,
) -> Result<Vec<TrainingSample>> {
    cfg.validate()?;
    if frames.len() < MIN_CLIP_FRAMES {
        return Err(Error::Corpus(format!(
            "clip {source} has {} frames; at least {MIN_CLIP_FRAMES} are needed",
            frames.len()
        )));
    }
    let [_, c, h, w] = frames[0].shape();
    if let Some(bad) = frames.iter().position(|f| f.shape() != frames[0].shape()) {
        return Err(Error::Corpus(format!(
            "clip {source}: frame {} differs in size from the first frame",
            indices[bad]
        )));
    }
    if c != 3 || h < cfg.crop || w < cfg.crop {
        return Err(Error::Corpus(format!(
            "clip {source}: frames of {h}x{w} cannot hold a {0}x{0} crop",
            cfg.crop
        )));
    }

    struct Plan {
        t: usize,
        l: usize,
        crop: CropRect,
        psf_sizes: Vec<usize>,
        psf_seeds: Vec<u64>,
    }
    let targets: Vec<usize> = (FRAMES_PER_SAMPLE..frames.len() - 1).collect();
    let plans: Vec<Plan> = targets
        .iter()
        .map(|&t| {
            let mut rng = stream_rng(cfg.seed, &[clip_key, indices[t] as u64]);
            let l = cfg.ls[rng.random_range(0..cfg.ls.len())];
            let crop = CropRect {
                y: rng.random_range(0..=h - cfg.crop),
                x: rng.random_range(0..=w - cfg.crop),
                h: cfg.crop,
                w: cfg.crop,
            };
            let mut psf_sizes = Vec::with_capacity(FRAMES_PER_SAMPLE);
            let mut psf_seeds = Vec::with_capacity(FRAMES_PER_SAMPLE);
            for _ in 0..FRAMES_PER_SAMPLE {
                psf_sizes.push(cfg.psf_sizes[rng.random_range(0..cfg.psf_sizes.len())]);
                psf_seeds.push(rng.random());
            }
            Plan {
                t,
                l,
                crop,
                psf_sizes,
                psf_seeds,
            }
        })
        .collect();

    let gaps = clip_flows(frames, &cfg.flow)?;
    let needed: Vec<(usize, usize)> = plans
        .iter()
        .flat_map(|p| (0..FRAMES_PER_SAMPLE).map(move |k| (p.t - k, p.l)))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let blurs: Vec<Tensor<f32>> = map_range(needed.len(), |i| {
        let (s, l) = needed[i];
        blurred_frame(frames, &gaps, s, SubframeSpec { n: cfg.n, l })
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let blur_of = |s: usize, l: usize| &blurs[needed.binary_search(&(s, l)).expect("planned blur")];

    let psf_opts = cfg.psf_opts();
    map_range(plans.len(), |i| {
        let p = &plans[i];
        let CropRect { y, x, .. } = p.crop;
        let sharp = frames[p.t].crop(y, x, cfg.crop, cfg.crop)?;
        let mut blurry = Vec::with_capacity(FRAMES_PER_SAMPLE);
        for k in 0..FRAMES_PER_SAMPLE {
            let b = blur_of(p.t - k, p.l).crop(y, x, cfg.crop, cfg.crop)?;
            let kernel = sample_psf(p.psf_sizes[k], p.psf_seeds[k], &psf_opts)?;
            blurry.push(apply_psf(&b, &kernel).clamp(0.0, 1.0));
        }
        Ok(TrainingSample {
            blurry,
            sharp,
            provenance: Provenance {
                source: source.to_string(),
                frame_index: indices[p.t],
                crop: p.crop,
                downscale,
                l: p.l,
                n: cfg.n,
                psf_sizes: p.psf_sizes.clone(),
                psf_seeds: p.psf_seeds.clone(),
            },
        })
    })
    .into_iter()
    .collect()
}

/// Loads, downscales and sharpness-gates a clip.
fn load_clip(clip: &Clip, cfg: &ForgeConfig) -> Result<std::result::Result<(Vec<Tensor<f32>>, usize), String>> {
    if clip.paths.len() < MIN_CLIP_FRAMES {
        return Ok(Err(format!(
            "only {} consecutive frames; at least {MIN_CLIP_FRAMES} are needed",
            clip.paths.len()
        )));
    }
    let raw: Vec<Tensor<f32>> = map_range(clip.paths.len(), |i| load_frame(&clip.paths[i]))
        .into_iter()
        .collect::<Result<_>>()?;
    let [_, _, h, w] = raw[0].shape();
    if h < cfg.crop || w < cfg.crop {
        return Ok(Err(format!("frames of {h}x{w} are smaller than the {0}x{0} crop", cfg.crop)));
    }
    let factor = downscale_factor(h, w, cfg.crop);
    let frames: Vec<Tensor<f32>> = map_range(raw.len(), |i| downscale_area(&raw[i], factor))
        .into_iter()
        .collect::<Result<_>>()?;
    for (i, f) in frames.iter().enumerate() {
        let s = sharpness_score(f, cfg.sharpness_threshold);
        if !s.pass {
            return Ok(Err(format!(
                "frame {} failed the sharpness test (score {:.3e} < {:.3e})",
                clip.indices[i], s.score, cfg.sharpness_threshold
            )));
        }
    }
    Ok(Ok((frames, factor)))
}

/// Forges every clip under `dir`, handing samples to `sink` in a fixed order
/// (clip discovery order, then target frame order).
///
/// Clips that are too short, too small or fail the sharpness test are skipped
/// with a warning. Finding no usable clip at all is an error.
pub fn make_samples(
    dir: &Path,
    cfg: &ForgeConfig,
    mut sink: impl FnMut(TrainingSample) -> Result<()> + Send,
) -> Result<ForgeSummary> {
    cfg.validate()?;
    let clips = discover_clips(dir)?;
    if clips.is_empty() {
        return Err(Error::Corpus(format!("no frame_%06d.png files under {}", dir.display())));
    }
    with_workers(cfg.workers, || {
        let mut summary = ForgeSummary::default();
        for (key, clip) in clips.iter().enumerate() {
            let (frames, factor) = match load_clip(clip, cfg)? {
                Ok(v) => v,
                Err(reason) => {
                    log::warn!("skipping clip {}: {reason}", clip.id);
                    summary.skipped.push(SkippedClip {
                        source: clip.id.clone(),
                        reason,
                    });
                    continue;
                }
            };
            let samples = forge_frames(&frames, &clip.indices, &clip.id, factor, key as u64, cfg)?;
            log::info!("clip {}: {} samples", clip.id, samples.len());
            for s in samples {
                sink(s)?;
                summary.samples += 1;
            }
        }
        if summary.samples == 0 {
            let reasons: Vec<String> = summary.skipped.iter().map(|s| format!("{}: {}", s.source, s.reason)).collect();
            return Err(Error::Corpus(format!(
                "no clip under {} produced a sample ({})",
                dir.display(),
                reasons.join("; ")
            )));
        }
        Ok(summary)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{frame_name, save_frame};

    fn texture(h: usize, w: usize, shift: f64) -> Tensor<f32> {
        Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
            let x = x as f64 - shift;
            let v = 0.5
                + 0.2 * (0.31 * x + 0.17 * y as f64 + c as f64).sin()
                + 0.15 * (0.23 * y as f64 - 0.41 * x).cos();
            v as f32
        })
    }

    fn noise(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
            let k = (y * 7919 + x * 104_729 + c * 1_299_709) as u64;
            (crate::exec::stream_rng(1, &[k]).random::<u32>() % 1000) as f32 / 1000.0
        })
    }

    fn small_cfg() -> ForgeConfig {
        ForgeConfig {
            n: 4,
            ls: vec![2],
            crop: 16,
            psf_sizes: vec![7],
            shake_magnitude: 0.0,
            ..ForgeConfig::default()
        }
    }

    #[test]
    fn static_clip_is_identity() {
        let frames = vec![texture(24, 24, 0.0); 8];
        let idx: Vec<usize> = (0..8).collect();
        let samples = forge_frames(&frames, &idx, "static", 1, 0, &small_cfg()).unwrap();
        assert_eq!(samples.len(), 2);
        for s in &samples {
            for b in &s.blurry {
                assert!(b.max_abs_diff(&s.sharp).unwrap() < 1e-6);
            }
        }
    }

    #[test]
    fn short_clip_rejected() {
        let frames = vec![texture(24, 24, 0.0); 6];
        let idx: Vec<usize> = (0..6).collect();
        let err = forge_frames(&frames, &idx, "short", 1, 0, &small_cfg()).unwrap_err();
        assert!(err.to_string().contains("at least 7"), "{err}");
    }

    #[test]
    fn discovery_splits_runs_and_descends() {
        let dir = tempfile::tempdir().unwrap();
        let f = texture(4, 4, 0.0);
        for i in [0, 1, 2, 5, 6] {
            save_frame(dir.path().join(frame_name(i)), &f).unwrap();
        }
        let sub = dir.path().join("b");
        std::fs::create_dir(&sub).unwrap();
        save_frame(sub.join(frame_name(3)), &f).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let clips = discover_clips(dir.path()).unwrap();
        let ids: Vec<&str> = clips.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, vec![".#0", ".#5", "b"]);
        assert_eq!(clips[0].indices, vec![0, 1, 2]);
    }

    #[test]
    fn flat_clip_skipped_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good");
        let flat = dir.path().join("flat");
        for (d, img) in [(&good, noise(16, 16)), (&flat, Tensor::full([1, 3, 16, 16], 0.5))] {
            std::fs::create_dir(d).unwrap();
            for i in 0..7 {
                save_frame(d.join(frame_name(i)), &img).unwrap();
            }
        }
        let mut got = Vec::new();
        let summary = make_samples(dir.path(), &small_cfg(), |s| {
            got.push(s);
            Ok(())
        })
        .unwrap();
        assert_eq!(summary.samples, 1);
        assert_eq!(summary.skipped.len(), 1);
        assert_eq!(summary.skipped[0].source, "flat");
        assert_eq!(got[0].provenance.source, "good");
    }

    #[test]
    fn downscale_factor_keeps_crop_inside() {
        assert_eq!(downscale_factor(720, 1280, 128), 5);
        assert_eq!(downscale_factor(100, 100, 128), 1);
        assert_eq!(downscale_factor(256, 300, 128), 2);
    }
}
