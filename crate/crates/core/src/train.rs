//! Mini-batch training of the unrolled network on a forged corpus.
//!
//! Every iteration draws its batch from a random stream keyed by
//! `(seed, iteration)`, and checkpoints carry the optimiser state, so a run
//! resumed from any checkpoint continues exactly as the uninterrupted run.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::corpus::Corpus;
use crate::datagen::forge::{TrainingSample, FRAMES_PER_SAMPLE};
use crate::datagen::psf::{apply_psf, sample_psf, PsfOpts, PSF_SIZES};
use crate::error::{Error, Result};
use crate::exec::{stream_rng, with_workers};
use crate::infer::psnr;
use crate::net::{
    init_params, load_checkpoint, read_container, rdn_unroll, rdn_unroll_grad, save_checkpoint, write_container,
    Entry, RdnParams, WidthMultiplier,
};
use crate::ops::BnMode;
use crate::optim::{adam_step, AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_LR};
use crate::tensor::{Scalar, Tensor};

pub const LOG_NAME: &str = "train_log.csv";
pub const FINAL_NAME: &str = "final";

const ADAM_MAGIC: &[u8; 4] = b"RDNA";
const ADAM_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Deblur steps per unroll; uses `steps + 1` frames of each sample.
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub width: WidthMultiplier,
    pub max_iterations: usize,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: usize,
    pub seed: u64,
    /// Re-blur every drawn observation with a fresh camera-shake kernel.
    pub psf_on_the_fly: bool,
    pub psf_sizes: Vec<usize>,
    pub shake_magnitude: f64,
    /// Number of corpus samples, taken from the end, kept out of training.
    pub holdout: usize,
    /// Iterations between held-out evaluations; 0 disables them.
    pub eval_every: usize,
    /// Halve the learning rate every this many iterations; 0 keeps it constant.
    pub lr_halve_every: usize,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            steps: 4,
            lr: DEFAULT_LR,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            width: WidthMultiplier { num: 1, den: 8 },
            max_iterations: 1000,
            checkpoint_every: 100,
            seed: 0,
            psf_on_the_fly: false,
            psf_sizes: PSF_SIZES.to_vec(),
            shake_magnitude: PsfOpts::default().shake_magnitude,
            holdout: 0,
            eval_every: 50,
            lr_halve_every: 0,
            workers: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "train_config";
        if self.batch_size == 0 {
            return Err(Error::invalid(OP, "batch size must be positive"));
        }
        if self.steps == 0 || self.steps + 1 > FRAMES_PER_SAMPLE {
            return Err(Error::invalid(
                OP,
                format!("steps must lie in 1..={} (samples hold {FRAMES_PER_SAMPLE} frames)", FRAMES_PER_SAMPLE - 1),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(OP, "learning rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid(OP, "Adam betas must lie in [0, 1)"));
        }
        if self.psf_on_the_fly && self.psf_sizes.iter().any(|&s| s % 2 == 0 || s < 3) {
            return Err(Error::invalid(OP, "PSF sizes must be odd and >= 3"));
        }
        Ok(())
    }

    fn lr_at(&self, iteration: usize) -> f64 {
        match self.lr_halve_every {
            0 => self.lr,
            k => self.lr * 0.5f64.powi((iteration / k) as i32),
        }
    }
}

/// `steps + 1` stacked frame tensors `[B, 3, h, w]` plus the stacked ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub frames: Vec<Tensor<T>>,
    pub sharp: Tensor<T>,
    /// Corpus indices of the drawn samples.
    pub indices: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn cast<U: Scalar>(&self) -> Batch<U> {
        Batch {
            frames: self.frames.iter().map(Tensor::cast).collect(),
            sharp: self.sharp.cast(),
            indices: self.indices.clone(),
        }
    }
}

/// Fresh camera shake applied on top of the stored observations.
#[derive(Clone, Debug, PartialEq)]
pub struct OnTheFlyPsf {
    pub sizes: Vec<usize>,
    pub opts: PsfOpts,
}

/// Draws `batch_size` samples uniformly with replacement and stacks their
/// first `frames` frames.
pub fn sample_batch(
    samples: &[TrainingSample],
    batch_size: usize,
    frames: usize,
    rng: &mut ChaCha8Rng,
    psf: Option<&OnTheFlyPsf>,
) -> Result<Batch<f32>> {
    if samples.is_empty() {
        return Err(Error::Corpus("cannot sample a batch from an empty corpus".into()));
    }
    if frames == 0 || frames > FRAMES_PER_SAMPLE {
        return Err(Error::invalid("sample_batch", format!("frame count {frames} outside 1..={FRAMES_PER_SAMPLE}")));
    }
    let indices: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..samples.len())).collect();
    let mut per_frame: Vec<Vec<Tensor<f32>>> = vec![Vec::with_capacity(batch_size); frames];
    for &i in &indices {
        for (k, slot) in per_frame.iter_mut().enumerate() {
            let obs = &samples[i].blurry[k];
            slot.push(match psf {
                Some(p) => {
                    let size = p.sizes[rng.random_range(0..p.sizes.len())];
                    let kernel = sample_psf(size, rng.random(), &p.opts)?;
                    apply_psf(obs, &kernel).clamp(0.0, 1.0)
                }
                None => obs.clone(),
            });
        }
    }
    let stack = |v: &[Tensor<f32>]| Tensor::stack(&v.iter().collect::<Vec<_>>());
    let sharp: Vec<Tensor<f32>> = indices.iter().map(|&i| samples[i].sharp.clone()).collect();
    Ok(Batch {
        frames: per_frame.iter().map(|v| stack(v)).collect::<Result<_>>()?,
        sharp: stack(&sharp)?,
        indices,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub per_step: Vec<f64>,
}

/// One optimisation step: unrolled forward, backward, Adam update, then the
/// batch statistics of every step are folded into the running statistics.
///
/// A non-finite loss or gradient leaves `params` and `adam` untouched.
pub fn train_step<T: Scalar>(params: &mut RdnParams<T>, batch: &Batch<T>, adam: &mut AdamState<T>) -> Result<StepLoss> {
    let g = rdn_unroll_grad(&batch.frames, params, &batch.sharp, BnMode::Train)?;
    let total = g.output.total_loss.map(|t| t.f64()).unwrap_or(f64::NAN);
    if !total.is_finite() {
        return Err(Error::NonFinite { op: "train_step" });
    }
    adam_step(&mut params.groups_mut(), &g.grads.groups(), adam)?;
    g.apply_running_stats(params);
    Ok(StepLoss {
        total,
        per_step: g.output.step_losses.iter().map(|l| l.f64()).collect(),
    })
}

/// Mean PSNR of the last-step prediction (clamped, running BN statistics).
pub fn evaluate(params: &RdnParams<f32>, samples: &[TrainingSample], steps: usize) -> Result<f64> {
    let mut acc = 0.0;
    for s in samples {
        let out = rdn_unroll(&s.blurry[..=steps], params, None, BnMode::Infer)?;
        let pred = out.predictions.last().expect("at least one step").clamp(0.0, 1.0);
        acc += psnr(&pred, &s.sharp)?.min(100.0);
    }
    Ok(acc / samples.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub loss: f64,
    pub step_losses: Vec<f64>,
    pub psnr_holdout: Option<f64>,
    pub ms_per_iter: f64,
}

impl LogRow {
    /// The CSV line without the wall-clock column.
    pub fn deterministic_fields(&self) -> String {
        let mut s = format!("{},{:e}", self.iter, self.loss);
        for l in &self.step_losses {
            s.push_str(&format!(",{l:e}"));
        }
        match self.psnr_holdout {
            Some(p) => s.push_str(&format!(",{p:.6}")),
            None => s.push(','),
        }
        s
    }

    pub fn csv_line(&self) -> String {
        format!("{},{:.3}", self.deterministic_fields(), self.ms_per_iter)
    }
}

pub fn csv_header(steps: usize) -> String {
    let mut h = String::from("iter,L");
    for k in 1..=steps {
        h.push_str(&format!(",L{k}"));
    }
    h.push_str(",psnr_holdout,ms_per_iter");
    h
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn push(&mut self, row: LogRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.iter <= last.iter {
                return Err(Error::invalid(
                    "train_log",
                    format!("iteration {} does not follow {}", row.iter, last.iter),
                ));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    /// Moving average of the total loss over `window` rows ending at `row`.
    pub fn moving_average(&self, row: usize, window: usize) -> f64 {
        let start = (row + 1).saturating_sub(window);
        let slice = &self.rows[start..=row];
        slice.iter().map(|r| r.loss).sum::<f64>() / slice.len() as f64
    }
}

fn adam_entries(params: &RdnParams<f32>, adam: &AdamState<f32>) -> Vec<Entry> {
    let mut out = vec![Entry {
        name: "hyper".into(),
        dims: vec![4],
        data: vec![adam.lr, adam.beta1, adam.beta2, adam.eps],
    }];
    for (i, name) in params.group_names().into_iter().enumerate() {
        for (tag, buf) in [("m", &adam.m[i]), ("v", &adam.v[i])] {
            out.push(Entry {
                name: format!("{tag}.{name}"),
                dims: vec![buf.len() as u32],
                data: buf.clone(),
            });
        }
    }
    out
}

pub fn save_adam_state(params: &RdnParams<f32>, adam: &AdamState<f32>, path: &Path) -> Result<()> {
    let header = [ADAM_VERSION, adam.t as u32, (adam.t >> 32) as u32];
    let bytes = write_container(ADAM_MAGIC, &header, &adam_entries(params, adam));
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_adam_state(params: &RdnParams<f32>, path: &Path) -> Result<AdamState<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, entries) = read_container(&bytes, ADAM_MAGIC, 3)?;
    if header[0] != ADAM_VERSION {
        return Err(Error::Checkpoint(format!("optimiser state version {} is not supported", header[0])));
    }
    let expected = adam_entries(params, &AdamState::new(&params.groups().iter().map(|g| g.len()).collect::<Vec<_>>()));
    if entries.len() != expected.len()
        || entries.iter().zip(&expected).any(|(a, b)| a.name != b.name || a.dims != b.dims)
    {
        return Err(Error::Checkpoint(format!(
            "{}: optimiser state does not match the parameter layout",
            path.display()
        )));
    }
    let mut it = entries.into_iter();
    let hyper = it.next().expect("hyper entry").data;
    let mut m = Vec::new();
    let mut v = Vec::new();
    while let (Some(a), Some(b)) = (it.next(), it.next()) {
        m.push(a.data);
        v.push(b.data);
    }
    Ok(AdamState {
        m,
        v,
        t: header[1] as u64 | (header[2] as u64) << 32,
        lr: hyper[0],
        beta1: hyper[1],
        beta2: hyper[2],
        eps: hyper[3],
    })
}

pub fn checkpoint_name(iteration: usize) -> String {
    format!("ckpt_{iteration:06}")
}

/// Live training state over an in-memory corpus.
pub struct Trainer {
    pub config: TrainConfig,
    pub params: RdnParams<f32>,
    pub adam: AdamState<f32>,
    /// Completed iterations.
    pub iteration: usize,
    train: Vec<TrainingSample>,
    holdout: Vec<TrainingSample>,
}

impl Trainer {
    pub fn new(config: TrainConfig, samples: Vec<TrainingSample>) -> Result<Self> {
        config.validate()?;
        let mut params = init_params(config.width, config.seed)?;
        params.set_bn_steps(config.steps);
        Self::from_state(config, samples, params, None)
    }

    pub fn from_state(
        config: TrainConfig,
        mut samples: Vec<TrainingSample>,
        params: RdnParams<f32>,
        adam: Option<AdamState<f32>>,
    ) -> Result<Self> {
        config.validate()?;
        if params.width != config.width {
            return Err(Error::invalid(
                "trainer",
                format!("checkpoint width {} differs from configured {}", params.width, config.width),
            ));
        }
        if config.holdout >= samples.len() {
            return Err(Error::Corpus(format!(
                "holding out {} of {} samples leaves nothing to train on",
                config.holdout,
                samples.len()
            )));
        }
        let holdout = samples.split_off(samples.len() - config.holdout);
        let sizes: Vec<usize> = params.groups().iter().map(|g| g.len()).collect();
        let adam = adam.unwrap_or_else(|| {
            AdamState::with_hyper(&sizes, config.lr as f32, config.beta1 as f32, config.beta2 as f32)
        });
        Ok(Trainer {
            iteration: adam.t as usize,
            config,
            params,
            adam,
            train: samples,
            holdout,
        })
    }

    pub fn batch_for(&self, iteration: usize) -> Result<Batch<f32>> {
        let mut rng = stream_rng(self.config.seed, &[iteration as u64]);
        let psf = self.config.psf_on_the_fly.then(|| OnTheFlyPsf {
            sizes: self.config.psf_sizes.clone(),
            opts: PsfOpts {
                shake_magnitude: self.config.shake_magnitude,
                ..PsfOpts::default()
            },
        });
        sample_batch(
            &self.train,
            self.config.batch_size,
            self.config.steps + 1,
            &mut rng,
            psf.as_ref(),
        )
    }

    /// Runs iteration `self.iteration + 1`.
    pub fn step(&mut self) -> Result<LogRow> {
        let start = Instant::now();
        let iter = self.iteration + 1;
        let batch = self.batch_for(iter)?;
        self.adam.lr = self.config.lr_at(iter - 1) as f32;
        let loss = train_step(&mut self.params, &batch, &mut self.adam).map_err(|e| match e {
            Error::NonFinite { .. } => Error::invalid(
                "train_loop",
                format!("non-finite loss or gradient at iteration {iter}; training halted"),
            ),
            other => other,
        })?;
        self.iteration = iter;
        let eval_due = self.config.eval_every > 0
            && !self.holdout.is_empty()
            && (iter.is_multiple_of(self.config.eval_every) || iter == self.config.max_iterations);
        let psnr_holdout = if eval_due {
            Some(evaluate(&self.params, &self.holdout, self.config.steps)?)
        } else {
            None
        };
        Ok(LogRow {
            iter,
            loss: loss.total,
            step_losses: loss.per_step,
            psnr_holdout,
            ms_per_iter: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        let ckpt = dir.join(format!("{stem}.rdn"));
        save_checkpoint(&self.params, &ckpt)?;
        save_adam_state(&self.params, &self.adam, &dir.join(format!("{stem}.adam")))?;
        Ok(ckpt)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    /// Rows produced by this invocation (after any resume point).
    pub log: TrainLog,
    pub resumed_from: Option<usize>,
    pub params: RdnParams<f32>,
}

/// Newest `(iteration, stem)` with both a checkpoint and an optimiser state in `dir`.
pub fn latest_state(dir: &Path) -> Result<Option<(usize, String)>> {
    let Ok(entries) = std::fs::read_dir(dir) else {
        return Ok(None);
    };
    let mut best: Option<(usize, String)> = None;
    for e in entries {
        let path = e.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|x| x.to_str()) != Some("adam") {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else {
            continue;
        };
        if !dir.join(format!("{stem}.rdn")).exists() {
            continue;
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (header, _) = read_container(&bytes, ADAM_MAGIC, 3)?;
        let it = (header[1] as u64 | (header[2] as u64) << 32) as usize;
        if best.as_ref().is_none_or(|(b, s)| it > *b || (it == *b && stem < *s)) {
            best = Some((it, stem));
        }
    }
    Ok(best)
}

fn rewrite_log_until(path: &Path, header: &str, keep_until: usize) -> Result<()> {
    let text = std::fs::read_to_string(path).unwrap_or_default();
    let mut out = String::from(header);
    out.push('\n');
    for line in text.lines().skip(1) {
        let iter = line.split(',').next().and_then(|v| v.parse::<usize>().ok());
        if iter.is_some_and(|i| i <= keep_until) {
            out.push_str(line);
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Trains on the corpus at `corpus_dir`, writing checkpoints and the CSV log
/// into `out_dir`. With `resume`, continues from the newest saved state.
pub fn train_loop(config: &TrainConfig, corpus_dir: &Path, out_dir: &Path, resume: bool) -> Result<TrainOutcome> {
    let corpus = Corpus::load(corpus_dir)?;
    train_on_samples(config, corpus.samples, out_dir, resume)
}

pub fn train_on_samples(
    config: &TrainConfig,
    samples: Vec<TrainingSample>,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_NAME);
    let header = csv_header(config.steps);

    let previous = if resume { latest_state(out_dir)? } else { None };
    let mut trainer = match &previous {
        Some((it, stem)) => {
            log::info!("resuming from {stem} (iteration {it})");
            let params = load_checkpoint(out_dir.join(format!("{stem}.rdn")))?;
            let adam = load_adam_state(&params, &out_dir.join(format!("{stem}.adam")))?;
            rewrite_log_until(&log_path, &header, *it)?;
            Trainer::from_state(config.clone(), samples, params, Some(adam))?
        }
        None => {
            std::fs::write(&log_path, format!("{header}\n")).map_err(|e| Error::io(&log_path, e))?;
            Trainer::new(config.clone(), samples)?
        }
    };
    let mut file = OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let mut log = TrainLog::default();
    with_workers(config.workers, || -> Result<()> {
        while trainer.iteration < config.max_iterations {
            let row = trainer.step()?;
            writeln!(file, "{}", row.csv_line()).map_err(|e| Error::io(&log_path, e))?;
            if row.iter % 50 == 0 || row.iter == 1 {
                log::info!("iter {} loss {:.6e}", row.iter, row.loss);
            }
            if config.checkpoint_every > 0 && row.iter % config.checkpoint_every == 0 {
                trainer.save(out_dir, &checkpoint_name(row.iter))?;
            }
            log.push(row)?;
        }
        Ok(())
    })?;
    let final_checkpoint = trainer.save(out_dir, FINAL_NAME)?;
    Ok(TrainOutcome {
        final_checkpoint,
        log,
        resumed_from: previous.map(|(it, _)| it),
        params: trainer.params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::forge::{CropRect, Provenance};

    fn sample(seed: u64, size: usize) -> TrainingSample {
        let mut rng = stream_rng(seed, &[0]);
        let mut img = || Tensor::<f32>::from_fn([1, 3, size, size], |_| rng.random::<f32>());
        TrainingSample {
            blurry: (0..FRAMES_PER_SAMPLE).map(|_| img()).collect(),
            sharp: img(),
            provenance: Provenance {
                source: format!("s{seed}"),
                frame_index: seed as usize,
                crop: CropRect { y: 0, x: 0, h: size, w: size },
                downscale: 1,
                l: 20,
                n: 40,
                psf_sizes: vec![0; FRAMES_PER_SAMPLE],
                psf_seeds: vec![0; FRAMES_PER_SAMPLE],
            },
        }
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            steps: 2,
            width: WidthMultiplier::new(1, 16).unwrap(),
            max_iterations: 3,
            checkpoint_every: 0,
            eval_every: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_sample_batch() {
        let s = vec![sample(1, 8)];
        let mut rng = stream_rng(0, &[0]);
        let b = sample_batch(&s, 1, 3, &mut rng, None).unwrap();
        assert_eq!(b.indices, vec![0]);
        assert_eq!(b.frames[0], s[0].blurry[0]);
        assert_eq!(b.sharp, s[0].sharp);
        assert!(sample_batch(&[], 1, 3, &mut rng, None).is_err());
    }

    #[test]
    fn batches_are_reproducible() {
        let s: Vec<_> = (0..5).map(|i| sample(i, 8)).collect();
        let t = Trainer::new(tiny_config(), s).unwrap();
        assert_eq!(t.batch_for(7).unwrap(), t.batch_for(7).unwrap());
        assert_ne!(t.batch_for(7).unwrap().indices, t.batch_for(8).unwrap().indices);
    }

    #[test]
    fn on_the_fly_psf_changes_blur_only() {
        let s = vec![sample(2, 16)];
        let psf = OnTheFlyPsf {
            sizes: vec![7],
            opts: PsfOpts::default(),
        };
        let a = sample_batch(&s, 1, 2, &mut stream_rng(1, &[0]), Some(&psf)).unwrap();
        let b = sample_batch(&s, 1, 2, &mut stream_rng(1, &[1]), Some(&psf)).unwrap();
        assert_ne!(a.frames[0], b.frames[0]);
        assert_eq!(a.sharp, b.sharp);
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let s: Vec<_> = (0..2).map(|i| sample(i, 16)).collect();
        let cfg = TrainConfig { lr: 0.0, ..tiny_config() };
        let mut t = Trainer::new(cfg, s).unwrap();
        let before: Vec<Vec<f32>> = t.params.groups().iter().map(|g| g.to_vec()).collect();
        t.step().unwrap();
        t.step().unwrap();
        let after: Vec<Vec<f32>> = t.params.groups().iter().map(|g| g.to_vec()).collect();
        assert_eq!(before, after);
        assert_eq!(t.adam.t, 2);
    }

    #[test]
    fn one_step_moves_every_parameter_group() {
        let s: Vec<_> = (0..2).map(|i| sample(i + 10, 16)).collect();
        let mut t = Trainer::new(tiny_config(), s).unwrap();
        let before: Vec<Vec<f32>> = t.params.groups().iter().map(|g| g.to_vec()).collect();
        let row = t.step().unwrap();
        let names = t.params.group_names();
        for ((b, a), name) in before.iter().zip(t.params.groups()).zip(names) {
            assert!(b.as_slice() != a, "group {name} did not move");
        }
        let sum: f64 = row.step_losses.iter().sum();
        assert!((sum - row.loss).abs() <= 1e-6 * row.loss.abs());
        assert!(row.loss >= 0.0);
    }

    #[test]
    fn checkpoints_at_multiples_and_final() {
        let dir = tempfile::tempdir().unwrap();
        let s: Vec<_> = (0..2).map(|i| sample(i, 8)).collect();
        let cfg = TrainConfig {
            max_iterations: 5,
            checkpoint_every: 2,
            ..tiny_config()
        };
        let out = train_on_samples(&cfg, s, dir.path(), false).unwrap();
        assert_eq!(out.log.rows.len(), 5);
        for stem in ["ckpt_000002", "ckpt_000004", "final"] {
            assert!(dir.path().join(format!("{stem}.rdn")).exists(), "{stem}");
        }
        assert!(!dir.path().join("ckpt_000005.rdn").exists());
        let csv = std::fs::read_to_string(dir.path().join(LOG_NAME)).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "iter,L,L1,L2,psnr_holdout,ms_per_iter");
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn adam_state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s: Vec<_> = (0..2).map(|i| sample(i, 8)).collect();
        let mut t = Trainer::new(tiny_config(), s).unwrap();
        t.step().unwrap();
        let p = dir.path().join("x.adam");
        save_adam_state(&t.params, &t.adam, &p).unwrap();
        assert_eq!(load_adam_state(&t.params, &p).unwrap(), t.adam);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(TrainConfig { steps: 5, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        let s = vec![sample(0, 8)];
        assert!(Trainer::new(TrainConfig { holdout: 1, ..tiny_config() }, s).is_err());
    }
}
