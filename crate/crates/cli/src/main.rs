//! `rdn`: forge blur corpora, train the recurrent deblurring network, deblur frame sequences.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use rdn_core::datagen::{forge_corpus, ForgeConfig};
use rdn_core::exec::with_workers;
use rdn_core::infer::{
    multiscale_infer, psnr, tile_infer, TileConfig, DEFAULT_MARGIN, DEFAULT_OVERLAP, DEFAULT_TILE,
};
use rdn_core::io::{frame_name, load_frames, save_frame};
use rdn_core::net::{load_checkpoint, WidthMultiplier};
use rdn_core::train::{train_loop, TrainConfig};
use rdn_core::Tensor;

#[derive(Parser)]
#[command(name = "rdn", version, about = "Recurrent deblurring network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise blurry/sharp training samples from directories of sharp frames.
    Forge(ForgeArgs),
    /// Train the network on a forged corpus.
    Train(TrainArgs),
    /// Deblur a frame sequence with a trained checkpoint.
    Deblur(DeblurArgs),
}

#[derive(Args)]
struct ForgeArgs {
    /// Directory searched recursively for numbered PNG frames.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Subframes synthesised per frame gap.
    #[arg(long, default_value_t = 40)]
    n: usize,
    /// Half-window choices; one is drawn per sample.
    #[arg(long = "L", value_delimiter = ',', default_value = "20,40")]
    ls: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    crop: usize,
    /// Camera-shake kernel sizes.
    #[arg(long, value_delimiter = ',', default_value = "7,11,15")]
    psf: Vec<usize>,
    /// Shake magnitude in [0, 1]; 0 disables camera shake.
    #[arg(long = "shake-mag")]
    shake_mag: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0: one per core).
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Channel width multiplier, e.g. 1/8 or 1.
    #[arg(long, default_value = "1/8")]
    wm: WidthMultiplier,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Deblur steps per unrolled sequence.
    #[arg(long, default_value_t = 4)]
    steps: usize,
    #[arg(long, default_value_t = 5e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Iterations between checkpoints (0: final checkpoint only).
    #[arg(long, default_value_t = 100)]
    checkpoint_every: usize,
    /// Continue from the newest checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Re-blur observations with fresh camera-shake kernels each iteration.
    #[arg(long)]
    psf_on_the_fly: bool,
    /// Samples held out for PSNR evaluation.
    #[arg(long, default_value_t = 0)]
    holdout: usize,
    #[arg(long, default_value_t = 50)]
    eval_every: usize,
    /// Halve the learning rate every this many iterations (0: constant).
    #[arg(long, default_value_t = 0)]
    lr_halve_every: usize,
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct DeblurArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Glob for the input frames, processed in lexicographic order.
    #[arg(long)]
    frames: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TILE)]
    tile: usize,
    #[arg(long, default_value_t = DEFAULT_OVERLAP)]
    overlap: usize,
    /// Receptive-field margin discarded at inner tile edges.
    #[arg(long, default_value_t = DEFAULT_MARGIN)]
    margin: usize,
    /// Number of scales (1: single scale).
    #[arg(long, default_value_t = 1)]
    multiscale: usize,
    /// Glob for sharp reference frames; enables PSNR reporting.
    #[arg(long = "ref")]
    reference: Option<String>,
    /// Also write the prediction after every step.
    #[arg(long)]
    dump_steps: bool,
    /// Frames consumed per target, the target included.
    #[arg(long, default_value_t = 5)]
    max_frames: usize,
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

fn forge(args: ForgeArgs) -> Result<serde_json::Value> {
    let defaults = ForgeConfig::default();
    let cfg = ForgeConfig {
        n: args.n,
        ls: args.ls,
        crop: args.crop,
        psf_sizes: args.psf,
        shake_magnitude: args.shake_mag.unwrap_or(defaults.shake_magnitude),
        seed: args.seed,
        workers: args.workers,
        ..defaults
    };
    let summary = forge_corpus(&args.input, &args.out, &cfg)?;
    Ok(json!({
        "samples": summary.samples,
        "skipped": summary.skipped.iter().map(|s| json!({"source": s.source, "reason": s.reason})).collect::<Vec<_>>(),
        "out": args.out,
    }))
}

fn train(args: TrainArgs) -> Result<serde_json::Value> {
    let cfg = TrainConfig {
        batch_size: args.batch,
        steps: args.steps,
        lr: args.lr,
        width: args.wm,
        max_iterations: args.iters,
        checkpoint_every: args.checkpoint_every,
        seed: args.seed,
        psf_on_the_fly: args.psf_on_the_fly,
        holdout: args.holdout,
        eval_every: args.eval_every,
        lr_halve_every: args.lr_halve_every,
        workers: args.workers,
        ..TrainConfig::default()
    };
    let outcome = train_loop(&cfg, &args.corpus, &args.out, args.resume)?;
    let last = outcome.log.rows.last();
    Ok(json!({
        "iterations": last.map_or(0, |r| r.iter),
        "final_loss": last.map(|r| r.loss),
        "checkpoint": outcome.final_checkpoint,
        "resumed_from": outcome.resumed_from,
    }))
}

fn expand(pattern: &str) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = glob::glob(pattern)
        .with_context(|| format!("bad glob {pattern:?}"))?
        .collect::<Result<_, _>>()?;
    paths.sort();
    if paths.is_empty() {
        bail!("no files match {pattern:?}");
    }
    Ok(paths)
}

/// The target followed by its neighbours, nearest first, earlier before later on ties.
fn observation_order(target: usize, len: usize, max_frames: usize) -> Vec<usize> {
    let mut order = vec![target];
    for d in 1..len {
        if target >= d {
            order.push(target - d);
        }
        if target + d < len {
            order.push(target + d);
        }
    }
    order.truncate(max_frames);
    order
}

fn write_frame(dir: &Path, name: &str, frame: &Tensor<f32>) -> Result<()> {
    save_frame(dir.join(name), frame)?;
    Ok(())
}

fn deblur(args: DeblurArgs) -> Result<serde_json::Value> {
    if args.max_frames < 2 {
        bail!("--max-frames must be at least 2");
    }
    let tiles = TileConfig {
        tile: args.tile,
        overlap: args.overlap,
        margin: args.margin,
    };
    tiles.validate()?;
    let params = load_checkpoint(&args.ckpt)?;
    let paths = expand(&args.frames)?;
    if paths.len() < 2 {
        bail!("deblurring needs at least 2 frames, {:?} matched {}", args.frames, paths.len());
    }
    let frames = load_frames(&paths)?;
    let reference = match &args.reference {
        Some(g) => {
            let refs = load_frames(&expand(g)?)?;
            if refs.len() != frames.len() {
                bail!("{} reference frames for {} inputs", refs.len(), frames.len());
            }
            Some(refs)
        }
        None => None,
    };
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let steps_dir = args.out.join("steps");
    if args.dump_steps {
        std::fs::create_dir_all(&steps_dir)?;
    }

    let mut report = Vec::with_capacity(frames.len());
    with_workers(args.workers, || -> Result<()> {
        for t in 0..frames.len() {
            let seq: Vec<Tensor<f32>> = observation_order(t, frames.len(), args.max_frames)
                .into_iter()
                .map(|i| frames[i].clone())
                .collect();
            let start = Instant::now();
            let predictions = if args.multiscale > 1 {
                multiscale_infer(&seq, &params, args.multiscale, Some(&tiles))?.predictions
            } else {
                tile_infer(&seq, &params, &tiles, None)?
            };
            let ms = start.elapsed().as_secs_f64() * 1e3;
            let output = predictions.last().expect("at least one step");
            let name = frame_name(t);
            write_frame(&args.out, &name, output)?;
            if args.dump_steps {
                for (k, p) in predictions.iter().enumerate() {
                    let stem = name.trim_end_matches(".png");
                    write_frame(&steps_dir, &format!("{stem}_step_{:02}.png", k + 1), p)?;
                }
            }
            let mut entry = json!({
                "input": paths[t],
                "output": args.out.join(&name),
                "steps": predictions.len(),
                "ms": ms,
                "ms_per_step": ms / predictions.len() as f64,
            });
            if let Some(refs) = &reference {
                let finite = |v: f64| if v.is_finite() { json!(v) } else { json!("inf") };
                entry["psnr_input"] = finite(psnr(&frames[t], &refs[t])?);
                entry["psnr_output"] = finite(psnr(output, &refs[t])?);
                entry["psnr_steps"] = predictions
                    .iter()
                    .map(|p| psnr(p, &refs[t]).map(finite))
                    .collect::<Result<Vec<_>, _>>()?
                    .into();
            }
            log::info!("frame {t}: {} steps in {ms:.0} ms", predictions.len());
            report.push(entry);
        }
        Ok(())
    })?;
    let report = json!({ "frames": report, "multiscale": args.multiscale });
    std::fs::write(args.out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

fn error_json(err: &anyhow::Error) -> serde_json::Value {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<rdn_core::Error>())
        .map_or("other", |e| e.kind());
    json!({ "error": { "kind": kind, "message": format!("{err:#}") } })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Forge(a) => forge(a),
        Command::Train(a) => train(a),
        Command::Deblur(a) => deblur(a),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", error_json(&err));
            ExitCode::FAILURE
        }
    }
}
