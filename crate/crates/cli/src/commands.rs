//! The work behind each subcommand, kept apart from argument parsing so it
//! can be called from tests.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rellie_core::checkpoint::load_checkpoint;
use rellie_core::curve::envelope_csv;
use rellie_core::image::{list_images, load_image, save_image, ImageRGB};
use rellie_core::metrics::evaluate;
use rellie_core::pipeline::{enhance_image, Decoding, EnhanceOptions, MapMode, Refinement};
use rellie_core::refine::{Denoiser, ExternalDenoiser, DEFAULT_STRENGTH};
use rellie_core::reward::{evaluate_state, LossBreakdown, LossWeights, DEFAULT_EXPOSURE};
use rellie_core::trainer::{train_unsupervised, train_zero_shot, IterationLog, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Unsupervised,
    ZeroShot,
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub mode: TrainMode,
    pub data: PathBuf,
    pub out: PathBuf,
    pub iterations: Option<usize>,
    pub steps: Option<usize>,
    pub gamma: Option<f32>,
    pub lr: Option<f32>,
    pub weights: Option<LossWeights>,
    pub seed: u64,
    pub workers: usize,
    pub log: Option<PathBuf>,
}

/// Trains and writes the checkpoint; the per-iteration CSV goes to `log`
/// when given, otherwise to `csv_out`.
pub fn train(args: &TrainArgs, csv_out: &mut dyn Write) -> Result<Vec<IterationLog>> {
    let base = match args.mode {
        TrainMode::Unsupervised => TrainConfig::unsupervised(),
        TrainMode::ZeroShot => TrainConfig::zero_shot(),
    };
    let mut cfg = base.with_seed(args.seed);
    cfg.workers = args.workers;
    if let Some(v) = args.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(w) = args.weights {
        cfg.weights = w;
    }
    cfg.validate()?;

    let mut file;
    let sink: &mut dyn Write = match &args.log {
        Some(p) => {
            file = std::io::BufWriter::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?);
            &mut file
        }
        None => csv_out,
    };
    writeln!(sink, "{}", IterationLog::CSV_HEADER)?;
    let mut write_err = None;
    let mut on_iter = |l: &IterationLog| {
        if write_err.is_none() {
            if let Err(e) = writeln!(sink, "{}", l.csv_row()) {
                write_err = Some(e);
            }
        }
    };
    let run = match args.mode {
        TrainMode::ZeroShot => {
            if args.data.is_dir() {
                bail!("zero-shot training takes a single image, {} is a directory", args.data.display());
            }
            let img = load_image(&args.data)?;
            train_zero_shot(&img, &cfg, Some(&args.out), &mut on_iter)?
        }
        TrainMode::Unsupervised => train_unsupervised(&args.data, &cfg, Some(&args.out), &mut on_iter)?,
    };
    if let Some(e) = write_err {
        return Err(e.into());
    }
    sink.flush()?;
    Ok(run.log)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineArgs {
    /// Refine after steps `k, 2k, …`.
    pub every: usize,
    pub strength: f32,
    pub denoiser: Option<String>,
    pub per_step_map: bool,
}

impl Default for RefineArgs {
    fn default() -> Self {
        Self {
            every: 1,
            strength: DEFAULT_STRENGTH,
            denoiser: None,
            per_step_map: false,
        }
    }
}

impl RefineArgs {
    pub fn refinement(&self) -> Result<Refinement> {
        let denoiser = match &self.denoiser {
            Some(cmd) => Denoiser::External(ExternalDenoiser::parse(cmd, None)?),
            None => Denoiser::Builtin { strength: self.strength },
        };
        let map = if self.per_step_map { MapMode::PerStep } else { MapMode::Cumulative };
        Ok(Refinement { denoiser, map })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhanceArgs {
    pub steps: usize,
    /// Sampled decoding with this seed; greedy when absent.
    pub seed: Option<u64>,
    pub refine: Option<RefineArgs>,
}

impl EnhanceArgs {
    pub fn options(&self) -> Result<EnhanceOptions> {
        Ok(EnhanceOptions {
            steps: self.steps,
            decoding: self.seed.map_or(Decoding::Greedy, |seed| Decoding::Sampled { seed }),
            refine: self.refine.as_ref().map(RefineArgs::refinement).transpose()?,
            refine_every: self.refine.as_ref().map_or(1, |r| r.every),
            ..EnhanceOptions::default()
        })
    }
}

/// Writes an image, PNG unless the extension says PPM. PNG output is the
/// same encoding the service sends.
pub fn write_image(img: &ImageRGB, path: &Path) -> Result<()> {
    let ppm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm") || e.eq_ignore_ascii_case("pnm"));
    if ppm {
        save_image(img, path)?;
    } else {
        std::fs::write(path, img.to_png_bytes()?).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn enhance(input: &Path, output: &Path, ckpt: &Path, args: &EnhanceArgs) -> Result<ImageRGB> {
    let agent = load_checkpoint(ckpt)?.agent;
    let img = load_image(input)?;
    let out = enhance_image(&agent, &img, &args.options()?)?;
    write_image(&out, output)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub input_psnr: f64,
    pub input_ssim: f64,
}

/// Enhances every low-light image that has a same-named reference and scores
/// both the input and the result against it. Prints CSV with a final mean row.
pub fn eval(low_dir: &Path, high_dir: &Path, ckpt: &Path, args: &EnhanceArgs, out: &mut dyn Write) -> Result<Vec<EvalRow>> {
    let agent = load_checkpoint(ckpt)?.agent;
    let opts = args.options()?;
    let mut rows = Vec::new();
    for low_path in list_images(low_dir)? {
        let name = low_path.file_name().expect("listed files have names").to_string_lossy().into_owned();
        let high_path = high_dir.join(&name);
        if !high_path.exists() {
            log::warn!("no reference for {name}, skipped");
            continue;
        }
        let (low, high) = (load_image(&low_path)?, load_image(&high_path)?);
        let before = evaluate(&low, &high)?;
        let after = evaluate(&enhance_image(&agent, &low, &opts)?, &high)?;
        rows.push(EvalRow {
            name,
            psnr: after.psnr,
            ssim: after.ssim,
            input_psnr: before.psnr,
            input_ssim: before.ssim,
        });
    }
    if rows.is_empty() {
        bail!("no image pairs found in {} and {}", low_dir.display(), high_dir.display());
    }
    writeln!(out, "image,psnr,ssim,input_psnr,input_ssim")?;
    for r in &rows {
        writeln!(out, "{},{:.4},{:.6},{:.4},{:.6}", r.name, r.psnr, r.ssim, r.input_psnr, r.input_ssim)?;
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    writeln!(
        out,
        "mean,{:.4},{:.6},{:.4},{:.6}",
        mean(|r| r.psnr),
        mean(|r| r.ssim),
        mean(|r| r.input_psnr),
        mean(|r| r.input_ssim)
    )?;
    Ok(rows)
}

/// Losses of `enhanced` measured against `input`. No parameter map is known,
/// so the smoothness term is zero.
pub fn losses(enhanced: &Path, input: &Path, weights: &LossWeights) -> Result<LossBreakdown> {
    let (y, i) = (load_image(enhanced)?, load_image(input)?);
    Ok(evaluate_state(&y, &i, None, weights, DEFAULT_EXPOSURE)?.breakdown)
}

pub fn envelope(steps: &[usize], skip_weight: f32) -> Result<String> {
    if steps.is_empty() {
        bail!("give at least one step count");
    }
    if !(0.0..=1.0).contains(&skip_weight) {
        bail!("skip weight must be in [0, 1], got {skip_weight}");
    }
    Ok(envelope_csv(steps, skip_weight))
}
