//! The `ldct` command-line front end.
//!
//! Every numeric setting comes from the TOML config; flags only pick the
//! command, the config file, the seed, the thread count and verbosity.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::analytic::FbpOperator;
use crate::config::{
    EvalSection, Method, PreviewSection, RunConfig, TvSection, INIT_SEED_OFFSET, NOISE_SEED_OFFSET, SHUFFLE_SEED_OFFSET,
};
use crate::container::{read_sinogram, write_image};
use crate::dataset::{build_dataset, dataset_root, DatasetManifest, DatasetSpec, Split};
use crate::error::{Error, Result};
use crate::geometry::{Image, ImageShape, ScanGeometry, Sinogram};
use crate::metrics::{self, MetricReport, Summary};
use crate::pfbs::checkpoint::{self, load_model_for, save_model, save_trainer};
use crate::pfbs::{Trainer, TrainingConfig, UnrolledModel};
use crate::projector::Projector;
use crate::tv::reconstruct_tv;

pub const SNAPSHOT_FILE: &str = "resolved_config.toml";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Parser)]
#[command(name = "ldct", version, about = "Low-dose CT reconstruction toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long, global = true, default_value = "ldct.toml")]
    pub config: PathBuf,
    /// Overrides the config's top-level seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate phantoms and simulated low-dose sinograms.
    Simulate,
    /// Train a PFBS model on a simulated dataset.
    Train,
    /// Reconstruct one sinogram.
    Reconstruct,
    /// Score reconstruction methods on the test split.
    Eval,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Simulate => cmd_simulate(&cfg).map(|p| println!("{}", p.display())),
        Command::Train => cmd_train(&cfg).map(|p| println!("{}", p.display())),
        Command::Reconstruct => cmd_reconstruct(&cfg).map(|p| println!("{}", p.display())),
        Command::Eval => cmd_eval(&cfg).map(|table| print!("{table}")),
    }
}

fn section<'a, T>(s: &'a Option<T>, name: &str) -> Result<&'a T> {
    s.as_ref()
        .ok_or_else(|| Error::Config(format!("the config has no [{name}] section")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(|e| Error::Data(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes the dataset and returns the manifest path.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<PathBuf> {
    let sim = section(&cfg.simulate, "simulate")?;
    let geometry = cfg.scan_geometry()?;
    let spec = DatasetSpec {
        count: sim.count,
        phantom: cfg.phantom_spec(sim)?,
        doses: sim.doses.clone(),
        electronic_variance: sim.electronic_variance,
        noise_seed: cfg.seed.wrapping_add(NOISE_SEED_OFFSET),
    };
    build_dataset(&spec, &geometry, &sim.out_dir)?;
    cfg.write_snapshot(&sim.out_dir.join(SNAPSHOT_FILE))?;
    Ok(sim.out_dir.join(crate::dataset::MANIFEST_FILE))
}

fn load_manifest(path: &Path, geometry: &ScanGeometry) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::read(path)?;
    if manifest.header.geometry_fingerprint != geometry.fingerprint() {
        return Err(Error::Data(format!(
            "{} was simulated for geometry {}, the config describes {}",
            path.display(),
            manifest.header.geometry_fingerprint,
            geometry.fingerprint()
        )));
    }
    manifest.verify(&dataset_root(path))?;
    Ok(manifest)
}

fn epoch_dir(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("epoch_{epoch:04}"))
}

/// Newest checkpoint under `out_dir`, if any.
fn latest_checkpoint(out_dir: &Path) -> Option<PathBuf> {
    let dir = out_dir.join("checkpoints");
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(checkpoint::MANIFEST_FILE).is_file())
        .collect();
    found.sort();
    found.pop()
}

/// Trains (or resumes) and returns the final model directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf> {
    let t = section(&cfg.train, "train")?;
    let mode = t
        .method
        .pfbs_mode()
        .ok_or_else(|| Error::Config(format!("cannot train method {}", t.method.as_str())))?;
    let geometry = cfg.scan_geometry()?;
    let shape = cfg.image_shape()?;
    let manifest = load_manifest(&t.manifest, &geometry)?;
    let root = dataset_root(&t.manifest);
    let train = manifest.load_pairs(&root, t.dose, Split::Train)?;
    let test = manifest.load_pairs(&root, t.dose, Split::Test)?;
    if train.is_empty() {
        return Err(Error::Data(format!("no training samples at dose {}", t.dose)));
    }
    let model_cfg = t.model.model_config(mode, cfg.seed.wrapping_add(INIT_SEED_OFFSET));
    let train_cfg = t.training.training_config(cfg.seed.wrapping_add(SHUFFLE_SEED_OFFSET));
    train_cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    model_cfg.validate().map_err(|e| Error::Config(e.to_string()))?;

    create_dir(&t.out_dir)?;
    cfg.write_snapshot(&t.out_dir.join(SNAPSHOT_FILE))?;
    let resumed = if t.resume { latest_checkpoint(&t.out_dir) } else { None };
    let mut trainer = match resumed {
        Some(dir) => {
            let mut trainer = checkpoint::load_trainer(&dir)?;
            let same_schedule = TrainingConfig {
                epochs: train_cfg.epochs,
                ..trainer.config
            } == train_cfg;
            if *trainer.model.config() != model_cfg || !same_schedule {
                return Err(Error::Config(format!(
                    "{} was written with a different model or training config",
                    dir.display()
                )));
            }
            log::info!("resuming from {} after {} epochs", dir.display(), trainer.epochs_done());
            trainer.config.epochs = train_cfg.epochs;
            trainer
        }
        None => {
            let model = UnrolledModel::new(model_cfg, geometry, shape)?;
            let trainer = Trainer::new(model, train_cfg)?;
            save_trainer(&epoch_dir(&t.out_dir, 0), &trainer)?;
            trainer
        }
    };
    let log_path = t.out_dir.join(TRAIN_LOG_FILE);
    write_text(&log_path, &jsonl(&trainer.log)?)?;
    trainer.train(&train, &test, |tr, record| {
        save_trainer(&epoch_dir(&t.out_dir, record.epoch), tr)?;
        write_text(&log_path, &jsonl(&tr.log)?)
    })?;
    let final_dir = t.out_dir.join("final");
    save_model(&final_dir, &trainer.model)?;
    Ok(final_dir)
}

/// Reconstructs `y` with one of the methods.
pub fn reconstruct_with(
    method: Method,
    y: &Sinogram,
    geometry: &ScanGeometry,
    shape: ImageShape,
    tv: &TvSection,
    dose: Option<f64>,
    model: Option<&UnrolledModel>,
) -> Result<Image> {
    match method {
        Method::Fbp => FbpOperator::new(*geometry, shape).reconstruct(y),
        Method::Tv => reconstruct_tv(&Projector::new(*geometry, shape), y, &tv.params(dose), None),
        Method::PfbsIr | Method::PfbsAir => {
            let model = model.ok_or_else(|| Error::Config(format!("{} needs a checkpoint", method.as_str())))?;
            if Some(model.mode()) != method.pfbs_mode() {
                return Err(Error::Config(format!(
                    "checkpoint holds a {} model, not {}",
                    model.mode().as_str(),
                    method.as_str()
                )));
            }
            model.reconstruct(y)
        }
        Method::Reference => Err(Error::Config("`reference` only makes sense in eval".into())),
    }
}

/// 8-bit grayscale preview in a Hounsfield window.
pub fn preview_bytes(img: &Image, preview: &PreviewSection) -> Vec<u8> {
    let (lo, hi) = preview.window_hu;
    img.values()
        .iter()
        .map(|&mu| {
            let hu = 1000.0 * (mu - preview.mu_water) / preview.mu_water;
            let t = ((hu - lo) / (hi - lo)).clamp(0.0, 1.0);
            (t * 255.0).round() as u8
        })
        .collect()
}

pub fn write_preview(path: &Path, img: &Image, preview: &PreviewSection) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(io)?;
    writer.write_image_data(&preview_bytes(img, preview)).map_err(io)
}

/// Reconstructs the configured sinogram and returns the output path.
pub fn cmd_reconstruct(cfg: &RunConfig) -> Result<PathBuf> {
    let r = section(&cfg.reconstruct, "reconstruct")?;
    let geometry = cfg.scan_geometry()?;
    let shape = cfg.image_shape()?;
    let y = read_sinogram(&r.input)?;
    let model = match (r.method.pfbs_mode(), &r.checkpoint) {
        (Some(_), Some(dir)) => Some(load_model_for(dir, &geometry, shape)?),
        (Some(_), None) => {
            return Err(Error::Config(format!("{} needs `checkpoint`", r.method.as_str())));
        }
        _ => None,
    };
    let img = reconstruct_with(r.method, &y, &geometry, shape, &r.tv, r.dose, model.as_ref())?;
    if !img.is_finite() {
        return Err(Error::Numeric("non-finite reconstruction".into()));
    }
    write_image(&r.output, &img)?;
    if let Some(p) = &r.preview {
        write_preview(p, &img, &cfg.preview)?;
    }
    cfg.write_snapshot(&r.output.with_extension("resolved.toml"))?;
    Ok(r.output.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    pub method: Method,
    pub dose: f64,
    pub index: u64,
    pub psnr: f64,
    pub psnr_conventional: f64,
    pub rmse: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub method: Method,
    pub dose: f64,
    pub psnr: Summary,
    pub rmse: Summary,
    pub ssim: Summary,
}

fn load_eval_model(
    e: &EvalSection,
    method: Method,
    dose: f64,
    geometry: &ScanGeometry,
    shape: ImageShape,
) -> Result<Option<UnrolledModel>> {
    if method.pfbs_mode().is_none() {
        return Ok(None);
    }
    let dir = e
        .checkpoint(method, dose)
        .ok_or_else(|| Error::Config(format!("no checkpoint for {} at dose {dose}", method.as_str())))?;
    load_model_for(dir, geometry, shape).map(Some)
}

/// Per-image records and per-(method, dose) summaries.
pub fn evaluate(cfg: &RunConfig, e: &EvalSection) -> Result<(Vec<EvalRecord>, Vec<EvalSummary>)> {
    let geometry = cfg.scan_geometry()?;
    let shape = cfg.image_shape()?;
    let manifest = load_manifest(&e.manifest, &geometry)?;
    let root = dataset_root(&e.manifest);
    let doses = if e.doses.is_empty() {
        manifest.header.doses.clone()
    } else {
        e.doses.clone()
    };
    let mut records = Vec::new();
    let mut summaries = Vec::new();
    for &method in &e.methods {
        for &dose in &doses {
            let model = load_eval_model(e, method, dose, &geometry, shape)?;
            let samples: Vec<_> = manifest
                .records(dose, Split::Test)
                .take(e.limit.unwrap_or(usize::MAX))
                .collect();
            if samples.is_empty() {
                return Err(Error::Data(format!("no test samples at dose {dose}")));
            }
            let mut group = Vec::with_capacity(samples.len());
            for s in samples {
                let x = crate::container::read_image(&root.join(&s.image))?;
                let estimate = match method {
                    Method::Reference => x.clone(),
                    _ => {
                        let y = read_sinogram(&root.join(&s.sinogram))?;
                        reconstruct_with(method, &y, &geometry, shape, &e.tv, Some(dose), model.as_ref())?
                    }
                };
                let m = MetricReport::compute(&x, &estimate)?;
                group.push(EvalRecord {
                    method,
                    dose,
                    index: s.index,
                    psnr: m.psnr,
                    psnr_conventional: metrics::psnr_conventional(x.values(), estimate.values())?,
                    rmse: m.rmse,
                    ssim: m.ssim,
                });
            }
            let column = |f: fn(&EvalRecord) -> f64| {
                let v: Vec<f64> = group.iter().map(f).collect();
                Summary::of(&v).expect("nonempty group")
            };
            summaries.push(EvalSummary {
                method,
                dose,
                psnr: column(|r| r.psnr),
                rmse: column(|r| r.rmse),
                ssim: column(|r| r.ssim),
            });
            records.extend(group);
        }
    }
    Ok((records, summaries))
}

/// Mean ± STD table, one row per method and dose.
pub fn format_table(summaries: &[EvalSummary]) -> String {
    let mut out = format!(
        "{:<10} {:>9} {:>22} {:>24} {:>20}\n",
        "method", "dose", "PSNR (dB)", "RMSE (1/cm)", "SSIM"
    );
    for s in summaries {
        out.push_str(&format!(
            "{:<10} {:>9} {:>10.4} ± {:<9.4} {:>11.3e} ± {:<10.3e} {:>8.4} ± {:<8.4}\n",
            s.method.as_str(),
            s.dose,
            s.psnr.mean,
            s.psnr.std,
            s.rmse.mean,
            s.rmse.std,
            s.ssim.mean,
            s.ssim.std
        ));
    }
    out
}

/// Evaluates, writes `metrics.jsonl`, `summary.jsonl` and `summary.txt`, and
/// returns the table.
pub fn cmd_eval(cfg: &RunConfig) -> Result<String> {
    let e = section(&cfg.eval, "eval")?;
    let (records, summaries) = evaluate(cfg, e)?;
    create_dir(&e.out_dir)?;
    cfg.write_snapshot(&e.out_dir.join(SNAPSHOT_FILE))?;
    write_text(&e.out_dir.join("metrics.jsonl"), &jsonl(&records)?)?;
    write_text(&e.out_dir.join("summary.jsonl"), &jsonl(&summaries)?)?;
    let table = format_table(&summaries);
    write_text(&e.out_dir.join("summary.txt"), &table)?;
    Ok(table)
}
