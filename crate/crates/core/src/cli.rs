//! Command-line surface. Flags override the JSON config; exit status is 0 on
//! success, 1 on a domain error and 2 on a usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::classic::HeadKind;
use crate::config::CvTask;
use crate::error::{Error, Result};
use crate::harness::{file_stem, fit_head, fit_task, load_samples, run_cv, thread_pool};
use crate::metrics::{aggregate, dice, iou};
use crate::morphoseg::{generate_lung_mask, BinaryMask, Polarity};
use crate::preprocess::{clahe, resize, ResizeKind, ResizeSpec};
use crate::raster::{load_image, load_manifest, save_image, save_mask, Label};
use crate::tinynet::ModelBundle;

pub use crate::config::{parse_config, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "lungkit", version, about = "Lung CT slice toolkit: CLAHE, morphological lung masks, U-Net/CNN training, classical heads and k-fold CV")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// CLAHE-enhance and resize every input image.
    Preprocess(PreprocessArgs),
    /// Generate morphological lung masks and masked images.
    Genmask(GenmaskArgs),
    /// Train the U-Net segmenter on the whole dataset.
    TrainSeg(TrainArgs),
    /// Train the CNN classifier on the whole dataset (masked images).
    TrainClf(TrainArgs),
    /// Fit a classical head on features of a trained CNN bundle.
    TrainHybrid(HybridArgs),
    /// Score predicted masks against reference masks (paired by file stem).
    Eval(EvalArgs),
    /// Stratified k-fold cross-validation.
    Cv(CvArgs),
    /// Run the built-in oracle and invariant checks.
    Selftest,
    /// Write a synthetic phantom dataset (normal/, cancerous/, truth/).
    Phantoms(PhantomArgs),
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of images, alternating normal and cancerous.
    #[arg(long, default_value_t = 60)]
    pub count: usize,
    /// Side length in pixels.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Args, Debug, Default)]
pub struct Common {
    /// JSON run config; absent keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset: directory with cancerous/ and normal/ (or a flat image
    /// directory where labels are not needed) or a `path,label` CSV
    /// [config: dataset.input].
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Output directory [config: output.dir, default lungkit_out].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct PreprocessFlags {
    /// CLAHE clip limit [default: 2.0, the published clipLimit].
    #[arg(long)]
    pub clahe_clip: Option<f64>,
    /// CLAHE tile grid, square [default: 8, the published 8x8 tile grid].
    #[arg(long)]
    pub clahe_grid: Option<usize>,
    /// Working resolution in pixels [default: 128, the published input size].
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct MorphologyFlags {
    /// Lung polarity: dark or bright foreground [default: dark; lungs are air].
    #[arg(long, value_parser = parse_polarity)]
    pub polarity: Option<Polarity>,
    /// Dilation disk radius [default: 5, published pipeline].
    #[arg(long)]
    pub r_dilate: Option<usize>,
    /// Erosion disk radius [default: 4, published pipeline].
    #[arg(long)]
    pub r_erode: Option<usize>,
    /// Closing disk radius [default: 10, published pipeline].
    #[arg(long)]
    pub r_close: Option<usize>,
    /// Largest components kept [default: 2, the two lungs].
    #[arg(long)]
    pub keep: Option<usize>,
}

fn parse_polarity(s: &str) -> std::result::Result<Polarity, String> {
    match s {
        "dark" => Ok(Polarity::DarkForeground),
        "bright" => Ok(Polarity::BrightForeground),
        other => Err(format!("expected dark or bright, got `{other}`")),
    }
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub pre: PreprocessFlags,
}

#[derive(Args, Debug)]
pub struct GenmaskArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub morph: MorphologyFlags,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub pre: PreprocessFlags,
    #[command(flatten)]
    pub morph: MorphologyFlags,
    /// Run seed [config: cv.seed, default 42].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Maximum epochs [config: train.epochs, default 50, published setting].
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct HybridArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub pre: PreprocessFlags,
    #[command(flatten)]
    pub morph: MorphologyFlags,
    /// Trained CNN bundle whose flatten-layer features feed the head.
    #[arg(long)]
    pub features_from: PathBuf,
    /// Classical head: svm, rf or gb [config: model.head, default svm].
    #[arg(long)]
    pub head: Option<HeadKind>,
    /// Run seed [config: cv.seed, default 42].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of predicted masks (`<stem>.pgm` or `<stem>_mask.pgm`).
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of reference masks.
    #[arg(long)]
    pub truth: PathBuf,
    /// Report path.
    #[arg(long, default_value = "report.json")]
    pub report: PathBuf,
}

#[derive(Args, Debug)]
pub struct CvArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub pre: PreprocessFlags,
    #[command(flatten)]
    pub morph: MorphologyFlags,
    /// Fold count [config: cv.folds, default 5, published 5-fold CV].
    #[arg(long)]
    pub folds: Option<usize>,
    /// Run seed [config: cv.seed, default 42].
    #[arg(long)]
    pub seed: Option<u64>,
    /// segmentation, classification or hybrid [config: cv.task, default segmentation].
    #[arg(long)]
    pub task: Option<CvTask>,
    /// Maximum epochs per fold [config: train.epochs, default 50].
    #[arg(long)]
    pub epochs: Option<usize>,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &common.input {
        cfg.dataset.input = Some(p.clone());
    }
    if let Some(p) = &common.out {
        cfg.output.dir = p.clone();
    }
    Ok(cfg)
}

fn apply_pre(cfg: &mut RunConfig, f: &PreprocessFlags) {
    if let Some(v) = f.clahe_clip {
        cfg.preprocess.clahe_clip = v;
    }
    if let Some(v) = f.clahe_grid {
        cfg.preprocess.clahe_grid = v;
    }
    if let Some(v) = f.size {
        cfg.preprocess.size = v;
    }
}

fn apply_morph(cfg: &mut RunConfig, f: &MorphologyFlags) {
    let m = &mut cfg.morphology;
    if let Some(v) = f.polarity {
        m.polarity = v;
    }
    if let Some(v) = f.r_dilate {
        m.r_dilate = v;
    }
    if let Some(v) = f.r_erode {
        m.r_erode = v;
    }
    if let Some(v) = f.r_close {
        m.r_close = v;
    }
    if let Some(v) = f.keep {
        m.keep = v;
    }
}

fn dataset_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.dataset
        .input
        .as_deref()
        .ok_or_else(|| Error::Config("dataset.input: no dataset given (use --in or the config)".into()))
}

fn is_image(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "png"))
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for item in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = item.map_err(|e| Error::io(dir, e))?.path();
        if is_image(&p) && !file_stem(&p).starts_with('.') {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Labelled manifest when available, else every image of a flat directory.
fn collect_inputs(path: &Path) -> Result<Vec<(PathBuf, Option<Label>)>> {
    let labelled = path.is_file() || path.join("cancerous").is_dir() || path.join("normal").is_dir();
    if labelled {
        let m = load_manifest(path)?;
        return Ok(m.entries().iter().map(|e| (e.path.clone(), Some(e.label))).collect());
    }
    let files = list_images(path)?;
    if files.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(files.into_iter().map(|p| (p, None)).collect())
}

fn class_dir(out: &Path, label: Option<Label>) -> PathBuf {
    match label {
        Some(Label::Normal) => out.join("normal"),
        Some(Label::Cancerous) => out.join("cancerous"),
        None => out.to_path_buf(),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_preprocess(a: &PreprocessArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    apply_pre(&mut cfg, &a.pre);
    cfg.validate()?;
    let inputs = collect_inputs(dataset_path(&cfg)?)?;
    let out = &cfg.output.dir;
    let spec = ResizeSpec::square(cfg.preprocess.size, ResizeKind::Bilinear);
    thread_pool()?.install(|| {
        inputs.par_iter().try_for_each(|(path, label)| {
            let img = resize(&clahe(&load_image(path)?, &cfg.preprocess.clahe())?, &spec)?;
            let dir = class_dir(out, *label);
            create_dir(&dir)?;
            save_image(&img, dir.join(format!("{}.pgm", file_stem(path))))
        })
    })?;
    println!("preprocessed {} images into {}", inputs.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct GenmaskEntry {
    name: String,
    threshold: u8,
    components: usize,
    area_fraction: f64,
    warnings: Vec<String>,
}

#[derive(Serialize)]
struct GenmaskReport {
    images: Vec<GenmaskEntry>,
}

fn cmd_genmask(a: &GenmaskArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    apply_morph(&mut cfg, &a.morph);
    cfg.validate()?;
    let inputs = collect_inputs(dataset_path(&cfg)?)?;
    let out = cfg.output.dir.clone();
    create_dir(&out)?;
    let lm_cfg = cfg.morphology.lung_mask();
    let images = thread_pool()?.install(|| {
        inputs
            .par_iter()
            .map(|(path, _)| {
                let stem = file_stem(path);
                let lm = generate_lung_mask(&load_image(path)?, &lm_cfg)?;
                save_mask(&lm.mask, out.join(format!("{stem}_mask.pgm")))?;
                save_image(&lm.masked, out.join(format!("{stem}_masked.pgm")))?;
                let warnings: Vec<String> = lm.warnings.iter().map(|w| w.to_string()).collect();
                for w in &warnings {
                    log::warn!("{stem}: {w}");
                }
                Ok(GenmaskEntry {
                    name: stem,
                    threshold: lm.threshold,
                    components: lm.components,
                    area_fraction: lm.mask.area_fraction(),
                    warnings,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    write_json(&out.join("genmask_report.json"), &GenmaskReport { images })?;
    println!("generated {} masks into {}", inputs.len(), out.display());
    Ok(())
}

fn train_setup(common: &Common, pre: &PreprocessFlags, morph: &MorphologyFlags, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = load_config(common)?;
    apply_pre(&mut cfg, pre);
    apply_morph(&mut cfg, morph);
    if let Some(s) = seed {
        cfg.cv.seed = s;
    }
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs, task: CvTask) -> Result<()> {
    let mut cfg = train_setup(&a.common, &a.pre, &a.morph, a.seed)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let manifest = load_manifest(dataset_path(&cfg)?)?;
    let (bundle, history) = thread_pool()?.install(|| -> Result<_> {
        let samples = load_samples(&cfg, &manifest)?;
        let all: Vec<usize> = (0..samples.len()).collect();
        fit_task(task, &cfg, &samples, &all, cfg.cv.seed)
    })?;
    let out = &cfg.output.dir;
    create_dir(out)?;
    bundle.save(&out.join("model.lkmb"))?;
    write_json(&out.join("history.json"), &history)?;
    println!(
        "trained {} epochs (best {}), bundle written to {}",
        history.epochs.len(),
        history.best_epoch,
        out.join("model.lkmb").display()
    );
    Ok(())
}

fn cmd_train_hybrid(a: &HybridArgs) -> Result<()> {
    let mut cfg = train_setup(&a.common, &a.pre, &a.morph, a.seed)?;
    if let Some(h) = a.head {
        cfg.model.head = h;
    }
    cfg.validate()?;
    let cnn = ModelBundle::load(&a.features_from)?;
    let [_, h, w] = cnn.spec.input;
    if (h, w) != (cfg.preprocess.size, cfg.preprocess.size) {
        return Err(Error::Config(format!(
            "preprocess.size: {} does not match the bundle input {h}x{w}",
            cfg.preprocess.size
        )));
    }
    let manifest = load_manifest(dataset_path(&cfg)?)?;
    let bundle = thread_pool()?.install(|| -> Result<_> {
        let samples = load_samples(&cfg, &manifest)?;
        let all: Vec<usize> = (0..samples.len()).collect();
        fit_head(&cnn, &samples, &all, cfg.model.head, &cfg, cfg.cv.seed)
    })?;
    let out = &cfg.output.dir;
    create_dir(out)?;
    bundle.save(&out.join("model.lkmb"))?;
    println!("hybrid bundle written to {}", out.join("model.lkmb").display());
    Ok(())
}

/// Image files keyed by stem, with a trailing `_mask` dropped and
/// `_masked` images skipped.
fn masks_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut map = BTreeMap::new();
    for p in list_images(dir)? {
        let stem = file_stem(&p);
        if stem.ends_with("_masked") {
            continue;
        }
        let key = stem.strip_suffix("_mask").unwrap_or(&stem).to_string();
        if let Some(prev) = map.insert(key.clone(), p.clone()) {
            return Err(Error::DuplicatePath(format!("{} and {} share stem `{key}`", prev.display(), p.display())));
        }
    }
    Ok(map)
}

#[derive(Serialize)]
struct EvalEntry {
    name: String,
    dice: f64,
    iou: f64,
}

#[derive(Serialize)]
struct MeanSd {
    mean: f64,
    sd: f64,
}

#[derive(Serialize)]
struct EvalOutput {
    per_image: Vec<EvalEntry>,
    summary: BTreeMap<String, MeanSd>,
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let pred = masks_by_stem(&a.pred)?;
    let truth = masks_by_stem(&a.truth)?;
    if let Some(stem) = pred.keys().find(|k| !truth.contains_key(*k)) {
        return Err(Error::Unmatched {
            stem: stem.clone(),
            reason: format!("no reference mask in {}", a.truth.display()),
        });
    }
    if let Some(stem) = truth.keys().find(|k| !pred.contains_key(*k)) {
        return Err(Error::Unmatched {
            stem: stem.clone(),
            reason: format!("no prediction in {}", a.pred.display()),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut per_image = Vec::with_capacity(pred.len());
    for (name, p) in &pred {
        let pm = BinaryMask::from_raster(&load_image(p)?, 127);
        let tm = BinaryMask::from_raster(&load_image(&truth[name])?, 127);
        per_image.push(EvalEntry {
            name: name.clone(),
            dice: dice(&pm, &tm).map_err(|e| Error::Config(format!("{name}: {e}")))?,
            iou: iou(&pm, &tm)?,
        });
    }
    let mut summary = BTreeMap::new();
    for (key, values) in [
        ("dice", per_image.iter().map(|e| e.dice).collect::<Vec<_>>()),
        ("iou", per_image.iter().map(|e| e.iou).collect()),
    ] {
        let (mean, sd) = aggregate(&values)?;
        summary.insert(key.to_string(), MeanSd { mean, sd });
    }
    println!(
        "{} images: dice {:.5} ± {:.5}, iou {:.5} ± {:.5}",
        per_image.len(),
        summary["dice"].mean,
        summary["dice"].sd,
        summary["iou"].mean,
        summary["iou"].sd
    );
    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(&a.report, &EvalOutput { per_image, summary })
}

fn cmd_cv(a: &CvArgs) -> Result<()> {
    let mut cfg = train_setup(&a.common, &a.pre, &a.morph, a.seed)?;
    if let Some(k) = a.folds {
        cfg.cv.folds = k;
    }
    if let Some(t) = a.task {
        cfg.cv.task = t;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let manifest = load_manifest(dataset_path(&cfg)?)?;
    let outcome = run_cv(&cfg, &manifest)?;
    for (name, text) in &outcome.summary.display {
        println!("{name:>10}: {text}");
    }
    println!("summary written to {}", cfg.output.dir.join("summary.json").display());
    Ok(())
}

fn cmd_selftest() -> bool {
    let outcome = crate::selftest::run_all();
    for c in &outcome.checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!("{status} {}{}", c.name, c.detail.as_ref().map(|d| format!(": {d}")).unwrap_or_default());
    }
    println!("{} passed, {} failed", outcome.passed(), outcome.failed());
    outcome.failed() == 0
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Genmask(a) => cmd_genmask(a),
        Command::TrainSeg(a) => cmd_train(a, CvTask::Segmentation),
        Command::TrainClf(a) => cmd_train(a, CvTask::Classification),
        Command::TrainHybrid(a) => cmd_train_hybrid(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Cv(a) => cmd_cv(a),
        Command::Phantoms(a) => crate::phantom::write_chest_dataset(&a.out, a.count, a.size, a.seed).map(|p| {
            println!("wrote {} phantoms to {}", p.len(), a.out.display());
        }),
        Command::Selftest => return if cmd_selftest() { 0 } else { 1 },
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
