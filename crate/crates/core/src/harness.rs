//! Stratified k-fold cross-validation over segmentation, classification and
//! hybrid (CNN features + classical head) tasks, with per-fold artifacts and
//! mean ± SD aggregation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classic::{ClassicHead, HeadKind};
use crate::config::{CvTask, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate, classification_report, dice, iou, roc_auc, ConfusionCounts, EvalReport, MetricSummary,
};
use crate::morphoseg::{apply_mask, generate_lung_mask, BinaryMask};
use crate::preprocess::{clahe, normalize, resize, ResizeKind, ResizeSpec};
use crate::raster::{load_image, DatasetManifest, Label, Raster};
use crate::tinynet::bundle::{extract_features_with, predict_with};
use crate::tinynet::{train_model, ModelBundle, Tensor4, TrainHistory};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    /// Held-out fold of each sample.
    pub assignment: Vec<usize>,
}

impl FoldAssignment {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] != fold).collect()
    }
}

/// Per class (normal first), a seeded shuffle then a round-robin deal whose
/// counter carries over between classes, so fold sizes differ by at most one.
pub fn make_folds(labels: &[Label], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::param("folds", "k must be >= 2"));
    }
    let mut classes: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        classes[l as usize].push(i);
    }
    let minority = classes[0].len().min(classes[1].len());
    if k > minority {
        return Err(Error::param(
            "folds",
            format!("k = {k} exceeds the minority class size {minority}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; labels.len()];
    let mut next = 0;
    for class in classes.iter_mut() {
        class.shuffle(&mut rng);
        for &i in class.iter() {
            assignment[i] = next % k;
            next += 1;
        }
    }
    Ok(FoldAssignment { k, seed, assignment })
}

/// Independent seed for fold `fold` of a run seeded with `seed`.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Mean and sample SD per metric; every fold must report the same keys.
pub fn aggregate_report(per_fold: &[BTreeMap<String, f64>]) -> Result<EvalReport> {
    let first = per_fold.first().ok_or_else(|| Error::Empty("no folds to aggregate".into()))?;
    for (i, m) in per_fold.iter().enumerate() {
        if !m.keys().eq(first.keys()) {
            let a: Vec<&String> = first.keys().collect();
            let b: Vec<&String> = m.keys().collect();
            return Err(Error::DimensionMismatch(format!("fold {i} reports metrics {b:?}, fold 0 reports {a:?}")));
        }
    }
    let mut report = EvalReport::default();
    for key in first.keys() {
        let values: Vec<f64> = per_fold.iter().map(|m| m[key]).collect();
        let (mean, sd) = aggregate(&values)?;
        report.metrics.insert(key.clone(), MetricSummary { mean, sd, per_fold: values });
    }
    Ok(report)
}

/// One dataset image after preprocessing, at network resolution.
#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub label: Label,
    /// CLAHE-enhanced image.
    pub image: Raster,
    pub mask: BinaryMask,
    /// CLAHE-enhanced image with the lung mask applied.
    pub masked: Raster,
}

fn find_mask(dir: &Path, stem: &str) -> Result<PathBuf> {
    for suffix in ["", "_mask"] {
        for ext in ["pgm", "png"] {
            let p = dir.join(format!("{stem}{suffix}.{ext}"));
            if p.is_file() {
                return Ok(p);
            }
        }
    }
    Err(Error::Config(format!("dataset.masks: no mask for `{stem}` in {}", dir.display())))
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// CLAHE at native resolution, a lung mask (reference or generated from the
/// raw image), then bilinear resizing of images and nearest resizing of the mask.
pub fn prepare_image(raw: &Raster, reference: Option<BinaryMask>, cfg: &RunConfig) -> Result<(Raster, BinaryMask, Raster)> {
    let mask = match reference {
        Some(m) if m.dims() != raw.dims() => {
            return Err(Error::DimensionMismatch(format!(
                "mask {:?} vs image {:?}",
                m.dims(),
                raw.dims()
            )))
        }
        Some(m) => m,
        None => generate_lung_mask(raw, &cfg.morphology.lung_mask())?.mask,
    };
    let enhanced = clahe(raw, &cfg.preprocess.clahe())?;
    let masked = apply_mask(&enhanced, &mask)?;
    let s = cfg.preprocess.size;
    let bilinear = ResizeSpec::square(s, ResizeKind::Bilinear);
    let image = resize(&enhanced, &bilinear)?;
    let masked = resize(&masked, &bilinear)?;
    let mask = BinaryMask::from_raster(&resize(&mask.to_raster(), &ResizeSpec::square(s, ResizeKind::Nearest))?, 127);
    Ok((image, mask, masked))
}

/// Loads and preprocesses every manifest entry, in manifest order.
pub fn load_samples(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<Vec<Sample>> {
    manifest
        .entries()
        .par_iter()
        .map(|e| {
            let name = file_stem(&e.path);
            let raw = load_image(&e.path)?;
            let reference = match &cfg.dataset.masks {
                Some(dir) => Some(BinaryMask::from_raster(&load_image(find_mask(dir, &name)?)?, 127)),
                None => None,
            };
            let (image, mask, masked) = prepare_image(&raw, reference, cfg)?;
            Ok(Sample { name, label: e.label, image, mask, masked })
        })
        .collect()
}

fn stack(rasters: &[&Raster]) -> Result<Tensor4> {
    let (w, h) = rasters.first().map(|r| r.dims()).ok_or(Error::EmptyDataset)?;
    let mut data = Vec::with_capacity(rasters.len() * w * h);
    for r in rasters {
        if r.dims() != (w, h) {
            return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", r.dims(), (w, h))));
        }
        data.extend(normalize(r).data);
    }
    Tensor4::from_vec(rasters.len(), 1, h, w, data)
}

/// Network input tensor: CLAHE images for segmentation, masked images otherwise.
pub fn input_tensor(samples: &[Sample], idx: &[usize], task: CvTask) -> Result<Tensor4> {
    let rasters: Vec<&Raster> = idx
        .iter()
        .map(|&i| match task {
            CvTask::Segmentation => &samples[i].image,
            _ => &samples[i].masked,
        })
        .collect();
    stack(&rasters)
}

pub fn mask_targets(samples: &[Sample], idx: &[usize]) -> Result<Tensor4> {
    let (w, h) = samples[idx[0]].mask.dims();
    let data = idx
        .iter()
        .flat_map(|&i| samples[i].mask.bits().iter().map(|&b| b as u8 as f64))
        .collect();
    Tensor4::from_vec(idx.len(), 1, h, w, data)
}

pub fn label_targets(samples: &[Sample], idx: &[usize]) -> Result<Tensor4> {
    let data = idx.iter().map(|&i| samples[i].label.as_u8() as f64).collect();
    Tensor4::from_vec(idx.len(), 1, 1, 1, data)
}

fn labels_of(samples: &[Sample], idx: &[usize]) -> Vec<bool> {
    idx.iter().map(|&i| samples[i].label.is_positive()).collect()
}

/// Trains the task's network on `idx`. Hybrid bundles carry a fitted head.
pub fn fit_task(
    task: CvTask,
    cfg: &RunConfig,
    samples: &[Sample],
    idx: &[usize],
    seed: u64,
) -> Result<(ModelBundle, TrainHistory)> {
    if idx.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let x = input_tensor(samples, idx, task)?;
    match task {
        CvTask::Segmentation => train_model(cfg.unet_spec()?, &x, &mask_targets(samples, idx)?, &cfg.seg_train(seed)),
        CvTask::Classification => train_model(cfg.cnn_spec()?, &x, &label_targets(samples, idx)?, &cfg.clf_train(seed)),
        CvTask::Hybrid => {
            let (cnn, history) = train_model(cfg.cnn_spec()?, &x, &label_targets(samples, idx)?, &cfg.clf_train(seed))?;
            let bundle = fit_head(&cnn, samples, idx, cfg.model.head, cfg, seed)?;
            Ok((bundle, history))
        }
    }
}

/// Fits a classical head on the flatten-layer features of `cnn` and returns
/// a copy of the bundle carrying it.
pub fn fit_head(
    cnn: &ModelBundle,
    samples: &[Sample],
    idx: &[usize],
    kind: HeadKind,
    cfg: &RunConfig,
    seed: u64,
) -> Result<ModelBundle> {
    let net = cnn.to_network()?;
    let features = extract_features_with(&net, &input_tensor(samples, idx, CvTask::Classification)?)?;
    let head = ClassicHead::fit(&features, &labels_of(samples, idx), kind, &cfg.model.classic, seed)?;
    let mut bundle = cnn.clone();
    bundle.head = Some(head);
    Ok(bundle)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    pub dice: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePrediction {
    pub name: String,
    pub label: u8,
    pub score: f64,
    pub predicted: u8,
}

/// Held-out evaluation of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_image: Vec<ImageScore>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predictions: Vec<ImagePrediction>,
}

fn insert_report(metrics: &mut BTreeMap<String, f64>, c: &ConfusionCounts) -> Result<()> {
    let r = classification_report(c)?;
    metrics.insert("accuracy".into(), r.accuracy);
    metrics.insert("precision".into(), r.precision);
    metrics.insert("recall".into(), r.recall);
    metrics.insert("f1".into(), r.f1);
    Ok(())
}

/// Segmentation: per-image Dice/IoU (fold value = image mean) plus pooled
/// pixel-level confusion metrics. Classification: confusion metrics and AUC
/// (AUC needs both classes in `idx`).
pub fn evaluate(task: CvTask, bundle: &ModelBundle, samples: &[Sample], idx: &[usize]) -> Result<Evaluation> {
    let net = bundle.to_network()?;
    let x = input_tensor(samples, idx, task)?;
    let mut metrics = BTreeMap::new();
    match task {
        CvTask::Segmentation => {
            let probs = predict_with(&net, &x)?;
            let mut per_image = Vec::with_capacity(idx.len());
            let mut pooled = ConfusionCounts::default();
            for (row, &i) in idx.iter().enumerate() {
                let truth = &samples[i].mask;
                let (w, h) = truth.dims();
                let pred = BinaryMask::new(w, h, probs.sample(row).iter().map(|&p| p >= 0.5).collect())?;
                pooled.add(&ConfusionCounts::from_predictions(pred.bits(), truth.bits()));
                per_image.push(ImageScore {
                    name: samples[i].name.clone(),
                    dice: dice(&pred, truth)?,
                    iou: iou(&pred, truth)?,
                });
            }
            let n = per_image.len() as f64;
            metrics.insert("dice".into(), per_image.iter().map(|s| s.dice).sum::<f64>() / n);
            metrics.insert("iou".into(), per_image.iter().map(|s| s.iou).sum::<f64>() / n);
            insert_report(&mut metrics, &pooled)?;
            Ok(Evaluation { metrics, per_image, predictions: Vec::new() })
        }
        CvTask::Classification | CvTask::Hybrid => {
            let (predicted, scores) = match (task, &bundle.head) {
                (CvTask::Hybrid, Some(head)) => head.predict(&extract_features_with(&net, &x)?)?,
                (CvTask::Hybrid, None) => return Err(Error::Bundle("hybrid evaluation needs a bundle with a classical head".into())),
                _ => {
                    let s: Vec<f64> = predict_with(&net, &x)?.data.clone();
                    (s.iter().map(|&p| p > 0.5).collect(), s)
                }
            };
            let truth = labels_of(samples, idx);
            insert_report(&mut metrics, &ConfusionCounts::from_predictions(&predicted, &truth))?;
            metrics.insert("auc".into(), roc_auc(&scores, &truth)?);
            let predictions = idx
                .iter()
                .enumerate()
                .map(|(row, &i)| ImagePrediction {
                    name: samples[i].name.clone(),
                    label: samples[i].label.as_u8(),
                    score: scores[row],
                    predicted: predicted[row] as u8,
                })
                .collect();
            Ok(Evaluation { metrics, per_image: Vec::new(), predictions })
        }
    }
}

/// Contents of `fold<i>/metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    #[serde(flatten)]
    pub evaluation: Evaluation,
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub task: CvTask,
    pub k: usize,
    pub seed: u64,
    pub n_samples: usize,
    pub metrics: BTreeMap<String, MetricSummary>,
    /// `mean ± sd` with five decimals.
    pub display: BTreeMap<String, String>,
}

pub struct CvOutcome {
    pub summary: CvSummary,
    pub report: EvalReport,
    pub folds: Vec<FoldResult>,
}

/// Worker pool capped by `LUNGKIT_THREADS` (default: all logical processors).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("LUNGKIT_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::Config(format!("LUNGKIT_THREADS: expected a positive integer, got `{v}`")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run_fold(task: CvTask, cfg: &RunConfig, samples: &[Sample], folds: &FoldAssignment, fold: usize) -> Result<(ModelBundle, FoldResult)> {
    let seed = fold_seed(folds.seed, fold);
    let train = folds.train_indices(fold);
    let test = folds.test_indices(fold);
    let (bundle, history) = fit_task(task, cfg, samples, &train, seed)?;
    let evaluation = evaluate(task, &bundle, samples, &test)?;
    log::info!("fold {fold}: {:?}", evaluation.metrics);
    Ok((
        bundle,
        FoldResult {
            fold,
            seed,
            n_train: train.len(),
            n_test: test.len(),
            epochs_run: history.epochs.len(),
            best_epoch: history.best_epoch,
            evaluation,
        },
    ))
}

/// Runs stratified k-fold CV of `cfg.cv.task` and writes `fold<i>/model.lkmb`,
/// `fold<i>/metrics.json` and `summary.json` under `cfg.output.dir`.
pub fn run_cv(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<CvOutcome> {
    cfg.validate()?;
    let task = cfg.cv.task;
    let folds = make_folds(&manifest.labels(), cfg.cv.folds, cfg.cv.seed)?;
    let pool = thread_pool()?;
    let (samples, results) = pool.install(|| -> Result<_> {
        let samples = load_samples(cfg, manifest)?;
        let results: Vec<Result<(ModelBundle, FoldResult)>> =
            (0..folds.k).into_par_iter().map(|f| run_fold(task, cfg, &samples, &folds, f)).collect();
        Ok((samples, results))
    })?;
    let mut bundles = Vec::with_capacity(folds.k);
    let mut fold_results = Vec::with_capacity(folds.k);
    for (fold, r) in results.into_iter().enumerate() {
        let (b, fr) = r.map_err(|e| Error::Fold { fold, source: Box::new(e) })?;
        bundles.push(b);
        fold_results.push(fr);
    }
    let per_fold: Vec<BTreeMap<String, f64>> = fold_results.iter().map(|f| f.evaluation.metrics.clone()).collect();
    let report = aggregate_report(&per_fold)?;
    let summary = CvSummary {
        task,
        k: folds.k,
        seed: folds.seed,
        n_samples: samples.len(),
        display: report.metrics.iter().map(|(k, m)| (k.clone(), m.display())).collect(),
        metrics: report.metrics.clone(),
    };

    let out = &cfg.output.dir;
    for (b, fr) in bundles.iter().zip(&fold_results) {
        let dir = out.join(format!("fold{}", fr.fold));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        b.save(&dir.join("model.lkmb"))?;
        write_json(&dir.join("metrics.json"), fr)?;
    }
    write_json(&out.join("summary.json"), &summary)?;
    Ok(CvOutcome { summary, report, folds: fold_results })
}
