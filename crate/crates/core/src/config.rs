//! The JSON run configuration shared by every subcommand. Every field has a
//! default; unknown keys are rejected and validation errors name the key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classic::{HeadConfig, HeadKind};
use crate::error::{Error, Result};
use crate::morphoseg::{LungMaskConfig, Polarity};
use crate::preprocess::ClaheParams;
use crate::tinynet::{build_mini_cnn, build_mini_unet, NetworkSpec, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvTask {
    Segmentation,
    Classification,
    Hybrid,
}

impl std::str::FromStr for CvTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "segmentation" => Ok(CvTask::Segmentation),
            "classification" => Ok(CvTask::Classification),
            "hybrid" => Ok(CvTask::Hybrid),
            other => Err(Error::Config(format!(
                "cv.task: unknown task `{other}` (expected segmentation, classification or hybrid)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// `cancerous/` + `normal/` directory or a `path,label` CSV.
    pub input: Option<PathBuf>,
    /// Reference lung masks named by image stem. Generated masks are used when absent.
    pub masks: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    pub clahe_clip: f64,
    /// Square tile grid.
    pub clahe_grid: usize,
    /// Network working resolution.
    pub size: usize,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        PreprocessSection {
            clahe_clip: 2.0,
            clahe_grid: 8,
            size: 128,
        }
    }
}

impl PreprocessSection {
    pub fn clahe(&self) -> ClaheParams {
        ClaheParams {
            clip_limit: self.clahe_clip,
            tiles_x: self.clahe_grid,
            tiles_y: self.clahe_grid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MorphologySection {
    pub polarity: Polarity,
    pub r_dilate: usize,
    pub r_erode: usize,
    pub r_close: usize,
    pub keep: usize,
}

impl Default for MorphologySection {
    fn default() -> Self {
        let d = LungMaskConfig::default();
        MorphologySection {
            polarity: d.polarity,
            r_dilate: d.r_dilate,
            r_erode: d.r_erode,
            r_close: d.r_close,
            keep: d.keep,
        }
    }
}

impl MorphologySection {
    pub fn lung_mask(&self) -> LungMaskConfig {
        LungMaskConfig {
            polarity: self.polarity,
            r_dilate: self.r_dilate,
            r_erode: self.r_erode,
            r_close: self.r_close,
            keep: self.keep,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub unet_depth: usize,
    pub unet_base: usize,
    pub cnn_widths: Vec<usize>,
    pub cnn_dense: usize,
    pub cnn_batchnorm: bool,
    pub head: HeadKind,
    pub classic: HeadConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            unet_depth: 3,
            unet_base: 16,
            cnn_widths: vec![32, 64, 128, 256],
            cnn_dense: 256,
            cnn_batchnorm: false,
            head: HeadKind::Svm,
            classic: HeadConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub val_fraction: f64,
    pub seg_batch_size: usize,
    pub seg_patience: usize,
    pub clf_batch_size: usize,
    pub clf_patience: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            epochs: 50,
            val_fraction: 0.1,
            seg_batch_size: 2,
            seg_patience: 15,
            clf_batch_size: 16,
            clf_patience: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvSection {
    pub task: CvTask,
    pub folds: usize,
    pub seed: u64,
}

impl Default for CvSection {
    fn default() -> Self {
        CvSection {
            task: CvTask::Segmentation,
            folds: 5,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("lungkit_out"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub preprocess: PreprocessSection,
    pub morphology: MorphologySection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub cv: CvSection,
    pub output: OutputSection,
}

fn check(ok: bool, key: &str, constraint: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{key}: {constraint}")))
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.preprocess;
        check(p.clahe_clip.is_finite() && p.clahe_clip >= 1.0, "preprocess.clahe_clip", "must be finite and >= 1.0")?;
        check(p.clahe_grid >= 1, "preprocess.clahe_grid", "must be >= 1")?;
        check(p.size >= 8, "preprocess.size", "must be >= 8")?;
        let m = &self.morphology;
        check(m.keep >= 1, "morphology.keep", "must be >= 1")?;
        let md = &self.model;
        check(md.unet_depth >= 1, "model.unet_depth", "must be >= 1")?;
        check(md.unet_base >= 1, "model.unet_base", "must be >= 1")?;
        check(
            !md.cnn_widths.is_empty() && !md.cnn_widths.contains(&0),
            "model.cnn_widths",
            "must be non-empty with every width >= 1",
        )?;
        check(md.cnn_dense >= 1, "model.cnn_dense", "must be >= 1")?;
        let c = &md.classic;
        check(c.svm_c > 0.0 && c.svm_c.is_finite(), "model.classic.svm_c", "must be positive")?;
        check(c.svm_tol > 0.0, "model.classic.svm_tol", "must be positive")?;
        check(c.svm_max_passes >= 1, "model.classic.svm_max_passes", "must be >= 1")?;
        check(c.rf_trees >= 1, "model.classic.rf_trees", "must be >= 1")?;
        check(c.rf_max_depth != Some(0), "model.classic.rf_max_depth", "must be >= 1 when set")?;
        check(c.gb_stages >= 1, "model.classic.gb_stages", "must be >= 1")?;
        check(c.gb_lr > 0.0 && c.gb_lr.is_finite(), "model.classic.gb_lr", "must be positive")?;
        check(c.gb_depth >= 1, "model.classic.gb_depth", "must be >= 1")?;
        let t = &self.train;
        check(t.lr > 0.0 && t.lr.is_finite(), "train.lr", "must be a positive finite number")?;
        check((0.0..1.0).contains(&t.beta1), "train.beta1", "must be in [0, 1)")?;
        check((0.0..1.0).contains(&t.beta2), "train.beta2", "must be in [0, 1)")?;
        check(t.eps > 0.0, "train.eps", "must be positive")?;
        check(t.epochs >= 1, "train.epochs", "must be >= 1")?;
        check((0.0..1.0).contains(&t.val_fraction), "train.val_fraction", "must be in [0, 1)")?;
        check(t.seg_batch_size >= 1, "train.seg_batch_size", "must be >= 1")?;
        check(t.clf_batch_size >= 1, "train.clf_batch_size", "must be >= 1")?;
        check(self.cv.folds >= 2, "cv.folds", "must be >= 2")?;
        Ok(())
    }

    fn train_config(&self, batch_size: usize, patience: usize, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            batch_size,
            max_epochs: t.epochs,
            patience,
            val_fraction: t.val_fraction,
            seed,
        }
    }

    pub fn seg_train(&self, seed: u64) -> TrainConfig {
        self.train_config(self.train.seg_batch_size, self.train.seg_patience, seed)
    }

    pub fn clf_train(&self, seed: u64) -> TrainConfig {
        self.train_config(self.train.clf_batch_size, self.train.clf_patience, seed)
    }

    pub fn unet_spec(&self) -> Result<NetworkSpec> {
        let s = self.preprocess.size;
        build_mini_unet(self.model.unet_depth, self.model.unet_base, [1, s, s])
            .map_err(|e| Error::Config(format!("model.unet_depth / preprocess.size: {e}")))
    }

    pub fn cnn_spec(&self) -> Result<NetworkSpec> {
        let s = self.preprocess.size;
        let m = &self.model;
        build_mini_cnn([1, s, s], &m.cnn_widths, m.cnn_dense, m.cnn_batchnorm)
            .map_err(|e| Error::Config(format!("model.cnn_widths / preprocess.size: {e}")))
    }
}

/// Reads and validates a config file; defaults fill every absent field.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.preprocess.clahe_clip, 2.0);
        assert_eq!(cfg.preprocess.clahe_grid, 8);
        assert_eq!(cfg.preprocess.size, 128);
        assert_eq!(cfg.cv.folds, 5);
        assert_eq!(cfg.clf_train(1).batch_size, 16);
        assert_eq!(cfg.seg_train(1).batch_size, 2);
        assert_eq!(cfg.seg_train(1).patience, 15);
        assert_eq!(cfg.clf_train(1).patience, 10);
        assert_eq!(cfg.train.epochs, 50);
        let m = cfg.morphology.lung_mask();
        assert_eq!((m.r_dilate, m.r_erode, m.r_close, m.keep), (5, 4, 10, 2));
        cfg.unet_spec().unwrap();
        cfg.cnn_spec().unwrap();
    }

    #[test]
    fn errors_name_the_key() {
        let err = RunConfig::from_json(r#"{"preprocess": {"clahe_clip": -1}}"#).unwrap_err();
        assert!(err.to_string().contains("clahe_clip"), "{err}");
        let err = RunConfig::from_json(r#"{"morphology": {"r_dilate": -3}}"#).unwrap_err();
        assert!(err.to_string().contains("r_dilate"), "{err}");
        let err = RunConfig::from_json(r#"{"train": {"bogus": 1}}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = RunConfig::from_json(r#"{"cv": {"folds": "five"}}"#).unwrap_err();
        assert!(err.to_string().contains("cv.folds"), "{err}");
        assert!(RunConfig::from_json(r#"{"cv": {"folds": 1}}"#).is_err());
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let cfg = RunConfig::from_json(r#"{"morphology": {"polarity": "bright"}, "cv": {"task": "hybrid"}}"#).unwrap();
        assert_eq!(cfg.morphology.polarity, Polarity::BrightForeground);
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}
