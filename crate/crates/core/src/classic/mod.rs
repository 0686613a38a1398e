//! Classical classifier heads over feature vectors: standardization, CART,
//! random forest, gradient boosting and an SMO-trained SVM.

pub mod ensemble;
pub mod svm;
pub mod tree;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use ensemble::{fit_gradient_boosting, fit_random_forest, BoostModel, BoostParams, ForestModel};
pub use svm::{fit_svm_smo, gamma_scale, Kernel, SmoParams, SvmModel};
pub use tree::{fit_tree, gini_impurity, ClassTree, TreeParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Divisor-N standard deviation; 0 marks a constant feature.
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[Vec<f64>]) -> Result<Self> {
        let first = x.first().ok_or_else(|| Error::Empty("standardize over zero rows".into()))?;
        let dim = first.len();
        if x.iter().any(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch("ragged feature matrix".into()));
        }
        let n = x.len() as f64;
        let mut mean = vec![0.0; dim];
        let mut sd = vec![0.0; dim];
        for f in 0..dim {
            if x.iter().all(|r| r[f] == first[f]) {
                mean[f] = first[f];
                continue;
            }
            let m = x.iter().map(|r| r[f]).sum::<f64>() / n;
            mean[f] = m;
            sd[f] = (x.iter().map(|r| (r[f] - m) * (r[f] - m)).sum::<f64>() / n).sqrt();
        }
        Ok(Standardizer { mean, sd })
    }

    pub fn apply_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} features, standardizer expects {}",
                row.len(),
                self.mean.len()
            )));
        }
        Ok(row
            .iter()
            .zip(self.mean.iter().zip(&self.sd))
            .map(|(&v, (&m, &s))| if s > 0.0 { (v - m) / s } else { v - m })
            .collect())
    }

    pub fn apply(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        x.iter().map(|r| self.apply_row(r)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Svm,
    Rf,
    Gb,
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svm" => Ok(HeadKind::Svm),
            "rf" => Ok(HeadKind::Rf),
            "gb" => Ok(HeadKind::Gb),
            other => Err(Error::param("head", format!("unknown head `{other}` (expected svm, rf or gb)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvmKernel {
    Rbf,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub svm_c: f64,
    pub svm_kernel: SvmKernel,
    pub svm_tol: f64,
    pub svm_max_passes: usize,
    pub rf_trees: usize,
    pub rf_max_depth: Option<usize>,
    pub gb_stages: usize,
    pub gb_lr: f64,
    pub gb_depth: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        let smo = SmoParams::default();
        let gb = BoostParams::default();
        HeadConfig {
            svm_c: smo.c,
            svm_kernel: SvmKernel::Rbf,
            svm_tol: smo.tol,
            svm_max_passes: smo.max_passes,
            rf_trees: 100,
            rf_max_depth: None,
            gb_stages: gb.n_stages,
            gb_lr: gb.learning_rate,
            gb_depth: gb.max_depth,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassifierModel {
    Svm(SvmModel),
    Forest(ForestModel),
    Boost(BoostModel),
}

/// A standardizer plus one fitted classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassicHead {
    pub standardizer: Standardizer,
    pub model: ClassifierModel,
}

impl ClassicHead {
    pub fn fit(x: &[Vec<f64>], y: &[bool], kind: HeadKind, cfg: &HeadConfig, seed: u64) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch(format!("{} rows vs {} labels", x.len(), y.len())));
        }
        let standardizer = Standardizer::fit(x)?;
        let z = standardizer.apply(x)?;
        let model = match kind {
            HeadKind::Svm => {
                let kernel = match cfg.svm_kernel {
                    SvmKernel::Rbf => Kernel::Rbf { gamma: gamma_scale(&z) },
                    SvmKernel::Linear => Kernel::Linear,
                };
                let params = SmoParams {
                    c: cfg.svm_c,
                    tol: cfg.svm_tol,
                    max_passes: cfg.svm_max_passes,
                    seed,
                    ..SmoParams::default()
                };
                ClassifierModel::Svm(fit_svm_smo(&z, y, kernel, params)?.model)
            }
            HeadKind::Rf => {
                let params = TreeParams {
                    max_depth: cfg.rf_max_depth,
                    min_leaf: 1,
                };
                ClassifierModel::Forest(fit_random_forest(&z, y, cfg.rf_trees, params, seed)?)
            }
            HeadKind::Gb => {
                let params = BoostParams {
                    n_stages: cfg.gb_stages,
                    learning_rate: cfg.gb_lr,
                    max_depth: cfg.gb_depth,
                };
                ClassifierModel::Boost(fit_gradient_boosting(&z, y, params)?.0)
            }
        };
        Ok(ClassicHead { standardizer, model })
    }

    pub fn kind(&self) -> HeadKind {
        match self.model {
            ClassifierModel::Svm(_) => HeadKind::Svm,
            ClassifierModel::Forest(_) => HeadKind::Rf,
            ClassifierModel::Boost(_) => HeadKind::Gb,
        }
    }

    /// Labels and continuous scores: vote fraction (RF), `σ(F)` (GB) or the
    /// raw decision value (SVM).
    pub fn predict(&self, x: &[Vec<f64>]) -> Result<(Vec<bool>, Vec<f64>)> {
        let z = self.standardizer.apply(x)?;
        let scores: Vec<f64> = z
            .iter()
            .map(|r| match &self.model {
                ClassifierModel::Svm(m) => m.decision(r),
                ClassifierModel::Forest(m) => m.score(r),
                ClassifierModel::Boost(m) => m.score(r),
            })
            .collect();
        let labels = scores
            .iter()
            .map(|&s| match self.model {
                ClassifierModel::Svm(_) => s > 0.0,
                _ => s > 0.5,
            })
            .collect();
        Ok((labels, scores))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardizer_fixtures() {
        let s = Standardizer::fit(&[vec![1.0, 5.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.sd, vec![1.0, 0.0]);
        assert_eq!(s.apply(&[vec![1.0, 5.0], vec![3.0, 7.0]]).unwrap(), vec![vec![-1.0, 0.0], vec![1.0, 2.0]]);
        assert!(Standardizer::fit(&[]).is_err());
        assert!(s.apply_row(&[1.0]).is_err());
    }

    #[test]
    fn head_json_round_trip() {
        let x: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64 + if i >= 6 { 20.0 } else { 0.0 }, (i % 3) as f64 * 0.1]).collect();
        let y: Vec<bool> = (0..12).map(|i| i >= 6).collect();
        for kind in [HeadKind::Svm, HeadKind::Rf, HeadKind::Gb] {
            let cfg = HeadConfig {
                rf_trees: 5,
                gb_stages: 5,
                ..HeadConfig::default()
            };
            let head = ClassicHead::fit(&x, &y, kind, &cfg, 3).unwrap();
            assert_eq!(head.kind(), kind);
            let text = serde_json::to_string(&head).unwrap();
            let back: ClassicHead = serde_json::from_str(&text).unwrap();
            assert_eq!(back, head);
            assert_eq!(back.predict(&x).unwrap(), head.predict(&x).unwrap());
            assert_eq!(head.predict(&x).unwrap().0, y);
        }
    }
}
