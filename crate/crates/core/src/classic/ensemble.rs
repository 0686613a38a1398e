use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{fit_regression_tree, fit_tree, ClassTree, FeatureSampler, RegressionTree, TreeParams};
use crate::error::{Error, Result};
use crate::tinynet::ops::sigmoid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub seed: u64,
    pub dim: usize,
    pub trees: Vec<ClassTree>,
}

/// `round(sqrt(D))`, at least 1.
pub fn sqrt_features(dim: usize) -> usize {
    ((dim as f64).sqrt().round() as usize).max(1)
}

/// Bootstrap-aggregated Gini trees. Tree `t` draws its bootstrap sample and
/// per-node feature subsets from a stream derived from `(seed, t)`.
pub fn fit_random_forest(
    x: &[Vec<f64>],
    y: &[bool],
    n_estimators: usize,
    params: TreeParams,
    seed: u64,
) -> Result<ForestModel> {
    if x.len() < 2 {
        return Err(Error::Empty("random forest needs at least 2 samples".into()));
    }
    if n_estimators == 0 {
        return Err(Error::param("rf_trees", "must be >= 1"));
    }
    let dim = x[0].len();
    let m = sqrt_features(dim);
    let trees = (0..n_estimators)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let n = x.len();
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            let sampler = FeatureSampler { rng: &mut rng, count: m };
            fit_tree(x, y, &idx, params, Some(sampler))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ForestModel { seed, dim, trees })
}

impl ForestModel {
    /// Mean class-1 probability over the trees.
    pub fn score(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.leaf_for(x)[1]).sum::<f64>() / self.trees.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoostParams {
    pub n_stages: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
}

impl Default for BoostParams {
    fn default() -> Self {
        BoostParams {
            n_stages: 100,
            learning_rate: 0.1,
            max_depth: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostModel {
    pub dim: usize,
    pub f0: f64,
    pub learning_rate: f64,
    pub stages: Vec<RegressionTree>,
}

/// Mean binomial deviance `−[y ln p + (1−y) ln(1−p)]` written in terms of
/// the raw score `F` so that it stays finite for large `|F|`.
pub fn binomial_deviance(f: &[f64], y: &[bool]) -> f64 {
    let sum: f64 = f
        .iter()
        .zip(y)
        .map(|(&f, &y)| {
            // ln(1 + e^F) − y·F
            let softplus = if f > 0.0 { f + (-f).exp().ln_1p() } else { f.exp().ln_1p() };
            softplus - if y { f } else { 0.0 }
        })
        .sum();
    sum / f.len() as f64
}

/// Gradient boosting on binomial deviance with Newton leaf values.
/// Returns the model and the training deviance after `F0` and after every stage.
pub fn fit_gradient_boosting(x: &[Vec<f64>], y: &[bool], params: BoostParams) -> Result<(BoostModel, Vec<f64>)> {
    if x.is_empty() {
        return Err(Error::Empty("boosting over zero samples".into()));
    }
    let pos = y.iter().filter(|&&l| l).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::SingleClass);
    }
    if !(params.learning_rate > 0.0) {
        return Err(Error::param("gb_lr", "must be positive"));
    }
    let n = y.len() as f64;
    let rate = pos as f64 / n;
    let f0 = (rate / (1.0 - rate)).ln();
    let mut f = vec![f0; y.len()];
    let mut deviance = vec![binomial_deviance(&f, y)];
    let mut stages = Vec::with_capacity(params.n_stages);
    for _ in 0..params.n_stages {
        let p: Vec<f64> = f.iter().map(|&v| sigmoid(v)).collect();
        let r: Vec<f64> = p.iter().zip(y).map(|(&p, &y)| y as u8 as f64 - p).collect();
        let leaf = |idx: &[usize]| {
            let num: f64 = idx.iter().map(|&i| r[i]).sum();
            let den: f64 = idx.iter().map(|&i| p[i] * (1.0 - p[i])).sum();
            if den.abs() < 1e-150 {
                0.0
            } else {
                num / den
            }
        };
        let tree = fit_regression_tree(x, &r, params.max_depth, &leaf)?;
        for (fi, row) in f.iter_mut().zip(x) {
            *fi += params.learning_rate * tree.leaf_for(row);
        }
        deviance.push(binomial_deviance(&f, y));
        stages.push(tree);
    }
    Ok((
        BoostModel {
            dim: x[0].len(),
            f0,
            learning_rate: params.learning_rate,
            stages,
        },
        deviance,
    ))
}

impl BoostModel {
    pub fn raw(&self, x: &[f64]) -> f64 {
        self.f0 + self.stages.iter().map(|t| self.learning_rate * t.leaf_for(x)).sum::<f64>()
    }

    /// `σ(F_M(x))`.
    pub fn score(&self, x: &[f64]) -> f64 {
        sigmoid(self.raw(x))
    }
}
