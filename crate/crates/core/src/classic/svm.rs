use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    Linear,
    Rbf { gamma: f64 },
}

impl Kernel {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            Kernel::Rbf { gamma } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-gamma * d2).exp()
            }
        }
    }
}

/// `1 / (D · Var(X))` with the variance taken over every matrix element;
/// 1 when the matrix is constant.
pub fn gamma_scale(x: &[Vec<f64>]) -> f64 {
    let dim = x.first().map_or(0, |r| r.len());
    let count = (x.len() * dim) as f64;
    if count == 0.0 {
        return 1.0;
    }
    let mean = x.iter().flatten().sum::<f64>() / count;
    let var = x.iter().flatten().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
    if var > 0.0 {
        1.0 / (dim as f64 * var)
    } else {
        1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoParams {
    pub c: f64,
    pub tol: f64,
    pub max_passes: usize,
    /// Hard cap on sweeps over the data, whatever the pass counter says.
    pub max_sweeps: usize,
    pub seed: u64,
}

impl Default for SmoParams {
    fn default() -> Self {
        SmoParams {
            c: 1.0,
            tol: 1e-3,
            max_passes: 20,
            max_sweeps: 10_000,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub kernel: Kernel,
    pub c: f64,
    pub bias: f64,
    pub support_vectors: Vec<Vec<f64>>,
    /// `αᵢ·yᵢ` per support vector.
    pub dual_coef: Vec<f64>,
}

impl SvmModel {
    /// `Σ αᵢyᵢ K(xᵢ, x) + b`.
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.support_vectors
            .iter()
            .zip(&self.dual_coef)
            .map(|(sv, a)| a * self.kernel.eval(sv, x))
            .sum::<f64>()
            + self.bias
    }
}

/// Full training output: the model plus every `αᵢ` for feasibility checks.
pub struct SmoFit {
    pub model: SvmModel,
    pub alpha: Vec<f64>,
    pub sweeps: usize,
}

/// Simplified SMO with a seeded uniformly drawn partner index.
pub fn fit_svm_smo(x: &[Vec<f64>], y: &[bool], kernel: Kernel, params: SmoParams) -> Result<SmoFit> {
    let n = x.len();
    if n == 0 || y.len() != n {
        return Err(Error::DimensionMismatch(format!("{n} rows vs {} labels", y.len())));
    }
    let pos = y.iter().filter(|&&l| l).count();
    if pos == 0 || pos == n {
        return Err(Error::SingleClass);
    }
    if !(params.c > 0.0) {
        return Err(Error::param("svm_c", "must be positive"));
    }
    let ys: Vec<f64> = y.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = kernel.eval(&x[i], &x[j]);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("kernel value K({i}, {j})")));
            }
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    let c = params.c;
    let mut alpha = vec![0.0; n];
    let mut b = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let f = |alpha: &[f64], b: f64, i: usize| -> f64 {
        (0..n).filter(|&t| alpha[t] != 0.0).map(|t| alpha[t] * ys[t] * k[t * n + i]).sum::<f64>() + b
    };
    // round-off residue next to a bound would otherwise count as a free vector
    let snap = |a: f64| if a < 1e-12 * c { 0.0 } else if a > c * (1.0 - 1e-12) { c } else { a };
    // Analytic two-variable update; false when the pair cannot make progress.
    let step = |alpha: &mut [f64], b: &mut f64, i: usize, j: usize, ei: f64| -> bool {
        let ej = f(alpha, *b, j) - ys[j];
        let (ai_old, aj_old) = (alpha[i], alpha[j]);
        let (lo, hi) = if ys[i] != ys[j] {
            ((aj_old - ai_old).max(0.0), (c + aj_old - ai_old).min(c))
        } else {
            ((ai_old + aj_old - c).max(0.0), (ai_old + aj_old).min(c))
        };
        if lo >= hi {
            return false;
        }
        let eta = 2.0 * k[i * n + j] - k[i * n + i] - k[j * n + j];
        if eta >= 0.0 {
            return false;
        }
        let aj = (aj_old - ys[j] * (ei - ej) / eta).clamp(lo, hi);
        if (aj - aj_old).abs() < 1e-5 * (aj + aj_old + 1e-5) {
            return false;
        }
        let ai = snap((ai_old + ys[i] * ys[j] * (aj_old - aj)).clamp(0.0, c));
        let aj = snap(aj);
        alpha[i] = ai;
        alpha[j] = aj;
        let b1 = *b - ei - ys[i] * (ai - ai_old) * k[i * n + i] - ys[j] * (aj - aj_old) * k[i * n + j];
        let b2 = *b - ej - ys[i] * (ai - ai_old) * k[i * n + j] - ys[j] * (aj - aj_old) * k[j * n + j];
        *b = if ai > 0.0 && ai < c {
            b1
        } else if aj > 0.0 && aj < c {
            b2
        } else {
            (b1 + b2) / 2.0
        };
        true
    };
    let (mut passes, mut sweeps) = (0, 0);
    while passes < params.max_passes && sweeps < params.max_sweeps {
        sweeps += 1;
        let mut changed = 0;
        for i in 0..n {
            let ei = f(&alpha, b, i) - ys[i];
            let violates = (ys[i] * ei < -params.tol && alpha[i] < c) || (ys[i] * ei > params.tol && alpha[i] > 0.0);
            if !violates {
                continue;
            }
            let mut j = rng.gen_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            // a stuck random partner falls back to scanning the rest from a random offset
            let moved = step(&mut alpha, &mut b, i, j, ei)
                || (1..n).map(|d| (j + d) % n).filter(|&t| t != i).any(|t| step(&mut alpha, &mut b, i, t, ei));
            if moved {
                changed += 1;
            }
        }
        passes = if changed == 0 { passes + 1 } else { 0 };
    }
    if sweeps >= params.max_sweeps {
        log::warn!("SMO stopped at the sweep cap ({sweeps}) before converging");
    }
    let mut support_vectors = Vec::new();
    let mut dual_coef = Vec::new();
    for i in 0..n {
        if alpha[i] > 0.0 {
            support_vectors.push(x[i].clone());
            dual_coef.push(alpha[i] * ys[i]);
        }
    }
    Ok(SmoFit {
        model: SvmModel {
            kernel,
            c,
            bias: b,
            support_vectors,
            dual_coef,
        },
        alpha,
        sweeps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_symmetric_points_linear() {
        let x = vec![vec![-1.0], vec![1.0]];
        let fit = fit_svm_smo(&x, &[false, true], Kernel::Linear, SmoParams { c: 10.0, ..SmoParams::default() }).unwrap();
        for v in [-2.0, -1.0, 0.5, 1.0, 3.0] {
            assert!((fit.model.decision(&[v]) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn separable_blobs_rbf() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..40 {
            let label = i % 2 == 1;
            let c = if label { 2.0 } else { -2.0 };
            x.push(vec![c + rng.gen_range(-0.8..0.8), c + rng.gen_range(-0.8..0.8)]);
            y.push(label);
        }
        let kernel = Kernel::Rbf { gamma: gamma_scale(&x) };
        let fit = fit_svm_smo(&x, &y, kernel, SmoParams::default()).unwrap();
        for (row, &label) in x.iter().zip(&y) {
            assert_eq!(fit.model.decision(row) > 0.0, label);
        }
        let balance: f64 = fit.alpha.iter().zip(&y).map(|(a, &l)| if l { *a } else { -*a }).sum();
        assert!(balance.abs() <= 1e-6);
        assert!(fit.alpha.iter().all(|&a| (0.0..=1.0).contains(&a)));
    }

    #[test]
    fn gamma_scale_fixtures() {
        assert_eq!(gamma_scale(&[vec![3.0, 3.0]]), 1.0);
        // elements {0, 2}: variance 1, D = 2
        assert_eq!(gamma_scale(&[vec![0.0, 2.0], vec![2.0, 0.0]]), 0.5);
    }
}
