//! CART trees stored as flat node arenas (root at index 0).

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node<L> {
    /// Samples with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf { value: L },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree<L> {
    pub nodes: Vec<Node<L>>,
}

impl<L> Tree<L> {
    pub fn leaf_for(&self, x: &[f64]) -> &L {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { value } => return value,
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk<L>(t: &Tree<L>, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Split { left, right, .. } => 1 + walk(t, *left).max(walk(t, *right)),
                Node::Leaf { .. } => 0,
            }
        }
        walk(self, 0)
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

/// Class-probability pair `[p(0), p(1)]` at a classification leaf.
pub type ClassTree = Tree<[f64; 2]>;
pub type RegressionTree = Tree<f64>;

pub fn gini_impurity(labels: &[bool]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("gini of an empty set".into()));
    }
    let n = labels.len() as f64;
    let p1 = labels.iter().filter(|&&l| l).count() as f64 / n;
    let p0 = 1.0 - p1;
    Ok(1.0 - p0 * p0 - p1 * p1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeParams {
    /// `None` grows until purity or `min_leaf`.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: None,
            min_leaf: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitChoice {
    pub feature: usize,
    pub threshold: f64,
}

/// Ascending `(value, sample)` pairs of one feature over `idx`.
fn sorted_column(x: &[Vec<f64>], idx: &[usize], f: usize) -> Vec<(f64, usize)> {
    let mut col: Vec<(f64, usize)> = idx.iter().map(|&i| (x[i][f], i)).collect();
    col.sort_by(|a, b| a.0.total_cmp(&b.0));
    col
}

/// Midpoint between consecutive distinct values, kept strictly below `hi`.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo + (hi - lo) / 2.0;
    if m < hi {
        m
    } else {
        lo
    }
}

/// Best Gini split over `features`. The score `(aL²+bL²)/nL + (aR²+bR²)/nR`
/// is maximized, which minimizes the weighted child impurity; comparisons are
/// exact rational cross-multiplications so ties resolve by scan order.
pub fn best_gini_split(
    x: &[Vec<f64>],
    y: &[bool],
    idx: &[usize],
    features: &[usize],
    min_leaf: usize,
) -> Option<SplitChoice> {
    let n = idx.len() as u128;
    let total_pos = idx.iter().filter(|&&i| y[i]).count() as u128;
    let mut best: Option<(SplitChoice, u128, u128)> = None;
    for &f in features {
        let col = sorted_column(x, idx, f);
        let mut pos_left = 0u128;
        for k in 0..col.len() - 1 {
            pos_left += y[col[k].1] as u128;
            let (lo, hi) = (col[k].0, col[k + 1].0);
            if lo == hi {
                continue;
            }
            let nl = (k + 1) as u128;
            let nr = n - nl;
            if (nl as usize) < min_leaf || (nr as usize) < min_leaf {
                continue;
            }
            let (al, bl) = (pos_left, nl - pos_left);
            let (ar, br) = (total_pos - pos_left, nr - (total_pos - pos_left));
            let num = (al * al + bl * bl) * nr + (ar * ar + br * br) * nl;
            let den = nl * nr;
            let better = match &best {
                None => true,
                Some((_, bn, bd)) => num * bd > bn * den,
            };
            if better {
                best = Some((
                    SplitChoice {
                        feature: f,
                        threshold: midpoint(lo, hi),
                    },
                    num,
                    den,
                ));
            }
        }
    }
    best.map(|b| b.0)
}

/// Per-node random feature subsets of a fixed size.
pub struct FeatureSampler<'a, R: Rng + ?Sized> {
    pub rng: &'a mut R,
    pub count: usize,
}

fn node_features<R: Rng + ?Sized>(dim: usize, sampler: &mut Option<FeatureSampler<'_, R>>) -> Vec<usize> {
    match sampler {
        Some(s) if s.count < dim => {
            let mut f = sample(s.rng, dim, s.count.max(1)).into_vec();
            f.sort_unstable();
            f
        }
        _ => (0..dim).collect(),
    }
}

fn check_matrix(x: &[Vec<f64>], n_targets: usize) -> Result<usize> {
    let first = x.first().ok_or_else(|| Error::Empty("training matrix has no rows".into()))?;
    let dim = first.len();
    if x.len() != n_targets {
        return Err(Error::DimensionMismatch(format!("{} rows vs {} targets", x.len(), n_targets)));
    }
    if let Some(r) = x.iter().position(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch(format!("row {r} has {} features, expected {dim}", x[r].len())));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training matrix".into()));
    }
    Ok(dim)
}

/// Greedy CART classification tree. `idx` selects (possibly repeated) rows.
pub fn fit_tree<R: Rng + ?Sized>(
    x: &[Vec<f64>],
    y: &[bool],
    idx: &[usize],
    params: TreeParams,
    mut sampler: Option<FeatureSampler<'_, R>>,
) -> Result<ClassTree> {
    let dim = check_matrix(x, y.len())?;
    if idx.is_empty() {
        return Err(Error::Empty("tree over zero samples".into()));
    }
    let mut tree = Tree { nodes: Vec::new() };
    grow_class(x, y, idx.to_vec(), 0, dim, params, &mut sampler, &mut tree);
    Ok(tree)
}

#[allow(clippy::too_many_arguments)]
fn grow_class<R: Rng + ?Sized>(
    x: &[Vec<f64>],
    y: &[bool],
    idx: Vec<usize>,
    depth: usize,
    dim: usize,
    params: TreeParams,
    sampler: &mut Option<FeatureSampler<'_, R>>,
    tree: &mut ClassTree,
) -> usize {
    let id = tree.nodes.len();
    let pos = idx.iter().filter(|&&i| y[i]).count();
    let p1 = pos as f64 / idx.len() as f64;
    tree.nodes.push(Node::Leaf { value: [1.0 - p1, p1] });
    let pure = pos == 0 || pos == idx.len();
    let depth_done = params.max_depth.is_some_and(|d| depth >= d);
    if pure || depth_done || idx.len() < 2 * params.min_leaf.max(1) {
        return id;
    }
    let features = node_features(dim, sampler);
    let Some(split) = best_gini_split(x, y, &idx, &features, params.min_leaf.max(1)) else {
        return id;
    };
    let (li, ri): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| x[i][split.feature] <= split.threshold);
    let left = grow_class(x, y, li, depth + 1, dim, params, sampler, tree);
    let right = grow_class(x, y, ri, depth + 1, dim, params, sampler, tree);
    tree.nodes[id] = Node::Split {
        feature: split.feature,
        threshold: split.threshold,
        left,
        right,
    };
    id
}

/// Best squared-error split: maximizes `sL²/nL + sR²/nR` over targets `r`.
/// A candidate must beat the incumbent by more than 1e-12 (relative).
fn best_mse_split(x: &[Vec<f64>], r: &[f64], idx: &[usize], dim: usize) -> Option<SplitChoice> {
    let total: f64 = idx.iter().map(|&i| r[i]).sum();
    let n = idx.len();
    let mut best: Option<(SplitChoice, f64)> = None;
    for f in 0..dim {
        let col = sorted_column(x, idx, f);
        let mut sl = 0.0;
        for k in 0..n - 1 {
            sl += r[col[k].1];
            let (lo, hi) = (col[k].0, col[k + 1].0);
            if lo == hi {
                continue;
            }
            let nl = (k + 1) as f64;
            let sr = total - sl;
            let score = sl * sl / nl + sr * sr / (n as f64 - nl);
            let better = match best {
                None => true,
                Some((_, b)) => score > b + 1e-12 * b.abs().max(1.0),
            };
            if better {
                best = Some((
                    SplitChoice {
                        feature: f,
                        threshold: midpoint(lo, hi),
                    },
                    score,
                ));
            }
        }
    }
    best.map(|b| b.0)
}

/// Regression tree on targets `r` whose leaf values come from `leaf_value`
/// applied to the samples reaching the leaf.
pub fn fit_regression_tree(
    x: &[Vec<f64>],
    r: &[f64],
    max_depth: usize,
    leaf_value: &dyn Fn(&[usize]) -> f64,
) -> Result<RegressionTree> {
    let dim = check_matrix(x, r.len())?;
    let mut tree = Tree { nodes: Vec::new() };
    let idx: Vec<usize> = (0..x.len()).collect();
    grow_reg(x, r, idx, 0, dim, max_depth, leaf_value, &mut tree);
    Ok(tree)
}

#[allow(clippy::too_many_arguments)]
fn grow_reg(
    x: &[Vec<f64>],
    r: &[f64],
    idx: Vec<usize>,
    depth: usize,
    dim: usize,
    max_depth: usize,
    leaf_value: &dyn Fn(&[usize]) -> f64,
    tree: &mut RegressionTree,
) -> usize {
    let id = tree.nodes.len();
    tree.nodes.push(Node::Leaf {
        value: leaf_value(&idx),
    });
    let constant = idx.iter().all(|&i| r[i] == r[idx[0]]);
    if depth >= max_depth || idx.len() < 2 || constant {
        return id;
    }
    let Some(split) = best_mse_split(x, r, &idx, dim) else {
        return id;
    };
    let (li, ri): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| x[i][split.feature] <= split.threshold);
    let left = grow_reg(x, r, li, depth + 1, dim, max_depth, leaf_value, tree);
    let right = grow_reg(x, r, ri, depth + 1, dim, max_depth, leaf_value, tree);
    tree.nodes[id] = Node::Split {
        feature: split.feature,
        threshold: split.threshold,
        left,
        right,
    };
    id
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::mock::StepRng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn no_sampler() -> Option<FeatureSampler<'static, StepRng>> {
        None
    }

    #[test]
    fn gini_fixtures() {
        assert_eq!(gini_impurity(&[true, true, false, false]).unwrap(), 0.5);
        assert_eq!(gini_impurity(&[true; 3]).unwrap(), 0.0);
        assert_eq!(gini_impurity(&[true, true, true, false]).unwrap(), 0.375);
        assert!(gini_impurity(&[]).is_err());
    }

    #[test]
    fn depth_two_tree_fits_xor() {
        let x = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]];
        let y = [false, true, true, false];
        let params = TreeParams {
            max_depth: Some(2),
            min_leaf: 1,
        };
        let t = fit_tree(&x, &y, &[0, 1, 2, 3], params, no_sampler()).unwrap();
        for (row, &label) in x.iter().zip(&y) {
            assert_eq!(t.leaf_for(row)[1] > 0.5, label);
        }
        assert_eq!(t.depth(), 2);
    }

    #[test]
    fn pure_input_gives_single_leaf() {
        let x = vec![vec![1.0], vec![2.0], vec![3.0]];
        let t = fit_tree(&x, &[true; 3], &[0, 1, 2], TreeParams::default(), no_sampler()).unwrap();
        assert_eq!(t.nodes, vec![Node::Leaf { value: [0.0, 1.0] }]);
    }

    /// Weighted child Gini of every candidate split, computed directly.
    fn brute_force(x: &[Vec<f64>], y: &[bool]) -> Vec<(usize, f64, f64)> {
        let mut out = Vec::new();
        for f in 0..x[0].len() {
            let mut vals: Vec<f64> = x.iter().map(|r| r[f]).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            for w in vals.windows(2) {
                let thr = (w[0] + w[1]) / 2.0;
                let (l, r): (Vec<bool>, Vec<bool>) = {
                    let mut l = Vec::new();
                    let mut r = Vec::new();
                    for (row, &lab) in x.iter().zip(y) {
                        if row[f] <= thr {
                            l.push(lab)
                        } else {
                            r.push(lab)
                        }
                    }
                    (l, r)
                };
                let n = y.len() as f64;
                let g = l.len() as f64 / n * gini_impurity(&l).unwrap() + r.len() as f64 / n * gini_impurity(&r).unwrap();
                out.push((f, thr, g));
            }
        }
        out
    }

    #[test]
    fn root_split_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.gen_range(4..=30);
            let d = rng.gen_range(1..=4);
            let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(0..6) as f64).collect()).collect();
            let y: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            let idx: Vec<usize> = (0..n).collect();
            let all: Vec<usize> = (0..d).collect();
            let got = best_gini_split(&x, &y, &idx, &all, 1);
            let cands = brute_force(&x, &y);
            match got {
                None => assert!(cands.is_empty()),
                Some(s) => {
                    let min = cands.iter().map(|c| c.2).fold(f64::INFINITY, f64::min);
                    let first = cands.iter().find(|c| c.2 <= min + 1e-12).unwrap();
                    assert_eq!((s.feature, s.threshold), (first.0, first.1));
                }
            }
        }
    }
}
