//! Built-in oracle and invariant checks run by `lungkit selftest`. The
//! [`oracle`] module holds deliberately naive reference implementations that
//! share no code with the optimized kernels they check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::harness::make_folds;
use crate::metrics::{classification_report, dice, iou, roc_auc, ConfusionCounts};
use crate::morphoseg::{
    clear_border, close, dilate, erode, fill_holes, generate_lung_mask, label_components, otsu_from_histogram,
    BinaryMask, Connectivity, LungMaskConfig, StructuringElement,
};
use crate::phantom::chest_phantom;
use crate::preprocess::{clahe, ClaheParams};
use crate::raster::{Label, Raster};
use crate::tinynet::network::Network;
use crate::tinynet::ops::{bce_logit_grad, bce_loss, Mode, Padding};
use crate::tinynet::{ModelBundle, LayerSpec, NetworkSpec, Task, Tensor4, TrainMeta};

pub mod oracle {
    use crate::morphoseg::BinaryMask;

    fn at(m: &BinaryMask, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < m.width() && (y as usize) < m.height() && m.get(x as usize, y as usize)
    }

    fn disk(r: usize) -> Vec<(i64, i64)> {
        let r = r as i64;
        let mut v = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    v.push((dx, dy));
                }
            }
        }
        v
    }

    pub fn dilate(m: &BinaryMask, r: usize) -> BinaryMask {
        let se = disk(r);
        BinaryMask::from_fn(m.width(), m.height(), |x, y| {
            se.iter().any(|&(dx, dy)| at(m, x as i64 - dx, y as i64 - dy))
        })
    }

    pub fn erode(m: &BinaryMask, r: usize) -> BinaryMask {
        let se = disk(r);
        BinaryMask::from_fn(m.width(), m.height(), |x, y| {
            se.iter().all(|&(dx, dy)| at(m, x as i64 + dx, y as i64 + dy))
        })
    }

    pub fn close(m: &BinaryMask, r: usize) -> BinaryMask {
        erode(&dilate(m, r), r)
    }

    fn neighbours(eight: bool) -> Vec<(i64, i64)> {
        let mut v = vec![(1, 0), (-1, 0), (0, 1), (0, -1)];
        if eight {
            v.extend([(1, 1), (1, -1), (-1, 1), (-1, -1)]);
        }
        v
    }

    /// Depth-first fill from `seeds` over pixels where `inside` holds.
    fn reach(m: &BinaryMask, eight: bool, seeds: Vec<(usize, usize)>, inside: impl Fn(usize, usize) -> bool) -> Vec<bool> {
        let (w, h) = m.dims();
        let mut seen = vec![false; w * h];
        let mut stack: Vec<(usize, usize)> = seeds.into_iter().filter(|&(x, y)| inside(x, y)).collect();
        let nb = neighbours(eight);
        while let Some((x, y)) = stack.pop() {
            if seen[y * w + x] {
                continue;
            }
            seen[y * w + x] = true;
            for &(dx, dy) in &nb {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                    let (nx, ny) = (nx as usize, ny as usize);
                    if inside(nx, ny) && !seen[ny * w + nx] {
                        stack.push((nx, ny));
                    }
                }
            }
        }
        seen
    }

    fn border(w: usize, h: usize) -> Vec<(usize, usize)> {
        (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|&(x, y)| x == 0 || y == 0 || x + 1 == w || y + 1 == h)
            .collect()
    }

    pub fn clear_border(m: &BinaryMask) -> BinaryMask {
        let (w, h) = m.dims();
        let touched = reach(m, true, border(w, h), |x, y| m.get(x, y));
        BinaryMask::from_fn(w, h, |x, y| m.get(x, y) && !touched[y * w + x])
    }

    pub fn fill_holes(m: &BinaryMask) -> BinaryMask {
        let (w, h) = m.dims();
        let outside = reach(m, false, border(w, h), |x, y| !m.get(x, y));
        BinaryMask::from_fn(w, h, |x, y| !outside[y * w + x])
    }

    /// Union-find labeling renumbered by first raster-scan encounter.
    pub fn label(m: &BinaryMask, eight: bool) -> (Vec<u32>, usize) {
        let (w, h) = m.dims();
        let mut parent: Vec<usize> = (0..w * h).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for y in 0..h {
            for x in 0..w {
                if !m.get(x, y) {
                    continue;
                }
                for (dx, dy) in neighbours(eight) {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h && m.get(nx as usize, ny as usize) {
                        let a = find(&mut parent, y * w + x);
                        let b = find(&mut parent, ny as usize * w + nx as usize);
                        parent[a] = b;
                    }
                }
            }
        }
        let mut ids = std::collections::HashMap::new();
        let mut labels = vec![0u32; w * h];
        for i in 0..w * h {
            if m.bits()[i] {
                let root = find(&mut parent, i);
                let next = ids.len() as u32 + 1;
                labels[i] = *ids.entry(root).or_insert(next);
            }
        }
        (labels, ids.len())
    }

    /// Exhaustive search over all 256 thresholds from the textbook definition
    /// `w0·w1·(μ0−μ1)²`, compared as exact fractions; the first maximum wins.
    pub fn otsu(hist: &[u64; 256]) -> u8 {
        let mut best: Option<(u128, u128, u8)> = None;
        for t in 0..256 {
            let (mut n0, mut s0, mut n1, mut s1) = (0u128, 0u128, 0u128, 0u128);
            for (v, &c) in hist.iter().enumerate() {
                if v <= t {
                    n0 += c as u128;
                    s0 += v as u128 * c as u128;
                } else {
                    n1 += c as u128;
                    s1 += v as u128 * c as u128;
                }
            }
            if n0 == 0 || n1 == 0 {
                continue;
            }
            // w0·w1·(μ0−μ1)² ∝ (s0·n1 − s1·n0)² / (n0·n1)
            let d = (s0 * n1).abs_diff(s1 * n0);
            let (num, den) = (d * d, n0 * n1);
            if best.is_none_or(|(bn, bd, _)| num * bd > bn * den) {
                best = Some((num, den, t as u8));
            }
        }
        best.map_or_else(|| hist.iter().position(|&c| c > 0).unwrap_or(0) as u8, |b| b.2)
    }

    /// Fraction of (positive, negative) pairs ranked correctly, ties counting half.
    pub fn auc_concordance(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut num, mut pairs) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / pairs
    }
}

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: Option<String>,
}

pub struct Outcome {
    pub checks: Vec<Check>,
}

impl Outcome {
    pub fn passed(&self) -> usize {
        self.checks.iter().filter(|c| c.passed).count()
    }

    pub fn failed(&self) -> usize {
        self.checks.len() - self.passed()
    }
}

/// Random mask whose density is itself random, so sparse and dense cases both occur.
pub fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> BinaryMask {
    let p = rng.gen_range(0.05..0.95);
    BinaryMask::from_fn(w, h, |_, _| rng.gen_bool(p))
}

type CheckResult = std::result::Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> CheckResult {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn morphology_ops() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..24 {
        let m = random_mask(&mut rng, 24, 24);
        let r = case % 4 + 1;
        let se = StructuringElement::disk(r);
        ensure(dilate(&m, &se) == oracle::dilate(&m, r), || format!("dilate, case {case}"))?;
        ensure(erode(&m, &se) == oracle::erode(&m, r), || format!("erode, case {case}"))?;
        ensure(close(&m, &se) == oracle::close(&m, r), || format!("close, case {case}"))?;
        ensure(clear_border(&m) == oracle::clear_border(&m), || format!("clear_border, case {case}"))?;
        ensure(fill_holes(&m) == oracle::fill_holes(&m), || format!("fill_holes, case {case}"))?;
        for (conn, eight) in [(Connectivity::Four, false), (Connectivity::Eight, true)] {
            let lm = label_components(&m, conn);
            let (labels, n) = oracle::label(&m, eight);
            ensure(lm.labels == labels && lm.n_components == n, || format!("labels ({conn:?}), case {case}"))?;
        }
    }
    Ok(())
}

fn otsu_exhaustive() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..100 {
        let mut hist = [0u64; 256];
        let bins = rng.gen_range(1..40);
        for _ in 0..bins {
            hist[rng.gen_range(0..256)] += rng.gen_range(1..500);
        }
        let (got, want) = (otsu_from_histogram(&hist), oracle::otsu(&hist));
        ensure(got == want, || format!("case {case}: {got} vs {want}"))?;
    }
    Ok(())
}

fn metric_identities() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..100 {
        let (a, b) = (random_mask(&mut rng, 16, 16), random_mask(&mut rng, 16, 16));
        let (d, j) = (dice(&a, &b).map_err(|e| e.to_string())?, iou(&a, &b).map_err(|e| e.to_string())?);
        ensure((d - 2.0 * j / (1.0 + j)).abs() <= 1e-12, || format!("dice/iou, case {case}"))?;
    }
    for case in 0..30 {
        let n = rng.gen_range(2..60);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..10) as f64) / 10.0).collect();
        let got = roc_auc(&scores, &labels).map_err(|e| e.to_string())?;
        let want = oracle::auc_concordance(&scores, &labels);
        ensure((got - want).abs() <= 1e-12, || format!("auc, case {case}: {got} vs {want}"))?;
    }
    let r = classification_report(&ConfusionCounts { tp: 2, fp: 1, fn_: 1, tn: 6 }).map_err(|e| e.to_string())?;
    ensure(r.accuracy == 0.8 && r.precision == 2.0 / 3.0 && r.recall == 2.0 / 3.0, || format!("{r:?}"))
}

fn small_spec() -> NetworkSpec {
    NetworkSpec {
        input: [1, 6, 6],
        task: Task::Classification,
        layers: vec![
            LayerSpec::Conv { filters: 2, kernel: 3, stride: 1, padding: Padding::Same },
            LayerSpec::Relu,
            LayerSpec::Maxpool,
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 1 },
            LayerSpec::Sigmoid,
        ],
    }
}

fn network_gradients() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = Network::init(small_spec(), &mut rng).map_err(|e| e.to_string())?;
    let x = Tensor4::from_vec(2, 1, 6, 6, (0..72).map(|_| rng.gen_range(-1.0..1.0)).collect()).map_err(|e| e.to_string())?;
    let y = [1.0, 0.0];
    let mut step_rng = rand::rngs::mock::StepRng::new(0, 0);
    let loss = |n: &Network| -> f64 {
        let mut r = rand::rngs::mock::StepRng::new(0, 0);
        let pass = n.forward(&x, Mode::Train, &mut r, None).expect("forward");
        bce_loss(&pass.output().data, &y).expect("loss")
    };
    let pass = net.forward(&x, Mode::Train, &mut step_rng, None).map_err(|e| e.to_string())?;
    let top = net.spec().layers.len() - 2;
    let z = &pass.activations[top + 1];
    let dz = Tensor4::from_vec(z.n, z.c, z.h, z.w, bce_logit_grad(&pass.output().data, &y)).map_err(|e| e.to_string())?;
    let grads = net.backward(&pass, top, dz).map_err(|e| e.to_string())?;
    let h = 1e-5;
    for layer in 0..net.params().len() {
        for p in 0..net.params()[layer].len() {
            for i in 0..net.params()[layer][p].data.len() {
                let mut probe = net.clone();
                let v = probe.params()[layer][p].data[i];
                probe.params_mut()[layer][p].data[i] = v + h;
                let up = loss(&probe);
                probe.params_mut()[layer][p].data[i] = v - h;
                let numeric = (up - loss(&probe)) / (2.0 * h);
                let analytic = grads.params[layer][p][i];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                ensure(rel <= 1e-4, || format!("layer {layer} param {p}[{i}]: {analytic} vs {numeric}"))?;
            }
        }
    }
    Ok(())
}

fn bundle_round_trip() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = Network::init(small_spec(), &mut rng).map_err(|e| e.to_string())?;
    let bundle = ModelBundle::from_network(&net, TrainMeta::default());
    let bytes = bundle.to_bytes().map_err(|e| e.to_string())?;
    let back = ModelBundle::from_bytes(&bytes).map_err(|e| e.to_string())?;
    ensure(back.to_bytes().map_err(|e| e.to_string())? == bytes, || "save-load-save changed bytes".into())?;
    let x = Tensor4::from_vec(1, 1, 6, 6, (0..36).map(|i| i as f64 / 36.0).collect()).map_err(|e| e.to_string())?;
    let a = crate::tinynet::predict(&bundle, &x).map_err(|e| e.to_string())?;
    let b = crate::tinynet::predict(&back, &x).map_err(|e| e.to_string())?;
    ensure(a.data == b.data, || "predictions differ after reload".into())
}

fn fold_partition() -> CheckResult {
    let labels: Vec<Label> = (0..37).map(|i| if i % 3 == 0 { Label::Cancerous } else { Label::Normal }).collect();
    let f = make_folds(&labels, 5, 9).map_err(|e| e.to_string())?;
    let mut seen = vec![0; labels.len()];
    for k in 0..5 {
        for i in f.test_indices(k) {
            seen[i] += 1;
        }
    }
    ensure(seen.iter().all(|&s| s == 1), || "folds do not partition the samples".into())
}

fn clahe_constant() -> CheckResult {
    let out = clahe(&Raster::filled(40, 40, 90), &ClaheParams::default()).map_err(|e| e.to_string())?;
    ensure(out.data().iter().all(|&v| v == out.data()[0]), || "constant image changed shape".into())
}

fn phantom_lungs() -> CheckResult {
    for seed in 0..3 {
        let p = chest_phantom(128, Label::Cancerous, seed).map_err(|e| e.to_string())?;
        let lm = generate_lung_mask(&p.image, &LungMaskConfig::default()).map_err(|e| e.to_string())?;
        let n = label_components(&lm.mask, Connectivity::Eight).n_components;
        ensure(n == 2, || format!("seed {seed}: {n} components"))?;
        let d = dice(&lm.mask, &p.truth).map_err(|e| e.to_string())?;
        ensure(d >= 0.9, || format!("seed {seed}: dice {d:.4}"))?;
    }
    Ok(())
}

/// Runs every check; a check never panics the suite.
pub fn run_all() -> Outcome {
    let table: [(&'static str, fn() -> CheckResult); 8] = [
        ("morphology kernels vs naive oracles", morphology_ops),
        ("otsu vs exhaustive search", otsu_exhaustive),
        ("metric identities and AUC concordance", metric_identities),
        ("network gradients vs finite differences", network_gradients),
        ("LKMB round trip", bundle_round_trip),
        ("stratified folds partition", fold_partition),
        ("CLAHE keeps constant images constant", clahe_constant),
        ("phantom lung masks", phantom_lungs),
    ];
    let checks = table
        .into_iter()
        .map(|(name, f)| {
            let r = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
            Check { name, passed: r.is_ok(), detail: r.err() }
        })
        .collect();
    Outcome { checks }
}

#[cfg(test)]
mod tests {
    #[test]
    fn selftest_passes() {
        let o = super::run_all();
        for c in &o.checks {
            assert!(c.passed, "{}: {:?}", c.name, c.detail);
        }
    }
}
