//! Property tests for the invariants of raster I/O, morphology, metrics,
//! the classical heads and the network engine.

mod common;

use lungkit::classic::{
    fit_gradient_boosting, fit_random_forest, fit_svm_smo, gamma_scale, BoostParams, ClassicHead, HeadConfig, HeadKind,
    Kernel, SmoParams, TreeParams,
};
use lungkit::metrics::{dice, iou, roc_auc};
use lungkit::morphoseg::{
    clear_border, close, dilate, erode, generate_lung_mask, label_components, Connectivity, LungMaskConfig,
    StructuringElement,
};
use lungkit::phantom::chest_phantom;
use lungkit::raster::{decode_image, encode_pgm, load_manifest, luma, save_image};
use lungkit::tinynet::ops::{dropout_forward, Mode};
use lungkit::tinynet::{build_mini_cnn, Tensor4};
use lungkit::{BinaryMask, Label, Raster};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mask_strategy(max: usize) -> impl Strategy<Value = BinaryMask> {
    (1..=max, 1..=max).prop_flat_map(|(w, h)| {
        proptest::collection::vec(any::<bool>(), w * h).prop_map(move |bits| BinaryMask::new(w, h, bits).unwrap())
    })
}

fn mask_pair(max: usize) -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1..=max, 1..=max).prop_flat_map(|(w, h)| {
        (
            proptest::collection::vec(any::<bool>(), w * h),
            proptest::collection::vec(any::<bool>(), w * h),
        )
            .prop_map(move |(a, b)| (BinaryMask::new(w, h, a).unwrap(), BinaryMask::new(w, h, b).unwrap()))
    })
}

fn union(a: &BinaryMask, b: &BinaryMask) -> BinaryMask {
    BinaryMask::new(a.width(), a.height(), a.bits().iter().zip(b.bits()).map(|(x, y)| *x || *y).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pgm_round_trip(w in 1usize..40, h in 1usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = Raster::from_fn(w, h, |_, _| rng.gen());
        prop_assert_eq!(decode_image(&encode_pgm(&r)).unwrap(), r);
    }

    #[test]
    fn luma_is_identity_on_gray(v in any::<u8>()) {
        prop_assert_eq!(luma(v, v, v), v);
    }

    #[test]
    fn morphology_is_monotone((a, b) in mask_pair(24), r in 0usize..5) {
        let big = union(&a, &b);
        let se = StructuringElement::disk(r);
        prop_assert!(dilate(&a, &se).is_subset_of(&dilate(&big, &se)));
        prop_assert!(erode(&a, &se).is_subset_of(&erode(&big, &se)));
    }

    #[test]
    fn closing_is_idempotent(m in mask_strategy(24), r in 0usize..5) {
        let se = StructuringElement::disk(r);
        let once = close(&m, &se);
        prop_assert_eq!(close(&once, &se), once);
    }

    #[test]
    fn clear_border_leaves_no_border_component(m in mask_strategy(24)) {
        let c = clear_border(&m);
        let (w, h) = c.dims();
        for y in 0..h {
            for x in 0..w {
                if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                    prop_assert!(!c.get(x, y));
                }
            }
        }
        prop_assert!(c.is_subset_of(&m));
    }

    #[test]
    fn dice_iou_identity_and_symmetry((a, b) in mask_pair(20)) {
        let (d, j) = (dice(&a, &b).unwrap(), iou(&a, &b).unwrap());
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() <= 1e-12);
        prop_assert_eq!(d, dice(&b, &a).unwrap());
        prop_assert_eq!(j, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&j));
    }

    #[test]
    fn auc_negation_and_range(seed in any::<u64>(), n in 2usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 * 0.25).collect();
        let auc = roc_auc(&scores, &labels).unwrap();
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((roc_auc(&neg, &labels).unwrap() - (1.0 - auc)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&auc));
        prop_assert!((auc - common::auc(&scores, &labels)).abs() <= 1e-12);
    }
}

#[test]
fn label_count_matches_flood_fill_on_500_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..500 {
        let (w, h) = (rng.gen_range(1..40), rng.gen_range(1..40));
        let m = common::random_mask(&mut rng, w, h);
        for (conn, eight) in [(Connectivity::Four, false), (Connectivity::Eight, true)] {
            assert_eq!(label_components(&m, conn).n_components, common::label(&m, eight).1, "case {case}");
        }
    }
}

#[test]
fn lung_mask_is_deterministic() {
    let p = chest_phantom(128, Label::Cancerous, 21).unwrap();
    let cfg = LungMaskConfig::default();
    let a = generate_lung_mask(&p.image, &cfg).unwrap();
    let b = generate_lung_mask(&p.image, &cfg).unwrap();
    assert_eq!(a.mask, b.mask);
    assert_eq!(a.masked, b.masked);
}

#[test]
fn manifest_order_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    for (sub, names) in [("normal", ["b", "a", "c"]), ("cancerous", ["z", "y", "x"])] {
        std::fs::create_dir_all(dir.path().join(sub)).unwrap();
        for n in names {
            save_image(&Raster::filled(2, 2, 1), dir.path().join(sub).join(format!("{n}.pgm"))).unwrap();
        }
    }
    let a = load_manifest(dir.path()).unwrap();
    let b = load_manifest(dir.path()).unwrap();
    assert_eq!(a, b);
    let names: Vec<String> = a.entries().iter().map(|e| e.path.file_stem().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["x", "y", "z", "a", "b", "c"]);
}

#[test]
fn inverted_dropout_preserves_expectation() {
    let x = Tensor4::from_vec(1, 1, 1, 100_000, vec![1.0; 100_000]).unwrap();
    let (y, _) = dropout_forward(&x, 0.5, Mode::Train, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mean = y.data.iter().sum::<f64>() / y.data.len() as f64;
    assert!((mean - 1.0).abs() <= 0.02, "mean {mean}");
}

#[test]
fn cnn_listing_matches_published_architecture() {
    let spec = build_mini_cnn([1, 128, 128], &[32, 64, 128, 256], 256, false).unwrap();
    let mut expected = vec!["Input: (128, 128, 1)".to_string()];
    for f in [32, 64, 128, 256] {
        expected.push(format!("Conv2D ({f} filters, 3x3, ReLU)"));
        expected.push("MaxPooling2D (2x2)".into());
        expected.push("Dropout (0.3)".into());
    }
    for row in ["Flatten", "Dense (256 neurons, ReLU)", "Dropout (0.5)", "Dense (1 neuron, Sigmoid)"] {
        expected.push(row.into());
    }
    assert_eq!(spec.describe(), expected);
}

fn noisy_two_class(seed: u64, n: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y: Vec<bool> = (0..n).map(|i| i % 2 == 1).collect();
    let x = y
        .iter()
        .map(|&l| (0..dim).map(|d| if l && d == 0 { 1.5 } else { 0.0 } + rng.gen_range(-1.0..1.0)).collect())
        .collect();
    (x, y)
}

#[test]
fn classic_training_is_deterministic() {
    let (x, y) = noisy_two_class(4, 40, 3);
    let cfg = HeadConfig { rf_trees: 15, gb_stages: 20, ..HeadConfig::default() };
    for kind in [HeadKind::Svm, HeadKind::Rf, HeadKind::Gb] {
        assert_eq!(ClassicHead::fit(&x, &y, kind, &cfg, 9).unwrap(), ClassicHead::fit(&x, &y, kind, &cfg, 9).unwrap());
    }
    let p = TreeParams { max_depth: Some(4), min_leaf: 1 };
    assert_eq!(fit_random_forest(&x, &y, 7, p, 1).unwrap(), fit_random_forest(&x, &y, 7, p, 1).unwrap());
}

#[test]
fn svm_feasibility_and_kkt() {
    for seed in 0..20 {
        let (x, y) = noisy_two_class(seed, 60, 2);
        let params = SmoParams { c: 1.0, ..SmoParams::default() };
        let fit = fit_svm_smo(&x, &y, Kernel::Rbf { gamma: gamma_scale(&x) }, params).unwrap();
        let balance: f64 = fit.alpha.iter().zip(&y).map(|(a, &l)| if l { *a } else { -*a }).sum();
        assert!(balance.abs() <= 1e-6, "seed {seed}: sum alpha*y = {balance}");
        assert!(fit.alpha.iter().all(|&a| (0.0..=params.c).contains(&a)));
        // post-hoc KKT on support vectors: free ones sit on the margin, bound ones inside it
        for (i, &a) in fit.alpha.iter().enumerate() {
            if a <= 0.0 {
                continue;
            }
            let margin = if y[i] { 1.0 } else { -1.0 } * fit.model.decision(&x[i]);
            if a < params.c {
                assert!((margin - 1.0).abs() <= params.tol, "seed {seed} sv {i}: margin {margin}");
            } else {
                assert!(margin <= 1.0 + params.tol, "seed {seed} bound sv {i}: margin {margin}");
            }
        }
    }
}

#[test]
fn boosting_deviance_is_non_increasing() {
    for seed in 0..5 {
        let (x, y) = noisy_two_class(seed + 20, 50, 3);
        let (_, dev) = fit_gradient_boosting(&x, &y, BoostParams { n_stages: 40, ..BoostParams::default() }).unwrap();
        for w in dev.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "seed {seed}: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn head_labels_survive_affine_rescaling() {
    let (x, y) = noisy_two_class(31, 40, 3);
    let scaled: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0] * 4.0 - 7.0, r[1], r[2] * 0.25 + 3.0]).collect();
    let cfg = HeadConfig { rf_trees: 15, gb_stages: 20, ..HeadConfig::default() };
    for kind in [HeadKind::Svm, HeadKind::Rf, HeadKind::Gb] {
        let a = ClassicHead::fit(&x, &y, kind, &cfg, 5).unwrap().predict(&x).unwrap().0;
        let b = ClassicHead::fit(&scaled, &y, kind, &cfg, 5).unwrap().predict(&scaled).unwrap().0;
        assert_eq!(a, b, "{kind:?}");
    }
}
