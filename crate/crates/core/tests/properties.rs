//! Randomized invariants.

use icesar::data::{
    parse_samples_sized, serialize_samples, split_train_validation, stratified_folds, ImagePlane, Label, Provenance, SampleSet,
    SarSample,
};
use icesar::ensemble::{blend, BlendMode, PredictionSet};
use icesar::features::{band_stats, correlation_matrix, FeatureVector, N_FEATURES};
use icesar::gbm::{deserialize_gbm, fit_gbm, predict_gbm, serialize_gbm, GbmParams};
use icesar::harness::{metric_accuracy, metric_confusion, read_submission, write_submission};
use icesar::image_ops::{laplacian, reflect, rotate, shift, sobel, GradientAxis, ReflectAxis};
use icesar::nn::{adam_step, loss_logloss, plateau_schedule, AdamConfig, AdamState, PlateauConfig};
use proptest::prelude::*;

fn plane(max_side: usize) -> impl Strategy<Value = ImagePlane> {
    (3..=max_side, 3..=max_side).prop_flat_map(|(h, w)| {
        prop::collection::vec(-50.0..10.0f64, h * w).prop_map(move |v| ImagePlane::new(h, w, v).unwrap())
    })
}

fn square_plane(max_side: usize) -> impl Strategy<Value = ImagePlane> {
    (3..=max_side).prop_flat_map(|n| {
        prop::collection::vec(-50.0..10.0f64, n * n).prop_map(move |v| ImagePlane::new(n, n, v).unwrap())
    })
}

fn labels(min: usize, max: usize) -> impl Strategy<Value = Vec<Label>> {
    prop::collection::vec(prop::bool::ANY, min..=max).prop_filter("both classes", |v| {
        v.iter().any(|&b| b) && v.iter().any(|&b| !b)
    })
    .prop_map(|v| v.into_iter().map(|b| if b { Label::Iceberg } else { Label::Ship }).collect())
}

fn sample_set(labels: &[Label], side: usize) -> SampleSet {
    let samples = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let p = ImagePlane::constant(side, side, -(i as f64)).unwrap();
            SarSample::new(format!("s{i}"), p.clone(), p, Some(30.0 + i as f64 % 10.0), Some(l)).unwrap()
        })
        .collect();
    SampleSet::new(samples, Provenance::Synthetic).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn four_quarter_turns_are_identity(p in square_plane(12)) {
        let mut q = p.clone();
        for _ in 0..4 {
            q = rotate(&q, 90.0).unwrap();
        }
        prop_assert_eq!(q, p);
    }

    #[test]
    fn reflections_are_involutions(p in plane(12)) {
        for axis in [ReflectAxis::Horizontal, ReflectAxis::Vertical] {
            prop_assert_eq!(reflect(&reflect(&p, axis), axis), p.clone());
        }
    }

    #[test]
    fn zero_shift_is_identity(p in plane(12)) {
        prop_assert_eq!(shift(&p, 0, 0).unwrap(), p);
    }

    #[test]
    fn derivatives_of_constant_vanish(h in 3usize..12, w in 3usize..12, c in -40.0..10.0f64) {
        let p = ImagePlane::constant(h, w, c).unwrap();
        for q in [sobel(&p, GradientAxis::X), sobel(&p, GradientAxis::Y), laplacian(&p)] {
            prop_assert!(q.values().iter().all(|&v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn laplacian_of_row_square_is_two_inside(n in 3usize..14, r0 in -5.0..5.0f64, a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let quad = laplacian(&ImagePlane::from_fn(n, n, |r, _| (r as f64 - r0).powi(2)).unwrap());
        let ramp = laplacian(&ImagePlane::from_fn(n, n, |r, c| a * r as f64 + b * c as f64).unwrap());
        for r in 1..n - 1 {
            for c in 1..n - 1 {
                prop_assert!((quad.get(r, c) - 2.0).abs() < 1e-9);
                prop_assert!(ramp.get(r, c).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn band_stats_are_ordered(p in plane(10)) {
        let s = band_stats(&p);
        prop_assert!(s.min <= s.q1 && s.q1 <= s.median && s.median <= s.q3 && s.q3 <= s.max);
        prop_assert!(s.min <= s.mean && s.mean <= s.max);
        prop_assert!(s.std >= 0.0);
    }

    #[test]
    fn correlation_is_symmetric_and_bounded(
        rows in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, N_FEATURES), 2..20),
        fields in prop::collection::vec(0..N_FEATURES, 1..6),
    ) {
        let vs: Vec<FeatureVector> = rows
            .iter()
            .map(|r| FeatureVector { values: r.clone().try_into().unwrap() })
            .collect();
        let m = correlation_matrix(&vs, &fields).unwrap();
        for i in 0..fields.len() {
            prop_assert_eq!(m[i][i], 1.0);
            for j in 0..fields.len() {
                prop_assert_eq!(m[i][j], m[j][i]);
                prop_assert!((-1.0..=1.0).contains(&m[i][j]));
            }
        }
    }

    #[test]
    fn split_partitions_and_stratifies(ls in labels(10, 200), seed in any::<u64>()) {
        let set = sample_set(&ls, 3);
        let (train, val) = split_train_validation(&set, 0.2, seed).unwrap();
        prop_assert_eq!(train.len() + val.len(), set.len());
        let mut ids: Vec<String> = train.ids().into_iter().chain(val.ids()).collect();
        ids.sort();
        let mut want = set.ids();
        want.sort();
        prop_assert_eq!(ids, want);
        let [ships, ice] = set.label_counts();
        let [val_ships, val_ice] = val.label_counts();
        prop_assert!((val_ice as f64 - 0.2 * ice as f64).abs() <= 1.0);
        prop_assert!((val_ships as f64 - 0.2 * ships as f64).abs() <= 1.0);
    }

    #[test]
    fn folds_cover_and_balance(ls in labels(10, 200), k in 2usize..8, seed in any::<u64>()) {
        let folds = stratified_folds(&ls, k, seed).unwrap();
        let mut sizes = vec![0usize; k];
        let mut ice = vec![0usize; k];
        for (&f, &l) in folds.iter().zip(&ls) {
            prop_assert!(f < k);
            sizes[f] += 1;
            ice[f] += (l == Label::Iceberg) as usize;
        }
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert!(ice.iter().max().unwrap() - ice.iter().min().unwrap() <= 1);
        prop_assert_eq!(folds, stratified_folds(&ls, k, seed).unwrap());
    }

    #[test]
    fn sample_serialization_round_trips(ls in labels(2, 8), side in 3usize..6) {
        let set = sample_set(&ls, side);
        let bytes = serialize_samples(&set).unwrap();
        let back = parse_samples_sized(&bytes, true, side).unwrap();
        prop_assert_eq!(back.samples(), set.samples());
    }

    #[test]
    fn adam_moves_against_gradient(grads in prop::collection::vec(-10.0..10.0f64, 1..20), lr in 1e-5..1e-1f64) {
        let mut params = vec![0.0; grads.len()];
        let mut state = AdamState::new(grads.len());
        adam_step(&mut params, &grads, &mut state, lr, &AdamConfig::default()).unwrap();
        for (p, g) in params.iter().zip(&grads) {
            if g.abs() > 1e-6 {
                prop_assert!(p.signum() == -g.signum());
                prop_assert!(p.abs() <= lr * (1.0 + 1e-9));
            } else {
                prop_assert!(p.abs() <= lr);
            }
        }
    }

    #[test]
    fn plateau_rate_never_rises(losses in prop::collection::vec(0.0..2.0f64, 1..60), patience in 1usize..6) {
        let cfg = PlateauConfig { patience, factor: 0.5, min_lr: 1e-4, min_delta: 1e-6 };
        let lrs = plateau_schedule(&losses, 1e-2, cfg).unwrap();
        let mut prev = 1e-2;
        for lr in lrs {
            prop_assert!(lr <= prev && lr >= cfg.min_lr);
            prev = lr;
        }
    }

    #[test]
    fn logloss_is_nonnegative(pairs in prop::collection::vec((0.0..=1.0f64, prop::bool::ANY), 1..50)) {
        let p: Vec<f64> = pairs.iter().map(|x| x.0).collect();
        let y: Vec<f64> = pairs.iter().map(|x| x.1 as u8 as f64).collect();
        let l = loss_logloss(&p, &y);
        prop_assert!(l.is_finite() && l >= 0.0);
    }

    #[test]
    fn blends_stay_within_member_range(
        cols in prop::collection::vec(prop::collection::vec(0.001..0.999f64, 5), 1..5),
    ) {
        let ids: Vec<String> = (0..5).map(|i| format!("id{i}")).collect();
        let sets: Vec<PredictionSet> = cols.iter().map(|c| PredictionSet::new(ids.clone(), c.clone()).unwrap()).collect();
        for mode in [BlendMode::Mean, BlendMode::LogitMean] {
            let b = blend(&sets, &mode).unwrap();
            for (i, &p) in b.probs().iter().enumerate() {
                let lo = cols.iter().map(|c| c[i]).fold(f64::INFINITY, f64::min);
                let hi = cols.iter().map(|c| c[i]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(p >= lo - 1e-12 && p <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn confusion_agrees_with_accuracy(pairs in prop::collection::vec((0.0..=1.0f64, prop::bool::ANY), 1..80)) {
        let p: Vec<f64> = pairs.iter().map(|x| x.0).collect();
        let y: Vec<f64> = pairs.iter().map(|x| x.1 as u8 as f64).collect();
        let cm = metric_confusion(&p, &y, 0.5).unwrap();
        prop_assert_eq!(cm.n(), p.len());
        let acc = metric_accuracy(&p, &y, 0.5).unwrap();
        prop_assert!(((cm.tp + cm.tn) as f64 / cm.n() as f64 - acc).abs() < 1e-15);
    }

    #[test]
    fn submission_round_trips(probs in prop::collection::vec(0.0..=1.0f64, 1..30)) {
        let ids: Vec<String> = (0..probs.len()).map(|i| format!("x{i:03}")).collect();
        let preds = PredictionSet::new(ids, probs).unwrap();
        let mut buf = Vec::new();
        write_submission(&preds, &mut buf).unwrap();
        let back = read_submission(&buf[..]).unwrap();
        prop_assert_eq!(back, preds);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn boosting_loss_never_increases(
        rows in prop::collection::vec((prop::collection::vec(-3.0..3.0f64, 3), prop::bool::ANY), 4..60)
            .prop_filter("both classes", |r| r.iter().any(|x| x.1) && r.iter().any(|x| !x.1)),
        depth in 1usize..4,
        shrinkage in 0.05..1.0f64,
    ) {
        let x: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.1 as u8 as f64).collect();
        let params = GbmParams { n_trees: 20, max_depth: depth, shrinkage, min_samples_leaf: 1, seed: 0 };
        let fit = fit_gbm(&x, &y, &params).unwrap();
        for w in fit.round_logloss.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
        }
        let back = deserialize_gbm(&serialize_gbm(&fit.model).unwrap()).unwrap();
        prop_assert_eq!(predict_gbm(&back, &x).unwrap(), predict_gbm(&fit.model, &x).unwrap());
    }
}
