//! End-to-end training, out-of-fold stacking and reporting on small synthetic sets.

use std::fs;

use icesar::data::{impute_incidence, split_train_validation, synth_dataset, SampleSet, SynthConfig};
use icesar::ensemble::{fit_stacker, oof_predictions, stacker_oof, GbmMember, Member, PredictionSet};
use icesar::gbm::GbmParams;
use icesar::harness::{learning_curve, metric_accuracy, report, CurveConfig, ReportInputs};
use icesar::image_ops::AugmentationPolicy;
use icesar::nn::{build_classifier_with, fit, loss_logloss, predict, ClassifierSpec, History, TrainConfig};
use icesar::Result;

const SIDE: usize = 32;

fn synth(n: usize, seed: u64) -> SampleSet {
    synth_dataset(&SynthConfig::new(n, 0.5, seed).with_size(SIDE)).unwrap()
}

fn labels(set: &SampleSet) -> Vec<f64> {
    set.labels().unwrap().iter().map(|l| l.as_f64()).collect()
}

fn small_spec() -> ClassifierSpec {
    ClassifierSpec { conv_widths: [4, 8, 8], dense_units: 8, ..ClassifierSpec::sized(3, SIDE, SIDE) }
}

fn train_twice(cfg: &TrainConfig) -> (History, History) {
    let set = synth(10, 3);
    let (train, val) = split_train_validation(&set, 0.2, 0).unwrap();
    assert_eq!(train.len(), 8);
    let run = || {
        let net = build_classifier_with(&small_spec(), 5).unwrap();
        fit(&net, &train, &val, cfg).unwrap().1
    };
    (run(), run())
}

#[test]
fn short_run_records_finite_epochs_deterministically() {
    let cfg = TrainConfig { epochs: 2, batch_size: 4, ..TrainConfig::default() };
    let (a, b) = train_twice(&cfg);
    assert_eq!(a.len(), 2);
    for e in &a.epochs {
        assert!(e.train_loss.is_finite() && e.val_loss.is_finite());
        assert!((0.0..=1.0).contains(&e.train_acc) && (0.0..=1.0).contains(&e.val_acc));
    }
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn reference_network_learns_synthetic_task() {
    let set = synth(400, 7);
    let (train, val) = split_train_validation(&set, 0.2, 7).unwrap();
    let net = build_classifier_with(&ClassifierSpec::sized(3, SIDE, SIDE), 7).unwrap();
    let cfg = TrainConfig { epochs: 8, seed: 7, ..TrainConfig::default() };
    let (net, history) = fit(&net, &train, &val, &cfg).unwrap();
    let acc = metric_accuracy(&predict(&net, &val).unwrap(), &labels(&val), 0.5).unwrap();
    assert!(acc >= 0.9, "validation accuracy {acc}");
    for w in history.epochs.windows(2) {
        assert!(w[1].lr <= w[0].lr);
    }
}

#[test]
fn full_fraction_curve_matches_plain_fit() {
    let set = synth(120, 9);
    let train_cfg = TrainConfig { epochs: 2, batch_size: 16, ..TrainConfig::default() };
    let cfg = CurveConfig {
        train: train_cfg.clone(),
        spec: small_spec(),
        policy: AugmentationPolicy::default(),
        augment_multiplier: 1,
        val_ratio: 0.2,
        seed: 4,
    };
    let rows = learning_curve(&set, &[0.5, 1.0], &cfg).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].n_samples < rows[1].n_samples);

    let (base, _) = impute_incidence(&set).unwrap();
    let (train, val) = split_train_validation(&base, 0.2, 4).unwrap();
    let net = build_classifier_with(&small_spec(), 4).unwrap();
    let (net, _) = fit(&net, &train, &val, &TrainConfig { seed: 4, ..train_cfg }).unwrap();
    let last = &rows[1];
    assert_eq!(last.n_samples, train.len());
    assert_eq!(last.train_loss, loss_logloss(&predict(&net, &train).unwrap(), &labels(&train)));
    assert_eq!(last.val_loss, loss_logloss(&predict(&net, &val).unwrap(), &labels(&val)));
    assert_eq!(last.gap, last.val_loss - last.train_loss);
}

/// Predicts each held-out sample's own label.
struct Cheat;

impl Member for Cheat {
    fn name(&self) -> String {
        "cheat".into()
    }

    fn fit_predict(&self, _train: &SampleSet, held_out: &SampleSet, _seed: u64) -> Result<Vec<f64>> {
        Ok(held_out.labels()?.iter().map(|l| l.as_f64()).collect())
    }
}

fn gbm_member() -> GbmMember {
    GbmMember { params: GbmParams { n_trees: 30, max_depth: 2, ..GbmParams::default() } }
}

#[test]
fn out_of_fold_rows_cover_every_sample_once() {
    let set = synth(100, 11);
    let oof = oof_predictions(&set, &[&Cheat, &gbm_member()], 5, 1).unwrap();
    assert_eq!(oof.ids, set.ids());
    assert_eq!(oof.columns[0], labels(&set));
    assert_eq!(oof.labels, labels(&set));
    for f in 0..5 {
        assert_eq!(oof.folds.iter().filter(|&&x| x == f).count(), 20);
    }
    assert!(oof.columns[1].iter().all(|p| (0.0..=1.0).contains(p)));
    let again = oof_predictions(&set, &[&Cheat, &gbm_member()], 5, 1).unwrap();
    assert_eq!(again, oof);
}

#[test]
fn stacker_is_no_worse_than_its_best_member() {
    let set = synth(100, 12);
    let shallow = GbmMember { params: GbmParams { n_trees: 5, max_depth: 1, ..GbmParams::default() } };
    let oof = oof_predictions(&set, &[&gbm_member(), &shallow], 5, 2).unwrap();
    let stacker = fit_stacker(&oof).unwrap();
    let stacked = loss_logloss(stacker_oof(&stacker, &oof).unwrap().probs(), &oof.labels);
    let best = oof.member_logloss().into_iter().fold(f64::INFINITY, f64::min);
    assert!(stacked <= best + 1e-6, "stacked {stacked} best member {best}");
}

#[test]
fn report_is_deterministic_and_recomputes_logloss() {
    let set = synth(30, 13);
    let probs: Vec<f64> = (0..set.len()).map(|i| (i as f64 + 0.5) / set.len() as f64).collect();
    let preds = PredictionSet::new(set.ids(), probs.clone()).unwrap();
    let ids = vec![set.ids()[0].clone()];
    let inputs = ReportInputs {
        predictions: &preds,
        samples: &set,
        history: None,
        config: serde_json::json!({"seed": 1}),
        composite_ids: &ids,
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let written = report(&inputs, a.path()).unwrap();
    report(&inputs, b.path()).unwrap();
    assert!(!written.is_empty());
    for path in &written {
        let name = path.file_name().unwrap();
        assert_eq!(fs::read(path).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name:?}");
    }
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(a.path().join("metrics.json")).unwrap()).unwrap();
    let want = loss_logloss(&probs, &labels(&set));
    assert!((metrics["logloss"].as_f64().unwrap() - want).abs() < 1e-12);
}
