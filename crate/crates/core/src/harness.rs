//! Metrics, the learning-curve experiment, submission files and run reports.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{impute_incidence, split_train_validation, stratified_subsample, SampleSet};
use crate::ensemble::PredictionSet;
use crate::error::{Error, Result};
use crate::features::{correlation_matrix, feature_names, feature_vector, write_composite_ppm, write_correlation_csv};
use crate::image_ops::{augment_dataset, AugmentationPolicy};
use crate::nn::{build_classifier_with, fit, loss_logloss, predict, ClassifierSpec, History, TrainConfig};

fn check_lengths(p: &[f64], y: &[f64]) -> Result<()> {
    if p.len() != y.len() {
        return Err(Error::Dimension(format!("{} predictions vs {} labels", p.len(), y.len())));
    }
    if p.is_empty() {
        return Err(Error::precondition("no predictions to score"));
    }
    Ok(())
}

/// Fraction of rows where `(p >= threshold) == y`.
pub fn metric_accuracy(p: &[f64], y: &[f64], threshold: f64) -> Result<f64> {
    check_lengths(p, y)?;
    let hits = p.iter().zip(y).filter(|(&p, &y)| (p >= threshold) == (y == 1.0)).count();
    Ok(hits as f64 / p.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tp: usize,
}

impl ConfusionMatrix {
    pub fn n(&self) -> usize {
        self.tn + self.fp + self.fn_ + self.tp
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.n() as f64
    }
}

/// Counts at `threshold`; a probability equal to the threshold is positive.
pub fn metric_confusion(p: &[f64], y: &[f64], threshold: f64) -> Result<ConfusionMatrix> {
    check_lengths(p, y)?;
    let mut m = ConfusionMatrix::default();
    for (&p, &y) in p.iter().zip(y) {
        match (p >= threshold, y == 1.0) {
            (true, true) => m.tp += 1,
            (true, false) => m.fp += 1,
            (false, true) => m.fn_ += 1,
            (false, false) => m.tn += 1,
        }
    }
    Ok(m)
}

/// Labels of `set` in the order of `preds`. Every prediction id must be a
/// labeled sample of `set`.
pub fn labels_for(preds: &PredictionSet, set: &SampleSet) -> Result<Vec<f64>> {
    let by_id: HashMap<&str, f64> = set
        .iter()
        .filter_map(|s| s.label.map(|l| (s.id.as_str(), l.as_f64())))
        .collect();
    preds
        .ids()
        .iter()
        .map(|id| by_id.get(id.as_str()).copied().ok_or_else(|| Error::invalid(format!("no label for id `{id}`"))))
        .collect()
}

// ---------------------------------------------------------------------------
// Learning curve
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveConfig {
    pub train: TrainConfig,
    pub spec: ClassifierSpec,
    pub policy: AugmentationPolicy,
    /// Copies per training sample after augmentation (1 keeps the originals only).
    pub augment_multiplier: usize,
    pub val_ratio: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub fraction: f64,
    pub n_samples: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub gap: f64,
}

/// Trains the classifier on growing stratified subsets of one fixed training
/// split and scores each restored model on its (unaugmented) training subset
/// and on the shared validation part.
pub fn learning_curve(base: &SampleSet, fractions: &[f64], cfg: &CurveConfig) -> Result<Vec<CurveRow>> {
    if fractions.is_empty() {
        return Err(Error::invalid("no fractions"));
    }
    if fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) || fractions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("fractions must be strictly ascending in (0, 1]"));
    }
    let (base, _) = impute_incidence(base)?;
    let (train_all, val) = split_train_validation(&base, cfg.val_ratio, cfg.seed)?;
    let y_val: Vec<f64> = val.labels()?.iter().map(|l| l.as_f64()).collect();
    let spec = ClassifierSpec { input_ch: cfg.train.recipe.len(), ..cfg.spec.clone() };
    let train_cfg = TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let sub = if fraction == 1.0 { train_all.clone() } else { stratified_subsample(&train_all, fraction, cfg.seed)? };
        if sub.len() < 2 * train_cfg.batch_size {
            return Err(Error::precondition(format!(
                "fraction {fraction} leaves {} samples, fewer than twice the batch size",
                sub.len()
            )));
        }
        let augmented = augment_dataset(&sub, &cfg.policy, cfg.augment_multiplier, cfg.seed)?;
        let net = build_classifier_with(&spec, cfg.seed)?;
        let (net, _) = fit(&net, &augmented, &val, &train_cfg)?;
        let y_sub: Vec<f64> = sub.labels()?.iter().map(|l| l.as_f64()).collect();
        let train_loss = loss_logloss(&predict(&net, &sub)?, &y_sub);
        let val_loss = loss_logloss(&predict(&net, &val)?, &y_val);
        rows.push(CurveRow { fraction, n_samples: sub.len(), train_loss, val_loss, gap: val_loss - train_loss });
    }
    Ok(rows)
}

pub fn write_curve_csv(rows: &[CurveRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "fraction,n_samples,train_loss,val_loss,gap")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.fraction, r.n_samples, r.train_loss, r.val_loss, r.gap)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Submission files
// ---------------------------------------------------------------------------

/// Shortest round-trip decimal, padded to at least six fractional digits.
pub fn format_probability(p: f64) -> String {
    let mut s = p.to_string();
    let decimals = match s.find('.') {
        Some(dot) => s.len() - dot - 1,
        None => {
            s.push('.');
            0
        }
    };
    for _ in decimals..6 {
        s.push('0');
    }
    s
}

pub fn write_submission(preds: &PredictionSet, mut w: impl Write) -> Result<()> {
    writeln!(w, "id,is_iceberg")?;
    for (id, p) in preds.iter() {
        if id.contains([',', '\n', '"']) {
            return Err(Error::Format(format!("id `{id}` cannot be written unquoted")));
        }
        writeln!(w, "{id},{}", format_probability(p))?;
    }
    Ok(())
}

pub fn read_submission(r: impl BufRead) -> Result<PredictionSet> {
    let mut lines = r.lines();
    match lines.next().transpose()? {
        Some(h) if h.trim_end() == "id,is_iceberg" => {}
        other => return Err(Error::Format(format!("bad submission header {other:?}"))),
    }
    let (mut ids, mut probs) = (Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (id, p) = line
            .split_once(',')
            .ok_or_else(|| Error::Format(format!("submission row {}: expected two fields", i + 1)))?;
        let p: f64 = p
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("submission row {}: bad probability `{p}`", i + 1)))?;
        ids.push(id.to_string());
        probs.push(p);
    }
    PredictionSet::new(ids, probs)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub logloss: f64,
    pub accuracy: f64,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tp: usize,
    pub n: usize,
    pub config: serde_json::Value,
}

pub fn compute_metrics(p: &[f64], y: &[f64], config: serde_json::Value) -> Result<Metrics> {
    let m = metric_confusion(p, y, 0.5)?;
    Ok(Metrics {
        logloss: loss_logloss(p, y),
        accuracy: metric_accuracy(p, y, 0.5)?,
        tn: m.tn,
        fp: m.fp,
        fn_: m.fn_,
        tp: m.tp,
        n: m.n(),
        config,
    })
}

pub fn metrics_json(m: &Metrics) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(m)?;
    out.push(b'\n');
    Ok(out)
}

/// Errors with the full list of paths that do not exist.
pub fn require_artifacts(paths: &[&Path]) -> Result<()> {
    let missing: Vec<String> = paths.iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::precondition(format!("missing artifacts: {}", missing.join(", "))))
    }
}

pub struct ReportInputs<'a> {
    pub predictions: &'a PredictionSet,
    /// Labeled samples covering every prediction id.
    pub samples: &'a SampleSet,
    pub history: Option<&'a History>,
    pub config: serde_json::Value,
    pub composite_ids: &'a [String],
}

/// Writes `metrics.json`, `history.csv` (when a history is given),
/// `correlation.csv` over the HH and HV statistics and one
/// `composite_<id>.ppm` per requested id. Returns the written paths.
pub fn report(inputs: &ReportInputs, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut emit = |name: String, bytes: Vec<u8>| -> Result<()> {
        let path = out_dir.join(name);
        fs::write(&path, bytes)?;
        written.push(path);
        Ok(())
    };

    let y = labels_for(inputs.predictions, inputs.samples)?;
    let metrics = compute_metrics(inputs.predictions.probs(), &y, inputs.config.clone())?;
    emit("metrics.json".into(), metrics_json(&metrics)?)?;

    if let Some(h) = inputs.history {
        let mut buf = Vec::new();
        h.write_csv(&mut buf)?;
        emit("history.csv".into(), buf)?;
    }

    let (imputed, mean) = impute_incidence(inputs.samples)?;
    let vectors: Vec<_> = imputed.iter().map(|s| feature_vector(s, mean)).collect();
    let names = feature_names();
    // Constant columns have no defined correlation and are left out.
    let fields: Vec<usize> = (0..14)
        .filter(|&f| vectors.iter().any(|v| v.values[f] != vectors[0].values[f]))
        .collect();
    let m = correlation_matrix(&vectors, &fields)?;
    let mut buf = Vec::new();
    let selected: Vec<String> = fields.iter().map(|&f| names[f].clone()).collect();
    write_correlation_csv(&selected, &m, &mut buf)?;
    emit("correlation.csv".into(), buf)?;

    for id in inputs.composite_ids {
        let s = inputs
            .samples
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| Error::invalid(format!("composite id `{id}` not in the sample set")))?;
        let mut buf = Vec::new();
        write_composite_ppm(s, &mut buf)?;
        emit(format!("composite_{id}.ppm"), buf)?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    const P: [f64; 4] = [0.9, 0.2, 0.6, 0.4];
    const Y: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

    #[test]
    fn hand_enumerated_metrics() {
        assert_eq!(metric_accuracy(&P, &Y, 0.5).unwrap(), 0.75);
        let m = metric_confusion(&P, &Y, 0.5).unwrap();
        assert_eq!(m, ConfusionMatrix { tn: 2, fp: 1, fn_: 0, tp: 1 });
        assert_eq!(m.accuracy(), 0.75);
        assert_eq!(metric_accuracy(&Y, &Y, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn ties_are_positive() {
        let y = [1.0, 0.0, 1.0, 1.0, 0.0];
        assert_eq!(metric_accuracy(&[0.5; 5], &y, 0.5).unwrap(), 0.6);
        assert_eq!(metric_confusion(&[0.5; 5], &y, 0.5).unwrap().tp, 3);
    }

    #[test]
    fn length_mismatch_is_error() {
        assert!(metric_accuracy(&P, &Y[..3], 0.5).is_err());
        assert!(metric_confusion(&[], &[], 0.5).is_err());
    }

    #[test]
    fn probability_formatting() {
        assert_eq!(format_probability(0.5), "0.500000");
        assert_eq!(format_probability(1.0), "1.000000");
        assert_eq!(format_probability(0.123456789), "0.123456789");
        assert_eq!(format_probability(1e-9), "0.000000001");
    }

    #[test]
    fn submission_round_trip() {
        let preds = PredictionSet::new(vec!["a".into(), "b".into()], vec![0.25, 0.987654321]).unwrap();
        let mut buf = Vec::new();
        write_submission(&preds, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().count(), 3);
        assert_eq!(read_submission(buf.as_slice()).unwrap(), preds);

        let empty = PredictionSet::new(vec![], vec![]).unwrap();
        let mut buf = Vec::new();
        write_submission(&empty, &mut buf).unwrap();
        assert_eq!(buf, b"id,is_iceberg\n");
    }

    #[test]
    fn missing_artifacts_are_listed() {
        let err = require_artifacts(&[Path::new("/nonexistent/a"), Path::new("/nonexistent/b")]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("/nonexistent/a") && msg.contains("/nonexistent/b"));
    }
}
