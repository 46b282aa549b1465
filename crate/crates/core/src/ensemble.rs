//! Out-of-fold predictions, blending and a logistic stacker over member
//! logits.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{apply_imputation, impute_incidence, split_train_validation, stratified_folds, Label, SampleSet};
use crate::error::{Error, Result};
use crate::features::feature_rows;
use crate::gbm::{fit_gbm, predict_gbm, sigmoid, GbmParams};
use crate::nn::{build_classifier_with, fit, loss_logloss, predict, ClassifierSpec, TrainConfig, PROB_EPS};

/// Iceberg probabilities keyed by sample id, in a fixed order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    ids: Vec<String>,
    probs: Vec<f64>,
}

impl PredictionSet {
    pub fn new(ids: Vec<String>, probs: Vec<f64>) -> Result<Self> {
        if ids.len() != probs.len() {
            return Err(Error::Dimension(format!("{} ids vs {} probabilities", ids.len(), probs.len())));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::NonFinite(format!("probability {p} outside [0, 1]")));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::DuplicateId(dup.clone()));
        }
        Ok(Self { ids, probs })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.ids.iter().map(String::as_str).zip(self.probs.iter().copied())
    }

    fn check_aligned(&self, other: &PredictionSet) -> Result<()> {
        if self.ids != other.ids {
            return Err(Error::invalid("prediction sets cover different ids"));
        }
        Ok(())
    }
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (p / (1.0 - p)).ln()
}

// ---------------------------------------------------------------------------
// Members
// ---------------------------------------------------------------------------

/// A model recipe that can be retrained on each fold.
pub trait Member {
    fn name(&self) -> String;

    /// Trains on `train` and returns probabilities for every sample of
    /// `held_out`, in order.
    fn fit_predict(&self, train: &SampleSet, held_out: &SampleSet, seed: u64) -> Result<Vec<f64>>;
}

/// Boosted trees on the per-band feature vectors. Missing angles are filled
/// with the training fold's mean.
#[derive(Clone, Debug, PartialEq)]
pub struct GbmMember {
    pub params: GbmParams,
}

impl Member for GbmMember {
    fn name(&self) -> String {
        "gbm".into()
    }

    fn fit_predict(&self, train: &SampleSet, held_out: &SampleSet, seed: u64) -> Result<Vec<f64>> {
        let (train, mean) = impute_incidence(train)?;
        let y: Vec<f64> = train.labels()?.iter().map(|l| l.as_f64()).collect();
        let params = GbmParams { seed, ..self.params.clone() };
        let fitted = fit_gbm(&feature_rows(&train, mean), &y, &params)?;
        predict_gbm(&fitted.model, &feature_rows(&apply_imputation(held_out, mean), mean))
    }
}

/// The reference CNN. Each fold's training part is split again so the best
/// epoch can be chosen on data the held-out fold never influences.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnMember {
    pub spec: ClassifierSpec,
    pub train: TrainConfig,
    pub val_ratio: f64,
}

impl Member for CnnMember {
    fn name(&self) -> String {
        "cnn".into()
    }

    fn fit_predict(&self, train: &SampleSet, held_out: &SampleSet, seed: u64) -> Result<Vec<f64>> {
        let (train, mean) = impute_incidence(train)?;
        let (inner_train, inner_val) = split_train_validation(&train, self.val_ratio, seed)?;
        let spec = ClassifierSpec { input_ch: self.train.recipe.len(), ..self.spec.clone() };
        let net = build_classifier_with(&spec, seed)?;
        let cfg = TrainConfig { seed, ..self.train.clone() };
        let (net, _) = fit(&net, &inner_train, &inner_val, &cfg)?;
        predict(&net, &apply_imputation(held_out, mean))
    }
}

// ---------------------------------------------------------------------------
// Out-of-fold predictions
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OofMatrix {
    pub ids: Vec<String>,
    pub labels: Vec<f64>,
    /// Held-out fold of each row.
    pub folds: Vec<usize>,
    pub members: Vec<String>,
    /// `columns[m][i]`: member `m`'s probability for row `i`.
    pub columns: Vec<Vec<f64>>,
}

impl OofMatrix {
    pub fn member_logloss(&self) -> Vec<f64> {
        self.columns.iter().map(|c| loss_logloss(c, &self.labels)).collect()
    }

    pub fn column(&self, m: usize) -> Result<PredictionSet> {
        PredictionSet::new(self.ids.clone(), self.columns[m].clone())
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "id,fold,is_iceberg,{}", self.members.join(","))?;
        for i in 0..self.ids.len() {
            write!(w, "{},{},{}", self.ids[i], self.folds[i], self.labels[i])?;
            for c in &self.columns {
                write!(w, ",{}", c[i])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Retrains every member on each stratified fold's complement and predicts
/// the held-out fold, so each row's entries come from models that never saw
/// it.
pub fn oof_predictions(set: &SampleSet, members: &[&dyn Member], k: usize, seed: u64) -> Result<OofMatrix> {
    if members.is_empty() {
        return Err(Error::invalid("no ensemble members"));
    }
    let labels = set.labels()?;
    let folds = stratified_folds(&labels, k, seed)?;
    let mut columns = vec![vec![f64::NAN; set.len()]; members.len()];
    for fold in 0..k {
        let held: Vec<usize> = (0..set.len()).filter(|&i| folds[i] == fold).collect();
        let rest: Vec<usize> = (0..set.len()).filter(|&i| folds[i] != fold).collect();
        for (part, name) in [(&held, "held-out"), (&rest, "training")] {
            let ice = part.iter().filter(|&&i| labels[i] == Label::Iceberg).count();
            if ice == 0 || ice == part.len() {
                return Err(Error::precondition(format!("fold {fold}: {name} part has a single class")));
            }
        }
        let (train, held_set) = (set.select(&rest), set.select(&held));
        for (m, member) in members.iter().enumerate() {
            let p = member.fit_predict(&train, &held_set, seed.wrapping_add(fold as u64))?;
            if p.len() != held.len() {
                return Err(Error::Dimension(format!("member {} returned {} predictions", member.name(), p.len())));
            }
            for (&i, v) in held.iter().zip(p) {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::NonFinite(format!("member {} predicted {v}", member.name())));
                }
                columns[m][i] = v;
            }
        }
    }
    Ok(OofMatrix {
        ids: set.ids(),
        labels: labels.iter().map(|l| l.as_f64()).collect(),
        folds,
        members: members.iter().map(|m| m.name()).collect(),
        columns,
    })
}

// ---------------------------------------------------------------------------
// Stacker
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stacker {
    pub members: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

const STACK_MAX_ITER: usize = 10_000;
const STACK_TOL: f64 = 1e-8;

/// Mean logloss of `sigmoid(z·w + b)` and its gradient (weights then bias).
fn stack_objective(z: &[Vec<f64>], y: &[f64], w: &[f64], b: f64) -> (f64, Vec<f64>) {
    let n = y.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; w.len() + 1];
    for (i, &yi) in y.iter().enumerate() {
        let s: f64 = b + z.iter().zip(w).map(|(col, wj)| col[i] * wj).sum::<f64>();
        // softplus(s) - y*s, computed stably
        loss += s.max(0.0) + (-s.abs()).exp().ln_1p() - yi * s;
        let r = sigmoid(s) - yi;
        for (g, col) in grad.iter_mut().zip(z) {
            *g += r * col[i];
        }
        grad[w.len()] += r;
    }
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

/// Logistic regression on member logits by full-batch gradient descent from
/// zero. The step starts at the inverse Lipschitz bound and adapts with a
/// backtracking (Armijo) search, so every iteration lowers the loss.
pub fn fit_stacker(oof: &OofMatrix) -> Result<Stacker> {
    let y = &oof.labels;
    if !y.contains(&0.0) || !y.contains(&1.0) {
        return Err(Error::precondition("stacker needs both classes"));
    }
    if oof.columns.iter().flatten().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("out-of-fold predictions".into()));
    }
    let z: Vec<Vec<f64>> = oof.columns.iter().map(|c| c.iter().map(|&p| logit(p)).collect()).collect();
    let n = y.len() as f64;
    let frob: f64 = z.iter().flatten().map(|v| v * v).sum::<f64>() + n;
    let mut step = 4.0 * n / frob;

    let mut w = vec![0.0; z.len()];
    let mut b = 0.0;
    let (mut loss, mut grad) = stack_objective(&z, y, &w, b);
    let mut iterations = 0;
    let norm = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>().sqrt();
    while norm(&grad) >= STACK_TOL && iterations < STACK_MAX_ITER {
        iterations += 1;
        let g2 = norm(&grad).powi(2);
        step *= 2.0;
        loop {
            let w_new: Vec<f64> = w.iter().zip(&grad).map(|(wj, gj)| wj - step * gj).collect();
            let b_new = b - step * grad[w.len()];
            let (l_new, g_new) = stack_objective(&z, y, &w_new, b_new);
            if l_new <= loss - 0.5 * step * g2 {
                (w, b, loss, grad) = (w_new, b_new, l_new, g_new);
                break;
            }
            step *= 0.5;
            if step < 1e-300 {
                break;
            }
        }
        if step < 1e-300 {
            break;
        }
    }
    Ok(Stacker { members: oof.members.clone(), weights: w, bias: b, iterations, grad_norm: norm(&grad) })
}

pub fn predict_stacker(s: &Stacker, member_preds: &[PredictionSet]) -> Result<PredictionSet> {
    if member_preds.len() != s.weights.len() {
        return Err(Error::Dimension(format!(
            "stacker has {} members, got {} prediction sets",
            s.weights.len(),
            member_preds.len()
        )));
    }
    if s.weights.iter().any(|w| !w.is_finite()) || !s.bias.is_finite() {
        return Err(Error::NonFinite("stacker parameters".into()));
    }
    let Some(first) = member_preds.first() else {
        return Err(Error::invalid("stacker has no members"));
    };
    for p in &member_preds[1..] {
        first.check_aligned(p)?;
    }
    let probs = (0..first.len())
        .map(|i| {
            let s = s.bias + member_preds.iter().zip(&s.weights).map(|(p, w)| w * logit(p.probs[i])).sum::<f64>();
            sigmoid(s)
        })
        .collect();
    PredictionSet::new(first.ids.clone(), probs)
}

/// Stacker predictions for the rows of an out-of-fold matrix.
pub fn stacker_oof(s: &Stacker, oof: &OofMatrix) -> Result<PredictionSet> {
    let cols = (0..oof.columns.len()).map(|m| oof.column(m)).collect::<Result<Vec<_>>>()?;
    predict_stacker(s, &cols)
}

// ---------------------------------------------------------------------------
// Blending
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    Mean,
    LogitMean,
    Weights(Vec<f64>),
}

pub fn blend(preds: &[PredictionSet], mode: &BlendMode) -> Result<PredictionSet> {
    let Some(first) = preds.first() else {
        return Err(Error::invalid("nothing to blend"));
    };
    for p in &preds[1..] {
        first.check_aligned(p)?;
    }
    let m = preds.len() as f64;
    let probs: Vec<f64> = match mode {
        BlendMode::Mean => (0..first.len()).map(|i| preds.iter().map(|p| p.probs[i]).sum::<f64>() / m).collect(),
        BlendMode::LogitMean => (0..first.len())
            .map(|i| sigmoid(preds.iter().map(|p| logit(p.probs[i])).sum::<f64>() / m))
            .collect(),
        BlendMode::Weights(w) => {
            if w.len() != preds.len() {
                return Err(Error::Dimension(format!("{} weights for {} members", w.len(), preds.len())));
            }
            if w.iter().any(|&v| !(v >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("blend weights must be nonnegative and sum to 1"));
            }
            (0..first.len())
                .map(|i| preds.iter().zip(w).map(|(p, wj)| wj * p.probs[i]).sum::<f64>().clamp(0.0, 1.0))
                .collect()
        }
    };
    PredictionSet::new(first.ids.clone(), probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ps(probs: &[f64]) -> PredictionSet {
        PredictionSet::new((0..probs.len()).map(|i| format!("s{i}")).collect(), probs.to_vec()).unwrap()
    }

    fn oof(columns: Vec<Vec<f64>>, labels: Vec<f64>) -> OofMatrix {
        let n = labels.len();
        OofMatrix {
            ids: (0..n).map(|i| format!("s{i}")).collect(),
            labels,
            folds: vec![0; n],
            members: (0..columns.len()).map(|m| format!("m{m}")).collect(),
            columns,
        }
    }

    #[test]
    fn blend_examples() {
        let out = blend(&[ps(&[0.2]), ps(&[0.8])], &BlendMode::Mean).unwrap();
        assert!((out.probs()[0] - 0.5).abs() < 1e-15);
        let a = ps(&[0.3, 0.7]);
        let out = blend(&[a.clone(), ps(&[0.9, 0.1])], &BlendMode::Weights(vec![1.0, 0.0])).unwrap();
        assert_eq!(out, a);
        let lm = |p: f64| blend(&[ps(&[p]), ps(&[p])], &BlendMode::LogitMean).unwrap().probs()[0];
        assert!((lm(0.5) - 0.5).abs() < 1e-15);
        assert!((lm(0.9) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn blend_errors() {
        let other = PredictionSet::new(vec!["x".into()], vec![0.5]).unwrap();
        assert!(blend(&[ps(&[0.5]), other], &BlendMode::Mean).is_err());
        assert!(blend(&[ps(&[0.5]), ps(&[0.5])], &BlendMode::Weights(vec![0.7, 0.7])).is_err());
        assert!(blend(&[ps(&[0.5]), ps(&[0.5])], &BlendMode::Weights(vec![1.5, -0.5])).is_err());
        assert!(blend(&[], &BlendMode::Mean).is_err());
    }

    #[test]
    fn stacker_hand_cases() {
        let zero = Stacker { members: vec!["a".into()], weights: vec![0.0], bias: 0.0, iterations: 0, grad_norm: 0.0 };
        assert!(predict_stacker(&zero, &[ps(&[0.1, 0.9])]).unwrap().probs().iter().all(|&p| p == 0.5));
        let id = Stacker { weights: vec![1.0], ..zero.clone() };
        let out = predict_stacker(&id, &[ps(&[0.1, 0.73])]).unwrap();
        assert!((out.probs()[0] - 0.1).abs() < 1e-12 && (out.probs()[1] - 0.73).abs() < 1e-12);
        let two = Stacker { weights: vec![1.0, 1.0], members: vec!["a".into(), "b".into()], ..zero.clone() };
        let out = predict_stacker(&two, &[ps(&[0.9]), ps(&[0.5])]).unwrap();
        assert!((out.probs()[0] - 0.9).abs() < 1e-12);
        assert!(predict_stacker(&two, &[ps(&[0.9])]).is_err());
    }

    #[test]
    fn identical_members_get_equal_weights() {
        let col = vec![0.2, 0.7, 0.6, 0.4, 0.9, 0.3];
        let y = vec![0.0, 1.0, 0.0, 0.0, 1.0, 1.0];
        let s = fit_stacker(&oof(vec![col.clone(), col], y)).unwrap();
        assert!((s.weights[0] - s.weights[1]).abs() < 1e-6);
    }

    #[test]
    fn stacker_beats_near_perfect_member() {
        let y: Vec<f64> = (0..40).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let cheat: Vec<f64> = y.iter().map(|&v| if v == 1.0 { 1.0 - 1e-4 } else { 1e-4 }).collect();
        let noise: Vec<f64> = (0..40).map(|i| 0.3 + 0.01 * (i % 7) as f64).collect();
        let m = oof(vec![noise, cheat.clone()], y.clone());
        let s = fit_stacker(&m).unwrap();
        let stacked = stacker_oof(&s, &m).unwrap();
        assert!(loss_logloss(stacked.probs(), &y) <= loss_logloss(&cheat, &y));
    }

    #[test]
    fn stacker_rejects_single_class() {
        assert!(fit_stacker(&oof(vec![vec![0.2, 0.3]], vec![1.0, 1.0])).is_err());
    }

    #[test]
    fn prediction_set_validation() {
        assert!(PredictionSet::new(vec!["a".into()], vec![1.5]).is_err());
        assert!(PredictionSet::new(vec!["a".into(), "a".into()], vec![0.1, 0.2]).is_err());
        assert!(PredictionSet::new(vec!["a".into()], vec![]).is_err());
    }
}
