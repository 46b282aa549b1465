use serde::{Deserialize, Serialize};

pub const PROB_EPS: f64 = 1e-15;

/// Mean binary cross-entropy with probabilities clamped to `[1e-15, 1 - 1e-15]`.
pub fn loss_logloss(p: &[f64], y: &[f64]) -> f64 {
    assert_eq!(p.len(), y.len(), "prediction/label length mismatch");
    assert!(!p.is_empty(), "logloss of an empty set");
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let q = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
        })
        .sum();
    total / p.len() as f64
}

pub fn loss_mse(out: &[f64], target: &[f64]) -> f64 {
    assert_eq!(out.len(), target.len());
    out.iter().zip(target).map(|(o, t)| (o - t) * (o - t)).sum::<f64>() / out.len() as f64
}

/// Objective a network is trained against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Binary cross-entropy on a probability output.
    LogLoss,
    /// Mean squared error against a same-shaped target.
    Mse,
}

impl LossKind {
    pub fn value(self, out: &[f64], target: &[f64]) -> f64 {
        match self {
            LossKind::LogLoss => loss_logloss(out, target),
            LossKind::Mse => loss_mse(out, target),
        }
    }

    /// Derivative of the mean loss with respect to each output value.
    pub fn gradient(self, out: &[f64], target: &[f64]) -> Vec<f64> {
        let n = out.len() as f64;
        match self {
            LossKind::LogLoss => out
                .iter()
                .zip(target)
                .map(|(&p, &y)| {
                    let q = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                    (-y / q + (1.0 - y) / (1.0 - q)) / n
                })
                .collect(),
            LossKind::Mse => out.iter().zip(target).map(|(o, t)| 2.0 * (o - t) / n).collect(),
        }
    }
}
