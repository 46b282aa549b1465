//! Input construction, mini-batch training with Adam and plateau scheduling,
//! and inference for classifiers and autoencoders.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::LossKind;
use super::network::{Mode, NetKind, Network};
use super::optim::{AdamConfig, PlateauConfig, PlateauScheduler};
use super::tensor::Tensor;
use crate::data::{ImagePlane, SampleSet, SarSample};
use crate::error::{Error, Result};
use crate::features::normalize_incidence;
use crate::image_ops::{gaussian_smooth, gradient_magnitude, laplacian};

/// A plane that can be fed to the network as an input channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelSource {
    Hh,
    Hv,
    /// `hh - hv` in dB.
    Diff,
    /// `(hh + hv) / 2` in dB.
    Mean,
    HhSmooth,
    HvSmooth,
    HhGradient,
    HvGradient,
    HhLaplacian,
    HvLaplacian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelRecipe {
    pub channels: Vec<ChannelSource>,
    /// Standardize both bands to 0 degrees incidence before deriving channels.
    pub normalize_incidence: bool,
}

impl Default for ChannelRecipe {
    fn default() -> Self {
        Self {
            channels: vec![ChannelSource::Hh, ChannelSource::Hv, ChannelSource::Diff],
            normalize_incidence: true,
        }
    }
}

impl ChannelRecipe {
    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    /// Raw (unstandardized) channel planes for one sample.
    pub fn planes(&self, s: &SarSample) -> Result<Vec<ImagePlane>> {
        let (hh, hv) = if self.normalize_incidence {
            let theta = s.inc_angle.ok_or_else(|| {
                Error::precondition(format!("sample `{}` has no incidence angle; impute first", s.id))
            })?;
            (normalize_incidence(&s.hh, theta)?, normalize_incidence(&s.hv, theta)?)
        } else {
            (s.hh.clone(), s.hv.clone())
        };
        let pair = |f: fn(f64, f64) -> f64| {
            ImagePlane::from_raw(
                hh.height(),
                hh.width(),
                hh.values().iter().zip(hv.values()).map(|(&a, &b)| f(a, b)).collect(),
            )
        };
        self.channels
            .iter()
            .map(|c| {
                Ok(match c {
                    ChannelSource::Hh => hh.clone(),
                    ChannelSource::Hv => hv.clone(),
                    ChannelSource::Diff => pair(|a, b| a - b),
                    ChannelSource::Mean => pair(|a, b| 0.5 * (a + b)),
                    ChannelSource::HhSmooth => gaussian_smooth(&hh, 1.0)?,
                    ChannelSource::HvSmooth => gaussian_smooth(&hv, 1.0)?,
                    ChannelSource::HhGradient => gradient_magnitude(&hh),
                    ChannelSource::HvGradient => gradient_magnitude(&hv),
                    ChannelSource::HhLaplacian => laplacian(&hh),
                    ChannelSource::HvLaplacian => laplacian(&hv),
                })
            })
            .collect()
    }

    /// `[N, channels, H, W]` tensor of raw channel values.
    pub fn tensor(&self, set: &SampleSet) -> Result<Tensor> {
        let first = set.samples().first().ok_or_else(|| Error::precondition("empty sample set"))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(set.len() * self.len() * h * w);
        for s in set {
            if (s.height(), s.width()) != (h, w) {
                return Err(Error::Dimension(format!("sample `{}` is not {h}x{w}", s.id)));
            }
            for p in self.planes(s)? {
                data.extend_from_slice(p.values());
            }
        }
        Tensor::new(vec![set.len(), self.len(), h, w], data)
    }
}

/// Channel recipe plus per-channel mean and standard deviation measured on
/// the training inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub recipe: ChannelRecipe,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Preprocessing {
    /// Population statistics per channel of an `[N, C, H, W]` tensor.
    pub fn fit(recipe: ChannelRecipe, x: &Tensor) -> Self {
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let plane = x.shape()[2] * x.shape()[3];
        let count = (n * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let values = || (0..n).flat_map(move |s| x.data()[(s * c + ch) * plane..(s * c + ch + 1) * plane].iter());
            let m = values().sum::<f64>() / count;
            let var = values().map(|v| (v - m) * (v - m)).sum::<f64>() / count;
            mean[ch] = m;
            std[ch] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Self { recipe, mean, std }
    }

    pub fn apply(&self, x: &mut Tensor) {
        let c = x.shape()[1];
        let plane = x.shape()[2] * x.shape()[3];
        for (i, chunk) in x.data_mut().chunks_exact_mut(plane).enumerate() {
            let ch = i % c;
            let (m, s) = (self.mean[ch], self.std[ch]);
            for v in chunk {
                *v = (*v - m) / s;
            }
        }
    }

    /// Builds and standardizes the network input for a sample set.
    pub fn inputs(&self, set: &SampleSet) -> Result<Tensor> {
        let mut x = self.recipe.tensor(set)?;
        self.apply(&mut x);
        Ok(x)
    }
}

fn default_epochs() -> usize {
    20
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr0: f64,
    #[serde(default)]
    pub plateau: PlateauConfig,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub recipe: ChannelRecipe,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr0: default_lr(),
            plateau: PlateauConfig::default(),
            adam: AdamConfig::default(),
            seed: 0,
            recipe: ChannelRecipe::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if self.recipe.is_empty() {
            return Err(Error::invalid("channel recipe is empty"));
        }
        PlateauScheduler::new(self.lr0, self.plateau).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training-mode loss over the epoch's mini-batches.
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    /// Rate used during this epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.val_loss).min_by(f64::total_cmp)
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "epoch,train_loss,val_loss,train_acc,val_acc,lr")?;
        for e in &self.epochs {
            writeln!(w, "{},{},{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.train_acc, e.val_acc, e.lr)?;
        }
        Ok(())
    }
}

fn accuracy(p: &[f64], y: &[f64]) -> f64 {
    let hits = p.iter().zip(y).filter(|(&p, &y)| ((p >= 0.5) as u8 as f64) == y).count();
    hits as f64 / p.len() as f64
}

const EVAL_CHUNK: usize = 64;

/// Evaluation-mode forward in fixed-size chunks.
pub fn forward_eval(net: &Network, x: &Tensor) -> Result<Tensor> {
    let n = x.batch();
    let mut data = Vec::new();
    let mut shape = vec![n];
    for start in (0..n).step_by(EVAL_CHUNK) {
        let out = net.forward(&x.slice_batch(start, (start + EVAL_CHUNK).min(n)), Mode::Eval)?;
        if shape.len() == 1 {
            shape.extend_from_slice(&out.shape()[1..]);
        }
        data.extend_from_slice(out.data());
    }
    Ok(Tensor::from_parts(shape, data))
}

/// Gradient of the mean loss over one batch.
pub fn batch_gradients(
    net: &Network,
    x: &Tensor,
    target: &[f64],
    loss: LossKind,
    mode: Mode,
) -> Result<(f64, Vec<f64>, super::network::Gradients)> {
    let (out, trace) = net.forward_traced(x, mode)?;
    if out.len() != target.len() {
        return Err(Error::Dimension(format!("{} outputs vs {} targets", out.len(), target.len())));
    }
    let value = loss.value(out.data(), target);
    let g = Tensor::from_parts(out.shape().to_vec(), loss.gradient(out.data(), target));
    let grads = net.backward(&trace, &g)?;
    Ok((value, out.into_data(), grads))
}

fn labels_of(set: &SampleSet) -> Result<Vec<f64>> {
    Ok(set.labels()?.into_iter().map(|l| l.as_f64()).collect())
}

/// Trains a classifier with mini-batch Adam, reshuffling each epoch and
/// reducing the rate on validation plateaus. Returns the parameters from the
/// epoch with the lowest validation loss.
pub fn fit(net: &Network, train: &SampleSet, val: &SampleSet, cfg: &TrainConfig) -> Result<(Network, History)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::precondition("training and validation sets must be non-empty"));
    }
    if net.kind == NetKind::Autoencoder {
        return Err(Error::invalid("use fit_autoencoder for reconstruction networks"));
    }
    let y_train = labels_of(train)?;
    let y_val = labels_of(val)?;

    let mut x_train = cfg.recipe.tensor(train)?;
    let prep = Preprocessing::fit(cfg.recipe.clone(), &x_train);
    prep.apply(&mut x_train);
    let x_val = prep.inputs(val)?;

    let mut net = net.clone();
    net.preprocessing = Some(prep);
    let mut sched = PlateauScheduler::new(cfg.lr0, cfg.plateau)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = History::default();
    let mut best: Option<(f64, Network)> = None;

    for epoch in 1..=cfg.epochs {
        let lr = sched.lr;
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let xb = x_train.gather(batch);
            let yb: Vec<f64> = batch.iter().map(|&i| y_train[i]).collect();
            let mode = Mode::Train { seed: rng.random() };
            let (value, out, grads) = batch_gradients(&net, &xb, &yb, LossKind::LogLoss, mode)?;
            loss_sum += value * batch.len() as f64;
            hits += accuracy(&out, &yb) * batch.len() as f64;
            net.apply_adam(&grads, lr, &cfg.adam)?;
        }
        let p_val = forward_eval(&net, &x_val)?.into_data();
        let val_loss = super::loss::loss_logloss(&p_val, &y_val);
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            train_acc: hits / train.len() as f64,
            val_acc: accuracy(&p_val, &y_val),
            lr,
        });
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, net.clone()));
        }
        sched.step(val_loss);
    }
    let (_, best_net) = best.expect("at least one epoch");
    Ok((best_net, history))
}

/// Per-epoch reconstruction error of an autoencoder run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReconstructionHistory {
    /// Evaluation-mode MSE over the whole set after each epoch.
    pub mse: Vec<f64>,
    pub lr: Vec<f64>,
}

/// Trains an autoencoder to reproduce its (standardized) input; labels are
/// ignored. The plateau schedule monitors the reconstruction error.
pub fn fit_autoencoder(
    net: &Network,
    set: &SampleSet,
    cfg: &TrainConfig,
) -> Result<(Network, ReconstructionHistory)> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::precondition("autoencoder training set is empty"));
    }
    let mut x = cfg.recipe.tensor(set)?;
    let prep = Preprocessing::fit(cfg.recipe.clone(), &x);
    prep.apply(&mut x);

    let mut net = net.clone();
    net.preprocessing = Some(prep);
    let mut sched = PlateauScheduler::new(cfg.lr0, cfg.plateau)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut hist = ReconstructionHistory::default();
    for _ in 0..cfg.epochs {
        let lr = sched.lr;
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xb = x.gather(batch);
            let mode = Mode::Train { seed: rng.random() };
            let target = xb.data().to_vec();
            let (_, _, grads) = batch_gradients(&net, &xb, &target, LossKind::Mse, mode)?;
            net.apply_adam(&grads, lr, &cfg.adam)?;
        }
        let recon = forward_eval(&net, &x)?;
        let mse = super::loss::loss_mse(recon.data(), x.data());
        hist.mse.push(mse);
        hist.lr.push(lr);
        sched.step(mse);
    }
    Ok((net, hist))
}

/// Iceberg probabilities for every sample of `set`.
pub fn predict(net: &Network, set: &SampleSet) -> Result<Vec<f64>> {
    let prep = net
        .preprocessing
        .as_ref()
        .ok_or_else(|| Error::precondition("network has no fitted preprocessing; train it first"))?;
    let x = prep.inputs(set)?;
    let out = forward_eval(net, &x)?;
    if out.item_len() != 1 {
        return Err(Error::Dimension("predict needs a single-output classifier".into()));
    }
    Ok(out.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthConfig};

    #[test]
    fn standardization_is_unit_on_train() {
        let set = synth_dataset(&SynthConfig::new(6, 0.5, 1).with_size(12)).unwrap();
        let recipe = ChannelRecipe::default();
        let mut x = recipe.tensor(&set).unwrap();
        let prep = Preprocessing::fit(recipe, &x);
        prep.apply(&mut x);
        let again = Preprocessing::fit(prep.recipe.clone(), &x);
        for c in 0..3 {
            assert!(again.mean[c].abs() < 1e-10);
            assert!((again.std[c] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn recipe_requires_angle_when_normalizing() {
        let mut set = synth_dataset(&SynthConfig::new(2, 0.5, 1).with_size(8)).unwrap().into_samples();
        set[0].inc_angle = None;
        let set = SampleSet::new(set, crate::data::Provenance::Real).unwrap();
        assert!(ChannelRecipe::default().tensor(&set).is_err());
    }

    #[test]
    fn history_csv_header() {
        let h = History {
            epochs: vec![EpochRecord { epoch: 1, train_loss: 0.5, val_loss: 0.6, train_acc: 0.7, val_acc: 0.8, lr: 0.001 }],
        };
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "epoch,train_loss,val_loss,train_acc,val_acc,lr");
        assert_eq!(text.lines().nth(1).unwrap(), "1,0.5,0.6,0.7,0.8,0.001");
    }
}
