//! Run configuration: JSON file plus command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use icesar::gbm::GbmParams;
use icesar::image_ops::AugmentationPolicy;
use icesar::nn::{ChannelRecipe, ClassifierSpec, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub synth: SynthSection,
    pub augment: AugmentSection,
    pub gbm: GbmSection,
    pub cnn: CnnSection,
    pub autoencoder: AutoencoderSection,
    pub stack: StackSection,
    pub curve: CurveSection,
    pub eval: EvalSection,
    pub report: ReportSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            data: DataSection::default(),
            synth: SynthSection::default(),
            augment: AugmentSection::default(),
            gbm: GbmSection::default(),
            cnn: CnnSection::default(),
            autoencoder: AutoencoderSection::default(),
            stack: StackSection::default(),
            curve: CurveSection::default(),
            eval: EvalSection::default(),
            report: ReportSection::default(),
        }
    }
}

/// Input files. Relative paths resolve against the output directory, so a
/// chain of subcommands sharing `--out` finds each other's artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: PathBuf,
    pub test: PathBuf,
    pub image_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { train: "train.json".into(), test: "test.json".into(), image_size: 75 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_samples: usize,
    pub n_test: usize,
    pub iceberg_fraction: f64,
    pub speckle_looks: u32,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self { n_samples: 1200, n_test: 0, iceberg_fraction: 0.5, speckle_looks: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub policy: AugmentationPolicy,
    pub multiplier: usize,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self { policy: AugmentationPolicy::default(), multiplier: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbmSection {
    pub n_trees: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
    pub min_samples_leaf: usize,
    pub cv_folds: usize,
    pub val_ratio: f64,
}

impl Default for GbmSection {
    fn default() -> Self {
        let p = GbmParams::default();
        Self {
            n_trees: p.n_trees,
            max_depth: p.max_depth,
            shrinkage: p.shrinkage,
            min_samples_leaf: p.min_samples_leaf,
            cv_folds: 5,
            val_ratio: 0.2,
        }
    }
}

impl GbmSection {
    pub fn params(&self, seed: u64) -> GbmParams {
        GbmParams {
            n_trees: self.n_trees,
            max_depth: self.max_depth,
            shrinkage: self.shrinkage,
            min_samples_leaf: self.min_samples_leaf,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_lr: f64,
    pub conv_widths: [usize; 3],
    pub dense_units: usize,
    pub dropout: f64,
    pub val_ratio: f64,
    pub recipe: ChannelRecipe,
    /// Augment the training split before fitting.
    pub augment: bool,
    /// Start from this autoencoder's encoder instead of random weights.
    pub pretrained: Option<PathBuf>,
}

impl Default for CnnSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = ClassifierSpec::reference(3);
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr0: t.lr0,
            plateau_patience: t.plateau.patience,
            plateau_factor: t.plateau.factor,
            min_lr: t.plateau.min_lr,
            conv_widths: s.conv_widths,
            dense_units: s.dense_units,
            dropout: s.dropout,
            val_ratio: 0.2,
            recipe: t.recipe,
            augment: false,
            pretrained: None,
        }
    }
}

impl CnnSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let mut t = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr0,
            seed,
            recipe: self.recipe.clone(),
            ..TrainConfig::default()
        };
        t.plateau.patience = self.plateau_patience;
        t.plateau.factor = self.plateau_factor;
        t.plateau.min_lr = self.min_lr;
        t
    }

    pub fn spec(&self, side: usize) -> ClassifierSpec {
        ClassifierSpec {
            input_ch: self.recipe.len(),
            height: side,
            width: side,
            conv_widths: self.conv_widths,
            dense_units: self.dense_units,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
}

impl Default for AutoencoderSection {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 32, lr0: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StackSection {
    pub k_folds: usize,
    /// Any of `gbm`, `cnn`.
    pub members: Vec<String>,
}

impl Default for StackSection {
    fn default() -> Self {
        Self { k_folds: 5, members: vec!["gbm".into(), "cnn".into()] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveSection {
    pub fractions: Vec<f64>,
}

impl Default for CurveSection {
    fn default() -> Self {
        Self { fractions: vec![0.1, 0.3, 1.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub predictions: PathBuf,
    /// Model used by `predict`: a CNN checkpoint or a GBM model file.
    pub model: PathBuf,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { predictions: "val_predictions.csv".into(), model: "cnn_model.json".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub composite_ids: Vec<String>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_slice(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    pub fn resolve(&self, out: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            out.join(p)
        }
    }
}
