//! Command-line driver for the iceberg/ship pipeline.

mod config;

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use icesar::data::{
    apply_imputation, impute_incidence, parse_samples_sized, serialize_samples, split_train_validation,
    stratified_folds, synth_dataset, SampleSet, SynthConfig,
};
use icesar::ensemble::{
    fit_stacker, oof_predictions, predict_stacker, stacker_oof, CnnMember, GbmMember, Member, PredictionSet,
};
use icesar::features::{
    correlation_matrix, feature_names, feature_rows, feature_vector, write_correlation_csv, write_features_csv,
};
use icesar::gbm::{deserialize_gbm, fit_gbm, predict_gbm, serialize_gbm};
use icesar::harness::{
    compute_metrics, labels_for, learning_curve, metrics_json, read_submission, report, require_artifacts,
    write_curve_csv, write_submission, CurveConfig, ReportInputs,
};
use icesar::image_ops::augment_dataset;
use icesar::nn::{
    build_autoencoder_with, build_classifier_with, fit, fit_autoencoder, load_network, loss_logloss, predict,
    save_network, transfer_encoder, History,
};
use serde::{Deserialize, Serialize};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "icesar", version, about = "Iceberg vs ship classification of dual-polarization SAR scenes")]
struct Cli {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; relative data paths resolve against it.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled synthetic training set (and optionally an unlabeled test set).
    Synth,
    /// Validate a competition-format JSON file and impute missing angles.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        /// The file has no `is_iceberg` field.
        #[arg(long)]
        unlabeled: bool,
    },
    /// Write augmented copies of the training set.
    Augment {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Per-sample feature vectors and their correlation matrix.
    Features {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Fit boosted trees on a 4:1 split and cross-validate.
    TrainGbm,
    /// Train the convolutional autoencoder on the training scenes.
    PretrainAe,
    /// Train the CNN classifier on a 4:1 split.
    TrainCnn,
    /// Score the test set with a saved model.
    Predict,
    /// Out-of-fold stacking of the configured members.
    Stack,
    /// Metrics of stored predictions against the training labels.
    Eval,
    /// Learning-curve experiment over training fractions.
    Curve,
    /// Metrics, history, correlation and composites in `<out>/report`.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Ingest { .. } => "ingest",
            Command::Augment { .. } => "augment",
            Command::Features { .. } => "features",
            Command::TrainGbm => "train-gbm",
            Command::PretrainAe => "pretrain-ae",
            Command::TrainCnn => "train-cnn",
            Command::Predict => "predict",
            Command::Stack => "stack",
            Command::Eval => "eval",
            Command::Curve => "curve",
            Command::Report => "report",
        }
    }
}

/// A trained model together with the angle used to fill missing values.
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum SavedModel {
    Cnn { mean_angle: f64, network: serde_json::Value },
    Gbm { mean_angle: f64, model: serde_json::Value },
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        self.cfg.resolve(&self.out, p)
    }

    fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn load(&self, p: &Path, labeled: bool) -> Result<SampleSet> {
        let path = self.path(p);
        let raw = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        parse_samples_sized(&raw, labeled, self.cfg.data.image_size).with_context(|| format!("parsing {}", path.display()))
    }

    /// Labeled when every record carries `is_iceberg`, unlabeled otherwise.
    fn load_any(&self, p: &Path) -> Result<SampleSet> {
        let path = self.path(p);
        let raw = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        let side = self.cfg.data.image_size;
        match parse_samples_sized(&raw, true, side) {
            Err(icesar::Error::Parse { message, .. }) if message.contains("is_iceberg") => {
                parse_samples_sized(&raw, false, side).with_context(|| format!("parsing {}", path.display()))
            }
            other => other.with_context(|| format!("parsing {}", path.display())),
        }
    }

    fn train_set(&self) -> Result<SampleSet> {
        self.load(&self.cfg.data.train, true)
    }

    fn config_value(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(&self.cfg)?)
    }
}

fn to_json(v: &impl Serialize) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v)?;
    out.push(b'\n');
    Ok(out)
}

fn submission_bytes(p: &PredictionSet) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_submission(p, &mut buf)?;
    Ok(buf)
}

fn labels_f64(set: &SampleSet) -> Result<Vec<f64>> {
    Ok(set.labels()?.iter().map(|l| l.as_f64()).collect())
}

fn run_synth(ctx: &Ctx) -> Result<()> {
    let s = &ctx.cfg.synth;
    let make = |n: usize, seed: u64| SynthConfig {
        n_samples: n,
        iceberg_fraction: s.iceberg_fraction,
        speckle_looks: s.speckle_looks,
        seed,
        image_size: ctx.cfg.data.image_size,
    };
    let train = synth_dataset(&make(s.n_samples, ctx.cfg.seed))?;
    let path = ctx.path(&ctx.cfg.data.train);
    fs::write(&path, serialize_samples(&train)?).with_context(|| format!("writing {}", path.display()))?;
    if s.n_test > 0 {
        let test = synth_dataset(&make(s.n_test, ctx.cfg.seed.wrapping_add(1)))?;
        let unlabeled = SampleSet::new(
            test.into_samples().into_iter().map(|mut x| {
                x.id = x.id.replace("synth_", "synth_test_");
                x.label = None;
                x
            }).collect(),
            train.provenance,
        )?;
        let path = ctx.path(&ctx.cfg.data.test);
        fs::write(&path, serialize_samples(&unlabeled)?).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct IngestSummary {
    n: usize,
    ships: usize,
    icebergs: usize,
    missing_angles: usize,
    mean_angle: f64,
}

fn run_ingest(ctx: &Ctx, input: &Path, unlabeled: bool) -> Result<()> {
    let set = ctx.load(input, !unlabeled)?;
    let missing = set.iter().filter(|s| s.inc_angle.is_none()).count();
    let (imputed, mean_angle) = impute_incidence(&set)?;
    let [ships, icebergs] = set.label_counts();
    ctx.write("ingested.json", serialize_samples(&imputed)?)?;
    ctx.write(
        "ingest_summary.json",
        to_json(&IngestSummary { n: set.len(), ships, icebergs, missing_angles: missing, mean_angle })?,
    )?;
    Ok(())
}

fn run_augment(ctx: &Ctx, input: Option<&Path>) -> Result<()> {
    let set = ctx.load_any(input.unwrap_or(&ctx.cfg.data.train))?;
    let a = &ctx.cfg.augment;
    let out = augment_dataset(&set, &a.policy, a.multiplier, ctx.cfg.seed)?;
    ctx.write("augmented.json", serialize_samples(&out)?)?;
    Ok(())
}

fn run_features(ctx: &Ctx, input: Option<&Path>) -> Result<()> {
    let set = ctx.load_any(input.unwrap_or(&ctx.cfg.data.train))?;
    let (imputed, mean) = impute_incidence(&set)?;
    let vectors: Vec<_> = imputed.iter().map(|s| feature_vector(s, mean)).collect();
    let labels: Option<Vec<u8>> = set.iter().map(|s| s.label.map(|l| l.as_u8())).collect();
    let mut buf = Vec::new();
    write_features_csv(&imputed.ids(), &vectors, labels.as_deref(), &mut buf)?;
    ctx.write("features.csv", buf)?;
    let fields: Vec<usize> = (0..feature_names().len())
        .filter(|&f| vectors.iter().any(|v| v.values[f] != vectors[0].values[f]))
        .collect();
    let m = correlation_matrix(&vectors, &fields)?;
    let names: Vec<String> = fields.iter().map(|&f| feature_names()[f].clone()).collect();
    let mut buf = Vec::new();
    write_correlation_csv(&names, &m, &mut buf)?;
    ctx.write("correlation.csv", buf)?;
    Ok(())
}

#[derive(Serialize)]
struct GbmCv {
    folds: usize,
    fold_logloss: Vec<f64>,
    mean_logloss: f64,
}

fn run_train_gbm(ctx: &Ctx) -> Result<()> {
    let g = &ctx.cfg.gbm;
    let seed = ctx.cfg.seed;
    let set = ctx.train_set()?;
    let (train, val) = split_train_validation(&set, g.val_ratio, seed)?;
    let (train, mean) = impute_incidence(&train)?;
    let fitted = fit_gbm(&feature_rows(&train, mean), &labels_f64(&train)?, &g.params(seed))?;
    let val = apply_imputation(&val, mean);
    let p = predict_gbm(&fitted.model, &feature_rows(&val, mean))?;
    let model: serde_json::Value = serde_json::from_slice(&serialize_gbm(&fitted.model)?)?;
    ctx.write("gbm_model.json", to_json(&SavedModel::Gbm { mean_angle: mean, model })?)?;
    ctx.write("gbm_val_predictions.csv", submission_bytes(&PredictionSet::new(val.ids(), p)?)?)?;
    let mut rounds = String::from("round,train_logloss\n");
    for (i, l) in fitted.round_logloss.iter().enumerate() {
        rounds.push_str(&format!("{i},{l}\n"));
    }
    ctx.write("gbm_rounds.csv", rounds)?;

    if g.cv_folds >= 2 {
        let member = GbmMember { params: g.params(seed) };
        let folds = stratified_folds(&set.labels()?, g.cv_folds, seed)?;
        let mut fold_logloss = Vec::with_capacity(g.cv_folds);
        for k in 0..g.cv_folds {
            let held: Vec<usize> = (0..set.len()).filter(|&i| folds[i] == k).collect();
            let rest: Vec<usize> = (0..set.len()).filter(|&i| folds[i] != k).collect();
            let held_set = set.select(&held);
            let p = member.fit_predict(&set.select(&rest), &held_set, seed)?;
            fold_logloss.push(loss_logloss(&p, &labels_f64(&held_set)?));
        }
        let mean_logloss = fold_logloss.iter().sum::<f64>() / fold_logloss.len() as f64;
        ctx.write("gbm_cv.json", to_json(&GbmCv { folds: g.cv_folds, fold_logloss, mean_logloss })?)?;
    }
    Ok(())
}

fn run_pretrain_ae(ctx: &Ctx) -> Result<()> {
    let set = ctx.load(&ctx.cfg.data.train, false)?;
    let (set, _) = impute_incidence(&set)?;
    let a = &ctx.cfg.autoencoder;
    let mut cfg = ctx.cfg.cnn.train_config(ctx.cfg.seed);
    (cfg.epochs, cfg.batch_size, cfg.lr0) = (a.epochs, a.batch_size, a.lr0);
    let ae = build_autoencoder_with(&ctx.cfg.cnn.spec(ctx.cfg.data.image_size), ctx.cfg.seed)?;
    let (ae, hist) = fit_autoencoder(&ae, &set, &cfg)?;
    ctx.write("ae_model.json", save_network(&ae)?)?;
    let mut csv = String::from("epoch,mse,lr\n");
    for (i, (m, lr)) in hist.mse.iter().zip(&hist.lr).enumerate() {
        csv.push_str(&format!("{},{m},{lr}\n", i + 1));
    }
    ctx.write("ae_history.csv", csv)?;
    Ok(())
}

fn run_train_cnn(ctx: &Ctx) -> Result<()> {
    let c = &ctx.cfg.cnn;
    let seed = ctx.cfg.seed;
    let set = ctx.train_set()?;
    let (set, mean) = impute_incidence(&set)?;
    let (train, val) = split_train_validation(&set, c.val_ratio, seed)?;
    let train = if c.augment {
        augment_dataset(&train, &ctx.cfg.augment.policy, ctx.cfg.augment.multiplier, seed)?
    } else {
        train
    };
    let mut net = build_classifier_with(&c.spec(ctx.cfg.data.image_size), seed)?;
    if let Some(p) = &c.pretrained {
        let path = ctx.path(p);
        let ae = load_network(&fs::read(&path).with_context(|| format!("reading {}", path.display()))?)?;
        net = transfer_encoder(&ae, &net)?;
    }
    let (net, history) = fit(&net, &train, &val, &c.train_config(seed))?;
    let network: serde_json::Value = serde_json::from_slice(&save_network(&net)?)?;
    ctx.write("cnn_model.json", to_json(&SavedModel::Cnn { mean_angle: mean, network })?)?;
    let mut buf = Vec::new();
    history.write_csv(&mut buf)?;
    ctx.write("history.csv", buf)?;
    let p = predict(&net, &val)?;
    ctx.write("val_predictions.csv", submission_bytes(&PredictionSet::new(val.ids(), p)?)?)?;
    Ok(())
}

fn run_predict(ctx: &Ctx) -> Result<()> {
    let path = ctx.path(&ctx.cfg.eval.model);
    let saved: SavedModel = serde_json::from_slice(&fs::read(&path).with_context(|| format!("reading {}", path.display()))?)
        .with_context(|| format!("parsing {}", path.display()))?;
    let test = ctx.load(&ctx.cfg.data.test, false)?;
    let p = match saved {
        SavedModel::Cnn { mean_angle, network } => {
            let net = load_network(&serde_json::to_vec(&network)?)?;
            predict(&net, &apply_imputation(&test, mean_angle))?
        }
        SavedModel::Gbm { mean_angle, model } => {
            let m = deserialize_gbm(&serde_json::to_vec(&model)?)?;
            predict_gbm(&m, &feature_rows(&test, mean_angle))?
        }
    };
    ctx.write("submission.csv", submission_bytes(&PredictionSet::new(test.ids(), p)?)?)?;
    Ok(())
}

#[derive(Serialize)]
struct StackSummary {
    members: Vec<String>,
    member_logloss: Vec<f64>,
    stacked_logloss: f64,
}

fn run_stack(ctx: &Ctx) -> Result<()> {
    let seed = ctx.cfg.seed;
    let set = ctx.train_set()?;
    let gbm = GbmMember { params: ctx.cfg.gbm.params(seed) };
    let cnn = CnnMember {
        spec: ctx.cfg.cnn.spec(ctx.cfg.data.image_size),
        train: ctx.cfg.cnn.train_config(seed),
        val_ratio: ctx.cfg.cnn.val_ratio,
    };
    let mut members: Vec<&dyn Member> = Vec::new();
    for name in &ctx.cfg.stack.members {
        match name.as_str() {
            "gbm" => members.push(&gbm),
            "cnn" => members.push(&cnn),
            other => bail!("unknown stack member `{other}` (expected gbm or cnn)"),
        }
    }
    let oof = oof_predictions(&set, &members, ctx.cfg.stack.k_folds, seed)?;
    let stacker = fit_stacker(&oof)?;
    let stacked = stacker_oof(&stacker, &oof)?;
    let mut buf = Vec::new();
    oof.write_csv(&mut buf)?;
    ctx.write("oof.csv", buf)?;
    ctx.write("stacker.json", to_json(&stacker)?)?;
    ctx.write("stack_oof_predictions.csv", submission_bytes(&stacked)?)?;
    let summary = StackSummary {
        members: oof.members.clone(),
        member_logloss: oof.member_logloss(),
        stacked_logloss: loss_logloss(stacked.probs(), &oof.labels),
    };
    ctx.write("stack_summary.json", to_json(&summary)?)?;

    let test_path = ctx.path(&ctx.cfg.data.test);
    if test_path.exists() {
        let test = ctx.load(&ctx.cfg.data.test, false)?;
        let preds = members
            .iter()
            .map(|m| PredictionSet::new(test.ids(), m.fit_predict(&set, &test, seed)?).map_err(Into::into))
            .collect::<Result<Vec<_>>>()?;
        ctx.write("stack_submission.csv", submission_bytes(&predict_stacker(&stacker, &preds)?)?)?;
    }
    Ok(())
}

fn read_predictions(path: &Path) -> Result<PredictionSet> {
    let f = fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
    read_submission(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

fn run_eval(ctx: &Ctx) -> Result<()> {
    let preds = read_predictions(&ctx.path(&ctx.cfg.eval.predictions))?;
    let set = ctx.train_set()?;
    let y = labels_for(&preds, &set)?;
    let metrics = compute_metrics(preds.probs(), &y, ctx.config_value()?)?;
    ctx.write("metrics.json", metrics_json(&metrics)?)?;
    Ok(())
}

fn run_curve(ctx: &Ctx) -> Result<()> {
    let c = &ctx.cfg.cnn;
    let set = ctx.train_set()?;
    let cfg = CurveConfig {
        train: c.train_config(ctx.cfg.seed),
        spec: c.spec(ctx.cfg.data.image_size),
        policy: ctx.cfg.augment.policy.clone(),
        augment_multiplier: ctx.cfg.augment.multiplier,
        val_ratio: c.val_ratio,
        seed: ctx.cfg.seed,
    };
    let rows = learning_curve(&set, &ctx.cfg.curve.fractions, &cfg)?;
    let mut buf = Vec::new();
    write_curve_csv(&rows, &mut buf)?;
    ctx.write("learning_curve.csv", buf)?;
    Ok(())
}

fn read_history(path: &Path) -> Result<History> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut epochs = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            bail!("{} line {}: expected 6 fields", path.display(), i + 1);
        }
        let num = |k: usize| -> Result<f64> {
            f[k].parse().with_context(|| format!("{} line {}: bad number `{}`", path.display(), i + 1, f[k]))
        };
        epochs.push(icesar::nn::EpochRecord {
            epoch: f[0].parse().with_context(|| format!("{} line {}: bad epoch", path.display(), i + 1))?,
            train_loss: num(1)?,
            val_loss: num(2)?,
            train_acc: num(3)?,
            val_acc: num(4)?,
            lr: num(5)?,
        });
    }
    Ok(History { epochs })
}

fn run_report(ctx: &Ctx) -> Result<()> {
    let preds_path = ctx.path(&ctx.cfg.eval.predictions);
    let train_path = ctx.path(&ctx.cfg.data.train);
    let history_path = ctx.out.join("history.csv");
    require_artifacts(&[&preds_path, &train_path, &history_path])?;
    let preds = read_predictions(&preds_path)?;
    let set = ctx.train_set()?;
    let history = read_history(&history_path)?;
    let inputs = ReportInputs {
        predictions: &preds,
        samples: &set,
        history: Some(&history),
        config: ctx.config_value()?,
        composite_ids: &ctx.cfg.report.composite_ids,
    };
    report(&inputs, &ctx.out.join("report"))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let ctx = Ctx { cfg, out: cli.out };
    ctx.write(&format!("resolved_config.{}.json", cli.command.name()), to_json(&ctx.cfg)?)?;
    match &cli.command {
        Command::Synth => run_synth(&ctx),
        Command::Ingest { input, unlabeled } => run_ingest(&ctx, input, *unlabeled),
        Command::Augment { input } => run_augment(&ctx, input.as_deref()),
        Command::Features { input } => run_features(&ctx, input.as_deref()),
        Command::TrainGbm => run_train_gbm(&ctx),
        Command::PretrainAe => run_pretrain_ae(&ctx),
        Command::TrainCnn => run_train_cnn(&ctx),
        Command::Predict => run_predict(&ctx),
        Command::Stack => run_stack(&ctx),
        Command::Eval => run_eval(&ctx),
        Command::Curve => run_curve(&ctx),
        Command::Report => run_report(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("icesar: {msg}");
            ExitCode::FAILURE
        }
    }
}
