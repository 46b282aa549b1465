//! Domain types, competition-format ingestion, stratified splitting and the
//! synthetic scene generator.

use std::cell::Cell;
use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::de::{self, DeserializeSeed, SeqAccess, Visitor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Side length of the competition scenes.
pub const SCENE_SIDE: usize = 75;

/// A single-polarization backscatter image in dB, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ImagePlane {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height < 3 || width < 3 {
            return Err(Error::Dimension(format!(
                "plane must be at least 3x3, got {height}x{width}"
            )));
        }
        if height * width != values.len() {
            return Err(Error::Dimension(format!(
                "{height}x{width} plane needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image plane".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self::new(height, width, values)
    }

    /// Builds a plane from values already known to satisfy the invariants.
    pub(crate) fn from_raw(height: usize, width: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(height * width, values.len());
        Self { height, width, values }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Value at a possibly out-of-range coordinate, clamped to the nearest edge.
    #[inline]
    pub fn get_clamped(&self, row: isize, col: isize) -> f64 {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        self.values[r * self.width + c]
    }

    pub fn same_dims(&self, other: &ImagePlane) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Elementwise map; the caller guarantees `f` keeps values finite.
    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> ImagePlane {
        ImagePlane::from_raw(self.height, self.width, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn transpose(&self) -> ImagePlane {
        let mut out = Vec::with_capacity(self.values.len());
        for c in 0..self.width {
            for r in 0..self.height {
                out.push(self.get(r, c));
            }
        }
        ImagePlane::from_raw(self.width, self.height, out)
    }
}

/// Ground-truth class. Serialized as `is_iceberg` 0/1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Ship,
    Iceberg,
}

impl Label {
    pub fn from_is_iceberg(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Ship),
            1 => Some(Label::Iceberg),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Label::Ship => 0,
            Label::Iceberg => 1,
        }
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.as_u8())
    }

    pub(crate) fn index(self) -> usize {
        self.as_u8() as usize
    }
}

/// One scene: HH and HV planes, incidence angle and an optional label.
#[derive(Clone, Debug, PartialEq)]
pub struct SarSample {
    pub id: String,
    pub hh: ImagePlane,
    pub hv: ImagePlane,
    pub inc_angle: Option<f64>,
    pub angle_imputed: bool,
    pub label: Option<Label>,
}

impl SarSample {
    pub fn new(
        id: impl Into<String>,
        hh: ImagePlane,
        hv: ImagePlane,
        inc_angle: Option<f64>,
        label: Option<Label>,
    ) -> Result<Self> {
        if !hh.same_dims(&hv) {
            return Err(Error::Dimension(format!(
                "hh is {}x{} but hv is {}x{}",
                hh.height(),
                hh.width(),
                hv.height(),
                hv.width()
            )));
        }
        if let Some(theta) = inc_angle {
            check_angle(theta)?;
        }
        Ok(Self { id: id.into(), hh, hv, inc_angle, angle_imputed: false, label })
    }

    pub fn height(&self) -> usize {
        self.hh.height()
    }

    pub fn width(&self) -> usize {
        self.hh.width()
    }
}

fn check_angle(theta: f64) -> Result<()> {
    if theta.is_finite() && theta > 0.0 && theta < 90.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("incidence angle {theta} outside (0, 90)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic,
    Augmented,
}

/// An ordered collection of samples with unique ids.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    samples: Vec<SarSample>,
    pub provenance: Provenance,
}

impl SampleSet {
    pub fn new(samples: Vec<SarSample>, provenance: Provenance) -> Result<Self> {
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
        }
        Ok(Self { samples, provenance })
    }

    pub fn samples(&self) -> &[SarSample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<SarSample> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, SarSample> {
        self.samples.iter()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    /// Labels of every sample; fails if any sample is unlabeled.
    pub fn labels(&self) -> Result<Vec<Label>> {
        self.samples
            .iter()
            .map(|s| {
                s.label
                    .ok_or_else(|| Error::precondition(format!("sample `{}` is unlabeled", s.id)))
            })
            .collect()
    }

    pub fn label_counts(&self) -> [usize; 2] {
        let mut counts = [0; 2];
        for l in self.samples.iter().filter_map(|s| s.label) {
            counts[l.index()] += 1;
        }
        counts
    }

    /// Subset by position, keeping input order.
    pub fn select(&self, indices: &[usize]) -> SampleSet {
        SampleSet {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            provenance: self.provenance,
        }
    }
}

impl<'a> IntoIterator for &'a SampleSet {
    type Item = &'a SarSample;
    type IntoIter = std::slice::Iter<'a, SarSample>;

    fn into_iter(self) -> Self::IntoIter {
        self.samples.iter()
    }
}

// ---------------------------------------------------------------------------
// Competition JSON format
// ---------------------------------------------------------------------------

/// Parses a competition-format JSON array of 75x75 scenes.
pub fn parse_samples(raw: &[u8], labeled: bool) -> Result<SampleSet> {
    parse_samples_sized(raw, labeled, SCENE_SIDE)
}

/// Same as [`parse_samples`] for square scenes of side `side`.
pub fn parse_samples_sized(raw: &[u8], labeled: bool, side: usize) -> Result<SampleSet> {
    let records = read_records(raw)?;
    let mut samples = Vec::with_capacity(records.len());
    for (index, rec) in records.iter().enumerate() {
        samples.push(parse_record(index, rec, labeled, side)?);
    }
    SampleSet::new(samples, Provenance::Real)
}

/// Deserializes the top-level array one element at a time so a syntax error
/// can be attributed to the record in which it occurred.
fn read_records(raw: &[u8]) -> Result<Vec<Value>> {
    struct Records<'c>(&'c Cell<usize>);

    impl<'de> Visitor<'de> for Records<'_> {
        type Value = Vec<Value>;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a JSON array of scene records")
        }

        fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Vec<Value>, A::Error> {
            let mut out = Vec::new();
            while let Some(v) = seq.next_element::<Value>()? {
                out.push(v);
                self.0.set(out.len());
            }
            Ok(out)
        }
    }

    impl<'de> DeserializeSeed<'de> for Records<'_> {
        type Value = Vec<Value>;

        fn deserialize<D: de::Deserializer<'de>>(self, d: D) -> Result<Vec<Value>, D::Error> {
            d.deserialize_seq(self)
        }
    }

    let progress = Cell::new(0);
    let mut de = serde_json::Deserializer::from_slice(raw);
    let parsed = Records(&progress)
        .deserialize(&mut de)
        .and_then(|v| de.end().map(|_| v));
    parsed.map_err(|e| Error::Parse { index: progress.get(), message: e.to_string() })
}

fn parse_record(index: usize, rec: &Value, labeled: bool, side: usize) -> Result<SarSample> {
    let parse_err = |message: String| Error::Parse { index, message };
    let obj = rec.as_object().ok_or_else(|| parse_err("record is not an object".into()))?;

    let id = obj
        .get("id")
        .and_then(Value::as_str)
        .ok_or_else(|| parse_err("missing string field `id`".into()))?;

    let band = |name: &str| -> Result<ImagePlane> {
        let arr = obj
            .get(name)
            .and_then(Value::as_array)
            .ok_or_else(|| parse_err(format!("missing array field `{name}`")))?;
        if arr.len() != side * side {
            return Err(Error::Dimension(format!(
                "record {index}: `{name}` has {} values, expected {}",
                arr.len(),
                side * side
            )));
        }
        let values = arr
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| parse_err(format!("non-numeric value in `{name}`"))))
            .collect::<Result<Vec<_>>>()?;
        ImagePlane::new(side, side, values)
    };
    let hh = band("band_1")?;
    let hv = band("band_2")?;

    let inc_angle = match obj.get("inc_angle") {
        Some(Value::String(s)) if s == "na" => None,
        Some(v) => match v.as_f64() {
            Some(theta) => Some(theta),
            None => return Err(parse_err(format!("inc_angle must be a number or \"na\", got {v}"))),
        },
        None => return Err(parse_err("missing field `inc_angle`".into())),
    };

    let label = if labeled {
        let v = obj
            .get("is_iceberg")
            .ok_or_else(|| parse_err("missing field `is_iceberg`".into()))?;
        let label = v
            .as_u64()
            .and_then(|n| u8::try_from(n).ok())
            .and_then(Label::from_is_iceberg)
            .ok_or_else(|| Error::Label { index, value: v.to_string() })?;
        Some(label)
    } else {
        None
    };

    SarSample::new(id, hh, hv, inc_angle, label).map_err(|e| match e {
        Error::InvalidArgument(m) => parse_err(m),
        other => other,
    })
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    band_1: &'a [f64],
    band_2: &'a [f64],
    inc_angle: AngleOut,
    #[serde(skip_serializing_if = "Option::is_none")]
    is_iceberg: Option<u8>,
}

#[derive(Serialize)]
#[serde(untagged)]
enum AngleOut {
    Degrees(f64),
    Missing(&'static str),
}

/// Writes a set in the competition JSON layout; labels are emitted when present.
pub fn serialize_samples(set: &SampleSet) -> Result<Vec<u8>> {
    let records: Vec<RecordOut> = set
        .iter()
        .map(|s| RecordOut {
            id: &s.id,
            band_1: s.hh.values(),
            band_2: s.hv.values(),
            inc_angle: match s.inc_angle {
                Some(a) => AngleOut::Degrees(a),
                None => AngleOut::Missing("na"),
            },
            is_iceberg: s.label.map(Label::as_u8),
        })
        .collect();
    Ok(serde_json::to_vec(&records)?)
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Per-class counts to draw so that the total is `round(fraction * n)` and each
/// class is within one sample of its exact share.
fn stratified_quota(class_sizes: [usize; 2], fraction: f64) -> [usize; 2] {
    let n: usize = class_sizes.iter().sum();
    let target = (fraction * n as f64).round() as usize;
    let exact = class_sizes.map(|c| fraction * c as f64);
    let mut quota = exact.map(|e| e.floor() as usize);
    let mut remaining = target.saturating_sub(quota.iter().sum());
    let mut order = [0usize, 1];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &c in order.iter().cycle().take(2) {
        if remaining > 0 && quota[c] < class_sizes[c] {
            quota[c] += 1;
            remaining -= 1;
        }
    }
    quota
}

/// Returns a membership mask selecting a stratified `fraction` of `labels`.
pub(crate) fn stratified_pick(labels: &[Label], fraction: f64, seed: u64) -> Vec<bool> {
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, l) in labels.iter().enumerate() {
        by_class[l.index()].push(i);
    }
    let quota = stratified_quota([by_class[0].len(), by_class[1].len()], fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = vec![false; labels.len()];
    for (members, q) in by_class.iter_mut().zip(quota) {
        members.shuffle(&mut rng);
        for &i in &members[..q] {
            picked[i] = true;
        }
    }
    picked
}

/// Stratified, seeded train/validation split. Both outputs keep input order.
pub fn split_train_validation(
    set: &SampleSet,
    ratio_val: f64,
    seed: u64,
) -> Result<(SampleSet, SampleSet)> {
    if !(ratio_val > 0.0 && ratio_val < 1.0) {
        return Err(Error::invalid(format!("validation ratio {ratio_val} not in (0, 1)")));
    }
    let labels = set.labels()?;
    let counts = set.label_counts();
    if counts.contains(&0) {
        return Err(Error::precondition("split needs both classes present"));
    }
    let in_val = stratified_pick(&labels, ratio_val, seed);
    let (val, train): (Vec<usize>, Vec<usize>) = (0..set.len()).partition(|&i| in_val[i]);
    Ok((set.select(&train), set.select(&val)))
}

/// Stratified subsample of `fraction` of a labeled set (identity at 1.0).
pub fn stratified_subsample(set: &SampleSet, fraction: f64, seed: u64) -> Result<SampleSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction {fraction} not in (0, 1]")));
    }
    let labels = set.labels()?;
    if fraction == 1.0 {
        return Ok(set.clone());
    }
    let keep = stratified_pick(&labels, fraction, seed);
    let idx: Vec<usize> = (0..set.len()).filter(|&i| keep[i]).collect();
    Ok(set.select(&idx))
}

/// Stratified k-fold assignment: entry `i` is the fold holding out sample `i`.
///
/// Each class is shuffled and dealt round-robin; the deal continues across
/// classes so fold sizes differ by at most one.
pub fn stratified_folds(labels: &[Label], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {k}")));
    }
    if labels.len() < k {
        return Err(Error::precondition(format!("{} samples cannot fill {k} folds", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0usize; labels.len()];
    let mut next = 0usize;
    for class in [Label::Ship, Label::Iceberg] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for i in members {
            fold[i] = next % k;
            next += 1;
        }
    }
    Ok(fold)
}

/// Replaces missing incidence angles by the mean of the present ones.
pub fn impute_incidence(set: &SampleSet) -> Result<(SampleSet, f64)> {
    let present: Vec<f64> = set.iter().filter_map(|s| s.inc_angle).collect();
    if present.is_empty() {
        return Err(Error::precondition("every incidence angle is missing; nothing to impute from"));
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok((apply_imputation(set, mean), mean))
}

/// Fills missing angles with a previously computed mean (e.g. on test data).
pub fn apply_imputation(set: &SampleSet, mean_angle: f64) -> SampleSet {
    let samples = set
        .iter()
        .map(|s| {
            let mut s = s.clone();
            if s.inc_angle.is_none() {
                s.inc_angle = Some(mean_angle);
                s.angle_imputed = true;
            }
            s
        })
        .collect();
    SampleSet { samples, provenance: set.provenance }
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

fn default_looks() -> u32 {
    4
}

fn default_side() -> usize {
    SCENE_SIDE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub iceberg_fraction: f64,
    /// Number of looks; speckle is Gamma(looks, 1/looks) in linear power.
    #[serde(default = "default_looks")]
    pub speckle_looks: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_side")]
    pub image_size: usize,
}

impl SynthConfig {
    pub fn new(n_samples: usize, iceberg_fraction: f64, seed: u64) -> Self {
        Self {
            n_samples,
            iceberg_fraction,
            speckle_looks: default_looks(),
            seed,
            image_size: SCENE_SIDE,
        }
    }

    pub fn with_size(mut self, side: usize) -> Self {
        self.image_size = side;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::invalid("synthetic set needs at least 2 samples"));
        }
        if !(self.iceberg_fraction > 0.0 && self.iceberg_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "iceberg fraction {} not in (0, 1)",
                self.iceberg_fraction
            )));
        }
        if self.speckle_looks == 0 {
            return Err(Error::invalid("speckle_looks must be positive"));
        }
        if self.image_size < 8 {
            return Err(Error::invalid("synthetic scenes must be at least 8x8"));
        }
        Ok(())
    }
}

/// Elliptical Gaussian footprint of the bright target in a synthetic scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetGeometry {
    pub center_row: f64,
    pub center_col: f64,
    pub sigma_major: f64,
    pub sigma_minor: f64,
    /// Major-axis angle in radians, measured from the column axis.
    pub orientation: f64,
}

impl TargetGeometry {
    /// Squared Mahalanobis distance of pixel `(r, c)` from the target centre.
    pub fn distance_sq(&self, r: usize, c: usize) -> f64 {
        let dy = r as f64 - self.center_row;
        let dx = c as f64 - self.center_col;
        let (s, co) = self.orientation.sin_cos();
        let along = dx * co + dy * s;
        let across = -dx * s + dy * co;
        (along / self.sigma_major).powi(2) + (across / self.sigma_minor).powi(2)
    }

    /// Pixels within one standard deviation of the target centre, row-major.
    pub fn mask(&self, height: usize, width: usize) -> Vec<bool> {
        let mut m = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                m.push(self.distance_sq(r, c) <= 1.0);
            }
        }
        m
    }
}

#[derive(Clone, Debug)]
pub struct SynthScene {
    pub sample: SarSample,
    pub target: TargetGeometry,
}

/// Generates labeled synthetic scenes together with their target geometry.
pub fn synth_scenes(cfg: &SynthConfig) -> Result<Vec<SynthScene>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_ice = (cfg.iceberg_fraction * cfg.n_samples as f64).round() as usize;
    let mut labels: Vec<Label> = (0..cfg.n_samples)
        .map(|i| if i < n_ice { Label::Iceberg } else { Label::Ship })
        .collect();
    labels.shuffle(&mut rng);

    let looks = f64::from(cfg.speckle_looks);
    let speckle = Gamma::new(looks, 1.0 / looks).expect("positive gamma parameters");
    let side = cfg.image_size;
    let sf = side as f64;

    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let theta: f64 = rng.random_range(20.0..=45.0);
            let bg_hh_db: f64 = rng.random_range(-27.0..-23.0);
            let bg_hv_db = bg_hh_db - rng.random_range(6.8..7.8);
            let jitter = sf / 10.0;
            let center_row = (sf - 1.0) / 2.0 + rng.random_range(-jitter..jitter);
            let center_col = (sf - 1.0) / 2.0 + rng.random_range(-jitter..jitter);
            let orientation = rng.random_range(0.0..std::f64::consts::PI);

            // Icebergs: large and nearly round, cross-pol close to co-pol.
            // Ships: small and elongated, cross-pol strongly depressed.
            let (sigma_major, sigma_minor, contrast_db, hv_gap_db) = match label {
                Label::Iceberg => {
                    let major = sf * rng.random_range(0.07..0.10);
                    let minor = major * rng.random_range(0.8..1.0);
                    (major, minor, rng.random_range(10.0..14.0), rng.random_range(0.0..2.5))
                }
                Label::Ship => {
                    let minor = (sf * rng.random_range(0.02..0.03)).max(0.8);
                    let major = minor * rng.random_range(3.0..4.5);
                    (major, minor, rng.random_range(12.0..18.0), rng.random_range(7.0..11.0))
                }
            };
            let target = TargetGeometry { center_row, center_col, sigma_major, sigma_minor, orientation };

            let peak_hh_db = bg_hh_db + contrast_db;
            let peak_hv_db = peak_hh_db - hv_gap_db;
            let (bg_hh, bg_hv) = (db_to_linear(bg_hh_db), db_to_linear(bg_hv_db));
            let (peak_hh, peak_hv) = (db_to_linear(peak_hh_db), db_to_linear(peak_hv_db));
            let attenuation = theta.to_radians().cos();

            let mut hh = Vec::with_capacity(side * side);
            let mut hv = Vec::with_capacity(side * side);
            for r in 0..side {
                for c in 0..side {
                    let profile = (-0.5 * target.distance_sq(r, c)).exp();
                    let p_hh = (bg_hh + peak_hh * profile) * attenuation * speckle.sample(&mut rng);
                    let p_hv = (bg_hv + peak_hv * profile) * attenuation * speckle.sample(&mut rng);
                    hh.push(linear_to_db(p_hh.max(f64::MIN_POSITIVE)));
                    hv.push(linear_to_db(p_hv.max(f64::MIN_POSITIVE)));
                }
            }
            let sample = SarSample::new(
                format!("synth_{i:06}"),
                ImagePlane::new(side, side, hh)?,
                ImagePlane::new(side, side, hv)?,
                Some(theta),
                Some(label),
            )?;
            Ok(SynthScene { sample, target })
        })
        .collect()
}

/// Deterministic synthetic labeled set.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SampleSet> {
    let samples = synth_scenes(cfg)?.into_iter().map(|s| s.sample).collect();
    SampleSet::new(samples, Provenance::Synthetic)
}

#[inline]
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

#[inline]
pub fn linear_to_db(p: f64) -> f64 {
    10.0 * p.log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, fill: f64, angle: &str, label: Option<u8>) -> String {
        let band = vec![fill.to_string(); SCENE_SIDE * SCENE_SIDE].join(",");
        let lab = label.map(|l| format!(",\"is_iceberg\":{l}")).unwrap_or_default();
        format!("{{\"id\":\"{id}\",\"band_1\":[{band}],\"band_2\":[{band}],\"inc_angle\":{angle}{lab}}}")
    }

    fn labeled_set(n_ship: usize, n_ice: usize) -> SampleSet {
        let plane = ImagePlane::constant(3, 3, 0.0).unwrap();
        let samples = (0..n_ship + n_ice)
            .map(|i| {
                let label = if i < n_ship { Label::Ship } else { Label::Iceberg };
                SarSample::new(format!("s{i:03}"), plane.clone(), plane.clone(), Some(30.0), Some(label))
                    .unwrap()
            })
            .collect();
        SampleSet::new(samples, Provenance::Real).unwrap()
    }

    #[test]
    fn parses_zero_band_with_missing_angle() {
        let raw = format!("[{}]", record("a1", 0.0, "\"na\"", None));
        let set = parse_samples(raw.as_bytes(), false).unwrap();
        let s = &set.samples()[0];
        assert_eq!(s.id, "a1");
        assert!(s.hh.values().iter().all(|&v| v == 0.0));
        assert_eq!(s.inc_angle, None);
        assert_eq!(s.label, None);
    }

    #[test]
    fn duplicate_id_is_named() {
        let raw = format!("[{},{}]", record("dup", 1.0, "30.5", Some(1)), record("dup", 2.0, "31", Some(0)));
        match parse_samples(raw.as_bytes(), true) {
            Err(Error::DuplicateId(id)) => assert_eq!(id, "dup"),
            other => panic!("expected duplicate id error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_band_length_is_dimension_error() {
        let raw = r#"[{"id":"x","band_1":[1,2,3],"band_2":[1,2,3],"inc_angle":30}]"#;
        assert!(matches!(parse_samples(raw.as_bytes(), false), Err(Error::Dimension(_))));
    }

    #[test]
    fn bad_label_is_label_error() {
        let raw = format!("[{}]", record("x", 0.0, "30", Some(2)));
        assert!(matches!(parse_samples(raw.as_bytes(), true), Err(Error::Label { index: 0, .. })));
    }

    #[test]
    fn malformed_json_reports_record_index() {
        let raw = format!("[{},{{\"id\": \"b\", \"band_1\": [1,2,,]}}]", record("a", 0.0, "30", None));
        match parse_samples(raw.as_bytes(), false) {
            Err(Error::Parse { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn synthetic_round_trip() {
        let set = synth_dataset(&SynthConfig::new(6, 0.5, 3)).unwrap();
        let bytes = serialize_samples(&set).unwrap();
        let back = parse_samples(&bytes, true).unwrap();
        assert_eq!(back.samples(), set.samples());
    }

    #[test]
    fn split_is_stratified_four_to_one() {
        let set = labeled_set(50, 50);
        for seed in [0, 1, 99] {
            let (train, val) = split_train_validation(&set, 0.2, seed).unwrap();
            assert_eq!(train.len(), 80);
            assert_eq!(val.len(), 20);
            assert_eq!(val.label_counts(), [10, 10]);
        }
    }

    #[test]
    fn split_is_deterministic_partition() {
        let set = labeled_set(37, 21);
        let (t1, v1) = split_train_validation(&set, 0.2, 5).unwrap();
        let (t2, v2) = split_train_validation(&set, 0.2, 5).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(v1, v2);
        let mut ids: Vec<String> = t1.ids().into_iter().chain(v1.ids()).collect();
        ids.sort();
        assert_eq!(ids, set.ids());
        let counts = v1.label_counts();
        assert!((counts[0] as f64 - 0.2 * 37.0).abs() <= 1.0);
        assert!((counts[1] as f64 - 0.2 * 21.0).abs() <= 1.0);
        assert_eq!(v1.len(), (0.2f64 * 58.0).round() as usize);
    }

    #[test]
    fn split_rejects_unlabeled_and_single_class() {
        assert!(split_train_validation(&labeled_set(10, 0), 0.2, 0).is_err());
        let mut samples = labeled_set(5, 5).into_samples();
        samples[0].label = None;
        let set = SampleSet::new(samples, Provenance::Real).unwrap();
        assert!(split_train_validation(&set, 0.2, 0).is_err());
    }

    #[test]
    fn imputes_mean_angle() {
        let mut samples = labeled_set(1, 2).into_samples();
        samples[0].inc_angle = Some(30.0);
        samples[1].inc_angle = None;
        samples[2].inc_angle = Some(40.0);
        let set = SampleSet::new(samples, Provenance::Real).unwrap();
        let (out, mean) = impute_incidence(&set).unwrap();
        assert_eq!(mean, 35.0);
        let angles: Vec<_> = out.iter().map(|s| s.inc_angle.unwrap()).collect();
        let flags: Vec<_> = out.iter().map(|s| s.angle_imputed).collect();
        assert_eq!(angles, vec![30.0, 35.0, 40.0]);
        assert_eq!(flags, vec![false, true, false]);
    }

    #[test]
    fn imputation_without_gaps_is_identity() {
        let set = labeled_set(2, 2);
        let (out, _) = impute_incidence(&set).unwrap();
        assert_eq!(out, set);
    }

    #[test]
    fn imputation_requires_some_angle() {
        let mut samples = labeled_set(1, 1).into_samples();
        for s in &mut samples {
            s.inc_angle = None;
        }
        let set = SampleSet::new(samples, Provenance::Real).unwrap();
        assert!(impute_incidence(&set).is_err());
    }

    #[test]
    fn synth_is_deterministic_with_exact_label_count() {
        let cfg = SynthConfig::new(10, 0.5, 7);
        let a = synth_dataset(&cfg).unwrap();
        let b = synth_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.label_counts(), [5, 5]);
        for s in &a {
            let theta = s.inc_angle.unwrap();
            assert!((20.0..=45.0).contains(&theta));
        }
    }

    #[test]
    fn synth_rejects_bad_config() {
        assert!(synth_dataset(&SynthConfig::new(1, 0.5, 0)).is_err());
        assert!(synth_dataset(&SynthConfig::new(10, 1.0, 0)).is_err());
    }

    #[test]
    fn folds_are_stratified_and_cover() {
        let labels: Vec<Label> =
            (0..100).map(|i| if i % 3 == 0 { Label::Iceberg } else { Label::Ship }).collect();
        let folds = stratified_folds(&labels, 5, 11).unwrap();
        assert_eq!(folds, stratified_folds(&labels, 5, 11).unwrap());
        let n_ice = labels.iter().filter(|&&l| l == Label::Iceberg).count() as f64;
        for f in 0..5 {
            let members: Vec<usize> = (0..100).filter(|&i| folds[i] == f).collect();
            assert!((members.len() as f64 - 20.0).abs() <= 1.0);
            let ice = members.iter().filter(|&&i| labels[i] == Label::Iceberg).count() as f64;
            assert!((ice - n_ice / 5.0).abs() <= 1.0);
        }
    }
}
