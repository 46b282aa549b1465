//! Geometric and derivative transforms on [`ImagePlane`]s, plus the random
//! augmentation policy built on top of them.
//!
//! Every transform pads by edge replication: out-of-range source coordinates
//! are clamped to the nearest valid pixel.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImagePlane, Provenance, SampleSet, SarSample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReflectAxis {
    /// Mirror left-right (reverses each row).
    Horizontal,
    /// Mirror top-bottom (reverses row order).
    Vertical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientAxis {
    X,
    Y,
}

/// Rotates counterclockwise by `degrees` about the image centre.
///
/// Multiples of 90 degrees are exact index permutations (for 90/270 only
/// when the plane is square); every other angle samples bilinearly from
/// clamped source coordinates.
pub fn rotate(p: &ImagePlane, degrees: f64) -> Result<ImagePlane> {
    if !degrees.is_finite() {
        return Err(Error::invalid(format!("rotation angle {degrees} is not finite")));
    }
    let (h, w) = (p.height(), p.width());
    let turned = degrees.rem_euclid(360.0);
    let quarter = [0.0, 90.0, 180.0, 270.0].iter().position(|&q| q == turned);
    match quarter {
        Some(0) => return Ok(p.clone()),
        Some(2) => {
            let values = p.values().iter().rev().copied().collect();
            return Ok(ImagePlane::from_raw(h, w, values));
        }
        Some(q) if h == w => {
            let n = h;
            let out = ImagePlane::from_raw(
                n,
                n,
                (0..n * n)
                    .map(|i| {
                        let (r, c) = (i / n, i % n);
                        if q == 1 { p.get(c, n - 1 - r) } else { p.get(n - 1 - c, r) }
                    })
                    .collect(),
            );
            return Ok(out);
        }
        _ => {}
    }

    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut values = Vec::with_capacity(h * w);
    for r in 0..h {
        let y = r as f64 - cy;
        for c in 0..w {
            let x = c as f64 - cx;
            let src_col = cx + cos * x - sin * y;
            let src_row = cy + sin * x + cos * y;
            values.push(bilinear(p, src_row, src_col));
        }
    }
    Ok(ImagePlane::from_raw(h, w, values))
}

fn bilinear(p: &ImagePlane, row: f64, col: f64) -> f64 {
    let row = row.clamp(0.0, (p.height() - 1) as f64);
    let col = col.clamp(0.0, (p.width() - 1) as f64);
    let r0 = row.floor() as usize;
    let c0 = col.floor() as usize;
    let r1 = (r0 + 1).min(p.height() - 1);
    let c1 = (c0 + 1).min(p.width() - 1);
    let fr = row - r0 as f64;
    let fc = col - c0 as f64;
    let top = p.get(r0, c0) * (1.0 - fc) + p.get(r0, c1) * fc;
    let bottom = p.get(r1, c0) * (1.0 - fc) + p.get(r1, c1) * fc;
    top * (1.0 - fr) + bottom * fr
}

pub fn reflect(p: &ImagePlane, axis: ReflectAxis) -> ImagePlane {
    let (h, w) = (p.height(), p.width());
    let mut values = Vec::with_capacity(h * w);
    match axis {
        ReflectAxis::Horizontal => {
            for row in p.values().chunks_exact(w) {
                values.extend(row.iter().rev());
            }
        }
        ReflectAxis::Vertical => {
            for row in p.values().chunks_exact(w).rev() {
                values.extend_from_slice(row);
            }
        }
    }
    ImagePlane::from_raw(h, w, values)
}

/// Translates content by `dx` columns (positive = right) and `dy` rows
/// (positive = down).
pub fn shift(p: &ImagePlane, dx: i64, dy: i64) -> Result<ImagePlane> {
    let (h, w) = (p.height() as i64, p.width() as i64);
    if dx.abs() >= w || dy.abs() >= h {
        return Err(Error::invalid(format!("shift ({dx}, {dy}) out of range for {h}x{w} plane")));
    }
    let mut values = Vec::with_capacity(p.len());
    for r in 0..h {
        for c in 0..w {
            values.push(p.get_clamped((r - dy) as isize, (c - dx) as isize));
        }
    }
    Ok(ImagePlane::from_raw(p.height(), p.width(), values))
}

/// Normalized 1-D Gaussian taps of radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("gaussian sigma must be positive, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Separable Gaussian blur: a row pass followed by a column pass.
pub fn gaussian_smooth(p: &ImagePlane, sigma: f64) -> Result<ImagePlane> {
    let kernel = gaussian_kernel(sigma)?;
    let radius = (kernel.len() / 2) as isize;
    let (h, w) = (p.height(), p.width());

    let mut rows = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            rows[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, &wt)| wt * p.get_clamped(r as isize, c as isize + k as isize - radius))
                .sum();
        }
    }
    let rows = ImagePlane::from_raw(h, w, rows);
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, &wt)| wt * rows.get_clamped(r as isize + k as isize - radius, c as isize))
                .sum();
        }
    }
    Ok(ImagePlane::from_raw(h, w, out))
}

/// 3x3 cross-correlation with edge replication.
fn correlate3(p: &ImagePlane, kernel: &[[f64; 3]; 3]) -> ImagePlane {
    let (h, w) = (p.height(), p.width());
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut acc = 0.0;
            for (i, krow) in kernel.iter().enumerate() {
                for (j, &k) in krow.iter().enumerate() {
                    if k != 0.0 {
                        acc += k * p.get_clamped(r + i as isize - 1, c + j as isize - 1);
                    }
                }
            }
            out.push(acc);
        }
    }
    ImagePlane::from_raw(h, w, out)
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
const LAPLACIAN: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];

pub fn sobel(p: &ImagePlane, axis: GradientAxis) -> ImagePlane {
    match axis {
        GradientAxis::X => correlate3(p, &SOBEL_X),
        GradientAxis::Y => correlate3(p, &SOBEL_Y),
    }
}

pub fn gradient_magnitude(p: &ImagePlane) -> ImagePlane {
    let gx = sobel(p, GradientAxis::X);
    let gy = sobel(p, GradientAxis::Y);
    let values = gx.values().iter().zip(gy.values()).map(|(a, b)| a.hypot(*b)).collect();
    ImagePlane::from_raw(p.height(), p.width(), values)
}

pub fn laplacian(p: &ImagePlane) -> ImagePlane {
    correlate3(p, &LAPLACIAN)
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPolicy {
    pub width_shift_frac: f64,
    pub height_shift_frac: f64,
    pub rotation_max_deg: f64,
    pub allow_horizontal_reflect: bool,
    pub allow_vertical_reflect: bool,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            width_shift_frac: 0.1,
            height_shift_frac: 0.1,
            rotation_max_deg: 15.0,
            allow_horizontal_reflect: true,
            allow_vertical_reflect: true,
        }
    }
}

impl AugmentationPolicy {
    /// A policy that draws nothing: every augmented sample equals its source.
    pub fn identity() -> Self {
        Self {
            width_shift_frac: 0.0,
            height_shift_frac: 0.0,
            rotation_max_deg: 0.0,
            allow_horizontal_reflect: false,
            allow_vertical_reflect: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("width", self.width_shift_frac), ("height", self.height_shift_frac)] {
            if !(0.0..0.5).contains(&f) {
                return Err(Error::invalid(format!("{name} shift fraction {f} not in [0, 0.5)")));
            }
        }
        if !(0.0..=180.0).contains(&self.rotation_max_deg) {
            return Err(Error::invalid(format!(
                "rotation range {} not in [0, 180]",
                self.rotation_max_deg
            )));
        }
        Ok(())
    }
}

/// One concrete geometric transform drawn from a policy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub dx: i64,
    pub dy: i64,
    pub angle_deg: f64,
    pub reflect_horizontal: bool,
    pub reflect_vertical: bool,
}

impl AugmentDraw {
    pub fn sample(policy: &AugmentationPolicy, width: usize, height: usize, rng: &mut impl Rng) -> Self {
        let max_dx = (policy.width_shift_frac * width as f64).floor() as i64;
        let max_dy = (policy.height_shift_frac * height as f64).floor() as i64;
        let dx = if max_dx > 0 { rng.random_range(-max_dx..=max_dx) } else { 0 };
        let dy = if max_dy > 0 { rng.random_range(-max_dy..=max_dy) } else { 0 };
        let angle_deg = if policy.rotation_max_deg > 0.0 {
            rng.random_range(-policy.rotation_max_deg..=policy.rotation_max_deg)
        } else {
            0.0
        };
        let reflect_horizontal = policy.allow_horizontal_reflect && rng.random_bool(0.5);
        let reflect_vertical = policy.allow_vertical_reflect && rng.random_bool(0.5);
        Self { dx, dy, angle_deg, reflect_horizontal, reflect_vertical }
    }

    /// Reflect, then rotate, then shift.
    pub fn apply(&self, p: &ImagePlane) -> Result<ImagePlane> {
        let mut out = p.clone();
        if self.reflect_horizontal {
            out = reflect(&out, ReflectAxis::Horizontal);
        }
        if self.reflect_vertical {
            out = reflect(&out, ReflectAxis::Vertical);
        }
        out = rotate(&out, self.angle_deg)?;
        shift(&out, self.dx, self.dy)
    }
}

/// Draws one transform from `policy` using a generator seeded by `rng_state`
/// and applies it to both polarization bands.
pub fn sample_augmentation(
    s: &SarSample,
    policy: &AugmentationPolicy,
    rng_state: u64,
) -> Result<SarSample> {
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_state);
    let draw = AugmentDraw::sample(policy, s.width(), s.height(), &mut rng);
    Ok(SarSample {
        id: format!("{}_aug", s.id),
        hh: draw.apply(&s.hh)?,
        hv: draw.apply(&s.hv)?,
        ..s.clone()
    })
}

/// Each original sample followed by `multiplier - 1` augmented variants with
/// ids `<id>_aug<k>`.
pub fn augment_dataset(
    set: &SampleSet,
    policy: &AugmentationPolicy,
    multiplier: usize,
    seed: u64,
) -> Result<SampleSet> {
    if multiplier == 0 {
        return Err(Error::invalid("augmentation multiplier must be at least 1"));
    }
    if multiplier == 1 {
        return Ok(set.clone());
    }
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(set.len() * multiplier);
    for s in set {
        out.push(s.clone());
        for k in 1..multiplier {
            let mut aug = sample_augmentation(s, policy, rng.random())?;
            aug.id = format!("{}_aug{k}", s.id);
            out.push(aug);
        }
    }
    SampleSet::new(out, Provenance::Augmented)
}

// ---------------------------------------------------------------------------
// Debug output
// ---------------------------------------------------------------------------

/// Min-max scales values to 0..=255; a constant input maps to all zeros.
pub(crate) fn scale_to_u8(values: &[f64]) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    values
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect()
}

/// Binary 8-bit PGM with linear min-max scaling.
pub fn write_pgm(p: &ImagePlane, mut w: impl Write) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", p.width(), p.height())?;
    w.write_all(&scale_to_u8(p.values()))?;
    Ok(())
}
