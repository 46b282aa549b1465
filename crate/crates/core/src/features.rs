//! Radiometric normalization, derived bands and per-band summary statistics.

use std::io::Write;

use crate::data::{db_to_linear, ImagePlane, SampleSet, SarSample};
use crate::error::{Error, Result};
use crate::image_ops::scale_to_u8;

/// Converts a plane observed at incidence `theta_deg` to the 0-degree
/// reference: `v - 10 log10(cos theta)` per pixel.
pub fn normalize_incidence(p: &ImagePlane, theta_deg: f64) -> Result<ImagePlane> {
    let shift = incidence_correction_db(theta_deg)?;
    Ok(p.map(|v| v + shift))
}

/// The dB offset added by [`normalize_incidence`].
pub fn incidence_correction_db(theta_deg: f64) -> Result<f64> {
    if !(theta_deg > 0.0 && theta_deg < 90.0) {
        return Err(Error::invalid(format!("incidence angle {theta_deg} outside (0, 90)")));
    }
    Ok(-10.0 * theta_deg.to_radians().cos().log10())
}

/// `hh - hv` in dB and `hh / hv` in linear power.
pub fn derived_bands(s: &SarSample) -> (ImagePlane, ImagePlane) {
    let (h, w) = (s.height(), s.width());
    let hh = s.hh.values();
    let hv = s.hv.values();
    let diff = hh.iter().zip(hv).map(|(a, b)| a - b).collect();
    let ratio = hh.iter().zip(hv).map(|(a, b)| db_to_linear(*a) / db_to_linear(*b)).collect();
    (ImagePlane::from_raw(h, w, diff), ImagePlane::from_raw(h, w, ratio))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub std: f64,
}

impl BandStats {
    pub const NAMES: [&'static str; 7] = ["min", "max", "mean", "median", "q1", "q3", "std"];

    pub fn to_array(&self) -> [f64; 7] {
        [self.min, self.max, self.mean, self.median, self.q1, self.q3, self.std]
    }
}

/// Quantile of an ascending slice; position `q * (n - 1)` with linear
/// interpolation between neighbours.
pub fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn band_stats(p: &ImagePlane) -> BandStats {
    summarize(p.values())
}

fn summarize(values: &[f64]) -> BandStats {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // Summing the sorted copy makes the result independent of pixel order.
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    BandStats {
        min: sorted[0],
        max: sorted[n - 1],
        mean,
        median: sorted_quantile(&sorted, 0.5),
        q1: sorted_quantile(&sorted, 0.25),
        q3: sorted_quantile(&sorted, 0.75),
        std,
    }
}

pub const N_FEATURES: usize = 30;
pub const BAND_NAMES: [&str; 4] = ["hh", "hv", "diff", "ratio"];

/// Column names in vector order: `{band}_{stat}` for the four bands, then
/// `inc_angle` and `angle_missing`.
pub fn feature_names() -> Vec<String> {
    let mut names: Vec<String> = BAND_NAMES
        .iter()
        .flat_map(|b| BandStats::NAMES.iter().map(move |s| format!("{b}_{s}")))
        .collect();
    names.push("inc_angle".into());
    names.push("angle_missing".into());
    names
}

pub fn feature_index(name: &str) -> Option<usize> {
    feature_names().iter().position(|n| n == name)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: [f64; N_FEATURES],
}

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        feature_index(name).map(|i| self.values[i])
    }
}

/// Statistics of hh, hv, diff and ratio followed by the angle features.
/// Missing angles fall back to `mean_angle`.
pub fn feature_vector(s: &SarSample, mean_angle: f64) -> FeatureVector {
    let (diff, ratio) = derived_bands(s);
    let mut values = [0.0; N_FEATURES];
    for (k, plane) in [&s.hh, &s.hv, &diff, &ratio].into_iter().enumerate() {
        values[k * 7..k * 7 + 7].copy_from_slice(&band_stats(plane).to_array());
    }
    values[28] = s.inc_angle.unwrap_or(mean_angle);
    values[29] = if s.angle_imputed || s.inc_angle.is_none() { 1.0 } else { 0.0 };
    FeatureVector { values }
}

/// Feature vectors of a whole set as plain rows, ready for [`crate::gbm::fit_gbm`].
pub fn feature_rows(set: &SampleSet, mean_angle: f64) -> Vec<Vec<f64>> {
    set.iter().map(|s| feature_vector(s, mean_angle).values.to_vec()).collect()
}

/// Pearson correlation between the selected fields across `vs`.
pub fn correlation_matrix(vs: &[FeatureVector], fields: &[usize]) -> Result<Vec<Vec<f64>>> {
    if vs.len() < 2 {
        return Err(Error::precondition("correlation needs at least two vectors"));
    }
    let names = feature_names();
    let n = vs.len() as f64;
    let mut centered = Vec::with_capacity(fields.len());
    for &f in fields {
        if f >= N_FEATURES {
            return Err(Error::invalid(format!("feature index {f} out of range")));
        }
        let mean = vs.iter().map(|v| v.values[f]).sum::<f64>() / n;
        let col: Vec<f64> = vs.iter().map(|v| v.values[f] - mean).collect();
        let ss: f64 = col.iter().map(|d| d * d).sum();
        if ss == 0.0 {
            return Err(Error::ZeroVariance(names[f].clone()));
        }
        let norm = ss.sqrt();
        centered.push(col.into_iter().map(|d| d / norm).collect::<Vec<_>>());
    }
    let k = fields.len();
    let mut m = vec![vec![0.0; k]; k];
    for i in 0..k {
        m[i][i] = 1.0;
        for j in i + 1..k {
            let r: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            let r = r.clamp(-1.0, 1.0);
            m[i][j] = r;
            m[j][i] = r;
        }
    }
    Ok(m)
}

/// Feature table with header `id,<30 feature names>[,is_iceberg]`.
pub fn write_features_csv(
    ids: &[String],
    vs: &[FeatureVector],
    labels: Option<&[u8]>,
    mut w: impl Write,
) -> Result<()> {
    let mut header = vec!["id".to_string()];
    header.extend(feature_names());
    if labels.is_some() {
        header.push("is_iceberg".into());
    }
    writeln!(w, "{}", header.join(","))?;
    for (i, (id, v)) in ids.iter().zip(vs).enumerate() {
        write!(w, "{id}")?;
        for x in &v.values {
            write!(w, ",{x}")?;
        }
        if let Some(l) = labels {
            write!(w, ",{}", l[i])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_correlation_csv(names: &[String], m: &[Vec<f64>], mut w: impl Write) -> Result<()> {
    writeln!(w, "field,{}", names.join(","))?;
    for (name, row) in names.iter().zip(m) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{name},{}", cells.join(","))?;
    }
    Ok(())
}

/// Binary PPM colour composite: R = hh, G = hv, B = (hh + hv) / 2, each
/// channel min-max scaled on its own.
pub fn write_composite_ppm(s: &SarSample, mut w: impl Write) -> Result<()> {
    let mean: Vec<f64> = s.hh.values().iter().zip(s.hv.values()).map(|(a, b)| 0.5 * (a + b)).collect();
    let r = scale_to_u8(s.hh.values());
    let g = scale_to_u8(s.hv.values());
    let b = scale_to_u8(&mean);
    write!(w, "P6\n{} {}\n255\n", s.width(), s.height())?;
    let mut pixels = Vec::with_capacity(r.len() * 3);
    for i in 0..r.len() {
        pixels.extend_from_slice(&[r[i], g[i], b[i]]);
    }
    w.write_all(&pixels)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;

    fn sample(hh: ImagePlane, hv: ImagePlane) -> SarSample {
        SarSample::new("t", hh, hv, Some(35.0), Some(Label::Ship)).unwrap()
    }

    #[test]
    fn incidence_correction_values() {
        assert!((incidence_correction_db(45.0).unwrap() - 1.5051).abs() < 1e-4);
        assert!((incidence_correction_db(30.0).unwrap() - 0.6247).abs() < 1e-4);
        assert!(incidence_correction_db(1e-9).unwrap().abs() < 1e-15);
        assert!(normalize_incidence(&ImagePlane::constant(3, 3, 0.0).unwrap(), 90.0).is_err());
        assert!(normalize_incidence(&ImagePlane::constant(3, 3, 0.0).unwrap(), 0.0).is_err());
    }

    #[test]
    fn normalization_cancels_in_difference() {
        let hh = ImagePlane::from_fn(4, 4, |r, c| -20.0 + r as f64 - 0.5 * c as f64).unwrap();
        let hv = ImagePlane::from_fn(4, 4, |r, c| -28.0 + 0.25 * (r * c) as f64).unwrap();
        let raw = derived_bands(&sample(hh.clone(), hv.clone())).0;
        let norm = derived_bands(&sample(
            normalize_incidence(&hh, 37.0).unwrap(),
            normalize_incidence(&hv, 37.0).unwrap(),
        ))
        .0;
        for (a, b) in raw.values().iter().zip(norm.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn derived_band_examples() {
        let hv = ImagePlane::from_fn(3, 4, |r, c| -25.0 + (r + c) as f64).unwrap();
        let (d, q) = derived_bands(&sample(hv.clone(), hv.clone()));
        assert!(d.values().iter().all(|&v| v == 0.0));
        assert!(q.values().iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let plus10 = hv.map(|v| v + 10.0);
        let (d, q) = derived_bands(&sample(plus10, hv.clone()));
        assert!(d.values().iter().all(|&v| (v - 10.0).abs() < 1e-12));
        assert!(q.values().iter().all(|&v| (v - 10.0).abs() < 1e-9));

        let plus3 = hv.map(|v| v + 3.0);
        let (_, q) = derived_bands(&sample(plus3, hv));
        assert!(q.values().iter().all(|&v| (v - 1.9953).abs() < 1e-4));
    }

    #[test]
    fn stats_examples() {
        let c = band_stats(&ImagePlane::constant(3, 3, -4.5).unwrap());
        assert_eq!(c.to_array(), [-4.5, -4.5, -4.5, -4.5, -4.5, -4.5, 0.0]);

        let five = summarize(&[5.0, 1.0, 4.0, 2.0, 3.0]);
        assert_eq!((five.median, five.q1, five.q3), (3.0, 2.0, 4.0));
        assert!((five.std - 2.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(summarize(&[7.0]).std, 0.0);
        assert_eq!(sorted_quantile(&[0.0, 10.0], 0.25), 2.5);
    }

    #[test]
    fn stats_shift_with_constant() {
        let p = ImagePlane::from_fn(5, 5, |r, c| ((r * 7 + c * 3) % 11) as f64).unwrap();
        let a = band_stats(&p);
        let b = band_stats(&p.map(|v| v + 2.0));
        for (x, y) in a.to_array()[..6].iter().zip(&b.to_array()[..6]) {
            assert!((y - x - 2.0).abs() < 1e-12);
        }
        assert!((a.std - b.std).abs() < 1e-12);
    }

    #[test]
    fn constant_sample_features() {
        let s = sample(ImagePlane::constant(4, 4, -10.0).unwrap(), ImagePlane::constant(4, 4, -20.0).unwrap());
        let v = feature_vector(&s, 30.0);
        assert_eq!(&v.values[0..7], &[-10.0, -10.0, -10.0, -10.0, -10.0, -10.0, 0.0]);
        assert_eq!(&v.values[7..14], &[-20.0, -20.0, -20.0, -20.0, -20.0, -20.0, 0.0]);
        assert_eq!(&v.values[14..21], &[10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 0.0]);
        for &x in &v.values[21..27] {
            assert!((x - 10.0).abs() < 1e-9);
        }
        assert_eq!(v.values[27], 0.0);
        assert_eq!(v.get("inc_angle"), Some(35.0));
        assert_eq!(v.get("angle_missing"), Some(0.0));
    }

    #[test]
    fn missing_angle_uses_mean_and_flag() {
        let mut s = sample(ImagePlane::constant(3, 3, -1.0).unwrap(), ImagePlane::constant(3, 3, -2.0).unwrap());
        s.inc_angle = None;
        let v = feature_vector(&s, 38.5);
        assert_eq!(v.values[28], 38.5);
        assert_eq!(v.values[29], 1.0);
    }

    #[test]
    fn feature_names_are_stable() {
        let names = feature_names();
        assert_eq!(names.len(), N_FEATURES);
        assert_eq!(names[0], "hh_min");
        assert_eq!(names[13], "hv_std");
        assert_eq!(names[20], "diff_std");
        assert_eq!(names[27], "ratio_std");
        assert_eq!(names[29], "angle_missing");
    }

    #[test]
    fn correlation_examples() {
        let vs: Vec<FeatureVector> = (0..6)
            .map(|i| {
                let mut values = [0.0; N_FEATURES];
                values[0] = i as f64;
                values[1] = -(i as f64);
                values[2] = ((i * i) % 5) as f64;
                FeatureVector { values }
            })
            .collect();
        let m = correlation_matrix(&vs, &[0, 1, 2]).unwrap();
        assert_eq!(m[0][0], 1.0);
        assert!((m[0][1] + 1.0).abs() < 1e-12);
        assert_eq!(m[1][2], m[2][1]);
        match correlation_matrix(&vs, &[0, 5]) {
            Err(Error::ZeroVariance(name)) => assert_eq!(name, "hh_q3"),
            other => panic!("expected zero variance, got {other:?}"),
        }
        assert!(correlation_matrix(&vs[..1], &[0]).is_err());
    }

    #[test]
    fn composite_of_constant_sample_is_uniform() {
        let s = sample(ImagePlane::constant(3, 3, -5.0).unwrap(), ImagePlane::constant(3, 3, -9.0).unwrap());
        let mut buf = Vec::new();
        write_composite_ppm(&s, &mut buf).unwrap();
        let header = b"P6\n3 3\n255\n";
        assert!(buf.starts_with(header));
        let px = &buf[header.len()..];
        assert_eq!(px.len(), 27);
        assert!(px.chunks(3).all(|c| c == &px[..3]));
    }
}
