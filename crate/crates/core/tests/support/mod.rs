//! Brute-force reference computations shared by the integration suites.
#![allow(dead_code)]

use icesar::data::ImagePlane;
use icesar::features::{BandStats, FeatureVector, N_FEATURES};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_plane(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImagePlane {
    ImagePlane::new(h, w, (0..h * w).map(|_| rng.random_range(-40.0..5.0)).collect()).unwrap()
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// Order statistic `k` by selection rather than a full sort.
pub fn kth(values: &[f64], k: usize) -> f64 {
    let mut v = values.to_vec();
    *v.select_nth_unstable_by(k, f64::total_cmp).1
}

pub fn oracle_quantile(values: &[f64], q: f64) -> f64 {
    let pos = q * (values.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    let (a, b) = (kth(values, lo), kth(values, hi));
    a + (b - a) * (pos - lo as f64)
}

pub fn oracle_stats(values: &[f64]) -> BandStats {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    BandStats {
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean,
        median: oracle_quantile(values, 0.5),
        q1: oracle_quantile(values, 0.25),
        q3: oracle_quantile(values, 0.75),
        std: var.sqrt(),
    }
}

pub fn assert_stats_close(got: &BandStats, want: &BandStats) {
    for (g, w) in got.to_array().iter().zip(want.to_array()) {
        assert!(close(*g, w, 1e-12), "{got:?} vs {want:?}");
    }
}

pub fn oracle_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0);
    let sa = (a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let sb = (b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    cov / (sa * sb)
}

pub fn random_vectors(rng: &mut ChaCha8Rng, n: usize) -> Vec<FeatureVector> {
    (0..n)
        .map(|_| {
            let mut values = [0.0; N_FEATURES];
            values.iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
            FeatureVector { values }
        })
        .collect()
}

pub fn dense_gaussian(p: &ImagePlane, sigma: f64) -> ImagePlane {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k2 = Vec::new();
    for i in -radius..=radius {
        for j in -radius..=radius {
            k2.push(((i * i + j * j) as f64 / (-2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = k2.iter().sum();
    let side = (2 * radius + 1) as usize;
    ImagePlane::from_fn(p.height(), p.width(), |r, c| {
        let mut acc = 0.0;
        for i in -radius..=radius {
            for j in -radius..=radius {
                let k = k2[(i + radius) as usize * side + (j + radius) as usize] / total;
                acc += k * p.get_clamped(r as isize + i, c as isize + j);
            }
        }
        acc
    })
    .unwrap()
}

pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let mut y: Vec<f64> = x.iter().map(|r| (r[0] + 0.5 * r[d - 1] + rng.random_range(-1.0..1.0) > 0.0) as u8 as f64).collect();
    y[0] = 0.0;
    y[1] = 1.0;
    (x, y)
}

pub fn sse(residual: &[f64], idx: &[usize]) -> f64 {
    let m = idx.iter().map(|&i| residual[i]).sum::<f64>() / idx.len() as f64;
    idx.iter().map(|&i| (residual[i] - m).powi(2)).sum()
}

/// Exhaustive scan over every feature and midpoint, scoring each candidate
/// by the direct residual sum of squares of the two children.
pub fn oracle_root_split(x: &[Vec<f64>], residual: &[f64], min_leaf: usize) -> Option<(usize, f64)> {
    let sse = |idx: &[usize]| sse(residual, idx);
    let all: Vec<usize> = (0..x.len()).collect();
    let parent = sse(&all);
    let mut best: Option<(usize, f64, f64)> = None;
    for f in 0..x[0].len() {
        let mut vals: Vec<f64> = x.iter().map(|r| r[f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let t = w[0] + (w[1] - w[0]) / 2.0;
            let (l, r): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| x[i][f] <= t);
            if l.len() < min_leaf || r.len() < min_leaf {
                continue;
            }
            let total = sse(&l) + sse(&r);
            if parent - total > 1e-12 && best.is_none_or(|(_, _, b)| total < b - 1e-12) {
                best = Some((f, t, total));
            }
        }
    }
    best.map(|(f, t, _)| (f, t))
}
