//! Central finite-difference verification of backpropagated gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::LossKind;
use super::network::{Gradients, Mode, Network};
use super::tensor::Tensor;
use super::train::batch_gradients;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Parameters to compare (all of them when the net has fewer).
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-3, samples: 200, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters whose perturbation moved a ReLU gate or pooling winner.
    pub skipped_kinks: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares backpropagated gradients of the mean `loss` with central
/// differences, in evaluation mode (dropout off).
pub fn gradient_check(
    net: &Network,
    x: &Tensor,
    target: &[f64],
    loss: LossKind,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (_, _, grads) = batch_gradients(net, x, target, loss, Mode::Eval)?;
    gradient_check_against(net, x, target, loss, &grads, cfg)
}

/// Like [`gradient_check`] but against caller-supplied gradients.
pub fn gradient_check_against(
    net: &Network,
    x: &Tensor,
    target: &[f64],
    loss: LossKind,
    grads: &Gradients,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if !(cfg.step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let shapes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    if grads.len() != shapes.len() || grads.iter().zip(&shapes).any(|(g, &n)| g.len() != n) {
        return Err(Error::Dimension("gradients do not match parameters".into()));
    }
    let mut candidates: Vec<(usize, usize)> =
        shapes.iter().enumerate().flat_map(|(t, &n)| (0..n).map(move |i| (t, i))).collect();
    candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let wanted = cfg.samples.min(candidates.len());

    let base_pattern = net.forward_traced(x, Mode::Eval)?.1.activation_pattern();
    let mut probe = net.clone();
    let eval = |probe: &Network| -> Result<(f64, Vec<u64>)> {
        let (out, trace) = probe.forward_traced(x, Mode::Eval)?;
        Ok((loss.value(out.data(), target), trace.activation_pattern()))
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped_kinks: 0 };
    for (t, i) in candidates {
        if report.checked == wanted {
            break;
        }
        let orig = probe.params_mut()[t][i];
        probe.params_mut()[t][i] = orig + cfg.step;
        let (plus, pat_plus) = eval(&probe)?;
        probe.params_mut()[t][i] = orig - cfg.step;
        let (minus, pat_minus) = eval(&probe)?;
        probe.params_mut()[t][i] = orig;
        if pat_plus != base_pattern || pat_minus != base_pattern {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * cfg.step);
        report.max_rel_error = report.max_rel_error.max(relative_error(grads[t][i], numeric));
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{Conv2d, Dense, Layer};
    use crate::nn::network::{build_autoencoder_with, build_classifier_with, ClassifierSpec, NetKind};
    use rand::Rng;

    fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn tiny_spec() -> ClassifierSpec {
        ClassifierSpec { input_ch: 2, height: 16, width: 16, conv_widths: [4, 6, 8], dense_units: 8, dropout: 0.3 }
    }

    #[test]
    fn tiny_classifier_passes() {
        let net = build_classifier_with(&tiny_spec(), 3).unwrap();
        let x = random_tensor(vec![3, 2, 16, 16], 1);
        let r = gradient_check(&net, &x, &[1.0, 0.0, 1.0], LossKind::LogLoss, &GradCheckConfig::default()).unwrap();
        assert!(r.checked >= 200);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn tiny_autoencoder_passes() {
        let net = build_autoencoder_with(&tiny_spec(), 4).unwrap();
        let x = random_tensor(vec![2, 2, 16, 16], 2);
        let target = x.data().to_vec();
        let r = gradient_check(&net, &x, &target, LossKind::Mse, &GradCheckConfig::default()).unwrap();
        assert!(r.checked >= 200);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn dense_only_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layers = vec![
            Layer::Dense(Dense::he_uniform(6, 5, &mut rng)),
            Layer::Sigmoid,
            Layer::Dense(Dense::he_uniform(5, 1, &mut rng)),
            Layer::Sigmoid,
        ];
        let net = Network::new(NetKind::Custom, vec![6], layers).unwrap();
        let x = random_tensor(vec![4, 6], 3);
        let r = gradient_check(&net, &x, &[1.0, 0.0, 0.0, 1.0], LossKind::LogLoss, &GradCheckConfig::default())
            .unwrap();
        assert_eq!(r.checked, net.param_count());
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    fn flip_kernels(net: &Network) -> Network {
        let mut out = net.clone();
        for layer in &mut out.layers {
            if let Layer::Conv2d(Conv2d { weight, .. }) = layer {
                for k in weight.chunks_exact_mut(9) {
                    k.reverse();
                }
            }
        }
        out
    }

    #[test]
    fn flipped_kernel_backward_is_caught() {
        let net = build_classifier_with(&tiny_spec(), 3).unwrap();
        let x = random_tensor(vec![3, 2, 16, 16], 1);
        let y = [1.0, 0.0, 1.0];
        let (out, trace) = net.forward_traced(&x, Mode::Eval).unwrap();
        let g = Tensor::new(out.shape().to_vec(), LossKind::LogLoss.gradient(out.data(), &y)).unwrap();
        let corrupted = flip_kernels(&net).backward(&trace, &g).unwrap();
        let r = gradient_check_against(&net, &x, &y, LossKind::LogLoss, &corrupted, &GradCheckConfig::default())
            .unwrap();
        assert!(r.max_rel_error > 1e-2, "{r:?}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1.0, 0.5), 0.5);
        assert!((relative_error(1e-10, 0.0) - 1e-2).abs() < 1e-15);
    }
}
