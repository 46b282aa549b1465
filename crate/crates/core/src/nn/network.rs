use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Cache, Conv2d, Dense, Layer};
use super::optim::{adam_step, AdamConfig, AdamState};
use super::tensor::Tensor;
use super::train::Preprocessing;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Classifier,
    Autoencoder,
    Custom,
}

/// An ordered layer stack with per-parameter Adam state.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub kind: NetKind,
    /// `[channels, height, width]` or `[features]` for one input item.
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    /// One entry per parameter tensor, in [`Network::params`] order.
    pub adam: Vec<AdamState>,
    /// Channel recipe and standardization fitted on the training set.
    pub preprocessing: Option<Preprocessing>,
}

/// Gradient for every parameter tensor, in [`Network::params`] order.
pub type Gradients = Vec<Vec<f64>>;

/// Per-layer caches from a forward pass.
pub struct Trace {
    caches: Vec<Cache>,
}

impl Trace {
    /// ReLU gates and pooling winners of the pass, flattened.
    pub fn activation_pattern(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for c in &self.caches {
            c.pattern(&mut out);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Eval,
    /// Training forward; dropout masks are drawn from this seed.
    Train { seed: u64 },
}

/// Shape and width choices for the reference classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub input_ch: usize,
    pub height: usize,
    pub width: usize,
    pub conv_widths: [usize; 3],
    pub dense_units: usize,
    pub dropout: f64,
}

impl ClassifierSpec {
    pub fn reference(input_ch: usize) -> Self {
        Self::sized(input_ch, 75, 75)
    }

    pub fn sized(input_ch: usize, height: usize, width: usize) -> Self {
        Self { input_ch, height, width, conv_widths: [16, 32, 64], dense_units: 64, dropout: 0.3 }
    }
}

impl Network {
    pub fn new(kind: NetKind, input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let mut shape = input_shape.clone();
        for layer in &layers {
            shape = layer.output_shape(&shape)?;
        }
        let adam = layers.iter().flat_map(|l| l.params()).map(|p| AdamState::new(p.len())).collect();
        Ok(Self { kind, input_shape, layers, adam, preprocessing: None })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            shape = layer.output_shape(&shape).expect("validated at construction");
        }
        shape
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grads(&self) -> Gradients {
        self.params().iter().map(|p| vec![0.0; p.len()]).collect()
    }

    pub fn reset_optimizer(&mut self) {
        self.adam = self.params().iter().map(|p| AdamState::new(p.len())).collect();
    }

    pub fn conv_layers(&self) -> Vec<&Conv2d> {
        self.layers
            .iter()
            .filter_map(|l| if let Layer::Conv2d(c) = l { Some(c) } else { None })
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::Dimension(format!(
                "network expects [N, {:?}], got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        if x.batch() == 0 {
            return Err(Error::Dimension("empty batch".into()));
        }
        Ok(())
    }

    /// Forward without caches.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(x)?;
        let (train, seed) = match mode {
            Mode::Eval => (false, 0),
            Mode::Train { seed } => (true, seed),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur, train, &mut rng, false).0;
        }
        Ok(cur)
    }

    /// Forward that records what backward needs.
    pub fn forward_traced(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Trace)> {
        self.check_input(x)?;
        let (train, seed) = match mode {
            Mode::Eval => (false, 0),
            Mode::Train { seed } => (true, seed),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (out, cache) = layer.forward(&cur, train, &mut rng, true);
            caches.push(cache.expect("traced forward keeps caches"));
            cur = out;
        }
        Ok((cur, Trace { caches }))
    }

    /// Backpropagates `grad_out` (dLoss/dOutput) through a traced pass.
    pub fn backward(&self, trace: &Trace, grad_out: &Tensor) -> Result<Gradients> {
        let expected: Vec<usize> = self.output_shape();
        if grad_out.shape()[1..] != expected[..] {
            return Err(Error::Dimension(format!(
                "output gradient {:?} does not match output item {expected:?}",
                grad_out.shape()
            )));
        }
        let mut grads = self.zero_grads();
        // Parameter tensors of layer i start at offsets[i].
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for l in &self.layers {
            offsets.push(acc);
            acc += l.params().len();
        }
        // Layers before the first parameterized one need no input gradient.
        let first_param = self.layers.iter().position(|l| !l.params().is_empty()).unwrap_or(0);

        let mut dy = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let n_params = layer.params().len();
            let slot = &mut grads[offsets[i]..offsets[i] + n_params];
            let need_dx = i > first_param;
            match layer.backward(&trace.caches[i], &dy, need_dx, slot) {
                Some(dx) => dy = dx,
                None => break,
            }
            if !need_dx {
                break;
            }
        }
        Ok(grads)
    }

    /// One Adam update of every parameter tensor.
    pub fn apply_adam(&mut self, grads: &Gradients, lr: f64, cfg: &AdamConfig) -> Result<()> {
        let mut states = std::mem::take(&mut self.adam);
        let result = (|| {
            let params = self.params_mut();
            if params.len() != grads.len() || states.len() != grads.len() {
                return Err(Error::Dimension("gradient/parameter count mismatch".into()));
            }
            for ((p, g), st) in params.into_iter().zip(grads).zip(states.iter_mut()) {
                adam_step(p, g, st, lr, cfg)?;
            }
            Ok(())
        })();
        self.adam = states;
        result
    }
}

/// `[conv 3x3, relu, pool] x 3 -> flatten -> dropout -> dense, relu ->
/// dropout -> dense 1 -> sigmoid`, He-uniform weights and zero biases.
pub fn build_classifier_with(spec: &ClassifierSpec, seed: u64) -> Result<Network> {
    if spec.input_ch == 0 {
        return Err(Error::invalid("classifier needs at least one input channel"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let (mut ch, mut h, mut w) = (spec.input_ch, spec.height, spec.width);
    for &out in &spec.conv_widths {
        layers.push(Layer::Conv2d(Conv2d::he_uniform(ch, out, &mut rng)));
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool2);
        ch = out;
        h /= 2;
        w /= 2;
    }
    if h == 0 || w == 0 {
        return Err(Error::Dimension(format!("{}x{} input is too small for three pools", spec.height, spec.width)));
    }
    layers.push(Layer::Flatten);
    layers.push(Layer::Dropout { rate: spec.dropout });
    layers.push(Layer::Dense(Dense::he_uniform(ch * h * w, spec.dense_units, &mut rng)));
    layers.push(Layer::Relu);
    layers.push(Layer::Dropout { rate: spec.dropout });
    layers.push(Layer::Dense(Dense::he_uniform(spec.dense_units, 1, &mut rng)));
    layers.push(Layer::Sigmoid);
    Network::new(NetKind::Classifier, vec![spec.input_ch, spec.height, spec.width], layers)
}

/// Reference classifier for 75x75 scenes.
pub fn build_classifier(input_ch: usize, seed: u64) -> Result<Network> {
    build_classifier_with(&ClassifierSpec::reference(input_ch), seed)
}

/// Convolutional autoencoder whose encoder matches the classifier trunk.
/// The decoder mirrors it with nearest upsampling back to each encoder
/// resolution followed by 3x3 convolutions; the last one is linear.
pub fn build_autoencoder_with(spec: &ClassifierSpec, seed: u64) -> Result<Network> {
    if spec.input_ch == 0 {
        return Err(Error::invalid("autoencoder needs at least one input channel"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut sizes = vec![(spec.height, spec.width)];
    let mut ch = spec.input_ch;
    for &out in &spec.conv_widths {
        layers.push(Layer::Conv2d(Conv2d::he_uniform(ch, out, &mut rng)));
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool2);
        let (h, w) = *sizes.last().unwrap();
        sizes.push((h / 2, w / 2));
        ch = out;
    }
    if sizes.last().is_some_and(|&(h, w)| h == 0 || w == 0) {
        return Err(Error::Dimension("input too small for three pools".into()));
    }
    let mut targets: Vec<usize> = spec.conv_widths[..2].iter().rev().copied().collect();
    targets.push(spec.input_ch);
    for (step, out) in targets.into_iter().enumerate() {
        let (h, w) = sizes[sizes.len() - 2 - step];
        layers.push(Layer::Upsample { height: h, width: w });
        layers.push(Layer::Conv2d(Conv2d::he_uniform(ch, out, &mut rng)));
        if step < 2 {
            layers.push(Layer::Relu);
        }
        ch = out;
    }
    Network::new(NetKind::Autoencoder, vec![spec.input_ch, spec.height, spec.width], layers)
}

pub fn build_autoencoder(input_ch: usize, seed: u64) -> Result<Network> {
    build_autoencoder_with(&ClassifierSpec::reference(input_ch), seed)
}

/// Copies the autoencoder's encoder convolutions into the classifier's
/// convolutional trunk, leaving the dense head as initialized and resetting
/// the optimizer. On error `clf` is returned untouched.
pub fn transfer_encoder(ae: &Network, clf: &Network) -> Result<Network> {
    if ae.input_shape != clf.input_shape {
        return Err(Error::Dimension(format!(
            "autoencoder input {:?} vs classifier input {:?}",
            ae.input_shape, clf.input_shape
        )));
    }
    let clf_convs = clf.conv_layers();
    let ae_convs = ae.conv_layers();
    if ae_convs.len() < clf_convs.len() {
        return Err(Error::Dimension("autoencoder has fewer convolutions than the classifier trunk".into()));
    }
    for (i, (a, c)) in ae_convs.iter().zip(&clf_convs).enumerate() {
        if a.in_ch != c.in_ch || a.out_ch != c.out_ch {
            return Err(Error::Dimension(format!(
                "conv {i}: encoder {}->{} vs classifier {}->{}",
                a.in_ch, a.out_ch, c.in_ch, c.out_ch
            )));
        }
    }
    let mut out = clf.clone();
    let mut source = ae_convs.into_iter();
    for layer in &mut out.layers {
        if let Layer::Conv2d(c) = layer {
            let src = source.next().expect("checked above");
            c.weight.clone_from(&src.weight);
            c.bias.clone_from(&src.bias);
        }
    }
    out.reset_optimizer();
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    kind: NetKind,
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    #[serde(default)]
    preprocessing: Option<Preprocessing>,
}

/// JSON checkpoint: architecture with parameters and input preprocessing.
/// Optimizer state is not stored.
pub fn save_network(net: &Network) -> Result<Vec<u8>> {
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        kind: net.kind,
        input_shape: net.input_shape.clone(),
        layers: net.layers.clone(),
        preprocessing: net.preprocessing.clone(),
    };
    Ok(serde_json::to_vec(&ck)?)
}

pub fn load_network(bytes: &[u8]) -> Result<Network> {
    let ck: Checkpoint = serde_json::from_slice(bytes)?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("network checkpoint version {}", ck.version)));
    }
    for layer in &ck.layers {
        let ok = match layer {
            Layer::Conv2d(c) => c.weight.len() == c.out_ch * c.in_ch * 9 && c.bias.len() == c.out_ch,
            Layer::Dense(d) => d.weight.len() == d.inputs * d.outputs && d.bias.len() == d.outputs,
            _ => true,
        };
        if !ok {
            return Err(Error::Format(format!("{} layer has wrongly sized parameters", layer.name())));
        }
    }
    let mut net = Network::new(ck.kind, ck.input_shape, ck.layers)?;
    net.preprocessing = ck.preprocessing;
    Ok(net)
}
