use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::linalg::{axpy, dot, gemm_acc};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// 3x3 convolution, stride 1, zero "same" padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `[out_ch][in_ch][3][3]`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub const KERNEL: usize = 3;

    pub fn he_uniform(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_ch * 9;
        Self { in_ch, out_ch, weight: he_uniform(fan_in, out_ch * fan_in, rng), bias: vec![0.0; out_ch] }
    }

    fn patch(&self) -> usize {
        self.in_ch * 9
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `[outputs][inputs]`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn he_uniform(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { inputs, outputs, weight: he_uniform(inputs, inputs * outputs, rng), bias: vec![0.0; outputs] }
    }
}

fn he_uniform(fan_in: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..count).map(|_| rng.random_range(-limit..limit)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv2d(Conv2d),
    Relu,
    /// 2x2 max pooling, stride 2, odd trailing rows/columns dropped.
    MaxPool2,
    /// Inverted dropout; identity outside training.
    Dropout { rate: f64 },
    Flatten,
    Dense(Dense),
    Sigmoid,
    /// Nearest-neighbour resize to a fixed spatial size.
    Upsample { height: usize, width: usize },
}

/// What a layer remembers from a forward pass for its backward pass.
#[derive(Clone, Debug)]
pub(crate) enum Cache {
    Conv { cols: Vec<f64>, in_shape: [usize; 3] },
    Relu { active: Vec<bool> },
    Pool { argmax: Vec<usize>, in_shape: [usize; 3] },
    Dropout { scale: Option<Vec<f64>> },
    Flatten { in_shape: Vec<usize> },
    Dense { input: Vec<f64> },
    Sigmoid { output: Vec<f64> },
    Upsample { in_shape: [usize; 3] },
}

impl Cache {
    /// Discrete choices made by the forward pass (ReLU gates, pooling
    /// winners). Two passes with equal patterns lie on the same smooth piece.
    pub(crate) fn pattern(&self, out: &mut Vec<u64>) {
        match self {
            Cache::Relu { active } => out.extend(active.iter().map(|&a| a as u64)),
            Cache::Pool { argmax, .. } => out.extend(argmax.iter().map(|&i| i as u64)),
            _ => {}
        }
    }
}

fn chw(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        _ => Err(Error::Dimension(format!("expected a [channels, height, width] item, got {shape:?}"))),
    }
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool2 => "maxpool2",
            Layer::Dropout { .. } => "dropout",
            Layer::Flatten => "flatten",
            Layer::Dense(_) => "dense",
            Layer::Sigmoid => "sigmoid",
            Layer::Upsample { .. } => "upsample",
        }
    }

    /// Shape of one output item given one input item (batch dimension excluded).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv2d(conv) => {
                let [c, h, w] = chw(input)?;
                if c != conv.in_ch {
                    return Err(Error::Dimension(format!("conv expects {} channels, got {c}", conv.in_ch)));
                }
                Ok(vec![conv.out_ch, h, w])
            }
            Layer::MaxPool2 => {
                let [c, h, w] = chw(input)?;
                if h < 2 || w < 2 {
                    return Err(Error::Dimension(format!("cannot pool a {h}x{w} map")));
                }
                Ok(vec![c, h / 2, w / 2])
            }
            Layer::Upsample { height, width } => {
                let [c, h, w] = chw(input)?;
                if *height < h || *width < w {
                    return Err(Error::Dimension(format!("upsample {h}x{w} to smaller {height}x{width}")));
                }
                Ok(vec![c, *height, *width])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Dense(d) => {
                if input != [d.inputs] {
                    return Err(Error::Dimension(format!("dense expects [{}], got {input:?}", d.inputs)));
                }
                Ok(vec![d.outputs])
            }
            Layer::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::invalid(format!("dropout rate {rate} not in [0, 1)")));
                }
                Ok(input.to_vec())
            }
            Layer::Relu | Layer::Sigmoid => Ok(input.to_vec()),
        }
    }

    pub(crate) fn params(&self) -> Vec<&[f64]> {
        match self {
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            _ => vec![],
        }
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            _ => vec![],
        }
    }

    /// Forward over a batch. `rng` feeds dropout masks when `train` is set;
    /// the cache is only built when `keep` is set.
    pub(crate) fn forward(
        &self,
        x: &Tensor,
        train: bool,
        rng: &mut ChaCha8Rng,
        keep: bool,
    ) -> (Tensor, Option<Cache>) {
        let n = x.batch();
        match self {
            Layer::Conv2d(conv) => {
                let [c, h, w] = [x.shape()[1], x.shape()[2], x.shape()[3]];
                let (k, p, o) = (conv.patch(), h * w, conv.out_ch);
                let mut out = vec![0.0; n * o * p];
                let mut cols = if keep { vec![0.0; n * k * p] } else { Vec::new() };
                let mut scratch = if keep { Vec::new() } else { vec![0.0; k * p] };
                for s in 0..n {
                    let col: &mut [f64] = if keep { &mut cols[s * k * p..(s + 1) * k * p] } else { &mut scratch };
                    im2col(&x.data()[s * c * p..(s + 1) * c * p], c, h, w, col);
                    let dst = &mut out[s * o * p..(s + 1) * o * p];
                    for (row, &b) in dst.chunks_exact_mut(p).zip(&conv.bias) {
                        row.fill(b);
                    }
                    gemm_acc(&conv.weight, col, dst, o, k, p);
                }
                let cache = keep.then(|| Cache::Conv { cols, in_shape: [c, h, w] });
                (Tensor::from_parts(vec![n, o, h, w], out), cache)
            }
            Layer::Relu => {
                let out: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                let cache = keep.then(|| Cache::Relu { active: x.data().iter().map(|&v| v > 0.0).collect() });
                (Tensor::from_parts(x.shape().to_vec(), out), cache)
            }
            Layer::MaxPool2 => {
                let [c, h, w] = [x.shape()[1], x.shape()[2], x.shape()[3]];
                let (h2, w2) = (h / 2, w / 2);
                let mut out = Vec::with_capacity(n * c * h2 * w2);
                let mut argmax = Vec::with_capacity(if keep { n * c * h2 * w2 } else { 0 });
                let data = x.data();
                for plane in 0..n * c {
                    let base = plane * h * w;
                    for r in 0..h2 {
                        for col in 0..w2 {
                            let i0 = base + 2 * r * w + 2 * col;
                            let mut best = i0;
                            for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                                if data[cand] > data[best] {
                                    best = cand;
                                }
                            }
                            out.push(data[best]);
                            if keep {
                                argmax.push(best);
                            }
                        }
                    }
                }
                let cache = keep.then(|| Cache::Pool { argmax, in_shape: [c, h, w] });
                (Tensor::from_parts(vec![n, c, h2, w2], out), cache)
            }
            Layer::Dropout { rate } => {
                if !train || *rate == 0.0 {
                    return (x.clone(), keep.then_some(Cache::Dropout { scale: None }));
                }
                let keep_prob = 1.0 - rate;
                let scale: Vec<f64> = (0..x.len())
                    .map(|_| if rng.random::<f64>() < keep_prob { 1.0 / keep_prob } else { 0.0 })
                    .collect();
                let out = x.data().iter().zip(&scale).map(|(v, s)| v * s).collect();
                (Tensor::from_parts(x.shape().to_vec(), out), keep.then_some(Cache::Dropout { scale: Some(scale) }))
            }
            Layer::Flatten => {
                let cache = keep.then(|| Cache::Flatten { in_shape: x.shape().to_vec() });
                (Tensor::from_parts(vec![n, x.item_len()], x.data().to_vec()), cache)
            }
            Layer::Dense(d) => {
                let mut out = Vec::with_capacity(n * d.outputs);
                for row in x.data().chunks_exact(d.inputs) {
                    for (wrow, &b) in d.weight.chunks_exact(d.inputs).zip(&d.bias) {
                        out.push(b + dot(wrow, row));
                    }
                }
                let cache = keep.then(|| Cache::Dense { input: x.data().to_vec() });
                (Tensor::from_parts(vec![n, d.outputs], out), cache)
            }
            Layer::Sigmoid => {
                let out: Vec<f64> = x.data().iter().map(|&v| crate::gbm::sigmoid(v)).collect();
                let cache = keep.then(|| Cache::Sigmoid { output: out.clone() });
                (Tensor::from_parts(x.shape().to_vec(), out), cache)
            }
            Layer::Upsample { height, width } => {
                let [c, h, w] = [x.shape()[1], x.shape()[2], x.shape()[3]];
                let (ht, wt) = (*height, *width);
                let mut out = Vec::with_capacity(n * c * ht * wt);
                for plane in x.data().chunks_exact(h * w) {
                    for r in 0..ht {
                        let src = &plane[(r * h / ht) * w..];
                        out.extend((0..wt).map(|col| src[col * w / wt]));
                    }
                }
                let cache = keep.then_some(Cache::Upsample { in_shape: [c, h, w] });
                (Tensor::from_parts(vec![n, c, ht, wt], out), cache)
            }
        }
    }

    /// Accumulates parameter gradients into `grads` (weight, bias order) and
    /// returns the gradient with respect to the layer input when asked.
    pub(crate) fn backward(
        &self,
        cache: &Cache,
        dy: &Tensor,
        need_dx: bool,
        grads: &mut [Vec<f64>],
    ) -> Option<Tensor> {
        let n = dy.batch();
        match (self, cache) {
            (Layer::Conv2d(conv), Cache::Conv { cols, in_shape }) => {
                let [c, h, w] = *in_shape;
                let (k, p, o) = (conv.patch(), h * w, conv.out_ch);
                let (gw, gb) = grads.split_at_mut(1);
                let (gw, gb) = (&mut gw[0], &mut gb[0]);
                let mut weight_t = Vec::new();
                if need_dx {
                    weight_t = vec![0.0; k * o];
                    for oi in 0..o {
                        for ki in 0..k {
                            weight_t[ki * o + oi] = conv.weight[oi * k + ki];
                        }
                    }
                }
                let mut dx = if need_dx { vec![0.0; n * c * p] } else { Vec::new() };
                let mut dcol = vec![0.0; if need_dx { k * p } else { 0 }];
                for s in 0..n {
                    let col = &cols[s * k * p..(s + 1) * k * p];
                    let dout = &dy.data()[s * o * p..(s + 1) * o * p];
                    for (oi, drow) in dout.chunks_exact(p).enumerate() {
                        gb[oi] += drow.iter().sum::<f64>();
                        for (ki, crow) in col.chunks_exact(p).enumerate() {
                            gw[oi * k + ki] += dot(drow, crow);
                        }
                    }
                    if need_dx {
                        dcol.fill(0.0);
                        gemm_acc(&weight_t, dout, &mut dcol, k, o, p);
                        col2im(&dcol, c, h, w, &mut dx[s * c * p..(s + 1) * c * p]);
                    }
                }
                need_dx.then(|| Tensor::from_parts(vec![n, c, h, w], dx))
            }
            (Layer::Relu, Cache::Relu { active }) => {
                let dx = dy.data().iter().zip(active).map(|(&g, &a)| if a { g } else { 0.0 }).collect();
                Some(Tensor::from_parts(dy.shape().to_vec(), dx))
            }
            (Layer::MaxPool2, Cache::Pool { argmax, in_shape }) => {
                let [c, h, w] = *in_shape;
                let mut dx = vec![0.0; n * c * h * w];
                for (&i, &g) in argmax.iter().zip(dy.data()) {
                    dx[i] += g;
                }
                Some(Tensor::from_parts(vec![n, c, h, w], dx))
            }
            (Layer::Dropout { .. }, Cache::Dropout { scale }) => match scale {
                None => Some(dy.clone()),
                Some(s) => Some(Tensor::from_parts(
                    dy.shape().to_vec(),
                    dy.data().iter().zip(s).map(|(g, m)| g * m).collect(),
                )),
            },
            (Layer::Flatten, Cache::Flatten { in_shape }) => {
                Some(Tensor::from_parts(in_shape.clone(), dy.data().to_vec()))
            }
            (Layer::Dense(d), Cache::Dense { input }) => {
                let (gw, gb) = grads.split_at_mut(1);
                let (gw, gb) = (&mut gw[0], &mut gb[0]);
                let mut dx = if need_dx { vec![0.0; n * d.inputs] } else { Vec::new() };
                for s in 0..n {
                    let xrow = &input[s * d.inputs..(s + 1) * d.inputs];
                    for o in 0..d.outputs {
                        let g = dy.data()[s * d.outputs + o];
                        gb[o] += g;
                        axpy(g, xrow, &mut gw[o * d.inputs..(o + 1) * d.inputs]);
                        if need_dx {
                            axpy(g, &d.weight[o * d.inputs..(o + 1) * d.inputs], &mut dx[s * d.inputs..(s + 1) * d.inputs]);
                        }
                    }
                }
                need_dx.then(|| Tensor::from_parts(vec![n, d.inputs], dx))
            }
            (Layer::Sigmoid, Cache::Sigmoid { output }) => Some(Tensor::from_parts(
                dy.shape().to_vec(),
                dy.data().iter().zip(output).map(|(g, p)| g * p * (1.0 - p)).collect(),
            )),
            (Layer::Upsample { height, width }, Cache::Upsample { in_shape }) => {
                let [c, h, w] = *in_shape;
                let (ht, wt) = (*height, *width);
                let mut dx = vec![0.0; n * c * h * w];
                for (plane, gplane) in dx.chunks_exact_mut(h * w).zip(dy.data().chunks_exact(ht * wt)) {
                    for r in 0..ht {
                        let sr = r * h / ht;
                        for col in 0..wt {
                            plane[sr * w + col * w / wt] += gplane[r * wt + col];
                        }
                    }
                }
                Some(Tensor::from_parts(vec![n, c, h, w], dx))
            }
            _ => unreachable!("layer/cache mismatch"),
        }
    }
}

/// Unfolds 3x3 zero-padded neighbourhoods: row `c*9 + ki*3 + kj` of `col`
/// holds `x[c, r+ki-1, col+kj-1]` for every output pixel.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, col: &mut [f64]) {
    let p = h * w;
    for ch in 0..c {
        let plane = &x[ch * p..(ch + 1) * p];
        for ki in 0..3 {
            for kj in 0..3 {
                let dst = &mut col[(ch * 9 + ki * 3 + kj) * p..(ch * 9 + ki * 3 + kj + 1) * p];
                for r in 0..h {
                    let drow = &mut dst[r * w..(r + 1) * w];
                    let sr = r as isize + ki as isize - 1;
                    if sr < 0 || sr >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &plane[sr as usize * w..(sr as usize + 1) * w];
                    match kj {
                        0 => {
                            drow[0] = 0.0;
                            drow[1..].copy_from_slice(&srow[..w - 1]);
                        }
                        1 => drow.copy_from_slice(srow),
                        _ => {
                            drow[..w - 1].copy_from_slice(&srow[1..]);
                            drow[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im(col: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let p = h * w;
    for ch in 0..c {
        let plane = &mut dx[ch * p..(ch + 1) * p];
        for ki in 0..3 {
            for kj in 0..3 {
                let src = &col[(ch * 9 + ki * 3 + kj) * p..(ch * 9 + ki * 3 + kj + 1) * p];
                for r in 0..h {
                    let sr = r as isize + ki as isize - 1;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let grow = &src[r * w..(r + 1) * w];
                    let prow = &mut plane[sr as usize * w..(sr as usize + 1) * w];
                    match kj {
                        0 => {
                            for (pv, gv) in prow[..w - 1].iter_mut().zip(&grow[1..]) {
                                *pv += gv;
                            }
                        }
                        1 => {
                            for (pv, gv) in prow.iter_mut().zip(grow) {
                                *pv += gv;
                            }
                        }
                        _ => {
                            for (pv, gv) in prow[1..].iter_mut().zip(&grow[..w - 1]) {
                                *pv += gv;
                            }
                        }
                    }
                }
            }
        }
    }
}
