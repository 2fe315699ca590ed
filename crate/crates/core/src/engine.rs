//! Minimal differentiable conv/fc network with masked SGD training.
//!
//! Activations are ReLU after every layer except the classifier; the loss is
//! batch-mean softmax cross-entropy. Masks are applied densely: the forward
//! pass multiplies in effective weights `w ⊙ m`, and every gradient, weight
//! and momentum entry at a masked position is written as `0.0` (never `-0.0`).

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{LayerKind, NetworkSpec, Pool, Shape3};
use crate::mask::{Mask, MaskError, Reader};
use crate::rng;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {label} at sample {index} outside [0, {classes})")]
    Label { index: usize, label: usize, classes: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("sparsity {0} outside [0, 1)")]
    Domain(f64),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// Per-layer real tensors, flattened row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensors(pub Vec<Vec<f64>>);

impl Tensors {
    pub fn zeros_like(other: &Tensors) -> Tensors {
        Tensors(other.0.iter().map(|t| vec![0.0; t.len()]).collect())
    }

    pub fn dot(&self, other: &Tensors) -> f64 {
        self.0.iter().zip(&other.0).flat_map(|(a, b)| a.iter().zip(b)).map(|(x, y)| x * y).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self + alpha · other`
    pub fn axpy(&self, alpha: f64, other: &Tensors) -> Tensors {
        Tensors(self.0.iter().zip(&other.0).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + alpha * y).collect()).collect())
    }

    pub fn hadamard(&self, other: &Tensors) -> Tensors {
        Tensors(self.0.iter().zip(&other.0).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).collect()).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensors {
        Tensors(self.0.iter().map(|t| t.iter().map(|&x| f(x)).collect()).collect())
    }

    pub fn len(&self) -> usize {
        self.0.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamState {
    pub weights: Tensors,
    pub biases: Tensors,
    pub momentum_w: Tensors,
    pub momentum_b: Tensors,
    pub init_seed: u64,
}

impl ParamState {
    pub fn zeros(net: &NetworkSpec) -> ParamState {
        let weights = Tensors(net.layers().iter().map(|l| vec![0.0; l.param_count()]).collect());
        let biases = Tensors(net.layers().iter().map(|l| vec![0.0; l.bias_len()]).collect());
        ParamState { momentum_w: Tensors::zeros_like(&weights), momentum_b: Tensors::zeros_like(&biases), weights, biases, init_seed: 0 }
    }

    /// Zeroes weights and momentum at masked positions.
    pub fn apply_mask(&mut self, mask: &Mask) {
        for ((w, m), lm) in self.weights.0.iter_mut().zip(self.momentum_w.0.iter_mut()).zip(&mask.layers) {
            for ((wi, mi), &keep) in w.iter_mut().zip(m.iter_mut()).zip(&lm.bits) {
                if !keep {
                    *wi = 0.0;
                    *mi = 0.0;
                }
            }
        }
    }

    pub fn check_against(&self, net: &NetworkSpec) -> Result<(), EngineError> {
        let ok = self.weights.0.len() == net.layers().len()
            && net.layers().iter().zip(&self.weights.0).all(|(l, w)| w.len() == l.param_count())
            && net.layers().iter().zip(&self.biases.0).all(|(l, b)| b.len() == l.bias_len())
            && self.biases.0.len() == net.layers().len();
        if ok {
            Ok(())
        } else {
            Err(EngineError::Shape("parameters do not match network".into()))
        }
    }
}

/// Kaiming-normal (fan-in) weights, zero biases. Layer `i` draws from stream `(seed, i)`.
pub fn init_params(net: &NetworkSpec, seed: u64) -> ParamState {
    let mut state = ParamState::zeros(net);
    state.init_seed = seed;
    for (i, (layer, w)) in net.layers().iter().zip(state.weights.0.iter_mut()).enumerate() {
        let fan_in = (layer.fan_in_channels * layer.kernel_w * layer.kernel_h) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let mut r = rng::stream(seed, i as u64);
        for x in w.iter_mut() {
            *x = normal.sample(&mut r);
        }
    }
    state
}

/// Inputs are `(N, C·H·W)` row-major; labels are class indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub sample_len: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, sample_len: usize) -> Result<Batch, EngineError> {
        if sample_len == 0 || inputs.len() != labels.len() * sample_len {
            return Err(EngineError::Shape(format!("{} inputs for {} labels of length {sample_len}", inputs.len(), labels.len())));
        }
        Ok(Batch { inputs, labels, sample_len })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.sample_len..(i + 1) * self.sample_len]
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(indices.len() * self.sample_len);
        for &i in indices {
            inputs.extend_from_slice(self.sample(i));
        }
        Batch { inputs, labels: indices.iter().map(|&i| self.labels[i]).collect(), sample_len: self.sample_len }
    }

    /// First `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Batch {
        let n = n.min(self.len());
        Batch { inputs: self.inputs[..n * self.sample_len].to_vec(), labels: self.labels[..n].to_vec(), sample_len: self.sample_len }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lr_decay_factor: f64,
    pub decay_milestones: Vec<usize>,
    pub weight_decay: f64,
}

impl TrainConfig {
    /// CIFAR ResNet recipe (160 epochs, batch 128, LR 0.1, momentum 0.9,
    /// 10× decay at [80, 120], weight decay 5e-4).
    pub fn cifar_resnet() -> TrainConfig {
        TrainConfig {
            epochs: 160,
            batch_size: 128,
            learning_rate: 0.1,
            momentum: 0.9,
            lr_decay_factor: 10.0,
            decay_milestones: vec![80, 120],
            weight_decay: 5e-4,
        }
    }

    /// Desk-scale scaling of the CIFAR recipe, same 10× decay structure.
    pub fn desk() -> TrainConfig {
        TrainConfig { epochs: 40, batch_size: 64, decay_milestones: vec![20, 30], ..TrainConfig::cifar_resnet() }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let err = |m: &str| Err(EngineError::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return err("epochs and batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err("momentum must be in [0, 1)");
        }
        if !(self.lr_decay_factor >= 1.0 && self.lr_decay_factor.is_finite()) {
            return err("lr_decay_factor must be >= 1");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return err("weight_decay must be >= 0");
        }
        if self.decay_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return err("decay milestones must be strictly increasing");
        }
        if self.decay_milestones.iter().any(|&m| m == 0 || m >= self.epochs) {
            return err("decay milestones must lie in (0, epochs)");
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch: divided by the decay factor once for
    /// every milestone already reached.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.decay_milestones.iter().filter(|&&m| epoch >= m).count();
        self.learning_rate / self.lr_decay_factor.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Tensors,
    pub biases: Tensors,
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    kind: LayerKind,
    input: Shape3,
    out_c: usize,
    kh: usize,
    kw: usize,
    pool: Pool,
    relu: bool,
    has_bias: bool,
}

fn geometry(net: &NetworkSpec) -> Vec<Geom> {
    let shapes = net.input_shapes();
    let last = net.layers().len() - 1;
    net.layers()
        .iter()
        .zip(shapes)
        .enumerate()
        .map(|(i, (l, input))| Geom {
            kind: l.kind,
            input,
            out_c: l.fan_out_channels,
            kh: l.kernel_h,
            kw: l.kernel_w,
            pool: l.pool,
            relu: i != last,
            has_bias: l.has_bias,
        })
        .collect()
}

#[derive(Default, Clone)]
struct Cache {
    pre: Vec<f64>,
    post: Vec<f64>,
    out: Vec<f64>,
    argmax: Vec<usize>,
}

fn linear_forward(g: &Geom, w: &[f64], b: &[f64], x: &[f64], z: &mut Vec<f64>) {
    match g.kind {
        LayerKind::Fc => {
            let n_in = x.len();
            z.clear();
            z.extend((0..g.out_c).map(|o| {
                let row = &w[o * n_in..(o + 1) * n_in];
                let dot: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                if g.has_bias {
                    dot + b[o]
                } else {
                    dot
                }
            }));
        }
        LayerKind::Conv => {
            let (c_in, h, wd) = g.input;
            let (ph, pw) = ((g.kh - 1) / 2, (g.kw - 1) / 2);
            z.clear();
            z.resize(g.out_c * h * wd, 0.0);
            for o in 0..g.out_c {
                let plane = &mut z[o * h * wd..(o + 1) * h * wd];
                if g.has_bias {
                    plane.iter_mut().for_each(|v| *v = b[o]);
                }
                for i in 0..c_in {
                    let src = &x[i * h * wd..(i + 1) * h * wd];
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let wv = w[((o * c_in + i) * g.kh + ky) * g.kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            for y in 0..h {
                                let sy = y as isize + ky as isize - ph as isize;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                let srow = &src[sy as usize * wd..(sy as usize + 1) * wd];
                                let drow = &mut plane[y * wd..(y + 1) * wd];
                                for (xx, d) in drow.iter_mut().enumerate() {
                                    let sx = xx as isize + kx as isize - pw as isize;
                                    if sx >= 0 && sx < wd as isize {
                                        *d += wv * srow[sx as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients and, when `dx` is given, input gradients.
fn linear_backward(g: &Geom, w: &[f64], x: &[f64], dz: &[f64], dw: &mut [f64], db: &mut [f64], dx: Option<&mut Vec<f64>>) {
    match g.kind {
        LayerKind::Fc => {
            let n_in = x.len();
            let mut dx = dx;
            if let Some(d) = dx.as_deref_mut() {
                d.clear();
                d.resize(n_in, 0.0);
            }
            for (o, &dzo) in dz.iter().enumerate() {
                if dzo == 0.0 {
                    continue;
                }
                if g.has_bias {
                    db[o] += dzo;
                }
                let drow = &mut dw[o * n_in..(o + 1) * n_in];
                for (d, &xi) in drow.iter_mut().zip(x) {
                    *d += dzo * xi;
                }
                if let Some(d) = dx.as_deref_mut() {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    for (di, &wi) in d.iter_mut().zip(row) {
                        *di += dzo * wi;
                    }
                }
            }
        }
        LayerKind::Conv => {
            let (c_in, h, wd) = g.input;
            let (ph, pw) = ((g.kh - 1) / 2, (g.kw - 1) / 2);
            let mut dx = dx;
            if let Some(d) = dx.as_deref_mut() {
                d.clear();
                d.resize(c_in * h * wd, 0.0);
            }
            for o in 0..g.out_c {
                let plane = &dz[o * h * wd..(o + 1) * h * wd];
                if g.has_bias {
                    db[o] += plane.iter().sum::<f64>();
                }
                for i in 0..c_in {
                    let src = &x[i * h * wd..(i + 1) * h * wd];
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let widx = ((o * c_in + i) * g.kh + ky) * g.kw + kx;
                            let wv = w[widx];
                            let mut acc = 0.0;
                            for y in 0..h {
                                let sy = y as isize + ky as isize - ph as isize;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                let sy = sy as usize;
                                for xx in 0..wd {
                                    let sx = xx as isize + kx as isize - pw as isize;
                                    if sx < 0 || sx >= wd as isize {
                                        continue;
                                    }
                                    let d = plane[y * wd + xx];
                                    acc += d * src[sy * wd + sx as usize];
                                    if let Some(dxv) = dx.as_deref_mut() {
                                        dxv[i * h * wd + sy * wd + sx as usize] += wv * d;
                                    }
                                }
                            }
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
}

fn pool_forward(g: &Geom, post: &[f64], out: &mut Vec<f64>, argmax: &mut Vec<usize>) {
    let c = g.out_c;
    let (h, w) = match g.kind {
        LayerKind::Conv => (g.input.1, g.input.2),
        LayerKind::Fc => (1, 1),
    };
    out.clear();
    argmax.clear();
    match g.pool {
        Pool::None => out.extend_from_slice(post),
        Pool::Global => {
            let n = (h * w) as f64;
            out.extend((0..c).map(|ch| post[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / n));
        }
        Pool::Avg(k) | Pool::Max(k) => {
            let (oh, ow) = (h / k, w / k);
            for ch in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        let mut sum = 0.0;
                        for dy in 0..k {
                            for dx in 0..k {
                                let idx = ch * h * w + (y * k + dy) * w + x * k + dx;
                                let v = post[idx];
                                sum += v;
                                if v > best {
                                    best = v;
                                    best_i = idx;
                                }
                            }
                        }
                        if matches!(g.pool, Pool::Max(_)) {
                            out.push(best);
                            argmax.push(best_i);
                        } else {
                            out.push(sum / (k * k) as f64);
                        }
                    }
                }
            }
        }
    }
}

fn pool_backward(g: &Geom, d_out: &[f64], argmax: &[usize], d_post: &mut Vec<f64>) {
    let c = g.out_c;
    let (h, w) = match g.kind {
        LayerKind::Conv => (g.input.1, g.input.2),
        LayerKind::Fc => (1, 1),
    };
    d_post.clear();
    d_post.resize(c * h * w, 0.0);
    match g.pool {
        Pool::None => d_post.copy_from_slice(d_out),
        Pool::Global => {
            let n = (h * w) as f64;
            for ch in 0..c {
                let v = d_out[ch] / n;
                d_post[ch * h * w..(ch + 1) * h * w].iter_mut().for_each(|d| *d = v);
            }
        }
        Pool::Max(_) => {
            for (&src, &d) in argmax.iter().zip(d_out) {
                d_post[src] += d;
            }
        }
        Pool::Avg(k) => {
            let (oh, ow) = (h / k, w / k);
            let scale = 1.0 / (k * k) as f64;
            for ch in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        let d = d_out[(ch * oh + y) * ow + x] * scale;
                        for dy in 0..k {
                            for dx in 0..k {
                                d_post[ch * h * w + (y * k + dy) * w + x * k + dx] += d;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn effective_weights(params: &ParamState, mask: &Mask) -> Vec<Vec<f64>> {
    params
        .weights
        .0
        .iter()
        .zip(&mask.layers)
        .map(|(w, m)| w.iter().zip(&m.bits).map(|(&x, &keep)| if keep { x } else { 0.0 }).collect())
        .collect()
}

struct Model<'a> {
    geoms: Vec<Geom>,
    weights: Vec<Vec<f64>>,
    biases: &'a [Vec<f64>],
    caches: Vec<Cache>,
}

impl<'a> Model<'a> {
    fn new(net: &NetworkSpec, params: &'a ParamState, mask: &Mask) -> Result<Model<'a>, EngineError> {
        params.check_against(net)?;
        mask.check_against(net)?;
        let geoms = geometry(net);
        let caches = vec![Cache::default(); geoms.len()];
        Ok(Model { geoms, weights: effective_weights(params, mask), biases: &params.biases.0, caches })
    }

    fn forward(&mut self, x: &[f64]) -> &[f64] {
        for l in 0..self.geoms.len() {
            let (before, rest) = self.caches.split_at_mut(l);
            let cache = &mut rest[0];
            let input = if l == 0 { x } else { &before[l - 1].out };
            let g = &self.geoms[l];
            linear_forward(g, &self.weights[l], &self.biases[l], input, &mut cache.pre);
            cache.post.clear();
            if g.relu {
                cache.post.extend(cache.pre.iter().map(|&v| v.max(0.0)));
            } else {
                cache.post.extend_from_slice(&cache.pre);
            }
            pool_forward(g, &cache.post, &mut cache.out, &mut cache.argmax);
        }
        &self.caches.last().expect("non-empty network").out
    }

    /// Backpropagates `d_logits` for the sample last passed to `forward`.
    fn backward(&mut self, x: &[f64], d_logits: &[f64], grads: &mut Gradients, want_dx: bool) -> Option<Vec<f64>> {
        let mut d_out = d_logits.to_vec();
        let mut d_post = Vec::new();
        let mut d_in = Vec::new();
        for l in (0..self.geoms.len()).rev() {
            let g = self.geoms[l];
            let cache = &self.caches[l];
            pool_backward(&g, &d_out, &cache.argmax, &mut d_post);
            if g.relu {
                for (d, &z) in d_post.iter_mut().zip(&cache.pre) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = if l == 0 { x } else { &self.caches[l - 1].out };
            let need_dx = l > 0 || want_dx;
            linear_backward(
                &g,
                &self.weights[l],
                input,
                &d_post,
                &mut grads.weights.0[l],
                &mut grads.biases.0[l],
                need_dx.then_some(&mut d_in),
            );
            std::mem::swap(&mut d_out, &mut d_in);
        }
        want_dx.then_some(d_out)
    }
}

/// Numerically stable `log Σ exp`.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&v| (v - lse).exp()).collect()
}

fn check_batch(net: &NetworkSpec, batch: &Batch) -> Result<(), EngineError> {
    if batch.is_empty() {
        return Err(EngineError::EmptyBatch);
    }
    if batch.sample_len != net.input_len() || batch.inputs.len() != batch.len() * batch.sample_len {
        return Err(EngineError::Shape(format!("batch sample length {} but network expects {}", batch.sample_len, net.input_len())));
    }
    if let Some((index, &label)) = batch.labels.iter().enumerate().find(|(_, &y)| y >= net.class_count()) {
        return Err(EngineError::Label { index, label, classes: net.class_count() });
    }
    Ok(())
}

/// Logits for every sample, in batch order.
pub fn logits(net: &NetworkSpec, params: &ParamState, mask: &Mask, batch: &Batch) -> Result<Vec<Vec<f64>>, EngineError> {
    check_batch(net, batch)?;
    let mut model = Model::new(net, params, mask)?;
    Ok((0..batch.len()).map(|i| model.forward(batch.sample(i)).to_vec()).collect())
}

/// Mean softmax cross-entropy and the per-sample logits.
pub fn forward_loss(net: &NetworkSpec, params: &ParamState, mask: &Mask, batch: &Batch) -> Result<(f64, Vec<Vec<f64>>), EngineError> {
    let all = logits(net, params, mask, batch)?;
    let total: f64 = all.iter().zip(&batch.labels).map(|(z, &y)| log_sum_exp(z) - z[y]).sum();
    Ok((total / batch.len() as f64, all))
}

/// Loss, parameter gradients, and optionally the input gradient (same layout as `batch.inputs`).
pub fn loss_and_gradients(
    net: &NetworkSpec,
    params: &ParamState,
    mask: &Mask,
    batch: &Batch,
    want_input_grad: bool,
) -> Result<(f64, Gradients, Option<Vec<f64>>), EngineError> {
    check_batch(net, batch)?;
    let mut model = Model::new(net, params, mask)?;
    let mut grads = Gradients { weights: Tensors::zeros_like(&params.weights), biases: Tensors::zeros_like(&params.biases) };
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut dx_all = want_input_grad.then(|| Vec::with_capacity(batch.inputs.len()));
    for i in 0..batch.len() {
        let x = batch.sample(i);
        let y = batch.labels[i];
        let z = model.forward(x);
        let lse = log_sum_exp(z);
        loss += lse - z[y];
        let mut d: Vec<f64> = z.iter().map(|&v| (v - lse).exp() / n).collect();
        d[y] -= 1.0 / n;
        let dx = model.backward(x, &d, &mut grads, want_input_grad);
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
    }
    for (g, m) in grads.weights.0.iter_mut().zip(&mask.layers) {
        for (gi, &keep) in g.iter_mut().zip(&m.bits) {
            if !keep {
                *gi = 0.0;
            }
        }
    }
    Ok((loss / n, grads, dx_all))
}

/// Exact reverse-mode gradients of the masked network; masked entries are 0.
pub fn backward(net: &NetworkSpec, params: &ParamState, mask: &Mask, batch: &Batch) -> Result<Gradients, EngineError> {
    Ok(loss_and_gradients(net, params, mask, batch, false)?.1)
}

/// Gradient of the batch-mean loss with respect to every input entry.
pub fn input_gradient(net: &NetworkSpec, params: &ParamState, mask: &Mask, batch: &Batch) -> Result<Vec<f64>, EngineError> {
    Ok(loss_and_gradients(net, params, mask, batch, true)?.2.expect("requested"))
}

/// One momentum-SGD step with coupled weight decay:
/// `buf ← μ·buf + (g + λ·w)`, `w ← w − lr·buf`. Masked weights and their
/// momentum stay exactly zero.
pub fn sgd_step(params: &mut ParamState, mask: &Mask, grads: &Gradients, config: &TrainConfig, epoch: usize) {
    let lr = config.lr_at(epoch);
    let (mu, wd) = (config.momentum, config.weight_decay);
    for (l, lm) in mask.layers.iter().enumerate() {
        let w = &mut params.weights.0[l];
        let buf = &mut params.momentum_w.0[l];
        let g = &grads.weights.0[l];
        for i in 0..w.len() {
            if lm.bits[i] {
                buf[i] = mu * buf[i] + g[i] + wd * w[i];
                w[i] -= lr * buf[i];
            } else {
                buf[i] = 0.0;
                w[i] = 0.0;
            }
        }
        let b = &mut params.biases.0[l];
        let bbuf = &mut params.momentum_b.0[l];
        for ((bi, mi), &gi) in b.iter_mut().zip(bbuf.iter_mut()).zip(&grads.biases.0[l]) {
            *mi = mu * *mi + gi + wd * *bi;
            *bi -= lr * *mi;
        }
    }
}

/// Sample order for one epoch, drawn from stream `(seed, DATA_ORDER + epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::streams::DATA_ORDER + epoch as u64));
    order
}

/// Trains one epoch over `data` in minibatches; returns the mean batch loss.
pub fn train_epoch(
    net: &NetworkSpec,
    params: &mut ParamState,
    mask: &Mask,
    data: &Batch,
    config: &TrainConfig,
    epoch: usize,
    order_seed: u64,
) -> Result<f64, EngineError> {
    if data.is_empty() {
        return Err(EngineError::EmptyBatch);
    }
    let order = epoch_order(data.len(), order_seed, epoch);
    let mut total = 0.0;
    let mut steps = 0;
    for chunk in order.chunks(config.batch_size) {
        let batch = data.select(chunk);
        let (loss, grads, _) = loss_and_gradients(net, params, mask, &batch, false)?;
        sgd_step(params, mask, &grads, config, epoch);
        total += loss;
        steps += 1;
    }
    Ok(total / steps as f64)
}

/// Anything that maps a weight vector to a gradient of the same shape.
pub trait GradientOracle {
    fn gradient(&self, weights: &Tensors) -> Tensors;
}

impl<F: Fn(&Tensors) -> Tensors> GradientOracle for F {
    fn gradient(&self, weights: &Tensors) -> Tensors {
        self(weights)
    }
}

pub const HVP_FD_EPS: f64 = 1e-4;

/// Central-difference Hessian-vector product,
/// `Hv ≈ [g(w + δv) − g(w − δv)] / 2δ` with `δ = ε(1 + ‖w‖)/‖v‖`.
pub fn hvp_fd(oracle: &impl GradientOracle, weights: &Tensors, v: &Tensors) -> Tensors {
    let vn = v.norm();
    if vn == 0.0 {
        return Tensors::zeros_like(v);
    }
    let delta = HVP_FD_EPS * (1.0 + weights.norm()) / vn;
    let plus = oracle.gradient(&weights.axpy(delta, v));
    let minus = oracle.gradient(&weights.axpy(-delta, v));
    plus.axpy(-1.0, &minus).map(|x| x / (2.0 * delta))
}

/// Hessian (w.r.t. weights, biases held fixed) times `v` for the masked network.
pub fn hvp(net: &NetworkSpec, params: &ParamState, mask: &Mask, batch: &Batch, v: &Tensors) -> Result<Tensors, EngineError> {
    check_batch(net, batch)?;
    params.check_against(net)?;
    let oracle = |w: &Tensors| {
        let mut p = params.clone();
        p.weights = w.clone();
        backward(net, &p, mask, batch).expect("validated inputs").weights
    };
    Ok(hvp_fd(&oracle, &params.weights, v))
}

/// GraSP scores `−w ⊙ Hg` for any gradient oracle.
pub fn grasp_scores(oracle: &impl GradientOracle, weights: &Tensors) -> Tensors {
    let g = oracle.gradient(weights);
    let hg = hvp_fd(oracle, weights, &g);
    weights.hadamard(&hg).map(|x| -x)
}

/// SNIP connection sensitivity `|g ⊙ w|`.
pub fn snip_scores(weights: &Tensors, grads: &Tensors) -> Tensors {
    weights.hadamard(grads).map(f64::abs)
}

/// Which tail of the score distribution global pruning removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneTail {
    #[default]
    Lowest,
    Highest,
}

/// Globally prunes `round(S × total)` entries from the chosen tail of
/// `scores` (one tensor per layer) and returns each layer's surviving
/// fraction, floored at one weight per layer. Ties break by layer then offset.
pub fn keep_ratios_from_scores(scores: &[Vec<f64>], s: f64, tail: PruneTail) -> Result<Vec<f64>, EngineError> {
    if !(0.0..1.0).contains(&s) {
        return Err(EngineError::Domain(s));
    }
    let total: usize = scores.iter().map(Vec::len).sum();
    let prune = ((s * total as f64) + 0.5).floor() as usize;
    let mut entries: Vec<(f64, usize, usize)> =
        scores.iter().enumerate().flat_map(|(l, t)| t.iter().enumerate().map(move |(i, &v)| (v, l, i))).collect();
    entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    if tail == PruneTail::Highest {
        entries.reverse();
    }
    let mut kept: Vec<usize> = scores.iter().map(Vec::len).collect();
    for &(_, l, _) in entries.iter().take(prune) {
        kept[l] -= 1;
    }
    Ok(kept.iter().zip(scores).map(|(&k, t)| k.max(1) as f64 / t.len() as f64).collect())
}

fn prunable_scores(net: &NetworkSpec, scores: &Tensors) -> Vec<Vec<f64>> {
    net.prunable_indices().into_iter().map(|i| scores.0[i].clone()).collect()
}

/// SNIP layer-wise densities from one gradient pass at initialization.
pub fn snip_ratios(net: &NetworkSpec, seed: u64, batch: &Batch, s: f64) -> Result<Vec<f64>, EngineError> {
    if !(0.0..1.0).contains(&s) {
        return Err(EngineError::Domain(s));
    }
    let params = init_params(net, seed);
    let grads = backward(net, &params, &Mask::all_ones(net), batch)?;
    let scores = snip_scores(&params.weights, &grads.weights);
    keep_ratios_from_scores(&prunable_scores(net, &scores), s, PruneTail::Lowest)
}

/// GraSP layer-wise densities. The default tail removes the highest `−w ⊙ Hg`.
pub fn grasp_ratios(net: &NetworkSpec, seed: u64, batch: &Batch, s: f64, tail: PruneTail) -> Result<Vec<f64>, EngineError> {
    if !(0.0..1.0).contains(&s) {
        return Err(EngineError::Domain(s));
    }
    check_batch(net, batch)?;
    let params = init_params(net, seed);
    let mask = Mask::all_ones(net);
    let oracle = |w: &Tensors| {
        let mut p = params.clone();
        p.weights = w.clone();
        backward(net, &p, &mask, batch).expect("validated inputs").weights
    };
    let scores = grasp_scores(&oracle, &params.weights);
    keep_ratios_from_scores(&prunable_scores(net, &scores), s, tail)
}

/// Everything needed to resume a run bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    /// Seed of the data-order stream; the next epoch's order is derived from it.
    pub order_seed: u64,
    pub params: ParamState,
    pub mask: Mask,
}

impl Checkpoint {
    const MAGIC: &'static [u8; 4] = b"RPCK";
    const VERSION: u16 = 1;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&Self::VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.order_seed.to_le_bytes());
        out.extend_from_slice(&self.params.init_seed.to_le_bytes());
        for t in [&self.params.weights, &self.params.biases, &self.params.momentum_w, &self.params.momentum_b] {
            out.extend_from_slice(&(t.0.len() as u32).to_le_bytes());
            for layer in &t.0 {
                out.extend_from_slice(&(layer.len() as u64).to_le_bytes());
                for v in layer {
                    out.extend_from_slice(&v.to_bits().to_le_bytes());
                }
            }
        }
        let mask = self.mask.to_bytes();
        out.extend_from_slice(&(mask.len() as u64).to_le_bytes());
        out.extend_from_slice(&mask);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, EngineError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != Self::MAGIC {
            return Err(MaskError::Format("bad checkpoint magic".into()).into());
        }
        let version = r.u16()?;
        if version != Self::VERSION {
            return Err(MaskError::Format(format!("unsupported checkpoint version {version}")).into());
        }
        let epoch = r.u64()?;
        let order_seed = r.u64()?;
        let init_seed = r.u64()?;
        let mut tensors = Vec::with_capacity(4);
        for _ in 0..4 {
            let layers = r.u32()? as usize;
            let mut t = Vec::with_capacity(layers.min(1024));
            for _ in 0..layers {
                let n = r.u64()? as usize;
                if n > bytes.len() {
                    return Err(MaskError::Format("tensor length exceeds file".into()).into());
                }
                t.push((0..n).map(|_| r.f64()).collect::<Result<Vec<f64>, _>>()?);
            }
            tensors.push(Tensors(t));
        }
        let mask_len = r.u64()? as usize;
        let mask = Mask::from_bytes(r.take(mask_len)?)?;
        if r.pos != bytes.len() {
            return Err(MaskError::Format("trailing checkpoint bytes".into()).into());
        }
        let mut it = tensors.into_iter();
        let params = ParamState {
            weights: it.next().unwrap(),
            biases: it.next().unwrap(),
            momentum_w: it.next().unwrap(),
            momentum_b: it.next().unwrap(),
            init_seed,
        };
        Ok(Checkpoint { epoch, order_seed, params, mask })
    }
}
