//! The feature extractor (small MLP with ReLU hidden activations and a
//! linear output layer), the linear classifier head, SGD with momentum
//! and coupled weight decay, and the linear-warmup-then-cosine schedule
//! used for both the learning rate and the pseudo-label temperature.
//!
//! Parameters flatten in declaration order (each MLP layer's weight
//! rows then bias, then the classifier weight rows and bias); the
//! checkpoint format and the finite-difference harness both rely on
//! that order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Result, SpiError};
use crate::math::{softmax_tau, Embedding, ProbVector, Temperature};

/// One dense layer, weights stored row-major as [out][in].
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weights: vec![vec![0.0; in_dim]; out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn he_init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = (2.0 / in_dim as f64).sqrt();
        Self {
            weights: (0..out_dim)
                .map(|_| {
                    (0..in_dim)
                        .map(|_| {
                            let n: f64 = rng.sample(StandardNormal);
                            scale * n
                        })
                        .collect()
                })
                .collect(),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn out_dim(&self) -> usize {
        self.weights.len()
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| {
                let mut acc = *b;
                for (w, v) in row.iter().zip(x) {
                    acc += w * v;
                }
                acc
            })
            .collect()
    }
}

/// Feature extractor plus classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub mlp: Vec<Linear>,
    pub classifier: Linear,
}

impl ModelParams {
    /// He-initialized parameters. `dims` chains input dim through the
    /// hidden sizes to the embedding dim, e.g. [2, 64, 64, 32].
    pub fn init(dims: &[usize], num_classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) || num_classes == 0 {
            return Err(SpiError::InvalidConfig(format!(
                "bad model dims {dims:?} / classes {num_classes}"
            )));
        }
        let mlp = dims
            .windows(2)
            .map(|w| Linear::he_init(w[0], w[1], rng))
            .collect();
        let classifier = Linear::he_init(dims[dims.len() - 1], num_classes, rng);
        Ok(Self { mlp, classifier })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            mlp: self
                .mlp
                .iter()
                .map(|l| Linear::zeros(l.in_dim(), l.out_dim()))
                .collect(),
            classifier: Linear::zeros(self.classifier.in_dim(), self.classifier.out_dim()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.first().map_or(0, Linear::in_dim)
    }

    pub fn embed_dim(&self) -> usize {
        self.mlp.last().map_or(0, Linear::out_dim)
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.mlp.iter().map(Linear::out_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.iter_tensors()
            .map(|t| t.weights.len() * t.in_dim() + t.bias.len())
            .sum()
    }

    fn iter_tensors(&self) -> impl Iterator<Item = &Linear> {
        self.mlp.iter().chain(std::iter::once(&self.classifier))
    }

    /// Flatten in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.iter_tensors() {
            for row in &t.weights {
                out.extend_from_slice(row);
            }
            out.extend_from_slice(&t.bias);
        }
        out
    }

    /// Rebuild parameters with this model's shapes from a flat vector.
    pub fn from_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.param_count() {
            return Err(SpiError::ShapeMismatch {
                expected: format!("{} params", self.param_count()),
                got: format!("{}", flat.len()),
            });
        }
        let mut params = self.clone();
        let mut it = flat.iter();
        for t in params
            .mlp
            .iter_mut()
            .chain(std::iter::once(&mut params.classifier))
        {
            for row in t.weights.iter_mut() {
                for w in row.iter_mut() {
                    *w = *it.next().expect("length checked");
                }
            }
            for b in t.bias.iter_mut() {
                *b = *it.next().expect("length checked");
            }
        }
        Ok(params)
    }

    pub fn all_finite(&self) -> bool {
        self.iter_tensors().all(|t| {
            t.bias.iter().all(|v| v.is_finite())
                && t.weights.iter().all(|row| row.iter().all(|v| v.is_finite()))
        })
    }
}

/// Intermediate activations of one MLP forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer; layer_inputs[0] is the raw input.
    pub layer_inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pub preacts: Vec<Vec<f64>>,
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Forward through the MLP, caching activations.
pub fn forward_features_cached(params: &ModelParams, x: &[f64]) -> Result<(Embedding, MlpCache)> {
    if x.len() != params.input_dim() {
        return Err(SpiError::ShapeMismatch {
            expected: format!("input dim {}", params.input_dim()),
            got: format!("{}", x.len()),
        });
    }
    let mut cache = MlpCache {
        layer_inputs: Vec::with_capacity(params.mlp.len()),
        preacts: Vec::with_capacity(params.mlp.len()),
    };
    let last = params.mlp.len() - 1;
    let mut activation = x.to_vec();
    for (l, layer) in params.mlp.iter().enumerate() {
        cache.layer_inputs.push(activation.clone());
        let preact = layer.forward(&activation);
        activation = if l < last {
            preact.iter().map(|&v| relu(v)).collect()
        } else {
            preact.clone()
        };
        cache.preacts.push(preact);
    }
    Ok((Embedding::new(activation)?, cache))
}

/// Forward through the MLP.
pub fn forward_features(params: &ModelParams, x: &[f64]) -> Result<Embedding> {
    forward_features_cached(params, x).map(|(z, _)| z)
}

/// Backpropagate d(loss)/d(embedding) through the MLP, accumulating
/// weight and bias gradients into `grads`.
pub fn mlp_backward(
    params: &ModelParams,
    cache: &MlpCache,
    d_embedding: &[f64],
    grads: &mut ModelParams,
) {
    let n_layers = params.mlp.len();
    // The output layer is linear; hidden layers gate through ReLU.
    let mut delta: Vec<f64> = d_embedding.to_vec();
    for l in (0..n_layers).rev() {
        let input = &cache.layer_inputs[l];
        let g = &mut grads.mlp[l];
        for (o, &dout) in delta.iter().enumerate() {
            if dout != 0.0 {
                for (gw, v) in g.weights[o].iter_mut().zip(input) {
                    *gw += dout * v;
                }
            }
            g.bias[o] += dout;
        }
        if l > 0 {
            let layer = &params.mlp[l];
            let mut d_input = vec![0.0; layer.in_dim()];
            for (o, &dout) in delta.iter().enumerate() {
                if dout != 0.0 {
                    for (di, w) in d_input.iter_mut().zip(&layer.weights[o]) {
                        *di += dout * w;
                    }
                }
            }
            delta = d_input
                .iter()
                .zip(&cache.preacts[l - 1])
                .map(|(g, &pre)| if pre > 0.0 { *g } else { 0.0 })
                .collect();
        }
    }
}

/// Classifier forward: logits = Wz + b and their softmax.
pub fn forward_classifier(params: &ModelParams, z: &Embedding) -> Result<(Vec<f64>, ProbVector)> {
    if z.len() != params.classifier.in_dim() {
        return Err(SpiError::ShapeMismatch {
            expected: format!("embed dim {}", params.classifier.in_dim()),
            got: format!("{}", z.len()),
        });
    }
    let logits = params.classifier.forward(z.values());
    let probs = softmax_tau(&logits, Temperature::new(1.0).expect("valid"))?;
    Ok((logits, probs))
}

/// Backpropagate d(loss)/d(logits) through the classifier, accumulating
/// parameter gradients and the gradient on the embedding.
pub fn classifier_backward(
    params: &ModelParams,
    z: &[f64],
    d_logits: &[f64],
    grads: &mut ModelParams,
    d_z: &mut [f64],
) {
    for (o, &dout) in d_logits.iter().enumerate() {
        if dout != 0.0 {
            for (gw, v) in grads.classifier.weights[o].iter_mut().zip(z) {
                *gw += dout * v;
            }
            for (dzi, w) in d_z.iter_mut().zip(&params.classifier.weights[o]) {
                *dzi += dout * w;
            }
        }
        grads.classifier.bias[o] += dout;
    }
}

/// SGD-with-momentum state. Weight decay is coupled: it enters the
/// velocity together with the gradient.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub velocity: ModelParams,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: params.zeros_like(),
            momentum,
            weight_decay,
        }
    }
}

/// One optimizer step: v ← momentum·v + g + wd·p; p ← p − lr·v.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if !grads.all_finite() {
        return Err(SpiError::NonFiniteGradient("sgd_step".into()));
    }
    let tensors = params
        .mlp
        .iter_mut()
        .chain(std::iter::once(&mut params.classifier));
    let grad_tensors = grads.mlp.iter().chain(std::iter::once(&grads.classifier));
    let vel_tensors = state
        .velocity
        .mlp
        .iter_mut()
        .chain(std::iter::once(&mut state.velocity.classifier));
    for ((p, g), v) in tensors.zip(grad_tensors).zip(vel_tensors) {
        for (prow, (grow, vrow)) in p.weights.iter_mut().zip(g.weights.iter().zip(v.weights.iter_mut())) {
            for (pw, (gw, vw)) in prow.iter_mut().zip(grow.iter().zip(vrow.iter_mut())) {
                *vw = state.momentum * *vw + *gw + state.weight_decay * *pw;
                *pw -= lr * *vw;
            }
        }
        for (pb, (gb, vb)) in p.bias.iter_mut().zip(g.bias.iter().zip(v.bias.iter_mut())) {
            *vb = state.momentum * *vb + *gb + state.weight_decay * *pb;
            *pb -= lr * *vb;
        }
    }
    Ok(())
}

/// Linear warmup from `start` to `peak` over the warmup epochs
/// (continuous in the iteration fraction), then cosine decay from
/// `peak` to `floor`, reaching the floor at the start of the final
/// epoch and holding it there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Schedule {
    pub start: f64,
    pub peak: f64,
    pub floor: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.floor > self.peak {
            return Err(SpiError::InvalidConfig(format!(
                "schedule floor {} exceeds peak {}",
                self.floor, self.peak
            )));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(SpiError::InvalidConfig(format!(
                "warmup {} exceeds total epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }

    pub fn value(&self, epoch: usize, iter_fraction: f64) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(SpiError::InvalidEpoch {
                epoch,
                total: self.total_epochs,
            });
        }
        if !(0.0..1.0).contains(&iter_fraction) {
            return Err(SpiError::InvalidInput(format!(
                "iter_fraction {iter_fraction} outside [0, 1)"
            )));
        }
        let w = self.warmup_epochs as f64;
        let t = epoch as f64 + iter_fraction;
        if epoch < self.warmup_epochs {
            return Ok(self.start + (t / w) * (self.peak - self.start));
        }
        let denom = self.total_epochs as f64 - 1.0 - w;
        let u = if denom > 0.0 {
            ((t - w) / denom).min(1.0)
        } else if t > w {
            1.0
        } else {
            0.0
        };
        Ok(self.floor + 0.5 * (self.peak - self.floor) * (1.0 + (std::f64::consts::PI * u).cos()))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SPICKPT1";

/// Checkpoint metadata: model shape plus run position.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub velocity: ModelParams,
    pub seed: u64,
    pub epoch: u64,
}

/// Binary checkpoint: magic, dims, classes, seed, epoch, then all
/// parameters and velocity buffers as little-endian f64 in declaration
/// order. Round-trips bit-exactly.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)?;
    let dims = ckpt.params.dims();
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in &dims {
        w.write_all(&(*d as u32).to_le_bytes())?;
    }
    w.write_all(&(ckpt.params.num_classes() as u32).to_le_bytes())?;
    w.write_all(&ckpt.seed.to_le_bytes())?;
    w.write_all(&ckpt.epoch.to_le_bytes())?;
    for v in ckpt.params.flatten().iter().chain(ckpt.velocity.flatten().iter()) {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(SpiError::Parse {
            line: 0,
            msg: "not a checkpoint file (bad magic)".into(),
        });
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u32buf)?;
    let n_dims = u32::from_le_bytes(u32buf) as usize;
    let mut dims = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        r.read_exact(&mut u32buf)?;
        dims.push(u32::from_le_bytes(u32buf) as usize);
    }
    r.read_exact(&mut u32buf)?;
    let num_classes = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u64buf)?;
    let seed = u64::from_le_bytes(u64buf);
    r.read_exact(&mut u64buf)?;
    let epoch = u64::from_le_bytes(u64buf);

    let mut template = ModelParams {
        mlp: dims.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
        classifier: Linear::zeros(*dims.last().unwrap_or(&0), num_classes),
    };
    let count = template.param_count();
    let read_flat = |r: &mut BufReader<File>| -> Result<Vec<f64>> {
        let mut flat = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            flat.push(f64::from_le_bytes(buf));
        }
        Ok(flat)
    };
    let params_flat = read_flat(&mut r)?;
    let velocity_flat = read_flat(&mut r)?;
    let params = template.from_flat(&params_flat)?;
    let velocity = template.from_flat(&velocity_flat)?;
    template.mlp.clear(); // template no longer needed
    Ok(Checkpoint {
        params,
        velocity,
        seed,
        epoch,
    })
}
