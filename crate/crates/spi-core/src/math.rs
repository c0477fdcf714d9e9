//! Deterministic scalar/vector numerics shared by every other module:
//! temperature softmax, sharpening, L2 normalization, cross-entropy,
//! cosine similarity, top-k selection and label smoothing.
//!
//! All reductions run left to right in index order so results are
//! bit-reproducible across runs. Everything here is a pure function.

use crate::error::{Result, SpiError};

/// Norm threshold below which an embedding counts as degenerate.
pub const EPS_NORM: f64 = 1e-12;

/// Lower clamp applied to probabilities before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

/// A point on the probability simplex: entries in [0, 1] summing to 1
/// within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(SpiError::InvalidInput("empty probability vector".into()));
        }
        let mut sum = 0.0;
        for &v in &values {
            if !v.is_finite() || v < -1e-12 || v > 1.0 + 1e-9 {
                return Err(SpiError::InvalidInput(format!(
                    "probability entry {v} outside [0, 1]"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SpiError::InvalidInput(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(Self(values))
    }

    /// Constructor for values produced by operations that guarantee the
    /// simplex invariant (softmax output, convex combinations, ...).
    pub(crate) fn from_normalized(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty());
        debug_assert!((values.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    /// Largest entry.
    pub fn max_value(&self) -> f64 {
        self.0.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    /// One-hot vector for class `y` out of `num_classes`.
    pub fn one_hot(y: usize, num_classes: usize) -> Result<Self> {
        if y >= num_classes {
            return Err(SpiError::InvalidClass {
                class: y,
                num_classes,
            });
        }
        let mut v = vec![0.0; num_classes];
        v[y] = 1.0;
        Ok(Self(v))
    }
}

/// A feature vector with all entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SpiError::InvalidInput(
                "embedding contains non-finite entries".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A strictly positive temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || value <= 0.0 {
            return Err(SpiError::InvalidTemperature(value));
        }
        Ok(Self(value))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// Index of the largest entry, ties broken by lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Temperature softmax: exp(x/tau) normalized to sum 1, stabilized by
/// max-subtraction. Order-preserving: the output argmax equals the
/// input argmax.
pub fn softmax_tau(logits: &[f64], tau: Temperature) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(SpiError::InvalidInput("empty logits".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(SpiError::InvalidInput("non-finite logit".into()));
    }
    let t = tau.value();
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut exps: Vec<f64> = logits.iter().map(|&v| ((v - max) / t).exp()).collect();
    let sum: f64 = exps.iter().sum();
    for e in exps.iter_mut() {
        *e /= sum;
    }
    Ok(ProbVector::from_normalized(exps))
}

/// Scale a vector to unit Euclidean norm.
pub fn l2_normalize(z: &Embedding) -> Result<Embedding> {
    let norm = z.norm();
    if norm <= EPS_NORM {
        return Err(SpiError::DegenerateEmbedding {
            norm,
            eps: EPS_NORM,
        });
    }
    Ok(Embedding(z.values().iter().map(|v| v / norm).collect()))
}

/// Raise entries to the power 1/tau and renormalize. For tau < 1 this
/// concentrates mass on the mode; the argmax is preserved.
pub fn sharpen(p: &ProbVector, tau: Temperature) -> Result<ProbVector> {
    let inv = 1.0 / tau.value();
    let powered: Vec<f64> = p.values().iter().map(|&v| v.powf(inv)).collect();
    let sum: f64 = powered.iter().sum();
    Ok(ProbVector::from_normalized(
        powered.into_iter().map(|v| v / sum).collect(),
    ))
}

/// Cross-entropy −Σ_c target_c · log(prediction_c), with prediction
/// entries clamped to ≥ 1e-12 before the log. The target is treated as
/// a constant; gradients (taken elsewhere) flow through the prediction
/// argument only.
pub fn cross_entropy(prediction: &ProbVector, target: &ProbVector) -> Result<f64> {
    if prediction.len() != target.len() {
        return Err(SpiError::ShapeMismatch {
            expected: format!("{}", target.len()),
            got: format!("{}", prediction.len()),
        });
    }
    let mut acc = 0.0;
    for (p, t) in prediction.values().iter().zip(target.values()) {
        acc -= t * p.max(LOG_CLAMP).ln();
    }
    Ok(acc)
}

/// Entropy −Σ_c p_c · log(p_c) with the same clamp as `cross_entropy`.
pub fn entropy(p: &ProbVector) -> f64 {
    p.values()
        .iter()
        .map(|&v| if v > 0.0 { -v * v.max(LOG_CLAMP).ln() } else { 0.0 })
        .sum()
}

/// Pairwise cosine similarities: entry (i, j) is the dot product of the
/// normalized i-th row of `a` and j-th row of `b`.
pub fn cosine_similarity_matrix(a: &[Embedding], b: &[Embedding]) -> Result<Vec<Vec<f64>>> {
    let d = a
        .first()
        .or_else(|| b.first())
        .map(Embedding::len)
        .unwrap_or(0);
    for z in a.iter().chain(b.iter()) {
        if z.len() != d {
            return Err(SpiError::ShapeMismatch {
                expected: format!("{d}"),
                got: format!("{}", z.len()),
            });
        }
    }
    let an: Vec<Embedding> = a.iter().map(l2_normalize).collect::<Result<_>>()?;
    let bn: Vec<Embedding> = b.iter().map(l2_normalize).collect::<Result<_>>()?;
    Ok(an
        .iter()
        .map(|x| bn.iter().map(|y| dot(x.values(), y.values())).collect())
        .collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Chain rule through z_hat = z/‖z‖: accumulate dL/dz into `d_z` given
/// dL/dz_hat, the normalized vector, and the raw norm.
pub fn l2_normalize_backward(z_hat: &[f64], norm: f64, d_z_hat: &[f64], d_z: &mut [f64]) {
    let inner = dot(z_hat, d_z_hat);
    for ((dz, g), zh) in d_z.iter_mut().zip(d_z_hat).zip(z_hat) {
        *dz += (g - inner * zh) / norm;
    }
}

/// Indices of the k largest entries, as a sorted set. Ties break toward
/// the lowest index.
pub fn topk_indices(z: &Embedding, k: usize) -> Result<Vec<usize>> {
    let d = z.len();
    if k < 1 || k > d {
        return Err(SpiError::InvalidK { k, d });
    }
    let mut idx: Vec<usize> = (0..d).collect();
    // Stable under ties: sort by value descending, then index ascending.
    idx.sort_by(|&i, &j| {
        z.values()[j]
            .partial_cmp(&z.values()[i])
            .unwrap()
            .then(i.cmp(&j))
    });
    let mut top: Vec<usize> = idx.into_iter().take(k).collect();
    top.sort_unstable();
    Ok(top)
}

/// Label smoothing: entry `y` gets (1 − alpha) + alpha/C, every other
/// entry gets alpha/C.
pub fn smooth_label(y: usize, alpha: f64, num_classes: usize) -> Result<ProbVector> {
    if y >= num_classes {
        return Err(SpiError::InvalidClass {
            class: y,
            num_classes,
        });
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(SpiError::InvalidInput(format!(
            "label smoothing alpha {alpha} outside [0, 1)"
        )));
    }
    let base = alpha / num_classes as f64;
    let mut v = vec![base; num_classes];
    v[y] = (1.0 - alpha) + base;
    Ok(ProbVector::from_normalized(v))
}
