//! Batch construction: class-balanced support sampling from the two
//! labeled sets, uniform unlabeled sampling, and the multi-view
//! generator (noisy global copies, coordinate-masked noisy local
//! copies standing in for image crops).
//!
//! Everything is a pure function of (dataset, config, rng state). RNG
//! consumption order is fixed and documented per function so that a
//! scripted replay with the same seed reproduces batches exactly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::datasets::{LabeledSet, SampleId, UnlabeledSet};
use crate::error::{Result, SpiError};
use crate::losses::Domain;

/// Multi-view generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViewConfig {
    /// Number of global views; the instance-similarity loss requires
    /// exactly 2.
    pub n_global: usize,
    pub n_local: usize,
    pub global_noise_sigma: f64,
    /// Fraction of input coordinates zeroed in each local view.
    pub local_mask_fraction: f64,
    pub local_noise_sigma: f64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            n_global: 2,
            n_local: 4,
            global_noise_sigma: 0.05,
            local_mask_fraction: 0.5,
            local_noise_sigma: 0.05,
        }
    }
}

impl ViewConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_global != 2 {
            return Err(SpiError::InvalidViewCount {
                expected: 2,
                got: self.n_global,
            });
        }
        if !(0.0..1.0).contains(&self.local_mask_fraction) {
            return Err(SpiError::InvalidInput(format!(
                "local_mask_fraction must lie in [0, 1), got {}",
                self.local_mask_fraction
            )));
        }
        for (name, v) in [
            ("global_noise_sigma", self.global_noise_sigma),
            ("local_noise_sigma", self.local_noise_sigma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(SpiError::InvalidInput(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// The generated views of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub global_views: Vec<Vec<f64>>,
    pub local_views: Vec<Vec<f64>>,
}

/// Support inputs before the forward pass.
#[derive(Debug, Clone)]
pub struct SupportSelection {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub domains: Vec<Domain>,
}

impl SupportSelection {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Draw eta_sup samples per class per domain, with replacement.
///
/// Order is (domain, class, draw): all source classes first, then all
/// target classes. One `gen_range` call per draw.
pub fn sample_support(
    source: &LabeledSet,
    t_hat: &LabeledSet,
    eta_sup: usize,
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SupportSelection> {
    if eta_sup == 0 {
        return Err(SpiError::InvalidInput("eta_sup must be at least 1".into()));
    }
    let source_index = source.class_index(num_classes);
    let target_index = t_hat.class_index(num_classes);
    for class in 0..num_classes {
        if source_index[class].is_empty() {
            return Err(SpiError::MissingClass {
                class,
                which: "source".into(),
            });
        }
        if target_index[class].is_empty() {
            return Err(SpiError::MissingClass {
                class,
                which: "target".into(),
            });
        }
    }

    let total = 2 * eta_sup * num_classes;
    let mut features = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    let mut domains = Vec::with_capacity(total);
    for (domain, set, index) in [
        (Domain::Source, source, &source_index),
        (Domain::Target, t_hat, &target_index),
    ] {
        for (class, members) in index.iter().enumerate() {
            for _ in 0..eta_sup {
                let pick = members[rng.gen_range(0..members.len())];
                features.push(set.samples[pick].features.clone());
                labels.push(class);
                domains.push(domain);
            }
        }
    }
    Ok(SupportSelection {
        features,
        labels,
        domains,
    })
}

/// Partial Fisher-Yates: the first `take` entries of a shuffled
/// 0..n index range, consuming exactly `take` `gen_range` calls.
fn sample_indices_without_replacement(n: usize, take: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..take {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(take);
    idx
}

/// Uniformly sample a batch of unlabeled samples: without replacement
/// when the set is large enough, with replacement otherwise.
pub fn sample_unlabeled(
    unlabeled: &UnlabeledSet,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(SampleId, Vec<f64>)>> {
    let n = unlabeled.len();
    if n == 0 {
        return Err(SpiError::EmptyUnlabeledSet);
    }
    let picks: Vec<usize> = if n >= batch_size {
        sample_indices_without_replacement(n, batch_size, rng)
    } else {
        (0..batch_size).map(|_| rng.gen_range(0..n)).collect()
    };
    Ok(picks
        .into_iter()
        .map(|i| {
            let s = &unlabeled.samples[i];
            (s.id, s.features.clone())
        })
        .collect())
}

/// Generate the global and local views of one input.
///
/// Global views add Gaussian noise; local views zero a random
/// ceil(mask_fraction * d) coordinate subset and then add Gaussian
/// noise. RNG order: per global view d normals; per local view the
/// mask subset (one `gen_range` per masked coordinate) then d normals.
pub fn generate_views(x: &[f64], cfg: &ViewConfig, rng: &mut ChaCha8Rng) -> Result<ViewSet> {
    cfg.validate()?;
    let d = x.len();
    let mut global_views = Vec::with_capacity(cfg.n_global);
    for _ in 0..cfg.n_global {
        let mut v = x.to_vec();
        for coord in v.iter_mut() {
            let noise: f64 = rng.sample(StandardNormal);
            *coord += cfg.global_noise_sigma * noise;
        }
        global_views.push(v);
    }
    let n_masked = (cfg.local_mask_fraction * d as f64).ceil() as usize;
    let mut local_views = Vec::with_capacity(cfg.n_local);
    for _ in 0..cfg.n_local {
        let mut v = x.to_vec();
        for i in sample_indices_without_replacement(d, n_masked, rng) {
            v[i] = 0.0;
        }
        for coord in v.iter_mut() {
            let noise: f64 = rng.sample(StandardNormal);
            *coord += cfg.local_noise_sigma * noise;
        }
        local_views.push(v);
    }
    Ok(ViewSet {
        global_views,
        local_views,
    })
}
