//! Finite-difference verification of every analytic gradient.
//!
//! Two layers of checks, both over randomized small shapes:
//! module-level (each loss against its own differentiated argument)
//! and end-to-end (each loss, and the weighted total, against every
//! model parameter through the full forward graph). Stop-gradient
//! structure (sharpened targets, the top-k mask) is computed once at
//! the base point and held fixed during differencing, matching what
//! the analytic gradients claim.
//!
//! Configurations that are non-differentiable at machine scale (near
//! ReLU kinks, top-k ties, coincident embeddings) are resampled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{LossMask, TrainConfig};
use crate::datasets::SampleId;
use crate::error::{Result, SpiError};
use crate::losses::{
    build_similarity_mask, classification_loss, ils_value_with_targets, instance_similarity_loss,
    intra_domain_alignment, supervised_contrastive, AnchorMode, Domain, SupportBatch,
};
use crate::math::{Embedding, ProbVector, Temperature};
use crate::model::{forward_features_cached, ModelParams};
use crate::sampling::{SupportSelection, ViewSet};
use crate::trainer::{compute_losses, FrozenStructure, IterationInputs};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Module-level tolerance (gradients against a loss's own argument).
pub const MODULE_TOL: f64 = 1e-4;
/// End-to-end tolerance (through the MLP).
pub const END_TO_END_TOL: f64 = 1e-3;
/// Coordinates with both analytic and numeric magnitude below this are
/// not compared.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Outcome of one check over many random configurations.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub configs: usize,
    pub max_rel_err: f64,
    pub worst_coordinate: usize,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn line(&self) -> String {
        format!(
            "{:24} configs={:<3} max_rel_err={:9.3e} worst_coord={:<4} tol={:7.1e}  {}",
            self.name,
            self.configs,
            self.max_rel_err,
            self.worst_coordinate,
            self.tolerance,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

/// Central finite differences of a scalar function over a flat vector.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut grad = Vec::with_capacity(x.len());
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = orig + h;
        let plus = f(&buf)?;
        buf[i] = orig - h;
        let minus = f(&buf)?;
        buf[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Worst relative error across coordinates, ignoring entries where both
/// gradients are below the floor.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    let mut max_rel = 0.0;
    let mut worst = 0;
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let denom = a.abs().max(n.abs());
        if denom > GRAD_FLOOR {
            let rel = (a - n).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
                worst = i;
            }
        }
    }
    (max_rel, worst)
}

fn report(name: &str, configs: usize, max_rel: f64, worst: usize, tol: f64) -> GradCheckReport {
    GradCheckReport {
        name: name.into(),
        configs,
        max_rel_err: max_rel,
        worst_coordinate: worst,
        tolerance: tol,
        pass: max_rel <= tol,
    }
}

fn rand_prob(rng: &mut ChaCha8Rng, c: usize) -> ProbVector {
    let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.05..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    ProbVector::new(raw.iter().map(|v| v / sum).collect()).expect("normalized")
}

fn rand_vec(rng: &mut ChaCha8Rng, d: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Supervised contrastive loss gradient against the batch embeddings.
pub fn check_contrastive(seed: u64, configs: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0;
    let mut worst = 0;
    for trial in 0..configs {
        let classes = rng.gen_range(2..4usize);
        let per_class = rng.gen_range(1..3usize);
        let d = rng.gen_range(3..5usize);
        let tau = Temperature::new(rng.gen_range(0.2..0.6))?;
        let normalize = trial % 2 == 0;
        let mode = if trial % 4 < 2 {
            AnchorMode::AsWritten
        } else {
            AnchorMode::Standard
        };

        let mut embeddings = Vec::new();
        let mut labels = Vec::new();
        let mut domains = Vec::new();
        for domain in [Domain::Source, Domain::Target] {
            for class in 0..classes {
                for _ in 0..per_class {
                    embeddings.push(Embedding::new(rand_vec(&mut rng, d, -1.0, 1.0))?);
                    labels.push(class);
                    domains.push(domain);
                }
            }
        }
        let batch = SupportBatch::new(embeddings.clone(), labels.clone(), domains.clone())?;
        let out = supervised_contrastive(&batch, tau, normalize, mode)?;

        let flat: Vec<f64> = embeddings.iter().flat_map(|z| z.values().to_vec()).collect();
        let numeric = fd_gradient(
            |x| {
                let embs: Vec<Embedding> = x
                    .chunks(d)
                    .map(|c| Embedding::new(c.to_vec()))
                    .collect::<Result<_>>()?;
                let b = SupportBatch::new(embs, labels.clone(), domains.clone())?;
                Ok(supervised_contrastive(&b, tau, normalize, mode)?.value)
            },
            &flat,
            FD_STEP,
        )?;
        let (rel, coord) = compare_gradients(&out.grad, &numeric);
        if rel > max_rel {
            max_rel = rel;
            worst = coord;
        }
    }
    Ok(report("L_con (embeddings)", configs, max_rel, worst, MODULE_TOL))
}

/// Instance-similarity loss gradient against the prediction vectors,
/// with the sharpened targets frozen.
pub fn check_instance_similarity(seed: u64, configs: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11);
    let mut max_rel = 0.0;
    let mut worst = 0;
    for _ in 0..configs {
        let c = rng.gen_range(2..5usize);
        let n = rng.gen_range(1..4usize);
        let n_local = rng.gen_range(0..3usize);
        let tau_sharp = Temperature::new(rng.gen_range(0.25..0.6))?;

        let globals: Vec<Vec<ProbVector>> = (0..n)
            .map(|_| vec![rand_prob(&mut rng, c), rand_prob(&mut rng, c)])
            .collect();
        let locals: Vec<Vec<ProbVector>> = (0..n)
            .map(|_| (0..n_local).map(|_| rand_prob(&mut rng, c)).collect())
            .collect();
        let (out, targets) = instance_similarity_loss(&globals, &locals, tau_sharp)?;

        let mut flat = Vec::new();
        for views in globals.iter().chain(locals.iter()) {
            for p in views {
                flat.extend_from_slice(p.values());
            }
        }
        let numeric = fd_gradient(
            |x| {
                let mut idx = 0;
                let mut take = |count: usize| {
                    let mut out = Vec::with_capacity(count);
                    for _ in 0..count {
                        out.push(x[idx..idx + c].to_vec());
                        idx += c;
                    }
                    out
                };
                let g: Vec<Vec<Vec<f64>>> = (0..n).map(|_| take(2)).collect();
                let l: Vec<Vec<Vec<f64>>> = (0..n).map(|_| take(n_local)).collect();
                ils_value_with_targets(&g, &l, &targets)
            },
            &flat,
            FD_STEP,
        )?;
        let (rel, coord) = compare_gradients(&out.grad, &numeric);
        if rel > max_rel {
            max_rel = rel;
            worst = coord;
        }
    }
    Ok(report("L_ils (predictions)", configs, max_rel, worst, MODULE_TOL))
}

/// Intra-domain alignment gradient against the embeddings, with the
/// similarity mask frozen.
pub fn check_intra_domain(seed: u64, configs: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x22);
    let mut max_rel = 0.0;
    let mut worst = 0;
    let mut done = 0;
    let mut attempts = 0;
    while done < configs {
        attempts += 1;
        if attempts > configs * 200 {
            return Err(SpiError::InconsistentState(
                "could not sample a non-degenerate intra-domain configuration".into(),
            ));
        }
        let n = rng.gen_range(3..6usize);
        let d = rng.gen_range(3..6usize);
        let k = rng.gen_range(1..=d);
        let z: Vec<Embedding> = (0..n)
            .map(|_| Embedding::new(rand_vec(&mut rng, d, -2.0, 2.0)))
            .collect::<Result<_>>()?;
        // Coincident points sit on the subgradient kink.
        let mut min_dist = f64::INFINITY;
        for i in 0..n {
            for j in (i + 1)..n {
                let dist: f64 = z[i]
                    .values()
                    .iter()
                    .zip(z[j].values())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                min_dist = min_dist.min(dist);
            }
        }
        if min_dist < 1e-3 {
            continue;
        }
        let mask = build_similarity_mask(&z, k)?;
        let out = intra_domain_alignment(&z, &mask)?;
        let flat: Vec<f64> = z.iter().flat_map(|e| e.values().to_vec()).collect();
        let numeric = fd_gradient(
            |x| {
                let zs: Vec<Embedding> = x
                    .chunks(d)
                    .map(|c| Embedding::new(c.to_vec()))
                    .collect::<Result<_>>()?;
                Ok(intra_domain_alignment(&zs, &mask)?.value)
            },
            &flat,
            FD_STEP,
        )?;
        let (rel, coord) = compare_gradients(&out.grad, &numeric);
        if rel > max_rel {
            max_rel = rel;
            worst = coord;
        }
        done += 1;
    }
    Ok(report("L_ida (embeddings)", configs, max_rel, worst, MODULE_TOL))
}

/// Classification loss gradient against the logits.
pub fn check_classification(seed: u64, configs: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x33);
    let mut max_rel = 0.0;
    let mut worst = 0;
    for trial in 0..configs {
        let c = rng.gen_range(2..5usize);
        let n = rng.gen_range(1..5usize);
        let alpha = if trial % 2 == 0 { 0.0 } else { 0.1 };
        let logits: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(&mut rng, c, -2.0, 2.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let out = classification_loss(&logits, &labels, alpha, c)?;
        let flat: Vec<f64> = logits.iter().flatten().copied().collect();
        let numeric = fd_gradient(
            |x| {
                let rows: Vec<Vec<f64>> = x.chunks(c).map(|r| r.to_vec()).collect();
                Ok(classification_loss(&rows, &labels, alpha, c)?.value)
            },
            &flat,
            FD_STEP,
        )?;
        let (rel, coord) = compare_gradients(&out.grad, &numeric);
        if rel > max_rel {
            max_rel = rel;
            worst = coord;
        }
    }
    Ok(report("L_cls (logits)", configs, max_rel, worst, MODULE_TOL))
}

/// Which component an end-to-end check isolates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndToEndTarget {
    Con,
    Ils,
    Ida,
    Cls,
    Total,
}

impl EndToEndTarget {
    fn label(&self) -> &'static str {
        match self {
            Self::Con => "L_con (end-to-end)",
            Self::Ils => "L_ils (end-to-end)",
            Self::Ida => "L_ida (end-to-end)",
            Self::Cls => "L_cls (end-to-end)",
            Self::Total => "L_total (end-to-end)",
        }
    }

    fn configure(&self, cfg: &mut TrainConfig) {
        let (con, ils, ida) = match self {
            Self::Con => (true, false, false),
            Self::Ils => (false, true, false),
            Self::Ida => (false, false, true),
            Self::Cls => (false, false, false),
            Self::Total => (true, true, true),
        };
        cfg.loss_mask = LossMask {
            con,
            ils,
            ida,
            cls: true,
        };
        if *self == Self::Total {
            // Default weights (4, 1, 1, 1).
            return;
        }
        cfg.lambda_con = if con { 1.0 } else { 0.0 };
        cfg.lambda_ils = if ils { 1.0 } else { 0.0 };
        cfg.lambda_ida = if ida { 1.0 } else { 0.0 };
        cfg.lambda_cls = if *self == Self::Cls { 1.0 } else { 0.0 };
    }
}

struct EndToEndScenario {
    params: ModelParams,
    inputs: IterationInputs,
    cfg: TrainConfig,
    num_classes: usize,
    tau_pl: f64,
}

/// Degenerate if any ReLU pre-activation, embedding norm, pairwise
/// distance, top-k margin, or pseudo-label entry is too close to a
/// kink or clamp for central differencing at FD_STEP.
fn scenario_is_degenerate(s: &EndToEndScenario) -> Result<bool> {
    let margin = 1e-3;
    let mut all_inputs: Vec<&Vec<f64>> = s.inputs.support.features.iter().collect();
    for (_, views) in &s.inputs.unlabeled {
        all_inputs.extend(views.global_views.iter());
        all_inputs.extend(views.local_views.iter());
    }
    let mut embeddings = Vec::new();
    for x in all_inputs {
        let (z, cache) = forward_features_cached(&s.params, x)?;
        for preacts in &cache.preacts[..cache.preacts.len() - 1] {
            if preacts.iter().any(|p| p.abs() < margin) {
                return Ok(true);
            }
        }
        if z.norm() < margin {
            return Ok(true);
        }
        embeddings.push(z);
    }
    // Top-k margin and coincidence on the first-global embeddings.
    if s.cfg.loss_mask.ida {
        let n_sup = s.inputs.support.features.len();
        let stride = 2 + s.cfg.eta_l;
        let firsts: Vec<&Embedding> = s
            .inputs
            .unlabeled
            .iter()
            .enumerate()
            .map(|(i, _)| &embeddings[n_sup + i * stride])
            .collect();
        for z in &firsts {
            let mut sorted = z.values().to_vec();
            sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
            if s.cfg.top_k < sorted.len()
                && (sorted[s.cfg.top_k - 1] - sorted[s.cfg.top_k]).abs() < margin
            {
                return Ok(true);
            }
        }
        for i in 0..firsts.len() {
            for j in (i + 1)..firsts.len() {
                let dist: f64 = firsts[i]
                    .values()
                    .iter()
                    .zip(firsts[j].values())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if dist < margin {
                    return Ok(true);
                }
            }
        }
    }
    Ok(false)
}

fn sample_scenario(rng: &mut ChaCha8Rng, target: EndToEndTarget) -> Result<EndToEndScenario> {
    let classes = rng.gen_range(2..4usize);
    let d_in = rng.gen_range(2..4usize);
    let hidden = rng.gen_range(3..6usize);
    let embed = rng.gen_range(3..5usize);
    let eta_sup = rng.gen_range(1..3usize);
    let n_u = rng.gen_range(2..4usize);
    let eta_l = rng.gen_range(0..3usize);

    let mut cfg = TrainConfig {
        eta_sup,
        eta_l,
        b_u: n_u,
        hidden_dims: vec![hidden],
        embed_dim: embed,
        top_k: rng.gen_range(1..=embed),
        tau_con: 0.4,
        tau_sharp: 0.4,
        ..TrainConfig::default()
    };
    target.configure(&mut cfg);

    let params = ModelParams::init(&[d_in, hidden, embed], classes, rng)?;

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut domains = Vec::new();
    for domain in [Domain::Source, Domain::Target] {
        for class in 0..classes {
            for _ in 0..eta_sup {
                features.push(rand_vec(rng, d_in, -1.5, 1.5));
                labels.push(class);
                domains.push(domain);
            }
        }
    }
    let support = SupportSelection {
        features,
        labels,
        domains,
    };
    let unlabeled: Vec<(SampleId, ViewSet)> = (0..n_u)
        .map(|i| {
            (
                SampleId(i as u64),
                ViewSet {
                    global_views: (0..2).map(|_| rand_vec(rng, d_in, -1.5, 1.5)).collect(),
                    local_views: (0..eta_l).map(|_| rand_vec(rng, d_in, -1.5, 1.5)).collect(),
                },
            )
        })
        .collect();

    Ok(EndToEndScenario {
        params,
        inputs: IterationInputs { support, unlabeled },
        cfg,
        num_classes: classes,
        tau_pl: 0.7,
    })
}

/// End-to-end gradient check of one target through the full model.
pub fn check_end_to_end(seed: u64, configs: usize, target: EndToEndTarget) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x44);
    let mut max_rel = 0.0;
    let mut worst = 0;
    let mut done = 0;
    let mut attempts = 0;
    while done < configs {
        attempts += 1;
        if attempts > configs * 200 {
            return Err(SpiError::InconsistentState(
                "could not sample a non-degenerate end-to-end configuration".into(),
            ));
        }
        let scenario = sample_scenario(&mut rng, target)?;
        match scenario_is_degenerate(&scenario) {
            Ok(false) => {}
            Ok(true) => continue,
            Err(SpiError::DegenerateEmbedding { .. }) => continue,
            Err(e) => return Err(e),
        }

        let assembly = match compute_losses(
            &scenario.params,
            &scenario.inputs,
            &scenario.cfg,
            scenario.num_classes,
            scenario.tau_pl,
            None,
            true,
        ) {
            Ok(a) => a,
            Err(SpiError::DegenerateEmbedding { .. }) => continue,
            Err(e) => return Err(e),
        };
        let frozen: FrozenStructure = assembly.frozen;
        let analytic = assembly.grads.expect("gradients requested").flatten();

        let flat = scenario.params.flatten();
        let numeric = fd_gradient(
            |x| {
                let p = scenario.params.from_flat(x)?;
                let a = compute_losses(
                    &p,
                    &scenario.inputs,
                    &scenario.cfg,
                    scenario.num_classes,
                    scenario.tau_pl,
                    Some(&frozen),
                    false,
                )?;
                Ok(a.breakdown.total)
            },
            &flat,
            FD_STEP,
        )?;
        let (rel, coord) = compare_gradients(&analytic, &numeric);
        if rel > max_rel {
            max_rel = rel;
            worst = coord;
        }
        done += 1;
    }
    Ok(report(target.label(), configs, max_rel, worst, END_TO_END_TOL))
}

/// The full suite: four module-level checks, four isolated end-to-end
/// checks, and the combined objective.
pub fn run_gradcheck(seed: u64, configs: usize) -> Result<Vec<GradCheckReport>> {
    Ok(vec![
        check_contrastive(seed, configs)?,
        check_instance_similarity(seed, configs)?,
        check_intra_domain(seed, configs)?,
        check_classification(seed, configs)?,
        check_end_to_end(seed, configs, EndToEndTarget::Con)?,
        check_end_to_end(seed, configs, EndToEndTarget::Ils)?,
        check_end_to_end(seed, configs, EndToEndTarget::Ida)?,
        check_end_to_end(seed, configs, EndToEndTarget::Cls)?,
        check_end_to_end(seed, configs, EndToEndTarget::Total)?,
    ])
}
