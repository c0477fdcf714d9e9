//! The end-to-end training loop: per-iteration loss assembly and
//! optimizer steps, per-epoch injection/removal, evaluation, audits,
//! and artifact emission.
//!
//! Each iteration runs the same fixed sequence: sample the support
//! set, sample an unlabeled batch, generate views, forward everything,
//! compute per-view soft pseudo-labels, update the EMA store from the
//! first global view, assemble the masked weighted loss, and take one
//! SGD step. The classifier-only mask is the source+target baseline:
//! it trains on labeled samples alone, with no pseudo-labeling and no
//! injection.
//!
//! Determinism: a run is a pure function of (config, bundle). Each
//! epoch consumes one ChaCha stream (stream = epoch + 1; stream 0
//! initializes weights) in a fixed order: support draw, unlabeled
//! draw, then views per batch sample.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{InjectionInterval, TrainConfig};
use crate::datasets::{DatasetBundle, LabeledSet, SampleId, UnlabeledSet};
use crate::error::{Result, SpiError};
use crate::losses::{
    build_similarity_mask, classification_loss, ils_value_with_targets, instance_similarity_loss,
    intra_domain_alignment, supervised_contrastive, total_loss, IlsTargets, LossValueWithGrad,
    SupportBatch,
};
use crate::math::{l2_normalize, l2_normalize_backward, sharpen, Embedding, ProbVector, Temperature};
use crate::model::{
    classifier_backward, forward_classifier, forward_features, forward_features_cached,
    mlp_backward, save_checkpoint, sgd_step, Checkpoint, MlpCache, ModelParams, OptimizerState,
    Schedule,
};
use crate::pseudo::{
    apply_update, select_injections, select_removals, soft_pseudo_label,
    soft_pseudo_label_backward, write_store_snapshot, InjectionDecision, PseudoLabelCache,
    PseudoLabelStore,
};
use crate::sampling::{generate_views, sample_support, sample_unlabeled, SupportSelection, ViewSet};

/// Fixed inputs of one iteration after sampling: support features and
/// the generated views of each unlabeled batch sample.
#[derive(Debug, Clone)]
pub struct IterationInputs {
    pub support: SupportSelection,
    pub unlabeled: Vec<(SampleId, ViewSet)>,
}

/// Stop-gradient structure of one iteration, held fixed by the
/// finite-difference harness: sharpened instance-similarity targets
/// and the top-k similarity mask.
#[derive(Debug, Clone, Default)]
pub struct FrozenStructure {
    pub ils_targets: Option<IlsTargets>,
    pub ida_mask: Option<Vec<Vec<bool>>>,
}

/// Unweighted component values plus the weighted total.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub con: f64,
    pub ils: f64,
    pub ida: f64,
    pub cls: f64,
    pub total: f64,
}

pub(crate) struct LossAssembly {
    pub breakdown: LossBreakdown,
    pub grads: Option<ModelParams>,
    pub frozen: FrozenStructure,
    /// Sharpened first-global-view pseudo-label per batch sample.
    pub store_updates: Vec<(SampleId, ProbVector)>,
}

struct ViewForward {
    z: Embedding,
    cache: MlpCache,
    z_hat: Embedding,
    norm: f64,
    pseudo: ProbVector,
    pl_cache: PseudoLabelCache,
}

/// Forward (and optionally backward) pass over one iteration's inputs.
///
/// `frozen` supplies stop-gradient structure computed at a base point;
/// when absent it is computed from the current forward pass and
/// returned. Gradients are only available on the unfrozen path.
pub(crate) fn compute_losses(
    params: &ModelParams,
    inputs: &IterationInputs,
    cfg: &TrainConfig,
    num_classes: usize,
    tau_pl: f64,
    frozen: Option<&FrozenStructure>,
    want_grads: bool,
) -> Result<LossAssembly> {
    assert!(
        !(want_grads && frozen.is_some()),
        "gradients are computed at the base point only"
    );
    let mask = cfg.loss_mask;
    let st_only = mask.is_classifier_only();
    let weights = cfg.weights();
    let d = params.embed_dim();
    let tau_pl = Temperature::new(tau_pl)?;
    let tau_sharp = Temperature::new(cfg.tau_sharp)?;
    let tau_con = Temperature::new(cfg.tau_con)?;

    // Support forward.
    let n_sup = inputs.support.len();
    let mut sup_embeddings = Vec::with_capacity(n_sup);
    let mut sup_caches = Vec::with_capacity(n_sup);
    for x in &inputs.support.features {
        let (z, cache) = forward_features_cached(params, x)?;
        sup_embeddings.push(z);
        sup_caches.push(cache);
    }
    let support_batch = SupportBatch::new(
        sup_embeddings.clone(),
        inputs.support.labels.clone(),
        inputs.support.domains.clone(),
    )?;

    // Unlabeled forward: embeddings, normalized embeddings and per-view
    // soft pseudo-labels.
    let mut sup_hats: Vec<Embedding> = Vec::new();
    let mut sup_norms: Vec<f64> = Vec::new();
    let mut view_fwds: Vec<Vec<ViewForward>> = Vec::new();
    let mut store_updates = Vec::new();
    if !st_only {
        for z in &sup_embeddings {
            sup_norms.push(z.norm());
            sup_hats.push(l2_normalize(z)?);
        }
        for (id, views) in &inputs.unlabeled {
            let mut fwds = Vec::with_capacity(views.global_views.len() + views.local_views.len());
            for x in views.global_views.iter().chain(&views.local_views) {
                let (z, cache) = forward_features_cached(params, x)?;
                let norm = z.norm();
                let z_hat = l2_normalize(&z)?;
                let (pseudo, pl_cache) = soft_pseudo_label(
                    &z_hat,
                    &sup_hats,
                    &inputs.support.labels,
                    num_classes,
                    tau_pl,
                )?;
                fwds.push(ViewForward {
                    z,
                    cache,
                    z_hat,
                    norm,
                    pseudo,
                    pl_cache,
                });
            }
            store_updates.push((*id, sharpen(&fwds[0].pseudo, tau_sharp)?));
            view_fwds.push(fwds);
        }
    }

    let n_local = cfg.eta_l;
    let zero = LossValueWithGrad::zero(0);

    // Per-embedding gradient accumulators, combined across losses with
    // their weights before the single backward sweep.
    let mut d_sup = vec![vec![0.0; d]; n_sup];
    let mut d_views: Vec<Vec<Vec<f64>>> = view_fwds
        .iter()
        .map(|fwds| vec![vec![0.0; d]; fwds.len()])
        .collect();
    let mut grads = want_grads.then(|| params.zeros_like());

    let mut breakdown = LossBreakdown::default();

    // Supervised contrastive loss on the support embeddings.
    if mask.con {
        let out = supervised_contrastive(
            &support_batch,
            tau_con,
            cfg.normalize_contrastive,
            cfg.anchor_mode,
        )?;
        breakdown.con = out.value;
        if want_grads && weights.lambda_con != 0.0 {
            for (j, dz) in d_sup.iter_mut().enumerate() {
                for (g, o) in dz.iter_mut().zip(&out.grad[j * d..(j + 1) * d]) {
                    *g += weights.lambda_con * o;
                }
            }
        }
    }

    // Classifier loss on the support set only.
    let mut logits_rows = Vec::with_capacity(n_sup);
    for z in &sup_embeddings {
        let (logits, _) = forward_classifier(params, z)?;
        logits_rows.push(logits);
    }
    let cls_out = classification_loss(
        &logits_rows,
        &inputs.support.labels,
        cfg.label_smoothing,
        num_classes,
    )?;
    breakdown.cls = cls_out.value;
    if let Some(grads) = grads.as_mut() {
        if weights.lambda_cls != 0.0 {
            for (j, dz) in d_sup.iter_mut().enumerate() {
                let d_logits: Vec<f64> = cls_out.grad[j * num_classes..(j + 1) * num_classes]
                    .iter()
                    .map(|g| weights.lambda_cls * g)
                    .collect();
                classifier_backward(params, sup_embeddings[j].values(), &d_logits, grads, dz);
            }
        }
    }

    // Instance-level similarity loss over the per-view pseudo-labels.
    let mut frozen_out = FrozenStructure::default();
    if mask.ils && !st_only {
        let globals: Vec<Vec<ProbVector>> = view_fwds
            .iter()
            .map(|fwds| vec![fwds[0].pseudo.clone(), fwds[1].pseudo.clone()])
            .collect();
        let locals: Vec<Vec<ProbVector>> = view_fwds
            .iter()
            .map(|fwds| fwds[2..].iter().map(|f| f.pseudo.clone()).collect())
            .collect();
        match frozen.and_then(|f| f.ils_targets.as_ref()) {
            Some(targets) => {
                let raw =
                    |views: &[Vec<ProbVector>]| -> Vec<Vec<Vec<f64>>> {
                        views
                            .iter()
                            .map(|vs| vs.iter().map(|p| p.values().to_vec()).collect())
                            .collect()
                    };
                breakdown.ils = ils_value_with_targets(&raw(&globals), &raw(&locals), targets)?;
            }
            None => {
                let (out, targets) = instance_similarity_loss(&globals, &locals, tau_sharp)?;
                breakdown.ils = out.value;
                frozen_out.ils_targets = Some(targets);
                if want_grads && weights.lambda_ils != 0.0 {
                    let c = num_classes;
                    let mut d_sup_hat = vec![vec![0.0; d]; n_sup];
                    let chunk = |offset: usize| -> Vec<f64> {
                        out.grad[offset..offset + c]
                            .iter()
                            .map(|g| weights.lambda_ils * g)
                            .collect()
                    };
                    let mut offset = 0;
                    // Globals first, in (sample, view) order, then locals.
                    for (i, fwds) in view_fwds.iter().enumerate() {
                        for v in 0..2 {
                            let d_pseudo = chunk(offset);
                            offset += c;
                            let mut d_zhat = vec![0.0; d];
                            soft_pseudo_label_backward(
                                &d_pseudo,
                                &fwds[v].pl_cache,
                                &inputs.support.labels,
                                tau_pl,
                                &fwds[v].z_hat,
                                &sup_hats,
                                &mut d_zhat,
                                &mut d_sup_hat,
                            );
                            l2_normalize_backward(
                                fwds[v].z_hat.values(),
                                fwds[v].norm,
                                &d_zhat,
                                &mut d_views[i][v],
                            );
                        }
                    }
                    for (i, fwds) in view_fwds.iter().enumerate() {
                        for v in 0..n_local {
                            let d_pseudo = chunk(offset);
                            offset += c;
                            let fwd = &fwds[2 + v];
                            let mut d_zhat = vec![0.0; d];
                            soft_pseudo_label_backward(
                                &d_pseudo,
                                &fwd.pl_cache,
                                &inputs.support.labels,
                                tau_pl,
                                &fwd.z_hat,
                                &sup_hats,
                                &mut d_zhat,
                                &mut d_sup_hat,
                            );
                            l2_normalize_backward(
                                fwd.z_hat.values(),
                                fwd.norm,
                                &d_zhat,
                                &mut d_views[i][2 + v],
                            );
                        }
                    }
                    for m in 0..n_sup {
                        l2_normalize_backward(
                            sup_hats[m].values(),
                            sup_norms[m],
                            &d_sup_hat[m],
                            &mut d_sup[m],
                        );
                    }
                }
            }
        }
    }

    // Intra-domain alignment on the first global view's raw embeddings.
    if mask.ida && !st_only {
        let z_g1: Vec<Embedding> = view_fwds.iter().map(|fwds| fwds[0].z.clone()).collect();
        let sim_mask = match frozen.and_then(|f| f.ida_mask.as_ref()) {
            Some(m) => m.clone(),
            None => build_similarity_mask(&z_g1, cfg.top_k)?,
        };
        let out = intra_domain_alignment(&z_g1, &sim_mask)?;
        breakdown.ida = out.value;
        if want_grads && weights.lambda_ida != 0.0 {
            for (i, dv) in d_views.iter_mut().enumerate() {
                for (g, o) in dv[0].iter_mut().zip(&out.grad[i * d..(i + 1) * d]) {
                    *g += weights.lambda_ida * o;
                }
            }
        }
        frozen_out.ida_mask = Some(sim_mask);
    }

    // Weighted total of the masked components.
    let part = |enabled: bool, value: f64| -> LossValueWithGrad {
        if enabled {
            LossValueWithGrad { value, grad: Vec::new() }
        } else {
            zero.clone()
        }
    };
    let total = total_loss(
        &part(mask.con, breakdown.con),
        &part(mask.ils && !st_only, breakdown.ils),
        &part(mask.ida && !st_only, breakdown.ida),
        &part(true, breakdown.cls),
        &weights,
    )?;
    breakdown.total = total.value;

    // One backward sweep through the feature extractor.
    if let Some(grads) = grads.as_mut() {
        for (j, dz) in d_sup.iter().enumerate() {
            mlp_backward(params, &sup_caches[j], dz, grads);
        }
        for (i, fwds) in view_fwds.iter().enumerate() {
            for (v, fwd) in fwds.iter().enumerate() {
                mlp_backward(params, &fwd.cache, &d_views[i][v], grads);
            }
        }
    }

    // Keep the frozen structure available on frozen re-evaluations too.
    if let Some(f) = frozen {
        frozen_out = f.clone();
    }

    Ok(LossAssembly {
        breakdown,
        grads,
        frozen: frozen_out,
        store_updates,
    })
}

/// Losses and bookkeeping of one completed iteration.
#[derive(Debug, Clone)]
pub struct IterationLosses {
    pub con: f64,
    pub ils: f64,
    pub ida: f64,
    pub cls: f64,
    pub total: f64,
    pub lr: f64,
    pub tau_pl: f64,
    /// Sharpened first-global-view pseudo-labels written to the store
    /// this iteration.
    pub store_updates: Vec<(SampleId, Vec<f64>)>,
}

/// One row of the per-epoch metrics CSV.
#[derive(Debug, Clone, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss_con: f64,
    pub loss_ils: f64,
    pub loss_ida: f64,
    pub loss_cls: f64,
    pub loss_total: f64,
    pub test_acc: f64,
    /// Samples newly added to the labeled target set this epoch.
    pub n_inject: usize,
    /// Samples removed from the labeled target set this epoch.
    pub n_remove: usize,
    pub n_labeled_target: usize,
    /// Injected samples whose assigned class differs from the hidden
    /// audit label.
    pub n_false_positive: usize,
    pub lr: f64,
    pub tau_pl: f64,
}

pub const METRICS_HEADER: &str = "epoch,loss_con,loss_ils,loss_ida,loss_cls,loss_total,test_acc,n_inject,n_remove,n_labeled_target,n_false_positive,lr,tau_pl";

impl EpochReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{:.8},{:.6}",
            self.epoch,
            self.loss_con,
            self.loss_ils,
            self.loss_ida,
            self.loss_cls,
            self.loss_total,
            self.test_acc,
            self.n_inject,
            self.n_remove,
            self.n_labeled_target,
            self.n_false_positive,
            self.lr,
            self.tau_pl,
        )
    }
}

#[derive(Default)]
struct EpochAccumulator {
    sums: LossBreakdown,
    iterations: usize,
    injected: usize,
    removed: usize,
}

/// The training state machine.
pub struct Trainer {
    cfg: TrainConfig,
    source: LabeledSet,
    unlabeled: UnlabeledSet,
    t_hat_0: LabeledSet,
    test: LabeledSet,
    num_classes: usize,
    params: ModelParams,
    opt: OptimizerState,
    store: PseudoLabelStore,
    t_hat: LabeledSet,
    epoch: usize,
    iters_per_epoch: usize,
    lr_schedule: Schedule,
    tau_schedule: Schedule,
    accum: EpochAccumulator,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, bundle: &DatasetBundle) -> Result<Self> {
        cfg.validate()?;
        let num_classes = bundle.num_classes();
        let input_dim = bundle.input_dim();
        if bundle.source.is_empty() || bundle.t_hat_0.is_empty() {
            return Err(SpiError::InvalidSpec("bundle has empty labeled sets".into()));
        }

        let mut dims = vec![input_dim];
        dims.extend_from_slice(&cfg.hidden_dims);
        dims.push(cfg.embed_dim);
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        init_rng.set_stream(0);
        let params = ModelParams::init(&dims, num_classes, &mut init_rng)?;
        let opt = OptimizerState::new(&params, cfg.momentum, cfg.weight_decay);

        let iters_per_epoch = if cfg.iters_per_epoch > 0 {
            cfg.iters_per_epoch
        } else {
            bundle.unlabeled.len().div_ceil(cfg.b_u).max(1)
        };
        let total_epochs = cfg.epochs.max(1);
        let lr_schedule = Schedule {
            start: cfg.lr_start,
            peak: cfg.lr_peak,
            floor: cfg.lr_floor,
            warmup_epochs: cfg.warmup_epochs.min(total_epochs),
            total_epochs,
        };
        lr_schedule.validate()?;
        let tau_schedule = Schedule {
            start: cfg.tau_pl_start,
            peak: cfg.tau_pl_start,
            floor: cfg.tau_pl_floor,
            warmup_epochs: 0,
            total_epochs,
        };
        tau_schedule.validate()?;

        let effective_rho = if cfg.use_ema { cfg.rho } else { 1.0 };
        let store = PseudoLabelStore::new(effective_rho)?;

        Ok(Self {
            t_hat: bundle.t_hat_0.clone(),
            source: bundle.source.clone(),
            unlabeled: bundle.unlabeled.clone(),
            t_hat_0: bundle.t_hat_0.clone(),
            test: bundle.test.clone(),
            num_classes,
            params,
            opt,
            store,
            epoch: 0,
            iters_per_epoch,
            lr_schedule,
            tau_schedule,
            accum: EpochAccumulator::default(),
            cfg,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn store(&self) -> &PseudoLabelStore {
        &self.store
    }

    pub fn t_hat(&self) -> &LabeledSet {
        &self.t_hat
    }

    pub fn current_epoch(&self) -> usize {
        self.epoch
    }

    pub fn iters_per_epoch(&self) -> usize {
        self.iters_per_epoch
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// The RNG stream of the current epoch.
    pub fn epoch_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.epoch as u64 + 1);
        rng
    }

    /// Sample this iteration's inputs, consuming the epoch RNG in the
    /// fixed order (support, unlabeled batch, views per sample).
    pub fn sample_iteration_inputs(&self, rng: &mut ChaCha8Rng) -> Result<IterationInputs> {
        let support = sample_support(
            &self.source,
            &self.t_hat,
            self.cfg.eta_sup,
            self.num_classes,
            rng,
        )?;
        let mut unlabeled = Vec::new();
        if !self.cfg.loss_mask.is_classifier_only() {
            let batch = sample_unlabeled(&self.unlabeled, self.cfg.b_u, rng)?;
            let view_cfg = self.cfg.view_config();
            for (id, features) in batch {
                unlabeled.push((id, generate_views(&features, &view_cfg, rng)?));
            }
        }
        Ok(IterationInputs { support, unlabeled })
    }

    /// One inner-loop step. `iter_idx` positions the schedules within
    /// the epoch.
    pub fn train_iteration(
        &mut self,
        rng: &mut ChaCha8Rng,
        iter_idx: usize,
    ) -> Result<IterationLosses> {
        let fraction = iter_idx as f64 / self.iters_per_epoch as f64;
        let sched_epoch = self.epoch.min(self.lr_schedule.total_epochs - 1);
        let lr = self.lr_schedule.value(sched_epoch, fraction)?;
        let tau_pl = self.tau_schedule.value(sched_epoch, fraction)?;

        let inputs = self.sample_iteration_inputs(rng)?;
        let assembly = compute_losses(
            &self.params,
            &inputs,
            &self.cfg,
            self.num_classes,
            tau_pl,
            None,
            true,
        )?;
        if !assembly.breakdown.total.is_finite() {
            return Err(SpiError::NonFiniteLoss(format!(
                "total loss {}",
                assembly.breakdown.total
            )));
        }

        // EMA store update from the first global view.
        let mut store_updates = Vec::with_capacity(assembly.store_updates.len());
        for (id, sharpened) in &assembly.store_updates {
            self.store.ema_update(*id, sharpened.clone());
            store_updates.push((*id, sharpened.values().to_vec()));
        }

        let grads = assembly.grads.expect("gradients requested");
        sgd_step(&mut self.params, &grads, &mut self.opt, lr)?;

        if self.cfg.injection_interval == InjectionInterval::Iteration
            && !self.cfg.loss_mask.is_classifier_only()
        {
            let (injected, removed) = self.run_injection()?;
            self.accum.injected += injected;
            self.accum.removed += removed;
        }

        let b = assembly.breakdown;
        self.accum.sums.con += b.con;
        self.accum.sums.ils += b.ils;
        self.accum.sums.ida += b.ida;
        self.accum.sums.cls += b.cls;
        self.accum.sums.total += b.total;
        self.accum.iterations += 1;

        Ok(IterationLosses {
            con: b.con,
            ils: b.ils,
            ida: b.ida,
            cls: b.cls,
            total: b.total,
            lr,
            tau_pl,
            store_updates,
        })
    }

    /// Select injections/removals from the current store and apply them
    /// (respecting warmup). Returns (newly added, removed) counts.
    fn run_injection(&mut self) -> Result<(usize, usize)> {
        if self.epoch < self.cfg.warmup_epochs {
            return Ok((0, 0));
        }
        let inject = select_injections(&self.store, &self.unlabeled, self.cfg.gamma)?;
        let remove = if self.cfg.removal_enabled {
            select_removals(&self.t_hat, &self.t_hat_0, &self.store, self.cfg.gamma)?
        } else {
            Vec::new()
        };
        let decision = InjectionDecision {
            inject,
            remove,
            epoch: self.epoch,
        };
        let newly_added = decision
            .inject
            .iter()
            .filter(|(id, _)| !self.t_hat.contains_id(*id))
            .count();
        let removed = decision.remove.len();
        self.t_hat = apply_update(
            &self.t_hat,
            &self.unlabeled,
            &decision,
            self.epoch,
            self.cfg.warmup_epochs,
        )?;
        Ok((newly_added, removed))
    }

    /// Epoch tail: injection/removal (in epoch mode), test evaluation,
    /// false-positive audit, and the metrics row. Advances the epoch.
    pub fn end_of_epoch(&mut self) -> Result<EpochReport> {
        let (injected, removed) = match self.cfg.injection_interval {
            InjectionInterval::Epoch if !self.cfg.loss_mask.is_classifier_only() => {
                self.run_injection()?
            }
            _ => (self.accum.injected, self.accum.removed),
        };

        let test_acc = evaluate(&self.params, &self.test)?;

        // Audit: injected samples carrying a class different from their
        // hidden true label. Uses the audit channel only.
        let mut n_false_positive = 0;
        for s in &self.t_hat.samples {
            if self.t_hat_0.contains_id(s.id) {
                continue;
            }
            if let Some(truth) = self.unlabeled.audit().true_label(s.id) {
                if truth != s.label {
                    n_false_positive += 1;
                }
            }
        }

        let iters = self.accum.iterations.max(1) as f64;
        let sched_epoch = self.epoch.min(self.lr_schedule.total_epochs - 1);
        let report = EpochReport {
            epoch: self.epoch,
            loss_con: self.accum.sums.con / iters,
            loss_ils: self.accum.sums.ils / iters,
            loss_ida: self.accum.sums.ida / iters,
            loss_cls: self.accum.sums.cls / iters,
            loss_total: self.accum.sums.total / iters,
            test_acc,
            n_inject: injected,
            n_remove: removed,
            n_labeled_target: self.t_hat.len(),
            n_false_positive,
            lr: self.lr_schedule.value(sched_epoch, 0.0)?,
            tau_pl: self.tau_schedule.value(sched_epoch, 0.0)?,
        };
        self.epoch += 1;
        self.accum = EpochAccumulator::default();
        Ok(report)
    }
}

/// Top-1 accuracy of the classifier on a labeled set.
pub fn evaluate(params: &ModelParams, test: &LabeledSet) -> Result<f64> {
    if test.is_empty() {
        return Err(SpiError::EmptyTestSet);
    }
    let mut correct = 0usize;
    for s in &test.samples {
        let z = forward_features(params, &s.features)?;
        let (_, probs) = forward_classifier(params, &z)?;
        if probs.argmax() == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Top-k gallery items by cosine similarity to the query, descending;
/// ties resolve to the lowest id.
pub fn nearest_neighbors(
    query: &Embedding,
    gallery: &[(SampleId, Embedding)],
    k: usize,
) -> Result<Vec<(SampleId, f64)>> {
    if k < 1 || k > gallery.len() {
        return Err(SpiError::InvalidK {
            k,
            d: gallery.len(),
        });
    }
    let q = l2_normalize(query)?;
    let mut scored: Vec<(SampleId, f64)> = gallery
        .iter()
        .map(|(id, z)| {
            let zn = l2_normalize(z)?;
            Ok((*id, crate::math::dot(q.values(), zn.values())))
        })
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("similarities are finite")
            .then(a.0.cmp(&b.0))
    });
    scored.truncate(k);
    Ok(scored)
}

/// Everything a finished run produces.
pub struct RunOutput {
    pub reports: Vec<EpochReport>,
    pub params: ModelParams,
    pub metrics_csv: String,
}

/// Summary written beside the metrics CSV.
#[derive(Serialize)]
struct RunSummary<'a> {
    config: &'a TrainConfig,
    num_classes: usize,
    input_dim: usize,
    n_source: usize,
    n_unlabeled: usize,
    n_labeled_target_initial: usize,
    n_test: usize,
    iters_per_epoch: usize,
    final_epoch: Option<&'a EpochReport>,
}

/// Run the full training loop. With an output directory this writes
/// `metrics.csv`, `summary.json`, `checkpoint.bin` and `store.csv`;
/// identical (config, bundle) pairs produce byte-identical artifacts.
pub fn run(cfg: &TrainConfig, bundle: &DatasetBundle, outdir: Option<&Path>) -> Result<RunOutput> {
    let mut trainer = Trainer::new(cfg.clone(), bundle)?;
    let mut reports = Vec::with_capacity(cfg.epochs);
    let mut metrics_csv = String::from(METRICS_HEADER);
    metrics_csv.push('\n');

    for epoch in 0..cfg.epochs {
        let mut rng = trainer.epoch_rng();
        for iter_idx in 0..trainer.iters_per_epoch {
            trainer.train_iteration(&mut rng, iter_idx).map_err(|e| match e {
                SpiError::NonFiniteLoss(msg) => SpiError::NonFiniteLoss(format!(
                    "epoch {epoch} iteration {iter_idx}: {msg}"
                )),
                other => other,
            })?;
        }
        let report = trainer.end_of_epoch()?;
        let _ = writeln!(metrics_csv, "{}", report.csv_row());
        reports.push(report);
    }

    if let Some(dir) = outdir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), metrics_csv.as_bytes())?;

        let ckpt = Checkpoint {
            params: trainer.params.clone(),
            velocity: trainer.opt.velocity.clone(),
            seed: cfg.seed,
            epoch: cfg.epochs as u64,
        };
        save_checkpoint(&ckpt, &dir.join("checkpoint.bin"))?;

        let injected: BTreeMap<SampleId, usize> = trainer
            .t_hat
            .samples
            .iter()
            .filter(|s| !trainer.t_hat_0.contains_id(s.id))
            .map(|s| (s.id, s.label))
            .collect();
        let store_file = std::fs::File::create(dir.join("store.csv"))?;
        write_store_snapshot(
            &trainer.store,
            &injected,
            trainer.num_classes,
            std::io::BufWriter::new(store_file),
        )?;

        let summary = RunSummary {
            config: cfg,
            num_classes: trainer.num_classes,
            input_dim: bundle.input_dim(),
            n_source: bundle.source.len(),
            n_unlabeled: bundle.unlabeled.len(),
            n_labeled_target_initial: bundle.t_hat_0.len(),
            n_test: bundle.test.len(),
            iters_per_epoch: trainer.iters_per_epoch,
            final_epoch: reports.last(),
        };
        let json = serde_json::to_string_pretty(&summary)
            .map_err(|e| SpiError::InvalidConfig(format!("summary serialization: {e}")))?;
        std::fs::write(dir.join("summary.json"), json)?;
    }

    Ok(RunOutput {
        reports,
        params: trainer.params,
        metrics_csv,
    })
}
