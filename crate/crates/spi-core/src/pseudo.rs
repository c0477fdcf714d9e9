//! Similarity-based soft pseudo-labeling, the per-sample EMA confidence
//! store, and the epoch-wise injection/removal state machine over the
//! labeled target set.
//!
//! A soft pseudo-label is the support-label mixture induced by a
//! temperature softmax over cosine similarities between an unlabeled
//! embedding and the support embeddings. Sharpened pseudo-labels feed a
//! per-sample exponential moving average; samples whose EMA confidence
//! reaches the threshold are injected into the labeled target set, and
//! previously injected samples whose confidence decays below it are
//! removed. The original labeled target samples are never removed.

use std::collections::BTreeMap;
use std::io::Write;

use crate::datasets::{LabeledSample, LabeledSet, SampleId, UnlabeledSet};
use crate::error::{Result, SpiError};
use crate::losses::SupportBatch;
use crate::math::{self, l2_normalize, softmax_tau, Embedding, ProbVector, Temperature};

/// Per-sample EMA of sharpened soft pseudo-labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelStore {
    entries: BTreeMap<SampleId, ProbVector>,
    rho: f64,
}

impl PseudoLabelStore {
    pub fn new(rho: f64) -> Result<Self> {
        if !rho.is_finite() || rho <= 0.0 || rho > 1.0 {
            return Err(SpiError::InvalidInput(format!(
                "momentum rho must lie in (0, 1], got {rho}"
            )));
        }
        Ok(Self {
            entries: BTreeMap::new(),
            rho,
        })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: SampleId) -> Option<&ProbVector> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SampleId, &ProbVector)> {
        self.entries.iter()
    }

    /// EMA update: on first visit the entry is set to `sharpened`
    /// exactly; afterwards entry ← rho·sharpened + (1 − rho)·entry.
    /// With rho = 1 the entry is always the latest sharpened label,
    /// bit for bit.
    pub fn ema_update(&mut self, id: SampleId, sharpened: ProbVector) -> &ProbVector {
        match self.entries.entry(id) {
            std::collections::btree_map::Entry::Vacant(slot) => slot.insert(sharpened),
            std::collections::btree_map::Entry::Occupied(mut slot) => {
                if self.rho == 1.0 {
                    slot.insert(sharpened);
                } else {
                    let old = slot.get().values().to_vec();
                    let mixed: Vec<f64> = sharpened
                        .values()
                        .iter()
                        .zip(&old)
                        .map(|(new, old)| self.rho * new + (1.0 - self.rho) * old)
                        .collect();
                    slot.insert(ProbVector::new(mixed).expect("convex combination stays on simplex"));
                }
                slot.into_mut()
            }
        }
    }
}

/// Softmax weights over the support rows, cached for the backward pass.
#[derive(Debug, Clone)]
pub struct PseudoLabelCache {
    pub weights: Vec<f64>,
}

/// Soft pseudo-label of one normalized embedding against normalized
/// support embeddings: mixture of support one-hot labels weighted by a
/// temperature softmax over cosine similarities.
pub fn soft_pseudo_label(
    z_hat: &Embedding,
    support_hat: &[Embedding],
    support_labels: &[usize],
    num_classes: usize,
    tau_pl: Temperature,
) -> Result<(ProbVector, PseudoLabelCache)> {
    if support_hat.len() != support_labels.len() || support_hat.is_empty() {
        return Err(SpiError::ShapeMismatch {
            expected: format!("{} support labels", support_hat.len()),
            got: format!("{}", support_labels.len()),
        });
    }
    let mut sims = Vec::with_capacity(support_hat.len());
    for s in support_hat {
        if s.len() != z_hat.len() {
            return Err(SpiError::ShapeMismatch {
                expected: format!("{}", z_hat.len()),
                got: format!("{}", s.len()),
            });
        }
        sims.push(math::dot(z_hat.values(), s.values()));
    }
    let weights = softmax_tau(&sims, tau_pl)?.into_vec();
    let mut pseudo = vec![0.0; num_classes];
    for (w, &label) in weights.iter().zip(support_labels) {
        if label >= num_classes {
            return Err(SpiError::InvalidClass {
                class: label,
                num_classes,
            });
        }
        pseudo[label] += w;
    }
    Ok((
        ProbVector::from_normalized(pseudo),
        PseudoLabelCache { weights },
    ))
}

/// Backward pass of `soft_pseudo_label`: accumulates dL/dẑ into
/// `d_z_hat` and dL/dẑ_sup into `d_support_hat`, given dL/dỹ.
#[allow(clippy::too_many_arguments)]
pub fn soft_pseudo_label_backward(
    d_pseudo: &[f64],
    cache: &PseudoLabelCache,
    support_labels: &[usize],
    tau_pl: Temperature,
    z_hat: &Embedding,
    support_hat: &[Embedding],
    d_z_hat: &mut [f64],
    d_support_hat: &mut [Vec<f64>],
) {
    let w = &cache.weights;
    // dL/dw_m = dL/dỹ[label_m]; softmax Jacobian with temperature.
    let mut inner = 0.0;
    for (wm, &label) in w.iter().zip(support_labels) {
        inner += wm * d_pseudo[label];
    }
    let inv_tau = 1.0 / tau_pl.value();
    for (m, (&wm, &label)) in w.iter().zip(support_labels).enumerate() {
        let ds = wm * (d_pseudo[label] - inner) * inv_tau;
        if ds == 0.0 {
            continue;
        }
        for (g, v) in d_z_hat.iter_mut().zip(support_hat[m].values()) {
            *g += ds * v;
        }
        for (g, v) in d_support_hat[m].iter_mut().zip(z_hat.values()) {
            *g += ds * v;
        }
    }
}

/// Soft pseudo-labels for a batch of raw unlabeled embeddings against a
/// support batch. Embeddings are L2-normalized on both sides.
pub fn compute_soft_pseudo_labels(
    z_u: &[Embedding],
    support: &SupportBatch,
    tau_pl: Temperature,
) -> Result<Vec<ProbVector>> {
    let num_classes = support.labels.iter().copied().max().map_or(0, |m| m + 1);
    let support_hat: Vec<Embedding> = support
        .embeddings
        .iter()
        .map(l2_normalize)
        .collect::<Result<_>>()?;
    z_u.iter()
        .map(|z| {
            let z_hat = l2_normalize(z)?;
            soft_pseudo_label(&z_hat, &support_hat, &support.labels, num_classes, tau_pl)
                .map(|(p, _)| p)
        })
        .collect()
}

/// Epoch-end membership change of the labeled target set.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionDecision {
    pub inject: Vec<(SampleId, usize)>,
    pub remove: Vec<(SampleId, usize)>,
    pub epoch: usize,
}

fn validate_gamma(gamma: f64) -> Result<()> {
    if !gamma.is_finite() || gamma <= 0.0 || gamma > 1.0 {
        return Err(SpiError::InvalidThreshold(gamma));
    }
    Ok(())
}

/// Samples of T whose EMA confidence reaches gamma (inclusive), paired
/// with their dominant class. Samples never visited have no store entry
/// and are skipped. Iterates T in order, so output order is stable.
pub fn select_injections(
    store: &PseudoLabelStore,
    unlabeled: &UnlabeledSet,
    gamma: f64,
) -> Result<Vec<(SampleId, usize)>> {
    validate_gamma(gamma)?;
    let mut out = Vec::new();
    for s in &unlabeled.samples {
        if let Some(p) = store.get(s.id) {
            if p.max_value() >= gamma {
                out.push((s.id, p.argmax()));
            }
        }
    }
    Ok(out)
}

/// Previously injected samples (members of T̂ but not T̂₀) whose EMA
/// confidence fell strictly below gamma, paired with the pseudo-label
/// they carry. Members of T̂₀ are never returned.
pub fn select_removals(
    t_hat: &LabeledSet,
    t_hat_0: &LabeledSet,
    store: &PseudoLabelStore,
    gamma: f64,
) -> Result<Vec<(SampleId, usize)>> {
    validate_gamma(gamma)?;
    let mut out = Vec::new();
    for s in &t_hat.samples {
        if t_hat_0.contains_id(s.id) {
            continue;
        }
        let p = store.get(s.id).ok_or_else(|| {
            SpiError::InconsistentState(format!("injected sample {} has no store entry", s.id))
        })?;
        if p.max_value() < gamma {
            out.push((s.id, s.label));
        }
    }
    Ok(out)
}

/// Apply an injection decision to the labeled target set.
///
/// During warmup (epoch < warmup_epochs) the set is returned unchanged.
/// Otherwise removals are dropped, injected samples join with their
/// dominant pseudo-label as ground truth, and an id already present is
/// relabeled to the latest dominant class. The result is sorted by id;
/// re-applying the same decision is a no-op.
pub fn apply_update(
    t_hat: &LabeledSet,
    unlabeled: &UnlabeledSet,
    decision: &InjectionDecision,
    epoch: usize,
    warmup_epochs: usize,
) -> Result<LabeledSet> {
    if epoch < warmup_epochs {
        return Ok(t_hat.clone());
    }
    let removed: std::collections::BTreeSet<SampleId> =
        decision.remove.iter().map(|(id, _)| *id).collect();
    let mut by_id: BTreeMap<SampleId, LabeledSample> = t_hat
        .samples
        .iter()
        .filter(|s| !removed.contains(&s.id))
        .cloned()
        .map(|s| (s.id, s))
        .collect();
    for &(id, label) in &decision.inject {
        match by_id.entry(id) {
            std::collections::btree_map::Entry::Occupied(mut slot) => {
                slot.get_mut().label = label;
            }
            std::collections::btree_map::Entry::Vacant(slot) => {
                let sample = unlabeled.by_id(id).ok_or_else(|| {
                    SpiError::InconsistentState(format!("injected id {id} not in unlabeled set"))
                })?;
                slot.insert(LabeledSample {
                    id,
                    features: sample.features.clone(),
                    label,
                });
            }
        }
    }
    Ok(LabeledSet {
        samples: by_id.into_values().collect(),
    })
}

/// Write the store as CSV: `id,p0..p{C-1},injected,assigned_label`, one
/// row per visited sample in id order. `assigned_label` is empty for
/// samples not currently injected.
pub fn write_store_snapshot<W: Write>(
    store: &PseudoLabelStore,
    injected: &BTreeMap<SampleId, usize>,
    num_classes: usize,
    mut out: W,
) -> Result<()> {
    let header: Vec<String> = std::iter::once("id".to_string())
        .chain((0..num_classes).map(|c| format!("p{c}")))
        .chain(["injected".to_string(), "assigned_label".to_string()])
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for (id, p) in store.iter() {
        write!(out, "{id}")?;
        for v in p.values() {
            write!(out, ",{v}")?;
        }
        match injected.get(id) {
            Some(label) => writeln!(out, ",1,{label}")?,
            None => writeln!(out, ",0,")?,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::UnlabeledSample;
    use crate::losses::Domain;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tau(v: f64) -> Temperature {
        Temperature::new(v).unwrap()
    }

    fn prob(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn unlabeled_set(ids: &[u64]) -> UnlabeledSet {
        let mut set = UnlabeledSet::default();
        for &id in ids {
            set.samples.push(UnlabeledSample {
                id: SampleId(id),
                features: vec![id as f64, 0.0],
            });
        }
        set
    }

    fn labeled_set(entries: &[(u64, usize)]) -> LabeledSet {
        LabeledSet {
            samples: entries
                .iter()
                .map(|&(id, label)| LabeledSample {
                    id: SampleId(id),
                    features: vec![id as f64, 1.0],
                    label,
                })
                .collect(),
        }
    }

    #[test]
    fn pseudo_label_low_temperature_snaps_to_nearest_support() {
        let support = SupportBatch::new(
            vec![emb(&[1.0, 0.0]), emb(&[0.0, 1.0])],
            vec![0, 1],
            vec![Domain::Source, Domain::Target],
        )
        .unwrap();
        let out = compute_soft_pseudo_labels(&[emb(&[2.0, 0.0])], &support, tau(0.01)).unwrap();
        assert!(out[0].values()[0] > 1.0 - 1e-9);
    }

    #[test]
    fn pseudo_label_symmetric_support_gives_uniform() {
        let inv = std::f64::consts::FRAC_1_SQRT_2;
        let support = SupportBatch::new(
            vec![emb(&[inv, inv]), emb(&[inv, -inv])],
            vec![0, 1],
            vec![Domain::Source, Domain::Target],
        )
        .unwrap();
        let out = compute_soft_pseudo_labels(&[emb(&[1.0, 0.0])], &support, tau(0.7)).unwrap();
        assert!((out[0].values()[0] - 0.5).abs() < 1e-12);
        assert!((out[0].values()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pseudo_label_matches_direct_evaluation() {
        // Support embeddings with cosines (0.9, 0.1) to the query.
        let query = emb(&[1.0, 0.0]);
        let s0 = emb(&[0.9, (1.0f64 - 0.81).sqrt()]);
        let s1 = emb(&[0.1, (1.0f64 - 0.01).sqrt()]);
        let support = SupportBatch::new(
            vec![s0, s1],
            vec![0, 1],
            vec![Domain::Source, Domain::Target],
        )
        .unwrap();
        let out = compute_soft_pseudo_labels(&[query], &support, tau(0.7)).unwrap();

        // Direct evaluation: softmax((0.9, 0.1)/0.7).
        let e0 = (0.9f64 / 0.7).exp();
        let e1 = (0.1f64 / 0.7).exp();
        let expect = e0 / (e0 + e1);
        assert!((out[0].values()[0] - expect).abs() < 1e-12);
        assert!((expect - 0.758_203_827_6).abs() < 1e-9);
    }

    #[test]
    fn pseudo_label_rejects_degenerate_embedding() {
        let support = SupportBatch::new(
            vec![emb(&[1.0, 0.0])],
            vec![0],
            vec![Domain::Source],
        )
        .unwrap();
        assert!(matches!(
            compute_soft_pseudo_labels(&[emb(&[0.0, 0.0])], &support, tau(0.7)),
            Err(SpiError::DegenerateEmbedding { .. })
        ));
    }

    #[test]
    fn pseudo_label_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 4;
        let m = 5;
        let num_classes = 3;
        let labels: Vec<usize> = (0..m).map(|i| i % num_classes).collect();
        let rand_vec =
            |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let z = emb(&rand_vec(&mut rng));
        let support: Vec<Embedding> = (0..m).map(|_| emb(&rand_vec(&mut rng))).collect();
        // Random linear functional of the pseudo-label as the test loss.
        let probe: Vec<f64> = (0..num_classes).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let eval = |z_flat: &[f64], support_flat: &[f64]| {
            let z = emb(z_flat);
            let sup: Vec<Embedding> = support_flat.chunks(d).map(emb).collect();
            let (p, _) = soft_pseudo_label(&z, &sup, &labels, num_classes, tau(0.7)).unwrap();
            math::dot(p.values(), &probe)
        };

        let (_, cache) = soft_pseudo_label(&z, &support, &labels, num_classes, tau(0.7)).unwrap();
        let mut d_z = vec![0.0; d];
        let mut d_sup = vec![vec![0.0; d]; m];
        soft_pseudo_label_backward(
            &probe, &cache, &labels, tau(0.7), &z, &support, &mut d_z, &mut d_sup,
        );

        let h = 1e-6;
        let z_flat = z.values().to_vec();
        let sup_flat: Vec<f64> = support.iter().flat_map(|s| s.values().to_vec()).collect();
        for i in 0..d {
            let mut zp = z_flat.clone();
            zp[i] += h;
            let mut zm = z_flat.clone();
            zm[i] -= h;
            let numeric = (eval(&zp, &sup_flat) - eval(&zm, &sup_flat)) / (2.0 * h);
            assert!((numeric - d_z[i]).abs() < 1e-6, "{numeric} vs {}", d_z[i]);
        }
        for j in 0..m * d {
            let mut sp = sup_flat.clone();
            sp[j] += h;
            let mut sm = sup_flat.clone();
            sm[j] -= h;
            let numeric = (eval(&z_flat, &sp) - eval(&z_flat, &sm)) / (2.0 * h);
            let analytic = d_sup[j / d][j % d];
            assert!((numeric - analytic).abs() < 1e-6, "{numeric} vs {analytic}");
        }
    }

    #[test]
    fn ema_first_visit_and_convex_updates() {
        let mut store = PseudoLabelStore::new(0.7).unwrap();
        let id = SampleId(9);
        let first = prob(&[0.5, 0.5]);
        assert_eq!(store.ema_update(id, first.clone()), &first);

        let updated = store.ema_update(id, prob(&[0.9, 0.1])).clone();
        assert!((updated.values()[0] - 0.78).abs() < 1e-12);
        assert!((updated.values()[1] - 0.22).abs() < 1e-12);
    }

    #[test]
    fn ema_rho_one_overwrites_bit_for_bit() {
        let mut store = PseudoLabelStore::new(1.0).unwrap();
        let id = SampleId(4);
        store.ema_update(id, prob(&[0.25, 0.75]));
        let latest = prob(&[0.123_456_789, 0.876_543_211]);
        store.ema_update(id, latest.clone());
        let stored = store.get(id).unwrap();
        assert_eq!(stored.values()[0].to_bits(), latest.values()[0].to_bits());
        assert_eq!(stored.values()[1].to_bits(), latest.values()[1].to_bits());
    }

    #[test]
    fn store_rejects_bad_rho() {
        assert!(PseudoLabelStore::new(0.0).is_err());
        assert!(PseudoLabelStore::new(1.1).is_err());
    }

    #[test]
    fn injection_selection_examples() {
        let mut store = PseudoLabelStore::new(0.7).unwrap();
        store.ema_update(SampleId(0), prob(&[0.95, 0.05]));
        store.ema_update(SampleId(1), prob(&[0.6, 0.4]));
        let t = unlabeled_set(&[0, 1, 2]);

        let picked = select_injections(&store, &t, 0.9).unwrap();
        assert_eq!(picked, vec![(SampleId(0), 0)]);

        let empty_store = PseudoLabelStore::new(0.7).unwrap();
        assert!(select_injections(&empty_store, &t, 0.9).unwrap().is_empty());

        // The threshold is inclusive.
        let mut exact = PseudoLabelStore::new(0.7).unwrap();
        exact.ema_update(SampleId(2), prob(&[1.0, 0.0]));
        let picked = select_injections(&exact, &t, 1.0).unwrap();
        assert_eq!(picked, vec![(SampleId(2), 0)]);
        let none = select_injections(&store, &t, 1.0).unwrap();
        assert!(none.is_empty());

        assert!(matches!(
            select_injections(&store, &t, 1.5),
            Err(SpiError::InvalidThreshold(_))
        ));
    }

    #[test]
    fn removal_selection_examples() {
        let t_hat_0 = labeled_set(&[(100, 0), (101, 1)]);
        let mut store = PseudoLabelStore::new(0.7).unwrap();

        // Nothing injected yet: no removals.
        assert!(select_removals(&t_hat_0, &t_hat_0, &store, 0.8)
            .unwrap()
            .is_empty());

        // Injected sample decayed to 0.7 < 0.8: removed with its
        // previously assigned label.
        store.ema_update(SampleId(5), prob(&[0.7, 0.3]));
        let mut t_hat = t_hat_0.clone();
        t_hat.samples.push(LabeledSample {
            id: SampleId(5),
            features: vec![0.0, 0.0],
            label: 0,
        });
        let removed = select_removals(&t_hat, &t_hat_0, &store, 0.8).unwrap();
        assert_eq!(removed, vec![(SampleId(5), 0)]);

        // Exactly gamma is kept (strict less-than).
        let mut boundary = PseudoLabelStore::new(0.7).unwrap();
        boundary.ema_update(SampleId(5), prob(&[0.8, 0.2]));
        assert!(select_removals(&t_hat, &t_hat_0, &boundary, 0.8)
            .unwrap()
            .is_empty());

        // Injected sample without store entry is inconsistent.
        let empty = PseudoLabelStore::new(0.7).unwrap();
        assert!(matches!(
            select_removals(&t_hat, &t_hat_0, &empty, 0.8),
            Err(SpiError::InconsistentState(_))
        ));
    }

    #[test]
    fn apply_update_examples() {
        let t_hat_0 = labeled_set(&[(100, 0)]);
        let t = unlabeled_set(&[0, 1]);

        let decision = InjectionDecision {
            inject: vec![(SampleId(0), 1)],
            remove: vec![],
            epoch: 0,
        };
        // Warmup: unchanged.
        let unchanged = apply_update(&t_hat_0, &t, &decision, 0, 5).unwrap();
        assert_eq!(unchanged, t_hat_0);

        // Past warmup: grows by one.
        let grown = apply_update(&t_hat_0, &t, &decision, 5, 5).unwrap();
        assert_eq!(grown.len(), 2);
        assert!(grown.contains_id(SampleId(0)));

        // Idempotent re-application.
        let again = apply_update(&grown, &t, &decision, 5, 5).unwrap();
        assert_eq!(again, grown);

        // Inject then remove restores prior membership.
        let removal = InjectionDecision {
            inject: vec![],
            remove: vec![(SampleId(0), 1)],
            epoch: 6,
        };
        let restored = apply_update(&grown, &t, &removal, 6, 5).unwrap();
        assert_eq!(restored, t_hat_0);
    }

    #[test]
    fn store_snapshot_layout() {
        let mut store = PseudoLabelStore::new(0.7).unwrap();
        store.ema_update(SampleId(3), prob(&[0.25, 0.75]));
        store.ema_update(SampleId(1), prob(&[0.9, 0.1]));
        let injected: BTreeMap<SampleId, usize> = [(SampleId(1), 0)].into();

        let mut buf = Vec::new();
        write_store_snapshot(&store, &injected, 2, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "id,p0,p1,injected,assigned_label");
        assert_eq!(lines[1], "1,0.9,0.1,1,0");
        assert_eq!(lines[2], "3,0.25,0.75,0,");
    }

    /// From-scratch replay: past warmup, the labeled target set is
    /// always T̂₀ plus exactly the currently confident samples with
    /// their current dominant class.
    fn oracle_t_hat(
        t_hat_0: &LabeledSet,
        unlabeled: &UnlabeledSet,
        store: &PseudoLabelStore,
        gamma: f64,
    ) -> Vec<(SampleId, usize)> {
        let mut expect: Vec<(SampleId, usize)> = t_hat_0
            .samples
            .iter()
            .map(|s| (s.id, s.label))
            .collect();
        for s in &unlabeled.samples {
            if let Some(p) = store.get(s.id) {
                if p.max_value() >= gamma {
                    expect.push((s.id, p.argmax()));
                }
            }
        }
        expect.sort();
        expect
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn store_values_stay_on_simplex(seed in 0..1000u64, rho in 0.05..1.0f64, updates in 1..40usize) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = rng.gen_range(2..6);
            let mut store = PseudoLabelStore::new(rho).unwrap();
            for _ in 0..updates {
                let id = SampleId(rng.gen_range(0..5));
                let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                store.ema_update(id, prob(&raw.iter().map(|v| v / sum).collect::<Vec<_>>()));
            }
            for (_, p) in store.iter() {
                let sum: f64 = p.values().iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                prop_assert!(p.values().iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
            }
        }

        #[test]
        fn gamma_monotonicity(seed in 0..1000u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = rng.gen_range(2..6);
            let n = rng.gen_range(3..12u64);
            let t = unlabeled_set(&(0..n).collect::<Vec<_>>());
            let mut store = PseudoLabelStore::new(0.7).unwrap();
            for id in 0..n {
                if rng.gen_bool(0.8) {
                    let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
                    let sum: f64 = raw.iter().sum();
                    store.ema_update(SampleId(id), prob(&raw.iter().map(|v| v / sum).collect::<Vec<_>>()));
                }
            }
            let low = select_injections(&store, &t, 0.7).unwrap();
            let high = select_injections(&store, &t, 0.9).unwrap();
            // Raising gamma never enlarges the injection set.
            prop_assert!(high.iter().all(|x| low.contains(x)));

            // And never shrinks the removal set, for a fixed T-hat.
            let t_hat_0 = labeled_set(&[(1000, 0)]);
            let mut t_hat = t_hat_0.clone();
            for (id, p) in store.iter() {
                t_hat.samples.push(LabeledSample {
                    id: *id,
                    features: vec![0.0, 0.0],
                    label: p.argmax(),
                });
            }
            let rem_low = select_removals(&t_hat, &t_hat_0, &store, 0.7).unwrap();
            let rem_high = select_removals(&t_hat, &t_hat_0, &store, 0.9).unwrap();
            prop_assert!(rem_low.iter().all(|x| rem_high.contains(x)));

            // Injections and removals never overlap for the same gamma.
            for gamma in [0.7, 0.8, 0.9] {
                let inj = select_injections(&store, &t, gamma).unwrap();
                let rem = select_removals(&t_hat, &t_hat_0, &store, gamma).unwrap();
                for (id, _) in &inj {
                    prop_assert!(!rem.iter().any(|(rid, _)| rid == id));
                }
            }
        }

        #[test]
        fn state_machine_matches_replay_oracle(seed in 0..300u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = rng.gen_range(2..6);
            let n_unlabeled = rng.gen_range(4..16u64);
            let gamma = [0.7, 0.8, 0.9][rng.gen_range(0..3)];
            let warmup = rng.gen_range(0..4usize);
            let rho = [1.0, 0.9, 0.7, 0.5, 0.3, 0.1][rng.gen_range(0..6)];
            let epochs = rng.gen_range(1..8usize);

            let t = unlabeled_set(&(0..n_unlabeled).collect::<Vec<_>>());
            let t_hat_0 = labeled_set(&[(10_000, 0), (10_001, 1)]);
            let mut store = PseudoLabelStore::new(rho).unwrap();
            let mut t_hat = t_hat_0.clone();

            for epoch in 0..epochs {
                // Random subset of samples visited this epoch.
                for id in 0..n_unlabeled {
                    if rng.gen_bool(0.7) {
                        let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
                        let sum: f64 = raw.iter().sum();
                        store.ema_update(SampleId(id), prob(&raw.iter().map(|v| v / sum).collect::<Vec<_>>()));
                    }
                }
                let decision = InjectionDecision {
                    inject: select_injections(&store, &t, gamma).unwrap(),
                    remove: select_removals(&t_hat, &t_hat_0, &store, gamma).unwrap(),
                    epoch,
                };
                t_hat = apply_update(&t_hat, &t, &decision, epoch, warmup).unwrap();

                // Warmup freezes membership entirely.
                if epoch < warmup {
                    prop_assert_eq!(&t_hat, &t_hat_0);
                } else {
                    let got: Vec<(SampleId, usize)> =
                        t_hat.samples.iter().map(|s| (s.id, s.label)).collect();
                    prop_assert_eq!(got, oracle_t_hat(&t_hat_0, &t, &store, gamma));
                }
                // T-hat-0 is never removed.
                for s in &t_hat_0.samples {
                    prop_assert!(t_hat.contains_id(s.id));
                }
            }
        }
    }
}
