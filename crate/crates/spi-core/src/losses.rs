//! The four training losses and their weighted combination.
//!
//! Every loss returns its value together with an analytic gradient with
//! respect to the argument it differentiates (embeddings, predicted
//! pseudo-labels, or logits). Gradients are verified against central
//! finite differences in the test suites and by the `gradcheck` module.
//!
//! Reductions run in a fixed left-to-right order so values are
//! bit-reproducible.

use crate::error::{Result, SpiError};
use crate::math::{
    self, cross_entropy, l2_normalize, sharpen, smooth_label, softmax_tau, topk_indices,
    Embedding, ProbVector, Temperature, LOG_CLAMP,
};

/// Which domain a support sample was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

/// Denominator form of the supervised contrastive loss.
///
/// `AsWritten` anchors the denominator on the positive p, summing
/// exp(z_a · z_p / tau) over a ≠ i. `Standard` anchors on i, summing
/// exp(z_i · z_a / tau) over a ≠ i.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
pub enum AnchorMode {
    #[default]
    AsWritten,
    Standard,
}

/// A class-balanced batch of labeled samples from both domains, after
/// the forward pass.
#[derive(Debug, Clone)]
pub struct SupportBatch {
    pub embeddings: Vec<Embedding>,
    pub labels: Vec<usize>,
    pub domains: Vec<Domain>,
}

impl SupportBatch {
    pub fn new(embeddings: Vec<Embedding>, labels: Vec<usize>, domains: Vec<Domain>) -> Result<Self> {
        if embeddings.len() != labels.len() || embeddings.len() != domains.len() {
            return Err(SpiError::ShapeMismatch {
                expected: format!("{} embeddings/labels/domains", embeddings.len()),
                got: format!("{} labels, {} domains", labels.len(), domains.len()),
            });
        }
        if let Some(first) = embeddings.first() {
            let d = first.len();
            if embeddings.iter().any(|z| z.len() != d) {
                return Err(SpiError::ShapeMismatch {
                    expected: format!("embedding dim {d}"),
                    got: "mixed dims".into(),
                });
            }
        }
        Ok(Self {
            embeddings,
            labels,
            domains,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

/// Weights for combining the four losses.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossWeights {
    pub lambda_con: f64,
    pub lambda_ils: f64,
    pub lambda_ida: f64,
    pub lambda_cls: f64,
}

impl Default for LossWeights {
    /// The contrastive term is up-weighted to prioritize cross-domain
    /// alignment.
    fn default() -> Self {
        Self {
            lambda_con: 4.0,
            lambda_ils: 1.0,
            lambda_ida: 1.0,
            lambda_cls: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_con", self.lambda_con),
            ("lambda_ils", self.lambda_ils),
            ("lambda_ida", self.lambda_ida),
            ("lambda_cls", self.lambda_cls),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(SpiError::InvalidInput(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// A loss value and the flattened gradient with respect to the
/// differentiated argument. The flattening order is documented on each
/// loss function.
#[derive(Debug, Clone)]
pub struct LossValueWithGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossValueWithGrad {
    pub fn new(value: f64, grad: Vec<f64>) -> Result<Self> {
        if !value.is_finite() {
            return Err(SpiError::NonFiniteLoss(format!("loss value {value}")));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(SpiError::NonFiniteGradient("loss gradient".into()));
        }
        Ok(Self { value, grad })
    }

    pub fn zero(grad_len: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![0.0; grad_len],
        }
    }
}

/// Supervised contrastive loss over the support set.
///
/// Positives for anchor i are all other samples with the same label,
/// across both domains. When `normalize` is set the embeddings are
/// L2-normalized first and the returned gradient is chained back to the
/// raw embeddings.
///
/// Gradient layout: embeddings flattened in batch order, d entries each.
pub fn supervised_contrastive(
    batch: &SupportBatch,
    tau: Temperature,
    normalize: bool,
    anchor_mode: AnchorMode,
) -> Result<LossValueWithGrad> {
    let n = batch.len();
    if n < 2 {
        return Err(SpiError::DegenerateBatch(format!(
            "need at least 2 samples, got {n}"
        )));
    }
    let d = batch.embeddings[0].len();
    let t = tau.value();

    let z: Vec<Embedding> = if normalize {
        batch
            .embeddings
            .iter()
            .map(l2_normalize)
            .collect::<Result<_>>()?
    } else {
        batch.embeddings.clone()
    };

    // Positive sets exclude the anchor itself.
    let mut positives: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for p in 0..n {
            if p != i && batch.labels[p] == batch.labels[i] {
                positives[i].push(p);
            }
        }
        if positives[i].is_empty() {
            return Err(SpiError::DegenerateBatch(format!(
                "anchor {i} (label {}) has no positives",
                batch.labels[i]
            )));
        }
    }

    let mut sim = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in 0..n {
            sim[a][b] = math::dot(z[a].values(), z[b].values());
        }
    }

    // Gradient accumulates as a coefficient matrix: d(loss)/dz_k adds
    // coef[k][m] * z_m, materialized after the scalar loops.
    let mut coef = vec![vec![0.0; n]; n];
    let mut value = 0.0;

    match anchor_mode {
        AnchorMode::AsWritten => {
            for i in 0..n {
                let c = 1.0 / positives[i].len() as f64;
                for &p in &positives[i] {
                    value -= c * sim[i][p] / t;
                    coef[i][p] -= c / t;
                    coef[p][i] -= c / t;

                    // log-sum-exp over a != i of sim[a][p]/t, stabilized.
                    let mut m = f64::NEG_INFINITY;
                    for a in 0..n {
                        if a != i {
                            m = m.max(sim[a][p] / t);
                        }
                    }
                    let mut s = 0.0;
                    for a in 0..n {
                        if a != i {
                            s += (sim[a][p] / t - m).exp();
                        }
                    }
                    value += c * (m + s.ln());
                    for a in 0..n {
                        if a == i {
                            continue;
                        }
                        let w = (sim[a][p] / t - m).exp() / s;
                        if a == p {
                            coef[p][p] += 2.0 * c * w / t;
                        } else {
                            coef[a][p] += c * w / t;
                            coef[p][a] += c * w / t;
                        }
                    }
                }
            }
        }
        AnchorMode::Standard => {
            for i in 0..n {
                let c = 1.0 / positives[i].len() as f64;
                for &p in &positives[i] {
                    value -= c * sim[i][p] / t;
                    coef[i][p] -= c / t;
                    coef[p][i] -= c / t;
                }
                // Denominator depends only on the anchor; each of the
                // |P_i| pairs contributes weight c, totalling 1.
                let mut m = f64::NEG_INFINITY;
                for a in 0..n {
                    if a != i {
                        m = m.max(sim[i][a] / t);
                    }
                }
                let mut s = 0.0;
                for a in 0..n {
                    if a != i {
                        s += (sim[i][a] / t - m).exp();
                    }
                }
                value += m + s.ln();
                for a in 0..n {
                    if a == i {
                        continue;
                    }
                    let w = (sim[i][a] / t - m).exp() / s;
                    coef[i][a] += w / t;
                    coef[a][i] += w / t;
                }
            }
        }
    }

    let mut grad = vec![0.0; n * d];
    for k in 0..n {
        let gk = &mut grad[k * d..(k + 1) * d];
        for m in 0..n {
            let c = coef[k][m];
            if c != 0.0 {
                for (g, v) in gk.iter_mut().zip(z[m].values()) {
                    *g += c * v;
                }
            }
        }
    }

    if normalize {
        // Chain dL/d(z/|z|) back to the raw embedding.
        for k in 0..n {
            let raw_norm = batch.embeddings[k].norm();
            let zk = z[k].values();
            let gk = &mut grad[k * d..(k + 1) * d];
            let inner = math::dot(zk, gk);
            for (g, v) in gk.iter_mut().zip(zk) {
                *g = (*g - inner * v) / raw_norm;
            }
        }
    }

    LossValueWithGrad::new(value, grad)
}

/// Frozen (stop-gradient) targets of the instance-level similarity
/// loss: sharpened pseudo-labels from the global views.
#[derive(Debug, Clone)]
pub struct IlsTargets {
    /// Target for the first global prediction: sharpened second global.
    pub for_g1: Vec<ProbVector>,
    /// Target for the second global prediction: sharpened first global.
    pub for_g2: Vec<ProbVector>,
    /// Target for every local prediction: mean of the two sharpened
    /// globals.
    pub mean_global: Vec<ProbVector>,
}

/// Sharpen the global pseudo-labels into the loss targets.
pub fn ils_targets(globals: &[Vec<ProbVector>], tau_sharp: Temperature) -> Result<IlsTargets> {
    let mut for_g1 = Vec::with_capacity(globals.len());
    let mut for_g2 = Vec::with_capacity(globals.len());
    let mut mean_global = Vec::with_capacity(globals.len());
    for views in globals {
        if views.len() != 2 {
            return Err(SpiError::InvalidViewCount {
                expected: 2,
                got: views.len(),
            });
        }
        let s1 = sharpen(&views[0], tau_sharp)?;
        let s2 = sharpen(&views[1], tau_sharp)?;
        let mean: Vec<f64> = s1
            .values()
            .iter()
            .zip(s2.values())
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        mean_global.push(ProbVector::new(mean)?);
        for_g1.push(s2);
        for_g2.push(s1);
    }
    Ok(IlsTargets {
        for_g1,
        for_g2,
        mean_global,
    })
}

fn ce_raw(pred: &[f64], target: &ProbVector) -> f64 {
    let mut acc = 0.0;
    for (p, t) in pred.iter().zip(target.values()) {
        acc -= t * p.max(LOG_CLAMP).ln();
    }
    acc
}

/// Instance-similarity loss value for raw (possibly perturbed)
/// prediction vectors against fixed targets. Used by the gradient
/// checker, which must hold the stop-gradient targets constant.
pub fn ils_value_with_targets(
    globals: &[Vec<Vec<f64>>],
    locals: &[Vec<Vec<f64>>],
    targets: &IlsTargets,
) -> Result<f64> {
    if globals.len() != locals.len() || globals.len() != targets.for_g1.len() {
        return Err(SpiError::ShapeMismatch {
            expected: format!("{} samples", targets.for_g1.len()),
            got: format!("{} globals, {} locals", globals.len(), locals.len()),
        });
    }
    let mut value = 0.0;
    for i in 0..globals.len() {
        if globals[i].len() != 2 {
            return Err(SpiError::InvalidViewCount {
                expected: 2,
                got: globals[i].len(),
            });
        }
        value += ce_raw(&globals[i][0], &targets.for_g1[i]);
        value += ce_raw(&globals[i][1], &targets.for_g2[i]);
        for local in &locals[i] {
            value += ce_raw(local, &targets.mean_global[i]);
        }
    }
    Ok(value)
}

/// Instance-level similarity loss.
///
/// Each unlabeled sample contributes the cross-entropy between the
/// pseudo-label of one global view and the sharpened pseudo-label of
/// the other (both directions), plus the cross-entropy between every
/// local view's pseudo-label and the mean of the sharpened globals.
/// Sharpened targets are constants; the gradient flows only through
/// the prediction arguments.
///
/// Gradient layout: per sample, first the two global predictions (C
/// entries each), then, after all samples, the local predictions in
/// (sample, view) order.
pub fn instance_similarity_loss(
    globals: &[Vec<ProbVector>],
    locals: &[Vec<ProbVector>],
    tau_sharp: Temperature,
) -> Result<(LossValueWithGrad, IlsTargets)> {
    if globals.len() != locals.len() {
        return Err(SpiError::ShapeMismatch {
            expected: format!("{} local lists", globals.len()),
            got: format!("{}", locals.len()),
        });
    }
    let targets = ils_targets(globals, tau_sharp)?;

    let mut value = 0.0;
    let mut grad_globals = Vec::new();
    let mut grad_locals = Vec::new();

    // d/dp of -t*ln(max(p, clamp)) is -t/p above the clamp, 0 below.
    let ce_grad = |pred: &ProbVector, target: &ProbVector, out: &mut Vec<f64>| {
        for (p, t) in pred.values().iter().zip(target.values()) {
            out.push(if *p > LOG_CLAMP { -t / p } else { 0.0 });
        }
    };

    for i in 0..globals.len() {
        let g1 = &globals[i][0];
        let g2 = &globals[i][1];
        value += cross_entropy(g1, &targets.for_g1[i])?;
        value += cross_entropy(g2, &targets.for_g2[i])?;
        ce_grad(g1, &targets.for_g1[i], &mut grad_globals);
        ce_grad(g2, &targets.for_g2[i], &mut grad_globals);
    }
    for i in 0..locals.len() {
        for local in &locals[i] {
            value += cross_entropy(local, &targets.mean_global[i])?;
            ce_grad(local, &targets.mean_global[i], &mut grad_locals);
        }
    }
    grad_globals.extend(grad_locals);
    Ok((LossValueWithGrad::new(value, grad_globals)?, targets))
}

/// Pairwise similarity mask: entry (i, j) is set when the top-k
/// activated dimensions of z_i and z_j coincide as sets.
pub fn build_similarity_mask(z: &[Embedding], k: usize) -> Result<Vec<Vec<bool>>> {
    let tops: Vec<Vec<usize>> = z.iter().map(|zi| topk_indices(zi, k)).collect::<Result<_>>()?;
    let n = z.len();
    let mut mask = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            mask[i][j] = tops[i] == tops[j];
        }
    }
    Ok(mask)
}

/// Intra-domain alignment loss: mean masked pairwise Euclidean
/// distance, (1/B²) Σ_ij M_ij ||z_i − z_j||. The subgradient at
/// coincident embeddings is zero.
///
/// Gradient layout: embeddings flattened in batch order.
pub fn intra_domain_alignment(z: &[Embedding], mask: &[Vec<bool>]) -> Result<LossValueWithGrad> {
    let n = z.len();
    if mask.len() != n || mask.iter().any(|row| row.len() != n) {
        return Err(SpiError::ShapeMismatch {
            expected: format!("{n}x{n} mask"),
            got: format!("{}x{}", mask.len(), mask.first().map_or(0, Vec::len)),
        });
    }
    if n == 0 {
        return LossValueWithGrad::new(0.0, Vec::new());
    }
    let d = z[0].len();
    let scale = 1.0 / (n * n) as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..n {
            if !mask[i][j] {
                continue;
            }
            let mut dist_sq = 0.0;
            for c in 0..d {
                let diff = z[i].values()[c] - z[j].values()[c];
                dist_sq += diff * diff;
            }
            let dist = dist_sq.sqrt();
            value += scale * dist;
            if dist > 0.0 {
                let g = scale / dist;
                for c in 0..d {
                    let diff = z[i].values()[c] - z[j].values()[c];
                    grad[i * d + c] += g * diff;
                    grad[j * d + c] -= g * diff;
                }
            }
        }
    }
    LossValueWithGrad::new(value, grad)
}

/// Label-smoothing cross-entropy over classifier logits, summed over
/// the batch.
///
/// Gradient layout: logit rows flattened in batch order.
pub fn classification_loss(
    logits: &[Vec<f64>],
    labels: &[usize],
    alpha: f64,
    num_classes: usize,
) -> Result<LossValueWithGrad> {
    if logits.len() != labels.len() {
        return Err(SpiError::ShapeMismatch {
            expected: format!("{} labels", logits.len()),
            got: format!("{}", labels.len()),
        });
    }
    let one = Temperature::new(1.0).expect("1.0 is a valid temperature");
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(logits.len() * num_classes);
    for (row, &label) in logits.iter().zip(labels) {
        if row.len() != num_classes {
            return Err(SpiError::ShapeMismatch {
                expected: format!("{num_classes} logits"),
                got: format!("{}", row.len()),
            });
        }
        let smoothed = smooth_label(label, alpha, num_classes)?;
        let h = softmax_tau(row, one)?;
        value += cross_entropy(&h, &smoothed)?;
        for (hc, yc) in h.values().iter().zip(smoothed.values()) {
            grad.push(hc - yc);
        }
    }
    LossValueWithGrad::new(value, grad)
}

/// Weighted combination of the four losses. All gradients must refer to
/// the same flattened variable vector; they combine entrywise.
pub fn total_loss(
    con: &LossValueWithGrad,
    ils: &LossValueWithGrad,
    ida: &LossValueWithGrad,
    cls: &LossValueWithGrad,
    weights: &LossWeights,
) -> Result<LossValueWithGrad> {
    weights.validate()?;
    let parts = [
        (weights.lambda_con, con),
        (weights.lambda_ils, ils),
        (weights.lambda_ida, ida),
        (weights.lambda_cls, cls),
    ];
    let len = con.grad.len();
    for (_, part) in &parts {
        if !part.value.is_finite() {
            return Err(SpiError::NonFiniteLoss(format!("part value {}", part.value)));
        }
        if part.grad.len() != len {
            return Err(SpiError::ShapeMismatch {
                expected: format!("gradient length {len}"),
                got: format!("{}", part.grad.len()),
            });
        }
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; len];
    for (w, part) in &parts {
        value += w * part.value;
        for (g, pg) in grad.iter_mut().zip(&part.grad) {
            *g += w * pg;
        }
    }
    LossValueWithGrad::new(value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tau(v: f64) -> Temperature {
        Temperature::new(v).unwrap()
    }

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn prob(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, n_per_class: usize, classes: usize, d: usize) -> SupportBatch {
        let mut embeddings = Vec::new();
        let mut labels = Vec::new();
        let mut domains = Vec::new();
        for domain in [Domain::Source, Domain::Target] {
            for class in 0..classes {
                for _ in 0..n_per_class {
                    embeddings.push(emb(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()));
                    labels.push(class);
                    domains.push(domain);
                }
            }
        }
        SupportBatch::new(embeddings, labels, domains).unwrap()
    }

    /// Brute-force Eq.-style evaluation of the contrastive loss over
    /// all (anchor, positive, negative) triples, no shared terms.
    fn contrastive_oracle(
        batch: &SupportBatch,
        t: f64,
        normalize: bool,
        mode: AnchorMode,
    ) -> f64 {
        let z: Vec<Vec<f64>> = batch
            .embeddings
            .iter()
            .map(|e| {
                if normalize {
                    let n = e.norm();
                    e.values().iter().map(|v| v / n).collect()
                } else {
                    e.values().to_vec()
                }
            })
            .collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let n = z.len();
        let mut total = 0.0;
        for i in 0..n {
            let pos: Vec<usize> = (0..n)
                .filter(|&p| p != i && batch.labels[p] == batch.labels[i])
                .collect();
            for &p in &pos {
                let num = (dot(&z[i], &z[p]) / t).exp();
                let mut den = 0.0;
                for a in 0..n {
                    if a == i {
                        continue;
                    }
                    den += match mode {
                        AnchorMode::AsWritten => (dot(&z[a], &z[p]) / t).exp(),
                        AnchorMode::Standard => (dot(&z[i], &z[a]) / t).exp(),
                    };
                }
                total += (-1.0 / pos.len() as f64) * (num / den).ln();
            }
        }
        total
    }

    /// Central finite difference over a scalar function of a flat
    /// parameter vector.
    fn fd_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = Vec::with_capacity(x.len());
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + h;
            let plus = f(&xp);
            xp[i] = orig - h;
            let minus = f(&xp);
            xp[i] = orig;
            g.push((plus - minus) / (2.0 * h));
        }
        g
    }

    fn assert_grads_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let denom = a.abs().max(n.abs());
            if denom > 1e-6 {
                let rel = (a - n).abs() / denom;
                assert!(
                    rel <= tol,
                    "coordinate {i}: analytic {a}, numeric {n}, rel err {rel}"
                );
            }
        }
    }

    #[test]
    fn contrastive_identical_pair_is_zero() {
        let z = emb(&[0.6, 0.8]);
        let batch = SupportBatch::new(
            vec![z.clone(), z],
            vec![0, 0],
            vec![Domain::Source, Domain::Target],
        )
        .unwrap();
        for mode in [AnchorMode::AsWritten, AnchorMode::Standard] {
            let out = supervised_contrastive(&batch, tau(0.1), true, mode).unwrap();
            assert!(out.value.abs() < 1e-12, "mode {mode:?}: {}", out.value);
        }
    }

    #[test]
    fn contrastive_matches_bruteforce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // 4 samples / 2 classes as the smallest non-trivial case.
        let batch = random_batch(&mut rng, 1, 2, 3);
        assert_eq!(batch.len(), 4);
        for mode in [AnchorMode::AsWritten, AnchorMode::Standard] {
            for normalize in [true, false] {
                let out = supervised_contrastive(&batch, tau(0.1), normalize, mode).unwrap();
                let expect = contrastive_oracle(&batch, 0.1, normalize, mode);
                assert!(
                    (out.value - expect).abs() < 1e-9,
                    "mode {mode:?} normalize {normalize}: {} vs {expect}",
                    out.value
                );
            }
        }
    }

    #[test]
    fn contrastive_invariant_under_batch_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let batch = random_batch(&mut rng, 2, 3, 4);
        let out = supervised_contrastive(&batch, tau(0.5), true, AnchorMode::AsWritten).unwrap();

        let mut order: Vec<usize> = (0..batch.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let permuted = SupportBatch::new(
            order.iter().map(|&i| batch.embeddings[i].clone()).collect(),
            order.iter().map(|&i| batch.labels[i]).collect(),
            order.iter().map(|&i| batch.domains[i]).collect(),
        )
        .unwrap();
        let out_p = supervised_contrastive(&permuted, tau(0.5), true, AnchorMode::AsWritten).unwrap();
        assert!((out.value - out_p.value).abs() < 1e-9);
    }

    #[test]
    fn contrastive_rotation_invariant_when_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = 3;
        let batch = random_batch(&mut rng, 2, 2, d);

        // Random rotation via Gram-Schmidt on a random matrix.
        let mut q: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        for i in 0..d {
            for j in 0..i {
                let proj = math::dot(&q[i].clone(), &q[j]);
                for c in 0..d {
                    q[i][c] -= proj * q[j][c];
                }
            }
            let norm = q[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            for c in 0..d {
                q[i][c] /= norm;
            }
        }
        let rotate = |z: &Embedding| {
            emb(&(0..d)
                .map(|r| math::dot(&q[r], z.values()))
                .collect::<Vec<_>>())
        };
        let rotated = SupportBatch::new(
            batch.embeddings.iter().map(rotate).collect(),
            batch.labels.clone(),
            batch.domains.clone(),
        )
        .unwrap();
        let a = supervised_contrastive(&batch, tau(0.2), true, AnchorMode::AsWritten).unwrap();
        let b = supervised_contrastive(&rotated, tau(0.2), true, AnchorMode::AsWritten).unwrap();
        assert!((a.value - b.value).abs() < 1e-8);
    }

    #[test]
    fn contrastive_rejects_anchor_without_positives() {
        let batch = SupportBatch::new(
            vec![emb(&[1.0, 0.0]), emb(&[0.0, 1.0]), emb(&[1.0, 1.0])],
            vec![0, 0, 1],
            vec![Domain::Source, Domain::Source, Domain::Target],
        )
        .unwrap();
        assert!(matches!(
            supervised_contrastive(&batch, tau(0.1), true, AnchorMode::AsWritten),
            Err(SpiError::DegenerateBatch(_))
        ));
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for mode in [AnchorMode::AsWritten, AnchorMode::Standard] {
            for normalize in [false, true] {
                let batch = random_batch(&mut rng, 1, 2, 3);
                let d = 3;
                let out = supervised_contrastive(&batch, tau(0.3), normalize, mode).unwrap();
                let flat: Vec<f64> = batch
                    .embeddings
                    .iter()
                    .flat_map(|z| z.values().to_vec())
                    .collect();
                let labels = batch.labels.clone();
                let domains = batch.domains.clone();
                let numeric = fd_grad(
                    |x| {
                        let embeddings = x
                            .chunks(d)
                            .map(|c| emb(c))
                            .collect::<Vec<_>>();
                        let b = SupportBatch::new(embeddings, labels.clone(), domains.clone())
                            .unwrap();
                        supervised_contrastive(&b, tau(0.3), normalize, mode)
                            .unwrap()
                            .value
                    },
                    &flat,
                    1e-5,
                );
                assert_grads_close(&out.grad, &numeric, 1e-4);
            }
        }
    }

    #[test]
    fn ils_identical_onehot_views_give_zero() {
        let one = prob(&[1.0, 0.0]);
        let globals = vec![vec![one.clone(), one.clone()]];
        let locals = vec![vec![one.clone(), one]];
        let (out, _) = instance_similarity_loss(&globals, &locals, tau(0.3)).unwrap();
        assert!(out.value.abs() < 1e-12);
    }

    #[test]
    fn ils_without_locals_reduces_to_cross_global_terms() {
        let g1 = prob(&[0.7, 0.3]);
        let g2 = prob(&[0.4, 0.6]);
        let globals = vec![vec![g1.clone(), g2.clone()]];
        let (out, _) = instance_similarity_loss(&globals, &[vec![]], tau(0.3)).unwrap();

        let s1 = sharpen(&g1, tau(0.3)).unwrap();
        let s2 = sharpen(&g2, tau(0.3)).unwrap();
        let expect = cross_entropy(&g1, &s2).unwrap() + cross_entropy(&g2, &s1).unwrap();
        assert!((out.value - expect).abs() < 1e-12);
    }

    #[test]
    fn ils_matches_step_by_step_composition() {
        // Single sample, two globals, no locals: sharpen then
        // cross-entropy, composed manually from the math module.
        let g1 = prob(&[0.6, 0.4]);
        let g2 = prob(&[0.5, 0.5]);
        let (out, _) =
            instance_similarity_loss(&[vec![g1.clone(), g2.clone()]], &[vec![]], tau(0.3)).unwrap();

        let pi_g1 = sharpen(&g1, tau(0.3)).unwrap();
        let pi_g2 = sharpen(&g2, tau(0.3)).unwrap();
        let expect = cross_entropy(&g1, &pi_g2).unwrap() + cross_entropy(&g2, &pi_g1).unwrap();
        assert!((out.value - expect).abs() < 1e-12);
        // Frozen from the composition above: H((0.6,0.4),(0.5,0.5)) +
        // H((0.5,0.5), sharpen((0.6,0.4), 0.3)).
        assert!((out.value - 1.406_705_3).abs() < 1e-6);
    }

    #[test]
    fn ils_rejects_wrong_view_count() {
        let p = prob(&[0.5, 0.5]);
        assert!(matches!(
            instance_similarity_loss(&[vec![p.clone()]], &[vec![]], tau(0.3)),
            Err(SpiError::InvalidViewCount { expected: 2, got: 1 })
        ));
        assert!(matches!(
            instance_similarity_loss(&[vec![p.clone(), p.clone(), p]], &[vec![]], tau(0.3)),
            Err(SpiError::InvalidViewCount { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn ils_gradient_matches_finite_differences_with_frozen_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let c = 3;
        let n = 2;
        let n_local = 2;
        let rand_prob = |rng: &mut ChaCha8Rng| {
            let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.05..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            prob(&raw.iter().map(|v| v / sum).collect::<Vec<_>>())
        };
        let globals: Vec<Vec<ProbVector>> = (0..n)
            .map(|_| vec![rand_prob(&mut rng), rand_prob(&mut rng)])
            .collect();
        let locals: Vec<Vec<ProbVector>> = (0..n)
            .map(|_| (0..n_local).map(|_| rand_prob(&mut rng)).collect())
            .collect();

        let (out, targets) = instance_similarity_loss(&globals, &locals, tau(0.3)).unwrap();

        let mut flat: Vec<f64> = Vec::new();
        for views in &globals {
            for v in views {
                flat.extend(v.values());
            }
        }
        for views in &locals {
            for v in views {
                flat.extend(v.values());
            }
        }
        let numeric = fd_grad(
            |x| {
                let mut idx = 0;
                let mut g: Vec<Vec<Vec<f64>>> = Vec::new();
                for _ in 0..n {
                    let mut views = Vec::new();
                    for _ in 0..2 {
                        views.push(x[idx..idx + c].to_vec());
                        idx += c;
                    }
                    g.push(views);
                }
                let mut l: Vec<Vec<Vec<f64>>> = Vec::new();
                for _ in 0..n {
                    let mut views = Vec::new();
                    for _ in 0..n_local {
                        views.push(x[idx..idx + c].to_vec());
                        idx += c;
                    }
                    l.push(views);
                }
                ils_value_with_targets(&g, &l, &targets).unwrap()
            },
            &flat,
            1e-5,
        );
        assert_grads_close(&out.grad, &numeric, 1e-4);
    }

    #[test]
    fn mask_examples() {
        let all_same = vec![emb(&[0.4, 0.2, 0.9]); 3];
        let mask = build_similarity_mask(&all_same, 2).unwrap();
        assert!(mask.iter().all(|row| row.iter().all(|&m| m)));

        let mask = build_similarity_mask(
            &[emb(&[0.9, 0.1, 0.5]), emb(&[0.8, 0.2, 0.6])],
            2,
        )
        .unwrap();
        assert!(mask[0][1] && mask[1][0]);

        let mask = build_similarity_mask(&[emb(&[0.9, 0.1]), emb(&[0.1, 0.9])], 1).unwrap();
        assert!(!mask[0][1] && !mask[1][0]);
        assert!(mask[0][0] && mask[1][1]);
    }

    #[test]
    fn ida_examples() {
        let z = vec![emb(&[1.0, 2.0]); 3];
        let mask = build_similarity_mask(&z, 1).unwrap();
        let out = intra_domain_alignment(&z, &mask).unwrap();
        assert!(out.value.abs() < 1e-12);
        assert!(out.grad.iter().all(|&g| g == 0.0));

        let z = vec![emb(&[0.0, 0.0]), emb(&[3.0, 4.0])];
        let no_mask = vec![vec![false; 2]; 2];
        let out = intra_domain_alignment(&z, &no_mask).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad.iter().all(|&g| g == 0.0));

        let all = vec![vec![true; 2]; 2];
        let out = intra_domain_alignment(&z, &all).unwrap();
        assert!((out.value - 2.5).abs() < 1e-12);
    }

    #[test]
    fn ida_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let n = 4;
        let d = 3;
        let z: Vec<Embedding> = (0..n)
            .map(|_| emb(&(0..d).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>()))
            .collect();
        // Fixed mask so the loss stays smooth under perturbation.
        let mask: Vec<Vec<bool>> = (0..n)
            .map(|i| (0..n).map(|j| (i + j) % 2 == 0).collect())
            .collect();
        let out = intra_domain_alignment(&z, &mask).unwrap();
        let flat: Vec<f64> = z.iter().flat_map(|e| e.values().to_vec()).collect();
        let numeric = fd_grad(
            |x| {
                let zs: Vec<Embedding> = x.chunks(d).map(emb).collect();
                intra_domain_alignment(&zs, &mask).unwrap().value
            },
            &flat,
            1e-5,
        );
        assert_grads_close(&out.grad, &numeric, 1e-4);
    }

    #[test]
    fn cls_examples() {
        // Strongly peaked at the true class: loss goes to zero.
        let out = classification_loss(&[vec![50.0, 0.0, 0.0]], &[0], 0.0, 3).unwrap();
        assert!(out.value < 1e-9);

        // Uniform logits: per-sample loss is ln C.
        let out = classification_loss(&[vec![0.0; 4], vec![0.0; 4]], &[1, 3], 0.0, 4).unwrap();
        assert!((out.value - 2.0 * f64::ln(4.0)).abs() < 1e-12);

        // Composition oracle: softmax → smooth_label → cross_entropy.
        let logits = vec![vec![2.0, 0.0]];
        let out = classification_loss(&logits, &[0], 0.1, 2).unwrap();
        let h = softmax_tau(&logits[0], tau(1.0)).unwrap();
        let smoothed = smooth_label(0, 0.1, 2).unwrap();
        let expect = cross_entropy(&h, &smoothed).unwrap();
        assert!((out.value - expect).abs() < 1e-12);
        assert!((out.value - 0.226_928_0).abs() < 1e-6);

        assert!(matches!(
            classification_loss(&[vec![0.0, 0.0]], &[2], 0.0, 2),
            Err(SpiError::InvalidClass { .. })
        ));
    }

    #[test]
    fn cls_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let n = 3;
        let c = 4;
        let logits: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let out = classification_loss(&logits, &labels, 0.1, c).unwrap();
        let flat: Vec<f64> = logits.iter().flatten().copied().collect();
        let numeric = fd_grad(
            |x| {
                let rows: Vec<Vec<f64>> = x.chunks(c).map(|r| r.to_vec()).collect();
                classification_loss(&rows, &labels, 0.1, c).unwrap().value
            },
            &flat,
            1e-5,
        );
        assert_grads_close(&out.grad, &numeric, 1e-4);
    }

    #[test]
    fn total_loss_examples() {
        let weights = LossWeights::default();
        let zero = LossValueWithGrad::zero(2);
        let out = total_loss(&zero, &zero, &zero, &zero, &weights).unwrap();
        assert_eq!(out.value, 0.0);

        let part = |v: f64, g: &[f64]| LossValueWithGrad::new(v, g.to_vec()).unwrap();
        let out = total_loss(
            &part(1.0, &[1.0, 0.0]),
            &part(2.0, &[0.0, 1.0]),
            &part(3.0, &[1.0, 1.0]),
            &part(4.0, &[2.0, -1.0]),
            &weights,
        )
        .unwrap();
        assert!((out.value - 13.0).abs() < 1e-12);
        // 4*1 + 0 + 1 + 2 = 7; 0 + 1 + 1 - 1 = 1
        assert!((out.grad[0] - 7.0).abs() < 1e-12);
        assert!((out.grad[1] - 1.0).abs() < 1e-12);

        let bad = LossValueWithGrad {
            value: f64::NAN,
            grad: vec![0.0, 0.0],
        };
        assert!(matches!(
            total_loss(&bad, &zero, &zero, &zero, &weights),
            Err(SpiError::NonFiniteLoss(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn mask_matches_pairwise_oracle(seed in 0..500u64, n in 2..8usize, d in 2..6usize) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.gen_range(1..=d);
            let z: Vec<Embedding> = (0..n)
                .map(|_| emb(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()))
                .collect();
            let mask = build_similarity_mask(&z, k).unwrap();
            for i in 0..n {
                prop_assert!(mask[i][i]);
                for j in 0..n {
                    let a = topk_indices(&z[i], k).unwrap();
                    let b = topk_indices(&z[j], k).unwrap();
                    // Symmetric set difference must be empty.
                    let same = a.iter().all(|x| b.contains(x)) && b.iter().all(|x| a.contains(x));
                    prop_assert_eq!(mask[i][j], same);
                    prop_assert_eq!(mask[i][j], mask[j][i]);
                }
            }
        }

        #[test]
        fn ida_translation_invariant(seed in 0..500u64, shift in proptest::collection::vec(-5.0..5.0f64, 3)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 4;
            let z: Vec<Embedding> = (0..n)
                .map(|_| emb(&(0..3).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>()))
                .collect();
            let mask: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| (i * j) % 3 != 1).collect()).collect();
            let shifted: Vec<Embedding> = z
                .iter()
                .map(|e| emb(&e.values().iter().zip(&shift).map(|(v, s)| v + s).collect::<Vec<_>>()))
                .collect();
            let a = intra_domain_alignment(&z, &mask).unwrap().value;
            let b = intra_domain_alignment(&shifted, &mask).unwrap().value;
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn nonneg_losses_stay_nonneg(seed in 0..500u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = 3;
            let rand_prob = |rng: &mut ChaCha8Rng| {
                let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                prob(&raw.iter().map(|v| v / sum).collect::<Vec<_>>())
            };
            let globals = vec![vec![rand_prob(&mut rng), rand_prob(&mut rng)]];
            let locals = vec![vec![rand_prob(&mut rng)]];
            let (ils, _) = instance_similarity_loss(&globals, &locals, tau(0.3)).unwrap();
            prop_assert!(ils.value >= 0.0);

            let logits: Vec<Vec<f64>> = (0..2).map(|_| (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
            let labels = vec![rng.gen_range(0..c), rng.gen_range(0..c)];
            let cls = classification_loss(&logits, &labels, 0.1, c).unwrap();
            // Per-sample loss is bounded below by the entropy of the
            // smoothed label.
            let floor: f64 = labels
                .iter()
                .map(|&y| math::entropy(&smooth_label(y, 0.1, c).unwrap()))
                .sum();
            prop_assert!(cls.value >= floor - 1e-9);

            let z: Vec<Embedding> = (0..3)
                .map(|_| emb(&(0..4).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()))
                .collect();
            let mask = build_similarity_mask(&z, 2).unwrap();
            let ida = intra_domain_alignment(&z, &mask).unwrap();
            prop_assert!(ida.value >= 0.0);
        }
    }
}
