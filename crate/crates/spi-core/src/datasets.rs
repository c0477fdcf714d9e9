//! Synthetic domain-shift dataset generation and split management.
//!
//! A bundle holds the labeled source set S, the frozen labeled target
//! set T̂₀, the unlabeled target set T, and a held-out target test set.
//! The true labels of T are stored for auditing only; the training loss
//! path never sees them (it receives features and ids, the audit
//! channel is queried exclusively by the metrics reporter).

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Result, SpiError};

/// Stable identifier of a sample, unique within a bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct SampleId(pub u64);

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: SampleId,
    pub features: Vec<f64>,
    pub label: usize,
}

/// An immutable-by-convention list of labeled samples. The trainer
/// produces new sets through the injection state machine rather than
/// mutating in place.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledSet {
    pub samples: Vec<LabeledSample>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn contains_id(&self, id: SampleId) -> bool {
        self.samples.iter().any(|s| s.id == id)
    }

    /// Indices of member samples grouped by class.
    pub fn class_index(&self, num_classes: usize) -> Vec<Vec<usize>> {
        let mut index = vec![Vec::new(); num_classes];
        for (i, s) in self.samples.iter().enumerate() {
            if s.label < num_classes {
                index[s.label].push(i);
            }
        }
        index
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSample {
    pub id: SampleId,
    pub features: Vec<f64>,
}

/// Audit-only access to the hidden true labels of the unlabeled set.
/// Used by the false-positive reporter; never by a loss.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AuditLabels {
    labels: BTreeMap<SampleId, usize>,
}

impl AuditLabels {
    pub fn true_label(&self, id: SampleId) -> Option<usize> {
        self.labels.get(&id).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UnlabeledSet {
    pub samples: Vec<UnlabeledSample>,
    audit: AuditLabels,
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn by_id(&self, id: SampleId) -> Option<&UnlabeledSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// The audit channel. Metrics only.
    pub fn audit(&self) -> &AuditLabels {
        &self.audit
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ShiftKind {
    GaussianShift,
    MoonsShift,
}

impl ShiftKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian_shift" | "gaussian-shift" => Ok(Self::GaussianShift),
            "moons_shift" | "moons-shift" => Ok(Self::MoonsShift),
            other => Err(SpiError::InvalidSpec(format!(
                "kind: unknown generator '{other}'"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::GaussianShift => "gaussian_shift",
            Self::MoonsShift => "moons_shift",
        }
    }
}

/// Parameters of the synthetic domain-shift task. The domain gap is a
/// single interpretable affine map (rotation in the first two feature
/// dimensions, global scale, translation) applied to the class
/// structure before fresh noise is added.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainShiftSpec {
    pub kind: ShiftKind,
    pub classes: usize,
    pub input_dim: usize,
    pub n_source: usize,
    pub n_target_unlabeled: usize,
    pub n_target_test: usize,
    pub shots: usize,
    pub rotation_radians: f64,
    pub translation: Vec<f64>,
    pub scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DomainShiftSpec {
    fn default() -> Self {
        Self {
            kind: ShiftKind::GaussianShift,
            classes: 5,
            input_dim: 2,
            n_source: 500,
            n_target_unlabeled: 500,
            n_target_test: 500,
            shots: 3,
            rotation_radians: 50.0_f64.to_radians(),
            translation: Vec::new(),
            scale: 1.0,
            noise_sigma: 0.5,
            seed: 7,
        }
    }
}

/// Radius of the class structure (circle of Gaussian means, moon arcs).
const STRUCTURE_RADIUS: f64 = 2.0;

impl DomainShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(SpiError::InvalidSpec(format!(
                "classes: need at least 2, got {}",
                self.classes
            )));
        }
        if self.kind == ShiftKind::MoonsShift && self.classes != 2 {
            return Err(SpiError::InvalidSpec(format!(
                "classes: moons_shift requires exactly 2, got {}",
                self.classes
            )));
        }
        if self.input_dim < 2 {
            return Err(SpiError::InvalidSpec(format!(
                "input_dim: need at least 2, got {}",
                self.input_dim
            )));
        }
        if self.shots < 1 {
            return Err(SpiError::InvalidSpec(format!(
                "shots: need at least 1, got {}",
                self.shots
            )));
        }
        for (key, n) in [
            ("n_source", self.n_source),
            ("n_target_unlabeled", self.n_target_unlabeled),
            ("n_target_test", self.n_target_test),
        ] {
            if n < self.classes {
                return Err(SpiError::InvalidSpec(format!(
                    "{key}: need at least one sample per class ({}), got {n}",
                    self.classes
                )));
            }
        }
        if !self.translation.is_empty() && self.translation.len() != self.input_dim {
            return Err(SpiError::InvalidSpec(format!(
                "translation: expected {} entries, got {}",
                self.input_dim,
                self.translation.len()
            )));
        }
        if !self.scale.is_finite() || self.scale <= 0.0 {
            return Err(SpiError::InvalidSpec(format!(
                "scale: must be positive, got {}",
                self.scale
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(SpiError::InvalidSpec(format!(
                "noise_sigma: must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        if !self.rotation_radians.is_finite() {
            return Err(SpiError::InvalidSpec(
                "rotation_radians: must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// The four splits of one synthetic task.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub source: LabeledSet,
    pub t_hat_0: LabeledSet,
    pub unlabeled: UnlabeledSet,
    pub test: LabeledSet,
}

impl DatasetBundle {
    pub fn num_classes(&self) -> usize {
        let max = self
            .source
            .samples
            .iter()
            .chain(&self.t_hat_0.samples)
            .chain(&self.test.samples)
            .map(|s| s.label)
            .max()
            .unwrap_or(0);
        max + 1
    }

    pub fn input_dim(&self) -> usize {
        self.source
            .samples
            .first()
            .map(|s| s.features.len())
            .unwrap_or(0)
    }
}

/// Split `n` into `classes` per-class counts, as evenly as possible.
fn balanced_counts(n: usize, classes: usize) -> Vec<usize> {
    let base = n / classes;
    let extra = n % classes;
    (0..classes).map(|c| base + usize::from(c < extra)).collect()
}

struct Affine {
    rotation: f64,
    translation: Vec<f64>,
    scale: f64,
}

impl Affine {
    fn identity(dim: usize) -> Self {
        Self {
            rotation: 0.0,
            translation: vec![0.0; dim],
            scale: 1.0,
        }
    }

    /// Scale, rotate dims (0, 1), then translate.
    fn apply(&self, point: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = point.iter().map(|v| v * self.scale).collect();
        let (sin, cos) = self.rotation.sin_cos();
        let (x, y) = (out[0], out[1]);
        out[0] = cos * x - sin * y;
        out[1] = sin * x + cos * y;
        for (o, t) in out.iter_mut().zip(&self.translation) {
            *o += t;
        }
        out
    }
}

/// Clean class structure point for one draw (isotropic sampling noise
/// is added after the affine shift).
fn structure_point(spec: &DomainShiftSpec, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let classes = spec.classes;
    let dim = spec.input_dim;
    let mut p = vec![0.0; dim];
    match spec.kind {
        ShiftKind::GaussianShift => {
            let angle = 2.0 * std::f64::consts::PI * class as f64 / classes as f64;
            p[0] = STRUCTURE_RADIUS * angle.cos();
            p[1] = STRUCTURE_RADIUS * angle.sin();
        }
        ShiftKind::MoonsShift => {
            let t = rng.gen_range(0.0..std::f64::consts::PI);
            if class == 0 {
                p[0] = STRUCTURE_RADIUS * t.cos();
                p[1] = STRUCTURE_RADIUS * t.sin();
            } else {
                p[0] = STRUCTURE_RADIUS * (1.0 - t.cos());
                p[1] = STRUCTURE_RADIUS * (0.5 - t.sin());
            }
        }
    }
    p
}

fn draw_split(
    spec: &DomainShiftSpec,
    n: usize,
    affine: &Affine,
    rng: &mut ChaCha8Rng,
    next_id: &mut u64,
) -> Vec<LabeledSample> {
    let counts = balanced_counts(n, spec.classes);
    let mut out = Vec::with_capacity(n);
    for (class, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let clean = structure_point(spec, class, rng);
            let mut features = affine.apply(&clean);
            for f in features.iter_mut() {
                let noise: f64 = rng.sample(StandardNormal);
                *f += spec.noise_sigma * noise;
            }
            out.push(LabeledSample {
                id: SampleId(*next_id),
                features,
                label: class,
            });
            *next_id += 1;
        }
    }
    out
}

/// Generate a bundle. Deterministic given the spec (including its
/// seed). Split order: S, T̂₀, T, test; ids are assigned in that order.
pub fn generate(spec: &DomainShiftSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut next_id = 0u64;

    let identity = Affine::identity(spec.input_dim);
    let shift = Affine {
        rotation: spec.rotation_radians,
        translation: if spec.translation.is_empty() {
            vec![0.0; spec.input_dim]
        } else {
            spec.translation.clone()
        },
        scale: spec.scale,
    };

    let source = LabeledSet {
        samples: draw_split(spec, spec.n_source, &identity, &mut rng, &mut next_id),
    };
    let t_hat_0 = LabeledSet {
        samples: draw_split(spec, spec.shots * spec.classes, &shift, &mut rng, &mut next_id),
    };
    let unlabeled_samples = draw_split(spec, spec.n_target_unlabeled, &shift, &mut rng, &mut next_id);
    let test = LabeledSet {
        samples: draw_split(spec, spec.n_target_test, &shift, &mut rng, &mut next_id),
    };

    let mut audit = BTreeMap::new();
    let samples = unlabeled_samples
        .into_iter()
        .map(|s| {
            audit.insert(s.id, s.label);
            UnlabeledSample {
                id: s.id,
                features: s.features,
            }
        })
        .collect();

    Ok(DatasetBundle {
        source,
        t_hat_0,
        unlabeled: UnlabeledSet {
            samples,
            audit: AuditLabels { labels: audit },
        },
        test,
    })
}

const SPLIT_SOURCE: &str = "source";
const SPLIT_TARGET_LABELED: &str = "target_labeled";
const SPLIT_TARGET_UNLABELED: &str = "target_unlabeled";
const SPLIT_TEST: &str = "test";

/// Write the bundle as CSV: `split,id,label,f0..f{d-1}`, one row per
/// sample. The label column of `target_unlabeled` rows is the hidden
/// audit label. Floats print in shortest round-trip form, so
/// `load(snapshot(b))` reproduces `b` bit-exactly.
pub fn snapshot(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let d = bundle.input_dim();
    let header: Vec<String> = ["split", "id", "label"]
        .into_iter()
        .map(str::to_string)
        .chain((0..d).map(|i| format!("f{i}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;

    let write_labeled = |w: &mut BufWriter<File>, split: &str, set: &LabeledSet| -> Result<()> {
        for s in &set.samples {
            write!(w, "{split},{},{}", s.id, s.label)?;
            for f in &s.features {
                write!(w, ",{f}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    };
    write_labeled(&mut w, SPLIT_SOURCE, &bundle.source)?;
    write_labeled(&mut w, SPLIT_TARGET_LABELED, &bundle.t_hat_0)?;
    for s in &bundle.unlabeled.samples {
        let label = bundle
            .unlabeled
            .audit
            .true_label(s.id)
            .ok_or_else(|| SpiError::InconsistentState(format!("no audit label for {}", s.id)))?;
        write!(w, "{SPLIT_TARGET_UNLABELED},{},{label}", s.id)?;
        for f in &s.features {
            write!(w, ",{f}")?;
        }
        writeln!(w)?;
    }
    write_labeled(&mut w, SPLIT_TEST, &bundle.test)?;
    w.flush()?;
    Ok(())
}

/// Load a bundle previously written by `snapshot`.
pub fn load(path: &Path) -> Result<DatasetBundle> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, header_line) = lines.next().ok_or(SpiError::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let header_line = header_line?;
    let header: Vec<&str> = header_line.split(',').collect();
    if header.len() < 4 || header[0] != "split" || header[1] != "id" || header[2] != "label" {
        return Err(SpiError::Parse {
            line: 1,
            msg: format!(
                "bad header: expected split,id,label,f0,... got '{}'",
                header_line
            ),
        });
    }
    for (i, name) in header[3..].iter().enumerate() {
        let expected = format!("f{i}");
        if *name != expected {
            return Err(SpiError::Parse {
                line: 1,
                msg: format!("bad header column {}: expected {expected}, got {name}", i + 3),
            });
        }
    }
    let d = header.len() - 3;

    let mut bundle = DatasetBundle {
        source: LabeledSet::default(),
        t_hat_0: LabeledSet::default(),
        unlabeled: UnlabeledSet::default(),
        test: LabeledSet::default(),
    };

    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            let col = header.get(fields.len().min(header.len() - 1)).unwrap_or(&"?");
            return Err(SpiError::Parse {
                line: lineno,
                msg: format!(
                    "expected {} columns, got {} (first missing/extra near column '{col}')",
                    header.len(),
                    fields.len()
                ),
            });
        }
        let id = SampleId(fields[1].parse().map_err(|_| SpiError::Parse {
            line: lineno,
            msg: format!("bad id '{}'", fields[1]),
        })?);
        let label: usize = fields[2].parse().map_err(|_| SpiError::Parse {
            line: lineno,
            msg: format!("bad label '{}'", fields[2]),
        })?;
        let mut features = Vec::with_capacity(d);
        for (i, raw) in fields[3..].iter().enumerate() {
            features.push(raw.parse::<f64>().map_err(|_| SpiError::Parse {
                line: lineno,
                msg: format!("bad float '{raw}' in column f{i}"),
            })?);
        }
        match fields[0] {
            SPLIT_SOURCE => bundle.source.samples.push(LabeledSample { id, features, label }),
            SPLIT_TARGET_LABELED => bundle.t_hat_0.samples.push(LabeledSample { id, features, label }),
            SPLIT_TARGET_UNLABELED => {
                bundle.unlabeled.audit.labels.insert(id, label);
                bundle.unlabeled.samples.push(UnlabeledSample { id, features });
            }
            SPLIT_TEST => bundle.test.samples.push(LabeledSample { id, features, label }),
            other => {
                return Err(SpiError::Parse {
                    line: lineno,
                    msg: format!("unknown split tag '{other}'"),
                })
            }
        }
    }
    Ok(bundle)
}
