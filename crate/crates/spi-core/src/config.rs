//! Run configuration: every hyperparameter of the method plus the
//! ablation toggles, with flat key=value routing shared by the config
//! file parser, CLI flag overrides, and the sweep runner.

use serde::Serialize;

use crate::datasets::{DomainShiftSpec, ShiftKind};
use crate::error::{Result, SpiError};
use crate::losses::{AnchorMode, LossWeights};
use crate::sampling::ViewConfig;

/// Which loss components participate in the training objective. The
/// classifier loss is always on; a classifier-only mask is the
/// source+target baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LossMask {
    pub con: bool,
    pub ils: bool,
    pub ida: bool,
    pub cls: bool,
}

impl Default for LossMask {
    fn default() -> Self {
        Self {
            con: true,
            ils: true,
            ida: true,
            cls: true,
        }
    }
}

impl LossMask {
    /// Parse a '+'-separated component list, e.g. "cls" or
    /// "con+ils+ida+cls".
    pub fn parse(text: &str) -> Result<Self> {
        let mut mask = Self {
            con: false,
            ils: false,
            ida: false,
            cls: false,
        };
        for part in text.split('+') {
            match part.trim() {
                "con" => mask.con = true,
                "ils" => mask.ils = true,
                "ida" => mask.ida = true,
                "cls" => mask.cls = true,
                other => {
                    return Err(SpiError::InvalidConfig(format!(
                        "loss_mask: unknown component '{other}'"
                    )))
                }
            }
        }
        if !mask.cls {
            return Err(SpiError::InvalidConfig(
                "loss_mask: the classifier loss 'cls' must be enabled".into(),
            ));
        }
        Ok(mask)
    }

    /// The source+target baseline trains on labeled samples only.
    pub fn is_classifier_only(&self) -> bool {
        self.cls && !self.con && !self.ils && !self.ida
    }

    pub fn display(&self) -> String {
        let mut parts = Vec::new();
        if self.con {
            parts.push("con");
        }
        if self.ils {
            parts.push("ils");
        }
        if self.ida {
            parts.push("ida");
        }
        if self.cls {
            parts.push("cls");
        }
        parts.join("+")
    }
}

/// When the injection state machine runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum InjectionInterval {
    #[default]
    Epoch,
    Iteration,
}

impl InjectionInterval {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "epoch" => Ok(Self::Epoch),
            "iteration" => Ok(Self::Iteration),
            other => Err(SpiError::InvalidConfig(format!(
                "injection_interval: expected epoch|iteration, got '{other}'"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Epoch => "epoch",
            Self::Iteration => "iteration",
        }
    }
}

impl AnchorMode {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "as_written" => Ok(Self::AsWritten),
            "standard" => Ok(Self::Standard),
            other => Err(SpiError::InvalidConfig(format!(
                "anchor_mode: expected as_written|standard, got '{other}'"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::AsWritten => "as_written",
            Self::Standard => "standard",
        }
    }
}

/// Full training configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    /// 0 selects ceil(|T| / b_u), visiting each unlabeled sample about
    /// once per epoch.
    pub iters_per_epoch: usize,
    pub b_u: usize,
    pub eta_sup: usize,
    pub eta_l: usize,

    pub tau_con: f64,
    pub tau_sharp: f64,
    pub tau_pl_start: f64,
    pub tau_pl_floor: f64,

    pub lambda_con: f64,
    pub lambda_ils: f64,
    pub lambda_ida: f64,
    pub lambda_cls: f64,

    pub rho: f64,
    pub gamma: f64,
    pub warmup_epochs: usize,
    pub top_k: usize,
    pub label_smoothing: f64,

    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub momentum: f64,
    pub weight_decay: f64,

    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,

    pub global_noise_sigma: f64,
    pub local_mask_fraction: f64,
    pub local_noise_sigma: f64,

    pub normalize_contrastive: bool,
    pub anchor_mode: AnchorMode,
    pub removal_enabled: bool,
    pub injection_interval: InjectionInterval,
    pub use_ema: bool,
    pub loss_mask: LossMask,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            iters_per_epoch: 0,
            b_u: 32,
            eta_sup: 4,
            eta_l: 4,
            tau_con: 0.1,
            tau_sharp: 0.3,
            tau_pl_start: 0.7,
            tau_pl_floor: 0.25,
            lambda_con: 4.0,
            lambda_ils: 1.0,
            lambda_ida: 1.0,
            lambda_cls: 1.0,
            rho: 0.7,
            gamma: 0.8,
            warmup_epochs: 5,
            top_k: 5,
            label_smoothing: 0.1,
            lr_start: 0.0,
            lr_peak: 0.0002,
            lr_floor: 1e-5,
            momentum: 0.9,
            weight_decay: 0.0005,
            hidden_dims: vec![64, 64],
            embed_dim: 32,
            global_noise_sigma: 0.05,
            local_mask_fraction: 0.5,
            local_noise_sigma: 0.05,
            normalize_contrastive: true,
            anchor_mode: AnchorMode::AsWritten,
            removal_enabled: true,
            injection_interval: InjectionInterval::Epoch,
            use_ema: true,
            loss_mask: LossMask::default(),
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_con: self.lambda_con,
            lambda_ils: self.lambda_ils,
            lambda_ida: self.lambda_ida,
            lambda_cls: self.lambda_cls,
        }
    }

    pub fn view_config(&self) -> ViewConfig {
        ViewConfig {
            n_global: 2,
            n_local: self.eta_l,
            global_noise_sigma: self.global_noise_sigma,
            local_mask_fraction: self.local_mask_fraction,
            local_noise_sigma: self.local_noise_sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tau_con", self.tau_con),
            ("tau_sharp", self.tau_sharp),
            ("tau_pl_start", self.tau_pl_start),
            ("tau_pl_floor", self.tau_pl_floor),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(SpiError::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if self.tau_pl_floor > self.tau_pl_start {
            return Err(SpiError::InvalidConfig(format!(
                "tau_pl_floor {} exceeds tau_pl_start {}",
                self.tau_pl_floor, self.tau_pl_start
            )));
        }
        self.weights().validate().map_err(|_| {
            SpiError::InvalidConfig("loss weights must be finite and non-negative".into())
        })?;
        if !self.rho.is_finite() || self.rho <= 0.0 || self.rho > 1.0 {
            return Err(SpiError::InvalidConfig(format!(
                "rho must lie in (0, 1], got {}",
                self.rho
            )));
        }
        if !self.gamma.is_finite() || self.gamma <= 0.0 || self.gamma > 1.0 {
            return Err(SpiError::InvalidConfig(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.b_u == 0 {
            return Err(SpiError::InvalidConfig("b_u must be at least 1".into()));
        }
        if self.eta_sup == 0 {
            return Err(SpiError::InvalidConfig("eta_sup must be at least 1".into()));
        }
        if self.embed_dim == 0 || self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(SpiError::InvalidConfig(
                "hidden_dims and embed_dim must be positive".into(),
            ));
        }
        if self.top_k == 0 || self.top_k > self.embed_dim {
            return Err(SpiError::InvalidConfig(format!(
                "top_k must lie in [1, embed_dim={}], got {}",
                self.embed_dim, self.top_k
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(SpiError::InvalidConfig(format!(
                "label_smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        for (name, v) in [
            ("lr_start", self.lr_start),
            ("lr_peak", self.lr_peak),
            ("lr_floor", self.lr_floor),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(SpiError::InvalidConfig(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if !self.loss_mask.cls {
            return Err(SpiError::InvalidConfig(
                "loss_mask must include cls".into(),
            ));
        }
        self.view_config()
            .validate()
            .map_err(|e| SpiError::InvalidConfig(format!("view config: {e}")))?;
        Ok(())
    }

    /// Apply one flat `key=value` setting. Unknown keys are an error
    /// naming the key.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                SpiError::InvalidConfig(format!("{key}: cannot parse '{value}'"))
            })
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                other => Err(SpiError::InvalidConfig(format!(
                    "{key}: expected true|false, got '{other}'"
                ))),
            }
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "iters_per_epoch" => self.iters_per_epoch = num(key, value)?,
            "b_u" => self.b_u = num(key, value)?,
            "eta_sup" => self.eta_sup = num(key, value)?,
            "eta_l" => self.eta_l = num(key, value)?,
            "tau_con" => self.tau_con = num(key, value)?,
            "tau_sharp" => self.tau_sharp = num(key, value)?,
            "tau_pl_start" => self.tau_pl_start = num(key, value)?,
            "tau_pl_floor" => self.tau_pl_floor = num(key, value)?,
            "lambda_con" => self.lambda_con = num(key, value)?,
            "lambda_ils" => self.lambda_ils = num(key, value)?,
            "lambda_ida" => self.lambda_ida = num(key, value)?,
            "lambda_cls" => self.lambda_cls = num(key, value)?,
            "rho" => self.rho = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "top_k" => self.top_k = num(key, value)?,
            "label_smoothing" => self.label_smoothing = num(key, value)?,
            "lr_start" => self.lr_start = num(key, value)?,
            "lr_peak" => self.lr_peak = num(key, value)?,
            "lr_floor" => self.lr_floor = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "hidden_dims" => {
                self.hidden_dims = value
                    .split(',')
                    .map(|v| num("hidden_dims", v.trim()))
                    .collect::<Result<_>>()?;
            }
            "embed_dim" => self.embed_dim = num(key, value)?,
            "global_noise_sigma" => self.global_noise_sigma = num(key, value)?,
            "local_mask_fraction" => self.local_mask_fraction = num(key, value)?,
            "local_noise_sigma" => self.local_noise_sigma = num(key, value)?,
            "normalize_contrastive" => self.normalize_contrastive = flag(key, value)?,
            "anchor_mode" => self.anchor_mode = AnchorMode::parse(value)?,
            "removal_enabled" => self.removal_enabled = flag(key, value)?,
            "injection_interval" => self.injection_interval = InjectionInterval::parse(value)?,
            "use_ema" => self.use_ema = flag(key, value)?,
            "loss_mask" => self.loss_mask = LossMask::parse(value)?,
            other => {
                return Err(SpiError::InvalidConfig(format!(
                    "unknown training key '{other}'"
                )))
            }
        }
        Ok(())
    }

    /// Fully resolved key=value listing (manifest echo).
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let hidden = self
            .hidden_dims
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("seed".into(), self.seed.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("iters_per_epoch".into(), self.iters_per_epoch.to_string()),
            ("b_u".into(), self.b_u.to_string()),
            ("eta_sup".into(), self.eta_sup.to_string()),
            ("eta_l".into(), self.eta_l.to_string()),
            ("tau_con".into(), self.tau_con.to_string()),
            ("tau_sharp".into(), self.tau_sharp.to_string()),
            ("tau_pl_start".into(), self.tau_pl_start.to_string()),
            ("tau_pl_floor".into(), self.tau_pl_floor.to_string()),
            ("lambda_con".into(), self.lambda_con.to_string()),
            ("lambda_ils".into(), self.lambda_ils.to_string()),
            ("lambda_ida".into(), self.lambda_ida.to_string()),
            ("lambda_cls".into(), self.lambda_cls.to_string()),
            ("rho".into(), self.rho.to_string()),
            ("gamma".into(), self.gamma.to_string()),
            ("warmup_epochs".into(), self.warmup_epochs.to_string()),
            ("top_k".into(), self.top_k.to_string()),
            ("label_smoothing".into(), self.label_smoothing.to_string()),
            ("lr_start".into(), self.lr_start.to_string()),
            ("lr_peak".into(), self.lr_peak.to_string()),
            ("lr_floor".into(), self.lr_floor.to_string()),
            ("momentum".into(), self.momentum.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("hidden_dims".into(), hidden),
            ("embed_dim".into(), self.embed_dim.to_string()),
            ("global_noise_sigma".into(), self.global_noise_sigma.to_string()),
            ("local_mask_fraction".into(), self.local_mask_fraction.to_string()),
            ("local_noise_sigma".into(), self.local_noise_sigma.to_string()),
            (
                "normalize_contrastive".into(),
                self.normalize_contrastive.to_string(),
            ),
            ("anchor_mode".into(), self.anchor_mode.name().into()),
            ("removal_enabled".into(), self.removal_enabled.to_string()),
            (
                "injection_interval".into(),
                self.injection_interval.name().into(),
            ),
            ("use_ema".into(), self.use_ema.to_string()),
            ("loss_mask".into(), self.loss_mask.display()),
        ]
    }
}

/// Apply one flat `key=value` setting to a dataset spec.
pub fn apply_spec_key(spec: &mut DomainShiftSpec, key: &str, value: &str) -> Result<()> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
        value
            .parse()
            .map_err(|_| SpiError::InvalidSpec(format!("{key}: cannot parse '{value}'")))
    }
    match key {
        "kind" => spec.kind = ShiftKind::parse(value)?,
        "classes" => spec.classes = num(key, value)?,
        "input_dim" => spec.input_dim = num(key, value)?,
        "n_source" => spec.n_source = num(key, value)?,
        "n_target_unlabeled" => spec.n_target_unlabeled = num(key, value)?,
        "n_target_test" => spec.n_target_test = num(key, value)?,
        "shots" => spec.shots = num(key, value)?,
        "rotation_radians" => spec.rotation_radians = num(key, value)?,
        "rotation_degrees" => {
            spec.rotation_radians = num::<f64>(key, value)?.to_radians();
        }
        "translation" => {
            spec.translation = if value.is_empty() {
                Vec::new()
            } else {
                value
                    .split(',')
                    .map(|v| num("translation", v.trim()))
                    .collect::<Result<_>>()?
            };
        }
        "scale" => spec.scale = num(key, value)?,
        "noise_sigma" => spec.noise_sigma = num(key, value)?,
        "data_seed" => spec.seed = num(key, value)?,
        other => {
            return Err(SpiError::InvalidSpec(format!(
                "unknown dataset key '{other}'"
            )))
        }
    }
    Ok(())
}
