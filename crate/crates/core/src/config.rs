//! Run configuration: every hyperparameter of training, scoring and
//! adaptation, with defaults, dataset presets and whole-config validation.
//!
//! Files are TOML. All sections and keys are optional; missing keys take the
//! defaults below. Unknown keys are rejected.
//!
//! ```toml
//! seed = 42
//! preset = "psm"            # optional: sets model.codebook_size and model.d
//!
//! [model]
//! d = 128
//! d_core = 64
//! codebook_size = 128
//! scales = [{ patch = 2, stride = 1 }, { patch = 4, stride = 2 }, { patch = 6, stride = 3 }]
//!
//! [window]
//! length = 100
//! stride = 50
//!
//! [train]
//! epochs = 20
//! batch_size = 128
//! learning_rate = 1e-4
//! weight_decay = 5e-4
//! alpha = 1.0
//! beta = 1.0
//! validation_fraction = 0.1
//!
//! [scoring]
//! n_neighbors = 10
//! n_sigma = 10
//! lambda = 0.5
//! ema_momentum = 0.75
//! epsilon = 1e-8
//! local_scaling = true
//! normalize = true
//! selection = { mode = "percentile", rho = 75.0 }   # or { mode = "budget", budget = 3 } or { mode = "none" }
//!
//! [tta]
//! enabled = false
//! weight = 1.0
//! temperature = 0.1
//! steps = 1
//! # learning_rate = 1e-4    (defaults to train.learning_rate)
//! # batch_windows = 128     (defaults to train.batch_size)
//! max_contrastive = 512
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{CometError, Result};
use crate::patching::ScaleSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub model: ModelConfig,
    pub window: WindowConfig,
    pub train: TrainConfig,
    pub scoring: ScoringConfig,
    pub tta: TtaConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            preset: None,
            model: ModelConfig::default(),
            window: WindowConfig::default(),
            train: TrainConfig::default(),
            scoring: ScoringConfig::default(),
            tta: TtaConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub d_core: usize,
    pub codebook_size: usize,
    pub scales: Vec<ScaleSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 128,
            d_core: 64,
            codebook_size: 128,
            scales: vec![
                ScaleSpec { patch: 2, stride: 1 },
                ScaleSpec { patch: 4, stride: 2 },
                ScaleSpec { patch: 6, stride: 3 },
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub length: usize,
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            length: 100,
            stride: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 128,
            learning_rate: 1e-4,
            weight_decay: 5e-4,
            alpha: 1.0,
            beta: 1.0,
            validation_fraction: 0.1,
        }
    }
}

/// Per-timestep variable selection applied to the `D×T` score matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum SelectionConfig {
    /// Keep variables with `|δ| ≤ Q_rho(|δ|)`, plus the first variable.
    Percentile { rho: f64 },
    /// Keep the `budget` most stable variables, the first one always included.
    Budget { budget: usize },
    /// Plain mean over all variables.
    None,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig::Percentile { rho: 75.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub n_neighbors: usize,
    pub n_sigma: usize,
    pub lambda: f64,
    pub ema_momentum: f64,
    pub epsilon: f64,
    /// Plain squared distance when false.
    pub local_scaling: bool,
    /// Raw scores are combined directly when false.
    pub normalize: bool,
    pub selection: SelectionConfig,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            n_neighbors: 10,
            n_sigma: 10,
            lambda: 0.5,
            ema_momentum: 0.75,
            epsilon: 1e-8,
            local_scaling: true,
            normalize: true,
            selection: SelectionConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtaConfig {
    pub enabled: bool,
    /// Weight of the contrastive term.
    pub weight: f64,
    pub temperature: f64,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    /// Windows per adaptation batch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_windows: Option<usize>,
    /// Upper bound on embeddings entering the contrastive loss per step.
    pub max_contrastive: usize,
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig {
            enabled: false,
            weight: 1.0,
            temperature: 0.1,
            steps: 1,
            learning_rate: None,
            batch_windows: None,
            max_contrastive: 512,
        }
    }
}

/// `(name, codebook size, d)` for the benchmark presets.
pub const PRESETS: &[(&str, usize, usize)] = &[
    ("psm", 128, 256),
    ("swat", 256, 256),
    ("smap", 128, 128),
    ("msl", 256, 128),
    ("wadi", 32, 64),
];

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::resolve(Some(text), None)
    }

    /// Builds a config with precedence defaults < preset < file < `cli_preset`.
    ///
    /// A preset named inside the file is applied underneath the file's own
    /// keys; one passed on the command line overrides them.
    pub fn resolve(file: Option<&str>, cli_preset: Option<&str>) -> Result<Self> {
        let table: toml::Table = match file {
            Some(text) => text
                .parse()
                .map_err(|e: toml::de::Error| CometError::config("config", e.to_string()))?,
            None => toml::Table::new(),
        };
        let file_preset = table.get("preset").and_then(|v| v.as_str()).map(str::to_owned);

        let mut base = RunConfig::default();
        if let Some(name) = &file_preset {
            base.apply_preset(name)?;
        }
        let mut merged = toml::Table::try_from(&base)
            .map_err(|e| CometError::config("config", e.to_string()))?;
        merge(&mut merged, table);
        let mut cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| CometError::config("config", e.to_string()))?;
        if let Some(name) = cli_preset {
            cfg.apply_preset(name)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let key = name.to_ascii_lowercase();
        let (_, m, d) = PRESETS
            .iter()
            .find(|(n, _, _)| *n == key)
            .ok_or_else(|| {
                CometError::config(
                    "preset",
                    format!("unknown preset `{name}` (known: psm, swat, smap, msl, wadi)"),
                )
            })?;
        self.model.codebook_size = *m;
        self.model.d = *d;
        self.preset = Some(key);
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// One-line JSON form, echoed into output artifacts.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn tta_learning_rate(&self) -> f64 {
        self.tta.learning_rate.unwrap_or(self.train.learning_rate)
    }

    pub fn tta_batch_windows(&self) -> usize {
        self.tta.batch_windows.unwrap_or(self.train.batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.d == 0 || !m.d.is_multiple_of(2) {
            return Err(CometError::config("model.d", format!("must be even and positive, got {}", m.d)));
        }
        if m.d_core == 0 {
            return Err(CometError::config("model.d_core", "must be >= 1"));
        }
        if m.codebook_size == 0 {
            return Err(CometError::config("model.codebook_size", "must be >= 1"));
        }
        if m.scales.is_empty() {
            return Err(CometError::config("model.scales", "at least one scale is required"));
        }
        for s in &m.scales {
            s.validate()?;
            if s.patch > self.window.length {
                return Err(CometError::config(
                    "model.scales",
                    format!("patch size {} exceeds window length {}", s.patch, self.window.length),
                ));
            }
        }
        if self.window.length == 0 {
            return Err(CometError::config("window.length", "must be >= 1"));
        }
        if self.window.stride == 0 || self.window.stride > self.window.length {
            return Err(CometError::config("window.stride", "must be in [1, window.length]"));
        }
        let t = &self.train;
        if t.epochs == 0 {
            return Err(CometError::config("train.epochs", "must be >= 1"));
        }
        if t.batch_size == 0 {
            return Err(CometError::config("train.batch_size", "must be >= 1"));
        }
        check_non_negative("train.learning_rate", t.learning_rate)?;
        check_non_negative("train.weight_decay", t.weight_decay)?;
        check_non_negative("train.alpha", t.alpha)?;
        check_non_negative("train.beta", t.beta)?;
        if !(0.0..1.0).contains(&t.validation_fraction) {
            return Err(CometError::config("train.validation_fraction", "must be in [0, 1)"));
        }
        let s = &self.scoring;
        if s.n_neighbors == 0 {
            return Err(CometError::config("scoring.n_neighbors", "must be >= 1"));
        }
        if s.n_sigma == 0 {
            return Err(CometError::config("scoring.n_sigma", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&s.lambda) {
            return Err(CometError::config("scoring.lambda", "must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&s.ema_momentum) {
            return Err(CometError::config("scoring.ema_momentum", "must be in [0, 1]"));
        }
        if !(s.epsilon > 0.0) {
            return Err(CometError::config("scoring.epsilon", "must be positive"));
        }
        match s.selection {
            SelectionConfig::Percentile { rho } if !(0.0..=100.0).contains(&rho) => {
                return Err(CometError::config("scoring.selection.rho", "must be in [0, 100]"));
            }
            SelectionConfig::Budget { budget: 0 } => {
                return Err(CometError::config("scoring.selection.budget", "must be >= 1"));
            }
            _ => {}
        }
        let a = &self.tta;
        if !(a.temperature > 0.0) {
            return Err(CometError::config("tta.temperature", "must be positive"));
        }
        if a.steps == 0 {
            return Err(CometError::config("tta.steps", "must be >= 1"));
        }
        check_non_negative("tta.weight", a.weight)?;
        if let Some(lr) = a.learning_rate {
            check_non_negative("tta.learning_rate", lr)?;
        }
        if a.batch_windows == Some(0) {
            return Err(CometError::config("tta.batch_windows", "must be >= 1"));
        }
        if a.max_contrastive < 2 {
            return Err(CometError::config("tta.max_contrastive", "must be >= 2"));
        }
        Ok(())
    }
}

fn check_non_negative(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(CometError::config(field, format!("must be a finite non-negative number, got {v}")))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if k != "selection" => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
