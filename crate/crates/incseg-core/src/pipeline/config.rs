//! Experiment manifest: scenario layout, model size, optimization
//! schedules, loss weights, replay settings, and the method grid.

use serde::{Deserialize, Serialize};

use crate::dataset::ScenarioSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: String,
    /// Root training seed; run `k` derives its own stream from it.
    pub seed: u64,
    /// Number of runs (derived seeds) per method.
    pub seeds: usize,
    /// Worker threads for data-parallel sections; 0 = library default.
    pub threads: usize,
    /// Method grid, e.g. `["ce", "ce+ali", "ce+ali+kd", "ce+ali+kd+mem"]`.
    pub methods: Vec<String>,
    pub scenario: ScenarioConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub losses: LossConfig,
    pub replay: ReplayConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: "out/run".into(),
            seed: 17,
            seeds: 1,
            threads: 0,
            methods: vec!["ce+ali+kd".into()],
            scenario: ScenarioConfig::default(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            losses: LossConfig::default(),
            replay: ReplayConfig::default(),
        }
    }
}

/// Scenario layout `A-B(C)` plus dataset sizes. The dataset seed is fixed
/// across the run seeds so every method and seed trains on the same data.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub base: usize,
    pub new: usize,
    pub stages: usize,
    pub images_per_stage: usize,
    pub eval_images: usize,
    pub height: usize,
    pub width: usize,
    pub data_seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            base: 4,
            new: 2,
            stages: 1,
            images_per_stage: 48,
            eval_images: 64,
            height: 48,
            width: 48,
            data_seed: 7,
        }
    }
}

impl ScenarioConfig {
    pub fn spec(&self) -> ScenarioSpec {
        ScenarioSpec {
            base: self.base,
            new: self.new,
            incremental_stages: self.stages,
            seed: self.data_seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden_channels: Vec<usize>,
    pub classifier_bias: bool,
    /// How classifier rows for newly added categories are initialized.
    pub new_row_init: crate::segmodel::NewRowInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            hidden_channels: vec![8, 16],
            classifier_bias: false,
            new_row_init: crate::segmodel::NewRowInit::Gaussian,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr_base: f64,
    pub lr_incremental: f64,
    pub lr_finetune: f64,
    pub lr_rotation: f64,
    pub epochs_base: usize,
    pub epochs_incremental: usize,
    pub epochs_finetune: usize,
    pub epochs_rotation: usize,
    pub rotation_steps_per_epoch: usize,
    pub batch_size: usize,
    pub poly_power: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_base: 0.2,
            lr_incremental: 0.1,
            lr_finetune: 0.02,
            lr_rotation: 0.01,
            epochs_base: 20,
            epochs_incremental: 10,
            epochs_finetune: 1,
            epochs_rotation: 10,
            rotation_steps_per_epoch: 40,
            batch_size: 8,
            poly_power: 0.9,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_ali: f64,
    pub lambda_kd: f64,
    pub lambda_mem: f64,
    pub lambda_rot: f64,
    pub focal_alpha: f64,
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_ali: 1.0,
            lambda_kd: 1.0,
            lambda_mem: 1.0,
            lambda_rot: 0.5,
            focal_alpha: 2.0,
            tau: 10.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ReplayConfig {
    /// Stored rows per category (the preset count S). 0 disables replay
    /// even for `+mem` methods.
    pub capacity: usize,
    /// Divide correlation scores by the row count before the spatial
    /// softmax; off by default (scores scale with S as written).
    pub normalize_scores: bool,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self { capacity: 50, normalize_scores: false }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.spec().validate()?;
        if self.methods.is_empty() {
            return Err(Error::Config("methods list is empty".into()));
        }
        for m in &self.methods {
            MethodSpec::parse(m)?;
        }
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be at least 1".into()));
        }
        if self.optim.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.model.hidden_channels.is_empty() {
            return Err(Error::Config("need at least one hidden conv layer".into()));
        }
        if self.model.feature_dim < 2 {
            return Err(Error::Config("feature_dim must be at least 2".into()));
        }
        for (name, v) in [
            ("lambda_ali", self.losses.lambda_ali),
            ("lambda_kd", self.losses.lambda_kd),
            ("lambda_mem", self.losses.lambda_mem),
            ("lambda_rot", self.losses.lambda_rot),
            ("focal_alpha", self.losses.focal_alpha),
        ] {
            if v < 0.0 {
                return Err(Error::Config(format!("{name} must be nonnegative")));
            }
        }
        if self.losses.lambda_rot > 1.0 {
            return Err(Error::Config("lambda_rot must be in [0, 1]".into()));
        }
        if self.losses.tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        for (name, v) in [
            ("lr_base", self.optim.lr_base),
            ("lr_incremental", self.optim.lr_incremental),
            ("lr_finetune", self.optim.lr_finetune),
            ("lr_rotation", self.optim.lr_rotation),
        ] {
            if v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Which loss terms a method enables during the first training step, plus
/// whether it runs the replay steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaseTerm {
    /// Plain cross-entropy on labeled pixels only.
    Ce,
    /// Calibrated cross-entropy: labeled pixels as CE, unlabeled pixels
    /// target the pooled previous probability.
    Cce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KdScope {
    Off,
    Labeled,
    Unlabeled,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KdKind {
    /// Distill into the previous-category softmax.
    Standard,
    /// Background-calibrated distillation.
    Calibrated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    pub base: BaseTerm,
    pub ali: bool,
    pub kd_scope: KdScope,
    pub kd_kind: KdKind,
    pub replay: bool,
}

impl MethodSpec {
    /// Parse a `+`-joined token list. Tokens: `ce`, `cce`, `ali`, `kd`
    /// (labeled scope), `kd-unlabeled`, `kd-all`, `ckd` (calibrated, all
    /// pixels), `mem`.
    pub fn parse(name: &str) -> Result<Self> {
        let mut spec = MethodSpec {
            name: name.to_string(),
            base: BaseTerm::Ce,
            ali: false,
            kd_scope: KdScope::Off,
            kd_kind: KdKind::Standard,
            replay: false,
        };
        let mut saw_base = false;
        for token in name.split('+') {
            match token.trim() {
                "ce" => {
                    spec.base = BaseTerm::Ce;
                    saw_base = true;
                }
                "cce" => {
                    spec.base = BaseTerm::Cce;
                    saw_base = true;
                }
                "ali" => spec.ali = true,
                "kd" => {
                    spec.kd_scope = KdScope::Labeled;
                    spec.kd_kind = KdKind::Standard;
                }
                "kd-unlabeled" => {
                    spec.kd_scope = KdScope::Unlabeled;
                    spec.kd_kind = KdKind::Standard;
                }
                "kd-all" => {
                    spec.kd_scope = KdScope::All;
                    spec.kd_kind = KdKind::Standard;
                }
                "ckd" => {
                    spec.kd_scope = KdScope::All;
                    spec.kd_kind = KdKind::Calibrated;
                }
                "mem" => spec.replay = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown method token '{other}' in '{name}'"
                    )))
                }
            }
        }
        if !saw_base {
            return Err(Error::Config(format!(
                "method '{name}' needs a base term ('ce' or 'cce')"
            )));
        }
        Ok(spec)
    }
}
