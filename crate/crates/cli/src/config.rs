//! Flat run configuration with file loading and `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use magnet::data::SplitRatios;
use magnet::model::{FusionMode, ModelConfig};
use magnet::moe::TemplateParams;
use magnet::optim::AdamConfig;
use magnet::schedule::{ScheduleConfig, SwitchRule, WeightStrategy};
use magnet::train::{LossConfig, TrainerConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewMode {
    Sv,
    Dv,
}

/// What ends stage 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SwitchMode {
    Entropy,
    /// Stage 2 starts once `ceil(max_epochs / 2)` epochs are complete.
    FixedStep,
    CoverageOnly,
    ConfidenceOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    F32,
    F64,
}

/// Every effective setting of a run. Defaults follow the Baby column of the
/// hyperparameter table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub interactions: Option<PathBuf>,
    pub features_a: Option<PathBuf>,
    pub features_s: Option<PathBuf>,

    pub min_interactions: usize,
    pub split_train: f64,
    pub split_valid: f64,
    pub split_test: f64,
    pub split_seed: u64,

    pub knn_k: usize,
    pub expand_r: usize,

    pub view: ViewMode,
    pub fusion: FusionMode,
    pub embed_dim: usize,
    pub layers: usize,
    pub fanout: Option<usize>,
    pub replicas: usize,
    pub top_k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub dropout: f64,
    pub uniform_router: bool,

    pub threshold: f64,
    pub window: usize,
    pub lambda_r: f64,
    pub strategy: WeightStrategy,
    pub switch: SwitchMode,

    pub lambda_ctr: f64,
    pub tau: f64,
    pub weight_decay: f64,
    pub mean_bpr: bool,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub neg_ratio: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub precision: Precision,
    /// Wall-clock seconds in `metrics.jsonl`; off keeps logs reproducible.
    pub log_seconds: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainerConfig::default();
        let m = &t.model;
        let s = &t.schedule;
        let split = SplitRatios::default();
        Self {
            interactions: None,
            features_a: None,
            features_s: None,
            min_interactions: 4,
            split_train: split.train,
            split_valid: split.valid,
            split_test: split.test,
            split_seed: t.seed,
            knn_k: 20,
            expand_r: 150,
            view: ViewMode::Dv,
            fusion: m.fusion,
            embed_dim: m.embed_dim,
            layers: m.layers,
            fanout: m.fanout,
            replicas: m.replicas,
            top_k: m.top_k,
            alpha: m.templates.alpha,
            beta: m.templates.beta,
            delta: m.templates.delta,
            epsilon: m.templates.epsilon,
            dropout: m.dropout,
            uniform_router: m.uniform_router,
            threshold: s.threshold,
            window: s.window,
            lambda_r: s.lambda_r,
            strategy: s.strategy,
            switch: SwitchMode::Entropy,
            lambda_ctr: t.loss.lambda_ctr,
            tau: t.loss.tau,
            weight_decay: t.loss.weight_decay,
            mean_bpr: t.loss.mean_bpr,
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            batch_size: t.batch_size,
            neg_ratio: t.neg_ratio,
            max_epochs: t.max_epochs,
            patience: t.patience,
            max_steps: t.max_steps,
            seed: t.seed,
            precision: Precision::F32,
            log_seconds: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::missing(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies one `key=value` override. The value is read as JSON when it
    /// parses and as a bare string otherwise.
    pub fn set(&mut self, assignment: &str) -> Result<(), CliError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim().replace('-', "_");
        let mut obj = serde_json::to_value(&*self).expect("config serializes");
        let map = obj.as_object_mut().expect("config is an object");
        if !map.contains_key(&key) {
            return Err(CliError::Config(format!("unknown config key {key:?}")));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        map.insert(key.clone(), value);
        *self = serde_json::from_value(obj).map_err(|e| CliError::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    pub fn split_ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.split_train,
            valid: self.split_valid,
            test: self.split_test,
        }
    }

    pub fn dual_view(&self) -> bool {
        self.view == ViewMode::Dv
    }

    pub fn trainer(&self) -> TrainerConfig {
        let rule = match self.switch {
            SwitchMode::Entropy => SwitchRule::Entropy,
            SwitchMode::FixedStep => SwitchRule::FixedEpoch(self.max_epochs.div_ceil(2) + 1),
            SwitchMode::CoverageOnly => SwitchRule::CoverageOnly,
            SwitchMode::ConfidenceOnly => SwitchRule::ConfidenceOnly,
        };
        TrainerConfig {
            model: ModelConfig {
                embed_dim: self.embed_dim,
                layers: self.layers,
                fanout: self.fanout,
                replicas: self.replicas,
                top_k: self.top_k,
                templates: TemplateParams {
                    alpha: self.alpha,
                    beta: self.beta,
                    delta: self.delta,
                    epsilon: self.epsilon,
                },
                dropout: self.dropout,
                dual_view: self.dual_view(),
                fusion: self.fusion,
                uniform_router: self.uniform_router,
            },
            schedule: ScheduleConfig {
                threshold: self.threshold,
                window: self.window,
                lambda_r: self.lambda_r,
                strategy: self.strategy,
                rule,
            },
            loss: LossConfig {
                lambda_ctr: self.lambda_ctr,
                tau: self.tau,
                weight_decay: self.weight_decay,
                mean_bpr: self.mean_bpr,
            },
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            batch_size: self.batch_size,
            neg_ratio: self.neg_ratio,
            max_epochs: self.max_epochs,
            patience: self.patience,
            max_steps: self.max_steps,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.min_interactions == 0 {
            return bad("min_interactions must be at least 1".into());
        }
        let parts = [self.split_train, self.split_valid, self.split_test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split ratios {parts:?} must lie in [0, 1] and sum to 1"));
        }
        if self.knn_k == 0 || self.expand_r == 0 {
            return bad("knn_k and expand_r must be at least 1".into());
        }
        self.trainer().validate().map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        crate::io::write_text(&dir.join("config.resolved.json"), &(text + "\n"))
    }
}
