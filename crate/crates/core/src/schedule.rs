//! Routing entropy statistics and the two-stage switching machine.

use serde::{Deserialize, Serialize};

use crate::autograd::entropy;
use crate::error::{MagnetError, Result};

/// Summary of a batch-mean routing distribution. Entropies are in nats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyStats {
    pub mean: Vec<f64>,
    pub h: f64,
    pub h_norm: f64,
    pub n_eff: f64,
}

impl EntropyStats {
    pub fn from_mean(mean: Vec<f64>) -> Self {
        let h = entropy(&mean).max(0.0);
        let e = mean.len();
        let h_norm = if e > 1 { (h / (e as f64).ln()).clamp(0.0, 1.0) } else { 0.0 };
        Self {
            n_eff: h.exp(),
            mean,
            h,
            h_norm,
        }
    }
}

/// Statistics of the arithmetic mean of `routings`.
pub fn batch_entropy_stats<'a, I>(routings: I) -> Result<EntropyStats>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut sum: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for pi in routings {
        if sum.is_empty() {
            sum = vec![0.0; pi.len()];
        }
        if pi.len() != sum.len() {
            return Err(MagnetError::Shape("routings of different widths".into()));
        }
        for (s, &p) in sum.iter_mut().zip(pi) {
            *s += p;
        }
        n += 1;
    }
    if n == 0 {
        return Err(MagnetError::Empty("no routings to summarize".into()));
    }
    Ok(EntropyStats::from_mean(sum.into_iter().map(|s| s / n as f64).collect()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightStrategy {
    LinEnt,
    QuadEnt,
    Const,
    RevEnt,
}

/// What moves the run from stage 1 to stage 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SwitchRule {
    /// `n ≥ W` consecutive steps with `H̃ ≥ H*`.
    Entropy,
    /// Switch at the first step of the given epoch (1-based).
    FixedEpoch(usize),
    /// Stay in stage 1.
    CoverageOnly,
    /// Start and stay in stage 2.
    ConfidenceOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub threshold: f64,
    pub window: usize,
    pub lambda_r: f64,
    pub strategy: WeightStrategy,
    pub rule: SwitchRule,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            threshold: 0.90,
            window: 3,
            lambda_r: 0.30,
            strategy: WeightStrategy::LinEnt,
            rule: SwitchRule::Entropy,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(MagnetError::Parameter(format!("entropy_threshold = {} is outside [0, 1]", self.threshold)));
        }
        if self.window == 0 {
            return Err(MagnetError::Parameter("trigger_window must be at least 1".into()));
        }
        if self.lambda_r.is_nan() || self.lambda_r < 0.0 {
            return Err(MagnetError::Parameter(format!("lambda_r = {} must be nonnegative", self.lambda_r)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub config: ScheduleConfig,
    pub stage: u8,
    pub counter: usize,
    /// Step (1-based) at which stage 2 began, if it has.
    pub switched_at: Option<usize>,
    pub steps: usize,
}

impl ScheduleState {
    pub fn new(config: ScheduleConfig) -> Self {
        let stage = if config.rule == SwitchRule::ConfidenceOnly { 2 } else { 1 };
        Self {
            config,
            stage,
            counter: 0,
            switched_at: None,
            steps: 0,
        }
    }

    /// Advances one step with this batch's normalized entropy. `epoch` is
    /// 1-based and only matters for the fixed-epoch rule.
    pub fn update(&mut self, h_norm: f64, epoch: usize) {
        self.steps += 1;
        if h_norm >= self.config.threshold {
            self.counter += 1;
        } else {
            self.counter = 0;
        }
        let flip = match self.config.rule {
            SwitchRule::Entropy => self.counter >= self.config.window,
            SwitchRule::FixedEpoch(at) => epoch >= at,
            SwitchRule::CoverageOnly | SwitchRule::ConfidenceOnly => false,
        };
        if self.stage == 1 && flip {
            self.stage = 2;
            self.switched_at = Some(self.steps);
        }
    }

    /// `(λ_cov, λ_conf)` for the current stage.
    pub fn weights(&self, h_norm: f64) -> (f64, f64) {
        stage_weights(self.stage, self.config.lambda_r, self.config.strategy, h_norm)
    }
}

/// One stage-machine transition as a pure function of `(stage, counter)`.
pub fn update_stage(stage: u8, counter: usize, h_norm: f64, threshold: f64, window: usize) -> (u8, usize) {
    let n = if h_norm >= threshold { counter + 1 } else { 0 };
    let stage = if stage == 1 && n >= window { 2 } else { stage };
    (stage, n)
}

pub fn stage_weights(stage: u8, lambda_r: f64, strategy: WeightStrategy, h_norm: f64) -> (f64, f64) {
    let (cov, conf) = match strategy {
        WeightStrategy::LinEnt => (1.0 - h_norm, h_norm),
        WeightStrategy::QuadEnt => ((1.0 - h_norm).powi(2), h_norm.powi(2)),
        WeightStrategy::Const => (1.0, 1.0),
        WeightStrategy::RevEnt => (h_norm, 1.0 - h_norm),
    };
    if stage == 1 {
        (lambda_r * cov, 0.0)
    } else {
        (0.0, lambda_r * conf)
    }
}
