//! JSON run configuration. Every section rejects unknown keys and falls back
//! to the training recipe's values for omitted ones.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::scene::default_fb;
use crate::error::{Error, Result};
use crate::losses::{DistMode, LossWeights, ReconVariant};
use crate::metrics::DEFAULT_CAP_METERS;
use crate::networks::NetworkConfig;
use crate::optim::OptimizerConfig;
use crate::pipeline::StageName;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory used when a command gets no explicit `--data`.
    pub root: Option<String>,
    pub width: usize,
    pub height: usize,
    pub count: usize,
    pub seed: u64,
    /// `f·b` in pixel·meters; derived from the width when absent.
    pub fb: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            width: 64,
            height: 32,
            count: 200,
            seed: 1,
            fb: None,
        }
    }
}

impl DataConfig {
    pub fn fb(&self) -> f64 {
        self.fb.unwrap_or_else(|| default_fb(self.width))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Multiplies every stage's step count.
    pub scale_factor: f64,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    /// Seeds batch order and flip augmentation.
    pub seed: u64,
    pub stages: Vec<StageOverride>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            scale_factor: 1.0,
            steps_per_epoch: 50,
            batch_size: 8,
            seed: 0,
            stages: Vec::new(),
        }
    }
}

/// Per-stage adjustments applied on top of the preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOverride {
    pub name: StageName,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub lambda_s: Option<f64>,
    #[serde(default)]
    pub lambda_b: Option<f64>,
    #[serde(default)]
    pub lambda_t: Option<f64>,
    #[serde(default)]
    pub lambda_dist: Option<f64>,
    #[serde(default)]
    pub dist_mode: Option<DistMode>,
}

impl StageOverride {
    pub fn new(name: StageName) -> Self {
        StageOverride {
            name,
            epochs: None,
            steps_per_epoch: None,
            learning_rate: None,
            lambda_s: None,
            lambda_b: None,
            lambda_t: None,
            lambda_dist: None,
            dist_mode: None,
        }
    }
}

/// Loss weights as used by the stage presets: a stage enables a subset of
/// the branches and takes their weights from here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub recon_variant: ReconVariant,
    /// Distillation used in the final stage.
    pub dist_mode: DistMode,
    pub lambda_s: f64,
    pub lambda_b: f64,
    pub lambda_t: f64,
    /// Defaults to 0.1 for disparity and 0.005 for feature distillation.
    pub lambda_dist: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.85,
            recon_variant: ReconVariant::UpsampleFull,
            dist_mode: DistMode::Disparity,
            lambda_s: 1.0,
            lambda_b: 0.1,
            lambda_t: 1.0,
            lambda_dist: None,
        }
    }
}

impl LossConfig {
    pub fn lambda_dist_for(&self, mode: DistMode) -> f64 {
        match (self.lambda_dist, mode) {
            (_, DistMode::None) => 0.0,
            (Some(v), _) => v,
            (None, DistMode::Disparity) => 0.1,
            (None, DistMode::Feature) => 0.005,
        }
    }

    /// Weights with the given branches switched on.
    pub fn weights(&self, student: bool, backward: bool, teacher: bool, dist: DistMode) -> LossWeights {
        let on = |flag: bool, v: f64| if flag { v } else { 0.0 };
        LossWeights {
            lambda_s: on(student, self.lambda_s),
            lambda_b: on(backward, self.lambda_b),
            lambda_t: on(teacher, self.lambda_t),
            alpha: self.alpha,
            lambda_dist: self.lambda_dist_for(dist),
            dist_mode: dist,
            recon_variant: self.recon_variant,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub cap_meters: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            cap_meters: DEFAULT_CAP_METERS,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.count < 2 {
            return Err(Error::Config("data.count must be at least 2".into()));
        }
        if !(self.data.fb() > 0.0) {
            return Err(Error::Config("data.fb must be positive".into()));
        }
        self.network.validate(d.height, d.width)?;
        self.optimizer.validate()?;
        self.loss.weights(true, true, true, self.loss.dist_mode).validate()?;
        let s = &self.schedule;
        if !(s.scale_factor >= 0.0 && s.scale_factor.is_finite()) {
            return Err(Error::Config("schedule.scale_factor must be a non-negative number".into()));
        }
        if s.steps_per_epoch == 0 || s.batch_size == 0 {
            return Err(Error::Config("steps_per_epoch and batch_size must be positive".into()));
        }
        for (i, o) in s.stages.iter().enumerate() {
            if s.stages[..i].iter().any(|p| p.name == o.name) {
                return Err(Error::Config(format!("stage `{}` overridden twice", o.name.as_str())));
            }
            if o.learning_rate.is_some_and(|lr| !(lr > 0.0)) {
                return Err(Error::Config("stage learning_rate must be positive".into()));
            }
        }
        if !(self.eval.cap_meters > crate::metrics::MIN_DEPTH) {
            return Err(Error::Config("eval.cap_meters must exceed the minimum depth".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_recipe_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c.optimizer.learning_rate, 1e-5);
        assert_eq!(c.schedule.batch_size, 8);
        assert_eq!(c.loss.alpha, 0.85);
        assert_eq!(c.eval.cap_meters, 80.0);
        assert_eq!(c.loss.lambda_dist_for(DistMode::Disparity), 0.1);
        assert_eq!(c.loss.lambda_dist_for(DistMode::Feature), 0.005);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"optimizer": {"lr": 1e-4, "momentum": 0.9}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"schedule": {"stages": [{"name": "half_cycle", "x": 1}]}}"#).is_err());
    }

    #[test]
    fn malformed_json_reports_position() {
        match RunConfig::from_json("{\n  \"data\": {,}\n}") {
            Err(Error::Config(msg)) => assert!(msg.contains("line 2"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overrides_parse() {
        let c = RunConfig::from_json(
            r#"{"schedule": {"stages": [{"name": "half_cycle", "epochs": 2, "learning_rate": 1e-4}]}}"#,
        )
        .unwrap();
        assert_eq!(c.schedule.stages[0].name, StageName::HalfCycle);
        assert_eq!(c.schedule.stages[0].epochs, Some(2));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(
            RunConfig::from_json(r#"{"data": {"width": 60}}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_json(r#"{"optimizer": {"lr": -1}}"#),
            Err(Error::Config(_))
        ));
    }
}
