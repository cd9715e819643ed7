//! The cycle forward pass, staged training and evaluation.

mod cycle;
mod eval;
mod stage;

pub use cycle::{cycle_forward, cycle_forward_parts, CycleOutputs, CycleParts};
pub use eval::{evaluate, predict_disparity, DisparityPredictor, OraclePredictor, Which, MIN_DISPARITY};
pub use stage::{
    assemble_batch, check_order, objective, parts_for, run_stage, BatchStream, StageConfig, StageLog, StageName,
    StepRecord,
};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::StereoSample;
use crate::error::{Error, Result};
use crate::networks::{NetworkBundle, NetworkConfig};

/// `meta` object stored in checkpoint manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CheckpointMeta {
    Model {
        network: NetworkConfig,
        height: usize,
        width: usize,
        completed: Vec<StageName>,
    },
    /// No parameters; evaluation answers with ground truth.
    Oracle,
}

pub enum LoadedModel {
    Bundle {
        bundle: NetworkBundle<f32>,
        completed: Vec<StageName>,
    },
    Oracle,
}

/// `stage-<k>-<name>.ckpt`, with `k` counted from 1.
pub fn checkpoint_name(stage: StageName) -> String {
    format!("stage-{}-{}.ckpt", stage.index() + 1, stage.as_str())
}

pub fn save_bundle(bundle: &NetworkBundle<f32>, completed: &[StageName], path: &Path) -> Result<()> {
    let meta = CheckpointMeta::Model {
        network: bundle.config,
        height: bundle.height,
        width: bundle.width,
        completed: completed.to_vec(),
    };
    checkpoint::save(&bundle.params, serde_json::to_value(meta)?, path)
}

pub fn save_oracle(path: &Path) -> Result<()> {
    let empty = crate::param::ParamStore::<f32>::new();
    checkpoint::save(&empty, serde_json::to_value(CheckpointMeta::Oracle)?, path)
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let (manifest, blob) = checkpoint::read(path)?;
    let meta: CheckpointMeta = serde_json::from_value(manifest.meta.clone())
        .map_err(|e| Error::Checkpoint(format!("{}: bad meta: {e}", path.display())))?;
    match meta {
        CheckpointMeta::Oracle => Ok(LoadedModel::Oracle),
        CheckpointMeta::Model {
            network,
            height,
            width,
            completed,
        } => {
            let mut bundle = NetworkBundle::new(network, height, width)?;
            checkpoint::load_into(&mut bundle.params, &manifest, &blob)?;
            Ok(LoadedModel::Bundle { bundle, completed })
        }
    }
}

/// Presets for all five stages with the config's overrides applied.
pub fn stage_configs(cfg: &RunConfig) -> Vec<StageConfig> {
    StageName::SCHEDULE
        .iter()
        .map(|&n| StageConfig::preset(n, &cfg.loss, &cfg.schedule, &cfg.optimizer))
        .collect()
}

/// Runs every stage not yet in `completed`, in schedule order. When
/// `out_dir` is given, a checkpoint is written after each stage.
#[allow(clippy::too_many_arguments)]
pub fn run_schedule(
    cfg: &RunConfig,
    data: &[StereoSample],
    bundle: &mut NetworkBundle<f32>,
    completed: &mut Vec<StageName>,
    until: Option<StageName>,
    out_dir: Option<&Path>,
    on_step: &mut dyn FnMut(&StepRecord),
    after_stage: &mut dyn FnMut(StageName, &NetworkBundle<f32>) -> Result<()>,
) -> Result<Vec<StageLog>> {
    let mut logs = Vec::new();
    for stage in stage_configs(cfg) {
        if completed.contains(&stage.name) {
            continue;
        }
        let log = run_stage(&stage, data, bundle, completed, cfg.schedule.seed, on_step)?;
        completed.push(stage.name);
        logs.push(log);
        if let Some(dir) = out_dir {
            let path: PathBuf = dir.join(checkpoint_name(stage.name));
            save_bundle(bundle, completed, &path).map_err(|e| {
                let done: Vec<&str> = completed.iter().map(|s| s.as_str()).collect();
                Error::Checkpoint(format!("{e}; completed stages: [{}]", done.join(", ")))
            })?;
        }
        after_stage(stage.name, bundle)?;
        if until == Some(stage.name) {
            break;
        }
    }
    Ok(logs)
}

/// All five stages from the bundle's current state.
pub fn run_full_schedule(
    cfg: &RunConfig,
    data: &[StereoSample],
    bundle: &mut NetworkBundle<f32>,
    out_dir: Option<&Path>,
    on_step: &mut dyn FnMut(&StepRecord),
    after_stage: &mut dyn FnMut(StageName, &NetworkBundle<f32>) -> Result<()>,
) -> Result<Vec<StageLog>> {
    let mut completed = Vec::new();
    run_schedule(cfg, data, bundle, &mut completed, None, out_dir, on_step, after_stage)
}
