use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cycle::{cycle_forward_parts, CycleParts};
use crate::autodiff::{Graph, Var};
use crate::config::{LossConfig, ScheduleConfig};
use crate::data::{augment_flip, StereoSample};
use crate::error::{Error, Result};
use crate::losses::{self, DistMode, LossBreakdown, LossWeights};
use crate::networks::{CycleNetworks, NetworkBundle, ParamGroup};
use crate::optim::{adam_step, OptimizerConfig};
use crate::param::ParamId;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    HalfCycle,
    BackwardDecoder,
    JointCycle,
    TeacherPretrain,
    JointFinetune,
}

impl StageName {
    /// Training order.
    pub const SCHEDULE: [StageName; 5] = [
        StageName::HalfCycle,
        StageName::BackwardDecoder,
        StageName::JointCycle,
        StageName::TeacherPretrain,
        StageName::JointFinetune,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::HalfCycle => "half_cycle",
            StageName::BackwardDecoder => "backward_decoder",
            StageName::JointCycle => "joint_cycle",
            StageName::TeacherPretrain => "teacher_pretrain",
            StageName::JointFinetune => "joint_finetune",
        }
    }

    /// Position in [`StageName::SCHEDULE`], from 0.
    pub fn index(self) -> usize {
        Self::SCHEDULE.iter().position(|&s| s == self).expect("listed")
    }

    pub fn predecessor(self) -> Option<StageName> {
        self.index().checked_sub(1).map(|i| Self::SCHEDULE[i])
    }

    pub fn default_epochs(self) -> usize {
        match self {
            StageName::BackwardDecoder | StageName::TeacherPretrain => 5,
            _ => 10,
        }
    }

    pub fn trainable(self) -> Vec<ParamGroup> {
        use ParamGroup::*;
        match self {
            StageName::HalfCycle => vec![EncoderShared, DecoderS],
            StageName::BackwardDecoder => vec![DecoderB],
            StageName::JointCycle => vec![EncoderShared, DecoderS, DecoderB],
            StageName::TeacherPretrain => vec![EncoderI, DecoderI],
            StageName::JointFinetune => ParamGroup::ALL.to_vec(),
        }
    }

    pub fn weights(self, loss: &LossConfig) -> LossWeights {
        match self {
            StageName::HalfCycle => loss.weights(true, false, false, DistMode::None),
            StageName::BackwardDecoder => loss.weights(false, true, false, DistMode::None),
            StageName::JointCycle => loss.weights(true, true, false, DistMode::None),
            StageName::TeacherPretrain => loss.weights(false, false, true, DistMode::None),
            StageName::JointFinetune => loss.weights(true, true, true, loss.dist_mode),
        }
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::SCHEDULE
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub name: StageName,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Total optimizer steps after scaling.
    pub steps: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub trainable: Vec<ParamGroup>,
    pub optimizer: OptimizerConfig,
}

impl StageConfig {
    /// The stage's preset with any matching override from `schedule` applied.
    pub fn preset(
        name: StageName,
        loss: &LossConfig,
        schedule: &ScheduleConfig,
        optimizer: &OptimizerConfig,
    ) -> Self {
        let mut weights = name.weights(loss);
        let mut optimizer = *optimizer;
        let mut epochs = name.default_epochs();
        let mut steps_per_epoch = schedule.steps_per_epoch;
        if let Some(o) = schedule.stages.iter().find(|o| o.name == name) {
            epochs = o.epochs.unwrap_or(epochs);
            steps_per_epoch = o.steps_per_epoch.unwrap_or(steps_per_epoch);
            if let Some(lr) = o.learning_rate {
                optimizer.learning_rate = lr;
            }
            if let Some(mode) = o.dist_mode {
                weights.dist_mode = mode;
                weights.lambda_dist = loss.lambda_dist_for(mode);
            }
            weights.lambda_s = o.lambda_s.unwrap_or(weights.lambda_s);
            weights.lambda_b = o.lambda_b.unwrap_or(weights.lambda_b);
            weights.lambda_t = o.lambda_t.unwrap_or(weights.lambda_t);
            weights.lambda_dist = o.lambda_dist.unwrap_or(weights.lambda_dist);
        }
        let steps = (epochs as f64 * steps_per_epoch as f64 * schedule.scale_factor).round() as usize;
        StageConfig {
            name,
            epochs,
            steps_per_epoch,
            steps,
            batch_size: schedule.batch_size,
            weights,
            trainable: name.trainable(),
            optimizer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trainable.is_empty() {
            return Err(Error::Config(format!("stage {} trains nothing", self.name)));
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("batch size and steps per epoch must be positive".into()));
        }
        self.weights.validate()?;
        self.optimizer.validate()
    }

    fn epoch_of(&self, step: usize) -> usize {
        if self.steps == 0 {
            0
        } else {
            step * self.epochs / self.steps
        }
    }
}

/// Branches a set of weights needs.
pub fn parts_for(weights: &LossWeights) -> CycleParts {
    let teacher = weights.lambda_t > 0.0 || weights.effective_dist_weight() > 0.0;
    CycleParts {
        backward: teacher || weights.lambda_b > 0.0,
        teacher,
    }
}

/// Builds the full objective on `g` and reads out its breakdown.
pub fn objective<T: Real, N: CycleNetworks<T> + ?Sized>(
    g: &mut Graph<T>,
    nets: &N,
    left: Var,
    right: Var,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let cycle = cycle_forward_parts(g, nets, right, parts_for(weights))?;
    let rec = losses::reconstruction_loss(g, &cycle, left, right, weights)?;
    let dist = if weights.effective_dist_weight() > 0.0 {
        let teacher = cycle.teacher.as_ref().ok_or(Error::MissingBranch("teacher"))?;
        Some(match weights.dist_mode {
            DistMode::Disparity => losses::disparity_distillation_loss(
                g,
                &cycle.student.disparities[0],
                &teacher.disparities[0],
            )?,
            DistMode::Feature => losses::feature_distillation_loss(g, &cycle.student.features, &teacher.features)?,
            DistMode::None => unreachable!("zero effective weight"),
        })
    } else {
        None
    };
    let total = losses::total_loss(g, rec.total, dist, weights)?;
    let bd = losses::breakdown(g, &rec, dist, total)?;
    Ok((total, bd))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: StageName,
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub rec_s: f64,
    pub rec_b: f64,
    pub rec_t: f64,
    pub dist: f64,
    pub wall_ms: u64,
}

impl StepRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain record")
    }

    /// Equality ignoring wall-clock time.
    pub fn same_values(&self, other: &StepRecord) -> bool {
        let strip = |r: &StepRecord| StepRecord { wall_ms: 0, ..r.clone() };
        strip(self) == strip(other)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageLog {
    pub stage: StageName,
    pub records: Vec<StepRecord>,
}

/// Seeded endless stream of fixed-size batches: each pass over the data is a
/// fresh permutation, and a trailing partial batch is dropped.
pub struct BatchStream {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchStream {
    pub fn new(len: usize, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 || len < batch {
            return Err(Error::invalid(
                "batch stream",
                format!("{len} samples cannot fill a batch of {batch}"),
            ));
        }
        Ok(BatchStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..len).collect(),
            pos: len,
            batch,
        })
    }

    /// Next batch as `(sample index, flip)` pairs.
    pub fn next_batch(&mut self) -> Vec<(usize, bool)> {
        if self.pos + self.batch > self.order.len() {
            self.order.sort_unstable();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let idx = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        idx.into_iter().map(|i| (i, self.rng.gen_bool(0.5))).collect()
    }
}

fn stage_seed(seed: u64, stage: StageName) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (stage.index() as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Checks that every stage before `stage` is in `completed`.
pub fn check_order(stage: StageName, completed: &[StageName]) -> Result<()> {
    for &prev in &StageName::SCHEDULE[..stage.index()] {
        if !completed.contains(&prev) {
            return Err(Error::StageOrder {
                stage: stage.as_str(),
                missing: prev.as_str(),
            });
        }
    }
    Ok(())
}

/// Stacks a batch of (optionally flipped) samples into `(left, right)`.
pub fn assemble_batch<T: Real>(data: &[StereoSample], picks: &[(usize, bool)]) -> Result<(Tensor<T>, Tensor<T>)> {
    let samples: Vec<StereoSample> = picks.iter().map(|&(i, f)| augment_flip(&data[i], f)).collect();
    let lefts: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.left).collect();
    let rights: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.right).collect();
    Ok((Tensor::stack(&lefts)?.cast(), Tensor::stack(&rights)?.cast()))
}

/// Trains the stage's groups for `stage.steps` steps. Groups outside
/// `stage.trainable` are left untouched; Adam moments restart at zero.
pub fn run_stage<T: Real>(
    stage: &StageConfig,
    data: &[StereoSample],
    bundle: &mut NetworkBundle<T>,
    completed: &[StageName],
    seed: u64,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<StageLog> {
    stage.validate()?;
    check_order(stage.name, completed)?;
    let mut records = Vec::with_capacity(stage.steps);
    if stage.steps == 0 {
        return Ok(StageLog {
            stage: stage.name,
            records,
        });
    }
    let mut stream = BatchStream::new(data.len(), stage.batch_size, stage_seed(seed, stage.name))?;
    bundle.set_trainable(&stage.trainable);
    bundle.params.zero_grad();
    let ids: Vec<ParamId> = stage
        .trainable
        .iter()
        .flat_map(|&grp| bundle.group_ids(grp))
        .collect();
    for &id in &ids {
        bundle.params.get_mut(id).reset_adam();
    }
    let started = Instant::now();
    for step in 0..stage.steps {
        let (left, right) = assemble_batch::<T>(data, &stream.next_batch())?;
        let mut g = Graph::new();
        let l = g.input(left, false);
        let r = g.input(right, false);
        let (total, bd) = objective(&mut g, &*bundle, l, r, &stage.weights).map_err(|e| match e {
            // NaN activations surface as an invalid disparity inside the warp.
            Error::NegativeDisparity { value, .. } if value.is_nan() => Error::NonFinite {
                what: format!("{} forward pass", stage.name),
                step,
            },
            other => other,
        })?;
        if !bd.is_finite() {
            return Err(Error::NonFinite {
                what: format!("{} loss", stage.name),
                step,
            });
        }
        g.backward(total, &mut bundle.params)?;
        adam_step(&mut bundle.params, &ids, &stage.optimizer);
        let rec = StepRecord {
            stage: stage.name,
            epoch: stage.epoch_of(step),
            step,
            total: bd.total,
            rec_s: bd.rec_per_network[0],
            rec_b: bd.rec_per_network[1],
            rec_t: bd.rec_per_network[2],
            dist: bd.dist,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        on_step(&rec);
        records.push(rec);
    }
    Ok(StageLog {
        stage: stage.name,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_order_and_predecessors() {
        assert_eq!(
            StageName::SCHEDULE.map(|s| s.as_str()),
            ["half_cycle", "backward_decoder", "joint_cycle", "teacher_pretrain", "joint_finetune"]
        );
        assert_eq!(StageName::HalfCycle.predecessor(), None);
        assert_eq!(StageName::JointFinetune.predecessor(), Some(StageName::TeacherPretrain));
        assert_eq!("joint_cycle".parse::<StageName>().unwrap(), StageName::JointCycle);
        assert!("warmup".parse::<StageName>().is_err());
    }

    #[test]
    fn out_of_order_stage_names_first_missing_predecessor() {
        match check_order(StageName::TeacherPretrain, &[StageName::HalfCycle]) {
            Err(Error::StageOrder { missing, .. }) => assert_eq!(missing, "backward_decoder"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(check_order(StageName::HalfCycle, &[]).is_ok());
    }

    #[test]
    fn presets_follow_the_recipe() {
        let loss = LossConfig::default();
        let sched = ScheduleConfig::default();
        let opt = OptimizerConfig::default();
        let p = |n| StageConfig::preset(n, &loss, &sched, &opt);
        let hc = p(StageName::HalfCycle);
        assert_eq!((hc.epochs, hc.weights.lambda_s, hc.weights.lambda_b, hc.weights.lambda_t), (10, 1.0, 0.0, 0.0));
        let bd = p(StageName::BackwardDecoder);
        assert_eq!((bd.epochs, bd.weights.lambda_b), (5, 0.1));
        assert_eq!(bd.trainable, vec![ParamGroup::DecoderB]);
        let jc = p(StageName::JointCycle);
        assert_eq!((jc.weights.lambda_s, jc.weights.lambda_b, jc.weights.lambda_t), (1.0, 0.1, 0.0));
        let tp = p(StageName::TeacherPretrain);
        assert_eq!((tp.epochs, tp.weights.lambda_s, tp.weights.lambda_b, tp.weights.lambda_t), (5, 0.0, 0.0, 1.0));
        let jf = p(StageName::JointFinetune);
        assert_eq!((jf.weights.lambda_t, jf.weights.lambda_dist), (1.0, 0.1));
        assert_eq!(jf.trainable.len(), 5);
        let feat = LossConfig {
            dist_mode: DistMode::Feature,
            ..LossConfig::default()
        };
        assert_eq!(StageName::JointFinetune.weights(&feat).lambda_dist, 0.005);
    }

    #[test]
    fn scale_factor_scales_steps() {
        let sched = ScheduleConfig {
            scale_factor: 0.1,
            ..ScheduleConfig::default()
        };
        let s = StageConfig::preset(
            StageName::HalfCycle,
            &LossConfig::default(),
            &sched,
            &OptimizerConfig::default(),
        );
        assert_eq!(s.steps, 50);
        assert_eq!(s.epoch_of(49), 9);
    }

    #[test]
    fn batch_stream_is_seeded_and_drops_partial_batches() {
        let mut a = BatchStream::new(10, 4, 5).unwrap();
        let mut b = BatchStream::new(10, 4, 5).unwrap();
        for _ in 0..6 {
            let x = a.next_batch();
            assert_eq!(x, b.next_batch());
            assert_eq!(x.len(), 4);
        }
        assert!(BatchStream::new(3, 4, 0).is_err());
    }
}
