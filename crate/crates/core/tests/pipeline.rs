use cycledepth::config::{RunConfig, StageOverride};
use cycledepth::data::scene::{default_fb, generate_scene, make_dataset, SceneSpec};
use cycledepth::losses::{disparity_distillation_loss, feature_distillation_loss};
use cycledepth::networks::{CycleNetworks, ForwardOutputs};
use cycledepth::pipeline::{cycle_forward, run_full_schedule, run_stage, StageConfig, StageName};
use cycledepth::warp::{DisparityMap, Frame};
use cycledepth::{Graph, NetworkBundle, NetworkConfig, ParamGroup, Result, Shape, Tensor, Var};

const H: usize = 16;
const W: usize = 32;

/// Networks that ignore their input and emit one constant disparity.
struct ConstantNets {
    left: f64,
    right: f64,
}

fn constant_outputs(g: &mut Graph<f64>, d: f64, frame: Frame) -> ForwardOutputs {
    let disparities = [0, 1, 2, 3].map(|n| {
        let v = g.input(Tensor::full(Shape::new(1, 1, H >> n, W >> n), d), false);
        DisparityMap::new(v, frame, n)
    });
    let features = [0, 1, 2].map(|n| g.input(Tensor::zeros(Shape::new(1, 2, H >> n, W >> n)), false));
    ForwardOutputs { disparities, features }
}

impl CycleNetworks<f64> for ConstantNets {
    fn student_forward(&self, g: &mut Graph<f64>, _: Var) -> Result<ForwardOutputs> {
        Ok(constant_outputs(g, self.left, Frame::Left))
    }

    fn backward_forward(&self, g: &mut Graph<f64>, _: Var) -> Result<ForwardOutputs> {
        Ok(constant_outputs(g, self.right, Frame::Right))
    }

    fn inconsistency_forward(
        &self,
        g: &mut Graph<f64>,
        _: Var,
        _: Var,
        _: &DisparityMap,
        _: &[DisparityMap; 3],
    ) -> Result<ForwardOutputs> {
        Ok(constant_outputs(g, self.left, Frame::Left))
    }
}

fn flat_scene(d: f64) -> (Tensor<f64>, Tensor<f64>) {
    let s = generate_scene(&SceneSpec {
        width: W,
        height: H,
        background_disparity: d,
        layers: vec![],
        seed: 12,
        fb: default_fb(W),
    })
    .unwrap();
    (s.left.cast(), s.right.cast())
}

#[test]
fn cycle_without_teacher_still_computes_the_inconsistency() {
    let (_, right) = flat_scene(2.0);
    let mut g = Graph::new();
    let r = g.input(right, false);
    let out = cycle_forward(&mut g, &ConstantNets { left: 2.0, right: 2.0 }, r, false).unwrap();
    assert!(out.teacher.is_none() && out.left_hat_refined.is_none());
    let inc = g.value(out.inconsistency.unwrap());
    let (rv, rh) = (g.value(r), g.value(out.right_hat.unwrap()));
    for ((i, a), b) in inc.data().iter().zip(rv.data()).zip(rh.data()) {
        assert_eq!(*i, a - b);
    }
}

#[test]
fn zero_disparity_scene_closes_the_cycle_exactly() {
    let (left, right) = flat_scene(0.0);
    assert_eq!(left, right);
    let mut g = Graph::new();
    let r = g.input(right.clone(), false);
    let out = cycle_forward(&mut g, &ConstantNets { left: 0.0, right: 0.0 }, r, true).unwrap();
    assert_eq!(g.value(out.left_hat), &left);
    assert!(g.value(out.inconsistency.unwrap()).data().iter().all(|&v| v == 0.0));
}

/// With perfect constant-disparity stubs the cycle is exact except where
/// `Î_r` has to read `Î_l` beyond the right edge.
#[test]
fn constant_disparity_inconsistency_is_confined_to_the_border() {
    let d = 3usize;
    let (left, right) = flat_scene(d as f64);
    let mut g = Graph::new();
    let r = g.input(right, false);
    let out = cycle_forward(&mut g, &ConstantNets { left: d as f64, right: d as f64 }, r, false).unwrap();
    let left_hat = g.value(out.left_hat);
    let inc = g.value(out.inconsistency.unwrap());
    for c in 0..3 {
        for y in 0..H {
            for x in d..W {
                assert_eq!(left_hat.at(0, c, y, x), left.at(0, c, y, x));
            }
            for x in 0..W - d {
                assert_eq!(inc.at(0, c, y, x), 0.0, "c{c} ({x},{y})");
            }
        }
    }
}

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.width = W;
    cfg.data.height = H;
    cfg.network.base_channels = 2;
    cfg.optimizer.learning_rate = 1e-3;
    cfg.schedule.steps_per_epoch = 1;
    cfg.schedule.batch_size = 2;
    cfg
}

#[test]
fn a_stage_leaves_its_frozen_groups_untouched() {
    let cfg = tiny_config();
    let (data, _) = make_dataset(10, W, H, 2, default_fb(W)).unwrap();
    let mut bundle = NetworkBundle::<f32>::new(cfg.network, H, W).unwrap();
    let before = bundle.clone();
    let stage = StageConfig::preset(StageName::BackwardDecoder, &cfg.loss, &cfg.schedule, &cfg.optimizer);
    run_stage(&stage, &data, &mut bundle, &[StageName::HalfCycle], 0, &mut |_| {}).unwrap();
    for group in [ParamGroup::EncoderShared, ParamGroup::DecoderS, ParamGroup::EncoderI, ParamGroup::DecoderI] {
        for id in bundle.group_ids(group) {
            assert_eq!(bundle.params.get(id).value, before.params.get(id).value, "{}", bundle.params.get(id).name);
        }
    }
    let moved = bundle
        .group_ids(ParamGroup::DecoderB)
        .into_iter()
        .any(|id| bundle.params.get(id).value != before.params.get(id).value);
    assert!(moved, "decoder_b did not train");
}

#[test]
fn zero_epoch_schedule_keeps_the_initialization() {
    let mut cfg = tiny_config();
    cfg.schedule.stages = StageName::SCHEDULE
        .iter()
        .map(|&n| StageOverride {
            epochs: Some(0),
            ..StageOverride::new(n)
        })
        .collect();
    let (data, _) = make_dataset(10, W, H, 2, default_fb(W)).unwrap();
    let mut bundle = NetworkBundle::<f32>::new(cfg.network, H, W).unwrap();
    let init = bundle.clone();
    let logs = run_full_schedule(&cfg, &data, &mut bundle, None, &mut |_| {}, &mut |_, _| Ok(())).unwrap();
    assert_eq!(logs.len(), 5);
    assert!(logs.iter().all(|l| l.records.is_empty()));
    for (a, b) in bundle.params.iter().zip(init.params.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

fn refiner_gradients_from_distillation(feature: bool) -> Vec<(String, f64)> {
    let cfg = NetworkConfig {
        base_channels: 2,
        ..NetworkConfig::default()
    };
    let mut bundle = NetworkBundle::<f64>::new(cfg, H, W).unwrap();
    bundle.params.set_trainable(|_| true);
    let (_, right) = flat_scene(2.0);
    let mut g = Graph::new();
    let r = g.input(right, false);
    let out = cycle_forward(&mut g, &bundle, r, true).unwrap();
    let teacher = out.teacher.unwrap();
    let loss = if feature {
        feature_distillation_loss(&mut g, &out.student.features, &teacher.features).unwrap()
    } else {
        disparity_distillation_loss(&mut g, &out.student.disparities[0], &teacher.disparities[0]).unwrap()
    };
    assert!(g.value(loss).data()[0] > 0.0);
    bundle.params.zero_grad();
    g.backward(loss, &mut bundle.params).unwrap();
    let student_moved = bundle
        .group_ids(ParamGroup::DecoderS)
        .into_iter()
        .any(|id| bundle.params.get(id).grad.as_ref().is_some_and(|gr| gr.iter().any(|&v| v != 0.0)));
    assert!(student_moved);
    [ParamGroup::EncoderI, ParamGroup::DecoderI]
        .into_iter()
        .flat_map(|grp| bundle.group_ids(grp))
        .map(|id| {
            let p = bundle.params.get(id);
            let worst = p.grad.as_ref().map_or(0.0, |gr| gr.iter().fold(0.0f64, |m, v| m.max(v.abs())));
            (p.name.clone(), worst)
        })
        .collect()
}

#[test]
fn distillation_sends_no_gradient_into_the_refiner() {
    for feature in [false, true] {
        let grads = refiner_gradients_from_distillation(feature);
        assert!(!grads.is_empty());
        for (name, worst) in grads {
            assert_eq!(worst, 0.0, "{name} (feature mode: {feature})");
        }
    }
}
