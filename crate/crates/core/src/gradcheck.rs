//! Finite-difference verification of every differentiable operation.
//!
//! Each registered case builds a small `f64` graph from random leaves and
//! projects its output onto a fixed random tensor, giving a scalar whose
//! analytic input gradients are compared with central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::losses::{self, DistMode, LossWeights, ReconVariant};
use crate::networks::{CycleNetworks, ForwardOutputs};
use crate::param::ParamStore;
use crate::pipeline::{cycle_forward, CycleOutputs};
use crate::tensor::{Shape, Tensor};
use crate::warp::{self, DisparityMap, Frame, WarpDirection};

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Coordinates whose finite difference is below this are not compared.
pub const FD_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
enum Dist {
    Signed,
    Unit,
    Disparity,
    AwayFromZero,
}

struct Leaf {
    shape: Shape,
    dist: Dist,
    /// Sits behind a stop-gradient: the analytic gradient must be exactly 0.
    frozen: bool,
}

fn leaf(n: usize, c: usize, h: usize, w: usize, dist: Dist) -> Leaf {
    Leaf {
        shape: Shape::new(n, c, h, w),
        dist,
        frozen: false,
    }
}

fn frozen(mut l: Leaf) -> Leaf {
    l.frozen = true;
    l
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub module: &'static str,
    leaves: Vec<Leaf>,
    build: Build,
    /// Upper bound on coordinates checked per leaf; `None` checks all.
    sample: Option<usize>,
}

fn case(
    module: &'static str,
    name: &'static str,
    leaves: Vec<Leaf>,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        module,
        leaves,
        build: Box::new(build),
        sample: None,
    }
}

fn left(v: Var, scale: usize) -> DisparityMap {
    DisparityMap::new(v, Frame::Left, scale)
}

/// Network stand-in whose outputs are graph leaves.
struct FixedNets {
    student: ForwardOutputs,
    backward: ForwardOutputs,
    teacher: ForwardOutputs,
}

impl CycleNetworks<f64> for FixedNets {
    fn student_forward(&self, _: &mut Graph<f64>, _: Var) -> Result<ForwardOutputs> {
        Ok(self.student.clone())
    }

    fn backward_forward(&self, _: &mut Graph<f64>, _: Var) -> Result<ForwardOutputs> {
        Ok(self.backward.clone())
    }

    fn inconsistency_forward(
        &self,
        _: &mut Graph<f64>,
        _: Var,
        _: Var,
        _: &DisparityMap,
        _: &[DisparityMap; 3],
    ) -> Result<ForwardOutputs> {
        Ok(self.teacher.clone())
    }
}

/// Leaves: left, right, then 4 disparity scales for each of student,
/// backward and teacher.
fn cycle_leaves(size: usize) -> Vec<Leaf> {
    let mut v = vec![leaf(1, 3, size, size, Dist::Unit), leaf(1, 3, size, size, Dist::Unit)];
    for _ in 0..3 {
        for n in 0..4 {
            v.push(leaf(1, 1, size >> n, size >> n, Dist::Disparity));
        }
    }
    v
}

fn fixed_cycle(g: &mut Graph<f64>, x: &[Var]) -> Result<CycleOutputs> {
    let feats = [x[0], x[0], x[0]];
    let outputs = |base: usize, frame: Frame| ForwardOutputs {
        disparities: [0, 1, 2, 3].map(|n| DisparityMap::new(x[base + n], frame, n)),
        features: feats,
    };
    let nets = FixedNets {
        student: outputs(2, Frame::Left),
        backward: outputs(6, Frame::Right),
        teacher: outputs(10, Frame::Left),
    };
    cycle_forward(g, &nets, x[1], true)
}

fn recon_weights(variant: ReconVariant) -> LossWeights {
    LossWeights {
        lambda_s: 1.0,
        lambda_b: 0.1,
        lambda_t: 1.0,
        alpha: 0.85,
        lambda_dist: 0.0,
        dist_mode: DistMode::None,
        recon_variant: variant,
    }
}

/// Every registered case, in table order.
pub fn registry() -> Vec<Case> {
    use Dist::*;
    let mut cases = vec![
        case("tensor_autodiff", "conv2d", vec![leaf(2, 2, 5, 6, Signed), leaf(3, 2, 3, 3, Signed), leaf(1, 3, 1, 1, Signed)], |g, x| {
            g.conv2d(x[0], x[1], Some(x[2]), 1, 1)
        }),
        case("tensor_autodiff", "conv2d_stride2", vec![leaf(1, 2, 6, 6, Signed), leaf(2, 2, 3, 3, Signed), leaf(1, 2, 1, 1, Signed)], |g, x| {
            g.conv2d(x[0], x[1], Some(x[2]), 2, 1)
        }),
        case("tensor_autodiff", "upsample_nearest", vec![leaf(1, 2, 2, 3, Signed)], |g, x| g.upsample_nearest(x[0], 2)),
        case("tensor_autodiff", "area_downsample", vec![leaf(1, 2, 4, 6, Signed)], |g, x| g.area_downsample(x[0])),
        case("tensor_autodiff", "add", vec![leaf(1, 2, 3, 3, Signed), leaf(1, 2, 3, 3, Signed)], |g, x| g.add(x[0], x[1])),
        case("tensor_autodiff", "sub", vec![leaf(1, 2, 3, 3, Signed), leaf(1, 2, 3, 3, Signed)], |g, x| g.sub(x[0], x[1])),
        case("tensor_autodiff", "mul", vec![leaf(1, 2, 3, 3, Signed), leaf(1, 2, 3, 3, Signed)], |g, x| g.mul(x[0], x[1])),
        case("tensor_autodiff", "div", vec![leaf(1, 2, 3, 3, Signed), leaf(1, 2, 3, 3, AwayFromZero)], |g, x| g.div(x[0], x[1])),
        case("tensor_autodiff", "affine", vec![leaf(1, 2, 3, 3, Signed)], |g, x| Ok(g.affine(x[0], -1.7, 0.3))),
        case("tensor_autodiff", "scale", vec![leaf(1, 2, 3, 3, Signed)], |g, x| Ok(g.scale(x[0], 2.5))),
        case("tensor_autodiff", "sigmoid", vec![leaf(1, 2, 3, 3, Signed)], |g, x| Ok(g.sigmoid(x[0]))),
        case("tensor_autodiff", "elu", vec![leaf(1, 2, 3, 3, Signed)], |g, x| Ok(g.elu(x[0]))),
        case("tensor_autodiff", "concat_channels", vec![leaf(1, 3, 3, 4, Signed), leaf(1, 1, 3, 4, Signed)], |g, x| {
            g.concat_channels(&[x[0], x[1]])
        }),
        case("tensor_autodiff", "avg_pool3x3", vec![leaf(1, 2, 5, 6, Signed)], |g, x| g.avg_pool3x3(x[0])),
        case("tensor_autodiff", "mean", vec![leaf(1, 2, 3, 3, Signed)], |g, x| g.mean(x[0])),
        case("tensor_autodiff", "mean_abs", vec![leaf(1, 2, 3, 3, Signed)], |g, x| g.mean_abs(x[0])),
        case("tensor_autodiff", "mean_sq", vec![leaf(1, 2, 3, 3, Signed)], |g, x| g.mean_sq(x[0])),
        case("tensor_autodiff", "stop_gradient", vec![leaf(1, 2, 3, 3, Signed), frozen(leaf(1, 2, 3, 3, Signed))], |g, x| {
            let s = g.stop_gradient(x[1]);
            let d = g.sub(x[0], s)?;
            g.mean_sq(d)
        }),
        case("tensor_autodiff", "sample_rows", vec![leaf(1, 2, 3, 7, Signed), leaf(1, 1, 3, 7, Disparity)], |g, x| {
            g.sample_rows(x[0], x[1], -1.0)
        }),
        case("warp", "warp_synthesize_left", vec![leaf(2, 3, 3, 8, Signed), leaf(2, 1, 3, 8, Disparity)], |g, x| {
            warp::warp(g, &left(x[1], 0), x[0], WarpDirection::SynthesizeLeft)
        }),
        case("warp", "warp_synthesize_right", vec![leaf(1, 3, 3, 8, Signed), leaf(1, 1, 3, 8, Disparity)], |g, x| {
            let d = DisparityMap::new(x[1], Frame::Right, 0);
            warp::warp(g, &d, x[0], WarpDirection::SynthesizeRight)
        }),
        case("warp", "warp_low_scale", vec![leaf(1, 2, 2, 4, Signed), leaf(1, 1, 2, 4, Disparity)], |g, x| {
            warp::warp(g, &left(x[1], 1), x[0], WarpDirection::SynthesizeLeft)
        }),
        case("warp", "upsample_disparity_full", vec![leaf(1, 1, 2, 3, Disparity)], |g, x| {
            Ok(warp::upsample_disparity_full(g, &left(x[0], 2))?.var)
        }),
        case("losses", "ssim_loss", vec![leaf(1, 3, 5, 6, Unit), leaf(1, 3, 5, 6, Unit)], |g, x| losses::ssim_loss(g, x[0], x[1])),
        case("losses", "appearance_loss", vec![leaf(1, 3, 5, 6, Unit), leaf(1, 3, 5, 6, Unit)], |g, x| {
            losses::appearance_loss(g, x[0], x[1], 0.85)
        }),
        case("losses", "disparity_distillation_loss", vec![leaf(1, 1, 4, 5, Disparity), frozen(leaf(1, 1, 4, 5, Disparity))], |g, x| {
            losses::disparity_distillation_loss(g, &left(x[0], 0), &left(x[1], 0))
        }),
        case(
            "losses",
            "feature_distillation_loss",
            vec![
                leaf(1, 2, 4, 4, Signed),
                leaf(1, 2, 2, 2, Signed),
                frozen(leaf(1, 2, 4, 4, Signed)),
                frozen(leaf(1, 2, 2, 2, Signed)),
            ],
            |g, x| losses::feature_distillation_loss(g, &[x[0], x[1]], &[x[2], x[3]]),
        ),
        case("losses", "total_loss", vec![leaf(1, 1, 3, 3, Signed), leaf(1, 1, 3, 3, Signed)], |g, x| {
            let rec = g.mean_sq(x[0])?;
            let dist = g.mean_abs(x[1])?;
            let w = LossWeights {
                lambda_dist: 0.1,
                dist_mode: DistMode::Disparity,
                ..LossWeights::default()
            };
            losses::total_loss(g, rec, Some(dist), &w)
        }),
    ];
    let mut full = case("losses", "reconstruction_loss_upsample_full", cycle_leaves(8), |g, x| {
        let cycle = fixed_cycle(g, x)?;
        Ok(losses::reconstruction_loss(g, &cycle, x[0], x[1], &recon_weights(ReconVariant::UpsampleFull))?.total)
    });
    full.sample = Some(24);
    let mut legacy = case("losses", "reconstruction_loss_downsampled_compare", cycle_leaves(24), |g, x| {
        let cycle = fixed_cycle(g, x)?;
        Ok(losses::reconstruction_loss(g, &cycle, x[0], x[1], &recon_weights(ReconVariant::DownsampledCompare))?.total)
    });
    legacy.sample = Some(24);
    cases.push(full);
    cases.push(legacy);
    cases
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseResult {
    pub module: &'static str,
    pub name: &'static str,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn draw(rng: &mut ChaCha8Rng, shape: Shape, dist: Dist) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| match dist {
        Dist::Signed => rng.gen_range(-1.0..1.0),
        Dist::Unit => rng.gen_range(0.05..0.95),
        Dist::Disparity => rng.gen_range(0.1..2.9),
        Dist::AwayFromZero => {
            let m = rng.gen_range(0.5..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        }
    })
}

/// Scalar objective: the case output itself when scalar, otherwise its
/// mean against the projection tensor.
fn objective(g: &mut Graph<f64>, out: Var, proj: Option<&Tensor<f64>>) -> Result<Var> {
    match proj {
        None => Ok(out),
        Some(p) => {
            let pv = g.constant(p.clone());
            let m = g.mul(out, pv)?;
            g.mean(m)
        }
    }
}

fn forward(case: &Case, values: &[Tensor<f64>], proj: Option<&Tensor<f64>>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = values.iter().map(|v| g.input(v.clone(), false)).collect();
    let out = (case.build)(&mut g, &vars)?;
    let loss = objective(&mut g, out, proj)?;
    g.scalar_value(loss)
}

/// Checks one case. `corrupt_factor` scales the analytic gradient, which
/// lets tests confirm the harness catches a wrong backward pass.
pub fn check_case(case: &Case, seed: u64, corrupt_factor: f64) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv(case.name));
    let values: Vec<Tensor<f64>> = case.leaves.iter().map(|l| draw(&mut rng, l.shape, l.dist)).collect();

    let mut g = Graph::new();
    let vars: Vec<Var> = values.iter().map(|v| g.input(v.clone(), true)).collect();
    let out = (case.build)(&mut g, &vars)?;
    let proj = if g.shape(out).is_scalar() {
        None
    } else {
        Some(draw(&mut rng, g.shape(out), Dist::Signed))
    };
    let loss = objective(&mut g, out, proj.as_ref())?;
    g.backward_inputs(loss)?;

    let mut coordinates = 0;
    let mut max_rel_err: f64 = 0.0;
    let mut passed = true;
    for (li, l) in case.leaves.iter().enumerate() {
        let n = l.shape.numel();
        let analytic: Vec<f64> = match g.grad(vars[li]) {
            Some(gr) => gr.iter().map(|v| v * corrupt_factor).collect(),
            None => vec![0.0; n],
        };
        if l.frozen {
            coordinates += n;
            if analytic.iter().any(|v| v.to_bits() != 0) {
                passed = false;
                max_rel_err = f64::INFINITY;
            }
            continue;
        }
        let coords: Vec<usize> = match case.sample {
            Some(k) if k < n => (0..k).map(|_| rng.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let mut vals = values.clone();
            let x0 = vals[li].data()[i];
            vals[li].data_mut()[i] = x0 + STEP;
            let fp = forward(case, &vals, proj.as_ref())?;
            vals[li].data_mut()[i] = x0 - STEP;
            let fm = forward(case, &vals, proj.as_ref())?;
            let fd = (fp - fm) / (2.0 * STEP);
            coordinates += 1;
            if fd.abs() <= FD_FLOOR {
                continue;
            }
            let a = analytic[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs());
            max_rel_err = max_rel_err.max(rel);
            if !(rel < REL_TOL) {
                passed = false;
            }
        }
    }
    Ok(CaseResult {
        module: case.module,
        name: case.name,
        coordinates,
        max_rel_err,
        passed,
    })
}

/// Runs the whole registry. `corrupt` names a case whose analytic gradient
/// is deliberately perturbed.
pub fn run_all(seed: u64, corrupt: Option<&str>) -> Result<Vec<CaseResult>> {
    registry()
        .iter()
        .map(|c| {
            let factor = if corrupt == Some(c.name) { 1.01 } else { 1.0 };
            check_case(c, seed, factor)
        })
        .collect()
}

/// Fixed-width table, one row per case.
pub fn format_table(results: &[CaseResult]) -> String {
    let mut s = format!("{:<16} {:<40} {:>7} {:>12}  result\n", "module", "op", "coords", "max_rel_err");
    for r in results {
        s.push_str(&format!(
            "{:<16} {:<40} {:>7} {:>12.3e}  {}\n",
            r.module,
            r.name,
            r.coordinates,
            r.max_rel_err,
            if r.passed { "PASS" } else { "FAIL" }
        ));
    }
    s
}

fn fnv(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Result of checking parameter gradients of a graph-building closure.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub coordinates: usize,
    pub max_rel_err: f64,
    /// `(parameter name, element index, analytic, finite difference)`.
    pub failures: Vec<(String, usize, f64, f64)>,
}

/// Compares analytic parameter gradients of `build`'s scalar output against
/// central differences with half-width `step` on up to `per_tensor` random
/// elements of every trainable parameter. A coordinate fails when the
/// relative error reaches `REL_TOL` and the absolute error exceeds
/// `FD_FLOOR`, so near-zero gradients are judged absolutely.
pub fn check_parameters(
    store: &mut ParamStore<f64>,
    per_tensor: usize,
    step: f64,
    seed: u64,
    build: &dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
) -> Result<ParamCheck> {
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    store.zero_grad();
    g.backward(loss, store)?;
    let grads: Vec<Option<Vec<f64>>> = store.iter().map(|p| p.grad.clone()).collect();
    store.zero_grad();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ParamCheck {
        coordinates: 0,
        max_rel_err: 0.0,
        failures: Vec::new(),
    };
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        if !store.get(id).trainable {
            continue;
        }
        let n = store.get(id).shape().numel();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        for i in picks {
            let x0 = store.get(id).value.data()[i];
            let eval = |v: f64, store: &mut ParamStore<f64>| -> Result<f64> {
                store.get_mut(id).value.data_mut()[i] = v;
                let mut g = Graph::new();
                let l = build(&mut g, store)?;
                g.scalar_value(l)
            };
            let fp = eval(x0 + step, store)?;
            let fm = eval(x0 - step, store)?;
            store.get_mut(id).value.data_mut()[i] = x0;
            let fd = (fp - fm) / (2.0 * step);
            out.coordinates += 1;
            if fd.abs() <= FD_FLOOR {
                continue;
            }
            let a = grads[pi].as_ref().map_or(0.0, |gr| gr[i]);
            let rel = (a - fd).abs() / a.abs().max(fd.abs());
            out.max_rel_err = out.max_rel_err.max(rel);
            if !(rel < REL_TOL) && !((a - fd).abs() <= FD_FLOOR) {
                out.failures.push((store.get(id).name.clone(), i, a, fd));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_gradient_is_caught() {
        let cases = registry();
        let c = cases.iter().find(|c| c.name == "elu").unwrap();
        assert!(check_case(c, 1, 1.0).unwrap().passed);
        assert!(!check_case(c, 1, 1.01).unwrap().passed);
    }

    #[test]
    fn registry_names_are_unique() {
        let cases = registry();
        for (i, c) in cases.iter().enumerate() {
            assert!(cases[..i].iter().all(|d| d.name != c.name), "{}", c.name);
        }
    }
}
