//! Training objectives: SSIM + L1 appearance matching, the multi-scale
//! reconstruction loss over the three synthesis branches, and the two
//! self-distillation terms.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::pipeline::CycleOutputs;
use crate::tensor::Real;
use crate::warp::{self, DisparityMap, WarpDirection};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const NUM_SCALES: usize = 4;
pub const FEATURE_SCALES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistMode {
    Disparity,
    Feature,
    None,
}

/// How low-resolution disparities enter the reconstruction loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconVariant {
    /// Synthesize at scale `n` and compare against area-downsampled images.
    DownsampledCompare,
    /// Upsample every disparity to full resolution first; scales `n > 0`
    /// are compared with L1 only.
    UpsampleFull,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_b: f64,
    pub lambda_t: f64,
    pub alpha: f64,
    pub lambda_dist: f64,
    pub dist_mode: DistMode,
    pub recon_variant: ReconVariant,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_s: 1.0,
            lambda_b: 0.1,
            lambda_t: 0.0,
            alpha: 0.85,
            lambda_dist: 0.0,
            dist_mode: DistMode::None,
            recon_variant: ReconVariant::UpsampleFull,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [self.lambda_s, self.lambda_b, self.lambda_t, self.lambda_dist]
            .iter()
            .all(|v| *v >= 0.0 && v.is_finite());
        if !nonneg || !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }

    /// Distillation weight actually applied (zero when distillation is off).
    pub fn effective_dist_weight(&self) -> f64 {
        match self.dist_mode {
            DistMode::None => 0.0,
            _ => self.lambda_dist,
        }
    }
}

/// Plain-number summary of one evaluation of the objective.
///
/// `rec_per_network` and `rec_per_scale` hold weighted contributions, so
/// both sum to the reconstruction loss; `dist` is unweighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub rec_per_scale: [f64; NUM_SCALES],
    pub rec_per_network: [f64; 3],
    pub dist: f64,
}

impl LossBreakdown {
    pub fn reconstruction(&self) -> f64 {
        self.rec_per_network.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.dist.is_finite()
            && self.rec_per_scale.iter().all(|v| v.is_finite())
            && self.rec_per_network.iter().all(|v| v.is_finite())
    }

    /// One training-log record (`step, total, rec_s, rec_b, rec_t, dist`).
    pub fn to_json_line(&self, step: usize) -> String {
        serde_json::json!({
            "step": step,
            "total": self.total,
            "rec_s": self.rec_per_network[0],
            "rec_b": self.rec_per_network[1],
            "rec_t": self.rec_per_network[2],
            "dist": self.dist,
        })
        .to_string()
    }
}

/// Mean of `(1 − SSIM)/2` over 3×3 windows.
pub fn ssim_loss<T: Real>(g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
    let ssim = ssim_map(g, x, y)?;
    let loss = g.affine(ssim, -0.5, 0.5);
    g.mean(loss)
}

/// Per-window SSIM with stride-1 3×3 mean pooling.
pub fn ssim_map<T: Real>(g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
    let (sx, sy) = (g.shape(x), g.shape(y));
    if sx != sy {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            left: sx,
            right: sy,
        });
    }
    let mu_x = g.avg_pool3x3(x)?;
    let mu_y = g.avg_pool3x3(y)?;
    let xx = g.mul(x, x)?;
    let yy = g.mul(y, y)?;
    let xy = g.mul(x, y)?;
    let e_xx = g.avg_pool3x3(xx)?;
    let e_yy = g.avg_pool3x3(yy)?;
    let e_xy = g.avg_pool3x3(xy)?;
    let mu_xx = g.mul(mu_x, mu_x)?;
    let mu_yy = g.mul(mu_y, mu_y)?;
    let mu_xy = g.mul(mu_x, mu_y)?;
    let var_x = g.sub(e_xx, mu_xx)?;
    let var_y = g.sub(e_yy, mu_yy)?;
    let cov = g.sub(e_xy, mu_xy)?;

    let lum_num = g.affine(mu_xy, 2.0, SSIM_C1);
    let cs_num = g.affine(cov, 2.0, SSIM_C2);
    let num = g.mul(lum_num, cs_num)?;
    let mu_sum = g.add(mu_xx, mu_yy)?;
    let lum_den = g.add_scalar(mu_sum, SSIM_C1);
    let var_sum = g.add(var_x, var_y)?;
    let cs_den = g.add_scalar(var_sum, SSIM_C2);
    let den = g.mul(lum_den, cs_den)?;
    g.div(num, den)
}

/// `α·SSIM-loss + (1−α)·mean|synth − real|`.
pub fn appearance_loss<T: Real>(g: &mut Graph<T>, synth: Var, real: Var, alpha: f64) -> Result<Var> {
    let diff = g.sub(synth, real)?;
    let l1 = g.mean_abs(diff)?;
    if alpha == 0.0 {
        return Ok(l1);
    }
    let ssim = ssim_loss(g, synth, real)?;
    let a = g.scale(ssim, alpha);
    let b = g.scale(l1, 1.0 - alpha);
    g.add(a, b)
}

/// Graph nodes of the reconstruction objective.
#[derive(Clone, Debug)]
pub struct RecLoss {
    /// `λ`-weighted sum over networks and scales.
    pub total: Var,
    /// Unweighted appearance term per (network, scale); `None` for branches
    /// skipped because their weight is zero.
    pub terms: [[Option<Var>; NUM_SCALES]; 3],
    pub weights: [f64; 3],
}

struct Branch<'a> {
    name: &'static str,
    weight: f64,
    disparities: Option<&'a [DisparityMap; NUM_SCALES]>,
    full_synth: Option<Var>,
    source: Option<Var>,
    target: Var,
    direction: WarpDirection,
}

/// Multi-scale reconstruction loss over the student (`λ_s`), backward
/// (`λ_b`) and refined (`λ_t`) branches.
pub fn reconstruction_loss<T: Real>(
    g: &mut Graph<T>,
    cycle: &CycleOutputs,
    left: Var,
    right: Var,
    weights: &LossWeights,
) -> Result<RecLoss> {
    let branches = [
        Branch {
            name: "student",
            weight: weights.lambda_s,
            disparities: Some(&cycle.student.disparities),
            full_synth: Some(cycle.left_hat),
            source: Some(right),
            target: left,
            direction: WarpDirection::SynthesizeLeft,
        },
        Branch {
            name: "backward",
            weight: weights.lambda_b,
            disparities: cycle.backward.as_ref().map(|o| &o.disparities),
            full_synth: cycle.right_hat,
            source: Some(cycle.left_hat),
            target: right,
            direction: WarpDirection::SynthesizeRight,
        },
        Branch {
            name: "teacher",
            weight: weights.lambda_t,
            disparities: cycle.teacher.as_ref().map(|o| &o.disparities),
            full_synth: cycle.left_hat_refined,
            source: Some(right),
            target: left,
            direction: WarpDirection::SynthesizeLeft,
        },
    ];

    let legacy = weights.recon_variant == ReconVariant::DownsampledCompare;
    // Pyramids of the real images, built on demand for the legacy variant.
    let mut pyramids: Vec<(Var, Vec<Var>)> = Vec::new();
    let mut pyramid = |g: &mut Graph<T>, base: Var| -> Result<Vec<Var>> {
        if let Some((_, p)) = pyramids.iter().find(|(b, _)| *b == base) {
            return Ok(p.clone());
        }
        let mut levels = vec![base];
        for _ in 1..NUM_SCALES {
            let prev = *levels.last().expect("non-empty");
            levels.push(g.area_downsample(prev)?);
        }
        pyramids.push((base, levels.clone()));
        Ok(levels)
    };

    let mut terms: [[Option<Var>; NUM_SCALES]; 3] = Default::default();
    let mut total: Option<Var> = None;
    for (bi, br) in branches.iter().enumerate() {
        if br.weight == 0.0 {
            continue;
        }
        let (Some(disp), Some(full), Some(source)) = (br.disparities, br.full_synth, br.source)
        else {
            return Err(Error::MissingBranch(br.name));
        };
        let targets = if legacy {
            Some(pyramid(g, br.target)?)
        } else {
            None
        };
        let sources = if legacy {
            Some(pyramid(g, source)?)
        } else {
            None
        };
        let mut branch_sum: Option<Var> = None;
        for (n, d) in disp.iter().enumerate() {
            let term = if n == 0 {
                appearance_loss(g, full, br.target, weights.alpha)?
            } else if let (Some(targets), Some(sources)) = (&targets, &sources) {
                let synth = warp::warp(g, d, sources[n], br.direction)?;
                appearance_loss(g, synth, targets[n], weights.alpha)?
            } else {
                let up = warp::upsample_disparity_full(g, d)?;
                let synth = warp::warp(g, &up, source, br.direction)?;
                let diff = g.sub(synth, br.target)?;
                g.mean_abs(diff)?
            };
            terms[bi][n] = Some(term);
            branch_sum = Some(match branch_sum {
                Some(s) => g.add(s, term)?,
                None => term,
            });
        }
        let weighted = g.scale(branch_sum.expect("four scales"), br.weight);
        total = Some(match total {
            Some(t) => g.add(t, weighted)?,
            None => weighted,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(crate::tensor::Tensor::scalar(T::zero())),
    };
    Ok(RecLoss {
        total,
        terms,
        weights: [weights.lambda_s, weights.lambda_b, weights.lambda_t],
    })
}

/// `mean|d_l − S(d_ref)|` at full resolution.
pub fn disparity_distillation_loss<T: Real>(
    g: &mut Graph<T>,
    student: &DisparityMap,
    reference: &DisparityMap,
) -> Result<Var> {
    if student.scale != 0 || reference.scale != 0 {
        return Err(Error::invalid(
            "disparity_distillation_loss",
            format!(
                "expects scale-0 maps, got scales {} and {}",
                student.scale, reference.scale
            ),
        ));
    }
    if student.frame != reference.frame {
        return Err(Error::invalid(
            "disparity_distillation_loss",
            "maps are aligned to different frames",
        ));
    }
    let frozen = g.stop_gradient(reference.var);
    let diff = g.sub(student.var, frozen)?;
    g.mean_abs(diff)
}

/// `Σₙ mean(ξⁿ − S(ξ'ⁿ))²` over the given decoder feature scales.
pub fn feature_distillation_loss<T: Real>(
    g: &mut Graph<T>,
    student: &[Var],
    teacher: &[Var],
) -> Result<Var> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(Error::invalid(
            "feature_distillation_loss",
            format!(
                "{} student scales vs {} teacher scales",
                student.len(),
                teacher.len()
            ),
        ));
    }
    let mut sum: Option<Var> = None;
    for (&s, &t) in student.iter().zip(teacher) {
        let frozen = g.stop_gradient(t);
        let diff = g.sub(s, frozen)?;
        let term = g.mean_sq(diff)?;
        sum = Some(match sum {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(sum.expect("non-empty"))
}

/// `L_rec + λ_dist·L_dist`; the distillation term is dropped when
/// `dist_mode` is `none` or no distillation loss was computed.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    rec: Var,
    dist: Option<Var>,
    weights: &LossWeights,
) -> Result<Var> {
    match (dist, weights.effective_dist_weight()) {
        (Some(d), w) if w != 0.0 => {
            let wd = g.scale(d, w);
            g.add(rec, wd)
        }
        _ => Ok(rec),
    }
}

/// Reads the plain-number breakdown out of evaluated graph nodes.
pub fn breakdown<T: Real>(
    g: &Graph<T>,
    rec: &RecLoss,
    dist: Option<Var>,
    total: Var,
) -> Result<LossBreakdown> {
    let mut out = LossBreakdown {
        total: g.scalar_value(total)?.as_f64(),
        dist: match dist {
            Some(d) => g.scalar_value(d)?.as_f64(),
            None => 0.0,
        },
        ..Default::default()
    };
    for (bi, row) in rec.terms.iter().enumerate() {
        for (n, term) in row.iter().enumerate() {
            if let Some(t) = term {
                let v = rec.weights[bi] * g.scalar_value(*t)?.as_f64();
                out.rec_per_network[bi] += v;
                out.rec_per_scale[n] += v;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    fn constant(g: &mut Graph<f64>, shape: Shape, v: f64) -> Var {
        g.constant(Tensor::full(shape, v))
    }

    #[test]
    fn ssim_of_identical_images_is_zero_loss() {
        let mut g = Graph::new();
        let s = Shape::new(1, 3, 6, 7);
        let x = g.constant(Tensor::from_fn(s, |_, c, y, x| {
            ((c * 31 + y * 7 + x) as f64 * 0.37).sin() * 0.5 + 0.5
        }));
        let l = ssim_loss(&mut g, x, x).unwrap();
        assert!(g.scalar_value(l).unwrap().abs() < 1e-12);
    }

    #[test]
    fn ssim_of_constant_images_has_closed_form() {
        let mut g = Graph::new();
        let s = Shape::new(1, 1, 5, 5);
        let x = constant(&mut g, s, 0.2);
        let y = constant(&mut g, s, 0.4);
        let m = ssim_map(&mut g, x, y).unwrap();
        // Zero variance: the contrast-structure factor is exactly C2/C2.
        let expected = (2.0 * 0.2 * 0.4 + SSIM_C1) / (0.2f64.powi(2) + 0.4f64.powi(2) + SSIM_C1);
        for v in g.value(m).data() {
            assert!((v - expected).abs() < 1e-12);
        }
        let l = ssim_loss(&mut g, x, y).unwrap();
        assert!((g.scalar_value(l).unwrap() - (1.0 - expected) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn appearance_with_zero_alpha_is_l1() {
        let mut g = Graph::new();
        let s = Shape::new(1, 3, 4, 4);
        let a = constant(&mut g, s, 0.5);
        let b = constant(&mut g, s, 0.25);
        let l = appearance_loss(&mut g, a, b, 0.0).unwrap();
        assert_eq!(g.scalar_value(l).unwrap(), 0.25);
    }

    #[test]
    fn appearance_mixes_both_terms() {
        let mut g = Graph::new();
        let s = Shape::new(1, 3, 4, 4);
        let a = constant(&mut g, s, 0.2);
        let b = constant(&mut g, s, 0.4);
        let l = appearance_loss(&mut g, a, b, 0.85).unwrap();
        let ssim = (2.0 * 0.08 + SSIM_C1) / (0.2 + SSIM_C1);
        let expected = 0.85 * (1.0 - ssim) / 2.0 + 0.15 * 0.2;
        assert!((g.scalar_value(l).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn disparity_distillation_of_constants() {
        let mut g = Graph::new();
        let s = Shape::new(1, 1, 3, 3);
        let a = constant(&mut g, s, 2.0);
        let b = constant(&mut g, s, 5.0);
        let l = disparity_distillation_loss(
            &mut g,
            &DisparityMap::new(a, crate::warp::Frame::Left, 0),
            &DisparityMap::new(b, crate::warp::Frame::Left, 0),
        )
        .unwrap();
        assert_eq!(g.scalar_value(l).unwrap(), 3.0);
    }

    #[test]
    fn disparity_distillation_rejects_low_scales() {
        let mut g = Graph::new();
        let a = constant(&mut g, Shape::new(1, 1, 2, 2), 1.0);
        let err = disparity_distillation_loss(
            &mut g,
            &DisparityMap::new(a, crate::warp::Frame::Left, 1),
            &DisparityMap::new(a, crate::warp::Frame::Left, 1),
        );
        assert!(err.is_err());
    }

    #[test]
    fn feature_distillation_single_scale() {
        let mut g = Graph::new();
        let s = Shape::new(1, 4, 2, 2);
        let a = constant(&mut g, s, 1.0);
        let b = constant(&mut g, s, 3.0);
        let l = feature_distillation_loss(&mut g, &[a], &[b]).unwrap();
        assert_eq!(g.scalar_value(l).unwrap(), 4.0);
        let c = constant(&mut g, Shape::new(1, 3, 2, 2), 3.0);
        assert!(feature_distillation_loss(&mut g, &[a], &[c]).is_err());
    }

    #[test]
    fn total_loss_adds_weighted_distillation() {
        let mut g = Graph::<f64>::new();
        let rec = g.constant(Tensor::scalar(0.5));
        let dist = g.constant(Tensor::scalar(0.2));
        let w = LossWeights {
            lambda_dist: 0.1,
            dist_mode: DistMode::Disparity,
            ..Default::default()
        };
        let t = total_loss(&mut g, rec, Some(dist), &w).unwrap();
        assert!((g.scalar_value(t).unwrap() - 0.52).abs() < 1e-15);
        let off = LossWeights {
            lambda_dist: 0.0,
            ..w
        };
        let t = total_loss(&mut g, rec, Some(dist), &off).unwrap();
        assert_eq!(t, rec);
        let none = LossWeights {
            dist_mode: DistMode::None,
            ..w
        };
        assert_eq!(total_loss(&mut g, rec, Some(dist), &none).unwrap(), rec);
    }

    #[test]
    fn json_line_has_log_keys() {
        let b = LossBreakdown {
            total: 1.0,
            rec_per_scale: [0.25; 4],
            rec_per_network: [0.5, 0.3, 0.2],
            dist: 0.0,
        };
        let v: serde_json::Value = serde_json::from_str(&b.to_json_line(7)).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        assert_eq!(keys.len(), 6);
        for k in ["step", "total", "rec_s", "rec_b", "rec_t", "dist"] {
            assert!(keys.contains(&k));
        }
    }
}
