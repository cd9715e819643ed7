use serde::{Deserialize, Serialize};

use super::cycle::{cycle_forward_parts, CycleParts};
use crate::autodiff::Graph;
use crate::data::{disparity_to_depth, StereoSample};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, EvalReport};
use crate::networks::{CycleNetworks, NetworkBundle};
use crate::tensor::{Real, Tensor};

/// Disparities below this are treated as this when converting to depth.
pub const MIN_DISPARITY: f64 = 0.01;
const EVAL_BATCH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    /// `d_l⁰` from `G_s` alone.
    Student,
    /// `d_l'⁰` from the full cycle and `G_i`.
    Teacher,
}

impl Which {
    pub fn as_str(self) -> &'static str {
        match self {
            Which::Student => "student",
            Which::Teacher => "teacher",
        }
    }
}

/// Anything that maps right views to left-frame disparity.
pub trait DisparityPredictor {
    /// One `1×1×H×W` map per sample.
    fn predict(&self, samples: &[&StereoSample], which: Which) -> Result<Vec<Tensor<f32>>>;
}

/// Predicts `d_l⁰` for a stacked `N×3×H×W` batch of right views.
pub fn predict_disparity<T: Real>(bundle: &NetworkBundle<T>, right: &Tensor<f32>, which: Which) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let r = g.input(right.cast(), false);
    let d = match which {
        Which::Student => bundle.student_forward(&mut g, r)?.disparities[0],
        Which::Teacher => {
            let out = cycle_forward_parts(&mut g, bundle, r, CycleParts::FULL)?;
            out.teacher.expect("requested").disparities[0]
        }
    };
    Ok(g.value(d.var).cast())
}

impl<T: Real> DisparityPredictor for NetworkBundle<T> {
    fn predict(&self, samples: &[&StereoSample], which: Which) -> Result<Vec<Tensor<f32>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EVAL_BATCH) {
            let rights: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.right).collect();
            let d = predict_disparity(self, &Tensor::stack(&rights)?, which)?;
            out.extend((0..chunk.len()).map(|i| d.batch_item(i)));
        }
        Ok(out)
    }
}

/// Returns the ground truth; useful as a reference point.
#[derive(Clone, Copy, Debug, Default)]
pub struct OraclePredictor;

impl DisparityPredictor for OraclePredictor {
    fn predict(&self, samples: &[&StereoSample], _which: Which) -> Result<Vec<Tensor<f32>>> {
        samples
            .iter()
            .map(|s| {
                s.gt_disparity
                    .clone()
                    .ok_or_else(|| Error::MissingGroundTruth(s.id.clone()))
            })
            .collect()
    }
}

/// Converts predictions and ground truth to depth and aggregates the metrics
/// over every pixel with positive ground-truth disparity.
pub fn evaluate(
    predictor: &dyn DisparityPredictor,
    samples: &[StereoSample],
    which: Which,
    cap_meters: f64,
) -> Result<EvalReport> {
    let mut pred_depth = Vec::new();
    let mut gt_depth = Vec::new();
    let refs: Vec<&StereoSample> = samples.iter().collect();
    for s in &refs {
        if s.gt_disparity.is_none() {
            return Err(Error::MissingGroundTruth(s.id.clone()));
        }
    }
    let preds = predictor.predict(&refs, which)?;
    for (s, d) in refs.iter().zip(&preds) {
        let gt = s.gt_disparity.as_ref().expect("checked");
        if d.shape() != gt.shape() {
            return Err(Error::ShapeMismatch {
                op: "evaluate",
                left: d.shape(),
                right: gt.shape(),
            });
        }
        pred_depth.extend(disparity_to_depth(d.data(), &s.camera, MIN_DISPARITY)?);
        let gt_d = disparity_to_depth(gt.data(), &s.camera, MIN_DISPARITY)?;
        gt_depth.extend(
            gt.data()
                .iter()
                .zip(gt_d)
                .map(|(&disp, depth)| if disp > 0.0 { depth } else { 0.0 }),
        );
    }
    compute_metrics(&pred_depth, &gt_depth, cap_meters)
}
