//! Depth evaluation statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_DEPTH: f64 = 0.1;
pub const THRESHOLD_BASE: f64 = 1.25;
pub const DEFAULT_CAP_METERS: f64 = 80.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub pixels: usize,
    pub cap_meters: f64,
}

/// Aggregates the seven statistics over pixels with `gt > 0`, after clipping
/// both depths to `[MIN_DEPTH, cap_meters]`.
pub fn compute_metrics(pred: &[f64], gt: &[f64], cap_meters: f64) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(
            "compute_metrics",
            format!("{} predictions vs {} ground-truth values", pred.len(), gt.len()),
        ));
    }
    if !(cap_meters > MIN_DEPTH) {
        return Err(Error::invalid("compute_metrics", format!("cap {cap_meters} must exceed {MIN_DEPTH}")));
    }
    let t1 = THRESHOLD_BASE;
    let (t2, t3) = (t1 * t1, t1 * t1 * t1);
    let mut acc = [0.0f64; 4];
    let mut hits = [0usize; 3];
    let mut n = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        if !(g > 0.0) {
            continue;
        }
        let p = p.clamp(MIN_DEPTH, cap_meters);
        let g = g.clamp(MIN_DEPTH, cap_meters);
        let diff = p - g;
        acc[0] += diff.abs() / g;
        acc[1] += diff * diff / g;
        acc[2] += diff * diff;
        let dl = p.ln() - g.ln();
        acc[3] += dl * dl;
        let ratio = (p / g).max(g / p);
        hits[0] += usize::from(ratio < t1);
        hits[1] += usize::from(ratio < t2);
        hits[2] += usize::from(ratio < t3);
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("compute_metrics", "no pixel has positive ground truth"));
    }
    let nf = n as f64;
    Ok(EvalReport {
        abs_rel: acc[0] / nf,
        sq_rel: acc[1] / nf,
        rmse: (acc[2] / nf).sqrt(),
        rmse_log: (acc[3] / nf).sqrt(),
        a1: hits[0] as f64 / nf,
        a2: hits[1] as f64 / nf,
        a3: hits[2] as f64 / nf,
        pixels: n,
        cap_meters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction() {
        let d = [1.0, 5.0, 30.0];
        let r = compute_metrics(&d, &d, 80.0).unwrap();
        assert_eq!((r.abs_rel, r.sq_rel, r.rmse, r.rmse_log), (0.0, 0.0, 0.0, 0.0));
        assert_eq!((r.a1, r.a2, r.a3, r.pixels), (1.0, 1.0, 1.0, 3));
    }

    #[test]
    fn doubled_depth_hand_case() {
        let r = compute_metrics(&[2.0], &[1.0], 80.0).unwrap();
        assert_eq!((r.abs_rel, r.sq_rel, r.rmse), (1.0, 1.0, 1.0));
        assert!((r.rmse_log - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!((r.a1, r.a2, r.a3), (0.0, 0.0, 0.0));
    }

    #[test]
    fn predictions_above_the_cap_count_as_the_cap() {
        let a = compute_metrics(&[500.0, 3.0], &[40.0, 3.0], 80.0).unwrap();
        let b = compute_metrics(&[80.0, 3.0], &[40.0, 3.0], 80.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_valid_mask_is_rejected() {
        assert!(compute_metrics(&[1.0], &[0.0], 80.0).is_err());
        assert!(compute_metrics(&[1.0, 2.0], &[1.0], 80.0).is_err());
    }

    proptest! {
        #[test]
        fn scaling_both_inputs(
            pairs in prop::collection::vec((0.2f64..10.0, 0.2f64..10.0), 1..40),
            c in 0.5f64..4.0
        ) {
            let (p, g): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let ps: Vec<f64> = p.iter().map(|v| v * c).collect();
            let gs: Vec<f64> = g.iter().map(|v| v * c).collect();
            let a = compute_metrics(&p, &g, 1e6).unwrap();
            let b = compute_metrics(&ps, &gs, 1e6).unwrap();
            prop_assert!((a.abs_rel - b.abs_rel).abs() < 1e-9);
            prop_assert!((a.rmse_log - b.rmse_log).abs() < 1e-9);
            prop_assert!((a.rmse * c - b.rmse).abs() < 1e-9 * (1.0 + b.rmse));
            prop_assert!((a.sq_rel * c - b.sq_rel).abs() < 1e-9 * (1.0 + b.sq_rel));
            prop_assert_eq!((a.a1, a.a2, a.a3), (b.a1, b.a2, b.a3));
        }

        #[test]
        fn worsening_one_pixel_never_lowers_abs_rel(
            pairs in prop::collection::vec((0.2f64..50.0, 0.2f64..50.0), 1..40),
            idx in any::<prop::sample::Index>(),
            step in 0.0f64..20.0
        ) {
            let (mut p, g): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let before = compute_metrics(&p, &g, 80.0).unwrap();
            let i = idx.index(p.len());
            p[i] += if p[i] >= g[i] { step } else { -step.min(p[i] - MIN_DEPTH).max(0.0) };
            let after = compute_metrics(&p, &g, 80.0).unwrap();
            prop_assert!(after.abs_rel >= before.abs_rel - 1e-15);
            prop_assert!(after.a1 <= after.a2 && after.a2 <= after.a3);
        }
    }
}
