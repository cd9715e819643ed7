//! Differentiable horizontal warping of rectified views.
//!
//! Geometry: a scene point at column `x` of the left view appears at column
//! `x − d` of the right view. Synthesizing the left view therefore samples
//! the right image at `x − d`, and synthesizing the right view samples the
//! left image at `x + d`.
//!
//! Disparities are stored in full-resolution pixels at every scale. A map at
//! scale `n` covers a `(H/2ⁿ, W/2ⁿ)` grid but its values are not divided by
//! `2ⁿ`; [`warp`] converts them to grid pixels when sampling.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Image grid a disparity map is aligned to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Frame {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WarpDirection {
    /// Output on the left grid, sampling the source at `x − d`.
    SynthesizeLeft,
    /// Output on the right grid, sampling the source at `x + d`.
    SynthesizeRight,
}

impl WarpDirection {
    pub fn output_frame(self) -> Frame {
        match self {
            WarpDirection::SynthesizeLeft => Frame::Left,
            WarpDirection::SynthesizeRight => Frame::Right,
        }
    }

    fn sign(self) -> f64 {
        match self {
            WarpDirection::SynthesizeLeft => -1.0,
            WarpDirection::SynthesizeRight => 1.0,
        }
    }
}

/// Single-channel disparity node plus the grid it lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DisparityMap {
    pub var: Var,
    pub frame: Frame,
    /// Scale index `n`: the map covers `(H/2ⁿ, W/2ⁿ)`.
    pub scale: usize,
}

impl DisparityMap {
    pub fn new(var: Var, frame: Frame, scale: usize) -> Self {
        DisparityMap { var, frame, scale }
    }
}

/// Bilinear horizontal warp of `source` by `disparity`.
///
/// The sampling coordinate is clamped to `[0, W−1]`; at clamped pixels the
/// disparity gradient is zero. Negative disparities are rejected.
pub fn warp<T: Real>(
    g: &mut Graph<T>,
    disparity: &DisparityMap,
    source: Var,
    direction: WarpDirection,
) -> Result<Var> {
    if disparity.frame != direction.output_frame() {
        return Err(Error::invalid(
            "warp",
            format!(
                "{direction:?} needs a {:?}-frame disparity, got {:?}",
                direction.output_frame(),
                disparity.frame
            ),
        ));
    }
    if let Some((index, v)) = g
        .value(disparity.var)
        .data()
        .iter()
        .enumerate()
        .find(|(_, v)| **v < T::zero() || v.is_nan())
    {
        return Err(Error::NegativeDisparity {
            index,
            value: v.as_f64(),
        });
    }
    let per_pixel = direction.sign() / (1u64 << disparity.scale) as f64;
    g.sample_rows(source, disparity.var, per_pixel)
}

/// Nearest-neighbour upsampling of a scale-`n` map to scale 0. Values are
/// already in full-resolution pixels and are copied unchanged.
pub fn upsample_disparity_full<T: Real>(
    g: &mut Graph<T>,
    disparity: &DisparityMap,
) -> Result<DisparityMap> {
    if disparity.scale == 0 {
        return Ok(*disparity);
    }
    let var = g.upsample_nearest(disparity.var, 1 << disparity.scale)?;
    Ok(DisparityMap::new(var, disparity.frame, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    fn row(g: &mut Graph<f64>, v: &[f64]) -> Var {
        g.constant(Tensor::from_vec(Shape::new(1, 1, 1, v.len()), v.to_vec()).unwrap())
    }

    fn disp(g: &mut Graph<f64>, v: &[f64], frame: Frame) -> DisparityMap {
        let var = row(g, v);
        DisparityMap::new(var, frame, 0)
    }

    #[test]
    fn integer_shift_with_edge_clamp() {
        let mut g = Graph::new();
        let src = row(&mut g, &[10.0, 20.0, 30.0, 40.0]);
        let d = disp(&mut g, &[1.0; 4], Frame::Left);
        let out = warp(&mut g, &d, src, WarpDirection::SynthesizeLeft).unwrap();
        assert_eq!(g.value(out).data(), &[10.0, 10.0, 20.0, 30.0]);
    }

    #[test]
    fn half_pixel_shift_interpolates() {
        let mut g = Graph::new();
        let src = row(&mut g, &[0.0, 2.0, 4.0, 6.0]);
        let d = disp(&mut g, &[0.5; 4], Frame::Left);
        let out = warp(&mut g, &d, src, WarpDirection::SynthesizeLeft).unwrap();
        for (a, e) in g.value(out).data().iter().zip([0.0, 1.0, 3.0, 5.0]) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn synthesize_right_samples_forward() {
        let mut g = Graph::new();
        let src = row(&mut g, &[10.0, 20.0, 30.0, 40.0]);
        let d = disp(&mut g, &[1.0; 4], Frame::Right);
        let out = warp(&mut g, &d, src, WarpDirection::SynthesizeRight).unwrap();
        assert_eq!(g.value(out).data(), &[20.0, 30.0, 40.0, 40.0]);
    }

    #[test]
    fn negative_disparity_is_rejected() {
        let mut g = Graph::new();
        let src = row(&mut g, &[1.0, 2.0]);
        let d = disp(&mut g, &[0.0, -0.1], Frame::Left);
        let err = warp(&mut g, &d, src, WarpDirection::SynthesizeLeft).unwrap_err();
        assert!(matches!(err, Error::NegativeDisparity { index: 1, .. }));
    }

    #[test]
    fn frame_mismatch_is_rejected() {
        let mut g = Graph::new();
        let src = row(&mut g, &[1.0, 2.0]);
        let d = disp(&mut g, &[0.0, 0.0], Frame::Right);
        assert!(warp(&mut g, &d, src, WarpDirection::SynthesizeLeft).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut g = Graph::new();
        let src = row(&mut g, &[1.0, 2.0, 3.0]);
        let d = disp(&mut g, &[0.0, 0.0], Frame::Left);
        assert!(matches!(
            warp(&mut g, &d, src, WarpDirection::SynthesizeLeft),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn low_scale_values_are_full_resolution_pixels() {
        // A scale-1 map of value 2 moves a half-resolution row by one pixel.
        let mut g = Graph::new();
        let src = row(&mut g, &[10.0, 20.0, 30.0, 40.0]);
        let var = row(&mut g, &[2.0; 4]);
        let d = DisparityMap::new(var, Frame::Left, 1);
        let out = warp(&mut g, &d, src, WarpDirection::SynthesizeLeft).unwrap();
        assert_eq!(g.value(out).data(), &[10.0, 10.0, 20.0, 30.0]);
    }

    #[test]
    fn upsample_full_is_identity_at_scale_zero() {
        let mut g = Graph::new();
        let d = disp(&mut g, &[1.0, 2.0], Frame::Left);
        let up = upsample_disparity_full(&mut g, &d).unwrap();
        assert_eq!(up, d);
    }

    #[test]
    fn upsample_full_block_replicates() {
        let mut g = Graph::new();
        let var = g.constant(
            Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let d = DisparityMap::new(var, Frame::Left, 1);
        let up = upsample_disparity_full(&mut g, &d).unwrap();
        assert_eq!(up.scale, 0);
        assert_eq!(
            g.value(up.var).data(),
            &[
                1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0
            ]
        );
    }
}
