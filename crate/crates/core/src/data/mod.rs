//! Stereo samples, synthetic scene generation, augmentation, on-disk
//! datasets and disparity/depth conversion.

pub mod dataset;
pub mod io;
pub mod scene;

pub use dataset::{load_dataset, read_manifest, write_dataset, DatasetManifest, Split, SplitIds};
pub use scene::{default_fb, generate_scene, make_dataset, non_occluded_mask, Layer, SceneSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Rectified camera constants; depth = `f·b / disparity`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    /// Focal length in pixels.
    pub focal_length: f64,
    /// Baseline in meters.
    pub baseline: f64,
}

impl CameraParams {
    pub fn new(focal_length: f64, baseline: f64) -> Result<Self> {
        if !(focal_length > 0.0 && baseline > 0.0) {
            return Err(Error::invalid(
                "camera",
                format!("focal length {focal_length} and baseline {baseline} must be positive"),
            ));
        }
        Ok(CameraParams {
            focal_length,
            baseline,
        })
    }

    /// Unit baseline with the given `f·b` product.
    pub fn from_fb(fb: f64) -> Result<Self> {
        Self::new(fb, 1.0)
    }

    pub fn fb(&self) -> f64 {
        self.focal_length * self.baseline
    }
}

/// A rectified pair. Images are `1×3×H×W` in `[0,1]`; disparities are
/// `1×1×H×W` in full-resolution pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    pub id: String,
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    /// Aligned to the left grid.
    pub gt_disparity: Option<Tensor<f32>>,
    /// Aligned to the right grid; lets a flipped pair keep exact ground truth.
    pub gt_disparity_right: Option<Tensor<f32>>,
    pub camera: CameraParams,
}

impl StereoSample {
    pub fn height(&self) -> usize {
        self.left.shape().h
    }

    pub fn width(&self) -> usize {
        self.left.shape().w
    }
}

/// Mirrors both views horizontally and swaps their roles, which keeps the
/// pair a valid rectified stereo pair. Ground truth swaps with the views.
pub fn augment_flip(sample: &StereoSample, coin: bool) -> StereoSample {
    if !coin {
        return sample.clone();
    }
    let flip = |t: &Option<Tensor<f32>>| t.as_ref().map(|t| t.flip_horizontal());
    StereoSample {
        id: sample.id.clone(),
        left: sample.right.flip_horizontal(),
        right: sample.left.flip_horizontal(),
        gt_disparity: flip(&sample.gt_disparity_right),
        gt_disparity_right: flip(&sample.gt_disparity),
        camera: sample.camera,
    }
}

/// `depth = fb / max(disparity, min_disp)`, in meters.
pub fn disparity_to_depth<T: Real>(disparity: &[T], camera: &CameraParams, min_disp: f64) -> Result<Vec<f64>> {
    if !(min_disp > 0.0) {
        return Err(Error::invalid(
            "disparity_to_depth",
            format!("min_disp must be positive, got {min_disp}"),
        ));
    }
    let fb = camera.fb();
    Ok(disparity
        .iter()
        .map(|d| fb / d.as_f64().max(min_disp))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_conversion_cases() {
        let cam = CameraParams::from_fb(400.0).unwrap();
        let d = disparity_to_depth(&[400.0f64, 8.0, 0.0], &cam, 0.01).unwrap();
        assert_eq!(d, vec![1.0, 50.0, 40000.0]);
        assert!(disparity_to_depth(&[1.0f64], &cam, 0.0).is_err());
    }

    #[test]
    fn depth_is_strictly_decreasing_above_the_floor() {
        let cam = CameraParams::from_fb(9.6).unwrap();
        let disp: Vec<f64> = (1..200).map(|i| i as f64 * 0.05).collect();
        let depth = disparity_to_depth(&disp, &cam, 0.01).unwrap();
        assert!(depth.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn camera_rejects_non_positive_constants() {
        assert!(CameraParams::new(0.0, 1.0).is_err());
        assert!(CameraParams::new(1.0, -1.0).is_err());
    }
}
