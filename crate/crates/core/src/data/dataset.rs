//! On-disk dataset layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/<id>_left.ppm
//! <root>/<id>_right.ppm
//! <root>/<id>_disp.pfm      left-frame ground truth, when present
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::{load_image, load_pfm, save_image, save_pfm};
use super::{CameraParams, StereoSample};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub heldout: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub ids: Vec<String>,
    pub split: SplitIds,
    pub fb: f64,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
    All,
}

impl DatasetManifest {
    pub fn ids_of(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.split.train,
            Split::Heldout => &self.split.heldout,
            Split::All => &self.ids,
        }
    }
}

/// Writes both splits under `root` (created if missing) and returns the manifest.
pub fn write_dataset(
    root: &Path,
    train: &[StereoSample],
    heldout: &[StereoSample],
    seed: u64,
) -> Result<DatasetManifest> {
    let first = train
        .first()
        .or(heldout.first())
        .ok_or_else(|| Error::invalid("write_dataset", "no samples"))?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for s in train.iter().chain(heldout) {
        if s.width() != first.width() || s.height() != first.height() {
            return Err(Error::invalid("write_dataset", format!("sample {} has different dims", s.id)));
        }
        save_image(&root.join(format!("{}_left.ppm", s.id)), &s.left)?;
        save_image(&root.join(format!("{}_right.ppm", s.id)), &s.right)?;
        if let Some(gt) = &s.gt_disparity {
            save_pfm(&root.join(format!("{}_disp.pfm", s.id)), gt)?;
        }
    }
    let ids_of = |v: &[StereoSample]| v.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
    let manifest = DatasetManifest {
        ids: train.iter().chain(heldout).map(|s| s.id.clone()).collect(),
        split: SplitIds {
            train: ids_of(train),
            heldout: ids_of(heldout),
        },
        fb: first.camera.fb(),
        seed,
        width: first.width(),
        height: first.height(),
    };
    let path = root.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads the samples of one split in manifest order. Ground truth is
/// attached when its file exists.
pub fn load_dataset(root: &Path, split: Split) -> Result<(DatasetManifest, Vec<StereoSample>)> {
    let manifest = read_manifest(root)?;
    let camera = CameraParams::from_fb(manifest.fb)?;
    let mut samples = Vec::new();
    for id in manifest.ids_of(split) {
        let left = load_image(&root.join(format!("{id}_left.ppm")))?;
        let right = load_image(&root.join(format!("{id}_right.ppm")))?;
        if left.shape() != right.shape() {
            return Err(Error::invalid("load_dataset", format!("views of {id} differ in size")));
        }
        let disp_path = root.join(format!("{id}_disp.pfm"));
        let gt_disparity = if disp_path.exists() {
            Some(load_pfm(&disp_path)?)
        } else {
            None
        };
        samples.push(StereoSample {
            id: id.clone(),
            left,
            right,
            gt_disparity,
            gt_disparity_right: None,
            camera,
        });
    }
    Ok((manifest, samples))
}
