//! Layered synthetic stereo scenes with exact ground-truth disparity.
//!
//! Every surface (background plus fronto-parallel rectangles) carries a
//! colored texture defined on the integer columns of the right view and
//! linearly interpolated in between. The right view reads the texture at
//! integer columns; the left view reads it at `x − d`. Linear sampling of the
//! right image at `x − d` therefore reproduces the left image exactly
//! wherever both taps see the same surface.
//!
//! Appearance depends on disparity the way aerial perspective does: far
//! surfaces fade toward a haze color and lose contrast, near ones are
//! saturated with coarser texture. That is the only monocular depth cue.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CameraParams, StereoSample};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Largest disparity the generator draws, as a fraction of the width.
pub const MAX_DISPARITY_FRACTION: f64 = 0.15;
/// Hard cap on any scene disparity, as a fraction of the width.
pub const D_MAX_FRACTION: f64 = 0.3;

const HAZE: [f32; 3] = [0.78, 0.82, 0.90];
/// Nominal surface color before haze; kept narrow so that haze alone
/// tells near from far.
const SURFACE: [f32; 3] = [0.32, 0.20, 0.12];

/// Rectangle `[x0, x1) × [y0, y1)` in left-view pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub disparity: f64,
    pub texture_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub background_disparity: f64,
    pub layers: Vec<Layer>,
    pub seed: u64,
    /// `f·b` of the rendering camera, pixel·meters.
    pub fb: f64,
}

/// Default `f·b` for a given width: the largest generated disparity maps
/// to 1 m, so the 80 m cap corresponds to about 1/80 of it.
pub fn default_fb(width: usize) -> f64 {
    MAX_DISPARITY_FRACTION * width as f64
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height == 0 {
            return Err(Error::invalid("generate_scene", "scene must be at least 2x1"));
        }
        let d_max = D_MAX_FRACTION * self.width as f64;
        if !(self.background_disparity >= 0.0 && self.background_disparity < d_max) {
            return Err(Error::invalid(
                "generate_scene",
                format!("background disparity {} outside [0, {d_max})", self.background_disparity),
            ));
        }
        for l in &self.layers {
            if !(l.disparity > self.background_disparity && l.disparity < d_max) {
                return Err(Error::invalid(
                    "generate_scene",
                    format!(
                        "layer disparity {} must lie in ({}, {d_max})",
                        l.disparity, self.background_disparity
                    ),
                ));
            }
        }
        Ok(())
    }

    fn pad(&self) -> usize {
        (D_MAX_FRACTION * self.width as f64).ceil() as usize + 2
    }
}

struct Surface {
    disparity: f64,
    rect: Option<(usize, usize, usize, usize)>,
    /// `[3][H][pad + W]` colored lattice; column `u` lives at index `u + pad`.
    lattice: Vec<f32>,
}

impl Surface {
    fn covers(&self, x: f64, y: usize) -> bool {
        match self.rect {
            None => true,
            Some((x0, y0, x1, y1)) => y >= y0 && y < y1 && x >= x0 as f64 && x < x1 as f64,
        }
    }
}

fn texture(seed: u64, nearness: f64, height: usize, cols: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f32; 3] = std::array::from_fn(|c| SURFACE[c] + rng.gen_range(-0.05..0.05));
    let spacing = 6.0 + 4.0 * nearness;
    let gw = (cols as f64 / spacing).ceil() as usize + 2;
    let gh = (height as f64 / spacing).ceil() as usize + 2;
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.gen::<f64>()).collect();
    let chroma: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));

    let bilinear = |u: f64, v: f64| {
        let (i, j) = (u.floor() as usize, v.floor() as usize);
        let (a, b) = (u - i as f64, v - j as f64);
        let at = |ii: usize, jj: usize| grid[jj * gw + ii];
        (1.0 - b) * ((1.0 - a) * at(i, j) + a * at(i + 1, j))
            + b * ((1.0 - a) * at(i, j + 1) + a * at(i + 1, j + 1))
    };

    let haze = (0.2 + 0.8 * nearness) as f32;
    let contrast = (0.6 + 0.4 * nearness) as f32;
    let mut out = vec![0.0f32; 3 * height * cols];
    for y in 0..height {
        for u in 0..cols {
            let lum = bilinear(u as f64 / spacing, y as f64 / spacing);
            for c in 0..3 {
                let tex = (lum - 0.5) * (1.0 + 0.25 * chroma[c]);
                let v = HAZE[c] + haze * (base[c] - HAZE[c]) + contrast * 0.6 * tex as f32;
                out[(c * height + y) * cols + u] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

struct Rendered {
    surfaces: Vec<Surface>,
    left_vis: Vec<usize>,
    right_vis: Vec<usize>,
    pad: usize,
}

fn render(spec: &SceneSpec) -> Result<Rendered> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let pad = spec.pad();
    let cols = w + pad;
    let scale = MAX_DISPARITY_FRACTION * w as f64;
    let nearness = |d: f64| (d / scale).clamp(0.0, 1.0);

    let mut surfaces = vec![Surface {
        disparity: spec.background_disparity,
        rect: None,
        lattice: texture(spec.seed, nearness(spec.background_disparity), h, cols),
    }];
    let mut layers = spec.layers.clone();
    layers.sort_by(|a, b| a.disparity.total_cmp(&b.disparity));
    for l in layers {
        let (x1, y1) = (l.x1.min(w), l.y1.min(h));
        if l.x0 >= x1 || l.y0 >= y1 {
            continue;
        }
        surfaces.push(Surface {
            disparity: l.disparity,
            rect: Some((l.x0, l.y0, x1, y1)),
            lattice: texture(l.texture_seed, nearness(l.disparity), h, cols),
        });
    }

    let mut left_vis = vec![0usize; w * h];
    let mut right_vis = vec![0usize; w * h];
    for y in 0..h {
        for x in 0..w {
            for (k, s) in surfaces.iter().enumerate() {
                if s.covers(x as f64, y) {
                    left_vis[y * w + x] = k;
                }
                if s.covers(x as f64 + s.disparity, y) {
                    right_vis[y * w + x] = k;
                }
            }
        }
    }
    Ok(Rendered {
        surfaces,
        left_vis,
        right_vis,
        pad,
    })
}

/// Renders both views far-to-near and records per-pixel ground truth.
pub fn generate_scene(spec: &SceneSpec) -> Result<StereoSample> {
    let r = render(spec)?;
    let (w, h) = (spec.width, spec.height);
    let cols = w + r.pad;
    let shape = Shape::new(1, 3, h, w);
    let mut left = Tensor::zeros(shape);
    let mut right = Tensor::zeros(shape);
    let mut gt_l = Tensor::zeros(Shape::new(1, 1, h, w));
    let mut gt_r = Tensor::zeros(Shape::new(1, 1, h, w));
    for y in 0..h {
        for x in 0..w {
            let sl = &r.surfaces[r.left_vis[y * w + x]];
            let sr = &r.surfaces[r.right_vis[y * w + x]];
            let u = x as f64 - sl.disparity + r.pad as f64;
            let i0 = u.floor() as usize;
            let frac = (u - i0 as f64) as f32;
            for c in 0..3 {
                let row = &sl.lattice[(c * h + y) * cols..(c * h + y + 1) * cols];
                let (a, b) = (row[i0], row[(i0 + 1).min(cols - 1)]);
                left.set(0, c, y, x, a + frac * (b - a));
                right.set(0, c, y, x, sr.lattice[(c * h + y) * cols + x + r.pad]);
            }
            gt_l.set(0, 0, y, x, sl.disparity as f32);
            gt_r.set(0, 0, y, x, sr.disparity as f32);
        }
    }
    Ok(StereoSample {
        id: format!("scene-{:016x}", spec.seed),
        left,
        right,
        gt_disparity: Some(gt_l),
        gt_disparity_right: Some(gt_r),
        camera: CameraParams::from_fb(spec.fb)?,
    })
}

/// Left-view pixels whose two right-view sampling taps at `x − d` are inside
/// the frame and show the same surface.
pub fn non_occluded_mask(spec: &SceneSpec) -> Result<Vec<bool>> {
    let r = render(spec)?;
    let (w, h) = (spec.width, spec.height);
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let k = r.left_vis[y * w + x];
            let u = x as f64 - r.surfaces[k].disparity;
            if u < 0.0 || u > (w - 1) as f64 {
                continue;
            }
            let x0 = (u.floor() as usize).min(w - 2);
            let frac = u - x0 as f64;
            let ok = r.right_vis[y * w + x0] == k && (frac == 0.0 || r.right_vis[y * w + x0 + 1] == k);
            mask[y * w + x] = ok;
        }
    }
    Ok(mask)
}

/// Draws a scene from the generator's ranges: 1–4 layers, disparities in
/// `[0, 0.15·W]`.
pub fn random_scene_spec(rng: &mut impl Rng, width: usize, height: usize, seed: u64, fb: f64) -> SceneSpec {
    let top = MAX_DISPARITY_FRACTION * width as f64;
    let background_disparity = rng.gen_range(0.2 * top..0.5 * top);
    let count = rng.gen_range(1..=4);
    let layers = (0..count)
        .map(|_| {
            let lw = rng.gen_range((width / 8).max(1)..=(width / 2).max(1));
            let lh = rng.gen_range((height / 4).max(1)..=(3 * height / 4).max(1));
            let x0 = rng.gen_range(0..=width - lw);
            let y0 = rng.gen_range(0..=height - lh);
            Layer {
                x0,
                y0,
                x1: x0 + lw,
                y1: y0 + lh,
                disparity: rng.gen_range(background_disparity + 0.1 * top..=top),
                texture_seed: rng.gen(),
            }
        })
        .collect();
    SceneSpec {
        width,
        height,
        background_disparity,
        layers,
        seed,
        fb,
    }
}

/// Scene spec for sample `index` of a dataset drawn with `seed`.
pub fn dataset_scene_spec(index: usize, width: usize, height: usize, seed: u64, fb: f64) -> SceneSpec {
    let sample_seed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    random_scene_spec(&mut rng, width, height, sample_seed, fb)
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

/// Number of held-out samples in a dataset of `count`.
pub fn heldout_count(count: usize) -> usize {
    (count / 10).max(1)
}

/// Deterministic 90/10 split of `count` generated scenes: `(train, held-out)`.
pub fn make_dataset(
    count: usize,
    width: usize,
    height: usize,
    seed: u64,
    fb: f64,
) -> Result<(Vec<StereoSample>, Vec<StereoSample>)> {
    if count < 2 {
        return Err(Error::invalid("make_dataset", "need at least two samples"));
    }
    let mut all = Vec::with_capacity(count);
    for i in 0..count {
        let spec = dataset_scene_spec(i, width, height, seed, fb);
        let mut s = generate_scene(&spec)?;
        s.id = sample_id(i);
        all.push(s);
    }
    let held = all.split_off(count - heldout_count(count));
    Ok((all, held))
}
