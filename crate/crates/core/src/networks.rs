//! The three encoder–decoders: student `G_s`, backward `G_b` (sharing the
//! student's encoder) and the inconsistency-aware refiner `G_i`.
//!
//! Topology, for `L` encoder levels of widths `wₖ = base·2ᵏ⁻¹`:
//!
//! * encoder level `k`: 3×3 stride-2 conv → elu → 3×3 conv → elu, giving
//!   `eₖ` at `(H/2ᵏ, W/2ᵏ)`;
//! * decoder scale `n` (from `L−1` down to 0): nearest ×2 upsample → 3×3
//!   conv → elu, concatenated with the skip `eₙ` (`n ≥ 1`) → 3×3 conv → elu,
//!   giving the feature map `ξⁿ`;
//! * for `n ≤ 3` a 3×3 head maps `ξⁿ` to `dⁿ = d_max·sigmoid(·)`, and
//!   `ξⁿ ‖ dⁿ` feeds the next scale up.
//!
//! Image inputs are centered as `(x − 0.45)/0.225` first.
//!
//! `G_i` reads `I_r ‖ 𝓘_r ‖ d⁰` (7 channels) and appends `dᵏ` to the encoder
//! output of level `k ∈ {1,2,3}` before level `k+1`; its decoder mirrors the
//! student's exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{FEATURE_SCALES, NUM_SCALES};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Real, Shape, Tensor};
use crate::warp::{DisparityMap, Frame};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub base_channels: usize,
    #[serde(rename = "levels")]
    pub num_encoder_levels: usize,
    pub d_max_fraction: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_channels: 8,
            num_encoder_levels: 4,
            d_max_fraction: 0.3,
            seed: 7,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.num_encoder_levels < NUM_SCALES {
            return Err(Error::Config(format!(
                "levels must be at least {NUM_SCALES} to produce every disparity scale"
            )));
        }
        if !(self.d_max_fraction > 0.0 && self.d_max_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "d_max_fraction {} is outside (0, 1]",
                self.d_max_fraction
            )));
        }
        let div = 1usize << self.num_encoder_levels;
        if height == 0 || width == 0 || height % div != 0 || width % div != 0 {
            return Err(Error::Config(format!(
                "image {width}x{height} is not divisible by 2^{}",
                self.num_encoder_levels
            )));
        }
        Ok(())
    }

    fn enc_width(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    fn dec_width(&self, scale: usize) -> usize {
        self.base_channels << (scale.max(1) - 1)
    }
}

/// Parameter groups; names in the store are prefixed with [`ParamGroup::prefix`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    EncoderShared,
    DecoderS,
    DecoderB,
    EncoderI,
    DecoderI,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::EncoderShared,
        ParamGroup::DecoderS,
        ParamGroup::DecoderB,
        ParamGroup::EncoderI,
        ParamGroup::DecoderI,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::EncoderShared => "encoder_shared/",
            ParamGroup::DecoderS => "decoder_s/",
            ParamGroup::DecoderB => "decoder_b/",
            ParamGroup::EncoderI => "encoder_i/",
            ParamGroup::DecoderI => "decoder_i/",
        }
    }

    pub fn of_name(name: &str) -> Option<ParamGroup> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| name.starts_with(g.prefix()))
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

impl Conv {
    fn apply<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), self.stride, 1)
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    levels: Vec<[Conv; 2]>,
    /// Whether level `k+1` expects `eₖ ‖ dᵏ`.
    injects: bool,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    upconv: Conv,
    iconv: Conv,
    head: Option<Conv>,
}

/// Ordered from the coarsest scale (`L−1`) down to 0.
#[derive(Clone, Debug)]
struct Decoder {
    levels: Vec<DecoderLevel>,
}

/// Disparities at scales 0..=3 and decoder features at scales 0..=2.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub disparities: [DisparityMap; NUM_SCALES],
    pub features: [Var; FEATURE_SCALES],
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn conv(&mut self, name: String, c_in: usize, c_out: usize, stride: usize) -> Result<Conv> {
        let k = 3;
        let bound = (6.0 / ((c_in + c_out) * k * k) as f64).sqrt();
        let shape = Shape::new(c_out, c_in, k, k);
        let data = (0..shape.numel())
            .map(|_| T::of(self.rng.gen_range(-bound..bound)))
            .collect();
        let w = self
            .store
            .insert(format!("{name}/weight"), Tensor::from_vec(shape, data)?)?;
        let b = self.store.insert(
            format!("{name}/bias"),
            Tensor::zeros(Shape::new(1, c_out, 1, 1)),
        )?;
        Ok(Conv { w, b, stride })
    }

    fn encoder(&mut self, cfg: &NetworkConfig, group: ParamGroup, c_in: usize, injects: bool) -> Result<Encoder> {
        let p = group.prefix();
        let mut levels = Vec::with_capacity(cfg.num_encoder_levels);
        let mut prev = c_in;
        for k in 1..=cfg.num_encoder_levels {
            let w = cfg.enc_width(k);
            let down = self.conv(format!("{p}level{k}/down"), prev, w, 2)?;
            let refine = self.conv(format!("{p}level{k}/conv"), w, w, 1)?;
            levels.push([down, refine]);
            prev = w + usize::from(injects && k < NUM_SCALES);
        }
        Ok(Encoder { levels, injects })
    }

    fn decoder(&mut self, cfg: &NetworkConfig, group: ParamGroup) -> Result<Decoder> {
        let p = group.prefix();
        let l = cfg.num_encoder_levels;
        let mut levels = Vec::with_capacity(l);
        let mut c_in = cfg.enc_width(l);
        for n in (0..l).rev() {
            let dw = cfg.dec_width(n);
            let upconv = self.conv(format!("{p}scale{n}/upconv"), c_in, dw, 1)?;
            let skip = if n >= 1 { cfg.enc_width(n) } else { 0 };
            let iconv = self.conv(format!("{p}scale{n}/iconv"), dw + skip, dw, 1)?;
            let head = if n < NUM_SCALES {
                Some(self.conv(format!("{p}scale{n}/disp"), dw, 1, 1)?)
            } else {
                None
            };
            c_in = dw + usize::from(head.is_some());
            levels.push(DecoderLevel { upconv, iconv, head });
        }
        Ok(Decoder { levels })
    }
}

/// Parameters and wiring of all three networks.
#[derive(Clone, Debug)]
pub struct NetworkBundle<T> {
    pub config: NetworkConfig,
    pub height: usize,
    pub width: usize,
    pub params: ParamStore<T>,
    encoder_shared: Encoder,
    decoder_s: Decoder,
    decoder_b: Decoder,
    encoder_i: Encoder,
    decoder_i: Decoder,
}

/// The three forward passes used by the cycle. Implemented by
/// [`NetworkBundle`] and by fixed-output stand-ins in tests.
pub trait CycleNetworks<T: Real> {
    fn student_forward(&self, g: &mut Graph<T>, right: Var) -> Result<ForwardOutputs>;
    fn backward_forward(&self, g: &mut Graph<T>, left_hat: Var) -> Result<ForwardOutputs>;
    fn inconsistency_forward(
        &self,
        g: &mut Graph<T>,
        right: Var,
        inconsistency: Var,
        d_l: &DisparityMap,
        d_l_multi: &[DisparityMap; 3],
    ) -> Result<ForwardOutputs>;
}

impl<T: Real> NetworkBundle<T> {
    /// Builds and initializes all groups for `height × width` inputs.
    pub fn new(config: NetworkConfig, height: usize, width: usize) -> Result<Self> {
        config.validate(height, width)?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let encoder_shared = b.encoder(&config, ParamGroup::EncoderShared, 3, false)?;
        let decoder_s = b.decoder(&config, ParamGroup::DecoderS)?;
        let decoder_b = b.decoder(&config, ParamGroup::DecoderB)?;
        let encoder_i = b.encoder(&config, ParamGroup::EncoderI, 7, true)?;
        let decoder_i = b.decoder(&config, ParamGroup::DecoderI)?;
        Ok(NetworkBundle {
            config,
            height,
            width,
            params,
            encoder_shared,
            decoder_s,
            decoder_b,
            encoder_i,
            decoder_i,
        })
    }

    pub fn d_max(&self) -> f64 {
        self.config.d_max_fraction * self.width as f64
    }

    pub fn group_ids(&self, group: ParamGroup) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| self.params.get(id).name.starts_with(group.prefix()))
            .collect()
    }

    pub fn group_numel(&self, group: ParamGroup) -> usize {
        self.group_ids(group)
            .into_iter()
            .map(|id| self.params.get(id).shape().numel())
            .sum()
    }

    /// Marks exactly the parameters of `groups` as trainable.
    pub fn set_trainable(&mut self, groups: &[ParamGroup]) {
        self.params.set_trainable(|name| {
            ParamGroup::of_name(name).is_some_and(|g| groups.contains(&g))
        });
    }

    /// Copies every value of group `from` into the identically shaped group `to`.
    pub fn copy_group(&mut self, from: ParamGroup, to: ParamGroup) -> Result<()> {
        let src = self.group_ids(from);
        let dst = self.group_ids(to);
        if src.len() != dst.len() {
            return Err(Error::invalid(
                "copy_group",
                format!("{from:?} and {to:?} have different layouts"),
            ));
        }
        for (s, d) in src.into_iter().zip(dst) {
            let v = self.params.get(s).value.clone();
            if v.shape() != self.params.get(d).shape() {
                return Err(Error::invalid("copy_group", "shape mismatch"));
            }
            self.params.get_mut(d).value = v;
        }
        Ok(())
    }

    /// Same architecture and values at another precision.
    pub fn cast<U: Real>(&self) -> NetworkBundle<U> {
        NetworkBundle {
            config: self.config,
            height: self.height,
            width: self.width,
            params: self.params.cast(),
            encoder_shared: self.encoder_shared.clone(),
            decoder_s: self.decoder_s.clone(),
            decoder_b: self.decoder_b.clone(),
            encoder_i: self.encoder_i.clone(),
            decoder_i: self.decoder_i.clone(),
        }
    }

    fn check_input(&self, g: &Graph<T>, x: Var, channels: usize, what: &str) -> Result<()> {
        let s = g.shape(x);
        if s.c != channels || s.h != self.height || s.w != self.width {
            return Err(Error::invalid(
                "network forward",
                format!(
                    "{what} has shape {s}, expected Nx{channels}x{}x{}",
                    self.height, self.width
                ),
            ));
        }
        Ok(())
    }

    fn encode(
        &self,
        g: &mut Graph<T>,
        enc: &Encoder,
        input: Var,
        inject: Option<&[DisparityMap; 3]>,
    ) -> Result<Vec<Var>> {
        let mut skips = Vec::with_capacity(enc.levels.len());
        let mut x = input;
        for (i, [down, refine]) in enc.levels.iter().enumerate() {
            let k = i + 1;
            let h = down.apply(g, &self.params, x)?;
            let h = g.elu(h);
            let e = refine.apply(g, &self.params, h)?;
            let e = g.elu(e);
            skips.push(e);
            x = match inject {
                Some(maps) if enc.injects && k < NUM_SCALES => {
                    let d = &maps[k - 1];
                    g.concat_channels(&[e, d.var])?
                }
                _ => e,
            };
        }
        Ok(skips)
    }

    fn decode(
        &self,
        g: &mut Graph<T>,
        dec: &Decoder,
        skips: &[Var],
        frame: Frame,
    ) -> Result<ForwardOutputs> {
        let d_max = self.d_max();
        let mut x = *skips.last().expect("at least one level");
        let mut disparities: Vec<Option<DisparityMap>> = vec![None; NUM_SCALES];
        let mut features: Vec<Option<Var>> = vec![None; FEATURE_SCALES];
        let levels = dec.levels.len();
        for (i, lvl) in dec.levels.iter().enumerate() {
            let n = levels - 1 - i;
            let up = g.upsample_nearest(x, 2)?;
            let u = lvl.upconv.apply(g, &self.params, up)?;
            let u = g.elu(u);
            let joined = if n >= 1 {
                g.concat_channels(&[u, skips[n - 1]])?
            } else {
                u
            };
            let f = lvl.iconv.apply(g, &self.params, joined)?;
            let f = g.elu(f);
            if n < FEATURE_SCALES {
                features[n] = Some(f);
            }
            x = match &lvl.head {
                Some(head) => {
                    let pre = head.apply(g, &self.params, f)?;
                    let s = g.sigmoid(pre);
                    let d = g.scale(s, d_max);
                    disparities[n] = Some(DisparityMap::new(d, frame, n));
                    g.concat_channels(&[f, d])?
                }
                None => f,
            };
        }
        let disparities = [0, 1, 2, 3].map(|n| disparities[n].expect("head at every scale ≤ 3"));
        let features = [0, 1, 2].map(|n| features[n].expect("features at scales ≤ 2"));
        Ok(ForwardOutputs {
            disparities,
            features,
        })
    }
}

const IMAGE_MEAN: f64 = 0.45;
const IMAGE_STD: f64 = 0.225;

/// Centers `[0, 1]` images before the first convolution.
fn normalize_image<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    g.affine(x, 1.0 / IMAGE_STD, -IMAGE_MEAN / IMAGE_STD)
}

impl<T: Real> CycleNetworks<T> for NetworkBundle<T> {
    fn student_forward(&self, g: &mut Graph<T>, right: Var) -> Result<ForwardOutputs> {
        self.check_input(g, right, 3, "right image")?;
        let x = normalize_image(g, right);
        let skips = self.encode(g, &self.encoder_shared, x, None)?;
        self.decode(g, &self.decoder_s, &skips, Frame::Left)
    }

    fn backward_forward(&self, g: &mut Graph<T>, left_hat: Var) -> Result<ForwardOutputs> {
        self.check_input(g, left_hat, 3, "synthesized left image")?;
        let x = normalize_image(g, left_hat);
        let skips = self.encode(g, &self.encoder_shared, x, None)?;
        self.decode(g, &self.decoder_b, &skips, Frame::Right)
    }

    fn inconsistency_forward(
        &self,
        g: &mut Graph<T>,
        right: Var,
        inconsistency: Var,
        d_l: &DisparityMap,
        d_l_multi: &[DisparityMap; 3],
    ) -> Result<ForwardOutputs> {
        self.check_input(g, right, 3, "right image")?;
        self.check_input(g, inconsistency, 3, "inconsistency tensor")?;
        self.check_input(g, d_l.var, 1, "full-resolution disparity")?;
        for (i, d) in d_l_multi.iter().enumerate() {
            let s = g.shape(d.var);
            let n = i + 1;
            if d.scale != n || s.c != 1 || s.h != self.height >> n || s.w != self.width >> n {
                return Err(Error::invalid(
                    "inconsistency_forward",
                    format!("disparity for scale {n} has shape {s} (scale tag {})", d.scale),
                ));
            }
        }
        let x = normalize_image(g, right);
        let input = g.concat_channels(&[x, inconsistency, d_l.var])?;
        let skips = self.encode(g, &self.encoder_i, input, Some(d_l_multi))?;
        self.decode(g, &self.decoder_i, &skips, Frame::Left)
    }
}
