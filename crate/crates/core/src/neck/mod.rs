//! Temporal neck: projects the raw pyramid to a common width and alternates
//! per-frame deformable attention (strides 32/16/8) with windowed temporal
//! attention (strides 32/16). The stride-4 map is produced by lateral fusion.

mod deformable;
mod posenc;
mod temporal;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

pub use deformable::DeformableAttention;
pub use posenc::sinusoidal_3d;
pub use temporal::{CellLayout, TemporalAttention};

use crate::backbone::{RawPyramid, STRIDES};
use crate::error::{bail, Result};
use crate::nn::{resize_tokens, Conv2d, FeedForward, Init, LayerNorm, Linear, ParamBuilder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeckConfig {
    pub dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Sampling points per head per level.
    pub deform_points: usize,
    /// Temporal-attention cell size in stride-32 pixels.
    pub temporal_grid: usize,
    pub ffn_dim: usize,
    /// Ablation switch: `false` drops every temporal-attention sublayer.
    #[serde(default = "yes")]
    pub temporal_attention: bool,
}

fn yes() -> bool {
    true
}

impl Default for NeckConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            num_layers: 6,
            num_heads: 4,
            deform_points: 4,
            temporal_grid: 2,
            ffn_dim: 128,
            temporal_attention: true,
        }
    }
}

impl NeckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_heads == 0 || self.dim % self.num_heads != 0 {
            bail!(Config, "neck width {} must be a positive multiple of num_heads {}", self.dim, self.num_heads);
        }
        if self.deform_points == 0 || self.temporal_grid == 0 || self.ffn_dim == 0 {
            bail!(Config, "neck deform_points, temporal_grid and ffn_dim must be positive");
        }
        Ok(())
    }
}

/// One pyramid level as a token map.
#[derive(Debug, Clone)]
pub struct Level {
    /// `(T, h*w, D)` features.
    pub feat: Tensor,
    /// `(T, h*w, D)` positional + level embedding, added to queries/keys.
    pub pos: Tensor,
    pub h: usize,
    pub w: usize,
}

/// Multi-scale `D`-wide features, levels ordered by stride `[4, 8, 16, 32]`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: [Level; 4],
}

impl FeaturePyramid {
    pub fn level(&self, stride: usize) -> &Level {
        let i = STRIDES.iter().position(|&s| s == stride).expect("valid stride");
        &self.levels[i]
    }

    pub fn num_frames(&self) -> usize {
        self.levels[0].feat.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.levels[0].feat.dims()[2]
    }

    /// `(h, w)` of the stride-4 map.
    pub fn mask_size(&self) -> (usize, usize) {
        (self.levels[0].h, self.levels[0].w)
    }

    pub fn is_finite(&self) -> Result<bool> {
        for l in &self.levels {
            let v = crate::nn::to_vec_f64(&l.feat)?;
            if v.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sublayer {
    Deformable,
    Temporal,
}

#[derive(Debug, Clone)]
struct DeformLayer {
    attn: DeformableAttention,
    norm: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct TemporalLayer {
    attn: TemporalAttention,
    norm: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct Neck {
    /// Lateral projections for strides `[4, 8, 16, 32]`.
    pub lateral: Vec<Linear>,
    /// Learned per-level embeddings, strides `[4, 8, 16, 32]`.
    pub level_embed: Vec<Tensor>,
    deform: Vec<DeformLayer>,
    temporal: Vec<TemporalLayer>,
    fuse: Conv2d,
    config: NeckConfig,
}

impl Neck {
    pub fn new(pb: &mut ParamBuilder, in_channels: [usize; 4], config: &NeckConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut lateral = Vec::with_capacity(4);
        let mut level_embed = Vec::with_capacity(4);
        for (i, &s) in STRIDES.iter().enumerate() {
            lateral.push(Linear::new(&mut pb.pp(format!("lateral{s}")), in_channels[i], d, true)?);
            level_embed.push(pb.param(&format!("level_embed{s}"), &[d], Init::Uniform(0.1))?);
        }
        let mut deform = Vec::with_capacity(config.num_layers);
        let mut temporal = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let mut lp = pb.pp(format!("layers.{i}"));
            deform.push(DeformLayer {
                attn: DeformableAttention::new(&mut lp.pp("deform"), d, config.num_heads, 3, config.deform_points)?,
                norm: LayerNorm::new(&mut lp.pp("deform_norm"), d)?,
                ffn: FeedForward::new(&mut lp.pp("deform_ffn"), d, config.ffn_dim)?,
            });
            if config.temporal_attention {
                temporal.push(TemporalLayer {
                    attn: TemporalAttention::new(&mut lp.pp("temporal"), d, config.num_heads, config.temporal_grid)?,
                    norm: LayerNorm::new(&mut lp.pp("temporal_norm"), d)?,
                    ffn: FeedForward::new(&mut lp.pp("temporal_ffn"), d, config.ffn_dim)?,
                });
            }
        }
        let fuse = Conv2d::new(&mut pb.pp("fuse"), d, d, 3, 1, true)?;
        Ok(Self {
            lateral,
            level_embed,
            deform,
            temporal,
            fuse,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &NeckConfig {
        &self.config
    }

    /// Order in which attention sublayers are applied.
    pub fn schedule(&self) -> Vec<Sublayer> {
        let mut s = Vec::new();
        for i in 0..self.deform.len() {
            s.push(Sublayer::Deformable);
            if i < self.temporal.len() {
                s.push(Sublayer::Temporal);
            }
        }
        s
    }

    pub fn deformable(&self, layer: usize) -> &DeformableAttention {
        &self.deform[layer].attn
    }

    pub fn temporal(&self, layer: usize) -> &TemporalAttention {
        &self.temporal[layer].attn
    }

    /// 1×1 projection of every raw level to `D` plus positional and level
    /// embeddings (kept separate from the features, added where queries and
    /// keys are formed).
    pub fn project_inputs(&self, raw: &RawPyramid) -> Result<FeaturePyramid> {
        let d = self.config.dim;
        let mut levels = Vec::with_capacity(4);
        for (i, map) in raw.maps.iter().enumerate() {
            let (t, c, h, w) = map.dims4()?;
            let tokens = map.permute((0, 2, 3, 1))?.reshape((t, h * w, c))?;
            let feat = self.lateral[i].forward(&tokens)?;
            let pos = sinusoidal_3d(t, h, w, d, feat.dtype())?.broadcast_add(&self.level_embed[i])?;
            levels.push(Level { feat, pos, h, w });
        }
        Ok(FeaturePyramid {
            levels: levels.try_into().expect("four levels"),
        })
    }

    /// Deformable sublayer `i` (attention + norm + FFN) over strides 32/16/8.
    pub fn apply_deformable(&self, i: usize, pyr: &FeaturePyramid) -> Result<FeaturePyramid> {
        let layer = &self.deform[i];
        let inputs = [pyr.levels[3].clone(), pyr.levels[2].clone(), pyr.levels[1].clone()];
        let outs = layer.attn.forward(&inputs)?;
        let mut levels = pyr.levels.clone();
        for (j, out) in outs.into_iter().enumerate() {
            let idx = 3 - j;
            let y = layer.norm.forward(&out)?;
            levels[idx].feat = layer.ffn.forward(&y)?;
        }
        Ok(FeaturePyramid { levels })
    }

    /// Temporal sublayer `i` over strides 32/16. Strides 8 and 4 are passed
    /// through untouched.
    pub fn apply_temporal(&self, i: usize, pyr: &FeaturePyramid) -> Result<FeaturePyramid> {
        let layer = &self.temporal[i];
        let (c, f) = layer.attn.forward(&pyr.levels[3], &pyr.levels[2])?;
        let mut levels = pyr.levels.clone();
        levels[3].feat = layer.ffn.forward(&layer.norm.forward(&c)?)?;
        levels[2].feat = layer.ffn.forward(&layer.norm.forward(&f)?)?;
        Ok(FeaturePyramid { levels })
    }

    /// Stride-4 map: lateral projection of the raw stride-4 features plus
    /// the upsampled stride-8 level, followed by one 3×3 convolution.
    pub fn fuse_stride4(&self, pyr: &FeaturePyramid) -> Result<FeaturePyramid> {
        let f4 = &pyr.levels[0];
        let f8 = &pyr.levels[1];
        let up = resize_tokens(&f8.feat, (f8.h, f8.w), (f4.h, f4.w))?;
        let sum = (&f4.feat + up)?;
        let (t, _, d) = sum.dims3()?;
        let img = sum.reshape((t, f4.h, f4.w, d))?.permute((0, 3, 1, 2))?.contiguous()?;
        let fused = self
            .fuse
            .forward(&img)?
            .permute((0, 2, 3, 1))?
            .reshape((t, f4.h * f4.w, d))?;
        let mut levels = pyr.levels.clone();
        levels[0].feat = fused;
        Ok(FeaturePyramid { levels })
    }

    pub fn forward(&self, raw: &RawPyramid) -> Result<FeaturePyramid> {
        let mut pyr = self.project_inputs(raw)?;
        let mut di = 0;
        let mut ti = 0;
        for step in self.schedule() {
            pyr = match step {
                Sublayer::Deformable => {
                    di += 1;
                    self.apply_deformable(di - 1, &pyr)?
                }
                Sublayer::Temporal => {
                    ti += 1;
                    self.apply_temporal(ti - 1, &pyr)?
                }
            };
        }
        self.fuse_stride4(&pyr)
    }
}
