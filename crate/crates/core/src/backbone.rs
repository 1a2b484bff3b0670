//! Per-frame convolutional feature extractor.
//!
//! Frames are stacked on the batch axis, so the network never mixes
//! information across time.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::{Conv2d, GroupNorm, ParamBuilder};

/// Output strides of the four pyramid levels, finest first.
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Channel widths at strides 4, 8, 16, 32.
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    /// Group count for group normalization (reduced to a divisor of the
    /// channel width where needed).
    pub norm_groups: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: [32, 64, 128, 256],
            blocks_per_stage: [1, 1, 1, 1],
            norm_groups: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.iter().any(|&c| c == 0) {
            bail!(Config, "backbone stage widths must be positive");
        }
        if self.norm_groups == 0 {
            bail!(Config, "backbone norm_groups must be positive");
        }
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone)]
struct ConvNorm {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvNorm {
    fn new(pb: &mut ParamBuilder, cin: usize, cout: usize, stride: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut pb.pp("conv"), cin, cout, 3, stride, false)?,
            norm: GroupNorm::new(&mut pb.pp("norm"), cout, gcd(groups, cout))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.norm.forward(&self.conv.forward(x)?)
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    a: ConvNorm,
    b: ConvNorm,
}

impl ResidualBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.a.forward(x)?.relu()?;
        let h = self.b.forward(&h)?;
        Ok((x + h)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    down: ConvNorm,
    blocks: Vec<ResidualBlock>,
}

/// Raw multi-scale features, one `(T, C_s, H/s, W/s)` tensor per stride in
/// [`STRIDES`] order.
#[derive(Debug, Clone)]
pub struct RawPyramid {
    pub maps: [Tensor; 4],
}

#[derive(Debug, Clone)]
pub struct Backbone {
    stem: ConvNorm,
    stages: Vec<Stage>,
    config: BackboneConfig,
}

impl Backbone {
    pub fn new(pb: &mut ParamBuilder, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let g = config.norm_groups;
        let c = config.stage_channels;
        let stem = ConvNorm::new(&mut pb.pp("stem"), 3, c[0], 2, g)?;
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let mut sp = pb.pp(format!("stage{s}"));
            let cin = if s == 0 { c[0] } else { c[s - 1] };
            let down = ConvNorm::new(&mut sp.pp("down"), cin, c[s], 2, g)?;
            let mut blocks = Vec::with_capacity(config.blocks_per_stage[s]);
            for b in 0..config.blocks_per_stage[s] {
                let mut bp = sp.pp(format!("block{b}"));
                blocks.push(ResidualBlock {
                    a: ConvNorm::new(&mut bp.pp("a"), c[s], c[s], 1, g)?,
                    b: ConvNorm::new(&mut bp.pp("b"), c[s], c[s], 1, g)?,
                });
            }
            stages.push(Stage { down, blocks });
        }
        Ok(Self {
            stem,
            stages,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// `frames`: `(T, 3, H, W)` normalized pixels.
    pub fn forward(&self, frames: &Tensor) -> Result<RawPyramid> {
        let (_, c, h, w) = frames.dims4()?;
        if c != 3 {
            bail!(Shape, "backbone expects 3 input channels, got {c}");
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            bail!(Shape, "frame size {h}x{w} is not divisible by 32");
        }
        let mut x = self.stem.forward(frames)?.relu()?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.down.forward(&x)?.relu()?;
            for b in &stage.blocks {
                x = b.forward(&x)?;
            }
            outs.push(x.clone());
        }
        let maps: [Tensor; 4] = outs.try_into().expect("four stages");
        Ok(RawPyramid { maps })
    }
}
