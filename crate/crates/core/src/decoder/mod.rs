//! Masked-attention transformer decoder refining target queries against the
//! feature pyramid, with heads evaluated before the first layer and after
//! every layer.

mod heads;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

pub use heads::{evaluate_heads, SegmentationOutput};

use crate::error::{bail, Result};
use crate::neck::{FeaturePyramid, Level};
use crate::nn::{constant, resize_plane, to_vec_f64, FeedForward, LayerNorm, Mlp, MultiHeadAttention, ParamBuilder};
use crate::queries::TargetQuerySet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Three-layer mask-embedding MLP before the mask inner products;
    /// `false` uses the normalized queries directly.
    #[serde(default = "yes")]
    pub mask_mlp: bool,
    #[serde(default = "half")]
    pub mask_threshold: f64,
}

fn yes() -> bool {
    true
}

fn half() -> f64 {
    0.5
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 9,
            num_heads: 4,
            ffn_dim: 128,
            mask_mlp: true,
            mask_threshold: 0.5,
        }
    }
}

/// Strides attended by consecutive decoder layers.
pub const LEVEL_CYCLE: [usize; 3] = [32, 16, 8];

/// Boolean cross-attention mask `(N, T*h*w)` for a level of size `(h, w)`:
/// the sigmoid of each query's stride-4 mask logits, bilinearly resized,
/// thresholded.
pub fn compute_attention_mask(
    mask_logits: &Tensor,
    frames: usize,
    src: (usize, usize),
    dst: (usize, usize),
    threshold: f64,
) -> Result<Vec<bool>> {
    let n = mask_logits.dims()[0];
    let vals = to_vec_f64(mask_logits)?;
    let (sp, dp) = (src.0 * src.1, dst.0 * dst.1);
    let mut out = Vec::with_capacity(n * frames * dp);
    for q in 0..n {
        for t in 0..frames {
            let base = (q * frames + t) * sp;
            let probs: Vec<f64> = vals[base..base + sp].iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
            let r = resize_plane(&probs, src.0, src.1, dst.0, dst.1);
            out.extend(r.into_iter().map(|p| p > threshold));
        }
    }
    Ok(out)
}

/// Additive attention bias from a boolean mask; rows without any allowed
/// token are left unmasked.
pub fn mask_to_bias(mask: &[bool], rows: usize, dtype: candle_core::DType) -> Result<Tensor> {
    let cols = mask.len() / rows.max(1);
    let mut bias = vec![0.0; mask.len()];
    for r in 0..rows {
        let row = &mask[r * cols..(r + 1) * cols];
        if row.iter().any(|&m| m) {
            for (c, &m) in row.iter().enumerate() {
                if !m {
                    bias[r * cols + c] = -1e9;
                }
            }
        }
    }
    constant(bias, &[rows, cols], dtype)
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    cross_attn: MultiHeadAttention,
    cross_norm: LayerNorm,
    self_attn: MultiHeadAttention,
    self_norm: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(pb: &mut ParamBuilder, dim: usize, heads: usize, ffn_dim: usize) -> Result<Self> {
        Ok(Self {
            cross_attn: MultiHeadAttention::new(&mut pb.pp("cross_attn"), dim, heads)?,
            cross_norm: LayerNorm::new(&mut pb.pp("cross_norm"), dim)?,
            self_attn: MultiHeadAttention::new(&mut pb.pp("self_attn"), dim, heads)?,
            self_norm: LayerNorm::new(&mut pb.pp("self_norm"), dim)?,
            ffn: FeedForward::new(&mut pb.pp("ffn"), dim, ffn_dim)?,
        })
    }

    /// `x`, `emb`: `(N, D)`. `mask`: optional `(N, T*h*w)` boolean mask
    /// over the level's tokens.
    pub fn forward(&self, x: &Tensor, emb: &Tensor, level: &Level, mask: Option<&[bool]>) -> Result<Tensor> {
        let (t, hw, d) = level.feat.dims3()?;
        let n = x.dims()[0];
        let v = level.feat.reshape((1, t * hw, d))?;
        let k = (&v + level.pos.reshape((1, t * hw, d))?)?;
        let bias = match mask {
            Some(m) => {
                if m.len() != n * t * hw {
                    bail!(Shape, "attention mask has {} entries, expected {}", m.len(), n * t * hw);
                }
                Some(mask_to_bias(m, n, x.dtype())?)
            }
            None => None,
        };
        let x = x.unsqueeze(0)?;
        let e = emb.unsqueeze(0)?;
        let ca = self.cross_attn.forward(&(&x + &e)?, &k, &v, bias.as_ref())?;
        let x = self.cross_norm.forward(&(&x + ca)?)?;
        let qk = (&x + &e)?;
        let sa = self.self_attn.forward(&qk, &qk, &x, None)?;
        let x = self.self_norm.forward(&(&x + sa)?)?;
        Ok(self.ffn.forward(&x)?.squeeze(0)?)
    }
}

/// Refined queries and the head outputs of every evaluation (the last entry
/// is the final prediction).
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub queries: TargetQuerySet,
    /// Normalized queries at each head evaluation, `L + 1` entries.
    pub layer_queries: Vec<Tensor>,
    pub outputs: Vec<SegmentationOutput>,
}

impl DecoderOutput {
    pub fn last(&self) -> &SegmentationOutput {
        self.outputs.last().expect("at least one head evaluation")
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    layers: Vec<DecoderLayer>,
    head_norm: LayerNorm,
    mask_embed: Option<Mlp>,
    config: DecoderConfig,
}

impl Decoder {
    pub fn new(pb: &mut ParamBuilder, dim: usize, config: &DecoderConfig) -> Result<Self> {
        if config.num_layers == 0 {
            bail!(Config, "decoder needs at least one layer");
        }
        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            layers.push(DecoderLayer::new(&mut pb.pp(format!("layers.{i}")), dim, config.num_heads, config.ffn_dim)?);
        }
        let mask_embed = if config.mask_mlp {
            Some(Mlp::new(&mut pb.pp("mask_embed"), &[dim, dim, dim, dim])?)
        } else {
            None
        };
        Ok(Self {
            layers,
            head_norm: LayerNorm::new(&mut pb.pp("head_norm"), dim)?,
            mask_embed,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn layer(&self, i: usize) -> &DecoderLayer {
        &self.layers[i]
    }

    pub fn heads(&self, x: &Tensor, queries: &TargetQuerySet, pyr: &FeaturePyramid) -> Result<(Tensor, SegmentationOutput)> {
        let normed = self.head_norm.forward(x)?;
        let f4 = &pyr.levels[0];
        let out = evaluate_heads(&normed, queries, self.mask_embed.as_ref(), &f4.feat, (f4.h, f4.w))?;
        Ok((normed, out))
    }

    pub fn forward(&self, queries: &TargetQuerySet, pyr: &FeaturePyramid) -> Result<DecoderOutput> {
        if queries.is_empty() {
            bail!(InvalidInput, "decoder received an empty query set");
        }
        let t = pyr.num_frames();
        let (h4, w4) = pyr.mask_size();
        let mut x = queries.queries.clone();
        let (normed, out) = self.heads(&x, queries, pyr)?;
        let mut layer_queries = vec![normed];
        let mut outputs = vec![out];
        for (i, layer) in self.layers.iter().enumerate() {
            let level = pyr.level(LEVEL_CYCLE[i % 3]);
            let prev = &outputs.last().expect("heads evaluated").query_masks;
            let mask = compute_attention_mask(&prev.detach(), t, (h4, w4), (level.h, level.w), self.config.mask_threshold)?;
            x = layer.forward(&x, &queries.embeddings, level, Some(&mask))?;
            let (normed, out) = self.heads(&x, queries, pyr)?;
            layer_queries.push(normed);
            outputs.push(out);
        }
        Ok(DecoderOutput {
            queries: queries.with_queries(x),
            layer_queries,
            outputs,
        })
    }
}
