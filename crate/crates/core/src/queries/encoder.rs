//! Object encoder: pools cue-frame features into object and background
//! queries and refines them with hard-masked cross-attention.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::segments::{downsample_mask, split_mask_into_segments, subsample_points};
use super::{QueryRole, TargetQuerySet};
use crate::error::{bail, Result};
use crate::neck::Level;
use crate::nn::{constant, index_tensor, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention, ParamBuilder};
use crate::types::Mask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectEncoderConfig {
    /// Queries per object for mask cues.
    pub q_o: usize,
    /// Queries per object for point cues.
    pub q_o_point: usize,
    pub p_max: usize,
    /// Side of the background grid; `0` disables background queries.
    pub bg_grid: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    #[serde(default = "yes")]
    pub self_attention: bool,
}

fn yes() -> bool {
    true
}

impl Default for ObjectEncoderConfig {
    fn default() -> Self {
        Self {
            q_o: 4,
            q_o_point: 1,
            p_max: 128,
            bg_grid: 4,
            num_layers: 3,
            num_heads: 4,
            ffn_dim: 128,
            self_attention: true,
        }
    }
}

impl ObjectEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q_o == 0 || self.q_o_point == 0 {
            bail!(Config, "q_o must be at least 1");
        }
        if self.p_max == 0 {
            bail!(Config, "p_max must be at least 1");
        }
        Ok(())
    }

    pub fn num_background(&self) -> usize {
        self.bg_grid * self.bg_grid
    }
}

/// One guided object: a full-resolution cue mask on clip frame `frame`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectCueInput {
    pub frame: usize,
    pub mask: Mask,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    self_attn: Option<(MultiHeadAttention, LayerNorm)>,
    cross_attn: MultiHeadAttention,
    cross_norm: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct ObjectEncoder {
    /// `(B, D)` used for background cells without any non-object pixel.
    pub bg_fallback: Option<Tensor>,
    pub embed_map: Linear,
    layers: Vec<EncoderLayer>,
    config: ObjectEncoderConfig,
}

/// Everything the refinement needs besides the query values.
struct Prepared {
    /// `(N, T*hw)` average-pooling weights.
    pool: Tensor,
    /// `(N, B)` selector of fallback rows for empty background cells.
    fallback_sel: Option<Tensor>,
    /// Flat stride-4 rows of all sampled key points.
    keys: Tensor,
    /// `(N, K)` hard attention mask as an additive bias.
    bias: Tensor,
    roles: Vec<QueryRole>,
}

impl ObjectEncoder {
    pub fn new(pb: &mut ParamBuilder, dim: usize, config: &ObjectEncoderConfig) -> Result<Self> {
        config.validate()?;
        let b = config.num_background();
        let bg_fallback = if b > 0 {
            Some(pb.param("bg_fallback", &[b, dim], Init::Uniform(0.5))?)
        } else {
            None
        };
        let embed_map = Linear::new(&mut pb.pp("embed_map"), dim, dim, true)?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let mut lp = pb.pp(format!("layers.{i}"));
            let self_attn = if config.self_attention {
                Some((
                    MultiHeadAttention::new(&mut lp.pp("self_attn"), dim, config.num_heads)?,
                    LayerNorm::new(&mut lp.pp("self_norm"), dim)?,
                ))
            } else {
                None
            };
            layers.push(EncoderLayer {
                self_attn,
                cross_attn: MultiHeadAttention::new(&mut lp.pp("cross_attn"), dim, config.num_heads)?,
                cross_norm: LayerNorm::new(&mut lp.pp("cross_norm"), dim)?,
                ffn: FeedForward::new(&mut lp.pp("ffn"), dim, config.ffn_dim)?,
            });
        }
        Ok(Self {
            bg_fallback,
            embed_map,
            layers,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &ObjectEncoderConfig {
        &self.config
    }

    /// Mask cues, `q_o` queries per object.
    pub fn encode_masks<R: Rng>(&self, f4: &Level, objects: &[ObjectCueInput], rng: &mut R) -> Result<TargetQuerySet> {
        Ok(self.encode(f4, objects, self.config.q_o, rng)?.0)
    }

    /// Point cues `(frame, y, x)` in full-resolution pixels. Each point
    /// becomes a one-pixel mask encoded by the mask path.
    pub fn encode_points<R: Rng>(
        &self,
        f4: &Level,
        points: &[(usize, usize, usize)],
        rng: &mut R,
    ) -> Result<TargetQuerySet> {
        let (h, w) = (4 * f4.h, 4 * f4.w);
        let mut objects = Vec::with_capacity(points.len());
        for &(frame, y, x) in points {
            if y >= h || x >= w {
                bail!(InvalidInput, "point ({y}, {x}) outside the {h}x{w} frame");
            }
            let mut mask = Mask::empty(h, w);
            mask.set(y, x, true);
            objects.push(ObjectCueInput { frame, mask });
        }
        Ok(self.encode(f4, &objects, self.config.q_o_point, rng)?.0)
    }

    /// Full encoding with `q_o` queries per object. Also returns, per
    /// refinement layer, the cross-attention weights `(1, heads, N, K)`.
    pub fn encode<R: Rng>(
        &self,
        f4: &Level,
        objects: &[ObjectCueInput],
        q_o: usize,
        rng: &mut R,
    ) -> Result<(TargetQuerySet, Vec<Tensor>)> {
        let prep = self.prepare(f4, objects, q_o, rng)?;
        let (t, hw, d) = f4.feat.dims3()?;
        let flat = f4.feat.reshape((t * hw, d))?;
        let mut init = prep.pool.matmul(&flat)?;
        if let (Some(sel), Some(fb)) = (&prep.fallback_sel, &self.bg_fallback) {
            init = (init + sel.matmul(fb)?)?;
        }
        let embeddings = self.embed_map.forward(&init)?;
        let values = flat.index_select(&prep.keys, 0)?;
        let keys = (&values + f4.pos.reshape((t * hw, d))?.index_select(&prep.keys, 0)?)?;
        let (keys, values) = (keys.unsqueeze(0)?, values.unsqueeze(0)?);
        let e = embeddings.unsqueeze(0)?;
        let mut x = init;
        let mut weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut h = x.unsqueeze(0)?;
            if let Some((sa, norm)) = &layer.self_attn {
                let qk = (&h + &e)?;
                h = norm.forward(&(&h + sa.forward(&qk, &qk, &h, None)?)?)?;
            }
            let (ca, w) = layer.cross_attn.forward_with_weights(&(&h + &e)?, &keys, &values, Some(&prep.bias))?;
            h = layer.cross_norm.forward(&(&h + ca)?)?;
            h = layer.ffn.forward(&h)?;
            weights.push(w);
            x = h.squeeze(0)?;
        }
        Ok((
            TargetQuerySet {
                queries: x,
                embeddings,
                roles: prep.roles,
                classifier: None,
            },
            weights,
        ))
    }

    fn prepare<R: Rng>(&self, f4: &Level, objects: &[ObjectCueInput], q_o: usize, rng: &mut R) -> Result<Prepared> {
        let (t, hw, _) = f4.feat.dims3()?;
        let (h, w) = (f4.h, f4.w);
        let dtype = f4.feat.dtype();
        let b = self.config.num_background();
        let mut small = Vec::with_capacity(objects.len());
        for (o, obj) in objects.iter().enumerate() {
            if obj.frame >= t {
                bail!(InvalidInput, "object {o} cue frame {} outside the {t}-frame clip", obj.frame);
            }
            if obj.mask.height != 4 * h || obj.mask.width != 4 * w {
                bail!(Shape, "object {o} cue mask is {}x{}, expected {}x{}", obj.mask.height, obj.mask.width, 4 * h, 4 * w);
            }
            if obj.mask.is_empty() {
                bail!(InvalidInput, "object {o} cue mask is empty");
            }
            small.push(downsample_mask(&obj.mask, 4));
        }

        let n = objects.len() * q_o + b;
        let mut pool = vec![0.0; n * t * hw];
        let mut roles = Vec::with_capacity(n);
        let mut row = 0;
        for (o, m) in small.iter().enumerate() {
            let base = objects[o].frame * hw;
            for (k, seg) in split_mask_into_segments(m, q_o)?.iter().enumerate() {
                let pix = if seg.is_empty() { m.points() } else { seg.points() };
                let wgt = 1.0 / pix.len() as f64;
                for (y, x) in pix {
                    pool[row * t * hw + base + y * w + x] = wgt;
                }
                roles.push(QueryRole::Object { object: o, segment: k });
                row += 1;
            }
        }

        let bg_frame = objects.iter().map(|o| o.frame).min().unwrap_or(0);
        let mut non_object = Mask::full(h, w);
        for (o, m) in small.iter().enumerate() {
            if objects[o].frame == bg_frame {
                for (y, x) in m.points() {
                    non_object.set(y, x, false);
                }
            }
        }
        let mut fallback_sel = None;
        if b > 0 {
            let g = self.config.bg_grid;
            let mut cells: Vec<Vec<(usize, usize)>> = vec![Vec::new(); b];
            for (y, x) in non_object.points() {
                cells[(y * g / h) * g + x * g / w].push((y, x));
            }
            let mut sel = vec![0.0; b * b];
            for (c, pix) in cells.iter().enumerate() {
                if pix.is_empty() {
                    sel[c * b + c] = 1.0;
                } else {
                    let wgt = 1.0 / pix.len() as f64;
                    for &(y, x) in pix {
                        pool[row * t * hw + bg_frame * hw + y * w + x] = wgt;
                    }
                }
                roles.push(QueryRole::ObjectBackground { cell: c });
                row += 1;
            }
            let mut full = vec![0.0; n * b];
            full[(n - b) * b..].copy_from_slice(&sel);
            fallback_sel = Some(constant(full, &[n, b], dtype)?);
        }

        // Key points: each object's sampled pixels, then non-object pixels.
        let mut key_rows = Vec::new();
        let mut key_group = Vec::new();
        for (o, m) in small.iter().enumerate() {
            for (y, x) in subsample_points(m, self.config.p_max, rng)? {
                key_rows.push((objects[o].frame * hw + y * w + x) as u32);
                key_group.push(o);
            }
        }
        let bg_group = objects.len();
        let bg_has_points = !non_object.is_empty();
        if b > 0 && bg_has_points {
            for (y, x) in subsample_points(&non_object, self.config.p_max, rng)? {
                key_rows.push((bg_frame * hw + y * w + x) as u32);
                key_group.push(bg_group);
            }
        }
        if key_rows.is_empty() {
            bail!(InvalidInput, "object encoder received neither objects nor background points");
        }
        let k = key_rows.len();
        let mut bias = vec![0.0; n * k];
        for (i, r) in roles.iter().enumerate() {
            let group = match r {
                QueryRole::Object { object, .. } => *object,
                _ if bg_has_points => bg_group,
                _ => continue,
            };
            for (j, &kg) in key_group.iter().enumerate() {
                if kg != group {
                    bias[i * k + j] = -1e9;
                }
            }
        }
        Ok(Prepared {
            pool: constant(pool, &[n, t * hw], dtype)?,
            fallback_sel,
            keys: index_tensor(key_rows)?,
            bias: constant(bias, &[n, k], dtype)?,
            roles,
        })
    }
}
