//! Multi-scale deformable attention restricted to a single frame.
//!
//! Every pixel of every participating level is a query. Each head samples
//! `K` points per level around the query's normalized location, using
//! bilinear interpolation of that level's values in the same frame. The
//! sampled values are combined with softmax weights over `levels × K`.

use candle_core::Tensor;

use super::Level;
use crate::error::Result;
use crate::nn::{constant, index_tensor, softmax_last, to_vec_f64, Init, Linear, ParamBuilder};

#[derive(Debug, Clone)]
pub struct DeformableAttention {
    pub offsets: Linear,
    pub weights: Linear,
    pub value: Linear,
    pub output: Linear,
    heads: usize,
    levels: usize,
    points: usize,
}

impl DeformableAttention {
    pub fn new(pb: &mut ParamBuilder, dim: usize, heads: usize, levels: usize, points: usize) -> Result<Self> {
        // Offsets start on a radial pattern, one direction per head, growing
        // with the point index; attention logits start uniform.
        let mut bias = Vec::with_capacity(heads * levels * points * 2);
        for h in 0..heads {
            let theta = std::f64::consts::TAU * h as f64 / heads as f64;
            let (s, c) = theta.sin_cos();
            let m = s.abs().max(c.abs());
            for _ in 0..levels {
                for k in 0..points {
                    bias.push(c / m * (k + 1) as f64 * 0.5);
                    bias.push(s / m * (k + 1) as f64 * 0.5);
                }
            }
        }
        let n_off = heads * levels * points * 2;
        let offsets = {
            let mut op = pb.pp("offsets");
            Linear {
                weight: op.param("weight", &[n_off, dim], Init::Zeros)?,
                bias: Some(op.param_from("bias", &[n_off], bias)?),
            }
        };
        let weights = Linear::with_init(
            &mut pb.pp("weights"),
            dim,
            heads * levels * points,
            Init::Zeros,
            Init::Zeros,
        )?;
        Ok(Self {
            offsets,
            weights,
            value: Linear::new(&mut pb.pp("value"), dim, dim, true)?,
            output: Linear::new(&mut pb.pp("output"), dim, dim, true)?,
            heads,
            levels,
            points,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn points(&self) -> usize {
        self.points
    }

    /// Returns `residual + attention` for every level.
    pub fn forward(&self, levels: &[Level]) -> Result<Vec<Tensor>> {
        assert_eq!(levels.len(), self.levels, "deformable attention level count");
        let t = levels[0].feat.dims()[0];
        let dim = levels[0].feat.dims()[2];
        let heads = self.heads;
        let dh = dim / heads;
        let (nl, k) = (self.levels, self.points);
        let sizes: Vec<usize> = levels.iter().map(|l| l.h * l.w).collect();
        let starts: Vec<usize> = sizes
            .iter()
            .scan(0, |acc, &s| {
                let st = *acc;
                *acc += s;
                Some(st)
            })
            .collect();
        let n: usize = sizes.iter().sum();

        let feats: Vec<&Tensor> = levels.iter().map(|l| &l.feat).collect();
        let x = Tensor::cat(&feats, 1)?;
        let pos: Vec<&Tensor> = levels.iter().map(|l| &l.pos).collect();
        let q = (&x + Tensor::cat(&pos, 1)?)?;

        let s_total = t * n * heads * nl * k;
        let off = self.offsets.forward(&q)?.reshape((s_total, 2))?;
        let off_vals = to_vec_f64(&off)?;
        let attn = self.weights.forward(&q)?.reshape((t * n * heads, nl * k))?;
        let attn = softmax_last(&attn)?.reshape((s_total, 1))?;

        // Per-sample constants: integer corner, fractional base, validity.
        let mut shift_x = Vec::with_capacity(s_total);
        let mut shift_y = Vec::with_capacity(s_total);
        let mut valid = Vec::with_capacity(s_total * 4);
        let mut rows = Vec::with_capacity(s_total * 4);
        let mut s = 0usize;
        for ti in 0..t {
            for (lq, lvl_q) in levels.iter().enumerate() {
                for pq in 0..sizes[lq] {
                    let (yq, xq) = (pq / lvl_q.w, pq % lvl_q.w);
                    let rx = (xq as f64 + 0.5) / lvl_q.w as f64;
                    let ry = (yq as f64 + 0.5) / lvl_q.h as f64;
                    for h in 0..heads {
                        for (l, lvl) in levels.iter().enumerate() {
                            let bx = rx * lvl.w as f64 - 0.5;
                            let by = ry * lvl.h as f64 - 0.5;
                            for _ in 0..k {
                                let px = bx + off_vals[2 * s];
                                let py = by + off_vals[2 * s + 1];
                                let x0 = px.floor();
                                let y0 = py.floor();
                                shift_x.push(bx - x0);
                                shift_y.push(by - y0);
                                for (dy, dx) in [(0i64, 0i64), (0, 1), (1, 0), (1, 1)] {
                                    let cx = x0 as i64 + dx;
                                    let cy = y0 as i64 + dy;
                                    let inside = cx >= 0 && cy >= 0 && (cx as usize) < lvl.w && (cy as usize) < lvl.h;
                                    valid.push(if inside { 1.0 } else { 0.0 });
                                    let row = if inside {
                                        ((ti * n + starts[l] + cy as usize * lvl.w + cx as usize) * heads + h) as u32
                                    } else {
                                        0
                                    };
                                    rows.push(row);
                                }
                                s += 1;
                            }
                        }
                    }
                }
            }
        }
        let dtype = x.dtype();
        let fx = constant(shift_x, &[s_total, 1], dtype)?.broadcast_add(&off.narrow(1, 0, 1)?)?;
        let fy = constant(shift_y, &[s_total, 1], dtype)?.broadcast_add(&off.narrow(1, 1, 1)?)?;
        let one = crate::nn::scalar_like(&fx, 1.0)?;
        let gx = one.broadcast_sub(&fx)?;
        let gy = one.broadcast_sub(&fy)?;
        let corner = Tensor::cat(&[(&gx * &gy)?, (&fx * &gy)?, (&gx * &fy)?, (&fx * &fy)?], 1)?;
        let corner = (corner * constant(valid, &[s_total, 4], dtype)?)?;
        let w = corner.broadcast_mul(&attn)?.reshape((t * n * heads, 1, nl * k * 4))?;

        let table = self.value.forward(&x)?.reshape((t * n * heads, dh))?;
        let gathered = table
            .index_select(&index_tensor(rows)?, 0)?
            .reshape((t * n * heads, nl * k * 4, dh))?;
        let sampled = w.matmul(&gathered)?.reshape((t, n, dim))?;
        let y = (x + self.output.forward(&sampled)?)?;

        let mut outs = Vec::with_capacity(nl);
        for l in 0..nl {
            outs.push(y.narrow(1, starts[l], sizes[l])?);
        }
        Ok(outs)
    }
}
