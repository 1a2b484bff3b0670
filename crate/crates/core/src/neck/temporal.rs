//! Spatially windowed, temporally global self-attention over the two
//! coarsest levels.
//!
//! The stride-32 plane is tiled into `g × g` cells. A cell covers the same
//! normalized region of the stride-16 plane (`2g × 2g` pixels there), and
//! all stride-32 and stride-16 tokens inside that region, over every frame
//! of the clip, attend to one another.

use candle_core::Tensor;

use super::Level;
use crate::error::{bail, Result};
use crate::nn::{index_tensor, MultiHeadAttention, ParamBuilder};

#[derive(Debug, Clone)]
pub struct TemporalAttention {
    pub attn: MultiHeadAttention,
    grid: usize,
}

/// Token layout of one tiling: per cell, the flat row indices into the
/// concatenated `[F32 tokens of all frames; F16 tokens of all frames]` table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellLayout {
    pub cells: Vec<Vec<u32>>,
}

impl CellLayout {
    pub fn new(t: usize, coarse: (usize, usize), fine: (usize, usize), grid: usize) -> Result<Self> {
        let (h32, w32) = coarse;
        let (h16, w16) = fine;
        if grid == 0 || h32 % grid != 0 || w32 % grid != 0 {
            bail!(Shape, "stride-32 plane {h32}x{w32} is not divisible by temporal grid {grid}");
        }
        if h16 != 2 * h32 || w16 != 2 * w32 {
            bail!(Shape, "stride-16 plane {h16}x{w16} is not twice the stride-32 plane {h32}x{w32}");
        }
        let n32 = h32 * w32;
        let n16 = h16 * w16;
        let mut cells = Vec::new();
        for cy in 0..h32 / grid {
            for cx in 0..w32 / grid {
                let mut rows = Vec::with_capacity(t * grid * grid * 5);
                for ti in 0..t {
                    for y in cy * grid..(cy + 1) * grid {
                        for x in cx * grid..(cx + 1) * grid {
                            rows.push((ti * n32 + y * w32 + x) as u32);
                        }
                    }
                    for y in 2 * cy * grid..2 * (cy + 1) * grid {
                        for x in 2 * cx * grid..2 * (cx + 1) * grid {
                            rows.push((t * n32 + ti * n16 + y * w16 + x) as u32);
                        }
                    }
                }
                cells.push(rows);
            }
        }
        Ok(Self { cells })
    }

    pub fn tokens_per_cell(&self) -> usize {
        self.cells.first().map_or(0, Vec::len)
    }
}

impl TemporalAttention {
    pub fn new(pb: &mut ParamBuilder, dim: usize, heads: usize, grid: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(&mut pb.pp("attn"), dim, heads)?,
            grid,
        })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    /// `coarse` is the stride-32 level, `fine` the stride-16 level. Returns
    /// `residual + attention` for both.
    pub fn forward(&self, coarse: &Level, fine: &Level) -> Result<(Tensor, Tensor)> {
        let (t, n32, dim) = coarse.feat.dims3()?;
        let n16 = fine.feat.dims()[1];
        let layout = CellLayout::new(t, (coarse.h, coarse.w), (fine.h, fine.w), self.grid)?;
        let table = Tensor::cat(
            &[
                coarse.feat.reshape((t * n32, dim))?,
                fine.feat.reshape((t * n16, dim))?,
            ],
            0,
        )?;
        let pos = Tensor::cat(
            &[
                coarse.pos.reshape((t * n32, dim))?,
                fine.pos.reshape((t * n16, dim))?,
            ],
            0,
        )?;
        let order: Vec<u32> = layout.cells.iter().flatten().copied().collect();
        let mut inverse = vec![0u32; order.len()];
        for (i, &r) in order.iter().enumerate() {
            inverse[r as usize] = i as u32;
        }
        let order = index_tensor(order)?;
        let n_cells = layout.cells.len();
        let tpc = layout.tokens_per_cell();
        let x = table.index_select(&order, 0)?.reshape((n_cells, tpc, dim))?;
        let p = pos.index_select(&order, 0)?.reshape((n_cells, tpc, dim))?;
        let qk = (&x + &p)?;
        let y = self.attn.forward(&qk, &qk, &x, None)?;
        let y = y.reshape((n_cells * tpc, dim))?.index_select(&index_tensor(inverse)?, 0)?;
        let out = (table + y)?;
        Ok((
            out.narrow(0, 0, t * n32)?.reshape((t, n32, dim))?,
            out.narrow(0, t * n32, t * n16)?.reshape((t, n16, dim))?,
        ))
    }
}
