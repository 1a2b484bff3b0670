//! Point-sampled supervision: continuous image-space points, bilinear reads
//! of stride-4 logits at those points, and uncertainty-biased sampling.

use candle_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::{constant, index_tensor};
use crate::types::Mask;

/// A location at full image resolution; `y` in `[0, H)`, `x` in `[0, W)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub frame: usize,
    pub y: f64,
    pub x: f64,
}

impl Point {
    /// Value of a full-resolution per-frame mask at the pixel containing
    /// this point.
    pub fn lookup(&self, masks: &[Mask]) -> bool {
        let m = &masks[self.frame];
        m.get((self.y as usize).min(m.height - 1), (self.x as usize).min(m.width - 1))
    }

    pub fn pixel(&self, width: usize) -> usize {
        self.y as usize * width + self.x as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointConfig {
    pub num_points: usize,
    pub oversample_ratio: f64,
    pub importance_ratio: f64,
}

impl Default for PointConfig {
    fn default() -> Self {
        Self {
            num_points: 1024,
            oversample_ratio: 3.0,
            importance_ratio: 0.75,
        }
    }
}

impl PointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_points == 0 {
            bail!(Config, "num_points must be positive");
        }
        if self.oversample_ratio < 1.0 {
            bail!(Config, "oversample_ratio must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.importance_ratio) {
            bail!(Config, "importance_ratio must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Relates full-resolution image coordinates to a `(T, h, w)` logit grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointGeometry {
    pub frames: usize,
    pub image: (usize, usize),
    pub grid: (usize, usize),
}

impl PointGeometry {
    /// Flat grid indices and bilinear weights of the four cells around `p`
    /// (half-pixel alignment, clamped at the border).
    pub fn corners(&self, p: &Point) -> [(usize, f64); 4] {
        let (gh, gw) = self.grid;
        let axis = |c: f64, img: usize, g: usize| -> (usize, usize, f64) {
            let s = (c * g as f64 / img as f64 - 0.5).clamp(0.0, (g - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(g - 1);
            (i0, i1, s - i0 as f64)
        };
        let (y0, y1, fy) = axis(p.y, self.image.0, gh);
        let (x0, x1, fx) = axis(p.x, self.image.1, gw);
        let base = p.frame * gh * gw;
        [
            (base + y0 * gw + x0, (1.0 - fy) * (1.0 - fx)),
            (base + y0 * gw + x1, (1.0 - fy) * fx),
            (base + y1 * gw + x0, fy * (1.0 - fx)),
            (base + y1 * gw + x1, fy * fx),
        ]
    }

    /// Bilinear read of one flat `T*h*w` row.
    pub fn read(&self, row: &[f64], p: &Point) -> f64 {
        self.corners(p).iter().map(|&(i, w)| w * row[i]).sum()
    }

    /// A uniformly drawn pixel centre.
    pub fn uniform(&self, rng: &mut ChaCha8Rng) -> Point {
        Point {
            frame: rng.random_range(0..self.frames),
            y: rng.random_range(0..self.image.0) as f64 + 0.5,
            x: rng.random_range(0..self.image.1) as f64 + 0.5,
        }
    }

    pub fn cells(&self) -> usize {
        self.frames * self.grid.0 * self.grid.1
    }
}

/// Uniform draws shared by every row sampled in one step: the candidates
/// ranked by uncertainty and the uniform remainder.
#[derive(Debug, Clone, PartialEq)]
pub struct PointPools {
    pub candidates: Vec<Point>,
    pub fill: Vec<Point>,
}

impl PointPools {
    pub fn draw(geom: &PointGeometry, cfg: &PointConfig, rng: &mut ChaCha8Rng) -> Self {
        let (n, k) = (cfg.num_points, important_count(cfg));
        let m = if k == 0 {
            0
        } else {
            ((cfg.oversample_ratio * n as f64).round() as usize).max(k)
        };
        Self {
            candidates: (0..m).map(|_| geom.uniform(rng)).collect(),
            fill: (0..n - k).map(|_| geom.uniform(rng)).collect(),
        }
    }
}

fn important_count(cfg: &PointConfig) -> usize {
    ((cfg.importance_ratio * cfg.num_points as f64).round() as usize).min(cfg.num_points)
}

/// `importance_ratio · n` most uncertain candidates followed by the uniform
/// remainder.
pub fn select_points(uncertainty: impl Fn(&Point) -> f64, pools: &PointPools, cfg: &PointConfig) -> Vec<Point> {
    let k = important_count(cfg);
    let mut scored: Vec<(f64, usize)> = pools.candidates.iter().map(|p| uncertainty(p)).zip(0..).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<Point> = scored.iter().take(k).map(|&(_, i)| pools.candidates[i]).collect();
    out.extend_from_slice(&pools.fill);
    out
}

/// Draws fresh pools and selects `num_points` points from them.
pub fn sample_points_by(
    uncertainty: impl Fn(&Point) -> f64,
    geom: &PointGeometry,
    cfg: &PointConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Point> {
    select_points(uncertainty, &PointPools::draw(geom, cfg, rng), cfg)
}

/// Uncertainty of a binary mask-logit row: `-|logit|`.
pub fn mask_uncertainty<'a>(row: &'a [f64], geom: &'a PointGeometry) -> impl Fn(&Point) -> f64 + 'a {
    move |p| -geom.read(row, p).abs()
}

/// Uncertainty of `C` stacked semantic rows: the negative margin between
/// the two largest logits.
pub fn semantic_uncertainty<'a>(rows: &'a [f64], classes: usize, geom: &'a PointGeometry) -> impl Fn(&Point) -> f64 + 'a {
    let cells = geom.cells();
    move |p| {
        if classes < 2 {
            return 0.0;
        }
        let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for c in 0..classes {
            let v = geom.read(&rows[c * cells..(c + 1) * cells], p);
            if v > a {
                b = a;
                a = v;
            } else if v > b {
                b = v;
            }
        }
        b - a
    }
}

/// Point sampling for one binary mask-logit row.
pub fn sample_supervision_points(
    row: &[f64],
    geom: &PointGeometry,
    cfg: &PointConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Point> {
    sample_points_by(mask_uncertainty(row, geom), geom, cfg, rng)
}

/// Point sampling for `C` semantic rows sharing one point set.
pub fn sample_semantic_points(
    rows: &[f64],
    classes: usize,
    geom: &PointGeometry,
    cfg: &PointConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Point> {
    sample_points_by(semantic_uncertainty(rows, classes, geom), geom, cfg, rng)
}

/// Differentiable bilinear read of `logits` `(R, T*h*w)` at per-row point
/// lists (all of equal length `P`), giving `(R, P)`.
pub fn read_points(logits: &Tensor, points: &[&[Point]], geom: &PointGeometry) -> Result<Tensor> {
    let (r, cells) = logits.dims2()?;
    if points.len() != r {
        bail!(Shape, "{} point lists for {r} rows", points.len());
    }
    if cells != geom.cells() {
        bail!(Shape, "logit rows have {cells} cells, geometry has {}", geom.cells());
    }
    let p = points.first().map_or(0, |x| x.len());
    if points.iter().any(|x| x.len() != p) || p == 0 {
        bail!(InvalidInput, "point lists must be nonempty and of equal length");
    }
    let mut idx = [(); 4].map(|_| Vec::with_capacity(r * p));
    let mut wts = [(); 4].map(|_| Vec::with_capacity(r * p));
    for (row, pts) in points.iter().enumerate() {
        for pt in pts.iter() {
            for (k, (i, w)) in geom.corners(pt).into_iter().enumerate() {
                idx[k].push((row * cells + i) as u32);
                wts[k].push(w);
            }
        }
    }
    let flat = logits.flatten_all()?;
    let mut acc: Option<Tensor> = None;
    for (i, w) in idx.into_iter().zip(wts) {
        let term = flat.index_select(&index_tensor(i)?, 0)?.mul(&constant(w, &[r * p], logits.dtype())?)?;
        acc = Some(match acc {
            Some(a) => (a + term)?,
            None => term,
        });
    }
    Ok(acc.expect("four corners").reshape((r, p))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;
    use rand::SeedableRng;

    fn geom() -> PointGeometry {
        PointGeometry {
            frames: 2,
            image: (16, 16),
            grid: (4, 4),
        }
    }

    #[test]
    fn grid_cell_centres_read_exactly() {
        let g = geom();
        let row: Vec<f64> = (0..32).map(|i| i as f64).collect();
        for (f, y, x) in [(0, 1, 2), (1, 3, 0), (1, 2, 2)] {
            let p = Point {
                frame: f,
                y: 4.0 * y as f64 + 2.0,
                x: 4.0 * x as f64 + 2.0,
            };
            assert_eq!(g.read(&row, &p), row[f * 16 + y * 4 + x]);
        }
    }

    #[test]
    fn border_points_clamp() {
        let g = geom();
        let row: Vec<f64> = (0..32).map(|i| i as f64).collect();
        let p = Point { frame: 0, y: 0.0, x: 0.0 };
        assert_eq!(g.read(&row, &p), 0.0);
        let p = Point { frame: 0, y: 15.99, x: 15.99 };
        assert!((g.read(&row, &p) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn interpolation_is_linear_between_centres() {
        let g = geom();
        let row: Vec<f64> = (0..32).map(|i| (i % 4) as f64).collect();
        let p = Point { frame: 0, y: 6.0, x: 5.0 };
        // Grid x coordinate 5/4 - 0.5 = 0.75.
        assert!((g.read(&row, &p) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn tensor_read_matches_scalar_read() {
        let g = geom();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data: Vec<f64> = (0..3 * 32).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t = constant(data.clone(), &[3, 32], DType::F64).unwrap();
        let pts: Vec<Vec<Point>> = (0..3).map(|_| (0..7).map(|_| g.uniform(&mut rng)).collect()).collect();
        let refs: Vec<&[Point]> = pts.iter().map(|p| p.as_slice()).collect();
        let out = read_points(&t, &refs, &g).unwrap().to_vec2::<f64>().unwrap();
        for r in 0..3 {
            for (j, p) in pts[r].iter().enumerate() {
                assert!((out[r][j] - g.read(&data[r * 32..(r + 1) * 32], p)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_importance_is_uniform_sampling() {
        let g = geom();
        let cfg = PointConfig {
            num_points: 50,
            oversample_ratio: 3.0,
            importance_ratio: 0.0,
        };
        let row = vec![0.0; 32];
        let a = sample_supervision_points(&row, &g, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b: Vec<Point> = (0..50).map(|_| g.uniform(&mut rng)).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_logits_give_exact_count() {
        let g = geom();
        let cfg = PointConfig {
            num_points: 37,
            ..PointConfig::default()
        };
        let pts = sample_supervision_points(&[1.5; 32], &g, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(pts.len(), 37);
    }

    #[test]
    fn planted_boundary_attracts_points() {
        // Logits are the signed x distance to a vertical boundary at x = 8.
        let g = PointGeometry {
            frames: 1,
            image: (64, 64),
            grid: (16, 16),
        };
        let row: Vec<f64> = (0..256).map(|i| ((i % 16) as f64 + 0.5) * 4.0 - 32.0).collect();
        let cfg = PointConfig::default();
        let pts = sample_supervision_points(&row, &g, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        // Minimal-|logit| third of the image (oversampling 3 keeps the top third).
        let near = pts.iter().filter(|p| g.read(&row, p).abs() <= 32.0 / 3.0).count();
        assert!(near as f64 >= 0.75 * pts.len() as f64, "{near}");
    }

    #[test]
    fn semantic_uncertainty_prefers_ties() {
        let g = PointGeometry {
            frames: 1,
            image: (8, 8),
            grid: (2, 2),
        };
        // Two classes tie in cell 0, far apart elsewhere.
        let rows = vec![0.0, 5.0, 5.0, 5.0, 0.0, -5.0, -5.0, -5.0];
        let cfg = PointConfig {
            num_points: 4,
            oversample_ratio: 64.0,
            importance_ratio: 1.0,
        };
        let pts = sample_semantic_points(&rows, 2, &g, &cfg, &mut ChaCha8Rng::seed_from_u64(2));
        // Only points clamped onto cell 0 have a zero margin.
        assert!(pts.iter().all(|p| p.y <= 2.0 && p.x <= 2.0));
    }

    #[test]
    fn mask_lookup_uses_containing_pixel() {
        let m = Mask::from_fn(4, 4, |y, x| y == 1 && x == 2);
        let masks = vec![m];
        assert!(Point { frame: 0, y: 1.9, x: 2.1 }.lookup(&masks));
        assert!(!Point { frame: 0, y: 2.0, x: 2.1 }.lookup(&masks));
    }
}
