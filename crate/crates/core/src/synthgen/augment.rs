//! Pseudo-video clips from a single annotated still.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PanopticFrame;
use crate::error::{bail, Result};
use crate::types::VideoClip;

/// Per-step augmentation magnitudes. Frame 0 keeps the still's geometry;
/// each later frame composes one more random step onto the previous one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub max_translate: f64,
    pub max_scale: f64,
    pub max_rotate: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_translate: 3.0,
            max_scale: 0.04,
            max_rotate: 0.05,
            brightness: 0.05,
            contrast: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            max_translate: 0.0,
            max_scale: 0.0,
            max_rotate: 0.0,
            brightness: 0.0,
            contrast: 0.0,
        }
    }
}

/// 2×3 affine map acting on pixel-center coordinates `(x, y)`.
#[derive(Debug, Clone, Copy)]
struct Affine([f64; 6]);

impl Affine {
    const IDENTITY: Affine = Affine([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    fn about_center(cx: f64, cy: f64, scale: f64, rot: f64, tx: f64, ty: f64) -> Affine {
        let (s, c) = rot.sin_cos();
        let a = scale * c;
        let b = -scale * s;
        let d = scale * s;
        let e = scale * c;
        Affine([a, b, cx - a * cx - b * cy + tx, d, e, cy - d * cx - e * cy + ty])
    }

    fn then(self, next: Affine) -> Affine {
        let [a, b, c, d, e, f] = self.0;
        let [a2, b2, c2, d2, e2, f2] = next.0;
        Affine([
            a2 * a + b2 * d,
            a2 * b + b2 * e,
            a2 * c + b2 * f + c2,
            d2 * a + e2 * d,
            d2 * b + e2 * e,
            d2 * c + e2 * f + f2,
        ])
    }

    fn inverse(self) -> Affine {
        let [a, b, c, d, e, f] = self.0;
        let det = a * e - b * d;
        let ia = e / det;
        let ib = -b / det;
        let id = -d / det;
        let ie = a / det;
        Affine([ia, ib, -(ia * c + ib * f), id, ie, -(id * c + ie * f)])
    }

    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let [a, b, c, d, e, f] = self.0;
        (a * x + b * y + c, d * x + e * y + f)
    }
}

/// Warps a still image and its panoptic annotation through `t` composed
/// random affine steps plus photometric jitter. Labels use nearest-neighbour
/// lookup with edge clamping, so every output pixel stays labelled and track
/// ids carry over unchanged.
pub fn augment_still_to_clip(
    image: &[u8],
    annotation: &PanopticFrame,
    num_frames: usize,
    config: &AugmentConfig,
    seed: u64,
) -> Result<(VideoClip, Vec<PanopticFrame>)> {
    let (h, w) = (annotation.height, annotation.width);
    if num_frames == 0 {
        bail!(InvalidInput, "clip length must be at least 1");
    }
    if image.len() != h * w * 3 || annotation.segment_map.len() != h * w {
        bail!(Shape, "still image/annotation sizes do not match {h}x{w}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut forward = Affine::IDENTITY;
    let mut frames = Vec::with_capacity(num_frames);
    let mut annotations = Vec::with_capacity(num_frames);

    let sym = |rng: &mut ChaCha8Rng, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };

    for t in 0..num_frames {
        if t > 0 {
            let step = Affine::about_center(
                cx,
                cy,
                1.0 + sym(&mut rng, config.max_scale),
                sym(&mut rng, config.max_rotate),
                sym(&mut rng, config.max_translate),
                sym(&mut rng, config.max_translate),
            );
            forward = forward.then(step);
        }
        let contrast = 1.0 + sym(&mut rng, config.contrast);
        let brightness = sym(&mut rng, config.brightness) * 255.0;
        let inv = forward.inverse();

        let mut rgb = vec![0u8; h * w * 3];
        let mut seg = vec![0u16; h * w];
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = inv.apply(x as f64 + 0.5, y as f64 + 0.5);
                let (sxi, syi) = (sx - 0.5, sy - 0.5);
                let nx = sxi.round().clamp(0.0, (w - 1) as f64) as usize;
                let ny = syi.round().clamp(0.0, (h - 1) as f64) as usize;
                let p = y * w + x;
                seg[p] = annotation.segment_map[ny * w + nx];
                let color = bilinear_rgb(image, h, w, syi, sxi);
                for c in 0..3 {
                    let v = (color[c] - 128.0) * contrast + 128.0 + brightness;
                    rgb[p * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        let mut segments = BTreeMap::new();
        for id in &seg {
            segments.entry(*id).or_insert(annotation.segments[id]);
        }
        frames.push(rgb);
        annotations.push(PanopticFrame {
            height: h,
            width: w,
            segment_map: seg,
            segments,
        });
    }
    Ok((VideoClip { height: h, width: w, frames }, annotations))
}

fn bilinear_rgb(image: &[u8], h: usize, w: usize, y: f64, x: f64) -> [f64; 3] {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let px = |yy: usize, xx: usize, c: usize| image[(yy * w + xx) * 3 + c] as f64;
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = px(y0, x0, c) * (1.0 - fy) * (1.0 - fx)
            + px(y0, x1, c) * (1.0 - fy) * fx
            + px(y1, x0, c) * fy * (1.0 - fx)
            + px(y1, x1, c) * fy * fx;
    }
    out
}
