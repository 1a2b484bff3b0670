//! Moving-shape scene generator.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PanopticFrame, SegmentInfo};
use crate::error::{bail, Result};
use crate::types::VideoClip;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionConfig {
    /// Speed range in pixels per frame.
    pub speed: (f64, f64),
    /// Maximum absolute rotation change per frame, radians.
    pub rotation_jitter: f64,
    /// Relative amplitude of per-frame scale oscillation.
    pub scale_jitter: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            speed: (0.5, 2.0),
            rotation_jitter: 0.05,
            scale_jitter: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    /// `(H, W)` in pixels.
    pub image_size: (usize, usize),
    pub num_frames: usize,
    /// Inclusive range of moving objects per video.
    pub num_things: (usize, usize),
    pub thing_classes: Vec<u32>,
    pub stuff_classes: Vec<u32>,
    #[serde(default)]
    pub motion: MotionConfig,
    /// Object radius range as a fraction of `min(H, W)`.
    #[serde(default = "default_radius")]
    pub radius: (f64, f64),
    pub seed: u64,
}

fn default_radius() -> (f64, f64) {
    (0.12, 0.2)
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: (64, 64),
            num_frames: 8,
            num_things: (1, 3),
            thing_classes: vec![0, 1, 2],
            stuff_classes: vec![3, 4, 5],
            motion: MotionConfig::default(),
            radius: default_radius(),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            bail!(Config, "image size {h}x{w} must be positive multiples of 32");
        }
        if self.num_frames == 0 {
            bail!(Config, "num_frames must be at least 1");
        }
        if self.num_things.0 > self.num_things.1 {
            bail!(Config, "num_things range {:?} is empty", self.num_things);
        }
        if self.num_things.1 > 0 && self.thing_classes.is_empty() {
            bail!(Config, "things requested but thing_classes is empty");
        }
        if self.stuff_classes.is_empty() {
            bail!(Config, "at least one stuff class is required");
        }
        if self.thing_classes.iter().any(|c| self.stuff_classes.contains(c)) {
            bail!(Config, "thing and stuff class ids must be disjoint");
        }
        if self.motion.speed.0 < 0.0 || self.motion.speed.0 > self.motion.speed.1 {
            bail!(Config, "invalid speed range {:?}", self.motion.speed);
        }
        if !(self.radius.0 > 0.0 && self.radius.0 <= self.radius.1 && self.radius.1 < 0.5) {
            bail!(Config, "invalid radius range {:?}", self.radius);
        }
        Ok(())
    }
}

/// Segment-id layout: stuff segments are `1 + stuff index`, things are
/// `THING_SEGMENT_BASE + track id`.
pub const THING_SEGMENT_BASE: u16 = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
}

#[derive(Debug, Clone)]
struct Thing {
    class_id: u32,
    track_id: u32,
    kind: ShapeKind,
    color: [f64; 3],
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    a: f64,
    b: f64,
    angle: f64,
    phase: f64,
}

impl Thing {
    fn contains(&self, px: f64, py: f64, scale: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = px - self.cx;
        let dy = py - self.cy;
        let u = (c * dx + s * dy) / scale;
        let v = (-s * dx + c * dy) / scale;
        match self.kind {
            ShapeKind::Ellipse => (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0,
            ShapeKind::Rectangle => u.abs() <= self.a && v.abs() <= self.b,
            ShapeKind::Triangle => {
                // Isoceles triangle pointing along +v.
                let r = self.a.max(self.b);
                if v < -0.5 * r || v > r {
                    return false;
                }
                let half = (r - v) / 1.5 * 0.866 * 1.2;
                u.abs() <= half
            }
        }
    }
}

/// Per-class colour for things; stuff textures take another palette.
fn class_color(class_id: u32, thing: bool) -> [f64; 3] {
    const THING: [[f64; 3]; 6] = [
        [220.0, 40.0, 40.0],
        [40.0, 200.0, 60.0],
        [50.0, 80.0, 230.0],
        [230.0, 210.0, 40.0],
        [200.0, 60.0, 210.0],
        [40.0, 210.0, 210.0],
    ];
    const STUFF: [[f64; 3]; 6] = [
        [110.0, 90.0, 70.0],
        [70.0, 110.0, 90.0],
        [90.0, 80.0, 120.0],
        [130.0, 130.0, 130.0],
        [60.0, 60.0, 60.0],
        [150.0, 120.0, 90.0],
    ];
    let idx = class_id as usize;
    if thing {
        THING[idx % THING.len()]
    } else {
        STUFF[idx % STUFF.len()]
    }
}

fn shape_for_class(idx: usize) -> ShapeKind {
    match idx % 3 {
        0 => ShapeKind::Ellipse,
        1 => ShapeKind::Rectangle,
        _ => ShapeKind::Triangle,
    }
}

struct StuffLayout {
    /// Class id of each band, top to bottom.
    bands: Vec<u32>,
    /// Nominal band boundaries as fractions of H (len = bands - 1).
    cuts: Vec<f64>,
    wobble_amp: f64,
    wobble_freq: f64,
    wobble_phase: f64,
}

impl StuffLayout {
    fn band_at(&self, y: f64, x: f64, h: f64, w: f64) -> usize {
        let wob = self.wobble_amp * (self.wobble_freq * x / w * std::f64::consts::TAU + self.wobble_phase).sin();
        let yn = (y + wob) / h;
        self.cuts.iter().filter(|&&c| yn >= c).count()
    }
}

/// Generates one labelled video.
///
/// Output is a pure function of `config` (including its seed).
pub fn generate_scene(config: &SceneConfig) -> Result<(VideoClip, Vec<PanopticFrame>)> {
    config.validate()?;
    let (h, w) = config.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let n_bands = rng.random_range(2..=4usize);
    let mut bands = Vec::with_capacity(n_bands);
    let mut pool = config.stuff_classes.clone();
    pool.shuffle(&mut rng);
    for i in 0..n_bands {
        bands.push(pool[i % pool.len()]);
    }
    let mut cuts: Vec<f64> = (1..n_bands)
        .map(|i| i as f64 / n_bands as f64 + rng.random_range(-0.08..0.08))
        .collect();
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let layout = StuffLayout {
        bands,
        cuts,
        wobble_amp: rng.random_range(1.0..4.0),
        wobble_freq: rng.random_range(0.5..2.0),
        wobble_phase: rng.random_range(0.0..std::f64::consts::TAU),
    };

    let n_things = rng.random_range(config.num_things.0..=config.num_things.1);
    let min_side = h.min(w) as f64;
    let mut things = Vec::with_capacity(n_things);
    for track_id in 0..n_things as u32 {
        let cls_idx = rng.random_range(0..config.thing_classes.len());
        let class_id = config.thing_classes[cls_idx];
        let r = rng.random_range(config.radius.0..=config.radius.1) * min_side;
        let aspect = rng.random_range(0.7..1.0);
        let speed = rng.random_range(config.motion.speed.0..=config.motion.speed.1);
        let dir = rng.random_range(0.0..std::f64::consts::TAU);
        let base = class_color(class_id, true);
        let color = [
            (base[0] + rng.random_range(-20.0..20.0)).clamp(0.0, 255.0),
            (base[1] + rng.random_range(-20.0..20.0)).clamp(0.0, 255.0),
            (base[2] + rng.random_range(-20.0..20.0)).clamp(0.0, 255.0),
        ];
        things.push(Thing {
            class_id,
            track_id,
            kind: shape_for_class(cls_idx),
            color,
            cx: rng.random_range(r..(w as f64 - r)),
            cy: rng.random_range(r..(h as f64 - r)),
            vx: speed * dir.cos(),
            vy: speed * dir.sin(),
            a: r,
            b: r * aspect,
            angle: rng.random_range(0.0..std::f64::consts::TAU),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        });
    }
    // Fixed painter's order: later entries occlude earlier ones.
    let mut depth: Vec<usize> = (0..n_things).collect();
    depth.shuffle(&mut rng);

    let stuff_segment = |class_id: u32| -> u16 {
        let idx = config.stuff_classes.iter().position(|&c| c == class_id).unwrap();
        1 + idx as u16
    };

    let mut frames = Vec::with_capacity(config.num_frames);
    let mut annotations = Vec::with_capacity(config.num_frames);
    for t in 0..config.num_frames {
        let mut rgb = vec![0u8; h * w * 3];
        let mut seg = vec![0u16; h * w];
        let scales: Vec<f64> = things
            .iter()
            .map(|th| 1.0 + config.motion.scale_jitter * (th.phase + 0.7 * t as f64).sin())
            .collect();
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let mut color;
                let noise: f64 = rng.random_range(-12.0..12.0);
                let band = layout.band_at(py, px, h as f64, w as f64);
                let stuff_class = layout.bands[band];
                color = class_color(stuff_class, false);
                // Stuff texture: class-dependent stripes.
                let stripe = ((px * (1 + stuff_class % 3) as f64 * 0.4 + py * 0.3).sin() * 15.0).round();
                for c in color.iter_mut() {
                    *c += stripe;
                }
                let mut label = stuff_segment(stuff_class);
                for &i in &depth {
                    let th = &things[i];
                    if th.contains(px, py, scales[i]) {
                        color = th.color;
                        label = THING_SEGMENT_BASE + th.track_id as u16;
                    }
                }
                let p = y * w + x;
                seg[p] = label;
                for c in 0..3 {
                    rgb[p * 3 + c] = (color[c] + noise).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        let mut segments = BTreeMap::new();
        for &id in &seg {
            segments.entry(id).or_insert_with(|| {
                if id >= THING_SEGMENT_BASE {
                    let th = &things[(id - THING_SEGMENT_BASE) as usize];
                    SegmentInfo {
                        class_id: th.class_id,
                        is_thing: true,
                        track_id: Some(th.track_id),
                    }
                } else {
                    SegmentInfo {
                        class_id: config.stuff_classes[(id - 1) as usize],
                        is_thing: false,
                        track_id: None,
                    }
                }
            });
        }
        frames.push(rgb);
        annotations.push(PanopticFrame {
            height: h,
            width: w,
            segment_map: seg,
            segments,
        });

        for th in things.iter_mut() {
            th.cx += th.vx;
            th.cy += th.vy;
            let margin = th.a * 0.6;
            if th.cx < margin || th.cx > w as f64 - margin {
                th.vx = -th.vx;
                th.cx = th.cx.clamp(margin, w as f64 - margin);
            }
            if th.cy < margin || th.cy > h as f64 - margin {
                th.vy = -th.vy;
                th.cy = th.cy.clamp(margin, h as f64 - margin);
            }
            th.angle += rng.random_range(-config.motion.rotation_jitter..=config.motion.rotation_jitter);
        }
    }

    Ok((
        VideoClip {
            height: h,
            width: w,
            frames,
        },
        annotations,
    ))
}
