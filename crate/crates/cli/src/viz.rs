//! Query scatter plots and result overlays.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::DType;
use tarvis_core::inference::{window_video, InferenceConfig, TaskTargets};
use tarvis_core::model::Model;
use tarvis_core::pca::pca_2d;
use tarvis_core::protocol::{first_window_pass, task_targets};
use tarvis_core::queries::QueryRole;
use tarvis_core::results::VideoResult;
use tarvis_core::synthgen::{save_rgb, Video};
use tarvis_core::{Error, Mask, Result, Task};

pub struct ScatterSummary {
    pub rows: usize,
    /// Mean distance of unit-normalized queries to their centroid.
    pub first_spread: f64,
    pub last_spread: f64,
}

fn spread(rows: &[Vec<f64>]) -> f64 {
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|x| x / n).collect()
        })
        .collect();
    let d = unit[0].len();
    let c: Vec<f64> = (0..d).map(|j| unit.iter().map(|r| r[j]).sum::<f64>() / unit.len() as f64).collect();
    unit.iter()
        .map(|r| r.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .sum::<f64>()
        / unit.len() as f64
}

fn role_id(role: &QueryRole, object_ids: &[u32]) -> u64 {
    match *role {
        QueryRole::Semantic { class_id } => class_id as u64,
        QueryRole::Instance { slot } => slot as u64,
        QueryRole::Background => 0,
        QueryRole::ObjectBackground { cell } => cell as u64,
        QueryRole::Object { object, .. } => object_ids.get(object).copied().unwrap_or(object as u32) as u64,
    }
}

/// Writes `queries.csv` (`x,y,role,id,task`, one row per refined query of
/// both passes) and `queries.png`.
pub fn query_scatter(
    model: &Model,
    video: &Video,
    tasks: &[Task],
    classes: &str,
    cfg: &InferenceConfig,
    out: &Path,
) -> Result<ScatterSummary> {
    let first_end = window_video(video.clip.num_frames(), cfg)?[0].end;
    let mut first = Vec::new();
    let mut last = Vec::new();
    let mut labels = Vec::new();
    for (ti, &task) in tasks.iter().enumerate() {
        let targets = task_targets(task, video, classes)?;
        let object_ids: Vec<u32> = match &targets {
            TaskTargets::Objects { objects, .. } => objects.iter().filter(|o| o.frame < first_end).map(|o| o.id).collect(),
            TaskTargets::Classes { .. } => Vec::new(),
        };
        let pass = first_window_pass(model, video, &targets, cfg)?;
        let rows = |t: &candle_core::Tensor| -> Result<Vec<Vec<f64>>> { Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?) };
        first.extend(rows(&pass.layer_queries[0])?);
        last.extend(rows(pass.layer_queries.last().expect("at least one evaluation"))?);
        for role in &pass.queries.roles {
            labels.push((ti, task, role.kind(), role_id(role, &object_ids)));
        }
    }
    let points = pca_2d(&last)?;
    let mut csv = String::from("x,y,role,id,task\n");
    for (p, (_, task, kind, id)) in points.iter().zip(&labels) {
        writeln!(csv, "{:.6},{:.6},{kind},{id},{task}", p[0], p[1]).expect("string write");
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let csv_path = out.join("queries.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    plot(&points, &labels.iter().map(|l| (l.0, l.2)).collect::<Vec<_>>(), &out.join("queries.png"))?;
    Ok(ScatterSummary {
        rows: points.len(),
        first_spread: spread(&first),
        last_spread: spread(&last),
    })
}

const PLOT: usize = 320;
const TASK_COLORS: [[u8; 3]; 2] = [[31, 119, 180], [255, 127, 14]];

fn plot(points: &[[f64; 2]], labels: &[(usize, &str)], path: &Path) -> Result<()> {
    let mut img = vec![255u8; PLOT * PLOT * 3];
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for c in 0..2 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    let margin = 12.0;
    let span = (PLOT as f64) - 2.0 * margin;
    for (p, (task, kind)) in points.iter().zip(labels) {
        let at = |c: usize| margin + span * if hi[c] > lo[c] { (p[c] - lo[c]) / (hi[c] - lo[c]) } else { 0.5 };
        let (cx, cy) = (at(0) as i64, (PLOT as f64 - at(1)) as i64);
        // Background-type queries are drawn hollow.
        let hollow = kind.contains("background");
        let color = TASK_COLORS[task % 2];
        for dy in -3i64..=3 {
            for dx in -3i64..=3 {
                if hollow && dx.abs() < 3 && dy.abs() < 3 {
                    continue;
                }
                let (x, y) = (cx + dx, cy + dy);
                if (0..PLOT as i64).contains(&x) && (0..PLOT as i64).contains(&y) {
                    let i = (y as usize * PLOT + x as usize) * 3;
                    img[i..i + 3].copy_from_slice(&color);
                }
            }
        }
    }
    save_rgb(path, PLOT, PLOT, &img)
}

/// Deterministic, well-spread color per id (golden-ratio hue steps).
pub fn id_color(id: u32) -> [u8; 3] {
    let h = (id as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let (s, v) = (0.75, 0.95);
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [((r + m) * 255.0) as u8, ((g + m) * 255.0) as u8, ((b + m) * 255.0) as u8]
}

fn blend(frame: &mut [u8], mask: &Mask, color: [u8; 3], alpha: f64) {
    for (i, &on) in mask.data.iter().enumerate() {
        if on {
            for c in 0..3 {
                let v = &mut frame[i * 3 + c];
                *v = ((1.0 - alpha) * *v as f64 + alpha * color[c] as f64).round() as u8;
            }
        }
    }
}

/// `<dir>/00000.png ...`: each frame with stuff regions tinted lightly and
/// tracks by id color. Without tracks or stuff the frames are copied.
pub fn overlay(video: &Video, groups: &[VideoResult], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (video.clip.height, video.clip.width);
    for g in groups {
        if (g.height, g.width, g.num_frames) != (h, w, video.clip.num_frames()) {
            return Err(Error::Shape(format!("results for {} do not match its frames", g.video)));
        }
    }
    for (f, frame) in video.clip.frames.iter().enumerate() {
        let mut img = frame.clone();
        for g in groups {
            for s in &g.stuff {
                blend(&mut img, &s.masks[f], id_color(1000 + s.class_id), 0.25);
            }
            for t in &g.tracks {
                blend(&mut img, &t.masks[f], id_color(t.id), 0.55);
            }
        }
        save_rgb(&dir.join(tarvis_core::synthgen::frame_file(f)), w, h, &img)?;
    }
    Ok(())
}
