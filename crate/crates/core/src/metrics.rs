//! Desk-scale evaluation: region similarity J, boundary F, identity
//! switches, AP at IoU 0.5 for VIS tracks and semantic mIoU for VPS.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::losses::{hungarian_match, CostMatrix};
use crate::results::{TrackResult, VideoResult};
use crate::synthgen::PanopticFrame;
use crate::types::{Mask, Task};

/// `|a ∩ b| / |a ∪ b|`; two empty masks score 1.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if !a.same_shape(b) {
        bail!(Shape, "masks {}x{} and {}x{} differ", a.height, a.width, b.height, b.width);
    }
    let u = a.union_count(b);
    Ok(if u == 0 { 1.0 } else { a.intersection_count(b) as f64 / u as f64 })
}

/// `Σ_t |a_t ∩ b_t| / Σ_t |a_t ∪ b_t|`; 1 when both tracks are empty.
pub fn spatio_temporal_iou(a: &[Mask], b: &[Mask]) -> f64 {
    let (mut i, mut u) = (0, 0);
    for (x, y) in a.iter().zip(b) {
        i += x.intersection_count(y);
        u += x.union_count(y);
    }
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

/// Mask pixels with a 4-neighbour outside the mask (neighbours beyond the
/// image border are ignored).
pub fn boundary(mask: &Mask) -> Mask {
    let (h, w) = (mask.height, mask.width);
    Mask::from_fn(h, w, |y, x| {
        mask.get(y, x)
            && ((y > 0 && !mask.get(y - 1, x))
                || (y + 1 < h && !mask.get(y + 1, x))
                || (x > 0 && !mask.get(y, x - 1))
                || (x + 1 < w && !mask.get(y, x + 1)))
    })
}

fn matched_fraction(from: &Mask, to: &Mask, r: usize) -> f64 {
    let pts = from.points();
    let hit = pts
        .iter()
        .filter(|&&(y, x)| {
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(to.height - 1));
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(to.width - 1));
            (y0..=y1).any(|yy| (x0..=x1).any(|xx| to.get(yy, xx)))
        })
        .count();
    hit as f64 / pts.len() as f64
}

/// Boundary F-measure with Chebyshev tolerance `r`; two empty boundaries
/// score 1, exactly one empty scores 0.
pub fn boundary_f(pred: &Mask, gt: &Mask, r: usize) -> Result<f64> {
    if !pred.same_shape(gt) {
        bail!(Shape, "masks {}x{} and {}x{} differ", pred.height, pred.width, gt.height, gt.width);
    }
    let (bp, bg) = (boundary(pred), boundary(gt));
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let p = matched_fraction(&bp, &bg, r);
    let rc = matched_fraction(&bg, &bp, r);
    Ok(if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtTrack {
    pub id: u32,
    pub class_id: Option<u32>,
    pub masks: Vec<Mask>,
    /// First frame scored (frames before it, such as a VOS cue frame, are
    /// excluded from J and F).
    pub eval_from: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub task: Task,
    pub num_frames: usize,
    pub tracks: Vec<GtTrack>,
    /// Per-frame class maps, VPS only.
    pub semantic: Option<Vec<Vec<u32>>>,
}

impl GroundTruth {
    /// Every thing track of the video; VPS also keeps the class maps.
    pub fn instances(task: Task, annotations: &[PanopticFrame]) -> Self {
        let ids: BTreeSet<u32> = annotations.iter().flat_map(|a| a.track_ids()).collect();
        let tracks = ids
            .into_iter()
            .map(|id| {
                let class_id = annotations
                    .iter()
                    .find_map(|a| a.segment_of_track(id).map(|s| a.segments[&s].class_id));
                GtTrack {
                    id,
                    class_id,
                    masks: annotations.iter().map(|a| a.track_mask(id)).collect(),
                    eval_from: 0,
                }
            })
            .collect();
        Self {
            task,
            num_frames: annotations.len(),
            tracks,
            semantic: (task == Task::Vps).then(|| annotations.iter().map(|a| a.class_map()).collect()),
        }
    }

    /// Guided objects `(track id, cue frame)`; scoring starts after the cue
    /// frame.
    pub fn objects(task: Task, annotations: &[PanopticFrame], objects: &[(u32, usize)]) -> Self {
        let mut objects = objects.to_vec();
        objects.sort_unstable();
        Self {
            task,
            num_frames: annotations.len(),
            tracks: objects
                .iter()
                .map(|&(id, cue)| GtTrack {
                    id,
                    class_id: None,
                    masks: annotations.iter().map(|a| a.track_mask(id)).collect(),
                    eval_from: cue + 1,
                })
                .collect(),
            semantic: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub mean_iou: f64,
    pub boundary_f: f64,
    pub jf: f64,
    pub id_switches: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vis_ap50: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_miou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub panoptic_complete: Option<bool>,
    pub num_gt_tracks: usize,
    pub num_pred_tracks: usize,
}

impl EvalReport {
    /// Averages scores over videos and sums the counts.
    pub fn aggregate(reports: &[EvalReport]) -> Result<EvalReport> {
        let Some(first) = reports.first() else {
            bail!(InvalidInput, "no reports to aggregate");
        };
        if reports.iter().any(|r| r.task != first.task) {
            bail!(TaskMismatch, "cannot aggregate reports of different tasks");
        }
        let n = reports.len() as f64;
        let mean = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let mean_opt = |f: fn(&EvalReport) -> Option<f64>| -> Option<f64> {
            let v: Vec<f64> = reports.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Ok(EvalReport {
            task: first.task,
            mean_iou: mean(|r| r.mean_iou),
            boundary_f: mean(|r| r.boundary_f),
            jf: mean(|r| r.jf),
            id_switches: reports.iter().map(|r| r.id_switches).sum(),
            vis_ap50: mean_opt(|r| r.vis_ap50),
            semantic_miou: mean_opt(|r| r.semantic_miou),
            panoptic_complete: first.panoptic_complete.map(|_| reports.iter().all(|r| r.panoptic_complete == Some(true))),
            num_gt_tracks: reports.iter().map(|r| r.num_gt_tracks).sum(),
            num_pred_tracks: reports.iter().map(|r| r.num_pred_tracks).sum(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Counts, per ground-truth track, the frames whose matched prediction id
/// differs from the previously matched one. Per frame, predictions are
/// matched to visible ground truth by Hungarian assignment on IoU, accepting
/// IoU ≥ 0.5.
pub fn id_switch_count(pred: &[TrackResult], gt: &[GtTrack]) -> Result<usize> {
    let frames = gt.first().map_or(0, |g| g.masks.len());
    let mut last: Vec<Option<u32>> = vec![None; gt.len()];
    let mut switches = 0;
    for f in 0..frames {
        let visible: Vec<usize> = (0..gt.len()).filter(|&g| !gt[g].masks[f].is_empty()).collect();
        let present: Vec<usize> = (0..pred.len()).filter(|&p| !pred[p].masks[f].is_empty()).collect();
        if visible.is_empty() || present.is_empty() {
            continue;
        }
        let rows = present.len().max(visible.len());
        let mut iou = vec![0.0; rows * visible.len()];
        for (r, &p) in present.iter().enumerate() {
            for (c, &g) in visible.iter().enumerate() {
                iou[r * visible.len() + c] = mask_iou(&pred[p].masks[f], &gt[g].masks[f])?;
            }
        }
        let cost = CostMatrix::new(rows, visible.len(), iou.iter().map(|v| -v).collect())?;
        for (r, c) in hungarian_match(&cost)? {
            if r >= present.len() || iou[r * visible.len() + c] < 0.5 {
                continue;
            }
            let (g, id) = (visible[c], pred[present[r]].id);
            if last[g].is_some_and(|prev| prev != id) {
                switches += 1;
            }
            last[g] = Some(id);
        }
    }
    Ok(switches)
}

/// AP at spatio-temporal IoU 0.5: per class, predictions in descending
/// score greedily claim the best unclaimed ground truth; precision is
/// interpolated at 101 recall points and averaged over classes with ground
/// truth.
pub fn ap50(pred: &[TrackResult], gt: &[GtTrack]) -> f64 {
    let classes: BTreeSet<Option<u32>> = gt.iter().map(|g| g.class_id).collect();
    if classes.is_empty() {
        return if pred.is_empty() { 1.0 } else { 0.0 };
    }
    let mut total = 0.0;
    for &c in &classes {
        let gts: Vec<&GtTrack> = gt.iter().filter(|g| g.class_id == c).collect();
        let mut preds: Vec<&TrackResult> = pred.iter().filter(|p| p.class_id == c).collect();
        preds.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
        let mut claimed = vec![false; gts.len()];
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut curve = Vec::with_capacity(preds.len());
        for p in preds {
            let best = (0..gts.len())
                .filter(|&g| !claimed[g])
                .map(|g| (g, spatio_temporal_iou(&p.masks, &gts[g].masks)))
                .filter(|&(_, v)| v >= 0.5)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some((g, _)) => {
                    claimed[g] = true;
                    tp += 1;
                }
                None => fp += 1,
            }
            curve.push((tp as f64 / gts.len() as f64, tp as f64 / (tp + fp) as f64));
        }
        let ap: f64 = (0..=100)
            .map(|k| {
                let r = k as f64 / 100.0;
                curve.iter().filter(|&&(rc, _)| rc >= r - 1e-12).map(|&(_, p)| p).fold(0.0, f64::max)
            })
            .sum::<f64>()
            / 101.0;
        total += ap;
    }
    total / classes.len() as f64
}

/// Mean over classes present in either map set of the per-class IoU
/// accumulated over all frames. `None` entries in `pred` are unlabeled.
pub fn semantic_miou(pred: &[Vec<Option<u32>>], gt: &[Vec<u32>]) -> Result<f64> {
    if pred.len() != gt.len() || pred.iter().zip(gt).any(|(p, g)| p.len() != g.len()) {
        bail!(Shape, "semantic maps differ in size");
    }
    let mut classes: BTreeSet<u32> = gt.iter().flatten().copied().collect();
    classes.extend(pred.iter().flatten().flatten());
    if classes.is_empty() {
        return Ok(1.0);
    }
    let mut sum = 0.0;
    for &c in &classes {
        let (mut i, mut u) = (0usize, 0usize);
        for (p, g) in pred.iter().flatten().zip(gt.iter().flatten()) {
            let (a, b) = (*p == Some(c), *g == c);
            i += (a && b) as usize;
            u += (a || b) as usize;
        }
        sum += i as f64 / u as f64;
    }
    Ok(sum / classes.len() as f64)
}

fn per_frame_mean(pred: &[Mask], gt: &GtTrack, f: impl Fn(&Mask, &Mask) -> Result<f64>) -> Result<Option<f64>> {
    let frames: Vec<usize> = (gt.eval_from..gt.masks.len()).collect();
    if frames.is_empty() {
        return Ok(None);
    }
    let mut s = 0.0;
    for &t in &frames {
        s += f(&pred[t], &gt.masks[t])?;
    }
    Ok(Some(s / frames.len() as f64))
}

/// Assigns each ground-truth track a prediction: by id for object-guided
/// tasks, by Hungarian assignment on spatio-temporal IoU otherwise.
fn correspond<'a>(result: &'a VideoResult, gt: &GroundTruth) -> Result<Vec<Option<&'a TrackResult>>> {
    if gt.task.is_object_guided() {
        return Ok(gt.tracks.iter().map(|g| result.tracks.iter().find(|p| p.id == g.id)).collect());
    }
    let (ng, np) = (gt.tracks.len(), result.tracks.len());
    if ng == 0 {
        return Ok(Vec::new());
    }
    let rows = np.max(ng);
    let cost = CostMatrix::from_fn(rows, ng, |r, c| {
        if r < np {
            -spatio_temporal_iou(&result.tracks[r].masks, &gt.tracks[c].masks)
        } else {
            0.0
        }
    });
    let mut out = vec![None; ng];
    for (r, c) in hungarian_match(&cost)? {
        if r < np {
            out[c] = Some(&result.tracks[r]);
        }
    }
    Ok(out)
}

pub fn evaluate(result: &VideoResult, gt: &GroundTruth) -> Result<EvalReport> {
    if result.task != gt.task {
        bail!(TaskMismatch, "result is for {}, ground truth for {}", result.task, gt.task);
    }
    if result.num_frames != gt.num_frames {
        bail!(Shape, "result has {} frames, ground truth {}", result.num_frames, gt.num_frames);
    }
    let empty = vec![Mask::empty(result.height, result.width); result.num_frames];
    let matched = correspond(result, gt)?;
    let (mut j, mut fm, mut n) = (0.0, 0.0, 0usize);
    for (g, p) in gt.tracks.iter().zip(&matched) {
        let masks = p.map_or(&empty, |p| &p.masks);
        let (Some(jt), Some(ft)) = (per_frame_mean(masks, g, mask_iou)?, per_frame_mean(masks, g, |a, b| boundary_f(a, b, 1))?) else {
            continue;
        };
        j += jt;
        fm += ft;
        n += 1;
    }
    let (mean_iou, bf) = if n == 0 { (1.0, 1.0) } else { (j / n as f64, fm / n as f64) };
    let (semantic_miou, panoptic_complete) = match (&gt.semantic, result.task) {
        (Some(maps), Task::Vps) => {
            let pan = result.panoptic()?;
            let pred: Vec<Vec<Option<u32>>> = pan
                .iter()
                .map(|f| f.segment_map.iter().map(|s| f.segments.get(s).map(|i| i.class_id)).collect())
                .collect();
            (Some(semantic_miou(&pred, maps)?), Some(result.is_panoptic_complete()))
        }
        _ => (None, None),
    };
    Ok(EvalReport {
        task: result.task,
        mean_iou,
        boundary_f: bf,
        jf: 0.5 * (mean_iou + bf),
        id_switches: id_switch_count(&result.tracks, &gt.tracks)?,
        vis_ap50: (result.task == Task::Vis).then(|| ap50(&result.tracks, &gt.tracks)),
        semantic_miou,
        panoptic_complete,
        num_gt_tracks: gt.tracks.len(),
        num_pred_tracks: result.tracks.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::results::StuffResult;
    use proptest::prelude::*;

    fn square(n: usize, y0: usize, x0: usize, s: usize) -> Mask {
        Mask::from_fn(n, n, |y, x| y >= y0 && y < y0 + s && x >= x0 && x < x0 + s)
    }

    #[test]
    fn iou_conventions() {
        let a = square(8, 0, 0, 4);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &square(8, 4, 4, 4)).unwrap(), 0.0);
        assert_eq!(mask_iou(&Mask::empty(3, 3), &Mask::empty(3, 3)).unwrap(), 1.0);
        assert!(mask_iou(&a, &Mask::empty(3, 3)).is_err());
    }

    #[test]
    fn half_overlapping_squares_score_one_third() {
        let a = square(8, 0, 0, 4);
        let b = square(8, 0, 2, 4);
        assert!((mask_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn boundary_f_identity_and_shifts() {
        let a = square(12, 3, 3, 5);
        assert_eq!(boundary_f(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(boundary_f(&a, &square(12, 3, 4, 5), 1).unwrap(), 1.0);
        let thin = Mask::from_fn(12, 12, |y, x| y == 5 && x > 1 && x < 10);
        let moved = Mask::from_fn(12, 12, |y, x| y == 8 && x > 1 && x < 10);
        assert_eq!(boundary_f(&thin, &moved, 1).unwrap(), 0.0);
        assert_eq!(boundary_f(&Mask::empty(4, 4), &Mask::empty(4, 4), 1).unwrap(), 1.0);
        assert_eq!(boundary_f(&Mask::empty(12, 12), &a, 1).unwrap(), 0.0);
    }

    fn track(id: u32, class_id: Option<u32>, score: f64, masks: Vec<Mask>) -> TrackResult {
        TrackResult {
            id,
            class_id,
            score,
            masks,
        }
    }

    fn gt_track(id: u32, class_id: Option<u32>, masks: Vec<Mask>) -> GtTrack {
        GtTrack {
            id,
            class_id,
            masks,
            eval_from: 0,
        }
    }

    #[test]
    fn swapped_tracks_count_two_switches() {
        let a = square(8, 0, 0, 3);
        let b = square(8, 5, 5, 3);
        let gt = vec![gt_track(1, Some(0), vec![a.clone(); 4]), gt_track(2, Some(0), vec![b.clone(); 4])];
        let perfect = vec![track(10, Some(0), 1.0, vec![a.clone(); 4]), track(11, Some(0), 1.0, vec![b.clone(); 4])];
        assert_eq!(id_switch_count(&perfect, &gt).unwrap(), 0);
        let swapped = vec![
            track(10, Some(0), 1.0, vec![a.clone(), a.clone(), b.clone(), b.clone()]),
            track(11, Some(0), 1.0, vec![b.clone(), b.clone(), a.clone(), a.clone()]),
        ];
        assert_eq!(id_switch_count(&swapped, &gt).unwrap(), 2);
    }

    #[test]
    fn unmatched_frames_are_not_switches() {
        let a = square(8, 0, 0, 3);
        let e = Mask::empty(8, 8);
        let gt = vec![gt_track(1, None, vec![a.clone(); 4])];
        let pred = vec![track(5, None, 1.0, vec![a.clone(), e.clone(), square(8, 5, 5, 2), a.clone()])];
        assert_eq!(id_switch_count(&pred, &gt).unwrap(), 0);
    }

    #[test]
    fn hand_built_ap50() {
        let a = square(8, 0, 0, 3);
        let b = square(8, 5, 5, 3);
        let gt = vec![gt_track(1, Some(0), vec![a.clone(); 2]), gt_track(2, Some(0), vec![b.clone(); 2])];
        let pred = vec![
            track(1, Some(0), 0.9, vec![a.clone(); 2]),
            track(2, Some(0), 0.8, vec![square(8, 0, 5, 2); 2]),
            track(3, Some(0), 0.7, vec![b.clone(); 2]),
        ];
        // Precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1.
        let want = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
        assert!((ap50(&pred, &gt) - want).abs() < 1e-12);
        let wrong_class = vec![track(1, Some(1), 0.9, vec![a.clone(); 2])];
        assert_eq!(ap50(&wrong_class, &gt[..1]), 0.0);
    }

    #[test]
    fn flipped_semantic_labels() {
        let gt = vec![vec![0, 0, 1, 1]];
        let pred = vec![vec![Some(0), Some(1), Some(1), None]];
        // Class 0: 1/2, class 1: 1/3.
        assert!((semantic_miou(&pred, &gt).unwrap() - (0.5 + 1.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    fn synthetic_gt() -> (Vec<PanopticFrame>, VideoResult) {
        use crate::synthgen::{generate_scene, SceneConfig};
        let cfg = SceneConfig {
            image_size: (32, 32),
            num_frames: 4,
            seed: 3,
            ..SceneConfig::default()
        };
        let (_, ann) = generate_scene(&cfg).unwrap();
        let gt = GroundTruth::instances(Task::Vps, &ann);
        let tracks = gt
            .tracks
            .iter()
            .map(|g| track(g.id, g.class_id, 1.0, g.masks.clone()))
            .collect();
        let stuff_classes: BTreeSet<u32> = ann
            .iter()
            .flat_map(|a| a.segments.values().filter(|s| !s.is_thing).map(|s| s.class_id))
            .collect();
        let stuff = stuff_classes
            .into_iter()
            .map(|c| StuffResult {
                class_id: c,
                masks: ann
                    .iter()
                    .map(|a| Mask {
                        height: a.height,
                        width: a.width,
                        data: a.segment_map.iter().map(|s| !a.segments[s].is_thing && a.segments[s].class_id == c).collect(),
                    })
                    .collect(),
            })
            .collect();
        let result = VideoResult {
            video: "v".into(),
            task: Task::Vps,
            height: 32,
            width: 32,
            num_frames: 4,
            tracks,
            stuff,
        };
        (ann, result)
    }

    #[test]
    fn ground_truth_is_a_fixed_point() {
        let (ann, result) = synthetic_gt();
        let gt = GroundTruth::instances(Task::Vps, &ann);
        assert!(!gt.tracks.is_empty());
        let r = evaluate(&result, &gt).unwrap();
        assert_eq!((r.mean_iou, r.boundary_f, r.jf, r.id_switches), (1.0, 1.0, 1.0, 0));
        assert_eq!(r.semantic_miou, Some(1.0));
        assert_eq!(r.panoptic_complete, Some(true));

        let mut vis = result.clone();
        vis.task = Task::Vis;
        vis.stuff.clear();
        let r = evaluate(&vis, &GroundTruth::instances(Task::Vis, &ann)).unwrap();
        assert_eq!((r.mean_iou, r.vis_ap50), (1.0, Some(1.0)));

        for task in [Task::Vos, Task::Pet] {
            let objs: Vec<(u32, usize)> = result.tracks.iter().map(|t| (t.id, 0)).collect();
            let mut vos = vis.clone();
            vos.task = task;
            let r = evaluate(&vos, &GroundTruth::objects(task, &ann, &objs)).unwrap();
            assert_eq!((r.mean_iou, r.boundary_f, r.id_switches), (1.0, 1.0, 0));
        }
    }

    #[test]
    fn empty_predictions_score_zero() {
        let (ann, mut result) = synthetic_gt();
        result.task = Task::Vis;
        result.tracks.clear();
        result.stuff.clear();
        let gt = GroundTruth::instances(Task::Vis, &ann);
        // Some tracks might leave the frame; J stays strictly below 1.
        let r = evaluate(&result, &gt).unwrap();
        assert!(r.mean_iou < 0.5);
        assert_eq!(r.vis_ap50, Some(0.0));
        let frames_visible = gt.tracks.iter().all(|t| t.masks.iter().all(|m| !m.is_empty()));
        if frames_visible {
            assert_eq!(r.mean_iou, 0.0);
        }
    }

    #[test]
    fn task_mismatch_is_rejected() {
        let (ann, result) = synthetic_gt();
        assert!(evaluate(&result, &GroundTruth::instances(Task::Vis, &ann)).is_err());
    }

    #[test]
    fn aggregate_averages_scores() {
        let (ann, result) = synthetic_gt();
        let gt = GroundTruth::instances(Task::Vps, &ann);
        let a = evaluate(&result, &gt).unwrap();
        let mut b = a.clone();
        b.mean_iou = 0.5;
        b.id_switches = 3;
        let m = EvalReport::aggregate(&[a, b]).unwrap();
        assert_eq!(m.mean_iou, 0.75);
        assert_eq!(m.id_switches, 3);
    }

    proptest! {
        #[test]
        fn iou_and_boundary_f_are_symmetric(bits_a in proptest::collection::vec(any::<bool>(), 64), bits_b in proptest::collection::vec(any::<bool>(), 64)) {
            let a = Mask::from_fn(8, 8, |y, x| bits_a[y * 8 + x]);
            let b = Mask::from_fn(8, 8, |y, x| bits_b[y * 8 + x]);
            let (i1, i2) = (mask_iou(&a, &b).unwrap(), mask_iou(&b, &a).unwrap());
            prop_assert_eq!(i1, i2);
            prop_assert!((0.0..=1.0).contains(&i1));
            let (f1, f2) = (boundary_f(&a, &b, 1).unwrap(), boundary_f(&b, &a, 1).unwrap());
            prop_assert!((f1 - f2).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&f1));
        }

        #[test]
        fn relabeling_track_ids_leaves_scores(offset in 1u32..50) {
            let (ann, result) = synthetic_gt();
            let mut vis = result.clone();
            vis.task = Task::Vis;
            vis.stuff.clear();
            // Corrupt one track so scores are not trivially 1.
            if let Some(t) = vis.tracks.first_mut() {
                t.masks[1] = Mask::empty(32, 32);
            }
            let gt = GroundTruth::instances(Task::Vis, &ann);
            let a = evaluate(&vis, &gt).unwrap();
            for t in &mut vis.tracks {
                t.id += offset;
            }
            let b = evaluate(&vis, &gt).unwrap();
            prop_assert_eq!(a.mean_iou, b.mean_iou);
            prop_assert_eq!(a.id_switches, b.id_switches);
            prop_assert_eq!(a.vis_ap50, b.vis_ap50);
        }
    }
}
