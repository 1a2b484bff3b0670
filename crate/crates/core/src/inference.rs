//! Near-online whole-video inference over overlapping clips.
//!
//! Window `k` covers frames `[s_k, e_k)` and finalizes the frames
//! `[e_{k-1}, e_k)` it is the first to cover. Instance tracks are carried
//! across windows by mask IoU on the shared frames; guided objects are
//! re-encoded from the previous window's predictions (mask handoff).

use std::collections::BTreeMap;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::SegmentationOutput;
use crate::error::{bail, Result};
use crate::losses::{hungarian_match, CostMatrix};
use crate::model::Model;
use crate::neck::FeaturePyramid;
use crate::nn::{index_tensor, resize_plane, to_vec_f64};
use crate::queries::{concat_task_queries, QueryRole, TargetQuerySet};
use crate::results::{StuffResult, TrackResult, VideoResult};
use crate::synthgen::{interior_point, ObjectCue, PanopticFrame};
use crate::types::{Mask, Task, VideoClip};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    pub clip_len: usize,
    pub overlap: usize,
    /// Minimum overlap IoU for continuing a track.
    pub iou_min: f64,
    /// Class-confidence floor for detections and final VIS tracks.
    pub score_min: f64,
    /// A lower-ranked instance keeps its mask only if at least this
    /// fraction of it is unclaimed by higher-ranked ones.
    pub overlap_threshold: f64,
    /// Seeds the encoder's key-point subsampling.
    #[serde(default)]
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            clip_len: 12,
            overlap: 6,
            iou_min: 0.4,
            score_min: 0.3,
            overlap_threshold: 0.8,
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_len == 0 || self.overlap >= self.clip_len {
            bail!(Config, "need 0 <= overlap ({}) < clip_len ({})", self.overlap, self.clip_len);
        }
        for (name, v) in [
            ("iou_min", self.iou_min),
            ("score_min", self.score_min),
            ("overlap_threshold", self.overlap_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                bail!(Config, "{name} must lie in [0, 1], got {v}");
            }
        }
        Ok(())
    }

    /// Largest wait between a frame's arrival and its output, for frames
    /// outside the first window.
    pub fn delay_bound(&self) -> usize {
        self.clip_len - self.overlap - 1
    }
}

/// Half-open frame range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

/// Stride `clip_len - overlap`; the last window is shifted back to end at
/// the final frame.
pub fn window_video(num_frames: usize, cfg: &InferenceConfig) -> Result<Vec<Window>> {
    cfg.validate()?;
    if num_frames == 0 {
        bail!(InvalidInput, "video has no frames");
    }
    let stride = cfg.clip_len - cfg.overlap;
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + cfg.clip_len).min(num_frames);
        out.push(Window { start, end });
        if end == num_frames {
            return Ok(out);
        }
        start = (start + stride).min(num_frames.saturating_sub(cfg.clip_len));
    }
}

/// Frames finalized by each window: those not covered by an earlier one.
pub fn emission_schedule(windows: &[Window]) -> Vec<Window> {
    let mut done = 0;
    windows
        .iter()
        .map(|w| {
            let r = Window {
                start: done.max(w.start),
                end: w.end,
            };
            done = w.end;
            r
        })
        .collect()
}

/// Maximum over frames outside the first window of (last frame of the
/// emitting window − frame index).
pub fn max_emission_delay(windows: &[Window]) -> usize {
    emission_schedule(windows)
        .iter()
        .skip(1)
        .filter(|w| w.end > w.start)
        .map(|w| w.end - 1 - w.start)
        .max()
        .unwrap_or(0)
}

/// Assignment maximizing total IoU between `rows` and `cols`; every pair of
/// the smaller side is matched.
pub fn best_iou_assignment(iou: &[Vec<f64>], cols: usize) -> Result<Vec<(usize, usize)>> {
    let rows = iou.len();
    if iou.iter().any(|r| r.len() != cols) {
        bail!(Shape, "ragged IoU matrix");
    }
    if rows >= cols {
        hungarian_match(&CostMatrix::from_fn(rows, cols, |r, c| -iou[r][c]))
    } else {
        let mut pairs: Vec<(usize, usize)> = hungarian_match(&CostMatrix::from_fn(cols, rows, |c, r| -iou[r][c]))?
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect();
        pairs.sort_unstable();
        Ok(pairs)
    }
}

/// IoU over several frames; zero when both sides are empty, so that absent
/// tracks never match.
fn overlap_iou(a: &[Mask], b: &[Mask]) -> f64 {
    let (mut i, mut u) = (0, 0);
    for (x, y) in a.iter().zip(b) {
        i += x.intersection_count(y);
        u += x.union_count(y);
    }
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

/// Maps each new detection to the previous track it continues, or `None`
/// for a fresh track. Both sides hold masks on the same overlap frames.
pub fn associate_instances(prev: &[Vec<Mask>], new: &[Vec<Mask>], iou_min: f64) -> Result<Vec<Option<usize>>> {
    let frames = prev.iter().chain(new).map(|m| m.len()).collect::<Vec<_>>();
    if frames.windows(2).any(|w| w[0] != w[1]) {
        bail!(Shape, "overlap mask sets cover different frame counts");
    }
    let iou: Vec<Vec<f64>> = new.iter().map(|n| prev.iter().map(|p| overlap_iou(n, p)).collect()).collect();
    let mut out = vec![None; new.len()];
    for (r, c) in best_iou_assignment(&iou, prev.len())? {
        if iou[r][c] >= iou_min && iou[r][c] > 0.0 {
            out[r] = Some(c);
        }
    }
    Ok(out)
}

/// Elementwise mean of two sets of per-frame logits over the same frames.
pub fn merge_semantic(prev: &[Vec<f64>], new: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if prev.len() != new.len() || prev.iter().zip(new).any(|(a, b)| a.len() != b.len()) {
        bail!(Shape, "semantic logits of the overlap differ in shape");
    }
    Ok(prev
        .iter()
        .zip(new)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect())
        .collect())
}

/// Greedy exclusive assignment: candidates in priority order claim their
/// unclaimed pixels, and a candidate left with less than `threshold` of its
/// area is dropped.
pub fn suppress_overlaps(candidates: &[&[Mask]], threshold: f64) -> Vec<Option<Vec<Mask>>> {
    let Some(first) = candidates.iter().find_map(|c| c.first()) else {
        return vec![None; candidates.len()];
    };
    let frames = candidates[0].len();
    let mut claimed = vec![Mask::empty(first.height, first.width); frames];
    candidates
        .iter()
        .map(|masks| {
            let area: usize = masks.iter().map(Mask::area).sum();
            if area == 0 {
                return None;
            }
            let kept: Vec<Mask> = masks
                .iter()
                .zip(&claimed)
                .map(|(m, c)| Mask {
                    height: m.height,
                    width: m.width,
                    data: m.data.iter().zip(&c.data).map(|(&a, &b)| a && !b).collect(),
                })
                .collect();
            let left: usize = kept.iter().map(Mask::area).sum();
            if (left as f64) < threshold * area as f64 || left == 0 {
                return None;
            }
            for (c, k) in claimed.iter_mut().zip(&kept) {
                for (x, &v) in c.data.iter_mut().zip(&k.data) {
                    *x |= v;
                }
            }
            Some(kept)
        })
        .collect()
}

/// Stride-4 logit rows `(R, T*h*w)` upsampled to full resolution, as
/// `[row][frame]` planes.
fn upsample_rows(x: &Tensor, frames: usize, small: (usize, usize), full: (usize, usize)) -> Result<Vec<Vec<Vec<f64>>>> {
    let rows = x.dims()[0];
    let v = to_vec_f64(x)?;
    let (hw, chunk) = (small.0 * small.1, frames * small.0 * small.1);
    Ok((0..rows)
        .map(|r| {
            (0..frames)
                .map(|t| {
                    let off = r * chunk + t * hw;
                    resize_plane(&v[off..off + hw], small.0, small.1, full.0, full.1)
                })
                .collect()
        })
        .collect())
}

/// One instance found in a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Softmax probability of every class column, background excluded.
    pub probs: Vec<f64>,
    /// Full-resolution mask per clip frame, exclusive among detections.
    pub masks: Vec<Mask>,
}

/// Instance detections of one clip: queries whose best allowed class
/// reaches `score_min`, ranked by that score and made exclusive.
pub fn detect_instances(
    out: &SegmentationOutput,
    columns: &[u32],
    allowed: &[u32],
    image: (usize, usize),
    cfg: &InferenceConfig,
) -> Result<Vec<Detection>> {
    let (Some(masks), Some(logits)) = (&out.instance_masks, &out.class_logits) else {
        bail!(TaskMismatch, "outputs carry no instance heads");
    };
    let k = columns.len() + 1;
    let probs = crate::losses::softmax_rows(&to_vec_f64(logits)?, k);
    let planes = upsample_rows(masks, out.frames, (out.height, out.width), image)?;
    let allowed_cols: Vec<usize> = (0..columns.len()).filter(|&c| allowed.contains(&columns[c])).collect();
    let mut ranked: Vec<(usize, f64)> = probs
        .iter()
        .enumerate()
        .map(|(i, p)| (i, allowed_cols.iter().map(|&c| p[c]).fold(0.0, f64::max)))
        .filter(|&(_, s)| s >= cfg.score_min)
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let binary: Vec<Vec<Mask>> = ranked
        .iter()
        .map(|&(i, _)| {
            planes[i]
                .iter()
                .map(|p| Mask {
                    height: image.0,
                    width: image.1,
                    data: p.iter().map(|&v| v > 0.0).collect(),
                })
                .collect()
        })
        .collect();
    let refs: Vec<&[Mask]> = binary.iter().map(|m| m.as_slice()).collect();
    Ok(suppress_overlaps(&refs, cfg.overlap_threshold)
        .into_iter()
        .zip(&ranked)
        .filter_map(|(m, &(i, _))| {
            m.map(|masks| Detection {
                probs: probs[i][..columns.len()].to_vec(),
                masks,
            })
        })
        .collect())
}

#[derive(Debug, Clone)]
struct Track {
    id: u32,
    vote: Vec<f64>,
    clips: usize,
    /// Masks of the latest window the track was detected in; empty when it
    /// was missed there.
    last: Vec<Mask>,
    masks: Vec<Mask>,
}

/// Live instance tracks of one video.
#[derive(Debug, Clone)]
pub struct TrackStore {
    tracks: Vec<Track>,
    next_id: u32,
    frames: usize,
    image: (usize, usize),
}

impl TrackStore {
    pub fn new(frames: usize, image: (usize, usize)) -> Self {
        Self {
            tracks: Vec::new(),
            next_id: 1,
            frames,
            image,
        }
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    /// Adds the detections of window `cur` (preceded by `prev`), writing
    /// their masks on the frames `cur` finalizes.
    pub fn update(&mut self, prev: Option<Window>, cur: Window, dets: Vec<Detection>, iou_min: f64) -> Result<()> {
        let ov_start = cur.start;
        let ov_end = prev.map_or(cur.start, |p| p.end.max(cur.start));
        let link = match prev {
            Some(p) if ov_end > ov_start => {
                let alive: Vec<usize> = (0..self.tracks.len()).filter(|&i| !self.tracks[i].last.is_empty()).collect();
                let old: Vec<Vec<Mask>> = alive
                    .iter()
                    .map(|&i| self.tracks[i].last[ov_start - p.start..ov_end - p.start].to_vec())
                    .collect();
                let new: Vec<Vec<Mask>> = dets.iter().map(|d| d.masks[..ov_end - ov_start].to_vec()).collect();
                associate_instances(&old, &new, iou_min)?
                    .into_iter()
                    .map(|m| m.map(|j| alive[j]))
                    .collect()
            }
            _ => vec![None; dets.len()],
        };
        let mut seen = vec![false; self.tracks.len()];
        for (d, l) in dets.into_iter().zip(link) {
            let i = match l {
                Some(i) => i,
                None => {
                    self.tracks.push(Track {
                        id: self.next_id,
                        vote: vec![0.0; d.probs.len()],
                        clips: 0,
                        last: Vec::new(),
                        masks: vec![Mask::empty(self.image.0, self.image.1); self.frames],
                    });
                    seen.push(false);
                    self.next_id += 1;
                    self.tracks.len() - 1
                }
            };
            seen[i] = true;
            let t = &mut self.tracks[i];
            for (v, p) in t.vote.iter_mut().zip(&d.probs) {
                *v += p;
            }
            t.clips += 1;
            for f in ov_end..cur.end {
                t.masks[f] = d.masks[f - cur.start].clone();
            }
            t.last = d.masks;
        }
        for (t, s) in self.tracks.iter_mut().zip(seen) {
            if !s {
                t.last.clear();
            }
        }
        Ok(())
    }
}

/// Tracks with class = argmax of the mean class probabilities over the
/// allowed columns and score = that mean; weak or empty tracks are dropped.
pub fn postprocess_vis(store: &TrackStore, columns: &[u32], allowed: &[u32], score_min: f64) -> Vec<TrackResult> {
    store
        .tracks
        .iter()
        .filter_map(|t| {
            let (col, sum) = (0..columns.len())
                .filter(|&c| allowed.contains(&columns[c]))
                .map(|c| (c, t.vote[c]))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))?;
            let score = sum / t.clips.max(1) as f64;
            if score < score_min || t.masks.iter().all(Mask::is_empty) {
                return None;
            }
            Some(TrackResult {
                id: t.id,
                class_id: Some(columns[col]),
                score,
                masks: t.masks.clone(),
            })
        })
        .collect()
}

/// Panoptic fusion: tracks claim pixels in descending score with overlap
/// suppression; every other pixel takes the semantic argmax.
///
/// `semantic[f]` holds `C` class-major full-resolution planes.
pub fn postprocess_vps(
    tracks: Vec<TrackResult>,
    semantic: &[Vec<f64>],
    columns: &[u32],
    image: (usize, usize),
    overlap_threshold: f64,
) -> Result<(Vec<TrackResult>, Vec<StuffResult>)> {
    let (h, w) = image;
    let c = columns.len();
    if semantic.iter().any(|s| s.len() != c * h * w) {
        bail!(Shape, "semantic planes do not match {c} classes of {h}x{w}");
    }
    let mut order: Vec<usize> = (0..tracks.len()).collect();
    order.sort_by(|&a, &b| tracks[b].score.total_cmp(&tracks[a].score).then(tracks[a].id.cmp(&tracks[b].id)));
    let refs: Vec<&[Mask]> = order.iter().map(|&i| tracks[i].masks.as_slice()).collect();
    let kept = suppress_overlaps(&refs, overlap_threshold);
    let mut out: Vec<TrackResult> = Vec::new();
    for (&i, k) in order.iter().zip(kept) {
        if let Some(masks) = k {
            out.push(TrackResult {
                masks,
                ..tracks[i].clone()
            });
        }
    }
    out.sort_by_key(|t| t.id);
    let mut stuff: Vec<StuffResult> = columns
        .iter()
        .map(|&class_id| StuffResult {
            class_id,
            masks: vec![Mask::empty(h, w); semantic.len()],
        })
        .collect();
    for (f, planes) in semantic.iter().enumerate() {
        for p in 0..h * w {
            if out.iter().any(|t| t.masks[f].data[p]) {
                continue;
            }
            let best = (0..c).max_by(|&a, &b| planes[a * h * w + p].total_cmp(&planes[b * h * w + p]).then(b.cmp(&a)));
            if let Some(k) = best {
                stuff[k].masks[f].data[p] = true;
            }
        }
    }
    stuff.retain(|s| s.masks.iter().any(|m| !m.is_empty()));
    Ok((out, stuff))
}

/// Per-pixel argmax over the objects and a background option (the object
/// background logit if present, else 0). `objects[o][f]`, `background[f]`
/// are full-resolution logit planes.
pub fn binarize_objects(objects: &[Vec<Vec<f64>>], background: Option<&[Vec<f64>]>, image: (usize, usize)) -> Vec<Vec<Mask>> {
    let frames = objects.first().map_or(0, |o| o.len());
    let mut out = vec![vec![Mask::empty(image.0, image.1); frames]; objects.len()];
    for f in 0..frames {
        for p in 0..image.0 * image.1 {
            let bg = background.map_or(0.0, |b| b[f][p]);
            let best = (0..objects.len()).max_by(|&a, &b| objects[a][f][p].total_cmp(&objects[b][f][p]).then(b.cmp(&a)));
            if let Some(o) = best {
                if objects[o][f][p] > bg {
                    out[o][f].data[p] = true;
                }
            }
        }
    }
    out
}

/// Where a guided object's queries for a clip come from.
#[derive(Debug, Clone)]
pub enum ObjectSource {
    /// Encode from a full-resolution mask on clip frame `frame`.
    Mask { frame: usize, mask: Mask },
    /// Encode from one pixel on clip frame `frame`.
    Point { frame: usize, y: usize, x: usize },
    /// Reuse earlier query rows `(q, D)`.
    Carry { queries: Tensor, embeddings: Tensor },
}

fn rows_of(set: &TargetQuerySet, idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let i = index_tensor(idx.iter().map(|&v| v as u32).collect())?;
    Ok((set.queries.index_select(&i, 0)?, set.embeddings.index_select(&i, 0)?))
}

/// The rows of object `o` in `set`.
pub fn object_rows(set: &TargetQuerySet, o: usize) -> Result<(Tensor, Tensor)> {
    let groups = set.object_groups();
    let Some(g) = groups.get(o) else {
        bail!(InvalidInput, "query set has no object {o}");
    };
    rows_of(set, g)
}

/// Builds the object query set for one clip from mixed sources. Mask and
/// point sources are encoded in one call per kind; background rows come
/// from the mask encoding, else the point encoding, else `carried_bg`.
pub fn build_object_queries(
    model: &Model,
    pyr: &FeaturePyramid,
    sources: &[ObjectSource],
    carried_bg: Option<(Tensor, Tensor)>,
    rng: &mut ChaCha8Rng,
) -> Result<TargetQuerySet> {
    if sources.is_empty() {
        return TargetQuerySet::empty(model.dim(), model.dtype());
    }
    let mut masks = Vec::new();
    let mut points = Vec::new();
    for s in sources {
        match s {
            ObjectSource::Mask { frame, mask } => masks.push(crate::queries::ObjectCueInput {
                frame: *frame,
                mask: mask.clone(),
            }),
            ObjectSource::Point { frame, y, x } => points.push((*frame, *y, *x)),
            ObjectSource::Carry { .. } => {}
        }
    }
    let mask_set = if masks.is_empty() { None } else { Some(model.mask_cue_queries(pyr, &masks, rng)?) };
    let point_set = if points.is_empty() { None } else { Some(model.point_cue_queries(pyr, &points, rng)?) };
    let (mut mi, mut pi) = (0, 0);
    let (mut q, mut e, mut roles) = (Vec::new(), Vec::new(), Vec::new());
    for (o, s) in sources.iter().enumerate() {
        let (rq, re) = match s {
            ObjectSource::Mask { .. } => {
                mi += 1;
                object_rows(mask_set.as_ref().expect("mask set"), mi - 1)?
            }
            ObjectSource::Point { .. } => {
                pi += 1;
                object_rows(point_set.as_ref().expect("point set"), pi - 1)?
            }
            ObjectSource::Carry { queries, embeddings } => (queries.clone(), embeddings.clone()),
        };
        roles.extend((0..rq.dims()[0]).map(|segment| QueryRole::Object { object: o, segment }));
        q.push(rq);
        e.push(re);
    }
    let bg = match mask_set.as_ref().or(point_set.as_ref()) {
        Some(set) => {
            let idx = set.object_background_indices();
            (!idx.is_empty()).then(|| rows_of(set, &idx)).transpose()?
        }
        None => carried_bg,
    };
    if let Some((bq, be)) = bg {
        roles.extend((0..bq.dims()[0]).map(|cell| QueryRole::ObjectBackground { cell }));
        q.push(bq);
        e.push(be);
    }
    Ok(TargetQuerySet {
        queries: Tensor::cat(&q, 0)?,
        embeddings: Tensor::cat(&e, 0)?,
        roles,
        classifier: None,
    })
}

/// Object background rows of `set`, if any.
pub fn background_rows(set: &TargetQuerySet) -> Result<Option<(Tensor, Tensor)>> {
    let idx = set.object_background_indices();
    (!idx.is_empty()).then(|| rows_of(set, &idx)).transpose()
}

/// Re-encodes guided objects for the next clip from predicted masks on
/// clip frame `frame`; objects whose predicted mask is empty keep their
/// rows from `previous`.
pub fn vos_handoff(
    model: &Model,
    pyr: &FeaturePyramid,
    predicted: &[Mask],
    frame: usize,
    previous: &TargetQuerySet,
    rng: &mut ChaCha8Rng,
) -> Result<TargetQuerySet> {
    let sources = predicted
        .iter()
        .enumerate()
        .map(|(o, m)| {
            Ok(if m.is_empty() {
                let (queries, embeddings) = object_rows(previous, o)?;
                ObjectSource::Carry { queries, embeddings }
            } else {
                ObjectSource::Mask { frame, mask: m.clone() }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    build_object_queries(model, pyr, &sources, background_rows(previous)?, rng)
}

/// A guided object: its output id, the video frame of its cue, and the cue.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectPrompt {
    pub id: u32,
    pub frame: usize,
    pub cue: ObjectCue,
}

/// One prompt per annotated track at its first visible frame: the full
/// mask for VOS, an interior point for PET. Ids are the track ids.
pub fn object_prompts(task: Task, annotations: &[PanopticFrame]) -> Result<Vec<ObjectPrompt>> {
    if !task.is_object_guided() {
        bail!(TaskMismatch, "{task} takes no object prompts");
    }
    let mut first: BTreeMap<u32, usize> = BTreeMap::new();
    for (f, a) in annotations.iter().enumerate() {
        for id in a.track_ids() {
            first.entry(id).or_insert(f);
        }
    }
    Ok(first
        .into_iter()
        .map(|(id, frame)| {
            let mask = annotations[frame].track_mask(id);
            let cue = match task {
                Task::Pet => {
                    let (y, x) = interior_point(&mask);
                    ObjectCue::Point(y, x)
                }
                _ => ObjectCue::Mask(mask),
            };
            ObjectPrompt { id, frame, cue }
        })
        .collect())
}

/// One group of targets for a pass.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskTargets {
    /// VIS or VPS over a dataset's class table.
    Classes { task: Task, dataset: String },
    /// VOS (mask cues) or PET (point cues).
    Objects { task: Task, objects: Vec<ObjectPrompt> },
}

impl TaskTargets {
    pub fn task(&self) -> Task {
        match self {
            TaskTargets::Classes { task, .. } | TaskTargets::Objects { task, .. } => *task,
        }
    }

    fn validate(&self, frames: usize, image: (usize, usize)) -> Result<()> {
        match self {
            TaskTargets::Classes { task, .. } if task.is_object_guided() => {
                bail!(TaskMismatch, "{task} needs object cues, not a class list")
            }
            TaskTargets::Objects { task, .. } if !task.is_object_guided() => {
                bail!(TaskMismatch, "{task} needs a class list, not object cues")
            }
            TaskTargets::Objects { task, objects } => {
                if objects.is_empty() {
                    bail!(InvalidInput, "{task} needs at least one object cue");
                }
                if objects.windows(2).any(|w| w[0].id >= w[1].id) {
                    bail!(InvalidInput, "object ids must be unique and increasing");
                }
                for o in objects {
                    if o.frame >= frames {
                        bail!(InvalidInput, "object {} cue frame {} outside the {frames}-frame video", o.id, o.frame);
                    }
                    match (&o.cue, task) {
                        (ObjectCue::Mask(m), Task::Vos) => {
                            if (m.height, m.width) != image || m.is_empty() {
                                bail!(InvalidInput, "object {} cue mask is empty or not {}x{}", o.id, image.0, image.1);
                            }
                        }
                        (ObjectCue::Point(y, x), Task::Pet) => {
                            if *y >= image.0 || *x >= image.1 {
                                bail!(InvalidInput, "object {} cue point outside the frame", o.id);
                            }
                        }
                        _ => bail!(TaskMismatch, "object {} cue kind does not fit {task}", o.id),
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

struct ClassGroup {
    task: Task,
    queries: TargetQuerySet,
    columns: Vec<u32>,
    things: Vec<u32>,
    store: TrackStore,
    /// Stride-4 `C × h × w` logits per frame.
    semantic: Vec<Option<Vec<f64>>>,
}

struct ObjectState {
    prompt: ObjectPrompt,
    started: bool,
    masks: Vec<Mask>,
}

struct ObjectGroup {
    task: Task,
    objects: Vec<ObjectState>,
    /// Encoder output of the previous window and the active objects it
    /// covers, in order.
    previous: Option<(TargetQuerySet, Vec<usize>)>,
    /// Binarized masks of the previous window, per active object.
    last: Vec<Vec<Mask>>,
}

impl ObjectGroup {
    fn sources(&self, w: Window, prev: Option<Window>) -> Result<(Vec<ObjectSource>, Vec<usize>)> {
        let mut sources = Vec::new();
        let mut active = Vec::new();
        for (i, o) in self.objects.iter().enumerate() {
            if o.prompt.frame >= w.end {
                continue;
            }
            let src = if !o.started {
                let frame = o.prompt.frame - w.start;
                match &o.prompt.cue {
                    ObjectCue::Mask(m) => ObjectSource::Mask { frame, mask: m.clone() },
                    ObjectCue::Point(y, x) => ObjectSource::Point { frame, y: *y, x: *x },
                }
            } else {
                let (Some((set, covered)), Some(p)) = (&self.previous, prev) else {
                    bail!(InvalidInput, "object {} started without a previous window", o.prompt.id);
                };
                let slot = covered.iter().position(|&c| c == i).expect("started objects are covered");
                let f = w.start.max(o.prompt.frame);
                let mask = &self.last[slot][f - p.start];
                if mask.is_empty() {
                    let (queries, embeddings) = object_rows(set, slot)?;
                    ObjectSource::Carry { queries, embeddings }
                } else {
                    ObjectSource::Mask {
                        frame: f - w.start,
                        mask: mask.clone(),
                    }
                }
            };
            sources.push(src);
            active.push(i);
        }
        Ok((sources, active))
    }
}

/// Runs every target group over the video in one decoder pass per window
/// and returns one result per group, in input order.
pub fn run_video(
    model: &Model,
    video: &str,
    clip: &VideoClip,
    targets: &[TaskTargets],
    cfg: &InferenceConfig,
) -> Result<Vec<VideoResult>> {
    cfg.validate()?;
    let frames = clip.num_frames();
    let image = (clip.height, clip.width);
    let n_class = targets.iter().filter(|t| matches!(t, TaskTargets::Classes { .. })).count();
    let n_obj = targets.len() - n_class;
    if targets.is_empty() || n_class > 1 || n_obj > 1 {
        bail!(InvalidInput, "a pass takes at most one class group and one object group");
    }
    for t in targets {
        t.validate(frames, image)?;
    }
    let windows = window_video(frames, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut class_group = None;
    let mut object_group = None;
    for t in targets {
        match t {
            TaskTargets::Classes { task, dataset } => {
                let queries = model.class_queries(*task, dataset)?;
                class_group = Some(ClassGroup {
                    task: *task,
                    columns: Model::class_columns(&queries),
                    things: model.bank.classes(dataset)?.things.clone(),
                    queries,
                    store: TrackStore::new(frames, image),
                    semantic: vec![None; frames],
                });
            }
            TaskTargets::Objects { task, objects } => {
                object_group = Some(ObjectGroup {
                    task: *task,
                    objects: objects
                        .iter()
                        .map(|p| ObjectState {
                            prompt: p.clone(),
                            started: false,
                            masks: vec![Mask::empty(image.0, image.1); frames],
                        })
                        .collect(),
                    previous: None,
                    last: Vec::new(),
                });
            }
        }
    }

    let mut prev: Option<Window> = None;
    for &w in &windows {
        let pyr = model.features(&clip.slice(w.start, w.end))?;
        let mut parts = Vec::new();
        if let Some(g) = &class_group {
            parts.push(g.queries.clone());
        }
        let mut active = Vec::new();
        if let Some(g) = &object_group {
            let (sources, act) = g.sources(w, prev)?;
            let carried = match &g.previous {
                Some((set, _)) => background_rows(set)?,
                None => None,
            };
            let set = build_object_queries(model, &pyr, &sources, carried, &mut rng)?;
            active = act;
            parts.push(set);
        }
        let queries = concat_task_queries(&parts)?;
        // A window before any object cue with no class group has nothing
        // to decode.
        if queries.is_empty() {
            prev = Some(w);
            continue;
        }
        let decoded = model.decode(&queries, &pyr)?;
        let out = decoded.last();
        let emit_from = prev.map_or(w.start, |p| p.end.max(w.start));

        if let Some(g) = &mut class_group {
            let dets = detect_instances(out, &g.columns, &g.things, image, cfg)?;
            g.store.update(prev, w, dets, cfg.iou_min)?;
            if g.task == Task::Vps {
                let Some(sem) = &out.semantic_logits else {
                    bail!(TaskMismatch, "VPS outputs carry no semantic head");
                };
                let v = to_vec_f64(sem)?;
                let (c, hw) = (g.columns.len(), out.height * out.width);
                for t in 0..out.frames {
                    let mut plane = vec![0.0; c * hw];
                    for k in 0..c {
                        let off = k * out.frames * hw + t * hw;
                        plane[k * hw..(k + 1) * hw].copy_from_slice(&v[off..off + hw]);
                    }
                    let slot = &mut g.semantic[w.start + t];
                    *slot = Some(match slot.take() {
                        Some(p) => merge_semantic(&[p], &[plane])?.remove(0),
                        None => plane,
                    });
                }
            }
        }

        if let Some(g) = &mut object_group {
            if !active.is_empty() {
                let Some(om) = &out.object_masks else {
                    bail!(TaskMismatch, "outputs carry no object heads");
                };
                let small = (out.height, out.width);
                let planes = upsample_rows(om, out.frames, small, image)?;
                let bg = match &out.object_background_mask {
                    Some(b) => Some(upsample_rows(b, out.frames, small, image)?.remove(0)),
                    None => None,
                };
                let masks = binarize_objects(&planes, bg.as_deref(), image);
                for (slot, &i) in active.iter().enumerate() {
                    let o = &mut g.objects[i];
                    o.started = true;
                    for f in emit_from.max(o.prompt.frame)..w.end {
                        o.masks[f] = masks[slot][f - w.start].clone();
                    }
                }
                let obj_set = parts.last().expect("object part").clone();
                g.previous = Some((obj_set, active.clone()));
                g.last = masks;
            }
        }
        prev = Some(w);
    }

    let mut results = Vec::new();
    for t in targets {
        let result = match t {
            TaskTargets::Classes { .. } => {
                let g = class_group.as_ref().expect("class group");
                let tracks = postprocess_vis(&g.store, &g.columns, &g.things, cfg.score_min);
                let (tracks, stuff) = if g.task == Task::Vps {
                    let (h4, w4) = (image.0 / 4, image.1 / 4);
                    let c = g.columns.len();
                    let mut full = Vec::with_capacity(frames);
                    for s in &g.semantic {
                        let s = s.as_ref().expect("every frame is covered");
                        let mut planes = Vec::with_capacity(c * image.0 * image.1);
                        for k in 0..c {
                            planes.extend(resize_plane(&s[k * h4 * w4..(k + 1) * h4 * w4], h4, w4, image.0, image.1));
                        }
                        full.push(planes);
                    }
                    postprocess_vps(tracks, &full, &g.columns, image, cfg.overlap_threshold)?
                } else {
                    (tracks, Vec::new())
                };
                VideoResult {
                    video: video.to_string(),
                    task: g.task,
                    height: image.0,
                    width: image.1,
                    num_frames: frames,
                    tracks,
                    stuff,
                }
            }
            TaskTargets::Objects { .. } => {
                let g = object_group.as_ref().expect("object group");
                VideoResult {
                    video: video.to_string(),
                    task: g.task,
                    height: image.0,
                    width: image.1,
                    num_frames: frames,
                    tracks: g
                        .objects
                        .iter()
                        .map(|o| TrackResult {
                            id: o.prompt.id,
                            class_id: None,
                            score: 1.0,
                            masks: o.masks.clone(),
                        })
                        .collect(),
                    stuff: Vec::new(),
                }
            }
        };
        result.validate()?;
        results.push(result);
    }
    Ok(results)
}
