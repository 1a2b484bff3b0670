//! Per-task supervision derived from panoptic video annotations.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PanopticFrame;
use crate::error::{bail, Error, Result};
use crate::types::{Mask, Task, VideoClip};

#[derive(Debug, Clone, PartialEq)]
pub struct TrackTarget {
    pub track_id: u32,
    pub class_id: u32,
    /// One mask per clip frame (empty where the track is not visible).
    pub masks: Vec<Mask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceTargets {
    pub tracks: Vec<TrackTarget>,
    /// Per-frame per-pixel class ids, present for VPS only.
    pub semantic: Option<Vec<Vec<u32>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectCue {
    Mask(Mask),
    /// `(y, x)` pixel inside the object.
    Point(usize, usize),
}

impl ObjectCue {
    /// The cue rasterized as a mask; a point becomes a one-pixel mask.
    pub fn to_mask(&self, height: usize, width: usize) -> Mask {
        match self {
            ObjectCue::Mask(m) => m.clone(),
            ObjectCue::Point(y, x) => {
                let mut m = Mask::empty(height, width);
                m.set(*y, *x, true);
                m
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTarget {
    pub track_id: u32,
    /// First clip frame in which the object is visible.
    pub cue_frame: usize,
    pub cue: ObjectCue,
    pub masks: Vec<Mask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTargets {
    pub objects: Vec<ObjectTarget>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Instance(InstanceTargets),
    Object(ObjectTargets),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample {
    pub clip: VideoClip,
    pub task: Task,
    pub targets: Targets,
}

#[derive(Debug, Clone, Default)]
pub struct TargetOptions {
    /// Upper bound on the VOS/PET subset size (`None`: all tracks).
    pub max_objects: Option<usize>,
}

/// Task sampling probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights(pub BTreeMap<Task, f64>);

impl TaskWeights {
    /// Pretraining-stage weights.
    pub fn pretrain_default() -> Self {
        TaskWeights(BTreeMap::from([
            (Task::Vps, 0.3),
            (Task::Vis, 0.3),
            (Task::Vos, 0.28),
            (Task::Pet, 0.12),
        ]))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((t, w)) = self.0.iter().find(|(_, w)| !(**w >= 0.0) || !w.is_finite()) {
            bail!(Config, "task weight for {t} is negative or not finite: {w}");
        }
        let total: f64 = self.0.values().sum();
        if (total - 1.0).abs() > 1e-6 {
            bail!(Config, "task weights sum to {total}, expected 1");
        }
        Ok(())
    }

    pub fn get(&self, task: Task) -> f64 {
        self.0.get(&task).copied().unwrap_or(0.0)
    }
}

/// One categorical draw from the task weights.
pub fn sample_task<R: Rng>(weights: &TaskWeights, rng: &mut R) -> Result<Task> {
    weights.validate()?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = None;
    for (&t, &w) in &weights.0 {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = Some(t);
        if u < acc {
            return Ok(t);
        }
    }
    last.ok_or_else(|| Error::Config("all task weights are zero".into()))
}

/// Converts panoptic clip annotations into supervision for `task`.
pub fn derive_task_targets<R: Rng>(
    clip: &VideoClip,
    annotations: &[PanopticFrame],
    task: Task,
    options: &TargetOptions,
    rng: &mut R,
) -> Result<TaskSample> {
    if annotations.len() != clip.num_frames() {
        bail!(Shape, "{} annotations for {} frames", annotations.len(), clip.num_frames());
    }
    for a in annotations {
        a.validate()?;
    }
    // Tracks in order of first appearance, then id.
    let mut first_seen: BTreeMap<u32, (usize, u32)> = BTreeMap::new();
    for (t, a) in annotations.iter().enumerate() {
        for s in a.segments.values() {
            if let Some(tid) = s.track_id {
                first_seen.entry(tid).or_insert((t, s.class_id));
            }
        }
    }
    let track_ids: Vec<u32> = first_seen.keys().copied().collect();
    let masks_for = |tid: u32| -> Vec<Mask> { annotations.iter().map(|a| a.track_mask(tid)).collect() };

    let targets = match task {
        Task::Vis | Task::Vps => {
            let tracks = track_ids
                .iter()
                .map(|&tid| TrackTarget {
                    track_id: tid,
                    class_id: first_seen[&tid].1,
                    masks: masks_for(tid),
                })
                .collect();
            let semantic = (task == Task::Vps).then(|| annotations.iter().map(|a| a.class_map()).collect());
            Targets::Instance(InstanceTargets { tracks, semantic })
        }
        Task::Vos | Task::Pet => {
            if track_ids.is_empty() {
                return Err(Error::NoTrackableObjects(
                    "clip contains no thing tracks to guide".to_string(),
                ));
            }
            let cap = options.max_objects.unwrap_or(track_ids.len()).clamp(1, track_ids.len());
            let count = rng.random_range(1..=cap);
            let mut chosen: Vec<u32> = sample(rng, track_ids.len(), count)
                .into_iter()
                .map(|i| track_ids[i])
                .collect();
            chosen.sort_unstable();
            let objects = chosen
                .into_iter()
                .map(|tid| {
                    let cue_frame = first_seen[&tid].0;
                    let masks = masks_for(tid);
                    let cue_mask = masks[cue_frame].clone();
                    let cue = if task == Task::Pet {
                        let (y, x) = interior_point(&cue_mask);
                        ObjectCue::Point(y, x)
                    } else {
                        ObjectCue::Mask(cue_mask)
                    };
                    ObjectTarget {
                        track_id: tid,
                        cue_frame,
                        cue,
                        masks,
                    }
                })
                .collect();
            Targets::Object(ObjectTargets { objects })
        }
    };
    Ok(TaskSample {
        clip: clip.clone(),
        task,
        targets,
    })
}

/// Mask centroid, snapped to the nearest mask pixel when it falls outside.
pub fn interior_point(mask: &Mask) -> (usize, usize) {
    let (cy, cx) = mask.centroid().expect("interior_point of empty mask");
    let (iy, ix) = ((cy - 0.5).round() as usize, (cx - 0.5).round() as usize);
    let iy = iy.min(mask.height - 1);
    let ix = ix.min(mask.width - 1);
    if mask.get(iy, ix) {
        return (iy, ix);
    }
    mask.points()
        .into_iter()
        .min_by(|a, b| {
            let da = (a.0 as f64 + 0.5 - cy).powi(2) + (a.1 as f64 + 0.5 - cx).powi(2);
            let db = (b.0 as f64 + 0.5 - cy).powi(2) + (b.1 as f64 + 0.5 - cx).powi(2);
            da.partial_cmp(&db).unwrap()
        })
        .unwrap()
}

impl TaskSample {
    /// Track ids referenced by the targets.
    pub fn track_ids(&self) -> BTreeSet<u32> {
        match &self.targets {
            Targets::Instance(t) => t.tracks.iter().map(|t| t.track_id).collect(),
            Targets::Object(o) => o.objects.iter().map(|o| o.track_id).collect(),
        }
    }
}
